#include "neuronalloc/importance.hpp"

#include <cmath>
#include <fmt/format.h>

namespace nalloc {

std::string_view criterion_name(Criterion c) {
  return c == Criterion::te ? "te" : "av";
}

Criterion parse_criterion(std::string_view name) {
  if (name == "te") return Criterion::te;
  if (name == "av") return Criterion::av;
  throw data_error(fmt::format("unknown criterion '{}'", name));
}

ImportanceTable::ImportanceTable(Criterion criterion, std::vector<std::string> pairs,
                                 std::size_t registry_size)
    : criterion_(criterion), pairs_(std::move(pairs)), registry_size_(registry_size) {
  if (pairs_.empty()) throw usage_error("importance table needs at least one pair");
  if (registry_size_ == 0) throw usage_error("importance table needs a non-empty registry");
  sums_.resize(pairs_.size());
  for (auto& row : sums_) row.resize(registry_size_);
  tokens_.assign(pairs_.size(), 0);
}

void ImportanceTable::require_open(std::string_view what) const {
  if (finalized_) {
    throw usage_error(fmt::format("{} on a finalized importance table", what));
  }
}

void ImportanceTable::require_finalized(std::string_view what) const {
  if (!finalized_) {
    throw usage_error(fmt::format("{} before the importance table is finalized", what));
  }
}

void ImportanceTable::add_contribution(int pair_idx, std::size_t neuron, double value) {
  require_open("accumulation");
  if (!(value >= 0.0) || !std::isfinite(value)) {
    throw numeric_error("importance contributions must be finite and non-negative");
  }
  sums_.at(pair_idx).at(neuron).add(value);
}

void ImportanceTable::add_tokens(int pair_idx, std::int64_t count) {
  require_open("accumulation");
  if (count < 0) throw usage_error("token counts cannot be negative");
  tokens_.at(pair_idx) += count;
}

void ImportanceTable::merge(const ImportanceTable& partial) {
  require_open("merge");
  partial.require_open("merge with");
  if (partial.criterion_ != criterion_ || partial.pairs_ != pairs_ ||
      partial.registry_size_ != registry_size_) {
    throw usage_error("merging importance tables with different shapes");
  }
  for (std::size_t m = 0; m < sums_.size(); ++m) {
    for (std::size_t i = 0; i < registry_size_; ++i) {
      sums_[m][i].merge(partial.sums_[m][i]);
    }
    tokens_[m] += partial.tokens_[m];
  }
}

void ImportanceTable::finalize() {
  require_open("finalize");
  for (std::size_t m = 0; m < pairs_.size(); ++m) {
    if (tokens_[m] <= 0) {
      throw data_error(fmt::format("no tokens accumulated for pair '{}'", pairs_[m]));
    }
  }
  scores_.resize(pairs_.size());
  for (std::size_t m = 0; m < pairs_.size(); ++m) {
    scores_[m].resize(registry_size_);
    const double inv = 1.0 / static_cast<double>(tokens_[m]);
    for (std::size_t i = 0; i < registry_size_; ++i) {
      scores_[m][i] = sums_[m][i].value() * inv;
    }
  }
  sums_.clear();
  finalized_ = true;
}

double ImportanceTable::score(int pair_idx, std::size_t neuron) const {
  require_finalized("score lookup");
  return scores_.at(pair_idx).at(neuron);
}

std::vector<double> ImportanceTable::mean_importance() const {
  require_finalized("mean importance");
  std::vector<double> mean(registry_size_, 0.0);
  for (const auto& row : scores_) {
    for (std::size_t i = 0; i < registry_size_; ++i) mean[i] += row[i];
  }
  const double inv = 1.0 / static_cast<double>(pairs_.size());
  for (double& v : mean) v *= inv;
  return mean;
}

ImportanceTable ImportanceTable::from_finalized(
    Criterion criterion, std::vector<std::string> pairs,
    std::vector<std::vector<double>> scores, std::vector<std::int64_t> tokens) {
  if (scores.empty() || scores.size() != pairs.size() || tokens.size() != pairs.size()) {
    throw data_error("importance table rows do not match its pair list");
  }
  ImportanceTable table(criterion, std::move(pairs), scores[0].size());
  for (std::size_t m = 0; m < scores.size(); ++m) {
    if (scores[m].size() != table.registry_size_) {
      throw data_error("importance table rows have inconsistent lengths");
    }
    for (double v : scores[m]) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw data_error("importance scores must be finite and non-negative");
      }
    }
    if (tokens[m] <= 0) throw data_error("importance token counts must be positive");
  }
  table.scores_ = std::move(scores);
  table.tokens_ = std::move(tokens);
  table.sums_.clear();
  table.finalized_ = true;
  return table;
}

void accumulate_batch(TransformerModel& model, const Batch& batch, Criterion criterion,
                      ImportanceTable& table) {
  if (table.finalized()) {
    throw usage_error("accumulate_batch on a finalized importance table");
  }
  if (criterion != table.criterion()) {
    throw usage_error(fmt::format("criterion {} does not match the table's {}",
                                  criterion_name(criterion),
                                  criterion_name(table.criterion())));
  }
  if (batch.pair_idx < 0 || batch.pair_idx >= table.num_pairs()) {
    throw usage_error(fmt::format("batch pair index {} outside the table's {} pairs",
                                  batch.pair_idx, table.num_pairs()));
  }
  const NeuronSiteRegistry& registry = model.registry();
  if (registry.size() != table.registry_size()) {
    throw usage_error("importance table was built for a different site registry");
  }

  // Importance is evaluated on the unmasked model with dropout off.
  ForwardTrace trace;
  std::int64_t tokens = 0;
  for (const Example& ex : batch.examples) {
    tokens += static_cast<std::int64_t>(ex.target.size()) + 1;
  }

  std::vector<double> batch_sums(registry.size(), 0.0);
  if (criterion == Criterion::te) {
    const Tensor loss = model.forward_train(batch, nullptr, nullptr, &trace);
    backward(loss);
    for (const TraceEntry& e : trace.entries) {
      const SiteBlock& block = registry.block(e.side, e.layer, e.site);
      const auto h = e.activation.values();
      const auto g = e.activation.grad();
      const int rows = e.activation.rows();
      const int w = block.width;
      for (int t = 0; t < rows; ++t) {
        for (int u = 0; u < w; ++u) {
          const std::size_t at = static_cast<std::size_t>(t) * w + u;
          batch_sums[block.offset + u] +=
              std::fabs(static_cast<double>(g[at]) * static_cast<double>(h[at]));
        }
      }
    }
    zero_grad(model.params());
  } else {
    NoGradGuard no_grad;
    (void)model.forward_train(batch, nullptr, nullptr, &trace);
    for (const TraceEntry& e : trace.entries) {
      const SiteBlock& block = registry.block(e.side, e.layer, e.site);
      const auto h = e.activation.values();
      const int rows = e.activation.rows();
      const int w = block.width;
      for (int t = 0; t < rows; ++t) {
        for (int u = 0; u < w; ++u) {
          batch_sums[block.offset + u] +=
              std::fabs(static_cast<double>(h[static_cast<std::size_t>(t) * w + u]));
        }
      }
    }
  }
  for (std::size_t i = 0; i < batch_sums.size(); ++i) {
    table.add_contribution(batch.pair_idx, i, batch_sums[i]);
  }
  table.add_tokens(batch.pair_idx, tokens);
}

}  // namespace nalloc
