#include "neuronalloc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <map>
#include <numeric>

#include "neuronalloc/serialize.hpp"

namespace nalloc {

namespace {

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// Joins an n-gram into a single map key; tokens cannot contain '\x1f'.
std::string ngram_key(const std::vector<std::string>& tokens, std::size_t start,
                      std::size_t n) {
  std::string key;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) key += '\x1f';
    key += tokens[start + i];
  }
  return key;
}

}  // namespace

double bleu(const std::vector<std::vector<std::string>>& hypotheses,
            const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.size() != references.size()) {
    throw data_error(fmt::format("bleu: {} hypotheses vs {} references",
                                 hypotheses.size(), references.size()));
  }
  if (hypotheses.empty()) throw data_error("bleu: no sentences");

  constexpr int kMaxOrder = 4;
  std::int64_t total[kMaxOrder + 1] = {};
  std::int64_t correct[kMaxOrder + 1] = {};
  std::int64_t hyp_len = 0;
  std::int64_t ref_len = 0;

  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const std::vector<std::string>& hyp = hypotheses[s];
    const std::vector<std::string>& ref = references[s];
    hyp_len += static_cast<std::int64_t>(hyp.size());
    ref_len += static_cast<std::int64_t>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      if (hyp.size() < static_cast<std::size_t>(n)) break;
      std::map<std::string, std::int64_t> ref_counts;
      if (ref.size() >= static_cast<std::size_t>(n)) {
        for (std::size_t i = 0; i + n <= ref.size(); ++i) {
          ++ref_counts[ngram_key(ref, i, static_cast<std::size_t>(n))];
        }
      }
      std::map<std::string, std::int64_t> hyp_counts;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
        ++hyp_counts[ngram_key(hyp, i, static_cast<std::size_t>(n))];
      }
      for (const auto& [key, count] : hyp_counts) {
        total[n] += count;
        const auto it = ref_counts.find(key);
        if (it != ref_counts.end()) correct[n] += std::min(count, it->second);
      }
    }
  }

  // A hypothesis corpus with no n-grams of some order scores zero outright.
  for (int n = 1; n <= kMaxOrder; ++n) {
    if (total[n] == 0) return 0.0;
  }

  double smooth = 1.0;
  double log_precision = 0.0;
  for (int n = 1; n <= kMaxOrder; ++n) {
    double p;
    if (correct[n] > 0) {
      p = static_cast<double>(correct[n]) / static_cast<double>(total[n]);
    } else {
      smooth *= 2.0;
      p = 1.0 / (smooth * static_cast<double>(total[n]));
    }
    log_precision += std::log(p);
  }

  const double brevity =
      hyp_len < ref_len
          ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
          : 1.0;
  return 100.0 * brevity * std::exp(log_precision / kMaxOrder);
}

double lscore(const AllocationPlan& plan, const NeuronSiteRegistry& registry,
              Side side, int layer, int pair_idx) {
  if (pair_idx < 0 || pair_idx >= static_cast<int>(plan.pairs.size())) {
    throw usage_error(fmt::format("lscore: pair index {} out of range", pair_idx));
  }
  if (registry.size() != plan.registry_size()) {
    throw data_error("lscore: plan does not match the registry");
  }
  std::int64_t specific = 0;
  std::int64_t assigned = 0;
  for (const SiteBlock& b : registry.blocks()) {
    if (b.side != side || b.layer != layer) continue;
    for (int u = 0; u < b.width; ++u) {
      const std::size_t i = b.offset + static_cast<std::size_t>(u);
      if (plan.is_general(i)) continue;
      ++specific;
      if (plan.active_for(i, pair_idx)) ++assigned;
    }
  }
  if (specific == 0) {
    throw data_error(fmt::format("lscore: no specific neurons on {} layer {}",
                                 side_name(side), layer));
  }
  return static_cast<double>(assigned) / static_cast<double>(specific);
}

double mscore(const AllocationPlan& plan, const NeuronSiteRegistry& registry,
              Side side, int layer, SiteKind site) {
  if (registry.size() != plan.registry_size()) {
    throw data_error("mscore: plan does not match the registry");
  }
  const SiteBlock& b = registry.block(side, layer, site);
  std::int64_t specific = 0;
  std::vector<std::int64_t> assigned(plan.pairs.size(), 0);
  for (int u = 0; u < b.width; ++u) {
    const std::size_t i = b.offset + static_cast<std::size_t>(u);
    if (plan.is_general(i)) continue;
    ++specific;
    for (int m : plan.specific[i]) ++assigned[static_cast<std::size_t>(m)];
  }
  if (specific == 0) {
    throw data_error(fmt::format("mscore: no specific neurons at {} layer {} {}",
                                 side_name(side), layer, site_name(site)));
  }
  double mean = 0.0;
  for (std::int64_t a : assigned) {
    mean += static_cast<double>(a) / static_cast<double>(specific);
  }
  return mean / static_cast<double>(plan.pairs.size());
}

MaskSet erase_random(const MaskSet& masks, const AllocationPlan& plan,
                     const NeuronSiteRegistry& registry, const EraseTarget& target,
                     double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw usage_error("erase_random: fraction must lie in [0, 1]");
  }
  if (registry.size() != plan.registry_size()) {
    throw data_error("erase_random: plan does not match the registry");
  }
  if (masks.pairs != plan.pairs) {
    throw data_error("erase_random: mask set and plan disagree on pairs");
  }
  if (!target.general &&
      (target.pair_idx < 0 || target.pair_idx >= static_cast<int>(plan.pairs.size()))) {
    throw usage_error(fmt::format("erase_random: pair index {} out of range",
                                  target.pair_idx));
  }

  std::vector<std::size_t> population;
  for (std::size_t i = 0; i < registry.size(); ++i) {
    if (target.general ? plan.is_general(i)
                       : (!plan.is_general(i) && plan.active_for(i, target.pair_idx))) {
      population.push_back(i);
    }
  }
  if (population.empty()) {
    throw data_error(target.general
                         ? std::string("erase_random: the plan has no general neurons")
                         : fmt::format("erase_random: no specific neurons for '{}'",
                                       plan.pairs[static_cast<std::size_t>(
                                           target.pair_idx)]));
  }

  const std::size_t count = static_cast<std::size_t>(
      round_half_up(fraction * static_cast<double>(population.size())));
  Rng rng(mix_seed(seed, 0x6572617365ULL));
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t pick =
        j + static_cast<std::size_t>(rng.below(population.size() - j));
    std::swap(population[j], population[pick]);
  }

  // An erased neuron goes dark for every pair that was still using it.
  MaskSet erased = masks;
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t i = population[j];
    for (Mask& mask : erased.masks) {
      if (mask.active(registry, i)) mask.set(registry, i, false);
    }
  }
  return erased;
}

std::vector<DistributionSeries> export_importance_distribution(
    const ImportanceTable& table, const NeuronSiteRegistry& registry, Side side,
    int layer, SiteKind site, const std::vector<int>& pair_indices) {
  if (registry.size() != table.registry_size()) {
    throw data_error("importance distribution: table does not match the registry");
  }
  const SiteBlock& b = registry.block(side, layer, site);
  std::vector<DistributionSeries> series;
  for (int m : pair_indices) {
    if (m < 0 || m >= table.num_pairs()) {
      throw usage_error(fmt::format("importance distribution: pair index {} out of range", m));
    }
    DistributionSeries s;
    s.pair = table.pairs()[static_cast<std::size_t>(m)];
    s.scores.reserve(static_cast<std::size_t>(b.width));
    for (int u = 0; u < b.width; ++u) {
      s.scores.push_back(table.score(m, b.offset + static_cast<std::size_t>(u)));
    }
    series.push_back(std::move(s));
  }
  return series;
}

std::vector<std::vector<int>> translate_corpus(const TransformerModel& model,
                                               const Corpus& corpus, const Mask* mask,
                                               int beam_size, double alpha,
                                               int max_len) {
  std::vector<std::vector<int>> hypotheses;
  hypotheses.reserve(corpus.examples.size());
  for (const Example& ex : corpus.examples) {
    hypotheses.push_back(model.translate_beam(ex.source, mask, beam_size, alpha, max_len));
  }
  return hypotheses;
}

double sequence_accuracy(const TransformerModel& model, const Corpus& corpus,
                         const Mask* mask, int beam_size, double alpha, int max_len) {
  if (corpus.examples.empty()) throw data_error("sequence accuracy: empty corpus");
  std::int64_t exact = 0;
  for (const Example& ex : corpus.examples) {
    if (model.translate_beam(ex.source, mask, beam_size, alpha, max_len) == ex.target) {
      ++exact;
    }
  }
  return static_cast<double>(exact) / static_cast<double>(corpus.examples.size());
}

std::string encode_report(const AnalysisReport& report) {
  std::string out = "neuron-report v1\n";
  for (const auto& row : report.bleu_rows) {
    out += fmt::format("bleu {} {}\n", row.pair, format_double(row.value));
  }
  for (const auto& row : report.lscore_rows) {
    out += fmt::format("lscore {} {} {} {}\n", side_name(row.side), row.layer, row.pair,
                       format_double(row.value));
  }
  for (const auto& row : report.mscore_rows) {
    out += fmt::format("mscore {} {} {} {}\n", side_name(row.side), row.layer,
                       site_name(row.site), format_double(row.value));
  }
  for (const auto& row : report.erase_rows) {
    out += fmt::format("erase {} {} {}\n", row.configuration, row.pair,
                       format_double(row.delta));
  }
  return out;
}

void save_report(const AnalysisReport& report, const std::string& path) {
  write_file_atomic(path, encode_report(report));
}

AnalysisReport plan_metrics(const AllocationPlan& plan,
                            const NeuronSiteRegistry& registry) {
  AnalysisReport report;
  // Layers with at least one specific neuron, per side.
  for (const Side side : {Side::encoder, Side::decoder}) {
    for (int layer = 1; layer <= registry.dims().num_layers; ++layer) {
      bool any_specific = false;
      for (const SiteBlock& b : registry.blocks()) {
        if (b.side != side || b.layer != layer) continue;
        for (int u = 0; u < b.width && !any_specific; ++u) {
          any_specific = !plan.is_general(b.offset + static_cast<std::size_t>(u));
        }
      }
      if (!any_specific) continue;
      for (std::size_t m = 0; m < plan.pairs.size(); ++m) {
        report.lscore_rows.push_back(
            {side, layer, plan.pairs[m],
             lscore(plan, registry, side, layer, static_cast<int>(m))});
      }
    }
  }
  for (const SiteBlock& b : registry.blocks()) {
    bool any_specific = false;
    for (int u = 0; u < b.width && !any_specific; ++u) {
      any_specific = !plan.is_general(b.offset + static_cast<std::size_t>(u));
    }
    if (!any_specific) continue;
    report.mscore_rows.push_back(
        {b.side, b.layer, b.site, mscore(plan, registry, b.side, b.layer, b.site)});
  }
  return report;
}

}  // namespace nalloc
