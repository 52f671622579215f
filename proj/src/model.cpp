#include "neuronalloc/model.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

namespace nalloc {

namespace {

constexpr float kAttnNegInf = -1e9f;

// Sorting key for the value-ordered batch reduction.
struct LossOrder {
  float value;
  std::size_t index;
};

}  // namespace

TransformerModel::TransformerModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed), registry_(config_) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));  // independent init stream

  const auto add_param = [this](const std::string& name, Tensor t) {
    param_index_.emplace(name, params_.size());
    params_.emplace_back(name, std::move(t));
  };
  const auto uniform_matrix = [&rng](int rows, int cols, float bound) {
    std::vector<float> v(static_cast<std::size_t>(rows) * cols);
    for (float& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from_values({rows, cols}, std::move(v), true);
  };
  const auto xavier = [&](const std::string& name, int rows, int cols) {
    const float bound = std::sqrt(6.0f / static_cast<float>(rows + cols));
    add_param(name, uniform_matrix(rows, cols, bound));
  };
  const auto zeros_row = [&](const std::string& name, int n) {
    add_param(name, Tensor::zeros({1, n}, true));
  };
  const auto layer_norm_params = [&](const std::string& prefix, int n) {
    add_param(prefix + ".gain",
              Tensor::from_values({1, n}, std::vector<float>(n, 1.0f), true));
    zeros_row(prefix + ".bias", n);
  };
  const auto attention_params = [&](const std::string& prefix) {
    const int d = config_.d_model;
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      xavier(fmt::format("{}.{}", prefix, w), d, d);
    }
    for (const char* b : {"bq", "bk", "bv", "bo"}) {
      zeros_row(fmt::format("{}.{}", prefix, b), d);
    }
  };
  const auto ffn_params = [&](const std::string& prefix) {
    xavier(prefix + ".w1", config_.d_model, config_.d_ffn);
    zeros_row(prefix + ".b1", config_.d_ffn);
    xavier(prefix + ".w2", config_.d_ffn, config_.d_model);
    zeros_row(prefix + ".b2", config_.d_model);
  };

  add_param("embed", uniform_matrix(config_.vocab_size, config_.d_model,
                                    std::sqrt(3.0f / config_.d_model)));
  for (int l = 1; l <= config_.num_layers; ++l) {
    const std::string p = fmt::format("enc.{}", l);
    layer_norm_params(p + ".self.ln", config_.d_model);
    attention_params(p + ".self");
    layer_norm_params(p + ".ffn.ln", config_.d_model);
    ffn_params(p + ".ffn");
  }
  layer_norm_params("enc.final_ln", config_.d_model);
  for (int l = 1; l <= config_.num_layers; ++l) {
    const std::string p = fmt::format("dec.{}", l);
    layer_norm_params(p + ".self.ln", config_.d_model);
    attention_params(p + ".self");
    layer_norm_params(p + ".cross.ln", config_.d_model);
    attention_params(p + ".cross");
    layer_norm_params(p + ".ffn.ln", config_.d_model);
    ffn_params(p + ".ffn");
  }
  layer_norm_params("dec.final_ln", config_.d_model);
  if (!config_.share_embeddings) {
    xavier("out_proj.weight", config_.d_model, config_.vocab_size);
    zeros_row("out_proj.bias", config_.vocab_size);
  }
}

Parameter& TransformerModel::param(std::string_view name) {
  const auto it = param_index_.find(std::string(name));
  if (it == param_index_.end()) {
    throw usage_error(fmt::format("model has no parameter '{}'", name));
  }
  return params_[it->second];
}

const Tensor& TransformerModel::weight(const std::string& name) const {
  const auto it = param_index_.find(name);
  if (it == param_index_.end()) {
    throw usage_error(fmt::format("model has no parameter '{}'", name));
  }
  return params_[it->second].tensor;
}

Tensor TransformerModel::positional_encoding(int length) const {
  const int d = config_.d_model;
  std::vector<float> pe(static_cast<std::size_t>(length) * d);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < d / 2; ++i) {
      const double angle =
          pos * std::exp(-2.0 * i * std::log(10000.0) / static_cast<double>(d));
      pe[static_cast<std::size_t>(pos) * d + 2 * i] =
          static_cast<float>(std::sin(angle));
      pe[static_cast<std::size_t>(pos) * d + 2 * i + 1] =
          static_cast<float>(std::cos(angle));
    }
  }
  return Tensor::from_values({length, d}, std::move(pe));
}

Tensor TransformerModel::embed(std::span<const int> ids, Rng*) const {
  Tensor x = embedding_lookup(weight("embed"), ids);
  x = scale(x, std::sqrt(static_cast<float>(config_.d_model)));
  return add(x, positional_encoding(static_cast<int>(ids.size())));
}

Tensor TransformerModel::dropout(const Tensor& x, Rng* rng) const {
  if (rng == nullptr || config_.dropout_rate == 0.0f) return x;
  const float p = config_.dropout_rate;
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> mask(x.numel());
  for (float& v : mask) v = rng->uniform01() < p ? 0.0f : keep_scale;
  return mask_mul(x, Tensor::from_values(x.shape(), std::move(mask)));
}

Tensor TransformerModel::attention(const Tensor& queries, const Tensor& keys_values,
                                   const std::string& prefix, bool causal) const {
  const int d = config_.d_model;
  const int heads = config_.num_heads;
  const int dh = d / heads;
  const Tensor q = add(matmul(queries, weight(prefix + ".wq")), weight(prefix + ".bq"));
  const Tensor k =
      add(matmul(keys_values, weight(prefix + ".wk")), weight(prefix + ".bk"));
  const Tensor v =
      add(matmul(keys_values, weight(prefix + ".wv")), weight(prefix + ".bv"));

  Tensor causal_bias;
  if (causal) {
    const int n = q.rows();
    std::vector<float> bias(static_cast<std::size_t>(n) * n, 0.0f);
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        bias[static_cast<std::size_t>(i) * n + j] = kAttnNegInf;
      }
    }
    causal_bias = Tensor::from_values({n, n}, std::move(bias));
  }

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)),
                          1.0f / std::sqrt(static_cast<float>(dh)));
    if (causal) scores = add(scores, causal_bias);
    head_outputs.push_back(matmul(softmax(scores), vh));
  }
  const Tensor merged = concat(head_outputs);
  return add(matmul(merged, weight(prefix + ".wo")), weight(prefix + ".bo"));
}

namespace {

// Applies the mask and records the trace at one registered site.
Tensor at_site(Tensor activation, const NeuronSiteRegistry& registry, Side side,
               int layer, SiteKind site, const Mask* mask, ForwardTrace* trace,
               int example_index) {
  if (mask != nullptr) {
    if (mask->num_blocks() != registry.blocks().size()) {
      throw data_error(fmt::format("mask has {} site rows but the model has {}",
                                   mask->num_blocks(), registry.blocks().size()));
    }
    activation =
        apply_mask(activation, mask->row_tensor(registry.block_index(side, layer, site)));
  }
  if (trace != nullptr) {
    trace->entries.push_back({example_index, side, layer, site, activation});
  }
  return activation;
}

}  // namespace

Tensor TransformerModel::encode(std::span<const int> source, const Mask* mask,
                                Rng* dropout_rng, int example_index,
                                ForwardTrace* trace) const {
  Tensor x = embed(source, dropout_rng);
  for (int l = 1; l <= config_.num_layers; ++l) {
    const std::string p = fmt::format("enc.{}", l);
    Tensor h = layer_norm(x, weight(p + ".self.ln.gain"), weight(p + ".self.ln.bias"));
    Tensor attn = attention(h, h, p + ".self", /*causal=*/false);
    attn = at_site(std::move(attn), registry_, Side::encoder, l,
                   SiteKind::self_attn_out, mask, trace, example_index);
    x = add(x, dropout(attn, dropout_rng));

    Tensor h2 = layer_norm(x, weight(p + ".ffn.ln.gain"), weight(p + ".ffn.ln.bias"));
    Tensor inner = relu(add(matmul(h2, weight(p + ".ffn.w1")), weight(p + ".ffn.b1")));
    inner = at_site(std::move(inner), registry_, Side::encoder, l, SiteKind::ffn_inner,
                    mask, trace, example_index);
    Tensor ffn_out = add(matmul(inner, weight(p + ".ffn.w2")), weight(p + ".ffn.b2"));
    x = add(x, dropout(ffn_out, dropout_rng));
  }
  return layer_norm(x, weight("enc.final_ln.gain"), weight("enc.final_ln.bias"));
}

Tensor TransformerModel::decode(const Tensor& memory, std::span<const int> decoder_input,
                                const Mask* mask, Rng* dropout_rng, int example_index,
                                ForwardTrace* trace) const {
  Tensor x = embed(decoder_input, dropout_rng);
  for (int l = 1; l <= config_.num_layers; ++l) {
    const std::string p = fmt::format("dec.{}", l);
    Tensor h = layer_norm(x, weight(p + ".self.ln.gain"), weight(p + ".self.ln.bias"));
    Tensor attn = attention(h, h, p + ".self", /*causal=*/true);
    attn = at_site(std::move(attn), registry_, Side::decoder, l,
                   SiteKind::self_attn_out, mask, trace, example_index);
    x = add(x, dropout(attn, dropout_rng));

    Tensor hc = layer_norm(x, weight(p + ".cross.ln.gain"), weight(p + ".cross.ln.bias"));
    Tensor cross = attention(hc, memory, p + ".cross", /*causal=*/false);
    cross = at_site(std::move(cross), registry_, Side::decoder, l,
                    SiteKind::cross_attn_out, mask, trace, example_index);
    x = add(x, dropout(cross, dropout_rng));

    Tensor h2 = layer_norm(x, weight(p + ".ffn.ln.gain"), weight(p + ".ffn.ln.bias"));
    Tensor inner = relu(add(matmul(h2, weight(p + ".ffn.w1")), weight(p + ".ffn.b1")));
    inner = at_site(std::move(inner), registry_, Side::decoder, l, SiteKind::ffn_inner,
                    mask, trace, example_index);
    Tensor ffn_out = add(matmul(inner, weight(p + ".ffn.w2")), weight(p + ".ffn.b2"));
    x = add(x, dropout(ffn_out, dropout_rng));
  }
  x = layer_norm(x, weight("dec.final_ln.gain"), weight("dec.final_ln.bias"));
  if (config_.share_embeddings) {
    return matmul(x, transpose(weight("embed")));
  }
  return add(matmul(x, weight("out_proj.weight")), weight("out_proj.bias"));
}

TransformerModel::ExampleLoss TransformerModel::forward_example(
    const Example& ex, int example_index, const Mask* mask, Rng* dropout_rng,
    ForwardTrace* trace) const {
  if (ex.source.empty() || ex.target.empty()) {
    throw data_error("example with an empty source or target sentence");
  }
  if (static_cast<int>(ex.source.size()) > config_.max_seq_len ||
      static_cast<int>(ex.target.size()) + 1 > config_.max_seq_len) {
    throw data_error(fmt::format("sentence of {} source / {} target tokens exceeds "
                                 "max_seq_len {}",
                                 ex.source.size(), ex.target.size(),
                                 config_.max_seq_len));
  }
  const Tensor memory = encode(ex.source, mask, dropout_rng, example_index, trace);

  // eos doubles as the decoder start symbol.
  std::vector<int> decoder_input;
  decoder_input.reserve(ex.target.size() + 1);
  decoder_input.push_back(kEosId);
  decoder_input.insert(decoder_input.end(), ex.target.begin(), ex.target.end());
  std::vector<int> targets(ex.target.begin(), ex.target.end());
  targets.push_back(kEosId);

  const Tensor logits =
      decode(memory, decoder_input, mask, dropout_rng, example_index, trace);
  Tensor total = cross_entropy(logits, targets, kPadId, /*mean_reduce=*/false);
  return {std::move(total), static_cast<std::int64_t>(targets.size())};
}

Tensor TransformerModel::forward_train(const Batch& batch, const Mask* mask,
                                       Rng* dropout_rng, ForwardTrace* trace) const {
  if (batch.examples.empty()) throw usage_error("forward_train: empty batch");
  std::vector<ExampleLoss> losses;
  losses.reserve(batch.examples.size());
  std::int64_t total_tokens = 0;
  for (std::size_t i = 0; i < batch.examples.size(); ++i) {
    losses.push_back(forward_example(batch.examples[i], static_cast<int>(i), mask,
                                     dropout_rng, trace));
    total_tokens += losses.back().tokens;
  }

  // Summing the per-example subtotals in value order makes the batch loss
  // bit-exactly invariant to example order (equal values commute exactly).
  std::vector<LossOrder> order;
  order.reserve(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) {
    order.push_back({losses[i].total.item(), i});
  }
  std::sort(order.begin(), order.end(), [](const LossOrder& a, const LossOrder& b) {
    if (a.value != b.value) return a.value < b.value;
    return a.index < b.index;
  });
  Tensor sum = losses[order[0].index].total;
  for (std::size_t i = 1; i < order.size(); ++i) {
    sum = add(sum, losses[order[i].index].total);
  }
  return scale(sum, 1.0f / static_cast<float>(total_tokens));
}

std::vector<int> TransformerModel::translate_beam(std::span<const int> source,
                                                  const Mask* mask, int beam_size,
                                                  double length_penalty_alpha,
                                                  int max_len) const {
  if (beam_size < 1) throw usage_error("translate_beam: beam_size must be >= 1");
  if (max_len < 1) throw usage_error("translate_beam: max_len must be >= 1");
  if (source.empty()) throw data_error("translate_beam: empty source");
  if (static_cast<int>(source.size()) > config_.max_seq_len) {
    throw data_error(fmt::format("translate_beam: source of {} tokens exceeds "
                                 "max_seq_len {}",
                                 source.size(), config_.max_seq_len));
  }
  NoGradGuard no_grad;

  struct Hypothesis {
    std::vector<int> tokens;  // generated tokens, eos excluded
    double log_prob = 0.0;
  };
  const auto penalty = [length_penalty_alpha](std::size_t len) {
    return std::pow((5.0 + static_cast<double>(len)) / 6.0, length_penalty_alpha);
  };

  const Tensor memory = encode(source, mask, nullptr, 0, nullptr);
  std::vector<Hypothesis> live(1);
  std::vector<std::pair<double, Hypothesis>> completed;  // normalized score

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Candidate {
      double log_prob;
      std::size_t parent;
      int token;
    };
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < live.size(); ++h) {
      std::vector<int> decoder_input;
      decoder_input.reserve(live[h].tokens.size() + 1);
      decoder_input.push_back(kEosId);
      decoder_input.insert(decoder_input.end(), live[h].tokens.begin(),
                           live[h].tokens.end());
      const Tensor logits = decode(memory, decoder_input, mask, nullptr, 0, nullptr);
      const int vocab = logits.cols();
      const float* row =
          logits.values().data() + static_cast<std::size_t>(logits.rows() - 1) * vocab;
      float mx = row[0];
      for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
      double lse = 0.0;
      for (int j = 0; j < vocab; ++j) {
        lse += std::exp(static_cast<double>(row[j] - mx));
      }
      lse = static_cast<double>(mx) + std::log(lse);
      if (step + 1 == max_len) {
        // Out of budget: force end-of-sequence.
        candidates.push_back({live[h].log_prob + (row[kEosId] - lse), h, kEosId});
      } else {
        for (int j = 0; j < vocab; ++j) {
          candidates.push_back({live[h].log_prob + (row[j] - lse), h, j});
        }
      }
    }
    // Ties resolve to the earlier parent, then the smaller token id, which
    // is the order candidates were generated in.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) {
                       return a.log_prob > b.log_prob;
                     });
    std::vector<Hypothesis> next;
    int taken = 0;
    for (const Candidate& c : candidates) {
      if (taken >= beam_size) break;
      ++taken;
      Hypothesis hyp = live[c.parent];
      hyp.log_prob = c.log_prob;
      if (c.token == kEosId) {
        completed.emplace_back(c.log_prob / penalty(hyp.tokens.size() + 1),
                               std::move(hyp));
      } else {
        hyp.tokens.push_back(c.token);
        next.push_back(std::move(hyp));
      }
    }
    live = std::move(next);
  }
  if (completed.empty()) {
    // max_len forces eos into the candidate set, so this cannot happen with
    // a positive beam; guard anyway.
    return {};
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < completed.size(); ++i) {
    if (completed[i].first > completed[best].first) best = i;
  }
  return completed[best].second.tokens;
}

}  // namespace nalloc
