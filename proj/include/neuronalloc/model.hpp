#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "neuronalloc/mask.hpp"
#include "neuronalloc/model_config.hpp"
#include "neuronalloc/tensor.hpp"

namespace nalloc {

// One aligned sentence pair as token ids. The source already carries the
// language token at position 0; neither side contains eos or padding.
struct Example {
  std::vector<int> source;
  std::vector<int> target;
};

// A pair-homogeneous training batch.
struct Batch {
  int pair_idx = -1;
  std::vector<Example> examples;
};

// Activation recorded at one maskable site during forward_train. The tensor
// is the site's effective output (post-mask when a mask is applied); after
// backward() its grad() holds the loss gradient at the site.
struct TraceEntry {
  int example;
  Side side;
  int layer;
  SiteKind site;
  Tensor activation;  // [positions x site width]
};

struct ForwardTrace {
  std::vector<TraceEntry> entries;
};

// Toy-scale pre-norm encoder-decoder transformer with sinusoidal positions,
// a shared source/target vocabulary, and registered maskable neuron sites.
class TransformerModel {
 public:
  TransformerModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::uint64_t init_seed() const { return seed_; }
  const NeuronSiteRegistry& registry() const { return registry_; }

  std::span<Parameter> params() { return params_; }
  std::span<const Parameter> params() const { return params_; }
  Parameter& param(std::string_view name);

  // Teacher-forced mean cross-entropy over all non-pad target tokens of the
  // batch (each sentence is scored on its tokens plus one eos). The batch
  // loss is reduced in a value-ordered way, making it bit-exactly invariant
  // to example order. Passing a mask zeroes inactive site units; passing an
  // rng enables dropout; passing a trace records per-site activations.
  Tensor forward_train(const Batch& batch, const Mask* mask = nullptr,
                       Rng* dropout_rng = nullptr, ForwardTrace* trace = nullptr) const;

  // Beam decoding maximizing log-prob / ((5+len)/6)^alpha over completed
  // hypotheses. Emits eos forcibly at max_len. beam_size=1 is greedy.
  std::vector<int> translate_beam(std::span<const int> source, const Mask* mask,
                                  int beam_size, double length_penalty_alpha,
                                  int max_len) const;

 private:
  struct ExampleLoss {
    Tensor total;  // sum NLL over the example's target positions
    std::int64_t tokens;
  };
  ExampleLoss forward_example(const Example& ex, int example_index, const Mask* mask,
                              Rng* dropout_rng, ForwardTrace* trace) const;
  Tensor encode(std::span<const int> source, const Mask* mask, Rng* dropout_rng,
                int example_index, ForwardTrace* trace) const;
  Tensor decode(const Tensor& memory, std::span<const int> decoder_input,
                const Mask* mask, Rng* dropout_rng, int example_index,
                ForwardTrace* trace) const;  // returns [n x vocab] logits

  Tensor embed(std::span<const int> ids, Rng* dropout_rng) const;
  Tensor attention(const Tensor& queries, const Tensor& keys_values,
                   const std::string& prefix, bool causal) const;
  Tensor positional_encoding(int length) const;
  Tensor dropout(const Tensor& x, Rng* rng) const;
  const Tensor& weight(const std::string& name) const;

  ModelConfig config_;
  std::uint64_t seed_;
  NeuronSiteRegistry registry_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> param_index_;
};

}  // namespace nalloc
