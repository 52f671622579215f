#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "neuronalloc/common.hpp"

namespace nalloc {

// Reserved vocabulary ids. Language tokens follow immediately after, one per
// distinct target language; content tokens come after those. The end-of-
// sequence token doubles as the decoder start symbol.
inline constexpr int kPadId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kNumReservedIds = 3;

// A language pair is written "src2tgt". The first '2' separates the sides.
struct PairLanguages {
  std::string source;
  std::string target;
};
PairLanguages parse_pair(std::string_view pair_id);

struct ModelConfig {
  int num_layers = 2;        // per side
  int d_model = 64;
  int num_heads = 4;
  int d_ffn = 128;           // FFN width; widen for expansion experiments
  int vocab_size = 0;
  int max_seq_len = 64;
  float dropout_rate = 0.1f;
  bool share_embeddings = false;  // reuse the embedding matrix as output projection
  std::vector<std::string> language_pairs;

  // Throws usage_error naming the offending field.
  void validate() const;

  int pair_index(std::string_view pair_id) const;  // -1 when absent
  int num_pairs() const { return static_cast<int>(language_pairs.size()); }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace nalloc
