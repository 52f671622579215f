#include "neuronalloc/model_config.hpp"

#include <fmt/format.h>

namespace nalloc {

PairLanguages parse_pair(std::string_view pair_id) {
  const std::size_t sep = pair_id.find('2');
  if (sep == std::string_view::npos || sep == 0 || sep + 1 == pair_id.size()) {
    throw data_error(fmt::format(
        "pair id '{}' is not of the form src2tgt", pair_id));
  }
  return {std::string(pair_id.substr(0, sep)), std::string(pair_id.substr(sep + 1))};
}

void ModelConfig::validate() const {
  const auto fail = [](std::string_view field, std::string_view why) {
    throw usage_error(fmt::format("model config: {} {}", field, why));
  };
  if (num_layers <= 0) fail("num_layers", "must be positive");
  if (d_model <= 0) fail("d_model", "must be positive");
  if (num_heads <= 0) fail("num_heads", "must be positive");
  if (d_model % num_heads != 0) fail("num_heads", "must divide d_model");
  if (d_ffn <= 0) fail("d_ffn", "must be positive");
  if (vocab_size <= kNumReservedIds) {
    fail("vocab_size", "must exceed the reserved token ids");
  }
  if (max_seq_len <= 0) fail("max_seq_len", "must be positive");
  if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) {
    fail("dropout_rate", "must lie in [0, 1)");
  }
  if (language_pairs.empty()) fail("language_pairs", "must name at least one pair");
  for (std::size_t i = 0; i < language_pairs.size(); ++i) {
    parse_pair(language_pairs[i]);  // throws on malformed ids
    for (std::size_t j = i + 1; j < language_pairs.size(); ++j) {
      if (language_pairs[i] == language_pairs[j]) {
        fail("language_pairs", "contains duplicate '" + language_pairs[i] + "'");
      }
    }
  }
}

int ModelConfig::pair_index(std::string_view pair_id) const {
  for (std::size_t i = 0; i < language_pairs.size(); ++i) {
    if (language_pairs[i] == pair_id) return static_cast<int>(i);
  }
  return -1;
}

}  // namespace nalloc
