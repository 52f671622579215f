#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "neuronalloc/model.hpp"
#include "neuronalloc/model_config.hpp"

namespace nalloc {

enum class Split : std::uint8_t { train, dev, test };
std::string_view split_name(Split s);

// Shared source/target vocabulary. Ids: pad, eos, unk, one language token
// per distinct target language (sorted), then content tokens in lexicographic
// order — so identical corpora always produce the identical mapping.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> target_languages,
                      std::vector<std::string> content_tokens);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  // Unknown tokens map to kUnkId.
  int id_of(std::string_view token) const;
  const std::string& token_of(int id) const;
  // Id of the reserved token selecting the given target language.
  int language_token(std::string_view target_language) const;

  const std::vector<std::string>& tokens() const { return id_to_token_; }
  const std::vector<std::string>& target_languages() const { return languages_; }

 private:
  std::vector<std::string> id_to_token_;
  std::map<std::string, int, std::less<>> token_to_id_;
  std::vector<std::string> languages_;
};

// Aligned sentences of one pair and split, already mapped to token ids with
// the language token prepended to every source.
struct Corpus {
  std::string pair;
  Split split = Split::train;
  std::vector<Example> examples;
};

// All splits for all pairs plus the vocabulary they were encoded with.
struct DataSet {
  Vocabulary vocab;
  std::vector<Corpus> corpora;

  const Corpus& find(std::string_view pair, Split split) const;
  const Corpus* try_find(std::string_view pair, Split split) const;
};

enum class TransformKind : std::uint8_t { identity_copy, reversal, vocab_shift };
std::string_view transform_name(TransformKind t);

struct SyntheticPairSpec {
  std::string pair;  // "src2tgt"
  TransformKind transform = TransformKind::identity_copy;
  int shift_offset = 0;  // vocab_shift only
};

struct SyntheticTaskSpec {
  std::vector<SyntheticPairSpec> pairs;
  int base_vocab = 24;        // content words w0..w{n-1}
  int min_len = 4;
  int max_len = 10;
  int train_size = 5000;      // per pair
  int dev_size = 200;
  int test_size = 200;
  std::uint64_t seed = 1;

  void validate() const;
};

// Source sentences drawn uniformly from the base vocabulary, targets by the
// pair's transform; splits are disjoint by hashing the source sentence.
DataSet generate_synthetic(const SyntheticTaskSpec& spec);

// Writes a data set as one-sentence-per-line parallel text files,
// <dir>/<pair>.<split>.src and .tgt, plus <dir>/vocab.txt.
void write_corpus_dir(const DataSet& data, const std::string& dir);

// Loads parallel files for the given pairs from a directory written in the
// layout above, building the shared vocabulary from all files (or reusing
// <dir>/vocab.txt when present).
DataSet load_corpus_dir(const std::string& dir,
                        const std::vector<std::string>& pairs);

// Vocabulary over every token occurring in the corpora plus reserved ids.
Vocabulary build_vocab(const std::vector<std::string>& pair_ids,
                       const std::vector<std::vector<std::string>>& sentences);

// Reads a vocab.txt written by write_corpus_dir, checking the canonical id
// ordering for the given pairs.
Vocabulary load_vocab(const std::string& path,
                      const std::vector<std::string>& pair_ids);

}  // namespace nalloc
