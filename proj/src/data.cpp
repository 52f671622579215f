#include "neuronalloc/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fmt/format.h>
#include <fstream>
#include <set>
#include <sstream>

#include "neuronalloc/serialize.hpp"

namespace nalloc {

namespace {

std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::string lang_token_text(std::string_view language) {
  return fmt::format("<2{}>", language);
}

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

std::string_view transform_name(TransformKind t) {
  switch (t) {
    case TransformKind::identity_copy: return "identity_copy";
    case TransformKind::reversal: return "reversal";
    case TransformKind::vocab_shift: return "vocab_shift";
  }
  return "?";
}

Vocabulary::Vocabulary(std::vector<std::string> target_languages,
                       std::vector<std::string> content_tokens) {
  std::sort(target_languages.begin(), target_languages.end());
  target_languages.erase(
      std::unique(target_languages.begin(), target_languages.end()),
      target_languages.end());
  std::sort(content_tokens.begin(), content_tokens.end());
  content_tokens.erase(std::unique(content_tokens.begin(), content_tokens.end()),
                       content_tokens.end());

  id_to_token_ = {"<pad>", "</s>", "<unk>"};
  languages_ = target_languages;
  for (const std::string& lang : languages_) {
    id_to_token_.push_back(lang_token_text(lang));
  }
  for (std::string& tok : content_tokens) {
    if (tok.empty()) throw data_error("vocabulary cannot contain empty tokens");
    id_to_token_.push_back(std::move(tok));
  }
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    const auto [it, inserted] =
        token_to_id_.emplace(id_to_token_[i], static_cast<int>(i));
    if (!inserted) {
      throw data_error(
          fmt::format("token '{}' collides with a reserved id", id_to_token_[i]));
    }
  }
}

int Vocabulary::id_of(std::string_view token) const {
  const auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) {
    throw data_error(fmt::format("token id {} outside vocabulary of {}", id, size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

int Vocabulary::language_token(std::string_view target_language) const {
  const auto it = token_to_id_.find(lang_token_text(target_language));
  if (it == token_to_id_.end()) {
    throw data_error(
        fmt::format("no language token for target '{}'", target_language));
  }
  return it->second;
}

const Corpus& DataSet::find(std::string_view pair, Split split) const {
  const Corpus* c = try_find(pair, split);
  if (!c) {
    throw data_error(fmt::format("no {} corpus for pair '{}'", split_name(split), pair));
  }
  return *c;
}

const Corpus* DataSet::try_find(std::string_view pair, Split split) const {
  for (const Corpus& c : corpora) {
    if (c.pair == pair && c.split == split) return &c;
  }
  return nullptr;
}

void SyntheticTaskSpec::validate() const {
  if (pairs.empty()) throw usage_error("synthetic spec: needs at least one pair");
  if (base_vocab < 2) throw usage_error("synthetic spec: base_vocab must be >= 2");
  if (min_len < 1 || max_len < min_len) {
    throw usage_error("synthetic spec: need 1 <= min_len <= max_len");
  }
  if (train_size < 1 || dev_size < 1 || test_size < 1) {
    throw usage_error("synthetic spec: every split needs a positive size");
  }
  std::set<std::string> seen_pairs;
  std::set<std::pair<TransformKind, int>> transforms;
  std::set<std::string> targets;
  for (const SyntheticPairSpec& p : pairs) {
    parse_pair(p.pair);
    if (!seen_pairs.insert(p.pair).second) {
      throw usage_error(fmt::format("synthetic spec: duplicate pair '{}'", p.pair));
    }
    if (p.transform == TransformKind::vocab_shift) {
      if (p.shift_offset <= 0 || p.shift_offset >= base_vocab) {
        throw data_error(fmt::format(
            "synthetic spec: base vocabulary of {} cannot carry a shift of {}",
            base_vocab, p.shift_offset));
      }
    }
    // Distinct target languages must carry distinct transforms.
    const std::string target = parse_pair(p.pair).target;
    if (!targets.insert(target).second) {
      throw usage_error(fmt::format(
          "synthetic spec: target language '{}' appears in more than one pair", target));
    }
    const auto key = std::make_pair(
        p.transform, p.transform == TransformKind::vocab_shift ? p.shift_offset : 0);
    if (!transforms.insert(key).second) {
      throw usage_error("synthetic spec: every language needs a distinct transform");
    }
  }
}

namespace {

std::vector<int> apply_transform(const SyntheticPairSpec& spec,
                                 const std::vector<int>& words, int base_vocab) {
  std::vector<int> out(words);
  switch (spec.transform) {
    case TransformKind::identity_copy:
      break;
    case TransformKind::reversal:
      std::reverse(out.begin(), out.end());
      break;
    case TransformKind::vocab_shift:
      for (int& w : out) w = (w + spec.shift_offset) % base_vocab;
      break;
  }
  return out;
}

Split bucket_of(const std::vector<int>& words) {
  Fnv1a h;
  for (int w : words) {
    h.update(&w, sizeof(w));
  }
  switch (h.digest() % 10) {
    case 0: return Split::dev;
    case 1: return Split::test;
    default: return Split::train;
  }
}

}  // namespace

DataSet generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();

  std::vector<std::string> languages;
  for (const SyntheticPairSpec& p : spec.pairs) {
    languages.push_back(parse_pair(p.pair).target);
  }
  std::vector<std::string> content;
  content.reserve(spec.base_vocab);
  for (int w = 0; w < spec.base_vocab; ++w) {
    content.push_back(fmt::format("w{}", w));
  }
  DataSet data;
  data.vocab = Vocabulary(languages, content);

  // Word index -> token id, constant because tokens sort by their numeric
  // suffix only within equal digit counts; map explicitly instead.
  std::vector<int> word_id(spec.base_vocab);
  for (int w = 0; w < spec.base_vocab; ++w) {
    word_id[w] = data.vocab.id_of(fmt::format("w{}", w));
  }

  for (const SyntheticPairSpec& pair_spec : spec.pairs) {
    const std::string target_lang = parse_pair(pair_spec.pair).target;
    const int lang_id = data.vocab.language_token(target_lang);

    Corpus train{pair_spec.pair, Split::train, {}};
    Corpus dev{pair_spec.pair, Split::dev, {}};
    Corpus test{pair_spec.pair, Split::test, {}};
    const auto want = [&](Split s) -> std::pair<Corpus*, int> {
      switch (s) {
        case Split::train: return {&train, spec.train_size};
        case Split::dev: return {&dev, spec.dev_size};
        case Split::test: return {&test, spec.test_size};
      }
      return {nullptr, 0};
    };

    Rng rng(mix_seed(spec.seed, content_fingerprint(pair_spec.pair)));
    const std::int64_t total = spec.train_size + spec.dev_size + spec.test_size;
    std::int64_t filled = 0;
    std::int64_t attempts = 0;
    const std::int64_t attempt_limit = 1000 * total;
    while (filled < total) {
      if (++attempts > attempt_limit) {
        throw data_error("synthetic generation cannot fill the requested splits; "
                         "grow the vocabulary or length range");
      }
      const int len =
          spec.min_len +
          static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_len) -
                                     spec.min_len + 1));
      std::vector<int> words(len);
      for (int& w : words) {
        w = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.base_vocab)));
      }
      const auto [corpus, limit] = want(bucket_of(words));
      if (static_cast<int>(corpus->examples.size()) >= limit) continue;

      Example ex;
      ex.source.push_back(lang_id);
      for (int w : words) ex.source.push_back(word_id[w]);
      for (int w : apply_transform(pair_spec, words, spec.base_vocab)) {
        ex.target.push_back(word_id[w]);
      }
      corpus->examples.push_back(std::move(ex));
      ++filled;
    }
    data.corpora.push_back(std::move(train));
    data.corpora.push_back(std::move(dev));
    data.corpora.push_back(std::move(test));
  }
  return data;
}

void write_corpus_dir(const DataSet& data, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const Corpus& corpus : data.corpora) {
    std::string src, tgt;
    for (const Example& ex : corpus.examples) {
      // The leading language token is re-prepended at load time.
      for (std::size_t i = 1; i < ex.source.size(); ++i) {
        if (i > 1) src += ' ';
        src += data.vocab.token_of(ex.source[i]);
      }
      src += '\n';
      for (std::size_t i = 0; i < ex.target.size(); ++i) {
        if (i > 0) tgt += ' ';
        tgt += data.vocab.token_of(ex.target[i]);
      }
      tgt += '\n';
    }
    const std::string base =
        fmt::format("{}/{}.{}", dir, corpus.pair, split_name(corpus.split));
    write_file_atomic(base + ".src", src);
    write_file_atomic(base + ".tgt", tgt);
  }
  std::string vocab_text;
  for (const std::string& tok : data.vocab.tokens()) {
    vocab_text += tok;
    vocab_text += '\n';
  }
  write_file_atomic(dir + "/vocab.txt", vocab_text);
}

Vocabulary build_vocab(const std::vector<std::string>& pair_ids,
                       const std::vector<std::vector<std::string>>& sentences) {
  std::vector<std::string> languages;
  for (const std::string& pair : pair_ids) {
    languages.push_back(parse_pair(pair).target);
  }
  std::set<std::string> tokens;
  for (const auto& sentence : sentences) {
    tokens.insert(sentence.begin(), sentence.end());
  }
  return Vocabulary(std::move(languages),
                    std::vector<std::string>(tokens.begin(), tokens.end()));
}

Vocabulary load_vocab(const std::string& path,
                      const std::vector<std::string>& pair_ids) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.size() < kNumReservedIds || lines[0] != "<pad>" || lines[1] != "</s>" ||
      lines[2] != "<unk>") {
    throw data_error(path + " does not start with the reserved tokens");
  }
  std::vector<std::string> languages;
  for (const std::string& pair : pair_ids) {
    languages.push_back(parse_pair(pair).target);
  }
  std::sort(languages.begin(), languages.end());
  languages.erase(std::unique(languages.begin(), languages.end()), languages.end());
  std::vector<std::string> content(lines.begin() + kNumReservedIds +
                                       static_cast<std::ptrdiff_t>(languages.size()),
                                   lines.end());
  Vocabulary vocab(languages, content);
  if (vocab.tokens() != lines) {
    throw data_error(path + " does not match the canonical token ordering");
  }
  return vocab;
}

DataSet load_corpus_dir(const std::string& dir,
                        const std::vector<std::string>& pairs) {
  if (pairs.empty()) throw usage_error("load_corpus_dir: no pairs requested");

  struct RawCorpus {
    std::string pair;
    Split split;
    std::vector<std::vector<std::string>> src;
    std::vector<std::vector<std::string>> tgt;
  };
  std::vector<RawCorpus> raw;
  for (const std::string& pair : pairs) {
    bool any_split = false;
    for (const Split split : {Split::train, Split::dev, Split::test}) {
      const std::string base = fmt::format("{}/{}.{}", dir, pair, split_name(split));
      if (!std::filesystem::exists(base + ".src")) continue;
      const std::vector<std::string> src_lines = read_lines(base + ".src");
      const std::vector<std::string> tgt_lines = read_lines(base + ".tgt");
      if (src_lines.size() != tgt_lines.size()) {
        throw data_error(fmt::format("{}: {} source lines vs {} target lines", base,
                                     src_lines.size(), tgt_lines.size()));
      }
      RawCorpus rc{pair, split, {}, {}};
      for (std::size_t i = 0; i < src_lines.size(); ++i) {
        rc.src.push_back(split_ws(src_lines[i]));
        rc.tgt.push_back(split_ws(tgt_lines[i]));
        if (rc.src.back().empty() || rc.tgt.back().empty()) {
          throw data_error(fmt::format("{} line {}: empty sentence", base, i + 1));
        }
      }
      raw.push_back(std::move(rc));
      any_split = true;
    }
    if (!any_split) {
      throw data_error(fmt::format("no corpus files for pair '{}' under {}", pair, dir));
    }
  }

  DataSet data;
  const std::string vocab_path = dir + "/vocab.txt";
  if (std::filesystem::exists(vocab_path)) {
    data.vocab = load_vocab(vocab_path, pairs);
  } else {
    std::vector<std::vector<std::string>> sentences;
    for (const RawCorpus& rc : raw) {
      sentences.insert(sentences.end(), rc.src.begin(), rc.src.end());
      sentences.insert(sentences.end(), rc.tgt.begin(), rc.tgt.end());
    }
    data.vocab = build_vocab(pairs, sentences);
  }

  const bool strict = std::filesystem::exists(vocab_path);
  const auto to_ids = [&](const std::vector<std::string>& tokens,
                          const std::string& where) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const std::string& tok : tokens) {
      const int id = data.vocab.id_of(tok);
      if (strict && id == kUnkId && tok != data.vocab.token_of(kUnkId)) {
        throw data_error(
            fmt::format("{}: token '{}' is outside the vocabulary", where, tok));
      }
      ids.push_back(id);
    }
    return ids;
  };

  for (const RawCorpus& rc : raw) {
    Corpus corpus{rc.pair, rc.split, {}};
    const int lang_id = data.vocab.language_token(parse_pair(rc.pair).target);
    const std::string where = fmt::format("{}/{}.{}", dir, rc.pair, split_name(rc.split));
    for (std::size_t i = 0; i < rc.src.size(); ++i) {
      Example ex;
      ex.source.push_back(lang_id);
      for (int id : to_ids(rc.src[i], where)) ex.source.push_back(id);
      ex.target = to_ids(rc.tgt[i], where);
      corpus.examples.push_back(std::move(ex));
    }
    data.corpora.push_back(std::move(corpus));
  }
  return data;
}

}  // namespace nalloc
