// Command-line pipeline: synthesize corpora, pretrain jointly, score neuron
// importance per language pair, allocate general/specific neuron sets,
// fine-tune and translate under per-pair masks, and analyze the result.
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "neuronalloc/analysis.hpp"
#include "neuronalloc/config.hpp"
#include "neuronalloc/data.hpp"
#include "neuronalloc/pipeline.hpp"
#include "neuronalloc/serialize.hpp"

namespace {

using namespace nalloc;

// One optional flag value plus whether the user actually passed it.
template <class T>
struct Flag {
  T value{};
  CLI::Option* opt = nullptr;

  bool given() const { return opt != nullptr && opt->count() > 0; }
};

std::int64_t pick_int(const Flag<std::int64_t>& f, const KeyValueConfig& cfg,
                      std::string_view key, std::int64_t fallback) {
  return f.given() ? f.value : cfg.get_int(key, fallback);
}

double pick_double(const Flag<double>& f, const KeyValueConfig& cfg,
                   std::string_view key, double fallback) {
  return f.given() ? f.value : cfg.get_double(key, fallback);
}

std::string pick_string(const Flag<std::string>& f, const KeyValueConfig& cfg,
                        std::string_view key, std::string_view fallback) {
  return f.given() ? f.value : cfg.get_string(key, fallback);
}

bool pick_bool(const Flag<bool>& f, const KeyValueConfig& cfg, std::string_view key,
               bool fallback) {
  return f.given() ? f.value : cfg.get_bool(key, fallback);
}

KeyValueConfig read_config(const Flag<std::string>& config_flag) {
  if (!config_flag.given()) return {};
  return KeyValueConfig::from_file(config_flag.value);
}

// Global seed resolution: NEURON_ALLOC_SEED beats --seed beats the config
// file beats the built-in default.
std::uint64_t resolve_seed(const Flag<std::int64_t>& f, const KeyValueConfig& cfg,
                           std::uint64_t fallback) {
  if (const char* env = std::getenv("NEURON_ALLOC_SEED")) {
    const std::string_view s(env);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
      throw usage_error("NEURON_ALLOC_SEED must be an unsigned integer");
    }
    return v;
  }
  return static_cast<std::uint64_t>(
      pick_int(f, cfg, "seed", static_cast<std::int64_t>(fallback)));
}

// Schedule flags shared by pretrain and finetune.
struct ScheduleFlags {
  Flag<std::int64_t> steps, warmup, batch_tokens, eval_every, patience, seed;
  Flag<double> lr;

  void attach(CLI::App* cmd) {
    steps.opt = cmd->add_option("--steps", steps.value, "training steps");
    warmup.opt = cmd->add_option("--warmup", warmup.value, "lr warmup steps");
    lr.opt = cmd->add_option("--lr", lr.value, "peak learning rate");
    batch_tokens.opt =
        cmd->add_option("--batch-tokens", batch_tokens.value, "tokens per batch");
    eval_every.opt = cmd->add_option("--eval-every", eval_every.value,
                                     "dev evaluation cadence in steps (0 = off)");
    patience.opt = cmd->add_option(
        "--patience", patience.value,
        "dev evaluations without improvement before an early stop (0 = off)");
    seed.opt = cmd->add_option("--seed", seed.value, "random seed");
  }

  TrainSchedule resolve(const KeyValueConfig& cfg, std::int64_t default_steps) const {
    TrainSchedule s;
    s.total_steps = pick_int(steps, cfg, "steps", default_steps);
    s.warmup_steps = pick_int(warmup, cfg, "warmup", s.warmup_steps);
    s.peak_lr = pick_double(lr, cfg, "lr", s.peak_lr);
    s.batch_tokens = static_cast<int>(
        pick_int(batch_tokens, cfg, "batch_tokens", s.batch_tokens));
    s.eval_every = pick_int(eval_every, cfg, "eval_every", s.eval_every);
    s.patience = static_cast<int>(pick_int(patience, cfg, "patience", s.patience));
    s.seed = resolve_seed(seed, cfg, 1);
    return s;
  }
};

// Decode flags shared by translate, analyze, and erase.
struct DecodeFlags {
  Flag<std::int64_t> beam, max_len;
  Flag<double> alpha;

  void attach(CLI::App* cmd) {
    beam.opt = cmd->add_option("--beam", beam.value, "beam size (1 = greedy)");
    alpha.opt = cmd->add_option("--alpha", alpha.value, "length penalty exponent");
    max_len.opt = cmd->add_option("--max-len", max_len.value,
                                  "decode length cap (0 = model max_seq_len)");
  }

  int beam_size(const KeyValueConfig& cfg) const {
    return static_cast<int>(pick_int(beam, cfg, "beam", 4));
  }
  double penalty_alpha(const KeyValueConfig& cfg) const {
    return pick_double(alpha, cfg, "alpha", 0.6);
  }
  int decode_len(const KeyValueConfig& cfg, const ModelConfig& mc) const {
    const std::int64_t v = pick_int(max_len, cfg, "max_len", 0);
    return v > 0 ? static_cast<int>(v) : mc.max_seq_len;
  }
};

// A plan must descend from the checkpoint's lineage: it was computed either
// from this very checkpoint or from the pretraining parent of a fine-tuned
// descendant.
void check_plan_lineage(const LoadedPlan& plan, const LoadedCheckpoint& ckpt) {
  const std::uint64_t want = plan.plan.provenance.checkpoint_fingerprint;
  if (want == ckpt.fingerprint) return;
  if (ckpt.ckpt.parent_fingerprint != 0 && want == ckpt.ckpt.parent_fingerprint) return;
  throw data_error(fmt::format(
      "plan was computed from checkpoint {}, but {} is fingerprinted {} (parent {})",
      fingerprint_hex(want), "the given checkpoint", fingerprint_hex(ckpt.fingerprint),
      fingerprint_hex(ckpt.ckpt.parent_fingerprint)));
}

void check_plan_dims(const LoadedPlan& plan, const TransformerModel& model) {
  if (!(plan.dims == model.registry().dims())) {
    throw data_error("plan site layout does not match the checkpoint's model");
  }
}

MaskSet masks_from_plan(const LoadedPlan& plan, const TransformerModel& model) {
  check_plan_dims(plan, model);
  MaskSet masks = build_mask_set(plan.plan, model.config());
  masks.plan_fingerprint = plan.fingerprint;
  return masks;
}

std::vector<std::vector<std::string>> to_token_lines(const Vocabulary& vocab,
                                                     const std::vector<std::vector<int>>& ids) {
  std::vector<std::vector<std::string>> out;
  out.reserve(ids.size());
  for (const std::vector<int>& line : ids) {
    std::vector<std::string> tokens;
    tokens.reserve(line.size());
    for (int id : line) tokens.push_back(vocab.token_of(id));
    out.push_back(std::move(tokens));
  }
  return out;
}

// Per-pair test-set BLEU under the pair's mask (or unmasked).
double pair_bleu(const TransformerModel& model, const DataSet& data,
                 std::string_view pair, const Mask* mask, int beam, double alpha,
                 int max_len) {
  const Corpus& test = data.find(pair, Split::test);
  const std::vector<std::vector<int>> hyp_ids =
      translate_corpus(model, test, mask, beam, alpha, max_len);
  std::vector<std::vector<int>> ref_ids;
  ref_ids.reserve(test.examples.size());
  for (const Example& ex : test.examples) ref_ids.push_back(ex.target);
  return bleu(to_token_lines(data.vocab, hyp_ids), to_token_lines(data.vocab, ref_ids));
}

// ---- synth -------------------------------------------------------------------

TransformKind parse_transform(std::string_view name) {
  if (name == "identity_copy" || name == "copy") return TransformKind::identity_copy;
  if (name == "reversal" || name == "reverse") return TransformKind::reversal;
  if (name == "vocab_shift" || name == "shift") return TransformKind::vocab_shift;
  throw usage_error(fmt::format("unknown transform '{}'", name));
}

// "pair:transform" or "pair:vocab_shift:offset".
SyntheticPairSpec parse_pair_spec(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i == text.size() || text[i] == ':') {
      parts.push_back(text.substr(start, i - start));
      start = i + 1;
    }
  }
  if (parts.size() < 2 || parts.size() > 3) {
    throw usage_error(fmt::format(
        "pair spec '{}' is not pair:transform[:offset]", text));
  }
  SyntheticPairSpec spec;
  spec.pair = parts[0];
  spec.transform = parse_transform(parts[1]);
  if (parts.size() == 3) {
    if (spec.transform != TransformKind::vocab_shift) {
      throw usage_error(fmt::format("transform '{}' takes no offset", parts[1]));
    }
    const auto [ptr, ec] =
        std::from_chars(parts[2].data(), parts[2].data() + parts[2].size(),
                        spec.shift_offset);
    if (ec != std::errc{} || ptr != parts[2].data() + parts[2].size()) {
      throw usage_error(fmt::format("shift offset '{}' is not an integer", parts[2]));
    }
  } else if (spec.transform == TransformKind::vocab_shift) {
    throw usage_error("vocab_shift needs an offset, e.g. en2sh:vocab_shift:3");
  }
  return spec;
}

void add_synth(CLI::App& app) {
  auto* cmd = app.add_subcommand("synth", "generate a synthetic multilingual corpus");
  struct SynthOpts {
    std::string out;
    std::vector<std::string> pair_specs;
    Flag<std::int64_t> vocab, min_len, max_len, train, dev, test, seed;
    Flag<std::string> config;
  };
  auto opts = std::make_shared<SynthOpts>();
  cmd->add_option("--out", opts->out, "output directory")->required();
  cmd->add_option("--pairs", opts->pair_specs,
                  "comma list of pair:transform[:offset] "
                  "(identity_copy | reversal | vocab_shift:<n>)")
      ->delimiter(',')
      ->required();
  opts->vocab.opt = cmd->add_option("--vocab", opts->vocab.value, "content vocabulary size");
  opts->min_len.opt = cmd->add_option("--min-len", opts->min_len.value, "shortest sentence");
  opts->max_len.opt = cmd->add_option("--max-len", opts->max_len.value, "longest sentence");
  opts->train.opt = cmd->add_option("--train", opts->train.value, "train examples per pair");
  opts->dev.opt = cmd->add_option("--dev", opts->dev.value, "dev examples per pair");
  opts->test.opt = cmd->add_option("--test", opts->test.value, "test examples per pair");
  opts->seed.opt = cmd->add_option("--seed", opts->seed.value, "generation seed");
  opts->config.opt = cmd->add_option("--config", opts->config.value, "key=value config file");

  cmd->callback([opts] {
    const KeyValueConfig cfg = read_config(opts->config);
    SyntheticTaskSpec spec;
    for (const std::string& text : opts->pair_specs) {
      spec.pairs.push_back(parse_pair_spec(text));
    }
    spec.base_vocab = static_cast<int>(pick_int(opts->vocab, cfg, "vocab", spec.base_vocab));
    spec.min_len = static_cast<int>(pick_int(opts->min_len, cfg, "min_len", spec.min_len));
    spec.max_len = static_cast<int>(pick_int(opts->max_len, cfg, "max_len", spec.max_len));
    spec.train_size = static_cast<int>(pick_int(opts->train, cfg, "train", spec.train_size));
    spec.dev_size = static_cast<int>(pick_int(opts->dev, cfg, "dev", spec.dev_size));
    spec.test_size = static_cast<int>(pick_int(opts->test, cfg, "test", spec.test_size));
    spec.seed = resolve_seed(opts->seed, cfg, 1);

    const DataSet data = generate_synthetic(spec);
    write_corpus_dir(data, opts->out);
    fmt::print("synth: {} pairs x {}/{}/{} examples, vocab {}, wrote {}\n",
               spec.pairs.size(), spec.train_size, spec.dev_size, spec.test_size,
               data.vocab.size(), opts->out);
  });
}

// ---- pretrain ------------------------------------------------------------------

void add_pretrain(CLI::App& app) {
  auto* cmd = app.add_subcommand("pretrain", "jointly train the shared model on all pairs");
  struct PretrainOpts {
    std::string data_dir, out;
    std::vector<std::string> pairs;
    CLI::Option* pairs_opt = nullptr;
    Flag<std::string> config;
    Flag<std::int64_t> layers, d_model, heads, d_ffn, max_seq_len;
    Flag<double> dropout;
    Flag<bool> share_embeddings;
    ScheduleFlags schedule;
  };
  auto opts = std::make_shared<PretrainOpts>();
  cmd->add_option("--data", opts->data_dir, "corpus directory")->required();
  cmd->add_option("--out", opts->out, "output checkpoint path")->required();
  opts->pairs_opt =
      cmd->add_option("--pairs", opts->pairs, "language pairs, e.g. en2copy,en2rev")
          ->delimiter(',');
  opts->config.opt = cmd->add_option("--config", opts->config.value, "key=value config file");
  opts->layers.opt = cmd->add_option("--layers", opts->layers.value, "layers per side");
  opts->d_model.opt = cmd->add_option("--d-model", opts->d_model.value, "model width");
  opts->heads.opt = cmd->add_option("--heads", opts->heads.value, "attention heads");
  opts->d_ffn.opt = cmd->add_option("--d-ffn", opts->d_ffn.value, "FFN inner width");
  opts->max_seq_len.opt =
      cmd->add_option("--max-seq-len", opts->max_seq_len.value, "sentence length limit");
  opts->dropout.opt = cmd->add_option("--dropout", opts->dropout.value, "dropout rate");
  opts->share_embeddings.opt = cmd->add_flag("--share-embeddings",
                                             opts->share_embeddings.value,
                                             "reuse embeddings as the output projection");
  opts->schedule.attach(cmd);

  cmd->callback([opts] {
    const KeyValueConfig cfg = read_config(opts->config);
    std::vector<std::string> pairs = opts->pairs_opt->count() > 0 ? opts->pairs
                                                                  : cfg.get_list("pairs");
    if (pairs.empty()) {
      throw usage_error("pretrain: no language pairs (--pairs or config 'pairs')");
    }
    const DataSet data = load_corpus_dir(opts->data_dir, pairs);

    ModelConfig mc;
    mc.num_layers = static_cast<int>(pick_int(opts->layers, cfg, "layers", mc.num_layers));
    mc.d_model = static_cast<int>(pick_int(opts->d_model, cfg, "d_model", mc.d_model));
    mc.num_heads = static_cast<int>(pick_int(opts->heads, cfg, "heads", mc.num_heads));
    mc.d_ffn = static_cast<int>(pick_int(opts->d_ffn, cfg, "d_ffn", mc.d_ffn));
    mc.max_seq_len = static_cast<int>(
        pick_int(opts->max_seq_len, cfg, "max_seq_len", mc.max_seq_len));
    mc.dropout_rate =
        static_cast<float>(pick_double(opts->dropout, cfg, "dropout", mc.dropout_rate));
    mc.share_embeddings =
        pick_bool(opts->share_embeddings, cfg, "share_embeddings", mc.share_embeddings);
    mc.vocab_size = data.vocab.size();
    mc.language_pairs = pairs;

    const TrainSchedule schedule = opts->schedule.resolve(cfg, 2000);
    TransformerModel model(mc, schedule.seed);
    const TrainResult result =
        train(model, data, schedule, nullptr, 0, stderr_logger());
    save_checkpoint(result.best, opts->out);
    fmt::print("pretrain: {} steps, best dev loss {:.4f} at step {}, wrote {} ({})\n",
               result.steps_run, result.best_dev_loss, result.best_step, opts->out,
               fingerprint_hex(content_fingerprint(encode_checkpoint(result.best))));
  });
}

// ---- importance -----------------------------------------------------------------

void add_importance(CLI::App& app) {
  auto* cmd = app.add_subcommand("importance",
                                 "score per-pair neuron importance on a checkpoint");
  struct ImportanceOpts {
    std::string ckpt, data_dir, out;
    Flag<std::string> criterion, config;
    Flag<std::int64_t> cap;
  };
  auto opts = std::make_shared<ImportanceOpts>();
  cmd->add_option("--ckpt", opts->ckpt, "pretrained checkpoint")->required();
  cmd->add_option("--data", opts->data_dir, "corpus directory")->required();
  cmd->add_option("--out", opts->out, "output table path")->required();
  opts->criterion.opt =
      cmd->add_option("--criterion", opts->criterion.value, "te (Taylor) or av (|value|)");
  opts->cap.opt = cmd->add_option("--cap", opts->cap.value,
                                  "max target tokens per pair (0 = all)");
  opts->config.opt = cmd->add_option("--config", opts->config.value, "key=value config file");

  cmd->callback([opts] {
    const KeyValueConfig cfg = read_config(opts->config);
    const Criterion criterion =
        parse_criterion(pick_string(opts->criterion, cfg, "criterion", "te"));
    const std::int64_t cap = pick_int(opts->cap, cfg, "cap", 0);

    const LoadedCheckpoint loaded = load_checkpoint(opts->ckpt);
    TransformerModel model = restore(loaded.ckpt);
    const DataSet data =
        load_corpus_dir(opts->data_dir, model.config().language_pairs);
    const ImportanceTable table = score_importance(model, data, criterion, cap);
    save_table(table, model.registry().dims(), loaded.fingerprint, opts->out);
    fmt::print("importance: criterion {}, {} pairs x {} neurons, wrote {}\n",
               criterion_name(criterion), table.num_pairs(), table.registry_size(),
               opts->out);
  });
}

// ---- allocate -------------------------------------------------------------------

void add_allocate(CLI::App& app) {
  auto* cmd = app.add_subcommand("allocate",
                                 "divide neurons into general and specific sets");
  struct AllocateOpts {
    std::string table, out;
    Flag<std::string> variant, config;
    Flag<double> rho, k;
  };
  auto opts = std::make_shared<AllocateOpts>();
  cmd->add_option("--table", opts->table, "importance table")->required();
  cmd->add_option("--out", opts->out, "output plan path")->required();
  opts->rho.opt = cmd->add_option("--rho", opts->rho.value, "general fraction per site");
  opts->k.opt = cmd->add_option("--k", opts->k.value, "specific threshold coefficient");
  opts->variant.opt = cmd->add_option("--variant", opts->variant.value,
                                      "pair | source | target | encdec");
  opts->config.opt = cmd->add_option("--config", opts->config.value, "key=value config file");

  cmd->callback([opts] {
    const KeyValueConfig cfg = read_config(opts->config);
    AllocationConfig ac;
    ac.rho = pick_double(opts->rho, cfg, "rho", ac.rho);
    ac.k = pick_double(opts->k, cfg, "k", ac.k);
    ac.variant = parse_variant(pick_string(opts->variant, cfg, "variant", "pair"));

    const LoadedTable loaded = load_table(opts->table);
    const NeuronSiteRegistry registry(loaded.dims);
    AllocationPlan plan = allocate(loaded.table, registry, ac, stderr_logger());
    plan.provenance.table_fingerprint = loaded.fingerprint;
    plan.provenance.checkpoint_fingerprint = loaded.checkpoint_fingerprint;
    save_plan(plan, loaded.dims, opts->out);
    fmt::print("allocate: {} general / {} specific of {} neurons, wrote {}\n",
               plan.num_general(), plan.registry_size() - plan.num_general(),
               plan.registry_size(), opts->out);
  });
}

// ---- finetune -------------------------------------------------------------------

void add_finetune(CLI::App& app) {
  auto* cmd =
      app.add_subcommand("finetune", "continue training under per-pair neuron masks");
  struct FinetuneOpts {
    std::string ckpt, plan, data_dir, out;
    Flag<std::string> config;
    ScheduleFlags schedule;
  };
  auto opts = std::make_shared<FinetuneOpts>();
  cmd->add_option("--ckpt", opts->ckpt, "pretrained checkpoint")->required();
  cmd->add_option("--plan", opts->plan, "allocation plan")->required();
  cmd->add_option("--data", opts->data_dir, "corpus directory")->required();
  cmd->add_option("--out", opts->out, "output checkpoint path")->required();
  opts->config.opt = cmd->add_option("--config", opts->config.value, "key=value config file");
  opts->schedule.attach(cmd);

  cmd->callback([opts] {
    const KeyValueConfig cfg = read_config(opts->config);
    const LoadedCheckpoint loaded = load_checkpoint(opts->ckpt);
    const LoadedPlan plan = load_plan(opts->plan);
    if (plan.plan.provenance.checkpoint_fingerprint != loaded.fingerprint) {
      throw data_error(fmt::format(
          "plan was computed from checkpoint {}, not this one ({})",
          fingerprint_hex(plan.plan.provenance.checkpoint_fingerprint),
          fingerprint_hex(loaded.fingerprint)));
    }

    TransformerModel model = restore(loaded.ckpt);
    const MaskSet masks = masks_from_plan(plan, model);
    const DataSet data =
        load_corpus_dir(opts->data_dir, model.config().language_pairs);
    const TrainSchedule schedule = opts->schedule.resolve(cfg, 1000);
    const TrainResult result =
        train(model, data, schedule, &masks, loaded.fingerprint, stderr_logger());
    save_checkpoint(result.best, opts->out);
    fmt::print("finetune: {} steps, best dev loss {:.4f} at step {}, wrote {} ({})\n",
               result.steps_run, result.best_dev_loss, result.best_step, opts->out,
               fingerprint_hex(content_fingerprint(encode_checkpoint(result.best))));
  });
}

// ---- translate ------------------------------------------------------------------

void add_translate(CLI::App& app) {
  auto* cmd = app.add_subcommand("translate", "decode a file of source sentences");
  struct TranslateOpts {
    std::string ckpt, pair, in, out, vocab;
    Flag<std::string> plan, config;
    DecodeFlags decode;
  };
  auto opts = std::make_shared<TranslateOpts>();
  cmd->add_option("--ckpt", opts->ckpt, "checkpoint")->required();
  cmd->add_option("--pair", opts->pair, "language pair, e.g. en2rev")->required();
  cmd->add_option("--in", opts->in, "source sentences, one per line")->required();
  cmd->add_option("--out", opts->out, "hypothesis output path")->required();
  cmd->add_option("--vocab", opts->vocab, "vocab.txt from the corpus directory")
      ->required();
  opts->plan.opt = cmd->add_option("--plan", opts->plan.value,
                                   "allocation plan (activates the pair's mask)");
  opts->config.opt = cmd->add_option("--config", opts->config.value, "key=value config file");
  opts->decode.attach(cmd);

  cmd->callback([opts] {
    const KeyValueConfig cfg = read_config(opts->config);
    const LoadedCheckpoint loaded = load_checkpoint(opts->ckpt);
    const TransformerModel model = restore(loaded.ckpt);
    const int pair_idx = model.config().pair_index(opts->pair);
    if (pair_idx < 0) {
      throw data_error(fmt::format("checkpoint does not serve pair '{}'", opts->pair));
    }

    MaskSet masks;
    const Mask* mask = nullptr;
    if (opts->plan.given()) {
      const LoadedPlan plan = load_plan(opts->plan.value);
      check_plan_lineage(plan, loaded);
      masks = masks_from_plan(plan, model);
      mask = &masks.mask_for(opts->pair);
    }

    const Vocabulary vocab =
        load_vocab(opts->vocab, model.config().language_pairs);
    if (vocab.size() != model.config().vocab_size) {
      throw data_error(fmt::format("vocabulary of {} tokens does not match the "
                                   "checkpoint's {}",
                                   vocab.size(), model.config().vocab_size));
    }
    const int lang_id = vocab.language_token(parse_pair(opts->pair).target);

    std::ifstream in(opts->in);
    if (!in) throw data_error("cannot open " + opts->in);
    const int beam = opts->decode.beam_size(cfg);
    const double alpha = opts->decode.penalty_alpha(cfg);
    const int max_len = opts->decode.decode_len(cfg, model.config());

    std::string out_text;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      std::vector<int> source{lang_id};
      std::size_t i = 0;
      while (i < line.size()) {
        while (i < line.size() && line[i] == ' ') ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ') ++j;
        if (j > i) source.push_back(vocab.id_of(line.substr(i, j - i)));
        i = j;
      }
      if (source.size() == 1) {
        throw data_error(fmt::format("{} line {}: empty sentence", opts->in, n + 1));
      }
      const std::vector<int> hyp =
          model.translate_beam(source, mask, beam, alpha, max_len);
      for (std::size_t t = 0; t < hyp.size(); ++t) {
        if (t) out_text += ' ';
        out_text += vocab.token_of(hyp[t]);
      }
      out_text += '\n';
      ++n;
    }
    write_file_atomic(opts->out, out_text);
    fmt::print("translate: {} sentences ({}, beam {}), wrote {}\n", n, opts->pair,
               beam, opts->out);
  });
}

// ---- analyze --------------------------------------------------------------------

void add_analyze(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "analyze", "report LScore/MScore (and BLEU when given a checkpoint)");
  struct AnalyzeOpts {
    std::string plan, report;
    Flag<std::string> table, distributions, ckpt, data_dir, config;
    DecodeFlags decode;
  };
  auto opts = std::make_shared<AnalyzeOpts>();
  cmd->add_option("--plan", opts->plan, "allocation plan")->required();
  cmd->add_option("--report", opts->report, "report output path")->required();
  opts->table.opt = cmd->add_option("--table", opts->table.value,
                                    "importance table (checked against the plan)");
  opts->distributions.opt =
      cmd->add_option("--distributions", opts->distributions.value,
                      "write per-unit importance series here (needs --table)");
  opts->ckpt.opt = cmd->add_option("--ckpt", opts->ckpt.value,
                                   "checkpoint for test-set BLEU rows");
  opts->data_dir.opt = cmd->add_option("--data", opts->data_dir.value,
                                       "corpus directory (needed with --ckpt)");
  opts->config.opt = cmd->add_option("--config", opts->config.value, "key=value config file");
  opts->decode.attach(cmd);

  cmd->callback([opts] {
    const KeyValueConfig cfg = read_config(opts->config);
    const LoadedPlan plan = load_plan(opts->plan);
    const NeuronSiteRegistry registry(plan.dims);
    AnalysisReport report = plan_metrics(plan.plan, registry);

    if (opts->table.given()) {
      const LoadedTable table = load_table(opts->table.value);
      if (table.fingerprint != plan.plan.provenance.table_fingerprint) {
        throw data_error(fmt::format(
            "table is fingerprinted {}, but the plan was allocated from {}",
            fingerprint_hex(table.fingerprint),
            fingerprint_hex(plan.plan.provenance.table_fingerprint)));
      }
      if (opts->distributions.given()) {
        std::vector<int> all_pairs;
        for (int m = 0; m < table.table.num_pairs(); ++m) all_pairs.push_back(m);
        std::string text = "pair side layer site unit score\n";
        for (const SiteBlock& b : registry.blocks()) {
          const auto series = export_importance_distribution(
              table.table, registry, b.side, b.layer, b.site, all_pairs);
          for (const DistributionSeries& s : series) {
            for (std::size_t u = 0; u < s.scores.size(); ++u) {
              text += fmt::format("{} {} {} {} {} {}\n", s.pair, side_name(b.side),
                                  b.layer, site_name(b.site), u,
                                  format_double(s.scores[u]));
            }
          }
        }
        write_file_atomic(opts->distributions.value, text);
      }
    } else if (opts->distributions.given()) {
      throw usage_error("analyze: --distributions needs --table");
    }

    if (opts->ckpt.given()) {
      if (!opts->data_dir.given()) {
        throw usage_error("analyze: --ckpt needs --data for test-set BLEU");
      }
      const LoadedCheckpoint loaded = load_checkpoint(opts->ckpt.value);
      check_plan_lineage(plan, loaded);
      const TransformerModel model = restore(loaded.ckpt);
      const MaskSet masks = masks_from_plan(plan, model);
      const DataSet data =
          load_corpus_dir(opts->data_dir.value, model.config().language_pairs);
      const int beam = opts->decode.beam_size(cfg);
      const double alpha = opts->decode.penalty_alpha(cfg);
      const int max_len = opts->decode.decode_len(cfg, model.config());
      for (const std::string& pair : model.config().language_pairs) {
        report.bleu_rows.push_back(
            {pair, pair_bleu(model, data, pair, &masks.mask_for(pair), beam, alpha,
                             max_len)});
      }
    }

    save_report(report, opts->report);
    fmt::print("analyze: {} bleu / {} lscore / {} mscore rows, wrote {}\n",
               report.bleu_rows.size(), report.lscore_rows.size(),
               report.mscore_rows.size(), opts->report);
  });
}

// ---- erase ----------------------------------------------------------------------

void add_erase(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "erase", "randomly erase neurons of one role and measure the BLEU change");
  struct EraseOpts {
    std::string ckpt, plan, data_dir, target, report;
    double fraction = 0.0;
    Flag<std::int64_t> seed;
    Flag<std::string> masks_out, config;
    DecodeFlags decode;
  };
  auto opts = std::make_shared<EraseOpts>();
  cmd->add_option("--ckpt", opts->ckpt, "checkpoint")->required();
  cmd->add_option("--plan", opts->plan, "allocation plan")->required();
  cmd->add_option("--data", opts->data_dir, "corpus directory")->required();
  cmd->add_option("--target", opts->target, "general or specific:<pair>")->required();
  cmd->add_option("--fraction", opts->fraction, "fraction of the role to erase")
      ->required();
  cmd->add_option("--report", opts->report, "report output path")->required();
  opts->seed.opt = cmd->add_option("--seed", opts->seed.value, "sampling seed");
  opts->masks_out.opt =
      cmd->add_option("--out", opts->masks_out.value, "also save the erased mask set");
  opts->config.opt = cmd->add_option("--config", opts->config.value, "key=value config file");
  opts->decode.attach(cmd);

  cmd->callback([opts] {
    const KeyValueConfig cfg = read_config(opts->config);
    const LoadedCheckpoint loaded = load_checkpoint(opts->ckpt);
    const LoadedPlan plan = load_plan(opts->plan);
    check_plan_lineage(plan, loaded);
    const TransformerModel model = restore(loaded.ckpt);
    const NeuronSiteRegistry& registry = model.registry();
    const MaskSet masks = masks_from_plan(plan, model);
    const DataSet data =
        load_corpus_dir(opts->data_dir, model.config().language_pairs);

    EraseTarget target;
    std::string configuration;
    if (opts->target == "general") {
      target.general = true;
      configuration = fmt::format("general:{}", format_double(opts->fraction));
    } else if (opts->target.starts_with("specific:")) {
      const std::string pair = opts->target.substr(9);
      target.general = false;
      target.pair_idx = model.config().pair_index(pair);
      if (target.pair_idx < 0) {
        throw data_error(fmt::format("checkpoint does not serve pair '{}'", pair));
      }
      configuration = fmt::format("specific:{}:{}", pair, format_double(opts->fraction));
    } else {
      throw usage_error(fmt::format(
          "--target must be 'general' or 'specific:<pair>', got '{}'", opts->target));
    }

    const std::uint64_t seed = resolve_seed(opts->seed, cfg, 1);
    const MaskSet erased =
        erase_random(masks, plan.plan, registry, target, opts->fraction, seed);
    if (opts->masks_out.given()) {
      save_mask_set(erased, registry.dims(), opts->masks_out.value);
    }

    const int beam = opts->decode.beam_size(cfg);
    const double alpha = opts->decode.penalty_alpha(cfg);
    const int max_len = opts->decode.decode_len(cfg, model.config());
    AnalysisReport report;
    for (const std::string& pair : model.config().language_pairs) {
      const double before = pair_bleu(model, data, pair, &masks.mask_for(pair), beam,
                                      alpha, max_len);
      const double after = pair_bleu(model, data, pair, &erased.mask_for(pair), beam,
                                     alpha, max_len);
      report.bleu_rows.push_back({pair, before});
      report.erase_rows.push_back({configuration, pair, after - before});
      fmt::print("erase: {} {} bleu {:.4f} -> {:.4f} (delta {:.4f})\n", configuration,
                 pair, before, after, after - before);
    }
    save_report(report, opts->report);
    fmt::print("erase: wrote {}\n", opts->report);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"importance-based neuron allocation for multilingual translation"};
  app.require_subcommand(1);
  add_synth(app);
  add_pretrain(app);
  add_importance(app);
  add_allocate(app);
  add_finetune(app);
  add_translate(app);
  add_analyze(app);
  add_erase(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const usage_error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const data_error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  } catch (const numeric_error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 3;
  }
  return 0;
}
