// Python bindings for the neuron-allocation pipeline. The surface mirrors
// the CLI: operations exchange artifact files (checkpoints, tables, plans)
// plus plain Python lists and dicts, so sessions compose with shell runs.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "neuronalloc/analysis.hpp"
#include "neuronalloc/data.hpp"
#include "neuronalloc/pipeline.hpp"
#include "neuronalloc/serialize.hpp"

namespace py = pybind11;
using namespace nalloc;

namespace {

TransformKind transform_from_name(const std::string& name) {
  if (name == "identity_copy") return TransformKind::identity_copy;
  if (name == "reversal") return TransformKind::reversal;
  if (name == "vocab_shift") return TransformKind::vocab_shift;
  throw usage_error(fmt::format("unknown transform '{}'", name));
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "dev") return Split::dev;
  if (name == "test") return Split::test;
  throw usage_error(fmt::format("unknown split '{}'", name));
}

TrainSchedule make_schedule(std::int64_t steps, std::int64_t warmup, double lr,
                            int batch_tokens, std::int64_t eval_every,
                            int patience, std::uint64_t seed) {
  TrainSchedule s;
  s.total_steps = steps;
  s.warmup_steps = warmup;
  s.peak_lr = lr;
  s.batch_tokens = batch_tokens;
  s.eval_every = eval_every;
  s.patience = patience;
  s.seed = seed;
  return s;
}

py::dict train_info(const TrainResult& result, const std::string& out) {
  py::dict d;
  d["steps"] = result.steps_run;
  d["best_step"] = result.best_step;
  d["best_dev_loss"] = result.best_dev_loss;
  d["checkpoint"] = out;
  d["fingerprint"] =
      fingerprint_hex(content_fingerprint(encode_checkpoint(result.best)));
  return d;
}

// Loads a plan, checks it against the checkpoint's lineage, and builds masks.
MaskSet masks_for(const LoadedPlan& plan, const LoadedCheckpoint& ckpt,
                  const TransformerModel& model) {
  const std::uint64_t want = plan.plan.provenance.checkpoint_fingerprint;
  if (want != ckpt.fingerprint &&
      !(ckpt.ckpt.parent_fingerprint != 0 && want == ckpt.ckpt.parent_fingerprint)) {
    throw data_error(fmt::format(
        "plan was computed from checkpoint {}, but this one is {} (parent {})",
        fingerprint_hex(want), fingerprint_hex(ckpt.fingerprint),
        fingerprint_hex(ckpt.ckpt.parent_fingerprint)));
  }
  if (!(plan.dims == model.registry().dims())) {
    throw data_error("plan site layout does not match the checkpoint's model");
  }
  MaskSet masks = build_mask_set(plan.plan, model.config());
  masks.plan_fingerprint = plan.fingerprint;
  return masks;
}

std::vector<std::vector<std::string>> tokens_of(const Vocabulary& vocab,
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

double corpus_bleu(const TransformerModel& model, const DataSet& data,
                   const std::string& pair, const Mask* mask, int beam,
                   double alpha, int max_len) {
  const Corpus& test = data.find(pair, Split::test);
  const auto hyp = translate_corpus(model, test, mask, beam, alpha, max_len);
  std::vector<std::vector<int>> ref;
  ref.reserve(test.examples.size());
  for (const Example& ex : test.examples) ref.push_back(ex.target);
  return bleu(tokens_of(data.vocab, hyp), tokens_of(data.vocab, ref));
}

}  // namespace

PYBIND11_MODULE(_neuronalloc, m) {
  m.doc() =
      "Importance-based division of transformer neurons into general and "
      "language-specific sets for multilingual translation.";
  m.attr("__version__") = "0.1.0";

  py::register_exception<usage_error>(m, "UsageError", PyExc_ValueError);
  py::register_exception<data_error>(m, "DataError", PyExc_ValueError);
  py::register_exception<numeric_error>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "synthesize",
      [](const std::string& out_dir,
         const std::vector<std::tuple<std::string, std::string, int>>& pairs,
         int vocab, int min_len, int max_len, int train, int dev, int test,
         std::uint64_t seed) {
        SyntheticTaskSpec spec;
        for (const auto& [pair, transform, offset] : pairs) {
          SyntheticPairSpec p;
          p.pair = pair;
          p.transform = transform_from_name(transform);
          p.shift_offset = offset;
          spec.pairs.push_back(std::move(p));
        }
        spec.base_vocab = vocab;
        spec.min_len = min_len;
        spec.max_len = max_len;
        spec.train_size = train;
        spec.dev_size = dev;
        spec.test_size = test;
        spec.seed = seed;
        const DataSet data = generate_synthetic(spec);
        write_corpus_dir(data, out_dir);
        return data.vocab.size();
      },
      py::arg("out_dir"), py::arg("pairs"), py::arg("vocab") = 24,
      py::arg("min_len") = 4, py::arg("max_len") = 10, py::arg("train") = 5000,
      py::arg("dev") = 200, py::arg("test") = 200, py::arg("seed") = 1,
      "Write a synthetic parallel corpus; pairs are (name, transform, offset) "
      "tuples. Returns the vocabulary size.");

  m.def(
      "pretrain",
      [](const std::string& data_dir, const std::vector<std::string>& pairs,
         const std::string& out, int layers, int d_model, int heads, int d_ffn,
         int max_seq_len, double dropout, bool share_embeddings,
         std::int64_t steps, std::int64_t warmup, double lr, int batch_tokens,
         std::int64_t eval_every, int patience, std::uint64_t seed) {
        const DataSet data = load_corpus_dir(data_dir, pairs);
        ModelConfig mc;
        mc.num_layers = layers;
        mc.d_model = d_model;
        mc.num_heads = heads;
        mc.d_ffn = d_ffn;
        mc.max_seq_len = max_seq_len;
        mc.dropout_rate = static_cast<float>(dropout);
        mc.share_embeddings = share_embeddings;
        mc.vocab_size = data.vocab.size();
        mc.language_pairs = pairs;
        const TrainSchedule schedule =
            make_schedule(steps, warmup, lr, batch_tokens, eval_every, patience, seed);
        TransformerModel model(mc, schedule.seed);
        const TrainResult result = train(model, data, schedule, nullptr, 0);
        save_checkpoint(result.best, out);
        return train_info(result, out);
      },
      py::arg("data_dir"), py::arg("pairs"), py::arg("out"), py::arg("layers") = 2,
      py::arg("d_model") = 64, py::arg("heads") = 4, py::arg("d_ffn") = 128,
      py::arg("max_seq_len") = 64, py::arg("dropout") = 0.1,
      py::arg("share_embeddings") = false, py::arg("steps") = 2000,
      py::arg("warmup") = 40, py::arg("lr") = 3e-3, py::arg("batch_tokens") = 256,
      py::arg("eval_every") = 50, py::arg("patience") = 0, py::arg("seed") = 1,
      "Jointly train a fresh model on all pairs and save the best checkpoint.");

  m.def(
      "score_importance",
      [](const std::string& ckpt, const std::string& data_dir,
         const std::string& criterion, std::int64_t cap, const std::string& out) {
        const LoadedCheckpoint loaded = load_checkpoint(ckpt);
        TransformerModel model = restore(loaded.ckpt);
        const DataSet data = load_corpus_dir(data_dir, model.config().language_pairs);
        const ImportanceTable table =
            score_importance(model, data, parse_criterion(criterion), cap);
        save_table(table, model.registry().dims(), loaded.fingerprint, out);
        return out;
      },
      py::arg("ckpt"), py::arg("data_dir"), py::arg("criterion") = "te",
      py::arg("cap") = 0, py::arg("out"),
      "Score per-pair neuron importance over the training split and save the "
      "table (cap = max target tokens per pair, 0 for all).");

  m.def(
      "allocate",
      [](const std::string& table_path, double rho, double k,
         const std::string& variant, const std::string& out) {
        AllocationConfig ac;
        ac.rho = rho;
        ac.k = k;
        ac.variant = parse_variant(variant);
        const LoadedTable loaded = load_table(table_path);
        const NeuronSiteRegistry registry(loaded.dims);
        AllocationPlan plan = allocate(loaded.table, registry, ac, stderr_logger());
        plan.provenance.table_fingerprint = loaded.fingerprint;
        plan.provenance.checkpoint_fingerprint = loaded.checkpoint_fingerprint;
        save_plan(plan, loaded.dims, out);
        py::dict d;
        d["neurons"] = plan.registry_size();
        d["general"] = plan.num_general();
        d["specific"] = plan.registry_size() - plan.num_general();
        d["plan"] = out;
        return d;
      },
      py::arg("table"), py::arg("rho") = 0.9, py::arg("k") = 0.7,
      py::arg("variant") = "pair", py::arg("out"),
      "Divide neurons into general and specific sets and save the plan.");

  m.def(
      "finetune",
      [](const std::string& ckpt, const std::string& plan_path,
         const std::string& data_dir, const std::string& out, std::int64_t steps,
         std::int64_t warmup, double lr, int batch_tokens, std::int64_t eval_every,
         int patience, std::uint64_t seed) {
        const LoadedCheckpoint loaded = load_checkpoint(ckpt);
        const LoadedPlan plan = load_plan(plan_path);
        if (plan.plan.provenance.checkpoint_fingerprint != loaded.fingerprint) {
          throw data_error(fmt::format(
              "plan was computed from checkpoint {}, not this one ({})",
              fingerprint_hex(plan.plan.provenance.checkpoint_fingerprint),
              fingerprint_hex(loaded.fingerprint)));
        }
        TransformerModel model = restore(loaded.ckpt);
        const MaskSet masks = masks_for(plan, loaded, model);
        const DataSet data = load_corpus_dir(data_dir, model.config().language_pairs);
        const TrainSchedule schedule =
            make_schedule(steps, warmup, lr, batch_tokens, eval_every, patience, seed);
        const TrainResult result =
            train(model, data, schedule, &masks, loaded.fingerprint);
        save_checkpoint(result.best, out);
        return train_info(result, out);
      },
      py::arg("ckpt"), py::arg("plan"), py::arg("data_dir"), py::arg("out"),
      py::arg("steps") = 1000, py::arg("warmup") = 40, py::arg("lr") = 3e-3,
      py::arg("batch_tokens") = 256, py::arg("eval_every") = 50,
      py::arg("patience") = 0, py::arg("seed") = 1,
      "Continue training under the plan's per-pair masks.");

  m.def(
      "translate",
      [](const std::string& ckpt, const std::string& data_dir,
         const std::string& pair, const std::string& split,
         const std::string& plan_path, int beam, double alpha, int max_len) {
        const LoadedCheckpoint loaded = load_checkpoint(ckpt);
        const TransformerModel model = restore(loaded.ckpt);
        const DataSet data = load_corpus_dir(data_dir, model.config().language_pairs);
        MaskSet masks;
        const Mask* mask = nullptr;
        if (!plan_path.empty()) {
          const LoadedPlan plan = load_plan(plan_path);
          masks = masks_for(plan, loaded, model);
          mask = &masks.mask_for(pair);
        }
        const Corpus& corpus = data.find(pair, split_from_name(split));
        const int cap = max_len > 0 ? max_len : model.config().max_seq_len;
        const auto hyp_ids = translate_corpus(model, corpus, mask, beam, alpha, cap);
        std::vector<std::vector<int>> ref_ids;
        ref_ids.reserve(corpus.examples.size());
        for (const Example& ex : corpus.examples) ref_ids.push_back(ex.target);
        py::dict d;
        d["hypotheses"] = tokens_of(data.vocab, hyp_ids);
        d["references"] = tokens_of(data.vocab, ref_ids);
        return d;
      },
      py::arg("ckpt"), py::arg("data_dir"), py::arg("pair"),
      py::arg("split") = "test", py::arg("plan") = std::string(),
      py::arg("beam") = 4, py::arg("alpha") = 0.6, py::arg("max_len") = 0,
      "Decode one corpus split; returns token-level hypotheses and references.");

  m.def("bleu", &bleu, py::arg("hypotheses"), py::arg("references"),
        "Corpus-level smoothed 4-gram BLEU in [0, 100] over token lists.");

  m.def(
      "plan_report",
      [](const std::string& plan_path) {
        const LoadedPlan plan = load_plan(plan_path);
        const NeuronSiteRegistry registry(plan.dims);
        const AnalysisReport report = plan_metrics(plan.plan, registry);
        py::list lrows;
        for (const auto& r : report.lscore_rows) {
          py::dict d;
          d["side"] = std::string(side_name(r.side));
          d["layer"] = r.layer;
          d["pair"] = r.pair;
          d["value"] = r.value;
          lrows.append(d);
        }
        py::list mrows;
        for (const auto& r : report.mscore_rows) {
          py::dict d;
          d["side"] = std::string(side_name(r.side));
          d["layer"] = r.layer;
          d["site"] = std::string(site_name(r.site));
          d["value"] = r.value;
          mrows.append(d);
        }
        py::dict d;
        d["pairs"] = plan.plan.pairs;
        d["lscore"] = lrows;
        d["mscore"] = mrows;
        return d;
      },
      py::arg("plan"),
      "LScore and MScore rows for every layer and site with specific neurons.");

  m.def(
      "erase_eval",
      [](const std::string& ckpt, const std::string& plan_path,
         const std::string& data_dir, const std::string& target, double fraction,
         std::uint64_t seed, int beam, double alpha, int max_len) {
        const LoadedCheckpoint loaded = load_checkpoint(ckpt);
        const LoadedPlan plan = load_plan(plan_path);
        const TransformerModel model = restore(loaded.ckpt);
        const MaskSet masks = masks_for(plan, loaded, model);
        const DataSet data = load_corpus_dir(data_dir, model.config().language_pairs);

        EraseTarget et;
        if (target == "general") {
          et.general = true;
        } else if (target.starts_with("specific:")) {
          et.general = false;
          et.pair_idx = model.config().pair_index(target.substr(9));
          if (et.pair_idx < 0) {
            throw data_error(fmt::format("checkpoint does not serve pair '{}'",
                                         target.substr(9)));
          }
        } else {
          throw usage_error(fmt::format(
              "target must be 'general' or 'specific:<pair>', got '{}'", target));
        }
        const MaskSet erased = erase_random(masks, plan.plan, model.registry(), et,
                                            fraction, seed);
        const int cap = max_len > 0 ? max_len : model.config().max_seq_len;
        py::dict d;
        for (const std::string& pair : model.config().language_pairs) {
          const double before =
              corpus_bleu(model, data, pair, &masks.mask_for(pair), beam, alpha, cap);
          const double after =
              corpus_bleu(model, data, pair, &erased.mask_for(pair), beam, alpha, cap);
          d[py::str(pair)] = py::make_tuple(before, after);
        }
        return d;
      },
      py::arg("ckpt"), py::arg("plan"), py::arg("data_dir"), py::arg("target"),
      py::arg("fraction"), py::arg("seed") = 1, py::arg("beam") = 1,
      py::arg("alpha") = 0.6, py::arg("max_len") = 0,
      "Erase a random fraction of one neuron role and report per-pair test "
      "BLEU (before, after).");
}
