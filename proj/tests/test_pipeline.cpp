#include <doctest.h>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "neuronalloc/common.hpp"
#include "neuronalloc/data.hpp"
#include "neuronalloc/model.hpp"
#include "neuronalloc/pipeline.hpp"
#include "neuronalloc/serialize.hpp"

using namespace nalloc;

namespace {

DataSet small_data() {
  SyntheticTaskSpec spec;
  spec.pairs = {{"en2copy", TransformKind::identity_copy, 0},
                {"en2rev", TransformKind::reversal, 0}};
  spec.base_vocab = 10;
  spec.min_len = 3;
  spec.max_len = 5;
  spec.train_size = 60;
  spec.dev_size = 10;
  spec.test_size = 10;
  spec.seed = 11;
  return generate_synthetic(spec);
}

ModelConfig small_config(const DataSet& data, float dropout = 0.0f) {
  ModelConfig mc;
  mc.num_layers = 1;
  mc.d_model = 16;
  mc.num_heads = 2;
  mc.d_ffn = 24;
  mc.vocab_size = data.vocab.size();
  mc.max_seq_len = 16;
  mc.dropout_rate = dropout;
  mc.language_pairs = {"en2copy", "en2rev"};
  return mc;
}

TrainSchedule quick_schedule(std::int64_t steps) {
  TrainSchedule s;
  s.total_steps = steps;
  s.warmup_steps = 5;
  s.peak_lr = 3e-3;
  s.batch_tokens = 64;
  s.eval_every = 0;
  s.seed = 3;
  return s;
}

}  // namespace

TEST_CASE("train schedule validation names every bad field") {
  TrainSchedule s;
  s.validate();
  s.total_steps = -1;
  CHECK_THROWS_AS(s.validate(), usage_error);
  s = TrainSchedule{};
  s.warmup_steps = 0;
  CHECK_THROWS_AS(s.validate(), usage_error);
  s = TrainSchedule{};
  s.peak_lr = 0.0;
  CHECK_THROWS_AS(s.validate(), usage_error);
  s = TrainSchedule{};
  s.batch_tokens = 0;
  CHECK_THROWS_AS(s.validate(), usage_error);
  s = TrainSchedule{};
  s.eval_every = -1;
  CHECK_THROWS_AS(s.validate(), usage_error);
  s = TrainSchedule{};
  s.patience = 2;  // patience without evals cannot trigger
  s.eval_every = 0;
  CHECK_THROWS_AS(s.validate(), usage_error);
  s = TrainSchedule{};
  s.adam_beta1 = 1.0;
  CHECK_THROWS_AS(s.validate(), usage_error);
  s = TrainSchedule{};
  s.adam_eps = 0.0;
  CHECK_THROWS_AS(s.validate(), usage_error);
}

TEST_CASE("zero training steps snapshot the input model unchanged") {
  const DataSet data = small_data();
  TransformerModel model(small_config(data), 9);
  const Checkpoint before = snapshot(model, 0, 0);
  const TrainResult result = train(model, data, quick_schedule(0), nullptr, 42);
  CHECK(result.steps_run == 0);
  CHECK(result.best_step == 0);
  CHECK(std::isnan(result.best_dev_loss));
  CHECK(result.best.parent_fingerprint == 42);
  REQUIRE(result.best.params.size() == before.params.size());
  for (std::size_t i = 0; i < before.params.size(); ++i) {
    CHECK(result.best.params[i].second == before.params[i].second);
  }
}

TEST_CASE("training reduces the loss and is bit-reproducible") {
  const DataSet data = small_data();

  TransformerModel model_a(small_config(data), 9);
  const double before = dev_loss(model_a, data, nullptr);
  const TrainResult run_a = train(model_a, data, quick_schedule(40), nullptr);
  CHECK(run_a.steps_run == 40);
  const double after = dev_loss(model_a, data, nullptr);
  CHECK(after < before);

  TransformerModel model_b(small_config(data), 9);
  const TrainResult run_b = train(model_b, data, quick_schedule(40), nullptr);
  CHECK(encode_checkpoint(run_a.best) == encode_checkpoint(run_b.best));

  SUBCASE("a different schedule seed lands on different parameters") {
    TransformerModel model_c(small_config(data), 9);
    TrainSchedule other = quick_schedule(40);
    other.seed = 4;
    const TrainResult run_c = train(model_c, data, other, nullptr);
    CHECK(encode_checkpoint(run_a.best) != encode_checkpoint(run_c.best));
  }
}

TEST_CASE("dropout training stays reproducible under a fixed seed") {
  const DataSet data = small_data();
  TransformerModel model_a(small_config(data, 0.2f), 9);
  TransformerModel model_b(small_config(data, 0.2f), 9);
  const TrainResult a = train(model_a, data, quick_schedule(10), nullptr);
  const TrainResult b = train(model_b, data, quick_schedule(10), nullptr);
  CHECK(encode_checkpoint(a.best) == encode_checkpoint(b.best));
}

TEST_CASE("dev evaluation tracks the best step and patience stops early") {
  const DataSet data = small_data();
  TransformerModel model(small_config(data), 9);
  TrainSchedule s = quick_schedule(30);
  s.eval_every = 10;
  const TrainResult result = train(model, data, s, nullptr);
  CHECK(std::isfinite(result.best_dev_loss));
  CHECK(result.best_step >= 10);
  CHECK(result.best_step <= 30);
  CHECK(result.best.step == result.best_step);

  SUBCASE("the saved best reproduces its recorded dev loss") {
    const TransformerModel best = restore(result.best);
    CHECK(dev_loss(best, data, nullptr) == doctest::Approx(result.best_dev_loss));
  }
  SUBCASE("patience cuts training short once dev loss stops improving") {
    // A peak learning rate this small underflows to 0.0f once the float32
    // update is applied, so the weights never move: the second eval cannot
    // improve on the first, and patience 1 stops the run at step 2.
    TransformerModel fresh(small_config(data), 9);
    TrainSchedule eager = quick_schedule(200);
    eager.eval_every = 1;
    eager.patience = 1;
    eager.peak_lr = 1e-60;
    const TrainResult stopped = train(fresh, data, eager, nullptr);
    CHECK(stopped.steps_run == 2);
    CHECK(stopped.best_step == 1);
  }
}

TEST_CASE("training with masks applies each pair's mask") {
  const DataSet data = small_data();
  const ModelConfig mc = small_config(data);
  TransformerModel model(mc, 9);
  const NeuronSiteRegistry& registry = model.registry();

  // Disable one distinct ffn unit per pair.
  MaskSet masks;
  masks.pairs = mc.language_pairs;
  masks.masks.assign(2, Mask::all_active(registry));
  const std::size_t u0 =
      registry.flat_index(NeuronId{Side::encoder, 1, SiteKind::ffn_inner, 0});
  const std::size_t u1 =
      registry.flat_index(NeuronId{Side::encoder, 1, SiteKind::ffn_inner, 1});
  masks.masks[0].set(registry, u0, false);
  masks.masks[1].set(registry, u1, false);

  const TrainResult result = train(model, data, quick_schedule(10), &masks, 7);
  CHECK(result.steps_run == 10);
  CHECK(result.best.parent_fingerprint == 7);

  SUBCASE("a mask set missing a configured pair fails before any step") {
    MaskSet partial;
    partial.pairs = {"en2copy"};
    partial.masks = {Mask::all_active(registry)};
    TransformerModel fresh(mc, 9);
    CHECK_THROWS_AS(train(fresh, data, quick_schedule(5), &partial), data_error);
  }
}

TEST_CASE("dev_loss averages per token and validates inputs") {
  const DataSet data = small_data();
  const TransformerModel model(small_config(data), 9);
  const double loss = dev_loss(model, data, nullptr);
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0);
  // Hand-average over single-example batches.
  double nll = 0.0;
  std::int64_t tokens = 0;
  for (int m = 0; m < 2; ++m) {
    const Corpus& corpus =
        data.find(model.config().language_pairs[m], Split::dev);
    for (const Example& ex : corpus.examples) {
      Batch one;
      one.pair_idx = m;
      one.examples.push_back(ex);
      const std::int64_t t = static_cast<std::int64_t>(ex.target.size()) + 1;
      nll += static_cast<double>(model.forward_train(one).item()) *
             static_cast<double>(t);
      tokens += t;
    }
  }
  CHECK(loss == doctest::Approx(nll / tokens).epsilon(1e-12));

  SUBCASE("missing dev corpus raises") {
    DataSet train_only;
    train_only.vocab = data.vocab;
    for (const Corpus& c : data.corpora) {
      if (c.split == Split::train) train_only.corpora.push_back(c);
    }
    CHECK_THROWS_AS(dev_loss(model, train_only, nullptr), data_error);
  }
}

TEST_CASE("empty training corpora fail before the first step") {
  const DataSet data = small_data();
  DataSet hollow;
  hollow.vocab = data.vocab;
  for (Corpus c : data.corpora) {
    if (c.pair == "en2rev" && c.split == Split::train) c.examples.clear();
    hollow.corpora.push_back(std::move(c));
  }
  TransformerModel model(small_config(data), 9);
  CHECK_THROWS_AS(train(model, hollow, quick_schedule(5), nullptr), data_error);
}

TEST_CASE("score_importance respects the per-pair token cap") {
  const DataSet data = small_data();
  TransformerModel model(small_config(data), 9);

  SUBCASE("uncapped scoring consumes the whole training split") {
    const ImportanceTable table =
        score_importance(model, data, Criterion::av, 0);
    std::int64_t expect = 0;
    for (const Example& ex : data.find("en2copy", Split::train).examples) {
      expect += static_cast<std::int64_t>(ex.target.size()) + 1;
    }
    CHECK(table.tokens(0) == expect);
    CHECK(table.finalized());
  }
  SUBCASE("a cap bounds tokens within one example of the target") {
    const std::int64_t cap = 50;
    const ImportanceTable table =
        score_importance(model, data, Criterion::te, cap);
    for (int m = 0; m < 2; ++m) {
      CHECK(table.tokens(m) >= cap);
      // max_len 5 target + eos = 6 tokens per example at most.
      CHECK(table.tokens(m) < cap + 6);
    }
  }
  SUBCASE("capped scoring is insensitive to later corpus entries") {
    DataSet mutated;
    mutated.vocab = data.vocab;
    for (Corpus c : data.corpora) {
      if (c.split == Split::train) {
        // Append a duplicate of the first example; a cap small enough to
        // stop earlier must not see it.
        c.examples.push_back(c.examples.front());
      }
      mutated.corpora.push_back(std::move(c));
    }
    const ImportanceTable a = score_importance(model, data, Criterion::av, 40);
    const ImportanceTable b =
        score_importance(model, mutated, Criterion::av, 40);
    for (int m = 0; m < 2; ++m) {
      CHECK(a.tokens(m) == b.tokens(m));
      for (std::size_t i = 0; i < a.registry_size(); ++i) {
        CHECK(a.score(m, i) == b.score(m, i));
      }
    }
  }
}

TEST_CASE("evaluate_and_allocate stamps both provenance fingerprints") {
  const DataSet data = small_data();
  TransformerModel model(small_config(data), 9);
  AllocationConfig cfg;
  cfg.rho = 0.6;
  cfg.k = 0.5;
  const std::uint64_t ckpt_fp = 0xDEADBEEF;
  const EvalAllocResult result =
      evaluate_and_allocate(model, data, Criterion::te, cfg, 100, ckpt_fp);
  CHECK(result.plan.provenance.checkpoint_fingerprint == ckpt_fp);
  const std::string table_bytes =
      encode_table(result.table, model.registry().dims(), ckpt_fp);
  CHECK(result.plan.provenance.table_fingerprint ==
        content_fingerprint(table_bytes));
  CHECK(result.plan.pairs == model.config().language_pairs);
  CHECK(result.plan.registry_size() == model.registry().size());
  CHECK(result.plan.num_general() > 0);
  CHECK(result.plan.num_general() < model.registry().size());
}
