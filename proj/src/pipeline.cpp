#include "neuronalloc/pipeline.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <numeric>

namespace nalloc {

namespace {

// Per-pair token budget of one importance-scoring batch.
constexpr std::int64_t kImportanceBatchTokens = 256;

std::int64_t example_cost(const Example& ex) {
  return static_cast<std::int64_t>(ex.source.size() + ex.target.size()) + 1;
}

// Pair-homogeneous batches cycling round-robin over the pairs. Each pair
// walks its own shuffled corpus order, reshuffled per epoch from
// (seed, pair, epoch); a batch packs whole sentences up to the token budget
// and never crosses an epoch boundary.
class RoundRobinBatcher {
 public:
  RoundRobinBatcher(const DataSet& data, const std::vector<std::string>& pairs,
                    int batch_tokens, std::uint64_t seed)
      : batch_tokens_(batch_tokens), seed_(seed) {
    for (const std::string& pair : pairs) {
      const Corpus& corpus = data.find(pair, Split::train);
      if (corpus.examples.empty()) {
        throw data_error(fmt::format("training corpus for '{}' is empty", pair));
      }
      states_.push_back(State{&corpus, content_fingerprint(pair), {}, 0, 0});
    }
    for (State& st : states_) reshuffle(st);
  }

  Batch next() {
    State& st = states_[next_pair_];
    Batch batch;
    batch.pair_idx = static_cast<int>(next_pair_);
    std::int64_t tokens = 0;
    while (st.cursor < st.order.size()) {
      const Example& ex = st.corpus->examples[st.order[st.cursor]];
      const std::int64_t cost = example_cost(ex);
      if (!batch.examples.empty() && tokens + cost > batch_tokens_) break;
      batch.examples.push_back(ex);
      tokens += cost;
      ++st.cursor;
      if (tokens >= batch_tokens_) break;
    }
    if (st.cursor == st.order.size()) {
      ++st.epoch;
      reshuffle(st);
    }
    next_pair_ = (next_pair_ + 1) % states_.size();
    return batch;
  }

 private:
  struct State {
    const Corpus* corpus;
    std::uint64_t pair_tag;
    std::vector<std::size_t> order;
    std::size_t cursor;
    std::int64_t epoch;
  };

  void reshuffle(State& st) {
    st.order.resize(st.corpus->examples.size());
    std::iota(st.order.begin(), st.order.end(), std::size_t{0});
    Rng rng(mix_seed(mix_seed(seed_, st.pair_tag), static_cast<std::uint64_t>(st.epoch)));
    rng.shuffle(st.order);
    st.cursor = 0;
  }

  int batch_tokens_;
  std::uint64_t seed_;
  std::vector<State> states_;
  std::size_t next_pair_ = 0;
};

double learning_rate(const TrainSchedule& s, std::int64_t t) {
  const double step = static_cast<double>(t);
  const double warmup = static_cast<double>(s.warmup_steps);
  return s.peak_lr * std::min(step / warmup, std::sqrt(warmup / step));
}

#ifndef NDEBUG
// Masking must stop gradients from reaching the parameters that only feed
// masked units: the w1 column / b1 entry / w2 row of a masked FFN unit and
// the wo column / bo entry of a masked attention output unit.
void assert_masked_grads_zero(TransformerModel& model, const Mask& mask) {
  const auto& blocks = model.registry().blocks();
  const auto grad_at = [&](const std::string& name, std::size_t index) {
    const Tensor& t = model.param(name).tensor;
    return t.has_grad() ? t.grad()[index] : 0.0f;
  };
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const SiteBlock& b = blocks[bi];
    const std::vector<float>& row = mask.row(bi);
    const std::string side = b.side == Side::encoder ? "enc" : "dec";
    for (int u = 0; u < b.width; ++u) {
      if (row[static_cast<std::size_t>(u)] != 0.0f) continue;
      if (b.site == SiteKind::ffn_inner) {
        const std::string p = fmt::format("{}.{}.ffn", side, b.layer);
        const int d_model = model.config().d_model;
        for (int r = 0; r < d_model; ++r) {
          assert(grad_at(p + ".w1", static_cast<std::size_t>(r) * b.width + u) == 0.0f);
          assert(grad_at(p + ".w2", static_cast<std::size_t>(u) * d_model + r) == 0.0f);
        }
        assert(grad_at(p + ".b1", static_cast<std::size_t>(u)) == 0.0f);
      } else {
        const std::string p = fmt::format(
            "{}.{}.{}", side, b.layer,
            b.site == SiteKind::self_attn_out ? "self" : "cross");
        for (int r = 0; r < b.width; ++r) {
          assert(grad_at(p + ".wo", static_cast<std::size_t>(r) * b.width + u) == 0.0f);
        }
        assert(grad_at(p + ".bo", static_cast<std::size_t>(u)) == 0.0f);
      }
    }
  }
}
#endif

}  // namespace

void TrainSchedule::validate() const {
  const auto fail = [](std::string_view what) {
    throw usage_error(fmt::format("train schedule: {}", what));
  };
  if (total_steps < 0) fail("total_steps cannot be negative");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (!(peak_lr > 0.0)) fail("peak_lr must be positive");
  if (batch_tokens < 1) fail("batch_tokens must be >= 1");
  if (eval_every < 0) fail("eval_every cannot be negative");
  if (patience < 0) fail("patience cannot be negative");
  if (patience > 0 && eval_every == 0) fail("patience needs eval_every > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

TrainResult train(TransformerModel& model, const DataSet& data,
                  const TrainSchedule& schedule, const MaskSet* masks,
                  std::uint64_t parent_fingerprint, LogFn log) {
  schedule.validate();
  const std::vector<std::string>& pairs = model.config().language_pairs;

  // Resolve each configured pair's mask up front so a mismatched mask set
  // fails before any step runs.
  std::vector<const Mask*> mask_of(pairs.size(), nullptr);
  if (masks) {
    for (std::size_t m = 0; m < pairs.size(); ++m) {
      mask_of[m] = &masks->mask_for(pairs[m]);
    }
  }

  RoundRobinBatcher batcher(data, pairs, schedule.batch_tokens, schedule.seed);

  // Both stages start from fresh optimizer state.
  for (Parameter& p : model.params()) {
    p.moment1.assign(p.tensor.numel(), 0.0f);
    p.moment2.assign(p.tensor.numel(), 0.0f);
  }
  zero_grad(model.params());

  Rng dropout_rng(mix_seed(schedule.seed, 0x64726f706f7574ULL));
  AdamConfig adam{0.0, schedule.adam_beta1, schedule.adam_beta2, schedule.adam_eps};

  TrainResult result;
  result.best_dev_loss = std::numeric_limits<double>::infinity();
  int evals_since_best = 0;
  const bool evals_on = schedule.eval_every > 0;

  for (std::int64_t t = 1; t <= schedule.total_steps; ++t) {
    const Batch batch = batcher.next();
    const Tensor loss = model.forward_train(
        batch, mask_of[static_cast<std::size_t>(batch.pair_idx)],
        model.config().dropout_rate > 0.0f ? &dropout_rng : nullptr);
    backward(loss);
#ifndef NDEBUG
    if (masks) {
      assert_masked_grads_zero(model, *mask_of[static_cast<std::size_t>(batch.pair_idx)]);
    }
#endif
    adam.lr = learning_rate(schedule, t);
    adam_step(model.params(), adam, t);
    zero_grad(model.params());
    result.steps_run = t;

    if (evals_on && (t % schedule.eval_every == 0 || t == schedule.total_steps)) {
      const double dl = dev_loss(model, data, masks);
      if (log) {
        log(fmt::format("step {} lr {:.6f} train_loss {:.4f} dev_loss {:.4f}", t,
                        adam.lr, loss.item(), dl));
      }
      if (dl < result.best_dev_loss) {
        result.best_dev_loss = dl;
        result.best_step = t;
        result.best = snapshot(model, t, parent_fingerprint);
        evals_since_best = 0;
      } else {
        ++evals_since_best;
        if (schedule.patience > 0 && evals_since_best >= schedule.patience) {
          if (log) log(fmt::format("stopping early at step {}", t));
          break;
        }
      }
    } else if (log && t % 100 == 0) {
      log(fmt::format("step {} lr {:.6f} train_loss {:.4f}", t, adam.lr, loss.item()));
    }
  }

  // Evaluation disabled, or zero steps: the final state is the checkpoint.
  if (result.best.params.empty()) {
    result.best_dev_loss = std::numeric_limits<double>::quiet_NaN();
    result.best_step = result.steps_run;
    result.best = snapshot(model, result.steps_run, parent_fingerprint);
  }
  return result;
}

double dev_loss(const TransformerModel& model, const DataSet& data,
                const MaskSet* masks) {
  NoGradGuard guard;
  const std::vector<std::string>& pairs = model.config().language_pairs;
  double total_nll = 0.0;
  std::int64_t total_tokens = 0;
  for (std::size_t m = 0; m < pairs.size(); ++m) {
    const Corpus& corpus = data.find(pairs[m], Split::dev);
    const Mask* mask = masks ? &masks->mask_for(pairs[m]) : nullptr;
    for (const Example& ex : corpus.examples) {
      Batch one;
      one.pair_idx = static_cast<int>(m);
      one.examples.push_back(ex);
      const std::int64_t tokens = static_cast<std::int64_t>(ex.target.size()) + 1;
      total_nll += static_cast<double>(model.forward_train(one, mask).item()) *
                   static_cast<double>(tokens);
      total_tokens += tokens;
    }
  }
  if (total_tokens == 0) throw data_error("dev corpora hold no target tokens");
  return total_nll / static_cast<double>(total_tokens);
}

ImportanceTable score_importance(TransformerModel& model, const DataSet& data,
                                 Criterion criterion, std::int64_t token_cap) {
  const std::vector<std::string>& pairs = model.config().language_pairs;
  ImportanceTable table(criterion, pairs, model.registry().size());

  for (std::size_t m = 0; m < pairs.size(); ++m) {
    const Corpus& corpus = data.find(pairs[m], Split::train);
    Batch batch;
    batch.pair_idx = static_cast<int>(m);
    std::int64_t batch_tokens = 0;
    std::int64_t used = 0;
    for (const Example& ex : corpus.examples) {
      if (token_cap > 0 && used >= token_cap) break;
      const std::int64_t tokens = static_cast<std::int64_t>(ex.target.size()) + 1;
      batch.examples.push_back(ex);
      batch_tokens += tokens;
      used += tokens;
      if (batch_tokens >= kImportanceBatchTokens) {
        accumulate_batch(model, batch, criterion, table);
        batch.examples.clear();
        batch_tokens = 0;
      }
    }
    if (!batch.examples.empty()) accumulate_batch(model, batch, criterion, table);
  }
  table.finalize();
  return table;
}

EvalAllocResult evaluate_and_allocate(TransformerModel& model, const DataSet& data,
                                      Criterion criterion,
                                      const AllocationConfig& config,
                                      std::int64_t token_cap,
                                      std::uint64_t checkpoint_fingerprint,
                                      LogFn warn) {
  config.validate();
  ImportanceTable table = score_importance(model, data, criterion, token_cap);
  AllocationPlan plan = allocate(table, model.registry(), config, warn);
  plan.provenance.checkpoint_fingerprint = checkpoint_fingerprint;
  plan.provenance.table_fingerprint = content_fingerprint(
      encode_table(table, model.registry().dims(), checkpoint_fingerprint));
  return EvalAllocResult{std::move(table), std::move(plan)};
}

}  // namespace nalloc
