#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuronalloc/allocation.hpp"
#include "neuronalloc/data.hpp"
#include "neuronalloc/importance.hpp"
#include "neuronalloc/model.hpp"
#include "neuronalloc/serialize.hpp"

namespace nalloc {

// Shared schedule for both training stages. Batches are pair-homogeneous,
// cycle round-robin over the configured pairs, and pack whole sentences up
// to a token budget; each pair reshuffles its corpus per epoch from a seed
// derived from (seed, pair, epoch). The learning rate follows
// peak_lr * min(t / warmup, sqrt(warmup / t)).
struct TrainSchedule {
  std::int64_t total_steps = 0;  // 0 trains nothing and snapshots the input
  std::int64_t warmup_steps = 40;
  double peak_lr = 3e-3;
  int batch_tokens = 256;       // max source+target tokens per batch
  std::int64_t eval_every = 50; // dev-loss cadence in steps; 0 disables
  int patience = 0;             // dev evals without improvement before an
                                // early stop; 0 keeps training to total_steps
  std::uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;

  void validate() const;
};

struct TrainResult {
  std::int64_t steps_run = 0;
  double best_dev_loss = 0.0;
  std::int64_t best_step = 0;
  Checkpoint best;  // best dev-loss snapshot; final state when eval is off
};

// One loop serves both stages: masks == nullptr trains unmasked (pretraining
// and the multilingual baseline); with masks, every batch applies its pair's
// mask in forward and, through it, backward. Optimizer moments start fresh.
TrainResult train(TransformerModel& model, const DataSet& data,
                  const TrainSchedule& schedule, const MaskSet* masks,
                  std::uint64_t parent_fingerprint = 0, LogFn log = {});

// Mean dev-set NLL per non-pad target token over all configured pairs.
double dev_loss(const TransformerModel& model, const DataSet& data,
                const MaskSet* masks);

// Accumulates importance per pair over the training split (capped per pair
// at token_cap target tokens when token_cap > 0) and finalizes the table.
ImportanceTable score_importance(TransformerModel& model, const DataSet& data,
                                 Criterion criterion, std::int64_t token_cap);

// Stage 2: score importance, then allocate, stamping both provenance
// fingerprints into the plan.
struct EvalAllocResult {
  ImportanceTable table;
  AllocationPlan plan;
};
EvalAllocResult evaluate_and_allocate(TransformerModel& model, const DataSet& data,
                                      Criterion criterion,
                                      const AllocationConfig& config,
                                      std::int64_t token_cap,
                                      std::uint64_t checkpoint_fingerprint,
                                      LogFn warn = {});

}  // namespace nalloc
