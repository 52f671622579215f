#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuronalloc/common.hpp"
#include "neuronalloc/mask.hpp"
#include "neuronalloc/model.hpp"

namespace nalloc {

enum class Criterion : std::uint8_t { te, av };
std::string_view criterion_name(Criterion c);
Criterion parse_criterion(std::string_view name);

// Per-(language-pair, neuron) importance scores. While accumulating, each
// cell is an order-independent exact sum of per-batch contributions, so any
// ordering of the same batches finalizes to identical tables. Finalization
// divides by the per-pair token counters and freezes the table.
class ImportanceTable {
 public:
  ImportanceTable(Criterion criterion, std::vector<std::string> pairs,
                  std::size_t registry_size);

  Criterion criterion() const { return criterion_; }
  const std::vector<std::string>& pairs() const { return pairs_; }
  int num_pairs() const { return static_cast<int>(pairs_.size()); }
  std::size_t registry_size() const { return registry_size_; }
  bool finalized() const { return finalized_; }
  std::int64_t tokens(int pair_idx) const { return tokens_.at(pair_idx); }

  // Accumulation interface (used by accumulate_batch and table merging).
  void add_contribution(int pair_idx, std::size_t neuron, double value);
  void add_tokens(int pair_idx, std::int64_t count);
  void merge(const ImportanceTable& partial);

  void finalize();
  double score(int pair_idx, std::size_t neuron) const;  // finalized only
  // Mean importance across pairs, I(i); finalized only.
  std::vector<double> mean_importance() const;

  // Rebuild an already-finalized table (deserialization).
  static ImportanceTable from_finalized(Criterion criterion,
                                        std::vector<std::string> pairs,
                                        std::vector<std::vector<double>> scores,
                                        std::vector<std::int64_t> tokens);

 private:
  void require_open(std::string_view what) const;
  void require_finalized(std::string_view what) const;

  Criterion criterion_;
  std::vector<std::string> pairs_;
  std::size_t registry_size_;
  bool finalized_ = false;
  std::vector<std::vector<ExactSum>> sums_;    // [pair][neuron], until finalize
  std::vector<std::vector<double>> scores_;    // [pair][neuron], after finalize
  std::vector<std::int64_t> tokens_;
};

// Runs the criterion over one pair-homogeneous batch on the unmasked model
// and adds per-position values into the table:
//   te: |dL/dh * h| summed over positions, with L the batch-mean loss;
//   av: |h| summed over positions.
// Increments the pair's token counter by the batch's non-pad target tokens.
// Dropout stays off; parameter gradients are cleared before returning.
void accumulate_batch(TransformerModel& model, const Batch& batch,
                      Criterion criterion, ImportanceTable& table);

}  // namespace nalloc
