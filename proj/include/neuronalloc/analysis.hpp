#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuronalloc/allocation.hpp"
#include "neuronalloc/data.hpp"
#include "neuronalloc/importance.hpp"
#include "neuronalloc/mask.hpp"
#include "neuronalloc/model.hpp"

namespace nalloc {

// Corpus-level 4-gram BLEU with exponential smoothing, scaled to [0, 100]:
// the smoothing divisor starts at 1 and doubles at every n with zero
// matches, where that precision becomes 1 / (smooth * total_ngrams).
// Single reference per hypothesis; case-sensitive over given tokens.
double bleu(const std::vector<std::vector<std::string>>& hypotheses,
            const std::vector<std::vector<std::string>>& references);

// Fraction of the layer's specific neurons (on the given side) assigned to
// the pair. Errors when the layer has no specific neurons.
double lscore(const AllocationPlan& plan, const NeuronSiteRegistry& registry,
              Side side, int layer, int pair_idx);

// Mean over pairs of the assigned fraction within one site of one layer.
// Errors when the site has no specific neurons.
double mscore(const AllocationPlan& plan, const NeuronSiteRegistry& registry,
              Side side, int layer, SiteKind site);

// Random-erasure experiment: clears round(fraction * population) randomly
// chosen neurons of the targeted role from the masks. General neurons are
// cleared in every pair's mask; a pair's specific neurons are cleared
// wherever they were active. The plan and checkpoint stay untouched.
struct EraseTarget {
  bool general = true;
  int pair_idx = -1;  // specific target when general == false
};
MaskSet erase_random(const MaskSet& masks, const AllocationPlan& plan,
                     const NeuronSiteRegistry& registry, const EraseTarget& target,
                     double fraction, std::uint64_t seed);

// Ordered per-unit score series of one site for the requested pairs.
struct DistributionSeries {
  std::string pair;
  std::vector<double> scores;  // indexed by unit
};
std::vector<DistributionSeries> export_importance_distribution(
    const ImportanceTable& table, const NeuronSiteRegistry& registry, Side side,
    int layer, SiteKind site, const std::vector<int>& pair_indices);

// Greedy/beam decodes the corpus and reports the exact-sequence-match rate.
double sequence_accuracy(const TransformerModel& model, const Corpus& corpus,
                         const Mask* mask, int beam_size, double alpha,
                         int max_len);

// Decodes the corpus and returns hypotheses as token-id sequences.
std::vector<std::vector<int>> translate_corpus(const TransformerModel& model,
                                               const Corpus& corpus,
                                               const Mask* mask, int beam_size,
                                               double alpha, int max_len);

// Structured text report: one record per line, space separated.
struct AnalysisReport {
  struct BleuRow {
    std::string pair;
    double value;
  };
  struct LScoreRow {
    Side side;
    int layer;
    std::string pair;
    double value;
  };
  struct MScoreRow {
    Side side;
    int layer;
    SiteKind site;
    double value;
  };
  struct EraseRow {
    std::string configuration;  // e.g. "general:0.2" or "specific:en2rev:0.5"
    std::string pair;
    double delta;  // score change vs the un-erased run
  };
  std::vector<BleuRow> bleu_rows;
  std::vector<LScoreRow> lscore_rows;
  std::vector<MScoreRow> mscore_rows;
  std::vector<EraseRow> erase_rows;
};
std::string encode_report(const AnalysisReport& report);
void save_report(const AnalysisReport& report, const std::string& path);

// All LScore/MScore rows a plan defines (skipping sites with no specific
// neurons), in canonical registry order.
AnalysisReport plan_metrics(const AllocationPlan& plan,
                            const NeuronSiteRegistry& registry);

}  // namespace nalloc
