#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuronalloc/importance.hpp"
#include "neuronalloc/mask.hpp"

namespace nalloc {

enum class Variant : std::uint8_t {
  pair,              // allocate per language pair (the default)
  source_specific,   // group pairs by source language
  target_specific,   // group pairs by target language
  separate_enc_dec,  // encoder by source language, decoder by target language
};
std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct AllocationConfig {
  double rho = 0.9;  // fraction of general neurons per (side, layer, site) group
  double k = 0.7;    // threshold coefficient: lambda(i) = k * max_m score
  Variant variant = Variant::pair;

  void validate() const;  // throws usage_error naming the field
};

struct PlanProvenance {
  Criterion criterion = Criterion::te;
  double rho = 0.9;
  double k = 0.7;
  Variant variant = Variant::pair;
  std::uint64_t table_fingerprint = 0;
  std::uint64_t checkpoint_fingerprint = 0;
};

// Role of every registry neuron: General (specific set empty, general flag
// set) or Specific with a non-empty sorted set of pair indices.
struct AllocationPlan {
  std::vector<std::string> pairs;
  std::vector<char> general;               // [registry]
  std::vector<std::vector<int>> specific;  // [registry], pair indices
  PlanProvenance provenance;

  std::size_t registry_size() const { return general.size(); }
  std::size_t num_general() const;
  bool is_general(std::size_t neuron) const { return general[neuron] != 0; }
  // Active = general or assigned to the pair.
  bool active_for(std::size_t neuron, int pair_idx) const;
};

// Scores regrouped along the pair axis according to a variant. Each group
// expands back to the set of pairs whose masks it activates; for
// separate_enc_dec the two sides consult disjoint group subsets.
struct GroupedTable {
  std::vector<std::string> groups;
  std::vector<std::vector<int>> group_pairs;   // [group] -> pair indices
  std::vector<int> encoder_groups;             // indices into groups
  std::vector<int> decoder_groups;
  std::vector<std::vector<double>> scores;     // [group][neuron]
};
GroupedTable apply_variant(const ImportanceTable& table, Variant variant);

// Top round(rho * group width) neurons per (side, layer, site) group by mean
// importance, descending, ties broken by ascending unit index. Returns one
// flag per registry neuron.
std::vector<char> select_general(const ImportanceTable& table,
                                 const NeuronSiteRegistry& registry, double rho);

// Assigns every non-general neuron i to the pairs m with
// score(m, i) >= k * max_m score(m, i). A neuron whose scores are all zero
// goes to every pair and logs a warning.
AllocationPlan assign_specific(const ImportanceTable& table,
                               const NeuronSiteRegistry& registry, double k,
                               std::vector<char> general, LogFn warn = {});

// Full allocation with variant handling; select_general/assign_specific
// compose exactly this for the pair variant.
AllocationPlan allocate(const ImportanceTable& table,
                        const NeuronSiteRegistry& registry,
                        const AllocationConfig& config, LogFn warn = {});

}  // namespace nalloc
