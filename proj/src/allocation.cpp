#include "neuronalloc/allocation.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

namespace nalloc {

namespace {

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// Mean of the table rows listed in group_rows, in listed order.
std::vector<double> mean_rows(const ImportanceTable& table,
                              const std::vector<int>& group_rows) {
  std::vector<double> mean(table.registry_size(), 0.0);
  for (int m : group_rows) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += table.score(m, i);
  }
  const double inv = 1.0 / static_cast<double>(group_rows.size());
  for (double& v : mean) v *= inv;
  return mean;
}

std::vector<std::string> sorted_unique(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

const std::vector<int>& side_groups(const GroupedTable& grouped, Side side) {
  return side == Side::encoder ? grouped.encoder_groups : grouped.decoder_groups;
}

void check_grouped(const GroupedTable& grouped, const NeuronSiteRegistry& registry) {
  for (const auto& row : grouped.scores) {
    if (row.size() != registry.size()) {
      throw usage_error("importance table was built for a different site registry");
    }
  }
}

// Top round(rho * width) flags per (side, layer, site) block, ranked by the
// mean score over the block's relevant groups, ties to the lower unit index.
std::vector<char> select_general_grouped(const GroupedTable& grouped,
                                         const NeuronSiteRegistry& registry,
                                         double rho) {
  check_grouped(grouped, registry);
  std::vector<char> general(registry.size(), 0);
  for (const SiteBlock& b : registry.blocks()) {
    const std::vector<int>& groups = side_groups(grouped, b.side);
    std::vector<double> mean(b.width, 0.0);
    const double inv = 1.0 / static_cast<double>(groups.size());
    for (int u = 0; u < b.width; ++u) {
      double s = 0.0;
      for (int g : groups) s += grouped.scores[g][b.offset + u];
      mean[u] = s * inv;
    }
    std::vector<int> units(b.width);
    std::iota(units.begin(), units.end(), 0);
    std::sort(units.begin(), units.end(), [&mean](int a, int c) {
      if (mean[a] != mean[c]) return mean[a] > mean[c];
      return a < c;
    });
    const int take = std::min(round_half_up(rho * static_cast<double>(b.width)),
                              b.width);
    for (int r = 0; r < take; ++r) general[b.offset + units[r]] = 1;
  }
  return general;
}

// Threshold assignment of every non-general neuron; expands group hits back
// to pair index sets.
AllocationPlan assign_grouped(const GroupedTable& grouped,
                              const std::vector<std::string>& pairs,
                              const NeuronSiteRegistry& registry, double k,
                              std::vector<char> general, const LogFn& warn) {
  check_grouped(grouped, registry);
  if (general.size() != registry.size()) {
    throw usage_error("general flags do not match the registry");
  }
  AllocationPlan plan;
  plan.pairs = pairs;
  plan.general = std::move(general);
  plan.specific.resize(registry.size());

  for (const SiteBlock& b : registry.blocks()) {
    const std::vector<int>& groups = side_groups(grouped, b.side);
    for (int u = 0; u < b.width; ++u) {
      const std::size_t i = b.offset + u;
      if (plan.general[i]) continue;
      double mx = 0.0;
      for (int g : groups) mx = std::max(mx, grouped.scores[g][i]);
      std::vector<int> assigned;
      if (mx == 0.0) {
        if (warn) {
          warn(fmt::format("neuron {} {} layer {} unit {} has zero importance for "
                           "every group; assigning it to all pairs",
                           side_name(b.side), site_name(b.site), b.layer, u));
        }
        for (int g : groups) {
          assigned.insert(assigned.end(), grouped.group_pairs[g].begin(),
                          grouped.group_pairs[g].end());
        }
      } else {
        const double threshold = k * mx;
        for (int g : groups) {
          if (grouped.scores[g][i] >= threshold) {
            assigned.insert(assigned.end(), grouped.group_pairs[g].begin(),
                            grouped.group_pairs[g].end());
          }
        }
      }
      std::sort(assigned.begin(), assigned.end());
      assigned.erase(std::unique(assigned.begin(), assigned.end()), assigned.end());
      plan.specific[i] = std::move(assigned);
    }
  }
  return plan;
}

}  // namespace

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::pair: return "pair";
    case Variant::source_specific: return "source_specific";
    case Variant::target_specific: return "target_specific";
    case Variant::separate_enc_dec: return "separate_enc_dec";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  if (name == "pair") return Variant::pair;
  if (name == "source" || name == "source_specific") return Variant::source_specific;
  if (name == "target" || name == "target_specific") return Variant::target_specific;
  if (name == "encdec" || name == "separate_enc_dec") return Variant::separate_enc_dec;
  throw data_error(fmt::format("unknown allocation variant '{}'", name));
}

void AllocationConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0)) {
    throw usage_error("allocation config: rho must lie in (0, 1]");
  }
  if (!(k >= 0.0 && k <= 1.0)) {
    throw usage_error("allocation config: k must lie in [0, 1]");
  }
}

std::size_t AllocationPlan::num_general() const {
  std::size_t n = 0;
  for (char g : general) n += (g != 0);
  return n;
}

bool AllocationPlan::active_for(std::size_t neuron, int pair_idx) const {
  if (general[neuron]) return true;
  const std::vector<int>& s = specific[neuron];
  return std::find(s.begin(), s.end(), pair_idx) != s.end();
}

GroupedTable apply_variant(const ImportanceTable& table, Variant variant) {
  if (!table.finalized()) {
    throw usage_error("variants apply to finalized importance tables only");
  }
  const std::vector<std::string>& pairs = table.pairs();
  const int num_pairs = table.num_pairs();

  GroupedTable out;
  const auto all_groups = [&out]() {
    std::vector<int> idx(out.groups.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  };

  if (variant == Variant::pair) {
    out.groups = pairs;
    out.group_pairs.resize(pairs.size());
    out.scores.resize(pairs.size());
    for (int m = 0; m < num_pairs; ++m) {
      out.group_pairs[m] = {m};
      out.scores[m].resize(table.registry_size());
      for (std::size_t i = 0; i < table.registry_size(); ++i) {
        out.scores[m][i] = table.score(m, i);
      }
    }
    out.encoder_groups = all_groups();
    out.decoder_groups = all_groups();
    return out;
  }

  // Language decomposition for the variant groupings.
  std::vector<PairLanguages> langs;
  langs.reserve(pairs.size());
  for (const std::string& p : pairs) langs.push_back(parse_pair(p));

  const auto build_language_groups = [&](bool by_source, std::string_view prefix) {
    std::vector<std::string> names;
    for (const PairLanguages& pl : langs) {
      names.push_back(by_source ? pl.source : pl.target);
    }
    for (const std::string& lang : sorted_unique(std::move(names))) {
      std::vector<int> members;
      for (int m = 0; m < num_pairs; ++m) {
        const std::string& l = by_source ? langs[m].source : langs[m].target;
        if (l == lang) members.push_back(m);
      }
      out.groups.push_back(std::string(prefix) + lang);
      out.group_pairs.push_back(members);
      out.scores.push_back(mean_rows(table, members));
    }
  };

  switch (variant) {
    case Variant::source_specific:
      build_language_groups(true, "");
      out.encoder_groups = all_groups();
      out.decoder_groups = all_groups();
      break;
    case Variant::target_specific:
      build_language_groups(false, "");
      out.encoder_groups = all_groups();
      out.decoder_groups = all_groups();
      break;
    case Variant::separate_enc_dec: {
      build_language_groups(true, "src:");
      const int num_src = static_cast<int>(out.groups.size());
      build_language_groups(false, "tgt:");
      for (int g = 0; g < static_cast<int>(out.groups.size()); ++g) {
        (g < num_src ? out.encoder_groups : out.decoder_groups).push_back(g);
      }
      break;
    }
    case Variant::pair:
      break;  // handled above
  }
  return out;
}

std::vector<char> select_general(const ImportanceTable& table,
                                 const NeuronSiteRegistry& registry, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) {
    throw usage_error("allocation config: rho must lie in (0, 1]");
  }
  return select_general_grouped(apply_variant(table, Variant::pair), registry, rho);
}

AllocationPlan assign_specific(const ImportanceTable& table,
                               const NeuronSiteRegistry& registry, double k,
                               std::vector<char> general, LogFn warn) {
  if (!(k >= 0.0 && k <= 1.0)) {
    throw usage_error("allocation config: k must lie in [0, 1]");
  }
  AllocationPlan plan = assign_grouped(apply_variant(table, Variant::pair),
                                       table.pairs(), registry, k,
                                       std::move(general), warn);
  plan.provenance.criterion = table.criterion();
  plan.provenance.rho = -1.0;  // unknown at this layer; allocate() fills it
  plan.provenance.k = k;
  plan.provenance.variant = Variant::pair;
  return plan;
}

AllocationPlan allocate(const ImportanceTable& table,
                        const NeuronSiteRegistry& registry,
                        const AllocationConfig& config, LogFn warn) {
  config.validate();
  if (!table.finalized()) {
    throw usage_error("allocation requires a finalized importance table");
  }
  if (table.registry_size() != registry.size()) {
    throw usage_error("importance table was built for a different site registry");
  }
  const GroupedTable grouped = apply_variant(table, config.variant);
  AllocationPlan plan =
      assign_grouped(grouped, table.pairs(), registry, config.k,
                     select_general_grouped(grouped, registry, config.rho), warn);
  plan.provenance.criterion = table.criterion();
  plan.provenance.rho = config.rho;
  plan.provenance.k = config.k;
  plan.provenance.variant = config.variant;
  return plan;
}

}  // namespace nalloc
