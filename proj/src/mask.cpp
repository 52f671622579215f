#include "neuronalloc/mask.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "neuronalloc/allocation.hpp"

namespace nalloc {

std::string_view side_name(Side s) {
  return s == Side::encoder ? "encoder" : "decoder";
}

std::string_view site_name(SiteKind s) {
  switch (s) {
    case SiteKind::self_attn_out: return "self_attn_out";
    case SiteKind::cross_attn_out: return "cross_attn_out";
    case SiteKind::ffn_inner: return "ffn_inner";
  }
  return "?";
}

Side parse_side(std::string_view name) {
  if (name == "encoder") return Side::encoder;
  if (name == "decoder") return Side::decoder;
  throw data_error(fmt::format("unknown side '{}'", name));
}

SiteKind parse_site(std::string_view name) {
  if (name == "self_attn_out") return SiteKind::self_attn_out;
  if (name == "cross_attn_out") return SiteKind::cross_attn_out;
  if (name == "ffn_inner") return SiteKind::ffn_inner;
  throw data_error(fmt::format("unknown site '{}'", name));
}

NeuronSiteRegistry::NeuronSiteRegistry(const RegistryDims& dims) : dims_(dims) {
  if (dims.num_layers <= 0 || dims.d_model <= 0 || dims.d_ffn <= 0) {
    throw data_error("site registry needs positive layer count and widths");
  }
  const auto push = [this](Side side, int layer, SiteKind site, int width) {
    blocks_.push_back({side, layer, site, width, total_});
    total_ += static_cast<std::size_t>(width);
  };
  for (int layer = 1; layer <= dims.num_layers; ++layer) {
    push(Side::encoder, layer, SiteKind::self_attn_out, dims.d_model);
    push(Side::encoder, layer, SiteKind::ffn_inner, dims.d_ffn);
  }
  for (int layer = 1; layer <= dims.num_layers; ++layer) {
    push(Side::decoder, layer, SiteKind::self_attn_out, dims.d_model);
    push(Side::decoder, layer, SiteKind::cross_attn_out, dims.d_model);
    push(Side::decoder, layer, SiteKind::ffn_inner, dims.d_ffn);
  }
}

NeuronId NeuronSiteRegistry::id_at(std::size_t flat) const {
  if (flat >= total_) {
    throw data_error(fmt::format("neuron index {} outside registry of {}", flat, total_));
  }
  for (const SiteBlock& b : blocks_) {
    if (flat < b.offset + static_cast<std::size_t>(b.width)) {
      return {b.side, b.layer, b.site, static_cast<int>(flat - b.offset)};
    }
  }
  throw data_error("registry blocks do not cover the index range");
}

std::size_t NeuronSiteRegistry::flat_index(const NeuronId& id) const {
  const SiteBlock& b = block(id.side, id.layer, id.site);
  if (id.unit < 0 || id.unit >= b.width) {
    throw data_error(fmt::format("unit {} outside {} {} layer {} of width {}", id.unit,
                                 side_name(id.side), site_name(id.site), id.layer,
                                 b.width));
  }
  return b.offset + static_cast<std::size_t>(id.unit);
}

std::size_t NeuronSiteRegistry::block_index(Side side, int layer, SiteKind site) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].side == side && blocks_[i].layer == layer && blocks_[i].site == site) {
      return i;
    }
  }
  throw data_error(fmt::format("no {} {} site at layer {}", side_name(side),
                               site_name(site), layer));
}

Mask Mask::all_active(const NeuronSiteRegistry& registry) {
  Mask m;
  m.rows_.reserve(registry.blocks().size());
  for (const SiteBlock& b : registry.blocks()) {
    m.rows_.emplace_back(static_cast<std::size_t>(b.width), 1.0f);
  }
  m.tensors_.resize(m.rows_.size());
  return m;
}

bool Mask::active(const NeuronSiteRegistry& registry, std::size_t flat) const {
  const NeuronId id = registry.id_at(flat);
  const std::size_t bi = registry.block_index(id.side, id.layer, id.site);
  return rows_[bi][static_cast<std::size_t>(id.unit)] != 0.0f;
}

void Mask::set(const NeuronSiteRegistry& registry, std::size_t flat, bool active) {
  const NeuronId id = registry.id_at(flat);
  const std::size_t bi = registry.block_index(id.side, id.layer, id.site);
  rows_[bi][static_cast<std::size_t>(id.unit)] = active ? 1.0f : 0.0f;
  tensors_[bi] = Tensor();  // invalidate the cached constant
}

const std::vector<float>& Mask::row(std::size_t block_index) const {
  return rows_.at(block_index);
}

const Tensor& Mask::row_tensor(std::size_t block_index) const {
  Tensor& t = tensors_.at(block_index);
  if (!t.defined()) {
    const std::vector<float>& r = rows_[block_index];
    t = Tensor::from_values({1, static_cast<int>(r.size())}, r);
  }
  return t;
}

bool Mask::operator==(const Mask& other) const { return rows_ == other.rows_; }

const Mask& MaskSet::mask_for(std::string_view pair) const {
  const int idx = pair_index(pair);
  if (idx < 0) throw data_error(fmt::format("mask set has no pair '{}'", pair));
  return masks[static_cast<std::size_t>(idx)];
}

int MaskSet::pair_index(std::string_view pair) const {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i] == pair) return static_cast<int>(i);
  }
  return -1;
}

MaskSet build_mask_set(const AllocationPlan& plan, const ModelConfig& config) {
  const NeuronSiteRegistry registry(config);
  if (plan.registry_size() != registry.size()) {
    throw data_error(fmt::format("plan covers {} neurons but the model has {}",
                                 plan.registry_size(), registry.size()));
  }
  if (plan.pairs != config.language_pairs) {
    throw data_error(fmt::format(
        "plan serves pairs [{}] but the model is configured for [{}]",
        fmt::join(plan.pairs, ","), fmt::join(config.language_pairs, ",")));
  }
  MaskSet out;
  out.pairs = plan.pairs;
  out.masks.reserve(plan.pairs.size());
  for (int m = 0; m < static_cast<int>(plan.pairs.size()); ++m) {
    Mask mask = Mask::all_active(registry);
    for (std::size_t i = 0; i < registry.size(); ++i) {
      if (!plan.active_for(i, m)) mask.set(registry, i, false);
    }
    out.masks.push_back(std::move(mask));
  }
  return out;
}

Tensor apply_mask(const Tensor& activation, const Tensor& bit_row) {
  return mask_mul(activation, bit_row);
}

}  // namespace nalloc
