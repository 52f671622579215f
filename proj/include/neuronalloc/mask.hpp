#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "neuronalloc/model_config.hpp"
#include "neuronalloc/tensor.hpp"

namespace nalloc {

// A "neuron" is one unit of a registered activation vector: an FFN inner
// unit after ReLU, or an attention sublayer output unit after the final
// projection and before the residual addition.

enum class Side : std::uint8_t { encoder, decoder };
enum class SiteKind : std::uint8_t { self_attn_out, cross_attn_out, ffn_inner };

std::string_view side_name(Side s);
std::string_view site_name(SiteKind s);
Side parse_side(std::string_view name);
SiteKind parse_site(std::string_view name);

struct NeuronId {
  Side side;
  int layer;  // 1-based
  SiteKind site;
  int unit;   // 0-based within the site

  bool operator==(const NeuronId&) const = default;
};

// One maskable activation vector and its slot in the flat canonical order.
struct SiteBlock {
  Side side;
  int layer;
  SiteKind site;
  int width;
  std::size_t offset;  // flat index of unit 0
};

// The three numbers that determine the site layout. Artifact files carry
// them so tables, plans, and masks can be checked without a full config.
struct RegistryDims {
  int num_layers = 0;
  int d_model = 0;
  int d_ffn = 0;

  bool operator==(const RegistryDims&) const = default;
};

// Canonical enumeration of maskable sites: encoder before decoder, layer
// ascending, self_attn_out < cross_attn_out < ffn_inner, unit ascending.
class NeuronSiteRegistry {
 public:
  explicit NeuronSiteRegistry(const RegistryDims& dims);
  explicit NeuronSiteRegistry(const ModelConfig& config)
      : NeuronSiteRegistry(
            RegistryDims{config.num_layers, config.d_model, config.d_ffn}) {}

  const RegistryDims& dims() const { return dims_; }

  const std::vector<SiteBlock>& blocks() const { return blocks_; }
  std::size_t size() const { return total_; }

  NeuronId id_at(std::size_t flat) const;
  std::size_t flat_index(const NeuronId& id) const;
  // Index into blocks(); throws data_error for sites absent from the model.
  std::size_t block_index(Side side, int layer, SiteKind site) const;
  const SiteBlock& block(Side side, int layer, SiteKind site) const {
    return blocks_[block_index(side, layer, site)];
  }

 private:
  RegistryDims dims_;
  std::vector<SiteBlock> blocks_;
  std::size_t total_ = 0;
};

// Per-pair binary activation mask, one row of 0/1 floats per registry block.
// Rows are materialized as constant tensors once and shared across forwards.
class Mask {
 public:
  Mask() = default;
  // All-active mask for the given registry.
  static Mask all_active(const NeuronSiteRegistry& registry);

  bool active(const NeuronSiteRegistry& registry, std::size_t flat) const;
  void set(const NeuronSiteRegistry& registry, std::size_t flat, bool active);

  std::size_t num_blocks() const { return rows_.size(); }
  const std::vector<float>& row(std::size_t block_index) const;
  // Constant [1 x width] tensor for mask_mul; rebuilt lazily after set().
  const Tensor& row_tensor(std::size_t block_index) const;

  bool operator==(const Mask& other) const;

 private:
  std::vector<std::vector<float>> rows_;
  mutable std::vector<Tensor> tensors_;  // cache, keyed by rows_ content
};

struct AllocationPlan;  // allocation.hpp

// One mask per configured language pair, bound to the plan that produced it.
struct MaskSet {
  std::vector<std::string> pairs;
  std::vector<Mask> masks;  // parallel to pairs
  std::uint64_t plan_fingerprint = 0;

  const Mask& mask_for(std::string_view pair) const;
  int pair_index(std::string_view pair) const;  // -1 when absent
};

// Bit for neuron i in pair m's mask = 1 iff i is General or m is in
// Specific(i). Throws data_error on plan/config shape mismatch.
MaskSet build_mask_set(const AllocationPlan& plan, const ModelConfig& config);

// Elementwise product broadcasting the bit row over the activation's rows.
Tensor apply_mask(const Tensor& activation, const Tensor& bit_row);

}  // namespace nalloc
