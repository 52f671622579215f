#include <doctest.h>

#include <set>
#include <string>
#include <vector>

#include "neuronalloc/allocation.hpp"
#include "neuronalloc/common.hpp"
#include "neuronalloc/mask.hpp"
#include "neuronalloc/model_config.hpp"

using namespace nalloc;

namespace {

ModelConfig tiny_config(std::vector<std::string> pairs) {
  ModelConfig mc;
  mc.num_layers = 2;
  mc.d_model = 8;
  mc.d_ffn = 16;
  mc.num_heads = 2;
  mc.max_seq_len = 16;
  mc.vocab_size = 12;
  mc.language_pairs = std::move(pairs);
  return mc;
}

// A plan where neuron `flat` below `general_count` is general and every
// later neuron is specific to pair (flat % pairs).
AllocationPlan synthetic_plan(const NeuronSiteRegistry& registry,
                              std::vector<std::string> pairs,
                              std::size_t general_count) {
  AllocationPlan plan;
  plan.pairs = std::move(pairs);
  plan.general.assign(registry.size(), 0);
  plan.specific.assign(registry.size(), std::vector<int>{});
  for (std::size_t i = 0; i < registry.size(); ++i) {
    if (i < general_count) {
      plan.general[i] = 1;
    } else {
      plan.specific[i] = {static_cast<int>(i % plan.pairs.size())};
    }
  }
  return plan;
}

}  // namespace

TEST_CASE("side and site names round trip and reject unknowns") {
  CHECK(side_name(Side::encoder) == "encoder");
  CHECK(side_name(Side::decoder) == "decoder");
  CHECK(parse_side("encoder") == Side::encoder);
  CHECK(parse_side("decoder") == Side::decoder);
  CHECK(site_name(SiteKind::self_attn_out) == "self_attn_out");
  CHECK(site_name(SiteKind::cross_attn_out) == "cross_attn_out");
  CHECK(site_name(SiteKind::ffn_inner) == "ffn_inner");
  CHECK(parse_site("ffn_inner") == SiteKind::ffn_inner);
  CHECK_THROWS_AS(parse_side("middle"), data_error);
  CHECK_THROWS_AS(parse_site("attention"), data_error);
}

TEST_CASE("registry enumerates sites in the canonical order") {
  const NeuronSiteRegistry registry(RegistryDims{2, 8, 16});

  // Per layer: encoder self_attn_out(8) + ffn_inner(16); decoder adds
  // cross_attn_out(8). Total = 2*(8+16) + 2*(8+8+16) = 48 + 64 = 112.
  CHECK(registry.size() == 112);
  REQUIRE(registry.blocks().size() == 10);

  const auto& blocks = registry.blocks();
  // Encoder first, layers ascending, self < ffn (no cross on encoder).
  CHECK(blocks[0].side == Side::encoder);
  CHECK(blocks[0].layer == 1);
  CHECK(blocks[0].site == SiteKind::self_attn_out);
  CHECK(blocks[0].width == 8);
  CHECK(blocks[0].offset == 0);
  CHECK(blocks[1].site == SiteKind::ffn_inner);
  CHECK(blocks[1].width == 16);
  CHECK(blocks[1].offset == 8);
  CHECK(blocks[2].layer == 2);
  CHECK(blocks[2].site == SiteKind::self_attn_out);
  CHECK(blocks[3].site == SiteKind::ffn_inner);
  // Decoder afterwards with self < cross < ffn.
  CHECK(blocks[4].side == Side::decoder);
  CHECK(blocks[4].layer == 1);
  CHECK(blocks[4].site == SiteKind::self_attn_out);
  CHECK(blocks[5].site == SiteKind::cross_attn_out);
  CHECK(blocks[6].site == SiteKind::ffn_inner);
  CHECK(blocks[7].layer == 2);
  CHECK(blocks[9].offset + blocks[9].width == registry.size());

  SUBCASE("flat index and id round trip over the whole registry") {
    for (std::size_t flat = 0; flat < registry.size(); ++flat) {
      const NeuronId id = registry.id_at(flat);
      CHECK(registry.flat_index(id) == flat);
    }
    CHECK_THROWS_AS(registry.id_at(registry.size()), data_error);
  }
  SUBCASE("block lookup rejects absent sites") {
    CHECK_THROWS_AS(registry.block_index(Side::encoder, 1, SiteKind::cross_attn_out),
                    data_error);
    CHECK_THROWS_AS(registry.block_index(Side::encoder, 3, SiteKind::ffn_inner),
                    data_error);
    CHECK(registry.block(Side::decoder, 2, SiteKind::cross_attn_out).width == 8);
  }
  SUBCASE("flat_index validates the unit range") {
    CHECK_THROWS_AS(
        registry.flat_index(NeuronId{Side::encoder, 1, SiteKind::ffn_inner, 16}),
        data_error);
    CHECK_THROWS_AS(
        registry.flat_index(NeuronId{Side::encoder, 1, SiteKind::ffn_inner, -1}),
        data_error);
  }
  SUBCASE("invalid dims are rejected") {
    CHECK_THROWS_AS(NeuronSiteRegistry(RegistryDims{0, 8, 16}), data_error);
    CHECK_THROWS_AS(NeuronSiteRegistry(RegistryDims{2, 8, 0}), data_error);
  }
}

TEST_CASE("mask bits flip per neuron and materialize as 0/1 rows") {
  const NeuronSiteRegistry registry(RegistryDims{1, 4, 6});
  Mask mask = Mask::all_active(registry);
  CHECK(mask.num_blocks() == registry.blocks().size());
  for (std::size_t flat = 0; flat < registry.size(); ++flat) {
    CHECK(mask.active(registry, flat));
  }

  // Turn off encoder ffn_inner unit 2.
  const std::size_t block =
      registry.block_index(Side::encoder, 1, SiteKind::ffn_inner);
  const std::size_t flat =
      registry.flat_index(NeuronId{Side::encoder, 1, SiteKind::ffn_inner, 2});
  mask.set(registry, flat, false);
  CHECK_FALSE(mask.active(registry, flat));
  CHECK(mask.row(block)[2] == 0.0f);
  CHECK(mask.row(block)[1] == 1.0f);

  const Tensor& row = mask.row_tensor(block);
  CHECK(row.shape() == std::vector<int>{1, 6});
  CHECK(row.values()[2] == 0.0f);
  CHECK_FALSE(row.requires_grad());

  SUBCASE("row_tensor refreshes after set") {
    mask.set(registry, flat, true);
    CHECK(mask.row_tensor(block).values()[2] == 1.0f);
  }
  SUBCASE("equality compares bits") {
    Mask other = Mask::all_active(registry);
    CHECK_FALSE(mask == other);
    other.set(registry, flat, false);
    CHECK(mask == other);
  }
  SUBCASE("out-of-range flat index throws") {
    CHECK_THROWS_AS(mask.active(registry, registry.size()), data_error);
  }
}

TEST_CASE("build_mask_set turns a plan into per-pair bit rows") {
  const ModelConfig mc = tiny_config({"en2de", "en2fr"});
  const NeuronSiteRegistry registry(mc);
  const AllocationPlan plan =
      synthetic_plan(registry, {"en2de", "en2fr"}, registry.size() / 2);

  const MaskSet set = build_mask_set(plan, mc);
  REQUIRE(set.pairs == std::vector<std::string>{"en2de", "en2fr"});
  REQUIRE(set.masks.size() == 2);
  CHECK(set.pair_index("en2fr") == 1);
  CHECK(set.pair_index("de2en") == -1);
  CHECK_THROWS_AS(set.mask_for("de2en"), data_error);

  for (std::size_t flat = 0; flat < registry.size(); ++flat) {
    const bool general = flat < registry.size() / 2;
    const int owner = static_cast<int>(flat % 2);
    CHECK(set.masks[0].active(registry, flat) == (general || owner == 0));
    CHECK(set.masks[1].active(registry, flat) == (general || owner == 1));
  }

  SUBCASE("registry size mismatch is rejected") {
    ModelConfig bigger = mc;
    bigger.d_ffn = 32;
    CHECK_THROWS_AS(build_mask_set(plan, bigger), data_error);
  }
  SUBCASE("pair list mismatch is rejected") {
    ModelConfig other = mc;
    other.language_pairs = {"en2fr", "en2de"};
    CHECK_THROWS_AS(build_mask_set(plan, other), data_error);
  }
}

TEST_CASE("apply_mask zeroes exactly the masked columns") {
  const Tensor activation =
      Tensor::from_values({2, 3}, {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f}, true);
  const Tensor bits = Tensor::from_values({1, 3}, {1.0f, 0.0f, 1.0f});
  const Tensor out = apply_mask(activation, bits);
  CHECK(out.values()[0] == 1.0f);
  CHECK(out.values()[1] == 0.0f);
  CHECK(out.values()[4] == 0.0f);
  CHECK(out.values()[5] == 6.0f);
  backward(cross_entropy(out, std::vector<int>{0, 2}, -1));
  const auto g = activation.grad();
  CHECK(g[1] == 0.0f);
  CHECK(g[4] == 0.0f);
  CHECK(g[0] != 0.0f);
}
