#include <doctest.h>

#include <string>
#include <vector>

#include "neuronalloc/allocation.hpp"
#include "neuronalloc/common.hpp"
#include "neuronalloc/importance.hpp"
#include "neuronalloc/mask.hpp"

using namespace nalloc;

namespace {

// Registry layout (RegistryDims{1, 2, 4}), 14 neurons:
//   [0..1]   encoder L1 self_attn_out
//   [2..5]   encoder L1 ffn_inner
//   [6..7]   decoder L1 self_attn_out
//   [8..9]   decoder L1 cross_attn_out
//   [10..13] decoder L1 ffn_inner
const RegistryDims kDims{1, 2, 4};
constexpr std::size_t kN = 14;

ImportanceTable make_table(std::vector<std::string> pairs,
                           std::vector<std::vector<double>> scores) {
  std::vector<std::int64_t> tokens(pairs.size(), 100);
  return ImportanceTable::from_finalized(Criterion::te, std::move(pairs),
                                         std::move(scores), std::move(tokens));
}

std::vector<double> zeros_row() { return std::vector<double>(kN, 0.0); }

}  // namespace

TEST_CASE("variant names parse including their short aliases") {
  CHECK(parse_variant("pair") == Variant::pair);
  CHECK(parse_variant("source") == Variant::source_specific);
  CHECK(parse_variant("source_specific") == Variant::source_specific);
  CHECK(parse_variant("target") == Variant::target_specific);
  CHECK(parse_variant("encdec") == Variant::separate_enc_dec);
  CHECK(parse_variant("separate_enc_dec") == Variant::separate_enc_dec);
  CHECK_THROWS_AS(parse_variant("both"), data_error);
  CHECK(variant_name(Variant::source_specific) == "source_specific");
}

TEST_CASE("allocation config validation bounds rho and k") {
  AllocationConfig cfg;
  cfg.validate();  // defaults are legal
  cfg.rho = 0.0;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg.rho = 1.0000001;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg.rho = 1.0;
  cfg.k = -0.1;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg.k = 1.1;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg.k = 0.0;
  cfg.validate();
  cfg.k = 1.0;
  cfg.validate();
}

TEST_CASE("select_general takes the top half of [5,3,3,1] with ties to lower units") {
  const NeuronSiteRegistry registry(kDims);
  std::vector<double> row = zeros_row();
  row[2] = 5.0;
  row[3] = 3.0;
  row[4] = 3.0;
  row[5] = 1.0;
  const ImportanceTable table = make_table({"en2de"}, {row});

  const std::vector<char> general = select_general(table, registry, 0.5);
  // round(0.5 * 4) = 2 in the ffn block: unit 0 (5.0), then the 3.0 tie
  // resolves to the lower unit index 1.
  CHECK(general[2] == 1);
  CHECK(general[3] == 1);
  CHECK(general[4] == 0);
  CHECK(general[5] == 0);
  // All-zero blocks still fill their quota by unit order.
  CHECK(general[0] == 1);  // width 2: round(1.0) = 1
  CHECK(general[1] == 0);
  CHECK(general[6] == 1);
  CHECK(general[8] == 1);
  CHECK(general[10] == 1);
  CHECK(general[11] == 1);  // width 4 quota of 2
  CHECK(general[12] == 0);

  SUBCASE("rho = 1 marks every neuron general") {
    const std::vector<char> all = select_general(table, registry, 1.0);
    for (char g : all) CHECK(g == 1);
  }
  SUBCASE("tiny rho can leave a block with no general neurons") {
    const std::vector<char> none = select_general(table, registry, 0.1);
    for (char g : none) CHECK(g == 0);
  }
  SUBCASE("quota rounds half up") {
    // width 2 at rho 0.75: round(1.5) = 2, the whole block.
    const std::vector<char> g = select_general(table, registry, 0.75);
    CHECK(g[0] == 1);
    CHECK(g[1] == 1);
    CHECK(g[2] + g[3] + g[4] + g[5] == 3);  // round(3.0) = 3
  }
  SUBCASE("rho out of range is rejected") {
    CHECK_THROWS_AS(select_general(table, registry, 0.0), usage_error);
    CHECK_THROWS_AS(select_general(table, registry, 1.5), usage_error);
  }
}

TEST_CASE("threshold assignment keeps pairs scoring at least k times the max") {
  const NeuronSiteRegistry registry(kDims);
  std::vector<double> p0 = zeros_row(), p1 = zeros_row(), p2 = zeros_row();
  // Worked example: scores (0.9, 0.5, 0.7) at k = 0.7 -> threshold 0.63.
  p0[2] = 0.9;
  p1[2] = 0.5;
  p2[2] = 0.7;
  // Boundary: (0.5, 0.35, 0.1) at k = 0.7 -> threshold exactly 0.35, inclusive.
  p0[3] = 0.5;
  p1[3] = 0.35;
  p2[3] = 0.1;
  // Argmax tie for the k = 1 subcase.
  p0[4] = 0.4;
  p1[4] = 0.4;
  p2[4] = 0.1;
  const ImportanceTable table = make_table({"en2de", "en2fr", "en2sv"}, {p0, p1, p2});

  int warnings = 0;
  const LogFn count_warn = [&warnings](std::string_view) { ++warnings; };

  // rho = 0.1 rounds every quota to zero, so assignment covers all neurons.
  AllocationPlan plan = assign_specific(
      table, registry, 0.7, select_general(table, registry, 0.1), count_warn);
  CHECK(plan.num_general() == 0);
  CHECK(plan.specific[2] == std::vector<int>{0, 2});
  CHECK(plan.specific[3] == std::vector<int>{0, 1});
  CHECK(plan.pairs.size() == 3);
  CHECK(plan.provenance.k == 0.7);
  CHECK(plan.provenance.rho == -1.0);  // assign_specific alone cannot know rho
  CHECK(plan.active_for(2, 0));
  CHECK_FALSE(plan.active_for(2, 1));
  CHECK(plan.active_for(2, 2));

  SUBCASE("zero-score neurons go to every pair with a warning") {
    CHECK(warnings == 11);  // 14 neurons, 3 with nonzero rows
    CHECK(plan.specific[0] == std::vector<int>{0, 1, 2});
    CHECK(plan.specific[13] == std::vector<int>{0, 1, 2});
  }
  SUBCASE("k = 0 assigns every pair wherever any score is positive") {
    const AllocationPlan all = assign_specific(
        table, registry, 0.0, select_general(table, registry, 0.1), {});
    CHECK(all.specific[2] == std::vector<int>{0, 1, 2});
    CHECK(all.specific[3] == std::vector<int>{0, 1, 2});
  }
  SUBCASE("k = 1 keeps only the argmax, ties included") {
    const AllocationPlan top = assign_specific(
        table, registry, 1.0, select_general(table, registry, 0.1), {});
    CHECK(top.specific[2] == std::vector<int>{0});
    CHECK(top.specific[3] == std::vector<int>{0});
    CHECK(top.specific[4] == std::vector<int>{0, 1});
  }
  SUBCASE("larger k never grows a specific set") {
    const AllocationPlan loose = assign_specific(
        table, registry, 0.3, select_general(table, registry, 0.1), {});
    const AllocationPlan tight = assign_specific(
        table, registry, 0.9, select_general(table, registry, 0.1), {});
    for (std::size_t i = 0; i < kN; ++i) {
      for (int m : tight.specific[i]) {
        const auto& l = loose.specific[i];
        CHECK(std::find(l.begin(), l.end(), m) != l.end());
      }
    }
  }
  SUBCASE("k out of range is rejected") {
    CHECK_THROWS_AS(
        assign_specific(table, registry, 1.5, std::vector<char>(kN, 0), {}),
        usage_error);
  }
  SUBCASE("general flag vector must match the registry") {
    CHECK_THROWS_AS(
        assign_specific(table, registry, 0.5, std::vector<char>(3, 0), {}),
        usage_error);
  }
}

TEST_CASE("allocate is invariant to a global rescale of the table") {
  const NeuronSiteRegistry registry(kDims);
  std::vector<double> p0 = zeros_row(), p1 = zeros_row();
  for (std::size_t i = 0; i < kN; ++i) {
    p0[i] = static_cast<double>((i * 7 + 3) % 11) + 0.25;
    p1[i] = static_cast<double>((i * 5 + 1) % 13) + 0.5;
  }
  std::vector<double> q0 = p0, q1 = p1;
  for (std::size_t i = 0; i < kN; ++i) {
    q0[i] *= 2.0;  // exact in binary floating point
    q1[i] *= 2.0;
  }
  AllocationConfig cfg;
  cfg.rho = 0.5;
  cfg.k = 0.7;
  const AllocationPlan a =
      allocate(make_table({"en2de", "en2fr"}, {p0, p1}), registry, cfg);
  const AllocationPlan b =
      allocate(make_table({"en2de", "en2fr"}, {q0, q1}), registry, cfg);
  CHECK(a.general == b.general);
  CHECK(a.specific == b.specific);
  CHECK(a.num_general() == kN / 2);
  CHECK(a.provenance.rho == 0.5);
  CHECK(a.provenance.k == 0.7);
  CHECK(a.provenance.criterion == Criterion::te);
}

TEST_CASE("source and target variants group rows by language") {
  std::vector<double> en2de = zeros_row(), fr2de = zeros_row(), en2fr = zeros_row();
  en2de[2] = 1.0;
  fr2de[2] = 0.5;
  en2fr[2] = 0.0;
  const ImportanceTable table =
      make_table({"en2de", "fr2de", "en2fr"}, {en2de, fr2de, en2fr});

  SUBCASE("source grouping averages rows sharing a source language") {
    const GroupedTable g = apply_variant(table, Variant::source_specific);
    REQUIRE(g.groups == std::vector<std::string>{"en", "fr"});
    CHECK(g.group_pairs[0] == std::vector<int>{0, 2});
    CHECK(g.group_pairs[1] == std::vector<int>{1});
    CHECK(g.scores[0][2] == 0.5);  // mean of 1.0 and 0.0
    CHECK(g.scores[1][2] == 0.5);
    CHECK(g.encoder_groups == std::vector<int>{0, 1});
    CHECK(g.decoder_groups == std::vector<int>{0, 1});
  }
  SUBCASE("target grouping averages rows sharing a target language") {
    const GroupedTable g = apply_variant(table, Variant::target_specific);
    REQUIRE(g.groups == std::vector<std::string>{"de", "fr"});
    CHECK(g.group_pairs[0] == std::vector<int>{0, 1});
    CHECK(g.group_pairs[1] == std::vector<int>{2});
    CHECK(g.scores[0][2] == 0.75);  // mean of 1.0 and 0.5
    CHECK(g.scores[1][2] == 0.0);
  }
  SUBCASE("separate_enc_dec splits source groups from target groups") {
    const GroupedTable g = apply_variant(table, Variant::separate_enc_dec);
    REQUIRE(g.groups ==
            std::vector<std::string>{"src:en", "src:fr", "tgt:de", "tgt:fr"});
    CHECK(g.encoder_groups == std::vector<int>{0, 1});
    CHECK(g.decoder_groups == std::vector<int>{2, 3});
    CHECK(g.group_pairs[0] == std::vector<int>{0, 2});
    CHECK(g.group_pairs[3] == std::vector<int>{2});
  }
  SUBCASE("pair variant is the identity grouping") {
    const GroupedTable g = apply_variant(table, Variant::pair);
    CHECK(g.groups == table.pairs());
    CHECK(g.scores[0][2] == 1.0);
    CHECK(g.group_pairs[2] == std::vector<int>{2});
  }
}

TEST_CASE("separate_enc_dec assigns encoder neurons by source language only") {
  const NeuronSiteRegistry registry(kDims);
  std::vector<double> en2de = zeros_row(), fr2de = zeros_row(), en2fr = zeros_row();
  // Encoder neuron 0: src:en mean = 0.5, src:fr = 0.2. k=0.7 -> only src:en,
  // which expands to pairs {en2de, en2fr}.
  en2de[0] = 1.0;
  en2fr[0] = 0.0;
  fr2de[0] = 0.2;
  // Decoder neuron 6: tgt:de mean = 0.5, tgt:fr = 0.9 -> only tgt:fr at
  // k=0.7 (threshold 0.63), expanding to pair {en2fr}.
  en2de[6] = 0.8;
  fr2de[6] = 0.2;
  en2fr[6] = 0.9;
  const ImportanceTable table =
      make_table({"en2de", "fr2de", "en2fr"}, {en2de, fr2de, en2fr});

  AllocationConfig cfg;
  cfg.rho = 0.1;  // quotas all round to zero
  cfg.k = 0.7;
  cfg.variant = Variant::separate_enc_dec;
  const AllocationPlan plan = allocate(table, registry, cfg);
  CHECK(plan.num_general() == 0);
  CHECK(plan.specific[0] == std::vector<int>{0, 2});
  CHECK(plan.specific[6] == std::vector<int>{2});
  CHECK(plan.provenance.variant == Variant::separate_enc_dec);
}

TEST_CASE("allocate validates the table and registry") {
  const NeuronSiteRegistry registry(kDims);
  AllocationConfig cfg;

  ImportanceTable open_table(Criterion::te, {"en2de"}, kN);
  CHECK_THROWS_AS(allocate(open_table, registry, cfg), usage_error);
  CHECK_THROWS_AS(apply_variant(open_table, Variant::pair), usage_error);

  const ImportanceTable wrong_size = make_table({"en2de"}, {{1.0, 2.0}});
  CHECK_THROWS_AS(allocate(wrong_size, registry, cfg), usage_error);

  AllocationConfig bad = cfg;
  bad.rho = 2.0;
  CHECK_THROWS_AS(allocate(make_table({"en2de"}, {zeros_row()}), registry, bad),
                  usage_error);
}
