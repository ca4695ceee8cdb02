#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "rt/errors.hpp"
#include "rt/masking.hpp"
#include "rt/tokenizer.hpp"

using namespace rt;

namespace {

Vocabulary test_vocab(int frac_digits = 2) {
  VocabularySchema schema;
  schema.properties = {PropertySchema{"qed", 1, frac_digits, false}};
  schema.places = PlaceRange{-frac_digits, 0};
  return Vocabulary::build(schema, {"A", "B", "C", "D"});
}

// independent rank oracle: scan z linearly to decide which of i, j comes first
bool appears_at_or_before(const std::vector<int>& z, int j, int i) {
  for (int p : z) {
    if (p == j) return true;   // j first (or j == i)
    if (p == i) return false;  // i strictly first
  }
  return false;
}

bool appears_strictly_before(const std::vector<int>& z, int j, int i) {
  if (i == j) return false;
  return appears_at_or_before(z, j, i);
}

bool is_permutation_of_iota(std::vector<int> z) {
  std::sort(z.begin(), z.end());
  for (size_t i = 0; i < z.size(); ++i)
    if (z[i] != int(i)) return false;
  return true;
}

}  // namespace

TEST_CASE("plm order target counts and structure") {
  Rng rng = make_rng(1);
  SUBCASE("T=4 fraction 0.25 gives one target") {
    FactorizationOrder o = sample_plm_order(4, 0.25, rng);
    CHECK(o.T() == 4);
    CHECK(o.c == 3);
    CHECK(o.targets().size() == 1);
  }
  SUBCASE("T=10 fraction 0.4 gives four targets") {
    FactorizationOrder o = sample_plm_order(10, 0.4, rng);
    CHECK(o.c == 6);
    CHECK(o.targets().size() == 4);
  }
  SUBCASE("tiny fraction still yields one target") {
    FactorizationOrder o = sample_plm_order(8, 0.01, rng);
    CHECK(o.targets().size() == 1);
  }
  SUBCASE("z is a permutation with ascending targets") {
    for (int it = 0; it < 200; ++it) {
      FactorizationOrder o = sample_plm_order(12, 0.4, rng);
      CHECK(is_permutation_of_iota(o.z));
      std::vector<int> t = o.targets();
      CHECK(std::is_sorted(t.begin(), t.end()));
    }
  }
}

TEST_CASE("plm order covers every position uniformly as target") {
  Rng rng = make_rng(7);
  const int T = 10;
  const double f = 0.4;
  const int draws = 10000;
  std::vector<int> hits(T, 0);
  for (int it = 0; it < draws; ++it) {
    FactorizationOrder o = sample_plm_order(T, f, rng);
    for (int t : o.targets()) hits[size_t(t)] += 1;
  }
  // each position is a target with probability (T-c)/T = 0.4
  double p = 0.4;
  double sigma = std::sqrt(p * (1 - p) * draws);
  for (int i = 0; i < T; ++i) CHECK(std::abs(hits[size_t(i)] - p * draws) <= 3.0 * sigma + 1.0);
}

TEST_CASE("property order targets exactly the numeral slots") {
  Vocabulary vocab = test_vocab(2);
  Rng rng = make_rng(3);

  // k=6: tag, 0_0, ., 2_-1, 9_-2, separator; l=3
  TokenizedSequence seq = encode_sequence({{"qed", 0.29}}, {"A", "B", "C"}, vocab);
  REQUIRE(seq.k() == 6);
  REQUIRE(seq.l() == 3);

  std::vector<int> numerals = seq.numeral_positions();
  CHECK(numerals == std::vector<int>{1, 2, 3, 4});

  for (int it = 0; it < 200; ++it) {
    FactorizationOrder o = sample_property_order(seq, rng);
    CHECK(is_permutation_of_iota(o.z));
    CHECK(o.targets() == numerals);
    // first l entries are exactly the text positions
    std::set<int> head(o.z.begin(), o.z.begin() + seq.l());
    CHECK(head == std::set<int>{6, 7, 8});
    CHECK(o.c == seq.T() - int(numerals.size()));
  }
}

TEST_CASE("property order over two blocks targets the union of numeral runs") {
  VocabularySchema schema;
  schema.properties = {PropertySchema{"boman", 1, 2, false}, PropertySchema{"qed", 1, 2, false}};
  schema.places = PlaceRange{-2, 0};
  Vocabulary vocab = Vocabulary::build(schema, {"A", "B"});
  TokenizedSequence seq = encode_sequence({{"boman", 0.10}, {"qed", 0.90}}, {"A", "B"}, vocab);
  REQUIRE(seq.k() == 12);

  Rng rng = make_rng(4);
  FactorizationOrder o = sample_property_order(seq, rng);
  CHECK(o.targets() == std::vector<int>{1, 2, 3, 4, 7, 8, 9, 10});
}

TEST_CASE("property order requires a property block") {
  TokenizedSequence seq;
  seq.text = {Token::text_sym("A"), Token::text_sym("B")};
  Rng rng = make_rng(5);
  CHECK_THROWS_AS(sample_property_order(seq, rng), NoPropertyBlock);
}

TEST_CASE("mask plan anchors") {
  Rng rng = make_rng(11);
  SUBCASE("fraction one masks everything") {
    MaskPlan p = sample_mask_plan(9, 1.0, 3, rng);
    CHECK(p.count() == 9);
    CHECK(std::all_of(p.m.begin(), p.m.end(), [](uint8_t x) { return x == 1; }));
  }
  SUBCASE("l=20 fraction 0.4 span 7: exact budget, runs capped") {
    for (int it = 0; it < 500; ++it) {
      MaskPlan p = sample_mask_plan(20, 0.4, 7, rng);
      CHECK(p.count() == 8);
      int run = 0, longest = 0;
      for (uint8_t x : p.m) {
        run = x ? run + 1 : 0;
        longest = std::max(longest, run);
      }
      CHECK(longest <= 7);
    }
  }
  SUBCASE("budget within one of round(fraction*l) across lengths") {
    for (int it = 0; it < 1000; ++it) {
      int l = 1 + int(rng() % 40);
      double f = 0.05 + 0.9 * double(rng() % 1000) / 1000.0;
      int span = 1 + int(rng() % 7);
      MaskPlan p = sample_mask_plan(l, f, span, rng);
      int budget = std::clamp(int(std::llround(f * l)), 0, l);
      CHECK(std::abs(p.count() - budget) <= 1);
    }
  }
  SUBCASE("runs never exceed max_span when the budget is feasible") {
    for (int it = 0; it < 1000; ++it) {
      int l = 8 + int(rng() % 30);
      int span = 1 + int(rng() % 6);
      MaskPlan p = sample_mask_plan(l, 0.4, span, rng);
      int run = 0;
      for (uint8_t x : p.m) {
        run = x ? run + 1 : 0;
        CHECK(run <= span);
      }
    }
  }
}

TEST_CASE("cgen order separates property context from masked-text targets") {
  Vocabulary vocab = test_vocab(2);
  TokenizedSequence seq = encode_sequence({{"qed", 0.50}}, {"A", "B", "C", "D"}, vocab);
  REQUIRE(seq.k() == 6);
  REQUIRE(seq.l() == 4);
  Rng rng = make_rng(13);

  SUBCASE("anchored plan m=[0,1,1,0]") {
    MaskPlan plan;
    plan.m = {0, 1, 1, 0};
    plan.max_span = 2;
    FactorizationOrder o = sample_cgen_order(seq, plan, rng);
    CHECK(o.c == seq.T() - 2);
    CHECK(o.targets() == std::vector<int>{7, 8});
    // property block occupies the first k slots of z in order
    for (int i = 0; i < seq.k(); ++i) CHECK(o.z[size_t(i)] == i);
  }
  SUBCASE("all-ones plan reduces context to the property block") {
    MaskPlan plan;
    plan.m = {1, 1, 1, 1};
    FactorizationOrder o = sample_cgen_order(seq, plan, rng);
    CHECK(o.c == seq.k());
    CHECK(o.targets() == std::vector<int>{6, 7, 8, 9});
  }
  SUBCASE("empty plan throws") {
    MaskPlan plan;
    plan.m = {0, 0, 0, 0};
    CHECK_THROWS_AS(sample_cgen_order(seq, plan, rng), EmptyMask);
  }
  SUBCASE("length mismatch throws") {
    MaskPlan plan;
    plan.m = {1, 1};
    CHECK_THROWS_AS(sample_cgen_order(seq, plan, rng), Error);
  }
}

TEST_CASE("objective orders never cross the property/text boundary") {
  Vocabulary vocab = test_vocab(2);
  TokenizedSequence seq = encode_sequence({{"qed", 0.73}}, {"A", "B", "C", "D", "A", "B"}, vocab);
  Rng rng = make_rng(17);
  for (int it = 0; it < 10000; ++it) {
    FactorizationOrder po = sample_property_order(seq, rng);
    for (int t : po.targets()) CHECK(t < seq.k());
    MaskPlan plan = sample_mask_plan(seq.l(), 0.5, 3, rng);
    if (plan.count() == 0) continue;
    FactorizationOrder co = sample_cgen_order(seq, plan, rng);
    for (int t : co.targets()) CHECK(t >= seq.k());
  }
}

TEST_CASE("attention masks: causal case and anchored permutation") {
  SUBCASE("identity permutation is causal") {
    FactorizationOrder o;
    o.z = {0, 1, 2, 3};
    o.c = 2;
    AttentionMasks m = build_attention_masks(o);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        CHECK(bool(m.content.at(i, j)) == (j <= i));
        CHECK(bool(m.query.at(i, j)) == (j < i));
      }
  }
  SUBCASE("z = (2,0,1) in position terms") {
    FactorizationOrder o;
    o.z = {2, 0, 1};
    o.c = 0;
    AttentionMasks m = build_attention_masks(o);
    // position 0 sees {2}; position 1 sees {2,0}; position 2 sees {}
    CHECK(m.query.at(0, 2));
    CHECK_FALSE(m.query.at(0, 0));
    CHECK_FALSE(m.query.at(0, 1));
    CHECK(m.query.at(1, 2));
    CHECK(m.query.at(1, 0));
    CHECK_FALSE(m.query.at(1, 1));
    CHECK_FALSE(m.query.at(2, 0));
    CHECK_FALSE(m.query.at(2, 1));
    CHECK_FALSE(m.query.at(2, 2));
  }
  SUBCASE("non-permutation rejected") {
    FactorizationOrder o;
    o.z = {0, 0, 2};
    o.c = 1;
    CHECK_THROWS_AS(build_attention_masks(o), Error);
  }
}

TEST_CASE("attention masks equal the brute-force oracle for every permutation up to T=5") {
  auto t0 = std::chrono::steady_clock::now();
  int checked = 0;
  for (int T = 1; T <= 5; ++T) {
    std::vector<int> z(static_cast<size_t>(T));
    std::iota(z.begin(), z.end(), 0);
    do {
      FactorizationOrder o;
      o.z = z;
      o.c = T > 1 ? 1 : 0;
      AttentionMasks m = build_attention_masks(o);
      for (int i = 0; i < T; ++i)
        for (int j = 0; j < T; ++j) {
          CHECK(bool(m.content.at(i, j)) == appears_at_or_before(z, j, i));
          CHECK(bool(m.query.at(i, j)) == appears_strictly_before(z, j, i));
          if (i == j) {
            CHECK(m.content.at(i, j));
            CHECK_FALSE(m.query.at(i, j));
          }
          if (m.query.at(i, j)) CHECK(m.content.at(i, j));
        }
      ++checked;
    } while (std::next_permutation(z.begin(), z.end()));
  }
  CHECK(checked == 153);
  double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  CHECK(ms < 1000.0);
}

TEST_CASE("query mask implies content mask on random orders") {
  Rng rng = make_rng(23);
  for (int it = 0; it < 100; ++it) {
    FactorizationOrder o = sample_plm_order(50, 0.3, rng);
    AttentionMasks m = build_attention_masks(o);
    for (int i = 0; i < 50; ++i)
      for (int j = 0; j < 50; ++j)
        if (m.query.at(i, j)) CHECK(m.content.at(i, j));
  }
}
