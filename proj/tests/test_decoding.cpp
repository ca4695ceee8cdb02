#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "rt/decoding.hpp"
#include "rt/errors.hpp"
#include "rt/rng.hpp"

using namespace rt;

namespace {

Vocabulary make_vocab(int frac_digits = 2,
                      std::vector<std::string> text = {"A", "B", "C", "D"}) {
  VocabularySchema schema;
  schema.properties.push_back(PropertySchema{"y", 1, frac_digits, false});
  schema.places = PlaceRange{-std::max(frac_digits, 1), 1};
  return Vocabulary::build(schema, text);
}

ModelConfig tiny_cfg(const Vocabulary& v, uint64_t = 0) {
  ModelConfig cfg;
  cfg.vocab_size = v.size();
  cfg.n_layers = 1;
  cfg.d_e = 8;
  cfg.d_ff = 16;
  cfg.n_heads = 1;
  cfg.max_len = 64;
  cfg.encoding.mode = NeMode::Float;
  cfg.encoding.combine = NeCombine::Sum;
  cfg.encoding.ne_dim = 4;
  return cfg;
}

// all log-prob mass patterns the toy beams are checked against live here; the
// scorer makes slot 1's scores depend on the token placed in slot 0 so the
// beam has to track conditional state, not just per-slot marginals
Eigen::VectorXd toy_row(const std::vector<int>& ids, int slot_index, int pos0, int vocab_size) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(vocab_size);
  if (slot_index == 0) {
    x[0] = -0.1;
    x[1] = -1.0;
    x[2] = -2.5;
  } else {
    const int prev = ids[pos0];
    for (int t = 0; t < vocab_size; ++t) x[t] = -0.3 * static_cast<double>((t + prev) % vocab_size) - 0.2;
  }
  return x;
}

}  // namespace

TEST_CASE("beam core matches exhaustive enumeration on a toy problem") {
  const int V = 3;
  const std::vector<int> slots = {1, 3};
  const std::vector<int> start = {9, -1, 9, -1, 9};  // sentinels at context positions
  SlotScorer scorer = [&](const std::vector<int>& ids, int slot_index) {
    return toy_row(ids, slot_index, slots[0], V);
  };
  const std::vector<std::vector<int>> cands(2, std::vector<int>{0, 1, 2});

  // brute force over all 9 completions
  std::vector<std::pair<double, std::vector<int>>> all;
  for (int a = 0; a < V; ++a)
    for (int b = 0; b < V; ++b) {
      std::vector<int> ids = start;
      double s = toy_row(ids, 0, slots[0], V)[a];
      ids[slots[0]] = a;
      s += toy_row(ids, 1, slots[0], V)[b];
      ids[slots[1]] = b;
      all.emplace_back(s, ids);
    }
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });

  SUBCASE("full width equals the enumeration") {
    auto beams = beam_over_slots(scorer, start, slots, cands, V * V);
    REQUIRE(beams.size() == all.size());
    for (size_t i = 0; i < all.size(); ++i) {
      CHECK(beams[i].ids == all[i].second);
      CHECK(beams[i].score == doctest::Approx(all[i].first).epsilon(1e-12));
    }
  }
  SUBCASE("top-2 beams match the top of the enumeration") {
    auto beams = beam_over_slots(scorer, start, slots, cands, 2);
    REQUIRE(beams.size() == 2);
    for (size_t i = 0; i < 2; ++i) CHECK(beams[i].ids == all[i].second);
  }
  SUBCASE("scores are non-increasing down the list") {
    auto beams = beam_over_slots(scorer, start, slots, cands, V * V);
    for (size_t i = 1; i < beams.size(); ++i) CHECK(beams[i - 1].score >= beams[i].score);
  }
  SUBCASE("width 1 equals stepwise greedy") {
    std::vector<int> ids = start;
    for (size_t s = 0; s < slots.size(); ++s) {
      Eigen::VectorXd row = scorer(ids, static_cast<int>(s));
      int best = cands[s][0];
      for (int c : cands[s])
        if (row[c] > row[best]) best = c;
      ids[slots[s]] = best;
    }
    auto beams = beam_over_slots(scorer, start, slots, cands, 1);
    REQUIRE(beams.size() == 1);
    CHECK(beams[0].ids == ids);
  }
  SUBCASE("beams keep context positions untouched") {
    auto beams = beam_over_slots(scorer, start, slots, cands, 4);
    for (const auto& b : beams) {
      CHECK(b.ids[0] == 9);
      CHECK(b.ids[2] == 9);
      CHECK(b.ids[4] == 9);
    }
  }
}

TEST_CASE("beam core edge cases") {
  SlotScorer uniform = [](const std::vector<int>&, int) { return Eigen::VectorXd::Zero(4); };

  SUBCASE("zero slots returns the input with score 0") {
    const std::vector<int> ids = {3, 1, 2};
    auto beams = beam_over_slots(uniform, ids, {}, {}, 5);
    REQUIRE(beams.size() == 1);
    CHECK(beams[0].ids == ids);
    CHECK(beams[0].score == 0.0);
  }
  SUBCASE("uniform scores break ties toward lexicographically smaller fills") {
    const std::vector<int> ids = {0, 0, 0};
    auto beams = beam_over_slots(uniform, ids, {0, 2}, {{1, 2, 3}, {1, 2, 3}}, 4);
    REQUIRE(beams.size() == 4);
    CHECK(beams[0].ids == std::vector<int>{1, 0, 1});
    CHECK(beams[1].ids == std::vector<int>{1, 0, 2});
    CHECK(beams[2].ids == std::vector<int>{1, 0, 3});
    CHECK(beams[3].ids == std::vector<int>{2, 0, 1});
  }
  SUBCASE("invalid configurations throw") {
    CHECK_THROWS_AS(beam_over_slots(uniform, {0, 0}, {0}, {{1}}, 0), ConfigError);
    CHECK_THROWS_AS(beam_over_slots(uniform, {0, 0}, {0}, {}, 1), ConfigError);
    CHECK_THROWS_AS(beam_over_slots(uniform, {0, 0}, {0}, {{}}, 1), ConfigError);
    CHECK_THROWS_AS(beam_over_slots(uniform, {0, 0}, {5}, {{1}}, 1), ConfigError);
  }
}

TEST_CASE("decode_order places context first and slots last, both ascending") {
  FactorizationOrder o = decode_order(6, {1, 4});
  CHECK(o.z == std::vector<int>{0, 2, 3, 5, 1, 4});
  CHECK(o.c == 4);
  CHECK(o.targets() == std::vector<int>{1, 4});
}

TEST_CASE("property prediction on a zeroed model is the all-zero numeral") {
  Vocabulary vocab = make_vocab(2);
  ModelConfig cfg = tiny_cfg(vocab);
  ParamsT<float> params = ParamsT<float>::init(cfg, 7);
  params.set_zero();
  TablesT<float> tb = build_tables<float>(cfg, vocab);

  TokenizedSequence seq = encode_masked_query({"y"}, {"A", "B", "C"}, vocab);
  PropertyPrediction pred = predict_property(params, tb, vocab, seq);

  CHECK(pred.name == "y");
  CHECK(pred.value.value() == 0.0);
  CHECK(pred.value.scale == 2);
  REQUIRE(pred.slots.size() == 4);  // d0 . d-1 d-2
  // ties resolve to the lowest id, i.e. digit 0 at every digit slot
  CHECK(pred.slots[0].candidate_ids.size() == 10);
  CHECK(pred.slots[1].candidate_ids == std::vector<int>{vocab.dot_id()});
  // uniform logits: digit slots carry ln(10) nats, the forced dot slot none
  const double ln10 = std::log(10.0);
  CHECK(pred.slots[0].entropy() == doctest::Approx(ln10).epsilon(1e-10));
  CHECK(pred.slots[1].entropy() == doctest::Approx(0.0));
  CHECK(pred.mean_entropy == doctest::Approx(3.0 * ln10 / 4.0).epsilon(1e-10));
}

TEST_CASE("property prediction equals a hand-composed constrained greedy decode") {
  Vocabulary vocab = make_vocab(2);
  ModelConfig cfg = tiny_cfg(vocab);
  ParamsT<float> params = ParamsT<float>::init(cfg, 2024);
  TablesT<float> tb = build_tables<float>(cfg, vocab);

  TokenizedSequence seq = encode_masked_query({"y"}, {"B", "D", "A", "C"}, vocab);
  PropertyPrediction pred = predict_property(params, tb, vocab, seq);

  // independent composition: same order, manual argmax per slot
  std::vector<int> slots;
  for (int i = 0; i < seq.k(); ++i)
    if (seq.prop[i].kind == TokenKind::Mask) slots.push_back(i);
  REQUIRE(slots.size() == 4);
  std::vector<std::vector<int>> cands;
  cands.push_back([&] {
    std::vector<int> cs;
    for (int v = 0; v <= 9; ++v) cs.push_back(vocab.numeric_id(v, 0));
    return cs;
  }());
  cands.push_back({vocab.dot_id()});
  for (int pl : {-1, -2}) {
    std::vector<int> cs;
    for (int v = 0; v <= 9; ++v) cs.push_back(vocab.numeric_id(v, pl));
    cands.push_back(cs);
  }
  FactorizationOrder order = decode_order(seq.T(), slots);
  SlotScorer scorer = model_scorer(params, tb, order);
  std::vector<int> ids = seq.ids(vocab);
  for (size_t s = 0; s < slots.size(); ++s) {
    Eigen::VectorXd row = scorer(ids, static_cast<int>(s));
    int best = cands[s][0];
    for (int c : cands[s])
      if (row[c] > row[best]) best = c;
    ids[slots[s]] = best;
  }
  std::vector<Token> run;
  for (size_t s = 0; s < slots.size(); ++s) run.push_back(vocab.token(ids[slots[s]]));
  Decimal oracle = detokenize_number(run);

  CHECK(pred.value == oracle);
  // greedy equals the width-1 beam over the same candidate sets
  auto beams = beam_over_slots(scorer, seq.ids(vocab), slots, cands, 1);
  REQUIRE(beams.size() == 1);
  CHECK(beams[0].ids == ids);
}

TEST_CASE("property prediction always yields a schema-shaped numeral") {
  Vocabulary vocab = make_vocab(3, {"A", "B"});
  ModelConfig cfg = tiny_cfg(vocab);
  TablesT<float> tb = build_tables<float>(cfg, vocab);
  TokenizedSequence seq = encode_masked_query({"y"}, {"B", "A"}, vocab);
  for (uint64_t s = 0; s < 20; ++s) {
    ParamsT<float> params = ParamsT<float>::init(cfg, 1000 + s);
    PropertyPrediction pred = predict_property(params, tb, vocab, seq);
    CHECK(pred.value.scale == 3);  // exactly three fraction digits
    CHECK(pred.value.value() >= 0.0);
    CHECK(pred.value.value() <= 9.999);
    CHECK(pred.slots.size() == 5);
  }
}

TEST_CASE("property prediction input validation") {
  Vocabulary vocab = make_vocab(2);
  ModelConfig cfg = tiny_cfg(vocab);
  ParamsT<float> params = ParamsT<float>::init(cfg, 5);
  TablesT<float> tb = build_tables<float>(cfg, vocab);

  SUBCASE("nothing masked") {
    TokenizedSequence seq = encode_sequence({{"y", 0.25}}, {"A", "B"}, vocab);
    CHECK_THROWS_AS(predict_property(params, tb, vocab, seq), NoMaskedNumerals);
  }
  SUBCASE("masking helper feeds the predictor") {
    TokenizedSequence seq = mask_numerals(encode_sequence({{"y", 0.25}}, {"A", "B"}, vocab));
    PropertyPrediction pred = predict_property(params, tb, vocab, seq);
    CHECK(pred.values.count("y") == 1);
  }
}

TEST_CASE("property prediction covers every masked block") {
  VocabularySchema schema;
  schema.properties.push_back(PropertySchema{"boman", 1, 2, false});
  schema.properties.push_back(PropertySchema{"qed", 1, 2, false});
  schema.places = PlaceRange{-2, 1};
  Vocabulary vocab = Vocabulary::build(schema, {"A", "B", "C"});
  ModelConfig cfg = tiny_cfg(vocab);
  ParamsT<float> params = ParamsT<float>::init(cfg, 11);
  TablesT<float> tb = build_tables<float>(cfg, vocab);

  TokenizedSequence seq = encode_masked_query({"boman", "qed"}, {"C", "A"}, vocab);
  PropertyPrediction pred = predict_property(params, tb, vocab, seq);
  CHECK(pred.values.size() == 2);
  CHECK(pred.values.count("boman") == 1);
  CHECK(pred.values.count("qed") == 1);
  CHECK(pred.name == "boman");  // first block in sequence order
  CHECK(pred.slots.size() == 8);
}

TEST_CASE("model-backed beam fill matches exhaustive enumeration") {
  Vocabulary vocab = make_vocab(2, {"A", "B", "C"});
  ModelConfig cfg = tiny_cfg(vocab);
  ParamsT<float> params = ParamsT<float>::init(cfg, 31);
  TablesT<float> tb = build_tables<float>(cfg, vocab);

  TokenizedSequence seq = encode_sequence({{"y", 0.42}}, {"A", "B", "C", "A"}, vocab);
  seq.text[1] = Token::mask();
  seq.text[3] = Token::mask();
  const int k = seq.k();
  const std::vector<int> slots = {k + 1, k + 3};

  FactorizationOrder order = decode_order(seq.T(), slots);
  SlotScorer scorer = model_scorer(params, tb, order);
  const std::vector<int>& text_ids = vocab.text_ids();

  std::vector<std::pair<double, std::vector<int>>> all;
  for (int a : text_ids)
    for (int b : text_ids) {
      std::vector<int> ids = seq.ids(vocab);
      double s = scorer(ids, 0)[a];
      ids[slots[0]] = a;
      s += scorer(ids, 1)[b];
      ids[slots[1]] = b;
      all.emplace_back(s, ids);
    }
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });

  const int width = static_cast<int>(text_ids.size() * text_ids.size());
  DecodeResult res = beam_fill(params, tb, vocab, seq, width);
  REQUIRE(res.sequences.size() == all.size());
  for (size_t i = 0; i < all.size(); ++i) {
    CHECK(res.sequences[i].first.ids(vocab) == all[i].second);
    CHECK(res.sequences[i].second == doctest::Approx(all[i].first).epsilon(1e-9));
  }

  SUBCASE("scores non-increasing and context untouched") {
    for (size_t i = 1; i < res.sequences.size(); ++i)
      CHECK(res.sequences[i - 1].second >= res.sequences[i].second);
    for (const auto& [filled, score] : res.sequences) {
      CHECK(filled.text[0] == Token::text_sym("A"));
      CHECK(filled.text[2] == Token::text_sym("C"));
      CHECK(filled.prop == seq.prop);
    }
  }
  SUBCASE("width 1 equals greedy_fill") {
    DecodeResult g = greedy_fill(params, tb, vocab, seq);
    DecodeResult b1 = beam_fill(params, tb, vocab, seq, 1);
    REQUIRE(g.sequences.size() == 1);
    REQUIRE(b1.sequences.size() == 1);
    CHECK(g.sequences[0].first == b1.sequences[0].first);
    CHECK(g.sequences[0].first.ids(vocab) == all[0].second);
  }
}

TEST_CASE("beam fill with no masked slots returns the input at score 0") {
  Vocabulary vocab = make_vocab(2);
  ModelConfig cfg = tiny_cfg(vocab);
  ParamsT<float> params = ParamsT<float>::init(cfg, 3);
  TablesT<float> tb = build_tables<float>(cfg, vocab);
  TokenizedSequence seq = encode_sequence({{"y", 0.5}}, {"A", "D"}, vocab);
  DecodeResult res = beam_fill(params, tb, vocab, seq, 4);
  REQUIRE(res.sequences.size() == 1);
  CHECK(res.sequences[0].first == seq);
  CHECK(res.sequences[0].second == 0.0);
}

TEST_CASE("conditional generation injects the primer and fills only planned slots") {
  Vocabulary vocab = make_vocab(2, {"A", "B", "C"});
  ModelConfig cfg = tiny_cfg(vocab);
  ParamsT<float> params = ParamsT<float>::init(cfg, 17);
  TablesT<float> tb = build_tables<float>(cfg, vocab);
  TokenizedSequence seed = encode_sequence({{"y", 0.13}}, {"A", "B", "C", "B", "A"}, vocab);

  MaskPlan plan;
  plan.m = {0, 1, 1, 0, 0};
  plan.mask_fraction = 0.4;
  plan.max_span = 2;

  DecodeResult res = generate_conditional(params, tb, vocab, seed, Primer{"y", 0.87}, plan, 3);
  REQUIRE(res.sequences.size() == 3);
  for (const auto& [filled, score] : res.sequences) {
    DecodedSequence dec = decode_sequence(filled.ids(vocab), vocab);
    REQUIRE(dec.props.size() == 1);
    CHECK(dec.props[0].first == "y");
    CHECK(dec.props[0].second == Decimal::from_value(0.87, 2));  // primer, not the seed value
    CHECK(filled.text[0] == Token::text_sym("A"));
    CHECK(filled.text[3] == Token::text_sym("B"));
    CHECK(filled.text[4] == Token::text_sym("A"));
    CHECK(filled.text[1].kind == TokenKind::Text);
    CHECK(filled.text[2].kind == TokenKind::Text);
  }

  SUBCASE("results are deterministic") {
    DecodeResult again = generate_conditional(params, tb, vocab, seed, Primer{"y", 0.87}, plan, 3);
    REQUIRE(again.sequences.size() == res.sequences.size());
    for (size_t i = 0; i < res.sequences.size(); ++i) {
      CHECK(again.sequences[i].first == res.sequences[i].first);
      CHECK(again.sequences[i].second == res.sequences[i].second);
    }
  }
}

TEST_CASE("conditional generation input validation") {
  Vocabulary vocab = make_vocab(2);
  ModelConfig cfg = tiny_cfg(vocab);
  ParamsT<float> params = ParamsT<float>::init(cfg, 23);
  TablesT<float> tb = build_tables<float>(cfg, vocab);
  TokenizedSequence seed = encode_sequence({{"y", 0.5}}, {"A", "B", "C"}, vocab);

  MaskPlan empty;
  empty.m = {0, 0, 0};
  MaskPlan good;
  good.m = {0, 1, 0};
  MaskPlan short_plan;
  short_plan.m = {1};

  CHECK_THROWS_AS(generate_conditional(params, tb, vocab, seed, Primer{"y", 0.5}, empty, 2),
                  EmptyMask);
  CHECK_THROWS_AS(generate_conditional(params, tb, vocab, seed, Primer{"y", 0.5}, short_plan, 2),
                  ConfigError);
  CHECK_THROWS_AS(generate_conditional(params, tb, vocab, seed, Primer{"zap", 0.5}, good, 2),
                  UnknownProperty);
  CHECK_THROWS_AS(generate_conditional(params, tb, vocab, seed, Primer{"y", 12.3}, good, 2),
                  ValueOutOfRange);
}
