#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "nlohmann/json.hpp"
#include "rt/errors.hpp"
#include "rt/objectives.hpp"
#include "rt/protocols.hpp"

using namespace rt;

namespace {

Vocabulary make_vocab(int alphabet = 5, int d = 2) {
  VocabularySchema schema;
  schema.properties.push_back(PropertySchema{"y", 1, d, false});
  schema.places = PlaceRange{-d, 1};
  std::vector<std::string> text;
  for (int i = 0; i < alphabet; ++i) text.push_back(std::string(1, static_cast<char>('A' + i)));
  return Vocabulary::build(schema, text);
}

ModelConfig small_cfg(const Vocabulary& v, int d_e = 16, int layers = 1) {
  ModelConfig cfg;
  cfg.vocab_size = v.size();
  cfg.n_layers = layers;
  cfg.d_e = d_e;
  cfg.d_ff = 2 * d_e;
  cfg.n_heads = 2;
  cfg.max_len = 64;
  cfg.encoding.mode = NeMode::Float;
  cfg.encoding.combine = NeCombine::Sum;
  cfg.encoding.ne_dim = 8;
  return cfg;
}

struct Fixture {
  Vocabulary vocab = make_vocab();
  ModelConfig cfg = small_cfg(vocab);
  TablesT<float> tb = build_tables<float>(cfg, vocab);
  Params params = Params::init(cfg, 321);
};

Example ex_of(std::vector<std::string> tokens, double y,
              std::vector<std::pair<int, int>> segments = {}) {
  Example e;
  e.tokens = std::move(tokens);
  e.segments = std::move(segments);
  e.props["y"] = y;
  return e;
}

PropertyOracle frac_a_oracle(int alphabet) {
  return [alphabet](const TokenizedSequence& seq) {
    return synth_property_of(SynthKind::FractionOfA, seq, {}, alphabet);
  };
}

}  // namespace

TEST_CASE("metrics report serializes only the fields a protocol set") {
  MetricsReport r;
  CHECK(r.to_json() == "{}");
  r.rmse = 0.25;
  r.spearman_rho = -0.5;
  auto j = nlohmann::json::parse(r.to_json());
  CHECK(j.size() == 2);
  CHECK(j.at("rmse").get<double>() == 0.25);
  CHECK(j.at("spearman_rho").get<double>() == -0.5);
}

TEST_CASE("equidistant primers land on the renderable grid") {
  CHECK(equidistant_primers(10, 2) ==
        std::vector<double>{0.0, 0.11, 0.22, 0.33, 0.44, 0.56, 0.67, 0.78, 0.89, 1.0});
  CHECK(equidistant_primers(2, 2) == std::vector<double>{0.0, 1.0});
  CHECK(equidistant_primers(1, 2) == std::vector<double>{0.0});
  CHECK(equidistant_primers(10, 3)[5] == doctest::Approx(0.556).epsilon(1e-12));
  CHECK_THROWS_AS(equidistant_primers(0, 2), ConfigError);
}

TEST_CASE("masking one property block leaves everything else alone") {
  Vocabulary vocab = make_vocab();
  TokenizedSequence seq = encode_sequence({{"y", 0.37}}, {"A", "B"}, vocab);
  TokenizedSequence masked = mask_property_block(seq, "y");
  const PropertyBlock b = scan_property_blocks(seq)[0];
  for (int i = 0; i < seq.T(); ++i) {
    if (i >= b.first && i < b.last)
      CHECK(masked.at(i) == Token::mask());
    else
      CHECK(masked.at(i) == seq.at(i));
  }
  CHECK_THROWS_AS(mask_property_block(seq, "z"), NoPropertyBlock);

  SUBCASE("value readback") {
    CHECK(property_value_of(seq, vocab, "y") == 0.37);
    CHECK_THROWS_AS(property_value_of(seq, vocab, "z"), NoPropertyBlock);
  }
}

TEST_CASE("text similarity is the tanimoto of the text parts") {
  Vocabulary vocab = make_vocab();
  TokenizedSequence a = encode_sequence({{"y", 0.1}}, {"A", "B"}, vocab);
  TokenizedSequence b = encode_sequence({{"y", 0.9}}, {"A", "B"}, vocab);
  CHECK(text_similarity(a, b) == 1.0);  // property block does not matter
  TokenizedSequence c = encode_sequence({{"y", 0.1}}, {"C", "D"}, vocab);
  CHECK(text_similarity(a, c) == 0.0);
}

TEST_CASE("self prediction oracle equals the manual composition") {
  Fixture f;
  TokenizedSequence seq = encode_sequence({{"y", 0.42}}, {"A", "C", "B"}, f.vocab);
  PropertyOracle oracle = self_prediction_oracle(f.params, f.tb, f.vocab, "y");
  const PropertyPrediction manual =
      predict_property(f.params, f.tb, f.vocab, mask_property_block(seq, "y"));
  CHECK(oracle(seq) == manual.values.at("y").value());
}

TEST_CASE("regression eval on a memorizing model") {
  Fixture f;
  std::vector<TokenizedSequence> data = {
      encode_sequence({{"y", 0.15}}, {"A", "B", "C", "D"}, f.vocab),
      encode_sequence({{"y", 0.55}}, {"B", "C", "D", "E"}, f.vocab),
      encode_sequence({{"y", 0.95}}, {"C", "A", "E", "B"}, f.vocab)};
  AdamStateT<float> opt = AdamStateT<float>::zeros_like(f.params);
  TrainerConfig tc;
  tc.adam.lr = 3e-3;
  Rng rng = make_rng(5);
  Batch batch;
  for (const auto& s : data) batch.push_back(&s);
  double loss = 1e9;
  for (int s = 0; s < 600 && loss >= 0.01; ++s)
    loss = property_step(f.params, opt, f.tb, f.vocab, batch, tc, rng).loss;
  REQUIRE(loss < 0.01);

  RegressionResult res = regression_eval(f.params, f.tb, f.vocab, data, "y");
  CHECK(res.n == 3);
  CHECK(res.rmse < 0.05);
  CHECK(!res.spearman.degenerate);
  CHECK(res.spearman.value == 1.0);
  CHECK(res.pcc.value > 0.99);

  SUBCASE("a single sequence degenerates the correlations but not the errors") {
    RegressionResult one = regression_eval(f.params, f.tb, f.vocab,
                                           {data[0]}, "y");
    CHECK(one.pcc.degenerate);
    CHECK(one.spearman.degenerate);
    CHECK(one.rmse < 0.05);
    MetricsReport rep = one.report();
    CHECK(*rep.pcc == 0.0);
  }
  SUBCASE("empty test set rejected") {
    CHECK_THROWS_AS(regression_eval(f.params, f.tb, f.vocab, {}, "y"), DataError);
  }
}

TEST_CASE("knn eval equals the manual composition of baseline and metrics") {
  Dataset train{ex_of({"A", "B"}, 0.1), ex_of({"A", "C"}, 0.2), ex_of({"B", "C"}, 0.3),
                ex_of({"A", "A", "A"}, 0.4), ex_of({"C"}, 0.5)};
  Dataset test{ex_of({"A", "B"}, 0.15), ex_of({"A", "A", "A"}, 0.4)};

  RegressionResult res = knn_eval(train, test, "y", 3, KnnDistance::Levenshtein);
  CHECK(res.n == 2);

  std::vector<std::vector<Token>> train_toks, test_toks;
  std::vector<double> labels{0.1, 0.2, 0.3, 0.4, 0.5}, golds{0.15, 0.4};
  for (const Example& e : train) {
    std::vector<Token> t;
    for (const auto& s : e.tokens) t.push_back(Token::text_sym(s));
    train_toks.push_back(t);
  }
  for (const Example& e : test) {
    std::vector<Token> t;
    for (const auto& s : e.tokens) t.push_back(Token::text_sym(s));
    test_toks.push_back(t);
  }
  const std::vector<double> preds =
      knn_baseline(train_toks, labels, test_toks, 3, KnnDistance::Levenshtein);
  CHECK(res.rmse == rmse(preds, golds));
  CHECK(res.spearman.value == spearman(preds, golds).value);

  CHECK_THROWS_AS(knn_eval(train, Dataset{ex_of({"A"}, 0.5)}, "z", 3,
                           KnnDistance::Levenshtein),
                  DataError);
}

TEST_CASE("primer sweep") {
  Fixture f;
  std::vector<TokenizedSequence> seeds = {
      encode_sequence({{"y", 0.4}}, {"A", "B", "C", "D", "E", "A", "B", "C"}, f.vocab),
      encode_sequence({{"y", 0.6}}, {"B", "B", "D", "D", "A", "A", "C", "C"}, f.vocab)};
  SweepConfig cfg;
  cfg.n_primers = 6;
  cfg.beam_width = 2;
  cfg.seed = 99;

  SUBCASE("echo oracle gives perfect rank correlation per seed") {
    // realized == injected primer, read straight from the property block
    PropertyOracle echo = [&](const TokenizedSequence& s) {
      return property_value_of(s, f.vocab, "y");
    };
    SweepResult res = primer_sweep(f.params, f.tb, f.vocab, seeds, {}, echo, cfg);
    REQUIRE(res.seeds.size() == 2);
    for (const SeedSweep& s : res.seeds) {
      REQUIRE(s.primers.size() >= 2);  // distinct primer blocks survive the dedup
      CHECK(s.realized == s.primers);
      CHECK(!s.rho.degenerate);
      CHECK(s.rho.value == 1.0);
      CHECK(!s.zero_var);
    }
    CHECK(res.mean_rho == 1.0);
    CHECK(res.degenerate == 0);
    CHECK(res.zero_var_fraction == 0.0);
    // nothing was trained on, so every unique generation is novel
    CHECK(res.novelty_fraction == 1.0);
  }
  SUBCASE("text oracle structure and csv emission") {
    SweepResult res = primer_sweep(f.params, f.tb, f.vocab, seeds, seeds, frac_a_oracle(5), cfg);
    size_t kept = 0;
    for (const SeedSweep& s : res.seeds) {
      CHECK(s.primers.size() <= static_cast<size_t>(cfg.n_primers));
      CHECK(std::is_sorted(s.primers.begin(), s.primers.end()));
      for (double v : s.realized) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      if (s.zero_var) CHECK(s.rho.degenerate);
      kept += s.primers.size();
    }
    CHECK(res.zero_var_fraction >= 0.0);
    CHECK(res.zero_var_fraction <= 1.0);
    CHECK(res.novelty_fraction >= 0.0);
    CHECK(res.novelty_fraction <= 1.0);

    std::ostringstream os;
    write_sweep_csv(res, os);
    std::istringstream is(os.str());
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "seed,primer,realized");
    size_t rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == kept);

    SUBCASE("deterministic under the config seed") {
      SweepResult again =
          primer_sweep(f.params, f.tb, f.vocab, seeds, seeds, frac_a_oracle(5), cfg);
      REQUIRE(again.seeds.size() == res.seeds.size());
      for (size_t i = 0; i < again.seeds.size(); ++i) {
        CHECK(again.seeds[i].primers == res.seeds[i].primers);
        CHECK(again.seeds[i].realized == res.seeds[i].realized);
      }
    }
  }
  SUBCASE("self and external oracles run on the same generations") {
    SweepResult ext = primer_sweep(f.params, f.tb, f.vocab, seeds, {}, frac_a_oracle(5), cfg);
    SweepResult self = primer_sweep(f.params, f.tb, f.vocab, seeds, {},
                                    self_prediction_oracle(f.params, f.tb, f.vocab, "y"), cfg);
    REQUIRE(ext.seeds.size() == self.seeds.size());
    for (size_t i = 0; i < ext.seeds.size(); ++i)
      CHECK(ext.seeds[i].primers == self.seeds[i].primers);
  }
  SUBCASE("validation") {
    CHECK_THROWS_AS(
        primer_sweep(f.params, f.tb, f.vocab, {}, {}, frac_a_oracle(5), cfg), DataError);
    SweepConfig bad = cfg;
    bad.n_primers = 0;
    CHECK_THROWS_AS(primer_sweep(f.params, f.tb, f.vocab, seeds, {}, frac_a_oracle(5), bad),
                    ConfigError);
    CHECK_THROWS_AS(primer_sweep(f.params, f.tb, f.vocab, seeds, {}, {}, cfg), ConfigError);
  }
}

TEST_CASE("reconstruction eval") {
  Vocabulary vocab = make_vocab(4, 2);
  ModelConfig mc = small_cfg(vocab);
  Dataset ds;
  ds.push_back(ex_of({"A", "B", "C", "D", "A", "B"}, 0.25, default_segments(6)));

  SUBCASE("a memorizing model reconstructs its one example") {
    TablesT<float> tb = build_tables<float>(mc, vocab);
    Params params = Params::init(mc, 11);
    AdamStateT<float> opt = AdamStateT<float>::zeros_like(params);
    TrainerConfig tc;
    tc.adam.lr = 3e-3;
    tc.mask_fraction = 0.4;
    tc.max_span = 2;
    std::vector<TokenizedSequence> enc = encode_dataset(ds, vocab);
    Batch batch{&enc[0]};
    Rng rng = make_rng(3);
    double loss = 1e9;
    for (int s = 0; s < 800 && loss >= 0.01; ++s)
      loss = cgen_step(params, opt, tb, vocab, batch, tc, rng).loss;
    REQUIRE(loss < 0.01);

    for (int segment = 0; segment < 3; ++segment) {
      ReconstructionConfig rc;
      rc.segment = segment;
      rc.top_k = 1;
      ReconstructionResult res = reconstruction_eval(params, tb, vocab, ds, rc);
      CHECK(res.n == 1);
      CHECK(res.topk_accuracy == 1.0);
      CHECK(res.mean_best_similarity == 1.0);
    }
    SUBCASE("accuracy is monotone in k") {
      ReconstructionConfig rc;
      rc.segment = 1;
      rc.top_k = 1;
      const double top1 = reconstruction_eval(params, tb, vocab, ds, rc).topk_accuracy;
      rc.top_k = 3;
      const double top3 = reconstruction_eval(params, tb, vocab, ds, rc).topk_accuracy;
      CHECK(top1 <= top3);
    }
    SUBCASE("the context can drop the property block") {
      ReconstructionConfig rc;
      rc.segment = 1;
      rc.top_k = 2;
      rc.with_property = false;
      ReconstructionResult res = reconstruction_eval(params, tb, vocab, ds, rc);
      CHECK(res.mean_best_similarity >= 0.0);
      CHECK(res.mean_best_similarity <= 1.0);
    }
  }
  SUBCASE("validation") {
    TablesT<float> tb = build_tables<float>(mc, vocab);
    Params params = Params::init(mc, 11);
    ReconstructionConfig rc;
    rc.segment = 7;
    CHECK_THROWS_AS(reconstruction_eval(params, tb, vocab, ds, rc), DataError);
    rc.segment = 0;
    rc.top_k = 0;
    CHECK_THROWS_AS(reconstruction_eval(params, tb, vocab, ds, rc), ConfigError);
    rc.top_k = 1;
    CHECK_THROWS_AS(reconstruction_eval(params, tb, vocab, Dataset{}, rc), DataError);
  }
}

TEST_CASE("decoration eval") {
  Fixture f;
  std::vector<std::pair<int, int>> segs = default_segments(6);
  Dataset ds;
  ds.push_back(ex_of({"A", "B", "C", "C", "D", "E"}, 0.3, segs));
  ds.push_back(ex_of({"B", "A", "D", "C", "E", "A"}, 0.5, segs));
  PropertyOracle echo = [&](const TokenizedSequence& s) {
    return property_value_of(s, f.vocab, "y");
  };

  SUBCASE("zero boost with the echo oracle cannot improve anything") {
    DecorationConfig dc;
    dc.segment = 1;
    dc.boost = 0.0;
    dc.top_k = 3;
    DecorationResult res = decoration_eval(f.params, f.tb, f.vocab, ds, {}, echo, dc);
    CHECK(res.n == 2);
    CHECK(res.success_rate == 0.0);
    CHECK(res.mean_improvement == 0.0);
  }
  SUBCASE("boosted echo oracle improves by exactly the boost") {
    DecorationConfig dc;
    dc.segment = 1;
    dc.boost = 0.2;
    dc.top_k = 3;
    DecorationResult res = decoration_eval(f.params, f.tb, f.vocab, ds, {}, echo, dc);
    CHECK(res.success_rate == 1.0);
    CHECK(res.mean_improvement == doctest::Approx(0.2).epsilon(1e-9));
  }
  SUBCASE("candidates already in the training data are discarded") {
    // training segments cover every single letter of the alphabet, so every
    // one-token candidate is a known precursor and is dropped
    Dataset train;
    for (char c : std::string("ABCDE"))
      train.push_back(ex_of({std::string(1, c), "A", "A"}, 0.1, {{0, 1}, {1, 2}, {2, 3}}));
    Dataset eval_ds;
    eval_ds.push_back(ex_of({"A", "B", "C"}, 0.3, {{0, 1}, {1, 2}, {2, 3}}));
    DecorationConfig dc;
    dc.segment = 0;
    dc.boost = 0.5;
    dc.top_k = 5;
    DecorationResult res = decoration_eval(f.params, f.tb, f.vocab, eval_ds, train, echo, dc);
    CHECK(res.success_rate == 0.0);  // empty candidate set counts as failure
    CHECK(res.mean_improvement == 0.0);
  }
  SUBCASE("validation") {
    DecorationConfig dc;
    dc.segment = 0;
    dc.boost = -1;
    CHECK_THROWS_AS(decoration_eval(f.params, f.tb, f.vocab, ds, {}, echo, dc), ConfigError);
    dc.boost = 0.1;
    CHECK_THROWS_AS(decoration_eval(f.params, f.tb, f.vocab, Dataset{}, {}, echo, dc),
                    DataError);
    Dataset noseg;
    noseg.push_back(ex_of({"A", "B"}, 0.5));
    CHECK_THROWS_AS(decoration_eval(f.params, f.tb, f.vocab, noseg, {}, echo, dc), DataError);
  }
}

TEST_CASE("constrained optimization") {
  Fixture f;
  TokenizedSequence seed =
      encode_sequence({{"y", 0.3}}, {"A", "B", "C", "D", "E", "A", "B", "C"}, f.vocab);
  PropertyOracle oracle = frac_a_oracle(5);

  ConstrainedOptConfig cfg;
  cfg.pool_size = 6;
  cfg.delta = 0.0;
  cfg.primer = 0.9;
  cfg.fractions = {0.3, 0.5};
  cfg.spans = {1, 2};
  cfg.beam_width = 2;
  cfg.seed = 777;

  SUBCASE("unconstrained pool keeps every candidate") {
    ConstrainedOptResult res =
        constrained_optimization(f.params, f.tb, f.vocab, seed, cfg, oracle, text_similarity);
    CHECK(res.qualified == cfg.pool_size);
    CHECK(res.seed_property == oracle(seed));
    CHECK(res.best_property >= 0.0);
    CHECK(res.improvement == res.best_property - res.seed_property);

    SUBCASE("deterministic under the seed") {
      ConstrainedOptResult again =
          constrained_optimization(f.params, f.tb, f.vocab, seed, cfg, oracle, text_similarity);
      CHECK(again.best == res.best);
      CHECK(again.best_property == res.best_property);
    }
  }
  SUBCASE("a full similarity threshold forbids any improvement") {
    ConstrainedOptConfig strict = cfg;
    strict.delta = 1.0;
    strict.pool_size = 8;
    ConstrainedOptResult res =
        constrained_optimization(f.params, f.tb, f.vocab, seed, strict, oracle, text_similarity);
    CHECK(res.improvement == 0.0);
  }
  SUBCASE("pool of one equals a single conditional generation") {
    ConstrainedOptConfig one = cfg;
    one.pool_size = 1;
    one.fractions = {0.4};
    one.spans = {2};
    ConstrainedOptResult res =
        constrained_optimization(f.params, f.tb, f.vocab, seed, one, oracle, text_similarity);

    Rng rng = make_rng(derive_seed(one.seed, "propopt"));
    const MaskPlan plan = sample_nonempty_mask_plan(seed.l(), 0.4, 2, rng);
    const DecodeResult dec = generate_conditional(f.params, f.tb, f.vocab, seed,
                                                  Primer{"y", one.primer}, plan, one.beam_width);
    CHECK(res.qualified == 1);
    CHECK(res.best == dec.sequences.front().first);
    CHECK(res.best_property == oracle(dec.sequences.front().first));
  }
  SUBCASE("validation") {
    ConstrainedOptConfig bad = cfg;
    bad.pool_size = 0;
    CHECK_THROWS_AS(
        constrained_optimization(f.params, f.tb, f.vocab, seed, bad, oracle, text_similarity),
        ConfigError);
    bad = cfg;
    bad.delta = 1.5;
    CHECK_THROWS_AS(
        constrained_optimization(f.params, f.tb, f.vocab, seed, bad, oracle, text_similarity),
        ConfigError);
    bad = cfg;
    bad.fractions = {};
    CHECK_THROWS_AS(
        constrained_optimization(f.params, f.tb, f.vocab, seed, bad, oracle, text_similarity),
        ConfigError);
    CHECK_THROWS_AS(
        constrained_optimization(f.params, f.tb, f.vocab, seed, cfg, {}, text_similarity),
        ConfigError);
  }
}
