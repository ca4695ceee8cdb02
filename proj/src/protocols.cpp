#include "rt/protocols.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>
#include <unordered_set>

#include "rt/errors.hpp"
#include "rt/rng.hpp"
#include "rt/tokenizer.hpp"

namespace rt {

using ordered_json = nlohmann::ordered_json;

std::string MetricsReport::to_json() const {
  ordered_json j = ordered_json::object();
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) j[k] = *v;
  };
  put("rmse", rmse);
  put("mae", mae);
  put("pcc", pcc);
  put("r2", r2);
  put("spearman_rho", spearman_rho);
  put("zero_var_fraction", zero_var_fraction);
  put("topk_accuracy", topk_accuracy);
  put("mean_similarity", mean_similarity);
  put("success_rate", success_rate);
  put("mean_improvement", mean_improvement);
  put("novelty_fraction", novelty_fraction);
  return j.dump();
}

namespace {

// the single schema property, or the named one validated
std::string resolve_property(const Vocabulary& vocab, const std::string& name) {
  if (!name.empty()) {
    if (!vocab.has_property(name)) throw ConfigError("unknown property: " + name);
    return name;
  }
  const auto& props = vocab.schema().properties;
  if (props.size() != 1)
    throw ConfigError("property name required when the schema has several properties");
  return props[0].name;
}

std::string text_key(const TokenizedSequence& seq) {
  std::string key;
  for (const Token& t : seq.text) {
    key += t.render();
    key.push_back('\x1f');
  }
  return key;
}

std::string full_key(const TokenizedSequence& seq) {
  std::string key;
  for (int i = 0; i < seq.T(); ++i) {
    key += seq.at(i).render();
    key.push_back('\x1f');
  }
  return key;
}

std::string segment_key(const std::vector<std::string>& tokens, std::pair<int, int> seg) {
  std::string key;
  for (int i = seg.first; i < seg.second; ++i) {
    key += tokens[static_cast<size_t>(i)];
    key.push_back('\x1f');
  }
  return key;
}

std::vector<Token> text_slice(const TokenizedSequence& seq, std::pair<int, int> seg) {
  return {seq.text.begin() + seg.first, seq.text.begin() + seg.second};
}

std::pair<int, int> checked_segment(const Example& ex, int segment) {
  if (segment < 0 || segment >= static_cast<int>(ex.segments.size()))
    throw DataError("example has no segment " + std::to_string(segment));
  return ex.segments[static_cast<size_t>(segment)];
}

MaskPlan segment_plan(int l, std::pair<int, int> seg) {
  MaskPlan plan;
  plan.m.assign(static_cast<size_t>(l), 0);
  for (int i = seg.first; i < seg.second; ++i) plan.m[static_cast<size_t>(i)] = 1;
  return plan;
}

bool exactly_constant(const std::vector<double>& v) {
  for (double x : v)
    if (x != v[0]) return false;
  return true;
}

}  // namespace

TokenizedSequence mask_property_block(const TokenizedSequence& seq, const std::string& name) {
  TokenizedSequence out = seq;
  for (const PropertyBlock& b : scan_property_blocks(seq))
    if (b.name == name) {
      for (int i = b.first; i < b.last; ++i) out.at(i) = Token::mask();
      return out;
    }
  throw NoPropertyBlock("sequence has no property block " + name);
}

double property_value_of(const TokenizedSequence& seq, const Vocabulary& vocab,
                         const std::string& name) {
  const DecodedSequence dec = decode_sequence(seq.ids(vocab), vocab);
  for (const auto& [n, d] : dec.props)
    if (n == name) return d.value();
  throw NoPropertyBlock("sequence has no property block " + name);
}

template <class S>
PropertyOracle self_prediction_oracle(const ParamsT<S>& params, const TablesT<S>& tb,
                                      const Vocabulary& vocab, const std::string& property) {
  const std::string prop = resolve_property(vocab, property);
  const ParamsT<S>* p = &params;
  const TablesT<S>* t = &tb;
  const Vocabulary* v = &vocab;
  return [p, t, v, prop](const TokenizedSequence& seq) {
    const PropertyPrediction pred = predict_property(*p, *t, *v, mask_property_block(seq, prop));
    return pred.values.at(prop).value();
  };
}

double text_similarity(const TokenizedSequence& a, const TokenizedSequence& b) {
  return token_tanimoto(a.text, b.text);
}

MetricsReport RegressionResult::report() const {
  MetricsReport r;
  r.rmse = rmse;
  r.mae = mae;
  r.pcc = pcc.value;
  r.r2 = r2.value;
  r.spearman_rho = spearman.value;
  return r;
}

template <class S>
RegressionResult regression_eval(const ParamsT<S>& params, const TablesT<S>& tb,
                                 const Vocabulary& vocab,
                                 const std::vector<TokenizedSequence>& test,
                                 const std::string& property) {
  if (test.empty()) throw DataError("regression eval needs at least one sequence");
  const std::string prop = resolve_property(vocab, property);
  std::vector<double> preds, golds;
  preds.reserve(test.size());
  golds.reserve(test.size());
  for (const TokenizedSequence& seq : test) {
    golds.push_back(property_value_of(seq, vocab, prop));
    const PropertyPrediction pred =
        predict_property(params, tb, vocab, mask_property_block(seq, prop));
    preds.push_back(pred.values.at(prop).value());
  }
  RegressionResult out;
  out.rmse = rt::rmse(preds, golds);
  out.mae = rt::mae(preds, golds);
  out.pcc = rt::pcc(preds, golds);
  out.r2 = rt::r2(preds, golds);
  out.spearman = rt::spearman(preds, golds);
  out.n = static_cast<int>(test.size());
  out.golds = std::move(golds);
  out.preds = std::move(preds);
  return out;
}

RegressionResult knn_eval(const Dataset& train, const Dataset& test, const std::string& property,
                          int k, KnnDistance distance) {
  if (train.empty()) throw DataError("knn eval needs at least one training example");
  if (test.empty()) throw DataError("knn eval needs at least one query");
  auto to_tokens = [](const Example& ex) {
    std::vector<Token> out;
    out.reserve(ex.tokens.size());
    for (const std::string& t : ex.tokens) out.push_back(Token::text_sym(t));
    return out;
  };
  std::vector<std::vector<Token>> train_toks, test_toks;
  std::vector<double> labels, golds;
  for (const Example& ex : train) {
    auto it = ex.props.find(property);
    if (it == ex.props.end()) throw DataError("training example lacks property " + property);
    train_toks.push_back(to_tokens(ex));
    labels.push_back(it->second);
  }
  for (const Example& ex : test) {
    auto it = ex.props.find(property);
    if (it == ex.props.end()) throw DataError("test example lacks property " + property);
    test_toks.push_back(to_tokens(ex));
    golds.push_back(it->second);
  }
  const std::vector<double> preds = knn_baseline(train_toks, labels, test_toks, k, distance);
  RegressionResult out;
  out.rmse = rt::rmse(preds, golds);
  out.mae = rt::mae(preds, golds);
  out.pcc = rt::pcc(preds, golds);
  out.r2 = rt::r2(preds, golds);
  out.spearman = rt::spearman(preds, golds);
  out.n = static_cast<int>(test.size());
  out.golds = std::move(golds);
  out.preds = preds;
  return out;
}

void SweepConfig::validate() const {
  if (n_primers < 1) throw ConfigError("n_primers must be >= 1");
  if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0))
    throw ConfigError("mask_fraction must lie in [0, 1]");
  if (max_span < 1) throw ConfigError("max_span must be >= 1");
  if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
}

MetricsReport SweepResult::report() const {
  MetricsReport r;
  r.spearman_rho = mean_rho;
  r.zero_var_fraction = zero_var_fraction;
  r.novelty_fraction = novelty_fraction;
  return r;
}

std::vector<double> equidistant_primers(int n, int d) {
  if (n < 1) throw ConfigError("n_primers must be >= 1");
  std::vector<double> primers(static_cast<size_t>(n), 0.0);
  for (int i = 1; i < n; ++i)
    primers[static_cast<size_t>(i)] =
        normalize_value(static_cast<double>(i) / (n - 1), NormRange{0, 1}, d);
  return primers;
}

template <class S>
SweepResult primer_sweep(const ParamsT<S>& params, const TablesT<S>& tb, const Vocabulary& vocab,
                         const std::vector<TokenizedSequence>& seeds,
                         const std::vector<TokenizedSequence>& train,
                         const PropertyOracle& oracle, const SweepConfig& cfg) {
  cfg.validate();
  if (seeds.empty()) throw DataError("primer sweep needs at least one seed sequence");
  if (!oracle) throw ConfigError("primer sweep needs a property oracle");
  const std::string prop = resolve_property(vocab, cfg.property);
  const std::vector<double> primers =
      equidistant_primers(cfg.n_primers, vocab.property(prop).frac_digits);

  std::unordered_set<std::string> train_keys;
  for (const TokenizedSequence& t : train) train_keys.insert(text_key(t));

  Rng rng = make_rng(derive_seed(cfg.seed, "sweep"));
  SweepResult out;
  std::set<std::string> all_gens;
  size_t novel = 0;
  for (const TokenizedSequence& seed : seeds) {
    SeedSweep row;
    std::unordered_set<std::string> seen;
    for (double pv : primers) {
      const MaskPlan plan =
          sample_nonempty_mask_plan(seed.l(), cfg.mask_fraction, cfg.max_span, rng);
      const DecodeResult dec = generate_conditional(params, tb, vocab, seed, Primer{prop, pv},
                                                    plan, cfg.beam_width);
      const TokenizedSequence& cand = dec.sequences.front().first;
      if (!seen.insert(full_key(cand)).second) continue;  // dedupe before property evaluation
      row.primers.push_back(pv);
      row.realized.push_back(oracle(cand));
      // novelty compares the generated text against the training texts
      if (all_gens.insert(text_key(cand)).second && !train_keys.count(text_key(cand))) ++novel;
    }
    row.rho = spearman(row.primers, row.realized);
    row.zero_var = exactly_constant(row.realized);
    out.seeds.push_back(std::move(row));
  }

  double rho_sum = 0.0;
  int rho_n = 0, zv = 0;
  for (const SeedSweep& s : out.seeds) {
    if (s.rho.degenerate) {
      ++out.degenerate;
    } else {
      rho_sum += s.rho.value;
      ++rho_n;
    }
    zv += s.zero_var;
  }
  out.mean_rho = rho_n > 0 ? rho_sum / rho_n : 0.0;
  out.zero_var_fraction = static_cast<double>(zv) / static_cast<double>(out.seeds.size());
  out.novelty_fraction =
      all_gens.empty() ? 1.0 : static_cast<double>(novel) / static_cast<double>(all_gens.size());
  return out;
}

void write_sweep_csv(const SweepResult& sweep, std::ostream& os) {
  os << "seed,primer,realized\n";
  for (size_t s = 0; s < sweep.seeds.size(); ++s) {
    const SeedSweep& row = sweep.seeds[s];
    for (size_t i = 0; i < row.primers.size(); ++i)
      os << s << ',' << nlohmann::json(row.primers[i]).dump() << ','
         << nlohmann::json(row.realized[i]).dump() << '\n';
  }
}

MetricsReport ReconstructionResult::report() const {
  MetricsReport r;
  r.topk_accuracy = topk_accuracy;
  r.mean_similarity = mean_best_similarity;
  return r;
}

template <class S>
ReconstructionResult reconstruction_eval(const ParamsT<S>& params, const TablesT<S>& tb,
                                         const Vocabulary& vocab, const Dataset& dataset,
                                         const ReconstructionConfig& cfg) {
  if (dataset.empty()) throw DataError("reconstruction eval needs at least one example");
  if (cfg.top_k < 1) throw ConfigError("top_k must be >= 1");
  int hits = 0;
  double sim_sum = 0.0;
  for (const Example& ex : dataset) {
    const auto seg = checked_segment(ex, cfg.segment);
    const TokenizedSequence seq =
        cfg.with_property ? encode_sequence(ex.props, ex.tokens, vocab)
                          : encode_sequence({}, ex.tokens, vocab);
    TokenizedSequence masked = seq;
    for (int i = seg.first; i < seg.second; ++i)
      masked.text[static_cast<size_t>(i)] = Token::mask();
    const DecodeResult dec = beam_fill(params, tb, vocab, masked, cfg.top_k);

    const std::vector<Token> truth = text_slice(seq, seg);
    bool hit = false;
    double best = 0.0;
    for (const auto& [cand, score] : dec.sequences) {
      const std::vector<Token> got = text_slice(cand, seg);
      hit = hit || got == truth;
      best = std::max(best, token_tanimoto(got, truth));
    }
    hits += hit;
    sim_sum += best;
  }
  ReconstructionResult out;
  out.n = static_cast<int>(dataset.size());
  out.topk_accuracy = static_cast<double>(hits) / out.n;
  out.mean_best_similarity = sim_sum / out.n;
  return out;
}

void DecorationConfig::validate() const {
  if (boost < 0) throw ConfigError("boost must be >= 0");
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
}

MetricsReport DecorationResult::report() const {
  MetricsReport r;
  r.success_rate = success_rate;
  r.mean_improvement = mean_improvement;
  return r;
}

template <class S>
DecorationResult decoration_eval(const ParamsT<S>& params, const TablesT<S>& tb,
                                 const Vocabulary& vocab, const Dataset& dataset,
                                 const Dataset& train, const PropertyOracle& oracle,
                                 const DecorationConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw DataError("decoration eval needs at least one example");
  if (!oracle) throw ConfigError("decoration eval needs a property oracle");
  const std::string prop = resolve_property(vocab, cfg.property);

  std::unordered_set<std::string> train_segments;
  for (const Example& ex : train)
    train_segments.insert(segment_key(ex.tokens, checked_segment(ex, cfg.segment)));

  int successes = 0;
  double improvement_sum = 0.0;
  for (const Example& ex : dataset) {
    const auto seg = checked_segment(ex, cfg.segment);
    auto it = ex.props.find(prop);
    if (it == ex.props.end()) throw DataError("example lacks property " + prop);
    const TokenizedSequence seq = encode_sequence(ex.props, ex.tokens, vocab);
    const double seed_value = oracle(seq);
    const double primer = std::min(1.0, it->second + cfg.boost);
    const DecodeResult dec = generate_conditional(params, tb, vocab, seq, Primer{prop, primer},
                                                  segment_plan(seq.l(), seg), cfg.top_k);
    double best = seed_value;
    bool any = false;
    for (const auto& [cand, score] : dec.sequences) {
      std::vector<std::string> cand_tokens;
      for (const Token& t : cand.text) cand_tokens.push_back(t.text);
      // trivial solutions that already exist in training data do not count
      if (train_segments.count(segment_key(cand_tokens, seg))) continue;
      any = true;
      best = std::max(best, oracle(cand));
    }
    const double delta = any ? best - seed_value : 0.0;
    successes += delta > 0.0;
    improvement_sum += delta;
  }
  DecorationResult out;
  out.n = static_cast<int>(dataset.size());
  out.success_rate = static_cast<double>(successes) / out.n;
  out.mean_improvement = improvement_sum / out.n;
  return out;
}

void ConstrainedOptConfig::validate() const {
  if (pool_size < 1) throw ConfigError("pool_size must be >= 1");
  if (delta < 0 || delta > 1) throw ConfigError("delta must lie in [0, 1]");
  if (fractions.empty() || spans.empty()) throw ConfigError("fraction/span grid must be nonempty");
  for (double f : fractions)
    if (f < 0 || f > 1) throw ConfigError("fractions must lie in [0, 1]");
  for (int s : spans)
    if (s < 1) throw ConfigError("spans must be >= 1");
  if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
}

MetricsReport ConstrainedOptResult::report() const {
  MetricsReport r;
  r.success_rate = improvement > 0.0 ? 1.0 : 0.0;
  r.mean_improvement = improvement;
  return r;
}

template <class S>
ConstrainedOptResult constrained_optimization(const ParamsT<S>& params, const TablesT<S>& tb,
                                              const Vocabulary& vocab,
                                              const TokenizedSequence& seed,
                                              const ConstrainedOptConfig& cfg,
                                              const PropertyOracle& oracle,
                                              const SimilarityFn& similarity) {
  cfg.validate();
  if (!oracle) throw ConfigError("constrained optimization needs a property oracle");
  if (!similarity) throw ConfigError("constrained optimization needs a similarity");
  const std::string prop = resolve_property(vocab, cfg.property);

  ConstrainedOptResult out;
  out.best = seed;
  out.seed_property = oracle(seed);
  out.best_property = out.seed_property;

  // the same seed prompted pool_size times, cycling the fraction/span grid
  Rng rng = make_rng(derive_seed(cfg.seed, "propopt"));
  const size_t g = cfg.fractions.size() * cfg.spans.size();
  bool found = false;
  for (int i = 0; i < cfg.pool_size; ++i) {
    const size_t cell = static_cast<size_t>(i) % g;
    const double fraction = cfg.fractions[cell / cfg.spans.size()];
    const int span = cfg.spans[cell % cfg.spans.size()];
    const MaskPlan plan = sample_nonempty_mask_plan(seed.l(), fraction, span, rng);
    const DecodeResult dec =
        generate_conditional(params, tb, vocab, seed, Primer{prop, cfg.primer}, plan,
                             cfg.beam_width);
    const TokenizedSequence& cand = dec.sequences.front().first;
    if (similarity(seed, cand) < cfg.delta) continue;
    ++out.qualified;
    const double value = oracle(cand);
    if (!found || value > out.best_property) {
      found = true;
      out.best = cand;
      out.best_property = value;
    }
  }
  out.improvement = found ? out.best_property - out.seed_property : 0.0;
  return out;
}

#define RT_INSTANTIATE_PROTOCOLS(S)                                                            \
  template PropertyOracle self_prediction_oracle<S>(const ParamsT<S>&, const TablesT<S>&,      \
                                                    const Vocabulary&, const std::string&);    \
  template RegressionResult regression_eval<S>(const ParamsT<S>&, const TablesT<S>&,          \
                                               const Vocabulary&,                             \
                                               const std::vector<TokenizedSequence>&,         \
                                               const std::string&);                           \
  template SweepResult primer_sweep<S>(const ParamsT<S>&, const TablesT<S>&, const Vocabulary&, \
                                       const std::vector<TokenizedSequence>&,                 \
                                       const std::vector<TokenizedSequence>&,                 \
                                       const PropertyOracle&, const SweepConfig&);            \
  template ReconstructionResult reconstruction_eval<S>(const ParamsT<S>&, const TablesT<S>&,  \
                                                       const Vocabulary&, const Dataset&,     \
                                                       const ReconstructionConfig&);          \
  template DecorationResult decoration_eval<S>(const ParamsT<S>&, const TablesT<S>&,          \
                                               const Vocabulary&, const Dataset&,             \
                                               const Dataset&, const PropertyOracle&,         \
                                               const DecorationConfig&);                      \
  template ConstrainedOptResult constrained_optimization<S>(                                  \
      const ParamsT<S>&, const TablesT<S>&, const Vocabulary&, const TokenizedSequence&,      \
      const ConstrainedOptConfig&, const PropertyOracle&, const SimilarityFn&);

RT_INSTANTIATE_PROTOCOLS(float)
RT_INSTANTIATE_PROTOCOLS(double)
#undef RT_INSTANTIATE_PROTOCOLS

}  // namespace rt
