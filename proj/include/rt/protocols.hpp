#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rt/data.hpp"
#include "rt/decoding.hpp"
#include "rt/metrics.hpp"
#include "rt/model.hpp"

namespace rt {

// realized property of one (possibly generated) sequence; either a synthetic
// oracle or the model's own prediction
using PropertyOracle = std::function<double(const TokenizedSequence&)>;
using SimilarityFn = std::function<double(const TokenizedSequence&, const TokenizedSequence&)>;

// every protocol fills only its own fields; serialization skips unset ones
struct MetricsReport {
  std::optional<double> rmse, mae, pcc, r2, spearman_rho;
  std::optional<double> zero_var_fraction, topk_accuracy, mean_similarity;
  std::optional<double> success_rate, mean_improvement, novelty_fraction;

  std::string to_json() const;
};

// copy with the named property's numerals masked, ready for predict_property
TokenizedSequence mask_property_block(const TokenizedSequence& seq, const std::string& name);

// the value rendered inside the named property block
double property_value_of(const TokenizedSequence& seq, const Vocabulary& vocab,
                         const std::string& name);

// oracle that re-reads a sequence's property with the model itself
template <class S>
PropertyOracle self_prediction_oracle(const ParamsT<S>& params, const TablesT<S>& tb,
                                      const Vocabulary& vocab, const std::string& property);

// default similarity: set tanimoto over the text parts
double text_similarity(const TokenizedSequence& a, const TokenizedSequence& b);

struct RegressionResult {
  double rmse = 0.0, mae = 0.0;
  Corr pcc, r2, spearman;
  int n = 0;
  std::vector<double> golds, preds;  // aligned per-example pairs, plot-ready
  MetricsReport report() const;
};

// predicts the masked property per sequence and scores against the encoded one
template <class S>
RegressionResult regression_eval(const ParamsT<S>& params, const TablesT<S>& tb,
                                 const Vocabulary& vocab,
                                 const std::vector<TokenizedSequence>& test,
                                 const std::string& property);

// knn over token edit or n-gram distance as the model-free reference point
RegressionResult knn_eval(const Dataset& train, const Dataset& test, const std::string& property,
                          int k, KnnDistance distance);

// n equidistant values over [0,1], rounded to d renderable decimals
std::vector<double> equidistant_primers(int n, int d);

struct SweepConfig {
  int n_primers = 10;
  double mask_fraction = 0.4;
  int max_span = 5;
  int beam_width = 5;
  uint64_t seed = 0x5eed;
  std::string property;  // empty -> the schema's only property

  void validate() const;
};

// one seed sequence swept over equidistant primers; duplicate full sequences
// (primer block included) are dropped before property evaluation
struct SeedSweep {
  std::vector<double> primers;   // kept rows after dedup
  std::vector<double> realized;  // oracle values for the kept rows
  Corr rho;                      // spearman(primers, realized)
  bool zero_var = false;         // realized values all exactly equal
};

struct SweepResult {
  std::vector<SeedSweep> seeds;
  double mean_rho = 0.0;  // over non-degenerate seeds
  int degenerate = 0;     // seeds excluded from mean_rho
  double zero_var_fraction = 0.0;
  double novelty_fraction = 0.0;  // unique generations absent from train
  MetricsReport report() const;
};

// equidistant primers at schema precision; one generation per primer per seed
template <class S>
SweepResult primer_sweep(const ParamsT<S>& params, const TablesT<S>& tb, const Vocabulary& vocab,
                         const std::vector<TokenizedSequence>& seeds,
                         const std::vector<TokenizedSequence>& train,
                         const PropertyOracle& oracle, const SweepConfig& cfg);

// one row per kept generation: seed index, primer, realized property
void write_sweep_csv(const SweepResult& sweep, std::ostream& os);

struct ReconstructionConfig {
  int segment = 0;
  int top_k = 3;
  bool with_property = true;  // false drops the property block from the context
};

struct ReconstructionResult {
  double topk_accuracy = 0.0;       // any of top_k reproduces the segment exactly
  double mean_best_similarity = 0.0;  // best segment tanimoto per example
  int n = 0;
  MetricsReport report() const;
};

// masks one whole segment per example and beam-decodes it back
template <class S>
ReconstructionResult reconstruction_eval(const ParamsT<S>& params, const TablesT<S>& tb,
                                         const Vocabulary& vocab, const Dataset& dataset,
                                         const ReconstructionConfig& cfg);

struct DecorationConfig {
  int segment = 0;
  double boost = 0.2;  // primer = min(1, seed value + boost)
  int top_k = 5;
  std::string property;  // empty -> the schema's only property

  void validate() const;
};

struct DecorationResult {
  double success_rate = 0.0;      // strict improvement among qualified candidates
  double mean_improvement = 0.0;  // best qualified delta, 0 when none qualify
  int n = 0;
  MetricsReport report() const;
};

// primes each example above its own property, regenerates the segment, and
// drops candidates whose segment already appears in the training data
template <class S>
DecorationResult decoration_eval(const ParamsT<S>& params, const TablesT<S>& tb,
                                 const Vocabulary& vocab, const Dataset& dataset,
                                 const Dataset& train, const PropertyOracle& oracle,
                                 const DecorationConfig& cfg);

struct ConstrainedOptConfig {
  int pool_size = 80;
  double delta = 0.5;   // similarity threshold in [0,1]
  double primer = 1.0;  // target property value
  std::vector<double> fractions = {0.2, 0.4, 0.6};
  std::vector<int> spans = {1, 3, 5};
  int beam_width = 5;
  uint64_t seed = 0x5eed;
  std::string property;  // empty -> the schema's only property

  void validate() const;
};

struct ConstrainedOptResult {
  TokenizedSequence best;       // highest-property qualified candidate, else the seed
  double seed_property = 0.0;
  double best_property = 0.0;
  double improvement = 0.0;  // 0 whenever nothing qualifies
  int qualified = 0;
  MetricsReport report() const;
};

// pools generations over the fraction/span grid from one seed and keeps the
// best candidate at least delta-similar to it
template <class S>
ConstrainedOptResult constrained_optimization(const ParamsT<S>& params, const TablesT<S>& tb,
                                              const Vocabulary& vocab,
                                              const TokenizedSequence& seed,
                                              const ConstrainedOptConfig& cfg,
                                              const PropertyOracle& oracle,
                                              const SimilarityFn& similarity);

}  // namespace rt
