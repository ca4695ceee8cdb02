#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rt/rng.hpp"
#include "rt/tokens.hpp"

namespace rt {

// one record: pre-tokenized text, optional half-open segment spans, labels
struct Example {
  std::vector<std::string> tokens;
  std::vector<std::pair<int, int>> segments;
  std::map<std::string, double> props;

  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

enum class DataFormat { JSONL, CSV };

Dataset load_jsonl(std::istream& is);
Dataset load_csv(std::istream& is);
void save_jsonl(const Dataset& ds, std::ostream& os);
void save_csv(const Dataset& ds, std::ostream& os);
Dataset load_dataset(const std::string& path, DataFormat fmt);
void save_dataset(const Dataset& ds, const std::string& path, DataFormat fmt);

// 64-bit hash of the canonical jsonl serialization
uint64_t dataset_hash(const Dataset& ds);

struct NormRange {
  double lo = 0.0;
  double hi = 1.0;
};

// affine map of [lo,hi] onto [0,1], clipped, rounded to d decimals
double normalize_value(double x, NormRange r, int d = 3);
double denormalize_value(double y, NormRange r);
// normalizes one property in place across the dataset
Dataset normalize_property(const Dataset& ds, const std::string& prop, NormRange r, int d = 3);

enum class SynthKind { FractionOfA, WeightedSum, SegmentedYield };

const char* to_string(SynthKind k);
SynthKind synth_kind_from_string(const std::string& s);
// the label column each generator writes
const char* synth_property_name(SynthKind k);

// three near-equal half-open spans covering [0,len)
std::vector<std::pair<int, int>> default_segments(int len);

// the pure label function; segments are required only for SEGMENTED_YIELD
double synth_property(SynthKind kind, const std::vector<std::string>& tokens,
                      const std::vector<std::pair<int, int>>& segments, int alphabet);
double synth_property_of(SynthKind kind, const TokenizedSequence& seq,
                         const std::vector<std::pair<int, int>>& segments, int alphabet);

// labels are recomputed from the emitted tokens, so every record satisfies its
// own oracle; sampling is biased to spread labels over [0,1]
Dataset synth_generate(SynthKind kind, int n, int len, int alphabet, uint64_t seed);

struct SplitResult {
  Dataset train, valid, test;
};

// seeded shuffle + two cuts; disjoint and exhaustive
SplitResult split_dataset(const Dataset& ds, double r_train, double r_valid, double r_test,
                          uint64_t seed);

// adds clipped gaussian noise to labels whose exact d-decimal value holds more
// than threshold of the dataset; non-spiked labels pass through untouched
Dataset jitter_labels(const Dataset& ds, const std::string& prop, double sigma, double threshold,
                      int d, uint64_t seed);

// schema with one property column per label name (1 int digit, d fraction
// digits, unsigned) over the sorted unique text symbols
Vocabulary build_vocabulary(const Dataset& ds, int d = 3);

std::vector<TokenizedSequence> encode_dataset(const Dataset& ds, const Vocabulary& vocab);

// sequence rewriter hook for augmentation (identity-preserving rewrites such
// as synonym alphabets are the caller's responsibility)
using Rewriter =
    std::function<std::vector<std::string>(const std::vector<std::string>&, Rng& rng)>;

// originals first, then factor-1 rewrites of each example with labels copied
Dataset augment(const Dataset& ds, int factor, const Rewriter& rewrite, uint64_t seed);

}  // namespace rt
