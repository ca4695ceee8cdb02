#pragma once

#include <Eigen/Core>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rt/masking.hpp"
#include "rt/model.hpp"
#include "rt/tokenizer.hpp"
#include "rt/tokens.hpp"

namespace rt {

// filled sequences with summed token log-probabilities, best first
struct DecodeResult {
  std::vector<std::pair<TokenizedSequence, double>> sequences;
};

// desired property value injected before conditional generation
struct Primer {
  std::string name;
  double value = 0.0;
};

// renormalized distribution over the candidate set actually decoded from
struct SlotDistribution {
  int position = 0;
  std::vector<int> candidate_ids;  // ascending
  Eigen::VectorXd probs;
  double entropy() const;  // nats
};

struct PropertyPrediction {
  std::string name;  // first decoded block
  Decimal value;     // its value
  std::map<std::string, Decimal> values;  // every decoded block
  std::vector<SlotDistribution> slots;
  double mean_entropy = 0.0;
};

// log-probabilities over the whole vocabulary for slot_positions[slot_index],
// given the current fill state; slots are always scored left to right
using SlotScorer = std::function<Eigen::VectorXd(const std::vector<int>& ids, int slot_index)>;

struct BeamHyp {
  std::vector<int> ids;
  double score = 0.0;
};

// deterministic beam core: no length normalization; ties broken by the
// lexicographically smaller id sequence; returns at most `width` hypotheses,
// best first; zero slots -> the input with score 0
std::vector<BeamHyp> beam_over_slots(const SlotScorer& scorer, const std::vector<int>& ids,
                                     const std::vector<int>& slot_positions,
                                     const std::vector<std::vector<int>>& candidates, int width);

// context positions ascending, then the slots ascending as prediction targets
FactorizationOrder decode_order(int T, const std::vector<int>& slot_positions);

// scorer backed by one forward pass per fill state; order.targets() are the slots
template <class S>
SlotScorer model_scorer(const ParamsT<S>& p, const TablesT<S>& tb, const FactorizationOrder& order);

// greedy constrained decode of every masked numeral slot: candidates at each
// slot are the numeric tokens of that slot's template place (the dot slot is
// forced), so the result always detokenizes
template <class S>
PropertyPrediction predict_property(const ParamsT<S>& p, const TablesT<S>& tb,
                                    const Vocabulary& vocab, const TokenizedSequence& seq);

// beam over the masked text slots; candidates are the text symbols
template <class S>
DecodeResult beam_fill(const ParamsT<S>& p, const TablesT<S>& tb, const Vocabulary& vocab,
                       const TokenizedSequence& seq, int width);

template <class S>
DecodeResult greedy_fill(const ParamsT<S>& p, const TablesT<S>& tb, const Vocabulary& vocab,
                         const TokenizedSequence& seq) {
  return beam_fill(p, tb, vocab, seq, 1);
}

// overwrite the primer property's numerals, mask text per plan, beam-fill
template <class S>
DecodeResult generate_conditional(const ParamsT<S>& p, const TablesT<S>& tb,
                                  const Vocabulary& vocab, const TokenizedSequence& seed,
                                  const Primer& primer, const MaskPlan& plan, int width);

}  // namespace rt
