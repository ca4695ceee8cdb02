#include "rt/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "rt/errors.hpp"

namespace rt {

double SlotDistribution::entropy() const {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i)
    if (probs[i] > 0.0) h -= probs[i] * std::log(probs[i]);
  return h;
}

namespace {

Eigen::VectorXd log_softmax(const Eigen::VectorXd& x) {
  const double m = x.maxCoeff();
  const double lse = m + std::log((x.array() - m).exp().sum());
  return x.array() - lse;
}

}  // namespace

std::vector<BeamHyp> beam_over_slots(const SlotScorer& scorer, const std::vector<int>& ids,
                                     const std::vector<int>& slot_positions,
                                     const std::vector<std::vector<int>>& candidates, int width) {
  if (width < 1) throw ConfigError("beam width must be >= 1");
  if (candidates.size() != slot_positions.size())
    throw ConfigError("one candidate set per slot required");
  if (slot_positions.empty()) return {BeamHyp{ids, 0.0}};
  for (size_t s = 0; s < slot_positions.size(); ++s) {
    if (candidates[s].empty()) throw ConfigError("empty candidate set for a slot");
    const int pos = slot_positions[s];
    if (pos < 0 || pos >= static_cast<int>(ids.size())) throw ConfigError("slot out of range");
  }

  std::vector<BeamHyp> beams{BeamHyp{ids, 0.0}};
  for (size_t s = 0; s < slot_positions.size(); ++s) {
    const int pos = slot_positions[s];
    std::vector<BeamHyp> expanded;
    expanded.reserve(beams.size() * candidates[s].size());
    for (const BeamHyp& b : beams) {
      const Eigen::VectorXd logp = scorer(b.ids, static_cast<int>(s));
      for (int cand : candidates[s]) {
        BeamHyp nb = b;
        nb.ids[pos] = cand;
        nb.score += logp[cand];
        expanded.push_back(std::move(nb));
      }
    }
    std::sort(expanded.begin(), expanded.end(), [](const BeamHyp& a, const BeamHyp& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.ids < b.ids;
    });
    if (static_cast<int>(expanded.size()) > width) expanded.resize(width);
    beams = std::move(expanded);
  }
  return beams;
}

FactorizationOrder decode_order(int T, const std::vector<int>& slot_positions) {
  std::vector<uint8_t> is_slot(static_cast<size_t>(T), 0);
  for (int p : slot_positions) is_slot[p] = 1;
  FactorizationOrder order;
  order.z.reserve(static_cast<size_t>(T));
  for (int i = 0; i < T; ++i)
    if (!is_slot[i]) order.z.push_back(i);
  order.c = static_cast<int>(order.z.size());
  for (int p : slot_positions) order.z.push_back(p);
  return order;
}

template <class S>
SlotScorer model_scorer(const ParamsT<S>& p, const TablesT<S>& tb, const FactorizationOrder& order) {
  auto masks = std::make_shared<AttentionMasks>(build_attention_masks(order));
  auto targets = std::make_shared<std::vector<int>>(order.targets());
  return [&p, &tb, masks, targets](const std::vector<int>& ids, int slot_index) {
    TraceT<S> trace;
    forward(p, tb, ids, *masks, *targets, trace);
    Eigen::VectorXd row = trace.logits.row(slot_index).transpose().template cast<double>();
    return log_softmax(row);
  };
}

template SlotScorer model_scorer<float>(const ParamsT<float>&, const TablesT<float>&,
                                        const FactorizationOrder&);
template SlotScorer model_scorer<double>(const ParamsT<double>&, const TablesT<double>&,
                                         const FactorizationOrder&);

namespace {

// decimal places of one property slot run, most significant first; -1000 marks the dot
std::vector<int> template_places(const PropertySchema& schema) {
  if (schema.sign_allowed)
    throw ConfigError("constrained property decoding requires an unsigned schema: " + schema.name);
  std::vector<int> places;
  for (int d = 0; d < schema.int_digits; ++d) places.push_back(schema.int_digits - 1 - d);
  if (schema.frac_digits > 0) {
    places.push_back(-1000);
    for (int d = 0; d < schema.frac_digits; ++d) places.push_back(-(d + 1));
  }
  return places;
}

}  // namespace

template <class S>
PropertyPrediction predict_property(const ParamsT<S>& p, const TablesT<S>& tb,
                                    const Vocabulary& vocab, const TokenizedSequence& seq) {
  const std::vector<PropertyBlock> blocks = scan_property_blocks(seq);
  std::vector<PropertyBlock> queried;
  for (const auto& b : blocks)
    for (int i = b.first; i < b.last; ++i)
      if (seq.prop[i].kind == TokenKind::Mask) {
        queried.push_back(b);
        break;
      }
  if (queried.empty()) throw NoMaskedNumerals("no masked numeral slots to predict");

  std::vector<int> slots;
  std::vector<std::vector<int>> candidates;
  for (const auto& b : queried) {
    const PropertySchema& schema = vocab.property(b.name);
    const std::vector<int> places = template_places(schema);
    if (static_cast<int>(places.size()) != b.last - b.first)
      throw MalformedNumeral("property run of " + b.name + " does not match its schema width");
    for (size_t j = 0; j < places.size(); ++j) {
      slots.push_back(b.first + static_cast<int>(j));
      if (places[j] == -1000) {
        candidates.push_back({vocab.dot_id()});
      } else {
        std::vector<int> cs;
        for (int v = 0; v <= 9; ++v) cs.push_back(vocab.numeric_id(v, places[j]));
        candidates.push_back(std::move(cs));
      }
    }
  }

  std::vector<int> ids = seq.ids(vocab);
  for (int pos : slots) ids[pos] = vocab.mask_id();
  const FactorizationOrder order = decode_order(seq.T(), slots);
  const AttentionMasks masks = build_attention_masks(order);
  const std::vector<int> targets = order.targets();

  PropertyPrediction out;
  for (size_t s = 0; s < slots.size(); ++s) {
    TraceT<S> trace;
    forward(p, tb, ids, masks, targets, trace);
    const Eigen::VectorXd row = trace.logits.row(static_cast<Eigen::Index>(s))
                                    .transpose()
                                    .template cast<double>();
    // argmax over the candidate set; candidates ascend by id, so the scan
    // breaks ties toward the lowest id
    int best = candidates[s][0];
    for (int cand : candidates[s])
      if (row[cand] > row[best]) best = cand;
    ids[slots[s]] = best;

    Eigen::VectorXd sub(static_cast<Eigen::Index>(candidates[s].size()));
    for (size_t j = 0; j < candidates[s].size(); ++j) sub[static_cast<Eigen::Index>(j)] = row[candidates[s][j]];
    sub = log_softmax(sub).array().exp();
    out.slots.push_back(SlotDistribution{slots[s], candidates[s], std::move(sub)});
  }

  for (const auto& b : queried) {
    std::vector<Token> run;
    for (int i = b.first; i < b.last; ++i) run.push_back(vocab.token(ids[i]));
    Decimal dec = detokenize_number(run);
    if (out.values.empty()) {
      out.name = b.name;
      out.value = dec;
    }
    out.values.emplace(b.name, dec);
  }
  double h = 0.0;
  for (const auto& sd : out.slots) h += sd.entropy();
  out.mean_entropy = out.slots.empty() ? 0.0 : h / static_cast<double>(out.slots.size());
  return out;
}

template PropertyPrediction predict_property<float>(const ParamsT<float>&, const TablesT<float>&,
                                                    const Vocabulary&, const TokenizedSequence&);
template PropertyPrediction predict_property<double>(const ParamsT<double>&, const TablesT<double>&,
                                                     const Vocabulary&, const TokenizedSequence&);

template <class S>
DecodeResult beam_fill(const ParamsT<S>& p, const TablesT<S>& tb, const Vocabulary& vocab,
                       const TokenizedSequence& seq, int width) {
  if (width < 1) throw ConfigError("beam width must be >= 1");
  std::vector<int> slots;
  for (int i = seq.k(); i < seq.T(); ++i)
    if (seq.at(i).kind == TokenKind::Mask) slots.push_back(i);

  DecodeResult out;
  if (slots.empty()) {
    out.sequences.emplace_back(seq, 0.0);
    return out;
  }
  const std::vector<std::vector<int>> candidates(slots.size(), vocab.text_ids());
  const FactorizationOrder order = decode_order(seq.T(), slots);
  const SlotScorer scorer = model_scorer(p, tb, order);
  const std::vector<BeamHyp> beams =
      beam_over_slots(scorer, seq.ids(vocab), slots, candidates, width);
  for (const BeamHyp& b : beams)
    out.sequences.emplace_back(sequence_from_ids(b.ids, vocab), b.score);
  return out;
}

template DecodeResult beam_fill<float>(const ParamsT<float>&, const TablesT<float>&,
                                       const Vocabulary&, const TokenizedSequence&, int);
template DecodeResult beam_fill<double>(const ParamsT<double>&, const TablesT<double>&,
                                        const Vocabulary&, const TokenizedSequence&, int);

template <class S>
DecodeResult generate_conditional(const ParamsT<S>& p, const TablesT<S>& tb,
                                  const Vocabulary& vocab, const TokenizedSequence& seed,
                                  const Primer& primer, const MaskPlan& plan, int width) {
  if (static_cast<int>(plan.m.size()) != seed.l())
    throw ConfigError("mask plan length does not match the text length");
  if (plan.count() == 0) throw EmptyMask("conditional generation requires a nonempty mask plan");

  const PropertySchema& schema = vocab.property(primer.name);
  TokenizedSequence work = seed;
  bool injected = false;
  for (const auto& b : scan_property_blocks(work)) {
    if (b.name != primer.name) continue;
    const std::vector<Token> run = render_property_value(schema, primer.value);
    if (static_cast<int>(run.size()) != b.last - b.first)
      throw MalformedNumeral("property run of " + b.name + " does not match its schema width");
    for (size_t j = 0; j < run.size(); ++j) work.prop[b.first + static_cast<int>(j)] = run[j];
    injected = true;
  }
  if (!injected) throw NoPropertyBlock("sequence has no block for property " + primer.name);

  for (int i = 0; i < seed.l(); ++i)
    if (plan.m[i]) work.text[i] = Token::mask();
  return beam_fill(p, tb, vocab, work, width);
}

template DecodeResult generate_conditional<float>(const ParamsT<float>&, const TablesT<float>&,
                                                  const Vocabulary&, const TokenizedSequence&,
                                                  const Primer&, const MaskPlan&, int);
template DecodeResult generate_conditional<double>(const ParamsT<double>&, const TablesT<double>&,
                                                   const Vocabulary&, const TokenizedSequence&,
                                                   const Primer&, const MaskPlan&, int);

}  // namespace rt
