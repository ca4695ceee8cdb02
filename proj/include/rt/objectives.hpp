#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "rt/masking.hpp"
#include "rt/model.hpp"
#include "rt/rng.hpp"
#include "rt/tokens.hpp"

namespace rt {

enum class ObjectiveMode { PLM, ALTERNATING };
enum class ObjectiveKind { PLM, PROPERTY, CGEN };

const char* to_string(ObjectiveMode m);
const char* to_string(ObjectiveKind k);
ObjectiveMode objective_mode_from_string(const std::string& s);

struct TrainerConfig {
  ObjectiveMode mode = ObjectiveMode::ALTERNATING;
  double alpha = 0.0;          // self-consistency weight on the decoded sequence
  int alternation_period = 50;
  double mask_fraction = 0.4;
  int max_span = 5;
  int batch_size = 8;
  long long total_steps = 1000;
  int eval_every = 0;        // 0 = never call the eval hook
  int checkpoint_every = 0;  // 0 = no periodic checkpoints
  uint64_t seed = 0x5eed;
  AdamConfig adam;

  void validate() const;
};

// every step function runs one optimizer update over the batch; the loss is
// the batch mean of per-example target-mean nll
struct StepResult {
  double loss = 0.0;       // full objective
  double loss_gen = 0.0;   // generation term (equals loss for plm/property)
  double loss_sc = 0.0;    // alpha-weighted self-consistency term
  double grad_norm = 0.0;  // pre-clip global gradient norm
};

using Batch = std::vector<const TokenizedSequence*>;

template <class S>
StepResult plm_step(ParamsT<S>& params, AdamStateT<S>& opt, const TablesT<S>& tb,
                    const Vocabulary& vocab, const Batch& batch, const TrainerConfig& tc, Rng& rng);

// masks every numeral slot; the only loss ever applied to property values
// (token cross-entropy — no regression head anywhere)
template <class S>
StepResult property_step(ParamsT<S>& params, AdamStateT<S>& opt, const TablesT<S>& tb,
                         const Vocabulary& vocab, const Batch& batch, const TrainerConfig& tc,
                         Rng& rng);

// span-masks text with the property fully visible, then adds alpha times the
// property loss on the recombined greedy completion; gradients flow through
// the second pass but never through the argmax token choice
template <class S>
StepResult sc_step(ParamsT<S>& params, AdamStateT<S>& opt, const TablesT<S>& tb,
                   const Vocabulary& vocab, const Batch& batch, const TrainerConfig& tc,
                   double alpha, Rng& rng);

// sc_step with the self-consistency term switched off; identical rng stream
template <class S>
StepResult cgen_step(ParamsT<S>& params, AdamStateT<S>& opt, const TablesT<S>& tb,
                     const Vocabulary& vocab, const Batch& batch, const TrainerConfig& tc,
                     Rng& rng) {
  return sc_step(params, opt, tb, vocab, batch, tc, 0.0, rng);
}

// floor(step/period) even -> PROPERTY, odd -> CGEN; property phase leads so the
// self-consistency term always scores with a warmed property head
ObjectiveKind alternation(long long step, int period);

// x with the plan's masked text slots replaced by fills (ascending position
// order); the property part is untouched
TokenizedSequence recombine(const TokenizedSequence& x, const MaskPlan& plan,
                            const std::vector<Token>& fills);

struct TrainLogEntry {
  long long step = 0;
  ObjectiveKind objective = ObjectiveKind::PLM;
  double loss = 0.0;
};

// single-writer training loop; deterministic under (seed, config, data) because
// every step derives its rng from the absolute step index, which also makes a
// resumed run bit-identical to an uninterrupted one
class Trainer {
 public:
  // return true to stop training early
  using EvalFn = std::function<bool(long long step, const Params& params)>;

  Trainer(const Vocabulary& vocab, const ModelConfig& mc, const TrainerConfig& tc);
  static Trainer resume(const std::string& ckpt_path, const Vocabulary& vocab,
                        const TrainerConfig& tc);

  // runs until total_steps or until on_eval stops it; one JSONL record
  // {step, objective, loss} per step when log is given
  void run(const std::vector<TokenizedSequence>& data, std::ostream* log = nullptr,
           const EvalFn& on_eval = {}, const std::string& ckpt_path = "");

  const Params& params() const { return params_; }
  const TablesT<float>& tables() const { return tables_; }
  const AdamStateT<float>& opt() const { return opt_; }
  const Vocabulary& vocab() const { return vocab_; }
  long long step() const { return step_; }
  const std::vector<TrainLogEntry>& history() const { return history_; }

  void save(const std::string& path) const;

 private:
  Trainer(const Vocabulary& vocab, const TrainerConfig& tc, Params params,
          AdamStateT<float> opt, long long step);

  Vocabulary vocab_;
  TrainerConfig tc_;
  Params params_;
  TablesT<float> tables_;
  AdamStateT<float> opt_;
  long long step_ = 0;
  std::vector<TrainLogEntry> history_;
};

}  // namespace rt
