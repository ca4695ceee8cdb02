#include "rt/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <ostream>

#include "rt/errors.hpp"

namespace rt {

using ordered_json = nlohmann::ordered_json;

const char* to_string(ObjectiveMode m) {
  return m == ObjectiveMode::PLM ? "PLM" : "ALTERNATING";
}

const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::PLM:
      return "PLM";
    case ObjectiveKind::PROPERTY:
      return "PROPERTY";
    default:
      return "CGEN";
  }
}

ObjectiveMode objective_mode_from_string(const std::string& s) {
  if (s == "PLM" || s == "plm") return ObjectiveMode::PLM;
  if (s == "ALTERNATING" || s == "alternating") return ObjectiveMode::ALTERNATING;
  throw ConfigError("unknown objective mode: " + s);
}

void TrainerConfig::validate() const {
  if (alpha < 0) throw ConfigError("alpha must be >= 0");
  if (alternation_period < 1) throw ConfigError("alternation_period must be >= 1");
  if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0))
    throw ConfigError("mask_fraction must lie in [0, 1]");
  if (max_span < 1) throw ConfigError("max_span must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

ObjectiveKind alternation(long long step, int period) {
  if (period < 1) throw ConfigError("alternation period must be >= 1");
  if (step < 0) throw ConfigError("step must be >= 0");
  return (step / period) % 2 == 0 ? ObjectiveKind::PROPERTY : ObjectiveKind::CGEN;
}

TokenizedSequence recombine(const TokenizedSequence& x, const MaskPlan& plan,
                            const std::vector<Token>& fills) {
  if (static_cast<int>(plan.m.size()) != x.l())
    throw ConfigError("mask plan length does not match the text length");
  if (static_cast<int>(fills.size()) != plan.count())
    throw ConfigError("one fill token per masked position required");
  TokenizedSequence out = x;
  size_t next = 0;
  for (int i = 0; i < x.l(); ++i)
    if (plan.m[i]) out.text[i] = fills[next++];
  return out;
}

namespace {

// forward + nll + backward for one example under one factorization order;
// grads accumulate d(scale * sum of per-target nll)
template <class S>
double example_pass(const ParamsT<S>& params, const TablesT<S>& tb, const std::vector<int>& ids,
                    const FactorizationOrder& order, S scale, ParamsT<S>& grads) {
  const AttentionMasks masks = build_attention_masks(order);
  const std::vector<int> targets = order.targets();
  TraceT<S> trace;
  forward(params, tb, ids, masks, targets, trace);
  std::vector<int> gold;
  gold.reserve(targets.size());
  for (int t : targets) gold.push_back(ids[t]);
  const double loss = static_cast<double>(nll_loss(trace.logits, gold));
  backward(params, tb, trace, gold, scale, grads);
  return loss;
}

template <class S>
void check_batch(const Batch& batch) {
  if (batch.empty()) throw DataError("empty batch");
  for (const TokenizedSequence* ex : batch)
    if (ex == nullptr) throw DataError("null example in batch");
}

}  // namespace

template <class S>
StepResult plm_step(ParamsT<S>& params, AdamStateT<S>& opt, const TablesT<S>& tb,
                    const Vocabulary& vocab, const Batch& batch, const TrainerConfig& tc,
                    Rng& rng) {
  check_batch<S>(batch);
  ParamsT<S> grads = ParamsT<S>::zeros_like(params);
  const double B = static_cast<double>(batch.size());
  StepResult res;
  for (const TokenizedSequence* ex : batch) {
    const FactorizationOrder order = sample_plm_order(ex->T(), tc.mask_fraction, rng);
    const int nt = order.T() - order.c;
    const double loss = example_pass(params, tb, ex->ids(vocab), order,
                                     static_cast<S>(1.0 / (B * nt)), grads);
    res.loss += loss / B;
  }
  res.loss_gen = res.loss;
  res.grad_norm = adam_step(params, grads, opt, tc.adam);
  return res;
}

template <class S>
StepResult property_step(ParamsT<S>& params, AdamStateT<S>& opt, const TablesT<S>& tb,
                         const Vocabulary& vocab, const Batch& batch, const TrainerConfig& tc,
                         Rng& rng) {
  check_batch<S>(batch);
  ParamsT<S> grads = ParamsT<S>::zeros_like(params);
  const double B = static_cast<double>(batch.size());
  StepResult res;
  for (const TokenizedSequence* ex : batch) {
    const FactorizationOrder order = sample_property_order(*ex, rng);
    const int nt = order.T() - order.c;
    const double loss = example_pass(params, tb, ex->ids(vocab), order,
                                     static_cast<S>(1.0 / (B * nt)), grads);
    res.loss += loss / B;
  }
  res.loss_gen = res.loss;
  res.grad_norm = adam_step(params, grads, opt, tc.adam);
  return res;
}

template <class S>
StepResult sc_step(ParamsT<S>& params, AdamStateT<S>& opt, const TablesT<S>& tb,
                   const Vocabulary& vocab, const Batch& batch, const TrainerConfig& tc,
                   double alpha, Rng& rng) {
  check_batch<S>(batch);
  if (alpha < 0) throw ConfigError("alpha must be >= 0");
  ParamsT<S> grads = ParamsT<S>::zeros_like(params);
  const double B = static_cast<double>(batch.size());
  StepResult res;

  // all shared randomness is drawn before any alpha-only draw, so the
  // generation term is the same stream (and the same value) for every alpha
  std::vector<MaskPlan> plans;
  std::vector<FactorizationOrder> orders;
  plans.reserve(batch.size());
  orders.reserve(batch.size());
  for (const TokenizedSequence* ex : batch) {
    plans.push_back(sample_nonempty_mask_plan(ex->l(), tc.mask_fraction, tc.max_span, rng));
    orders.push_back(sample_cgen_order(*ex, plans.back(), rng));
  }

  std::vector<TokenizedSequence> completions;
  if (alpha > 0) completions.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const TokenizedSequence& ex = *batch[i];
    const AttentionMasks masks = build_attention_masks(orders[i]);
    const std::vector<int> targets = orders[i].targets();
    const std::vector<int> ids = ex.ids(vocab);
    TraceT<S> trace;
    forward(params, tb, ids, masks, targets, trace);
    std::vector<int> gold;
    gold.reserve(targets.size());
    for (int t : targets) gold.push_back(ids[t]);
    res.loss_gen += static_cast<double>(nll_loss(trace.logits, gold)) / B;
    backward(params, tb, trace, gold, static_cast<S>(1.0 / (B * targets.size())), grads);

    if (alpha > 0) {
      // teacher-forced greedy fills, restricted to text symbols so the
      // completion re-encodes; the argmax itself carries no gradient
      const std::vector<int>& text_ids = vocab.text_ids();
      std::vector<Token> fills;
      fills.reserve(targets.size());
      for (Eigen::Index r = 0; r < trace.logits.rows(); ++r) {
        int best = text_ids[0];
        for (int c : text_ids)
          if (trace.logits(r, c) > trace.logits(r, best)) best = c;
        fills.push_back(vocab.token(best));
      }
      completions.push_back(recombine(ex, plans[i], fills));
    }
  }

  if (alpha > 0) {
    for (const TokenizedSequence& xhat : completions) {
      const FactorizationOrder order2 = sample_property_order(xhat, rng);
      const int nt2 = order2.T() - order2.c;
      const double sc = example_pass(params, tb, xhat.ids(vocab), order2,
                                     static_cast<S>(alpha / (B * nt2)), grads);
      res.loss_sc += alpha * sc / B;
    }
  }
  res.loss = res.loss_gen + res.loss_sc;
  res.grad_norm = adam_step(params, grads, opt, tc.adam);
  return res;
}

#define RT_INSTANTIATE_STEP(S)                                                              \
  template StepResult plm_step<S>(ParamsT<S>&, AdamStateT<S>&, const TablesT<S>&,           \
                                  const Vocabulary&, const Batch&, const TrainerConfig&,    \
                                  Rng&);                                                    \
  template StepResult property_step<S>(ParamsT<S>&, AdamStateT<S>&, const TablesT<S>&,      \
                                       const Vocabulary&, const Batch&, const TrainerConfig&, \
                                       Rng&);                                               \
  template StepResult sc_step<S>(ParamsT<S>&, AdamStateT<S>&, const TablesT<S>&,            \
                                 const Vocabulary&, const Batch&, const TrainerConfig&,     \
                                 double, Rng&);

RT_INSTANTIATE_STEP(float)
RT_INSTANTIATE_STEP(double)
#undef RT_INSTANTIATE_STEP

Trainer::Trainer(const Vocabulary& vocab, const ModelConfig& mc, const TrainerConfig& tc)
    : vocab_(vocab), tc_(tc), params_(Params::init(mc, derive_seed(tc.seed, "init"))) {
  tc_.validate();
  if (mc.vocab_size != vocab.size()) throw ConfigError("model vocab_size does not match the vocabulary");
  tables_ = build_tables<float>(mc, vocab);
  opt_ = AdamStateT<float>::zeros_like(params_);
}

Trainer::Trainer(const Vocabulary& vocab, const TrainerConfig& tc, Params params,
                 AdamStateT<float> opt, long long step)
    : vocab_(vocab), tc_(tc), params_(std::move(params)), opt_(std::move(opt)), step_(step) {
  tc_.validate();
  tables_ = build_tables<float>(params_.cfg, vocab);
}

Trainer Trainer::resume(const std::string& ckpt_path, const Vocabulary& vocab,
                        const TrainerConfig& tc) {
  CheckpointMeta meta;
  AdamStateT<float> opt;
  Params params = load_checkpoint(ckpt_path, &meta, &opt);
  if (meta.vocab_hash != vocab.hash())
    throw DataError("checkpoint was trained against a different vocabulary");
  return Trainer(vocab, tc, std::move(params), std::move(opt), meta.step);
}

void Trainer::save(const std::string& path) const {
  save_checkpoint(path, params_, CheckpointMeta{step_, vocab_.hash()}, &opt_);
}

void Trainer::run(const std::vector<TokenizedSequence>& data, std::ostream* log,
                  const EvalFn& on_eval, const std::string& ckpt_path) {
  if (data.empty()) throw DataError("cannot train on an empty dataset");
  const int N = static_cast<int>(data.size());
  const int B = std::min<int>(tc_.batch_size, N);
  std::vector<int> pool(static_cast<size_t>(N));

  while (step_ < tc_.total_steps) {
    // the rng depends only on (seed, absolute step), so a resumed run replays
    // the identical stream
    Rng rng = make_rng(splitmix64(derive_seed(tc_.seed, "step") + static_cast<uint64_t>(step_)));

    std::iota(pool.begin(), pool.end(), 0);
    Batch batch;
    batch.reserve(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      std::uniform_int_distribution<int> pick(b, N - 1);
      std::swap(pool[static_cast<size_t>(b)], pool[static_cast<size_t>(pick(rng))]);
      batch.push_back(&data[static_cast<size_t>(pool[static_cast<size_t>(b)])]);
    }

    const ObjectiveKind kind = tc_.mode == ObjectiveMode::PLM
                                   ? ObjectiveKind::PLM
                                   : alternation(step_, tc_.alternation_period);
    StepResult res;
    switch (kind) {
      case ObjectiveKind::PLM:
        res = plm_step(params_, opt_, tables_, vocab_, batch, tc_, rng);
        break;
      case ObjectiveKind::PROPERTY:
        res = property_step(params_, opt_, tables_, vocab_, batch, tc_, rng);
        break;
      case ObjectiveKind::CGEN:
        res = sc_step(params_, opt_, tables_, vocab_, batch, tc_, tc_.alpha, rng);
        break;
    }

    history_.push_back(TrainLogEntry{step_, kind, res.loss});
    if (log) {
      ordered_json line;
      line["step"] = step_;
      line["objective"] = to_string(kind);
      line["loss"] = res.loss;
      (*log) << line.dump() << '\n';
    }
    ++step_;

    if (!ckpt_path.empty() && tc_.checkpoint_every > 0 && step_ % tc_.checkpoint_every == 0)
      save(ckpt_path);
    if (on_eval && tc_.eval_every > 0 && step_ % tc_.eval_every == 0)
      if (on_eval(step_, params_)) break;
  }
}

}  // namespace rt
