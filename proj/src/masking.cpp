#include "rt/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rt {

int MaskPlan::count() const {
  int n = 0;
  for (uint8_t x : m) n += x;
  return n;
}

namespace {

void check_fraction(double f) {
  if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("mask fraction must be in [0,1]");
}

}  // namespace

FactorizationOrder sample_plm_order(int T, double mask_fraction, Rng& rng) {
  if (T < 1) throw ConfigError("empty sequence");
  check_fraction(mask_fraction);
  int n_targets = static_cast<int>(std::llround(mask_fraction * T));
  n_targets = std::clamp(n_targets, 1, T);
  FactorizationOrder order;
  order.z.resize(T);
  std::iota(order.z.begin(), order.z.end(), 0);
  std::shuffle(order.z.begin(), order.z.end(), rng);
  order.c = T - n_targets;
  std::sort(order.z.begin() + order.c, order.z.end());
  return order;
}

FactorizationOrder sample_property_order(const TokenizedSequence& seq, Rng& rng) {
  std::vector<int> numerals = seq.numeral_positions();
  if (numerals.empty()) throw NoPropertyBlock("sequence has no property block");
  std::vector<uint8_t> is_target(seq.T(), 0);
  for (int p : numerals) is_target[p] = 1;

  FactorizationOrder order;
  order.z.reserve(seq.T());
  for (int i = seq.k(); i < seq.T(); ++i) order.z.push_back(i);
  std::shuffle(order.z.begin(), order.z.end(), rng);
  for (int i = 0; i < seq.k(); ++i)
    if (!is_target[i]) order.z.push_back(i);
  order.c = static_cast<int>(order.z.size());
  order.z.insert(order.z.end(), numerals.begin(), numerals.end());
  return order;
}

MaskPlan sample_mask_plan(int l, double fraction, int max_span, Rng& rng) {
  if (l < 1) throw ConfigError("empty text");
  if (max_span < 1) throw ConfigError("max_span must be positive");
  check_fraction(fraction);
  MaskPlan plan;
  plan.mask_fraction = fraction;
  plan.max_span = max_span;
  plan.m.assign(l, 0);
  const int budget = std::clamp(static_cast<int>(std::llround(fraction * l)), 0, l);
  if (budget == 0) return plan;

  // most positions maskable with runs <= max_span and single gaps between runs
  const int blocks = l / (max_span + 1);
  const int capacity = blocks * max_span + std::min(l - blocks * (max_span + 1), max_span);

  if (budget > capacity) {
    // run cap infeasible at this fraction: mask the first `budget` positions
    for (int i = 0; i < budget; ++i) plan.m[size_t(i)] = 1;
    return plan;
  }

  // length of the masked run directly left of / right of an index
  auto run_left = [&](int i) {
    int n = 0;
    for (int j = i - 1; j >= 0 && plan.m[size_t(j)]; --j) ++n;
    return n;
  };
  auto run_right = [&](int i) {
    int n = 0;
    for (int j = i; j < l && plan.m[size_t(j)]; ++j) ++n;
    return n;
  };

  // random placement can dead-end (free slots all adjacent to masked runs at the
  // cap) even when the budget is feasible, so retry a few times before the
  // deterministic fallback
  std::vector<int> isolated, merging;
  for (int attempt = 0; attempt < 32; ++attempt) {
    std::fill(plan.m.begin(), plan.m.end(), uint8_t(0));
    int remaining = budget;
    while (remaining > 0) {
      int span = std::uniform_int_distribution<int>(1, std::min(max_span, remaining))(rng);
      bool placed = false;
      for (; span >= 1 && !placed; --span) {
        isolated.clear();
        merging.clear();
        for (int st = 0; st + span <= l; ++st) {
          bool free = true;
          for (int i = st; i < st + span && free; ++i) free = !plan.m[size_t(i)];
          if (!free) continue;
          int merged = run_left(st) + span + run_right(st + span);
          if (merged > max_span) continue;  // joining neighbours would exceed the cap
          (merged == span ? isolated : merging).push_back(st);
        }
        const std::vector<int>& pool = isolated.empty() ? merging : isolated;
        if (pool.empty()) continue;
        int st = pool[std::uniform_int_distribution<size_t>(0, pool.size() - 1)(rng)];
        for (int i = st; i < st + span; ++i) plan.m[size_t(i)] = 1;
        remaining -= span;
        placed = true;
      }
      if (!placed) break;  // dead end, resample from scratch
    }
    if (remaining == 0) return plan;
  }

  // constructive fill: runs of max_span separated by single gaps, last run truncated
  std::fill(plan.m.begin(), plan.m.end(), uint8_t(0));
  int need = budget;
  for (int i = 0; i < l && need > 0;) {
    int run = std::min(max_span, need);
    for (int j = 0; j < run; ++j) plan.m[size_t(i + j)] = 1;
    need -= run;
    i += run + 1;
  }
  return plan;
}

MaskPlan sample_nonempty_mask_plan(int l, double fraction, int max_span, Rng& rng) {
  MaskPlan plan = sample_mask_plan(l, fraction, max_span, rng);
  if (plan.count() == 0) {
    std::uniform_int_distribution<int> pick(0, l - 1);
    plan.m[static_cast<size_t>(pick(rng))] = 1;
  }
  return plan;
}

FactorizationOrder sample_cgen_order(const TokenizedSequence& seq, const MaskPlan& plan, Rng& rng) {
  if (static_cast<int>(plan.m.size()) != seq.l())
    throw Error("mask plan length does not match text length");
  if (plan.count() == 0) throw EmptyMask("mask plan selects no text positions");

  FactorizationOrder order;
  order.z.reserve(seq.T());
  std::vector<int> unmasked;
  std::vector<int> masked;
  for (int i = 0; i < seq.l(); ++i)
    (plan.m[i] ? masked : unmasked).push_back(seq.k() + i);
  std::shuffle(unmasked.begin(), unmasked.end(), rng);
  for (int i = 0; i < seq.k(); ++i) order.z.push_back(i);
  order.z.insert(order.z.end(), unmasked.begin(), unmasked.end());
  order.c = static_cast<int>(order.z.size());
  order.z.insert(order.z.end(), masked.begin(), masked.end());
  return order;
}

AttentionMasks build_attention_masks(const FactorizationOrder& order) {
  const int T = order.T();
  std::vector<int> rank(T, -1);
  for (int r = 0; r < T; ++r) {
    int pos = order.z[r];
    if (pos < 0 || pos >= T || rank[pos] != -1) throw Error("z is not a permutation");
    rank[pos] = r;
  }
  AttentionMasks masks{BoolGrid(T), BoolGrid(T)};
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < T; ++j) {
      masks.content.at(i, j) = rank[j] <= rank[i];
      masks.query.at(i, j) = rank[j] < rank[i];
    }
  return masks;
}

}  // namespace rt
