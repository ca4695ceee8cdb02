#pragma once

#include <cstdint>
#include <vector>

#include "rt/rng.hpp"
#include "rt/tokens.hpp"

namespace rt {

// factorization order over positions 0..T-1; the first c entries are context,
// the remaining T-c entries are prediction targets (kept in ascending position
// order so targets are decoded left to right)
struct FactorizationOrder {
  std::vector<int> z;
  int c = 0;
  int T() const { return static_cast<int>(z.size()); }
  std::vector<int> targets() const { return {z.begin() + c, z.end()}; }
};

// span mask over the text part of a sequence
struct MaskPlan {
  std::vector<uint8_t> m;
  double mask_fraction = 0.0;
  int max_span = 1;
  int count() const;
};

struct BoolGrid {
  int n = 0;
  std::vector<uint8_t> a;
  BoolGrid() = default;
  explicit BoolGrid(int size) : n(size), a(static_cast<size_t>(size) * size, 0) {}
  uint8_t& at(int i, int j) { return a[static_cast<size_t>(i) * n + j]; }
  uint8_t at(int i, int j) const { return a[static_cast<size_t>(i) * n + j]; }
};

// content[i][j]: token j visible to the content stream at i (includes self);
// query[i][j]:   token j visible to the query stream at i (strictly earlier in z)
struct AttentionMasks {
  BoolGrid content;
  BoolGrid query;
};

// uniform permutation; target count = clamp(round(fraction*T), 1, T)
FactorizationOrder sample_plm_order(int T, double mask_fraction, Rng& rng);

// text first (shuffled), then tags/separators, then every numeral slot as target
FactorizationOrder sample_property_order(const TokenizedSequence& seq, Rng& rng);

// span mask with round(fraction*l) positions; spans avoid touching when possible
MaskPlan sample_mask_plan(int l, double fraction, int max_span, Rng& rng);

// property block first, unmasked text (shuffled), masked text as targets
FactorizationOrder sample_cgen_order(const TokenizedSequence& seq, const MaskPlan& plan, Rng& rng);

// sample_mask_plan, but a zero budget still masks one random position; for
// callers (objectives, generation protocols) that need at least one slot
MaskPlan sample_nonempty_mask_plan(int l, double fraction, int max_span, Rng& rng);

AttentionMasks build_attention_masks(const FactorizationOrder& order);

}  // namespace rt
