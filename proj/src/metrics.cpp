#include "rt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <unordered_map>

#include "rt/errors.hpp"
#include "rt/rng.hpp"

namespace rt {

namespace {

void check_pair(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw DataError("metric inputs must be nonempty");
  if (a.size() != b.size()) throw DataError("metric inputs must have equal length");
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double rmse(const std::vector<double>& preds, const std::vector<double>& golds) {
  check_pair(preds, golds);
  double s = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    const double d = preds[i] - golds[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(preds.size()));
}

double mae(const std::vector<double>& preds, const std::vector<double>& golds) {
  check_pair(preds, golds);
  double s = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - golds[i]);
  return s / static_cast<double>(preds.size());
}

Corr pcc(const std::vector<double>& preds, const std::vector<double>& golds) {
  check_pair(preds, golds);
  const double mp = mean(preds), mg = mean(golds);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    const double dx = preds[i] - mp, dy = golds[i] - mg;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return Corr{0.0, true};
  return Corr{sxy / std::sqrt(sxx * syy), false};
}

Corr r2(const std::vector<double>& preds, const std::vector<double>& golds) {
  check_pair(preds, golds);
  const double mg = mean(golds);
  double ss_res = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) {
    ss_res += (golds[i] - preds[i]) * (golds[i] - preds[i]);
    ss_tot += (golds[i] - mg) * (golds[i] - mg);
  }
  if (ss_tot == 0.0) return Corr{0.0, true};
  return Corr{1.0 - ss_res / ss_tot, false};
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    // positions i..j (0-based) share the mean of 1-based ranks i+1..j+1
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

Corr spearman(const std::vector<double>& preds, const std::vector<double>& golds) {
  check_pair(preds, golds);
  return pcc(average_ranks(preds), average_ranks(golds));
}

namespace {

constexpr int kNgramBins = 2048;
constexpr int kMaxNgram = 4;

// sorted unique hash bins of all n-grams, n = 1..4, rendered tokens joined by
// a separator byte that cannot occur inside a rendering
std::vector<uint32_t> ngram_bins(const std::vector<Token>& s) {
  std::vector<std::string> parts;
  parts.reserve(s.size());
  for (const Token& t : s) parts.push_back(t.render());
  std::vector<uint32_t> bins;
  for (int n = 1; n <= kMaxNgram; ++n)
    for (size_t i = 0; i + static_cast<size_t>(n) <= parts.size(); ++i) {
      std::string g = parts[i];
      for (int j = 1; j < n; ++j) {
        g.push_back('\x1f');
        g += parts[i + static_cast<size_t>(j)];
      }
      bins.push_back(static_cast<uint32_t>(fnv1a64(g) % kNgramBins));
    }
  std::sort(bins.begin(), bins.end());
  bins.erase(std::unique(bins.begin(), bins.end()), bins.end());
  return bins;
}

double bins_tanimoto(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
  if (a.empty() && b.empty()) return 1.0;
  size_t i = 0, j = 0, both = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++both;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const size_t unions = a.size() + b.size() - both;
  return static_cast<double>(both) / static_cast<double>(unions);
}

// whole tokens interned to ints, classic two-row dp
int lev_ids(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

class Interner {
 public:
  std::vector<int> ids(const std::vector<Token>& s) {
    std::vector<int> out;
    out.reserve(s.size());
    for (const Token& t : s) {
      auto [it, added] = by_render_.try_emplace(t.render(), static_cast<int>(by_render_.size()));
      (void)added;
      out.push_back(it->second);
    }
    return out;
  }

 private:
  std::unordered_map<std::string, int> by_render_;
};

}  // namespace

double token_tanimoto(const std::vector<Token>& a, const std::vector<Token>& b) {
  return bins_tanimoto(ngram_bins(a), ngram_bins(b));
}

int levenshtein(const std::vector<Token>& a, const std::vector<Token>& b) {
  Interner intern;
  return lev_ids(intern.ids(a), intern.ids(b));
}

std::vector<double> knn_baseline(const std::vector<std::vector<Token>>& train,
                                 const std::vector<double>& labels,
                                 const std::vector<std::vector<Token>>& queries, int k,
                                 KnnDistance distance) {
  if (train.empty()) throw DataError("knn baseline needs a nonempty training set");
  if (train.size() != labels.size()) throw DataError("one label per training sequence required");
  if (k < 1) throw ConfigError("k must be >= 1");
  const int kk = std::min<int>(k, static_cast<int>(train.size()));

  Interner intern;
  std::vector<std::vector<int>> train_ids;
  std::vector<std::vector<uint32_t>> train_bins;
  if (distance == KnnDistance::Levenshtein)
    for (const auto& s : train) train_ids.push_back(intern.ids(s));
  else
    for (const auto& s : train) train_bins.push_back(ngram_bins(s));

  std::vector<double> out;
  out.reserve(queries.size());
  std::vector<size_t> order(train.size());
  std::vector<double> dist(train.size());
  for (const auto& q : queries) {
    if (distance == KnnDistance::Levenshtein) {
      const std::vector<int> qi = intern.ids(q);
      for (size_t i = 0; i < train.size(); ++i)
        dist[i] = static_cast<double>(lev_ids(train_ids[i], qi));
    } else {
      const std::vector<uint32_t> qb = ngram_bins(q);
      for (size_t i = 0; i < train.size(); ++i) dist[i] = 1.0 - bins_tanimoto(train_bins[i], qb);
    }
    std::iota(order.begin(), order.end(), size_t{0});
    // stable: equal distances keep training input order
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return dist[a] < dist[b]; });
    double s = 0.0;
    for (int i = 0; i < kk; ++i) s += labels[order[static_cast<size_t>(i)]];
    out.push_back(s / kk);
  }
  return out;
}

}  // namespace rt
