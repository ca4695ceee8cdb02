#pragma once

#include <vector>

#include "rt/tokens.hpp"

namespace rt {

// plain error metrics; inputs must be same-length and nonempty
double rmse(const std::vector<double>& preds, const std::vector<double>& golds);
double mae(const std::vector<double>& preds, const std::vector<double>& golds);

// correlations report 0 with the degenerate flag set instead of NaN when a
// side has zero variance, so downstream aggregation stays finite
struct Corr {
  double value = 0.0;
  bool degenerate = false;
};

Corr pcc(const std::vector<double>& preds, const std::vector<double>& golds);
// coefficient of determination 1 - ss_res/ss_tot; degenerate on constant golds
Corr r2(const std::vector<double>& preds, const std::vector<double>& golds);
// pearson over average ranks (tied values share the mean of their rank range)
Corr spearman(const std::vector<double>& preds, const std::vector<double>& golds);

// 1-based average ranks, ascending
std::vector<double> average_ranks(const std::vector<double>& v);

// set tanimoto over hashed token n-grams (n = 1..4, 2048 bins); both empty -> 1
double token_tanimoto(const std::vector<Token>& a, const std::vector<Token>& b);

// edit distance over whole tokens
int levenshtein(const std::vector<Token>& a, const std::vector<Token>& b);

enum class KnnDistance { Levenshtein, Tanimoto };

// mean label of the k nearest training sequences per query; distance ties
// resolve by training input order; k is clamped to the training-set size
std::vector<double> knn_baseline(const std::vector<std::vector<Token>>& train,
                                 const std::vector<double>& labels,
                                 const std::vector<std::vector<Token>>& queries, int k,
                                 KnnDistance distance);

}  // namespace rt
