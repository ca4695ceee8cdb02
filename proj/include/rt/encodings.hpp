#pragma once

#include <Eigen/Core>

#include "rt/tokens.hpp"

namespace rt {

enum class NeMode { Float, Int, None };
enum class NeCombine { Sum, Concat };

struct EncodingConfig {
  NeMode mode = NeMode::Float;
  NeCombine combine = NeCombine::Sum;
  int ne_dim = 16;
  int d_e = 64;  // model embedding width the encodings are combined into
};

// component j of the float encoding of digit v at place p
double ne_float(int v, int p, int j);

// component j of the periodic integer encoding; d_e is the encoding dimension
double ne_int(int v, int p, int j, int d_e);

// length cfg.ne_dim; zero for every non-numeric token kind (INT mode uses d_e = cfg.ne_dim)
Eigen::VectorXd ne_vector(const Token& t, const EncodingConfig& cfg);

// input embedding of one position.
// SUM: word + pos with ne folded into the first ne_dim dims (width d_e);
// CONCAT: [word + pos, ne] (width d_e + ne_dim); NONE mode ignores ne entirely.
Eigen::VectorXd combine(const Eigen::VectorXd& word, const Eigen::VectorXd& pos,
                        const Eigen::VectorXd& ne, const EncodingConfig& cfg);

// per-id NE rows for a vocabulary (V x ne_dim); NONE mode yields zeros
Eigen::MatrixXd build_ne_table(const Vocabulary& vocab, const EncodingConfig& cfg);

}  // namespace rt
