#include "rt/encodings.hpp"

#include <cmath>

#include "rt/errors.hpp"

namespace rt {

double ne_float(int v, int p, int j) {
  double scaled = double(v) * std::pow(10.0, p);
  double sign = (j % 2 == 0) ? 1.0 : -1.0;
  return sign * scaled / double(j + 1);
}

double ne_int(int v, int p, int j, int d_e) {
  double scaled = double(v) * std::pow(10.0, p);
  double arg = scaled / std::pow(10000.0, double(2 * (j / 2)) / double(d_e));
  return (j % 2 == 0) ? std::sin(arg) : std::cos(arg);
}

Eigen::VectorXd ne_vector(const Token& t, const EncodingConfig& cfg) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(cfg.ne_dim);
  if (cfg.mode == NeMode::None || t.kind != TokenKind::Numeric) return out;
  for (int j = 0; j < cfg.ne_dim; ++j)
    out[j] = cfg.mode == NeMode::Float ? ne_float(t.digit, t.place, j)
                                       : ne_int(t.digit, t.place, j, cfg.ne_dim);
  return out;
}

Eigen::VectorXd combine(const Eigen::VectorXd& word, const Eigen::VectorXd& pos,
                        const Eigen::VectorXd& ne, const EncodingConfig& cfg) {
  if (word.size() != cfg.d_e || pos.size() != cfg.d_e)
    throw ShapeMismatch("word/positional vector width does not match d_e");
  Eigen::VectorXd base = word + pos;
  if (cfg.mode == NeMode::None) return base;
  if (ne.size() != cfg.ne_dim) throw ShapeMismatch("ne vector width does not match ne_dim");
  if (cfg.combine == NeCombine::Sum) {
    if (cfg.ne_dim > cfg.d_e) throw ShapeMismatch("ne_dim exceeds d_e in SUM mode");
    base.head(ne.size()) += ne;
    return base;
  }
  Eigen::VectorXd out(base.size() + ne.size());
  out << base, ne;
  return out;
}

Eigen::MatrixXd build_ne_table(const Vocabulary& vocab, const EncodingConfig& cfg) {
  Eigen::MatrixXd table = Eigen::MatrixXd::Zero(vocab.size(), cfg.ne_dim);
  if (cfg.mode == NeMode::None) return table;
  for (int id = 0; id < vocab.size(); ++id)
    table.row(id) = ne_vector(vocab.token(id), cfg).transpose();
  return table;
}

}  // namespace rt
