#include "rt/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace rt {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kLnEps = 1e-5;

template <class S>
constexpr S neg_big() {
  return S(-1e30);
}

template <class S>
S gelu_s(S x) {
  const S c = S(0.7978845608028654);
  const S a = S(0.044715);
  return S(0.5) * x * (S(1) + std::tanh(c * (x + a * x * x * x)));
}

template <class S>
S gelu_grad_s(S x) {
  const S c = S(0.7978845608028654);
  const S a = S(0.044715);
  S u = c * (x + a * x * x * x);
  S t = std::tanh(u);
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c * (S(1) + S(3) * a * x * x);
}

template <class S>
void layernorm_fwd(const Mat<S>& X, const Mat<S>& g, const Mat<S>& b, Mat<S>& out, Mat<S>& mu,
                   Mat<S>& rstd) {
  const Eigen::Index n = X.rows(), d = X.cols();
  out.resize(n, d);
  mu.resize(n, 1);
  rstd.resize(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    S m = X.row(r).mean();
    S var = (X.row(r).array() - m).square().sum() / S(d);
    S rs = S(1) / std::sqrt(var + S(kLnEps));
    mu(r, 0) = m;
    rstd(r, 0) = rs;
    out.row(r) = (((X.row(r).array() - m) * rs) * g.row(0).array() + b.row(0).array()).matrix();
  }
}

// accumulates into dX (dX usually carries the residual gradient already)
template <class S>
void layernorm_bwd(const Mat<S>& X, const Mat<S>& g, const Mat<S>& mu, const Mat<S>& rstd,
                   const Mat<S>& dY, Mat<S>& dX, Mat<S>& dg, Mat<S>& db) {
  const Eigen::Index n = X.rows(), d = X.cols();
  for (Eigen::Index r = 0; r < n; ++r) {
    Eigen::Array<S, 1, Eigen::Dynamic> xhat = (X.row(r).array() - mu(r, 0)) * rstd(r, 0);
    Eigen::Array<S, 1, Eigen::Dynamic> dy = dY.row(r).array();
    dg.row(0).array() += dy * xhat;
    db.row(0).array() += dy;
    Eigen::Array<S, 1, Eigen::Dynamic> dxhat = dy * g.row(0).array();
    S m1 = dxhat.mean();
    S m2 = (dxhat * xhat).mean();
    dX.row(r).array() += rstd(r, 0) * (dxhat - m1 - xhat * m2);
  }
}

template <class S>
void softmax_rows_masked(Mat<S>& M) {
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    S mx = M.row(r).maxCoeff();
    if (mx <= neg_big<S>() / S(2)) {
      M.row(r).setZero();  // no visible key: attention contributes nothing
      continue;
    }
    M.row(r) = (M.row(r).array() - mx).exp().matrix();
    M.row(r) /= M.row(r).sum();
  }
}

template <class S>
Mat<S> softmax_rows_bwd(const Mat<S>& dP, const Mat<S>& P) {
  Mat<S> dS = dP.cwiseProduct(P);
  for (Eigen::Index r = 0; r < dS.rows(); ++r) {
    S s = dS.row(r).sum();
    dS.row(r) -= s * P.row(r);
  }
  return dS;
}

template <class S>
void apply_dropout(Mat<S>& x, Mat<S>& kept, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) {
    kept.resize(0, 0);
    return;
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  S scale = S(1.0 / (1.0 - p));
  kept.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) kept(r, c) = u(*rng) < p ? S(0) : scale;
  x = x.cwiseProduct(kept);
}

template <class S>
std::vector<Mat<S>*> tensor_list(ParamsT<S>& p) {
  std::vector<Mat<S>*> out;
  p.visit([&](const std::string&, Mat<S>& m) { out.push_back(&m); });
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
  if (n_layers < 1 || d_e < 1 || d_ff < 1 || n_heads < 1 || max_len < 1)
    throw ConfigError("model dimensions must be positive");
  if (d_model() % n_heads != 0) throw ConfigError("n_heads must divide the stream width");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0,1)");
  if (encoding.mode != NeMode::None) {
    if (encoding.ne_dim < 1) throw ConfigError("ne_dim must be positive");
    if (encoding.combine == NeCombine::Sum && encoding.ne_dim > d_e)
      throw ConfigError("ne_dim exceeds d_e in SUM mode");
  }
}

std::string ModelConfig::to_json() const {
  ordered_json j = {
      {"vocab_size", vocab_size},
      {"n_layers", n_layers},
      {"d_e", d_e},
      {"d_ff", d_ff},
      {"n_heads", n_heads},
      {"max_len", max_len},
      {"dropout", dropout},
      {"sinusoidal_positions", sinusoidal_positions},
      {"ne_mode", encoding.mode == NeMode::Float  ? "float"
                  : encoding.mode == NeMode::Int ? "int"
                                                 : "none"},
      {"ne_combine", encoding.combine == NeCombine::Sum ? "sum" : "concat"},
      {"ne_dim", encoding.ne_dim},
  };
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
  ordered_json j;
  try {
    j = ordered_json::parse(s);
  } catch (const std::exception& e) {
    throw DataError(std::string("bad model config json: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.d_e = j.at("d_e").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.max_len = j.at("max_len").get<int>();
    cfg.dropout = j.at("dropout").get<double>();
    cfg.sinusoidal_positions = j.at("sinusoidal_positions").get<bool>();
    std::string mode = j.at("ne_mode").get<std::string>();
    if (mode == "float")
      cfg.encoding.mode = NeMode::Float;
    else if (mode == "int")
      cfg.encoding.mode = NeMode::Int;
    else if (mode == "none")
      cfg.encoding.mode = NeMode::None;
    else
      throw DataError("unknown ne_mode: " + mode);
    std::string comb = j.at("ne_combine").get<std::string>();
    if (comb == "sum")
      cfg.encoding.combine = NeCombine::Sum;
    else if (comb == "concat")
      cfg.encoding.combine = NeCombine::Concat;
    else
      throw DataError("unknown ne_combine: " + comb);
    cfg.encoding.ne_dim = j.at("ne_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad model config json: ") + e.what());
  }
  return cfg;
}

template <class S>
static ParamsT<S> make_params(const ModelConfig& cfg) {
  cfg.validate();
  const int D = cfg.d_model();
  ParamsT<S> p;
  p.cfg = cfg;
  p.emb = Mat<S>::Zero(cfg.vocab_size, cfg.d_e);
  p.w_query = Mat<S>::Zero(1, D);
  p.layers.resize(cfg.n_layers);
  for (auto& L : p.layers) {
    L.ln1_g = Mat<S>::Ones(1, D);
    L.ln1_b = Mat<S>::Zero(1, D);
    L.Wq = Mat<S>::Zero(D, D);
    L.Wk = Mat<S>::Zero(D, D);
    L.Wv = Mat<S>::Zero(D, D);
    L.Wo = Mat<S>::Zero(D, D);
    L.bq = Mat<S>::Zero(1, D);
    L.bk = Mat<S>::Zero(1, D);
    L.bv = Mat<S>::Zero(1, D);
    L.bo = Mat<S>::Zero(1, D);
    L.ln2_g = Mat<S>::Ones(1, D);
    L.ln2_b = Mat<S>::Zero(1, D);
    L.W1 = Mat<S>::Zero(D, cfg.d_ff);
    L.b1 = Mat<S>::Zero(1, cfg.d_ff);
    L.W2 = Mat<S>::Zero(cfg.d_ff, D);
    L.b2 = Mat<S>::Zero(1, D);
  }
  p.lnf_g = Mat<S>::Ones(1, D);
  p.lnf_b = Mat<S>::Zero(1, D);
  if (!cfg.tied_output()) p.w_out = Mat<S>::Zero(cfg.vocab_size, D);
  p.b_out = Mat<S>::Zero(1, cfg.vocab_size);
  return p;
}

template <class S>
ParamsT<S> ParamsT<S>::init(const ModelConfig& cfg, uint64_t seed) {
  ParamsT<S> p = make_params<S>(cfg);
  Rng rng = make_rng(seed);
  auto fill = [&](Mat<S>& m, double fan_in) {
    double a = std::sqrt(3.0 / fan_in);
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = S(u(rng));
  };
  p.visit([&](const std::string& name, Mat<S>& m) {
    auto tail = name.substr(name.rfind('.') + 1);
    if (tail == "emb" || tail == "w_query")
      fill(m, double(m.cols()));
    else if (tail == "Wq" || tail == "Wk" || tail == "Wv" || tail == "Wo" || tail == "W1" ||
             tail == "W2" || tail == "w_out")
      fill(m, double(m.rows()));
    // biases and layernorm offsets stay zero, gains stay one
  });
  return p;
}

// gradient / moment buffers: every tensor zero, including layernorm gains
template <class S>
ParamsT<S> ParamsT<S>::zeros_like(const ParamsT<S>& other) {
  ParamsT<S> p = make_params<S>(other.cfg);
  p.set_zero();
  return p;
}

template <class S>
void ParamsT<S>::set_zero() {
  visit([](const std::string&, Mat<S>& m) { m.setZero(); });
}

template <class S>
size_t ParamsT<S>::num_params() const {
  size_t n = 0;
  visit([&](const std::string&, const Mat<S>& m) { n += size_t(m.size()); });
  return n;
}

template <class S>
TablesT<S> build_tables(const ModelConfig& cfg, const Vocabulary& vocab) {
  if (vocab.size() != cfg.vocab_size)
    throw ConfigError("vocabulary size does not match model config");
  TablesT<S> t;
  t.ne = build_ne_table(vocab, cfg.enc()).template cast<S>();
  Eigen::MatrixXd pos = Eigen::MatrixXd::Zero(cfg.max_len, cfg.d_e);
  if (cfg.sinusoidal_positions) {
    for (int i = 0; i < cfg.max_len; ++i)
      for (int j = 0; j < cfg.d_e; ++j) {
        double freq = std::pow(10000.0, double(2 * (j / 2)) / double(cfg.d_e));
        pos(i, j) = (j % 2 == 0) ? std::sin(i / freq) : std::cos(i / freq);
      }
  }
  t.pos = pos.cast<S>();
  return t;
}

template <class S>
void forward(const ParamsT<S>& p, const TablesT<S>& tb, const std::vector<int>& ids,
             const AttentionMasks& masks, const std::vector<int>& targets, TraceT<S>& tr,
             Rng* dropout_rng) {
  const ModelConfig& cfg = p.cfg;
  const int T = int(ids.size());
  const int nt = int(targets.size());
  const int D = cfg.d_model();
  const int H = cfg.n_heads;
  const int dh = D / H;
  const int L = cfg.n_layers;
  const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
  const bool use_ne = cfg.encoding.mode != NeMode::None;
  const double pdrop = cfg.dropout;

  if (T < 1) throw Error("empty sequence");
  if (T > cfg.max_len) throw ConfigError("sequence longer than max_len");
  if (nt < 1) throw Error("no target positions");
  if (masks.content.n != T || masks.query.n != T) throw Error("mask size does not match sequence");
  for (int i = 0; i < T; ++i)
    if (ids[i] < 0 || ids[i] >= cfg.vocab_size) throw IdOutOfRange("token id out of range");
  for (int t = 0; t < nt; ++t) {
    if (targets[t] < 0 || targets[t] >= T) throw Error("target position out of range");
    if (t > 0 && targets[t] <= targets[t - 1]) throw Error("targets must be strictly ascending");
  }

  tr.ids = ids;
  tr.targets = targets;
  tr.layers.resize(L);

  // additive masks
  Mat<S> Mc(T, T), Mq(nt, T);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < T; ++j) Mc(i, j) = masks.content.at(i, j) ? S(0) : neg_big<S>();
  tr.q_row_visible.assign(nt, 0);
  for (int t = 0; t < nt; ++t)
    for (int j = 0; j < T; ++j) {
      Mq(t, j) = masks.query.at(targets[t], j) ? S(0) : neg_big<S>();
      if (Mq(t, j) == S(0)) tr.q_row_visible[t] = 1;
    }

  // embeddings go through the shared combine op so stream input == embed contract
  tr.X0.resize(T, D);
  const EncodingConfig enc = cfg.enc();
  const Eigen::VectorXd zero_pos = Eigen::VectorXd::Zero(cfg.d_e);
  const Eigen::VectorXd zero_ne = Eigen::VectorXd::Zero(enc.ne_dim);
  for (int i = 0; i < T; ++i) {
    Eigen::VectorXd word = p.emb.row(ids[i]).transpose().template cast<double>();
    Eigen::VectorXd pos =
        cfg.sinusoidal_positions
            ? Eigen::VectorXd(tb.pos.row(i).transpose().template cast<double>())
            : zero_pos;
    Eigen::VectorXd ne =
        use_ne ? Eigen::VectorXd(tb.ne.row(ids[i]).transpose().template cast<double>()) : zero_ne;
    tr.X0.row(i) = combine(word, pos, ne, enc).transpose().template cast<S>();
  }
  tr.G0.resize(nt, D);
  for (int t = 0; t < nt; ++t) {
    tr.G0.row(t) = p.w_query.row(0);
    if (cfg.sinusoidal_positions) tr.G0.row(t).head(cfg.d_e) += tb.pos.row(targets[t]);
  }

  const Mat<S>* X = &tr.X0;
  const Mat<S>* G = &tr.G0;
  for (int l = 0; l < L; ++l) {
    auto& t_ = tr.layers[l];
    const auto& W = p.layers[l];
    t_.content_updated = l + 1 < L;

    layernorm_fwd(*X, W.ln1_g, W.ln1_b, t_.Xn, t_.mu1, t_.rstd1);
    t_.K = t_.Xn * W.Wk;
    t_.K.rowwise() += W.bk.row(0);
    t_.V = t_.Xn * W.Wv;
    t_.V.rowwise() += W.bv.row(0);

    if (t_.content_updated) {
      t_.Qc = t_.Xn * W.Wq;
      t_.Qc.rowwise() += W.bq.row(0);
      t_.Pc.resize(H);
      t_.Ac.resize(T, D);
      for (int h = 0; h < H; ++h) {
        Mat<S> Sc = (t_.Qc.middleCols(h * dh, dh) * t_.K.middleCols(h * dh, dh).transpose()) * inv_sqrt + Mc;
        softmax_rows_masked(Sc);
        t_.Ac.middleCols(h * dh, dh).noalias() = Sc * t_.V.middleCols(h * dh, dh);
        t_.Pc[h] = std::move(Sc);
      }
      Mat<S> Oc = t_.Ac * W.Wo;
      Oc.rowwise() += W.bo.row(0);
      apply_dropout(Oc, t_.drop_attn_c, pdrop, dropout_rng);
      t_.X2 = *X + Oc;
      layernorm_fwd(t_.X2, W.ln2_g, W.ln2_b, t_.X2n_store, t_.mu2, t_.rstd2);
      t_.Z1 = t_.X2n_store * W.W1;
      t_.Z1.rowwise() += W.b1.row(0);
      t_.A1 = t_.Z1.unaryExpr([](S x) { return gelu_s(x); });
      Mat<S> Fc = t_.A1 * W.W2;
      Fc.rowwise() += W.b2.row(0);
      apply_dropout(Fc, t_.drop_ff_c, pdrop, dropout_rng);
      t_.X3 = t_.X2 + Fc;
    }

    layernorm_fwd(*G, W.ln1_g, W.ln1_b, t_.Gn, t_.muq1, t_.rstdq1);
    t_.Qg = t_.Gn * W.Wq;
    t_.Qg.rowwise() += W.bq.row(0);
    t_.Pq.resize(H);
    t_.Aq.resize(nt, D);
    for (int h = 0; h < H; ++h) {
      Mat<S> Sq = (t_.Qg.middleCols(h * dh, dh) * t_.K.middleCols(h * dh, dh).transpose()) * inv_sqrt + Mq;
      softmax_rows_masked(Sq);
      t_.Aq.middleCols(h * dh, dh).noalias() = Sq * t_.V.middleCols(h * dh, dh);
      t_.Pq[h] = std::move(Sq);
    }
    Mat<S> Og = t_.Aq * W.Wo;
    Og.rowwise() += W.bo.row(0);
    apply_dropout(Og, t_.drop_attn_q, pdrop, dropout_rng);
    t_.G2 = *G + Og;
    layernorm_fwd(t_.G2, W.ln2_g, W.ln2_b, t_.G2n_store, t_.muq2, t_.rstdq2);
    t_.Zq1 = t_.G2n_store * W.W1;
    t_.Zq1.rowwise() += W.b1.row(0);
    t_.Aq1 = t_.Zq1.unaryExpr([](S x) { return gelu_s(x); });
    Mat<S> Fq = t_.Aq1 * W.W2;
    Fq.rowwise() += W.b2.row(0);
    apply_dropout(Fq, t_.drop_ff_q, pdrop, dropout_rng);
    t_.G3 = t_.G2 + Fq;

    if (t_.content_updated) X = &t_.X3;
    G = &t_.G3;
  }

  layernorm_fwd(*G, p.lnf_g, p.lnf_b, tr.Gf, tr.muf, tr.rstdf);
  if (cfg.tied_output())
    tr.logits.noalias() = tr.Gf * p.emb.transpose();
  else
    tr.logits.noalias() = tr.Gf * p.w_out.transpose();
  tr.logits.rowwise() += p.b_out.row(0);
}

template <class S>
S nll_loss(const Mat<S>& logits, const std::vector<int>& gold) {
  if (logits.rows() != Eigen::Index(gold.size())) throw Error("gold size does not match logits");
  S total = S(0);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (gold[r] < 0 || gold[r] >= logits.cols()) throw UnknownId("gold id out of range");
    S mx = logits.row(r).maxCoeff();
    S lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, gold[r]);
  }
  return total / S(logits.rows());
}

template <class S>
void backward(const ParamsT<S>& p, const TablesT<S>& tb, const TraceT<S>& tr,
              const std::vector<int>& gold, S scale, ParamsT<S>& grads) {
  (void)tb;
  const ModelConfig& cfg = p.cfg;
  const int T = int(tr.ids.size());
  const int nt = int(tr.targets.size());
  const int D = cfg.d_model();
  const int H = cfg.n_heads;
  const int dh = D / H;
  const int L = cfg.n_layers;
  const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
  if (Eigen::Index(gold.size()) != tr.logits.rows()) throw Error("gold size does not match trace");

  // d(sum nll)/d(logits) = softmax - onehot, times scale
  Mat<S> dLogits(nt, cfg.vocab_size);
  for (int r = 0; r < nt; ++r) {
    S mx = tr.logits.row(r).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (tr.logits.row(r).array() - mx).exp();
    dLogits.row(r) = (e / e.sum()).matrix() * scale;
    dLogits(r, gold[r]) -= scale;
  }

  Mat<S> dGf;
  if (cfg.tied_output()) {
    dGf.noalias() = dLogits * p.emb;
    grads.emb.noalias() += dLogits.transpose() * tr.Gf;
  } else {
    dGf.noalias() = dLogits * p.w_out;
    grads.w_out.noalias() += dLogits.transpose() * tr.Gf;
  }
  grads.b_out.row(0) += dLogits.colwise().sum();

  const Mat<S>& G_last = L > 0 ? tr.layers[L - 1].G3 : tr.G0;
  Mat<S> dG = Mat<S>::Zero(nt, D);
  layernorm_bwd(G_last, p.lnf_g, tr.muf, tr.rstdf, dGf, dG, grads.lnf_g, grads.lnf_b);

  Mat<S> dX = Mat<S>::Zero(T, D);
  for (int l = L - 1; l >= 0; --l) {
    const auto& t_ = tr.layers[l];
    const auto& W = p.layers[l];
    auto& gW = grads.layers[l];
    const Mat<S>& Xin = l == 0 ? tr.X0 : tr.layers[l - 1].X3;
    const Mat<S>& Gin = l == 0 ? tr.G0 : tr.layers[l - 1].G3;

    Mat<S> dK = Mat<S>::Zero(T, D);
    Mat<S> dV = Mat<S>::Zero(T, D);

    // query stream: ff block
    {
      Mat<S> dFq = t_.drop_ff_q.size() ? dG.cwiseProduct(t_.drop_ff_q) : dG;
      gW.W2.noalias() += t_.Aq1.transpose() * dFq;
      gW.b2.row(0) += dFq.colwise().sum();
      Mat<S> dAq1 = dFq * W.W2.transpose();
      Mat<S> dZq1 = dAq1.cwiseProduct(t_.Zq1.unaryExpr([](S x) { return gelu_grad_s(x); }));
      gW.W1.noalias() += t_.G2n_store.transpose() * dZq1;
      gW.b1.row(0) += dZq1.colwise().sum();
      Mat<S> dG2n = dZq1 * W.W1.transpose();
      Mat<S> dG2 = dG;  // residual
      layernorm_bwd(t_.G2, W.ln2_g, t_.muq2, t_.rstdq2, dG2n, dG2, gW.ln2_g, gW.ln2_b);
      // query stream: attention block
      Mat<S> dOg = t_.drop_attn_q.size() ? dG2.cwiseProduct(t_.drop_attn_q) : dG2;
      gW.Wo.noalias() += t_.Aq.transpose() * dOg;
      gW.bo.row(0) += dOg.colwise().sum();
      Mat<S> dAq = dOg * W.Wo.transpose();
      Mat<S> dQg(nt, D);
      for (int h = 0; h < H; ++h) {
        Mat<S> dPq = dAq.middleCols(h * dh, dh) * t_.V.middleCols(h * dh, dh).transpose();
        dV.middleCols(h * dh, dh).noalias() += t_.Pq[h].transpose() * dAq.middleCols(h * dh, dh);
        Mat<S> dSq = softmax_rows_bwd(dPq, t_.Pq[h]) * inv_sqrt;
        dQg.middleCols(h * dh, dh).noalias() = dSq * t_.K.middleCols(h * dh, dh);
        dK.middleCols(h * dh, dh).noalias() += dSq.transpose() * t_.Qg.middleCols(h * dh, dh);
      }
      gW.Wq.noalias() += t_.Gn.transpose() * dQg;
      gW.bq.row(0) += dQg.colwise().sum();
      Mat<S> dGn = dQg * W.Wq.transpose();
      Mat<S> dGin = dG2;  // residual
      layernorm_bwd(Gin, W.ln1_g, t_.muq1, t_.rstdq1, dGn, dGin, gW.ln1_g, gW.ln1_b);
      dG = std::move(dGin);
    }

    // content stream
    Mat<S> dXn = Mat<S>::Zero(T, D);
    Mat<S> dXin;
    if (t_.content_updated) {
      Mat<S> dFc = t_.drop_ff_c.size() ? dX.cwiseProduct(t_.drop_ff_c) : dX;
      gW.W2.noalias() += t_.A1.transpose() * dFc;
      gW.b2.row(0) += dFc.colwise().sum();
      Mat<S> dA1 = dFc * W.W2.transpose();
      Mat<S> dZ1 = dA1.cwiseProduct(t_.Z1.unaryExpr([](S x) { return gelu_grad_s(x); }));
      gW.W1.noalias() += t_.X2n_store.transpose() * dZ1;
      gW.b1.row(0) += dZ1.colwise().sum();
      Mat<S> dX2n = dZ1 * W.W1.transpose();
      Mat<S> dX2 = dX;  // residual
      layernorm_bwd(t_.X2, W.ln2_g, t_.mu2, t_.rstd2, dX2n, dX2, gW.ln2_g, gW.ln2_b);
      Mat<S> dOc = t_.drop_attn_c.size() ? dX2.cwiseProduct(t_.drop_attn_c) : dX2;
      gW.Wo.noalias() += t_.Ac.transpose() * dOc;
      gW.bo.row(0) += dOc.colwise().sum();
      Mat<S> dAc = dOc * W.Wo.transpose();
      Mat<S> dQc(T, D);
      for (int h = 0; h < H; ++h) {
        Mat<S> dPc = dAc.middleCols(h * dh, dh) * t_.V.middleCols(h * dh, dh).transpose();
        dV.middleCols(h * dh, dh).noalias() += t_.Pc[h].transpose() * dAc.middleCols(h * dh, dh);
        Mat<S> dSc = softmax_rows_bwd(dPc, t_.Pc[h]) * inv_sqrt;
        dQc.middleCols(h * dh, dh).noalias() = dSc * t_.K.middleCols(h * dh, dh);
        dK.middleCols(h * dh, dh).noalias() += dSc.transpose() * t_.Qc.middleCols(h * dh, dh);
      }
      gW.Wq.noalias() += t_.Xn.transpose() * dQc;
      gW.bq.row(0) += dQc.colwise().sum();
      dXn += dQc * W.Wq.transpose();
      dXin = std::move(dX2);  // residual
    } else {
      dXin = Mat<S>::Zero(T, D);
    }

    // shared projections: K and V feed both streams
    gW.Wk.noalias() += t_.Xn.transpose() * dK;
    gW.bk.row(0) += dK.colwise().sum();
    dXn.noalias() += dK * W.Wk.transpose();
    gW.Wv.noalias() += t_.Xn.transpose() * dV;
    gW.bv.row(0) += dV.colwise().sum();
    dXn.noalias() += dV * W.Wv.transpose();
    layernorm_bwd(Xin, W.ln1_g, t_.mu1, t_.rstd1, dXn, dXin, gW.ln1_g, gW.ln1_b);
    dX = std::move(dXin);
  }

  // embeddings
  const int d_e = cfg.d_e;
  for (int i = 0; i < T; ++i) grads.emb.row(tr.ids[i]) += dX.row(i).head(d_e);
  grads.w_query.row(0) += dG.colwise().sum();
}

template <class S>
double adam_step(ParamsT<S>& params, ParamsT<S>& grads, AdamStateT<S>& state,
                 const AdamConfig& cfg) {
  auto ps = tensor_list(params);
  auto gs = tensor_list(grads);
  auto ms = tensor_list(state.m);
  auto vs = tensor_list(state.v);
  if (ps.size() != gs.size() || ps.size() != ms.size() || ps.size() != vs.size())
    throw Error("parameter/gradient structure mismatch");

  double norm2 = 0;
  for (auto* g : gs) norm2 += g->template cast<double>().squaredNorm();
  double norm = std::sqrt(norm2);
  if (cfg.clip > 0 && norm > cfg.clip) {
    S s = S(cfg.clip / norm);
    for (auto* g : gs) (*g) *= s;
  }

  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  const S b1 = S(cfg.beta1), b2 = S(cfg.beta2);
  const S lr = S(cfg.lr), eps = S(cfg.eps);
  const S ibc1 = S(1.0 / bc1), ibc2 = S(1.0 / bc2);
  for (size_t i = 0; i < ps.size(); ++i) {
    auto& w = *ps[i];
    auto& g = *gs[i];
    auto& m = *ms[i];
    auto& v = *vs[i];
    m = b1 * m + (S(1) - b1) * g;
    v = (b2 * v.array() + (S(1) - b2) * g.array().square()).matrix();
    w.array() -= lr * (m.array() * ibc1) / ((v.array() * ibc2).sqrt() + eps);
  }
  return norm;
}

namespace {

void write_u64_le(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

void write_f32_le(std::ostream& os, float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  unsigned char b[4] = {static_cast<unsigned char>(u & 0xff),
                        static_cast<unsigned char>((u >> 8) & 0xff),
                        static_cast<unsigned char>((u >> 16) & 0xff),
                        static_cast<unsigned char>((u >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t u = uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

constexpr char kMagic[8] = {'R', 'T', 'C', 'K', 'P', 'T', '1', '\n'};

}  // namespace

void save_checkpoint(const std::string& path, const Params& params, const CheckpointMeta& meta,
                     const AdamStateT<float>* opt) {
  std::vector<std::pair<std::string, const Mat<float>*>> tensors;
  params.visit([&](const std::string& n, const Mat<float>& m) { tensors.emplace_back(n, &m); });
  if (opt) {
    opt->m.visit(
        [&](const std::string& n, const Mat<float>& m) { tensors.emplace_back("opt.m." + n, &m); });
    opt->v.visit(
        [&](const std::string& n, const Mat<float>& m) { tensors.emplace_back("opt.v." + n, &m); });
  }

  ordered_json manifest = ordered_json::array();
  uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    manifest.push_back({{"name", name},
                        {"rows", m->rows()},
                        {"cols", m->cols()},
                        {"offset", offset}});
    offset += uint64_t(m->size());
  }
  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "0x%016llx",
                static_cast<unsigned long long>(meta.vocab_hash));
  ordered_json header = {{"format", "rt-checkpoint-v1"},
                         {"config", ordered_json::parse(params.cfg.to_json())},
                         {"vocab_hash", hash_hex},
                         {"step", meta.step},
                         {"opt", opt != nullptr},
                         {"opt_step", opt ? opt->t : 0},
                         {"tensors", std::move(manifest)}};
  std::string hbytes = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path);
  os.write(kMagic, 8);
  write_u64_le(os, hbytes.size());
  os.write(hbytes.data(), std::streamsize(hbytes.size()));
  for (const auto& [name, m] : tensors)
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) write_f32_le(os, (*m)(r, c));
  if (!os) throw DataError("failed writing checkpoint: " + path);
}

Params load_checkpoint(const std::string& path, CheckpointMeta* meta, AdamStateT<float>* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path);
  uint64_t hlen = read_u64_le(is);
  if (!is || hlen > (64ull << 20)) throw DataError("corrupt checkpoint header: " + path);
  std::string hbytes(hlen, '\0');
  is.read(hbytes.data(), std::streamsize(hlen));
  ordered_json header;
  try {
    header = ordered_json::parse(hbytes);
  } catch (const std::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }

  ModelConfig cfg = ModelConfig::from_json(header.at("config").dump());
  Params params = make_params<float>(cfg);
  AdamStateT<float> state;
  bool has_opt = header.value("opt", false);
  if (has_opt) state = AdamStateT<float>::zeros_like(params);

  std::map<std::string, Mat<float>*> by_name;
  params.visit([&](const std::string& n, Mat<float>& m) { by_name[n] = &m; });
  if (has_opt) {
    state.m.visit([&](const std::string& n, Mat<float>& m) { by_name["opt.m." + n] = &m; });
    state.v.visit([&](const std::string& n, Mat<float>& m) { by_name["opt.v." + n] = &m; });
  }

  size_t expected = by_name.size();
  size_t seen = 0;
  try {
    for (const auto& entry : header.at("tensors")) {
      std::string name = entry.at("name").get<std::string>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw DataError("unexpected tensor in checkpoint: " + name);
      Mat<float>& m = *it->second;
      if (m.rows() != entry.at("rows").get<Eigen::Index>() ||
          m.cols() != entry.at("cols").get<Eigen::Index>())
        throw DataError("tensor shape mismatch: " + name);
      ++seen;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  if (seen != expected) throw DataError("checkpoint tensor count mismatch");

  // payload is ordered exactly like the manifest
  for (const auto& entry : header.at("tensors")) {
    Mat<float>& m = *by_name[entry.at("name").get<std::string>()];
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = read_f32_le(is);
  }
  if (!is) throw DataError("checkpoint payload truncated: " + path);

  if (meta) {
    meta->step = header.value("step", 0ll);
    std::string hh = header.value("vocab_hash", std::string("0x0"));
    meta->vocab_hash = std::strtoull(hh.c_str(), nullptr, 16);
  }
  if (opt) {
    if (has_opt) {
      *opt = std::move(state);
      opt->t = header.value("opt_step", 0ll);
    } else {
      *opt = AdamStateT<float>::zeros_like(params);
    }
  }
  return params;
}

GradCheckResult finite_difference_check(const ParamsD& params, const TablesT<double>& tables,
                                        const std::vector<int>& ids, const AttentionMasks& masks,
                                        const std::vector<int>& targets,
                                        const std::vector<int>& gold, double h) {
  ParamsD working = params;
  ParamsD grads = ParamsD::zeros_like(params);
  TraceT<double> tr;
  forward(working, tables, ids, masks, targets, tr);
  backward(working, tables, tr, gold, 1.0, grads);

  auto loss_at = [&]() {
    TraceT<double> t2;
    forward(working, tables, ids, masks, targets, t2);
    return nll_loss(t2.logits, gold) * double(gold.size());
  };

  std::vector<Mat<double>*> ws = tensor_list(working);
  std::vector<Mat<double>*> gs = tensor_list(grads);
  std::vector<std::string> names;
  working.visit([&](const std::string& n, Mat<double>&) { names.push_back(n); });

  GradCheckResult res;
  for (size_t t = 0; t < ws.size(); ++t) {
    Mat<double>& w = *ws[t];
    Mat<double>& g = *gs[t];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        double keep = w(r, c);
        w(r, c) = keep + h;
        double lp = loss_at();
        w(r, c) = keep - h;
        double lm = loss_at();
        w(r, c) = keep;
        double fd = (lp - lm) / (2 * h);
        double an = g(r, c);
        // relative to max(|fd|,|an|,0.01): near-zero gradients compare absolutely
        double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-2});
        if (rel > res.max_rel_err) {
          res.max_rel_err = rel;
          res.worst_tensor = names[t] + "(" + std::to_string(r) + "," + std::to_string(c) + ")";
        }
      }
  }
  return res;
}

template struct ParamsT<float>;
template struct ParamsT<double>;

template TablesT<float> build_tables<float>(const ModelConfig&, const Vocabulary&);
template TablesT<double> build_tables<double>(const ModelConfig&, const Vocabulary&);

template void forward<float>(const ParamsT<float>&, const TablesT<float>&, const std::vector<int>&,
                             const AttentionMasks&, const std::vector<int>&, TraceT<float>&, Rng*);
template void forward<double>(const ParamsT<double>&, const TablesT<double>&,
                              const std::vector<int>&, const AttentionMasks&,
                              const std::vector<int>&, TraceT<double>&, Rng*);

template float nll_loss<float>(const Mat<float>&, const std::vector<int>&);
template double nll_loss<double>(const Mat<double>&, const std::vector<int>&);

template void backward<float>(const ParamsT<float>&, const TablesT<float>&, const TraceT<float>&,
                              const std::vector<int>&, float, ParamsT<float>&);
template void backward<double>(const ParamsT<double>&, const TablesT<double>&,
                               const TraceT<double>&, const std::vector<int>&, double,
                               ParamsT<double>&);

template double adam_step<float>(ParamsT<float>&, ParamsT<float>&, AdamStateT<float>&,
                                 const AdamConfig&);
template double adam_step<double>(ParamsT<double>&, ParamsT<double>&, AdamStateT<double>&,
                                  const AdamConfig&);

}  // namespace rt
