#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "rt/encodings.hpp"
#include "rt/masking.hpp"
#include "rt/rng.hpp"
#include "rt/tokens.hpp"

namespace rt {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

struct ModelConfig {
  int vocab_size = 0;
  int n_layers = 2;
  int d_e = 64;
  int d_ff = 256;
  int n_heads = 4;
  int max_len = 256;
  double dropout = 0.0;
  bool sinusoidal_positions = true;
  EncodingConfig encoding;

  // CONCAT widens the stream past the embedding table, which forces an untied output head
  int d_model() const {
    return encoding.mode != NeMode::None && encoding.combine == NeCombine::Concat
               ? d_e + encoding.ne_dim
               : d_e;
  }
  bool tied_output() const { return d_model() == d_e; }
  // encoding config with the model width stamped in (single source of truth is d_e here)
  EncodingConfig enc() const {
    EncodingConfig e = encoding;
    e.d_e = d_e;
    return e;
  }
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& s);
};

template <class S>
struct LayerParamsT {
  Mat<S> ln1_g, ln1_b;
  Mat<S> Wq, Wk, Wv, Wo;
  Mat<S> bq, bk, bv, bo;
  Mat<S> ln2_g, ln2_b;
  Mat<S> W1, b1, W2, b2;
};

template <class S>
struct ParamsT {
  ModelConfig cfg;
  Mat<S> emb;      // V x d_e
  Mat<S> w_query;  // 1 x D, query-stream start vector
  std::vector<LayerParamsT<S>> layers;
  Mat<S> lnf_g, lnf_b;  // 1 x D
  Mat<S> w_out;         // V x D, only when untied
  Mat<S> b_out;         // 1 x V

  // fan-in scaled uniform init for matrices, zeros for biases
  static ParamsT init(const ModelConfig& cfg, uint64_t seed);
  static ParamsT zeros_like(const ParamsT& other);
  void set_zero();
  size_t num_params() const;

  // canonical tensor enumeration; drives adam, checkpoints, and the gradient check
  template <class F>
  void visit(F&& f) {
    f("emb", emb);
    f("w_query", w_query);
    for (size_t i = 0; i < layers.size(); ++i) {
      auto& L = layers[i];
      std::string p = "layers." + std::to_string(i) + ".";
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "Wq", L.Wq);
      f(p + "Wk", L.Wk);
      f(p + "Wv", L.Wv);
      f(p + "Wo", L.Wo);
      f(p + "bq", L.bq);
      f(p + "bk", L.bk);
      f(p + "bv", L.bv);
      f(p + "bo", L.bo);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
      f(p + "W1", L.W1);
      f(p + "b1", L.b1);
      f(p + "W2", L.W2);
      f(p + "b2", L.b2);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
    if (w_out.size() > 0) f("w_out", w_out);
    f("b_out", b_out);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<ParamsT*>(this)->visit([&](const std::string& n, Mat<S>& m) {
      f(n, static_cast<const Mat<S>&>(m));
    });
  }
};

using Params = ParamsT<float>;
using ParamsD = ParamsT<double>;

// lookup tables derived from vocabulary + config (not learned)
template <class S>
struct TablesT {
  Mat<S> ne;   // V x ne_dim
  Mat<S> pos;  // max_len x d_e
};

template <class S>
TablesT<S> build_tables(const ModelConfig& cfg, const Vocabulary& vocab);

// activations kept by forward for the matching backward call
template <class S>
struct LayerTraceT {
  Mat<S> Xn, K, V, Qc, Ac, X2, X2n_store, Z1, A1, X3;
  Mat<S> mu1, rstd1, mu2, rstd2;
  std::vector<Mat<S>> Pc;  // per head, T x T
  Mat<S> Gn, Qg, Aq, G2, G2n_store, Zq1, Aq1, G3;
  Mat<S> muq1, rstdq1, muq2, rstdq2;
  std::vector<Mat<S>> Pq;  // per head, nt x T
  Mat<S> drop_attn_c, drop_ff_c, drop_attn_q, drop_ff_q;  // kept-mask * 1/(1-p); empty if unused
  bool content_updated = false;  // content attention+ff skipped on the last layer
};

template <class S>
struct TraceT {
  std::vector<int> ids;
  std::vector<int> targets;
  Mat<S> X0, G0;
  std::vector<LayerTraceT<S>> layers;
  Mat<S> Gf, muf, rstdf;
  Mat<S> logits;  // nt x V
  std::vector<uint8_t> q_row_visible;
};

// computes per-target logits; dropout applies only when cfg.dropout > 0 and rng != nullptr
template <class S>
void forward(const ParamsT<S>& p, const TablesT<S>& tb, const std::vector<int>& ids,
             const AttentionMasks& masks, const std::vector<int>& targets, TraceT<S>& trace,
             Rng* dropout_rng = nullptr);

// mean negative log likelihood over target rows
template <class S>
S nll_loss(const Mat<S>& logits, const std::vector<int>& gold);

// accumulates d(scale * sum of per-target nll)/d(params) into grads
template <class S>
void backward(const ParamsT<S>& p, const TablesT<S>& tb, const TraceT<S>& trace,
              const std::vector<int>& gold, S scale, ParamsT<S>& grads);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;
};

template <class S>
struct AdamStateT {
  ParamsT<S> m, v;
  long long t = 0;
  static AdamStateT zeros_like(const ParamsT<S>& params) {
    return AdamStateT{ParamsT<S>::zeros_like(params), ParamsT<S>::zeros_like(params), 0};
  }
};

// clips the global grad norm, applies one update; returns the pre-clip norm
template <class S>
double adam_step(ParamsT<S>& params, ParamsT<S>& grads, AdamStateT<S>& state, const AdamConfig& cfg);

struct CheckpointMeta {
  long long step = 0;
  uint64_t vocab_hash = 0;
};

// header json + little-endian float32 payload; optimizer state rides along when given
void save_checkpoint(const std::string& path, const Params& params, const CheckpointMeta& meta,
                     const AdamStateT<float>* opt = nullptr);
Params load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr,
                       AdamStateT<float>* opt = nullptr);

// max relative error between analytic gradients and central differences over all parameters
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_tensor;
};
GradCheckResult finite_difference_check(const ParamsD& params, const TablesT<double>& tables,
                                        const std::vector<int>& ids, const AttentionMasks& masks,
                                        const std::vector<int>& targets, const std::vector<int>& gold,
                                        double h = 1e-5);

}  // namespace rt
