// Encoder f (MLP), decoder-only transformer h over context tokens, and the
// auxiliary predictor head g, with hand-written reverse-mode gradients.
//
// All parameters live in one flat buffer described by a ParamLayout, which
// keeps the optimizer, checkpointing and finite-difference checks uniform.
// The scalar type is a template parameter: training runs in float, gradient
// checks in double.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ctxssl/attention_mask.hpp"
#include "ctxssl/error.hpp"
#include "ctxssl/group_transforms.hpp"
#include "ctxssl/rng.hpp"

namespace ctxssl {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

/// Which features the auxiliary predictor reads at a token.
enum class Positional {
  None,     // order reaches the model only through the attention mask
  Learned,  // absolute learned embedding per position
};

enum class PredictorInput {
  TransformerOut,  // raw transformer output embedding (default)
  EncoderConcat,   // the token itself: [encoder rep | action]
};

struct ModelConfig {
  int obs_dim = 128;
  int enc_hidden = 256;
  int rep_dim = 64;
  int model_dim = 128;
  int n_layers = 3;
  int n_heads = 4;
  int ff_mult = 4;
  int max_positions = 64;
  int out_dim = 64;
  int pred_hidden = 128;
  int t_dim = 11;
  Positional positional = Positional::None;
  PredictorInput predictor_input = PredictorInput::TransformerOut;

  int token_dim() const { return rep_dim + static_cast<int>(kActionDim); }
  int head_dim() const { return model_dim / n_heads; }
  int pred_in_dim() const {
    return predictor_input == PredictorInput::TransformerOut ? out_dim : token_dim();
  }

  void validate() const {
    require(obs_dim > 0 && enc_hidden > 0 && rep_dim > 0 && model_dim > 0 && n_layers >= 0 &&
                n_heads > 0 && ff_mult > 0 && max_positions > 0 && out_dim > 0 &&
                pred_hidden > 0 && t_dim > 0,
            ErrorKind::Config, "model dimensions must be positive");
    require(model_dim % n_heads == 0, ErrorKind::Config, "model_dim must be divisible by n_heads");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"obs_dim", c.obs_dim},         {"enc_hidden", c.enc_hidden},
                     {"rep_dim", c.rep_dim},         {"model_dim", c.model_dim},
                     {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                     {"ff_mult", c.ff_mult},         {"max_positions", c.max_positions},
                     {"out_dim", c.out_dim},         {"pred_hidden", c.pred_hidden},
                     {"t_dim", c.t_dim},
                     {"positional", c.positional == Positional::Learned ? "learned" : "none"},
                     {"predictor_input", c.predictor_input == PredictorInput::TransformerOut
                                             ? "transformer_out"
                                             : "encoder_concat"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.obs_dim = j.at("obs_dim");
  c.enc_hidden = j.at("enc_hidden");
  c.rep_dim = j.at("rep_dim");
  c.model_dim = j.at("model_dim");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.ff_mult = j.at("ff_mult");
  c.max_positions = j.at("max_positions");
  c.out_dim = j.at("out_dim");
  c.pred_hidden = j.at("pred_hidden");
  c.t_dim = j.at("t_dim");
  const std::string pe = j.at("positional");
  if (pe == "learned") c.positional = Positional::Learned;
  else if (pe == "none") c.positional = Positional::None;
  else throw Error(ErrorKind::Config, "unknown positional '" + pe + "'");
  const std::string pi = j.at("predictor_input");
  if (pi == "transformer_out") c.predictor_input = PredictorInput::TransformerOut;
  else if (pi == "encoder_concat") c.predictor_input = PredictorInput::EncoderConcat;
  else throw Error(ErrorKind::Config, "unknown predictor_input '" + pi + "'");
}

// ---------------------------------------------------------------------------
// Parameter layout

struct ParamEntry {
  std::string name;
  int rows = 0, cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

class ParamLayout {
 public:
  ParamLayout() = default;

  explicit ParamLayout(const ModelConfig& c) {
    const int D = c.model_dim, F = c.ff_mult * c.model_dim;
    add("enc.w1", c.enc_hidden, c.obs_dim);
    add("enc.b1", 1, c.enc_hidden);
    add("enc.w2", c.rep_dim, c.enc_hidden);
    add("enc.b2", 1, c.rep_dim);
    add("in.w", D, c.token_dim());
    add("in.b", 1, D);
    if (c.positional == Positional::Learned) add("pos", c.max_positions, D);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add(p + "ln1.g", 1, D);
      add(p + "ln1.b", 1, D);
      add(p + "wq", D, D);
      add(p + "bq", 1, D);
      add(p + "wk", D, D);
      add(p + "bk", 1, D);
      add(p + "wv", D, D);
      add(p + "bv", 1, D);
      add(p + "wo", D, D);
      add(p + "bo", 1, D);
      add(p + "ln2.g", 1, D);
      add(p + "ln2.b", 1, D);
      add(p + "ff.w1", F, D);
      add(p + "ff.b1", 1, F);
      add(p + "ff.w2", D, F);
      add(p + "ff.b2", 1, D);
    }
    add("lnf.g", 1, D);
    add("lnf.b", 1, D);
    add("out.w", c.out_dim, D);
    add("out.b", 1, c.out_dim);
    add("pred.w1", c.pred_hidden, c.pred_in_dim());
    add("pred.b1", 1, c.pred_hidden);
    add("pred.w2", c.t_dim, c.pred_hidden);
    add("pred.b2", 1, c.t_dim);
  }

  std::size_t total() const { return total_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }

  const ParamEntry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorKind::Shape, "unknown parameter '" + name + "'");
    return entries_[it->second];
  }

  bool is_predictor(const ParamEntry& e) const { return e.name.rfind("pred.", 0) == 0; }

 private:
  void add(const std::string& name, int rows, int cols) {
    index_[name] = entries_.size();
    entries_.push_back({name, rows, cols, total_});
    total_ += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }

  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Small numeric kernels

namespace nn {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T t = std::tanh(c * (x + static_cast<T>(0.044715) * x * x * x));
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + t);
}

template <typename T>
T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T a = static_cast<T>(0.044715);
  const T t = std::tanh(c * (x + a * x * x * x));
  return static_cast<T>(0.5) * (static_cast<T>(1) + t) +
         static_cast<T>(0.5) * x * (static_cast<T>(1) - t * t) * c *
             (static_cast<T>(1) + static_cast<T>(3) * a * x * x);
}

/// y = x W^T + b
template <typename T>
void linear(const Mat<T>& x, const ConstMatMap<T>& w, const ConstMatMap<T>& b, Mat<T>& y) {
  y.noalias() = x * w.transpose();
  y.rowwise() += b.row(0);
}

/// Same as `linear`, but every row goes through the same matrix-vector
/// kernel, so a row's result does not depend on the rest of the batch.
template <typename T>
void linear_rowwise(const Mat<T>& x, const ConstMatMap<T>& w, const ConstMatMap<T>& b, Mat<T>& y) {
  y.resize(x.rows(), w.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) y.row(i).noalias() = x.row(i) * w.transpose();
  y.rowwise() += b.row(0);
}

/// Accumulates dW += dy^T x, db += colsum(dy); returns dx = dy W when wanted.
template <typename T>
void linear_backward(const Mat<T>& x, const Mat<T>& dy, const ConstMatMap<T>& w, MatMap<T> dw,
                     MatMap<T> db, Mat<T>* dx) {
  dw.noalias() += dy.transpose() * x;
  db.row(0) += dy.colwise().sum();
  if (dx) dx->noalias() = dy * w;
}

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
void layer_norm(const Mat<T>& x, const ConstMatMap<T>& g, const ConstMatMap<T>& b, Mat<T>& y,
                LayerNormCache<T>& cache) {
  const Eigen::Index n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(static_cast<std::size_t>(n));
  y.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rstd = static_cast<T>(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    cache.rstd[static_cast<std::size_t>(i)] = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
    y.row(i) = cache.xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
  }
}

template <typename T>
void layer_norm_backward(const Mat<T>& dy, const LayerNormCache<T>& cache, const ConstMatMap<T>& g,
                         MatMap<T> dg, MatMap<T> db, Mat<T>& dx) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  dx.resize(n, d);
  dg.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
  db.row(0) += dy.colwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<T> dxhat = dy.row(i).cwiseProduct(g.row(0));
    const T m1 = dxhat.mean();
    const T m2 = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
    dx.row(i) = (dxhat.array() - m1 - cache.xhat.row(i).array() * m2) *
                cache.rstd[static_cast<std::size_t>(i)];
  }
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Forward inputs and traces

/// One attention segment: a contiguous block of rows that attend among
/// themselves under `mask`, with explicit position indices per row.
struct Segment {
  int offset = 0;
  int length = 0;
  MaskMatrix mask;
  std::vector<int> positions;
};

/// Standard context segment: positions 0..n-1.
inline Segment make_segment(int offset, MaskMatrix mask) {
  Segment s;
  s.offset = offset;
  s.length = mask.size();
  s.positions.resize(static_cast<std::size_t>(s.length));
  for (int i = 0; i < s.length; ++i) s.positions[static_cast<std::size_t>(i)] = i;
  s.mask = std::move(mask);
  return s;
}

template <typename T>
struct EncoderTrace {
  Mat<T> obs, h1, rep;
};

template <typename T>
struct LayerTrace {
  Mat<T> x_in;
  nn::LayerNormCache<T> ln1;
  Mat<T> a_in, q, k, v, ctx;
  // Attention probabilities over visible keys, flattened in segment, head,
  // row, visible-key order.
  std::vector<T> probs;
  Mat<T> x_mid;
  nn::LayerNormCache<T> ln2;
  Mat<T> f_in, f_pre, f_act;
};

template <typename T>
struct ForwardTrace {
  std::uint64_t params_version = 0;
  std::vector<Segment> segments;
  // Visible key lists per segment row (relative indices), from the masks.
  std::vector<std::vector<std::vector<int>>> visible;
  Mat<T> tokens;
  Mat<T> x0;
  std::vector<LayerTrace<T>> layers;
  Mat<T> x_final;
  nn::LayerNormCache<T> lnf;
  Mat<T> f_out;
  Mat<T> outputs;     // raw output embeddings
  Mat<T> normalized;  // L2-normalized copies of `outputs`
  std::vector<T> norms;
};

/// Post-softmax attention weight of key `key` for query `row` (both relative
/// to segment `seg`) in one layer and head; exactly 0 for hidden keys.
template <typename T>
T attention_weight(const ForwardTrace<T>& tr, int n_heads, int layer, int head, std::size_t seg,
                   int row, int key) {
  std::size_t idx = 0;
  for (std::size_t s = 0; s < tr.segments.size(); ++s) {
    for (int h = 0; h < n_heads; ++h) {
      for (int i = 0; i < tr.segments[s].length; ++i) {
        const auto& vis = tr.visible[s][static_cast<std::size_t>(i)];
        if (s == seg && h == head && i == row) {
          for (std::size_t t = 0; t < vis.size(); ++t)
            if (vis[t] == key) return tr.layers[static_cast<std::size_t>(layer)].probs[idx + t];
          return T(0);
        }
        idx += vis.size();
      }
    }
  }
  throw Error(ErrorKind::Shape, "attention_weight: index out of range");
}

template <typename T>
struct PredictorTrace {
  std::uint64_t params_version = 0;
  std::vector<int> rows;
  Mat<T> input, pre, act, out;
};

template <typename T>
struct TokenGrad {
  Mat<T> d_tokens;
};

// ---------------------------------------------------------------------------
// Model

template <typename T>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, Rng& init_rng) : cfg_(cfg), layout_(cfg) {
    cfg_.validate();
    params_.assign(layout_.total(), T(0));
    initialize(init_rng);
  }

  /// Zero-initialized parameters.
  explicit Model(const ModelConfig& cfg) : cfg_(cfg), layout_(cfg) {
    cfg_.validate();
    params_.assign(layout_.total(), T(0));
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<const T> params() const { return params_; }

  /// Mutable access invalidates outstanding traces.
  std::span<T> params_mut() {
    ++version_;
    return params_;
  }
  std::uint64_t version() const { return version_; }

  ConstMatMap<T> p(const std::string& name) const {
    const ParamEntry& e = layout_.at(name);
    return ConstMatMap<T>(params_.data() + e.offset, e.rows, e.cols);
  }

  MatMap<T> g(std::vector<T>& grads, const std::string& name) const {
    const ParamEntry& e = layout_.at(name);
    return MatMap<T>(grads.data() + e.offset, e.rows, e.cols);
  }

  std::vector<T> zero_grads() const { return std::vector<T>(layout_.total(), T(0)); }

  template <typename U>
  Model<U> cast() const {
    Model<U> m(cfg_);
    auto dst = m.params_mut();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<U>(params_[i]);
    return m;
  }

  // ---- encoder ------------------------------------------------------------

  Mat<T> encode(const Mat<T>& obs) const {
    EncoderTrace<T> tr;
    encode(obs, tr);
    return tr.rep;
  }

  void encode(const Mat<T>& obs, EncoderTrace<T>& tr) const {
    require(obs.cols() == cfg_.obs_dim, ErrorKind::Shape, "encode: observation width mismatch");
    tr.obs = obs;
    nn::linear_rowwise<T>(obs, p("enc.w1"), p("enc.b1"), tr.h1);
    tr.h1 = tr.h1.array().tanh().matrix();
    nn::linear_rowwise<T>(tr.h1, p("enc.w2"), p("enc.b2"), tr.rep);
  }

  void encode_backward(const EncoderTrace<T>& tr, const Mat<T>& d_rep, std::vector<T>& grads) const {
    Mat<T> d_h1;
    nn::linear_backward<T>(tr.h1, d_rep, p("enc.w2"), g(grads, "enc.w2"), g(grads, "enc.b2"), &d_h1);
    const Mat<T> d_pre = d_h1.cwiseProduct((T(1) - tr.h1.array().square()).matrix());
    nn::linear_backward<T>(tr.obs, d_pre, p("enc.w1"), g(grads, "enc.w1"), g(grads, "enc.b1"), nullptr);
  }

  // ---- transformer --------------------------------------------------------

  /// tokens: N x token_dim, rows grouped into `segments` that cover 0..N-1.
  ForwardTrace<T> transformer_forward(const Mat<T>& tokens, std::vector<Segment> segments) const {
    require(tokens.cols() == cfg_.token_dim(), ErrorKind::Shape, "token width mismatch");
    ForwardTrace<T> tr;
    tr.params_version = version_;
    int covered = 0;
    for (const auto& s : segments) {
      require(s.offset == covered && s.length == s.mask.size() &&
                  static_cast<int>(s.positions.size()) == s.length,
              ErrorKind::Shape, "segment/mask shape mismatch");
      for (int pos : s.positions)
        require(pos >= 0 && pos < cfg_.max_positions, ErrorKind::Shape,
                "position exceeds max_positions");
      covered += s.length;
    }
    require(covered == tokens.rows(), ErrorKind::Shape, "segments do not cover all tokens");
    tr.segments = std::move(segments);
    tr.visible.resize(tr.segments.size());
    for (std::size_t s = 0; s < tr.segments.size(); ++s) {
      const auto& seg = tr.segments[s];
      auto& vis = tr.visible[s];
      vis.resize(static_cast<std::size_t>(seg.length));
      for (int i = 0; i < seg.length; ++i) {
        require(seg.mask.visible(i, i), ErrorKind::Shape, "mask hides a token from itself");
        for (int j = 0; j < seg.length; ++j)
          if (seg.mask.visible(i, j)) vis[static_cast<std::size_t>(i)].push_back(j);
      }
    }

    tr.tokens = tokens;
    nn::linear<T>(tokens, p("in.w"), p("in.b"), tr.x0);
    if (cfg_.positional == Positional::Learned) {
      const auto pos = p("pos");
      for (const auto& seg : tr.segments)
        for (int i = 0; i < seg.length; ++i)
          tr.x0.row(seg.offset + i) += pos.row(seg.positions[static_cast<std::size_t>(i)]);
    }

    Mat<T> x = tr.x0;
    tr.layers.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      LayerTrace<T>& L = tr.layers[static_cast<std::size_t>(l)];
      L.x_in = x;
      nn::layer_norm<T>(x, p(pre + "ln1.g"), p(pre + "ln1.b"), L.a_in, L.ln1);
      nn::linear<T>(L.a_in, p(pre + "wq"), p(pre + "bq"), L.q);
      nn::linear<T>(L.a_in, p(pre + "wk"), p(pre + "bk"), L.k);
      nn::linear<T>(L.a_in, p(pre + "wv"), p(pre + "bv"), L.v);
      attention_forward(tr, L);
      Mat<T> attn_out;
      nn::linear<T>(L.ctx, p(pre + "wo"), p(pre + "bo"), attn_out);
      L.x_mid = x + attn_out;
      nn::layer_norm<T>(L.x_mid, p(pre + "ln2.g"), p(pre + "ln2.b"), L.f_in, L.ln2);
      nn::linear<T>(L.f_in, p(pre + "ff.w1"), p(pre + "ff.b1"), L.f_pre);
      L.f_act = L.f_pre.unaryExpr([](T v) { return nn::gelu(v); });
      Mat<T> f_out;
      nn::linear<T>(L.f_act, p(pre + "ff.w2"), p(pre + "ff.b2"), f_out);
      x = L.x_mid + f_out;
    }
    tr.x_final = x;
    nn::layer_norm<T>(x, p("lnf.g"), p("lnf.b"), tr.f_out, tr.lnf);
    nn::linear<T>(tr.f_out, p("out.w"), p("out.b"), tr.outputs);

    const Eigen::Index n = tr.outputs.rows();
    tr.normalized.resize(n, tr.outputs.cols());
    tr.norms.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const T nr = tr.outputs.row(i).norm();
      require(nr > T(0), ErrorKind::Numeric, "zero-norm output embedding");
      tr.norms[static_cast<std::size_t>(i)] = nr;
      tr.normalized.row(i) = tr.outputs.row(i) / nr;
    }
    return tr;
  }

  /// Gradient of the transformer w.r.t. its parameters and tokens given
  /// upstream gradients on raw outputs and on normalized outputs.
  Mat<T> transformer_backward(const ForwardTrace<T>& tr, const Mat<T>* d_raw,
                              const Mat<T>* d_normalized, std::vector<T>& grads) const {
    require(tr.params_version == version_, ErrorKind::Shape, "stale forward trace");
    const Eigen::Index n = tr.outputs.rows();
    Mat<T> d_out = Mat<T>::Zero(n, tr.outputs.cols());
    if (d_raw) {
      require(d_raw->rows() == n && d_raw->cols() == d_out.cols(), ErrorKind::Shape,
              "raw output gradient shape mismatch");
      d_out += *d_raw;
    }
    if (d_normalized) {
      require(d_normalized->rows() == n && d_normalized->cols() == d_out.cols(), ErrorKind::Shape,
              "normalized output gradient shape mismatch");
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto z = tr.normalized.row(i);
        const auto dz = d_normalized->row(i);
        d_out.row(i) += (dz - z * z.dot(dz)) / tr.norms[static_cast<std::size_t>(i)];
      }
    }

    Mat<T> d_f;
    nn::linear_backward<T>(tr.f_out, d_out, p("out.w"), g(grads, "out.w"), g(grads, "out.b"), &d_f);
    Mat<T> dx;
    nn::layer_norm_backward<T>(d_f, tr.lnf, p("lnf.g"), g(grads, "lnf.g"), g(grads, "lnf.b"), dx);

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      const LayerTrace<T>& L = tr.layers[static_cast<std::size_t>(l)];
      // x_out = x_mid + ff(ln2(x_mid))
      Mat<T> d_act;
      nn::linear_backward<T>(L.f_act, dx, p(pre + "ff.w2"), g(grads, pre + "ff.w2"),
                             g(grads, pre + "ff.b2"), &d_act);
      const Mat<T> d_pre = d_act.cwiseProduct(L.f_pre.unaryExpr([](T v) { return nn::gelu_grad(v); }));
      Mat<T> d_fin;
      nn::linear_backward<T>(L.f_in, d_pre, p(pre + "ff.w1"), g(grads, pre + "ff.w1"),
                             g(grads, pre + "ff.b1"), &d_fin);
      Mat<T> d_mid;
      nn::layer_norm_backward<T>(d_fin, L.ln2, p(pre + "ln2.g"), g(grads, pre + "ln2.g"),
                                 g(grads, pre + "ln2.b"), d_mid);
      d_mid += dx;
      // x_mid = x_in + wo(attn(ln1(x_in)))
      Mat<T> d_ctx;
      nn::linear_backward<T>(L.ctx, d_mid, p(pre + "wo"), g(grads, pre + "wo"), g(grads, pre + "bo"),
                             &d_ctx);
      Mat<T> dq, dk, dv;
      attention_backward(tr, L, d_ctx, dq, dk, dv);
      Mat<T> d_ain, tmp;
      nn::linear_backward<T>(L.a_in, dq, p(pre + "wq"), g(grads, pre + "wq"), g(grads, pre + "bq"), &d_ain);
      nn::linear_backward<T>(L.a_in, dk, p(pre + "wk"), g(grads, pre + "wk"), g(grads, pre + "bk"), &tmp);
      d_ain += tmp;
      nn::linear_backward<T>(L.a_in, dv, p(pre + "wv"), g(grads, pre + "wv"), g(grads, pre + "bv"), &tmp);
      d_ain += tmp;
      Mat<T> d_in;
      nn::layer_norm_backward<T>(d_ain, L.ln1, p(pre + "ln1.g"), g(grads, pre + "ln1.g"),
                                 g(grads, pre + "ln1.b"), d_in);
      dx = d_in + d_mid;
    }

    if (cfg_.positional == Positional::Learned) {
      auto dpos = g(grads, "pos");
      for (const auto& seg : tr.segments)
        for (int i = 0; i < seg.length; ++i)
          dpos.row(seg.positions[static_cast<std::size_t>(i)]) += dx.row(seg.offset + i);
    }
    Mat<T> d_tokens;
    nn::linear_backward<T>(tr.tokens, dx, p("in.w"), g(grads, "in.w"), g(grads, "in.b"), &d_tokens);
    return d_tokens;
  }

  // ---- predictor ----------------------------------------------------------

  PredictorTrace<T> predictor_forward(const ForwardTrace<T>& tr, const std::vector<int>& rows) const {
    PredictorTrace<T> pt;
    pt.params_version = version_;
    pt.rows = rows;
    const Mat<T>& src =
        cfg_.predictor_input == PredictorInput::TransformerOut ? tr.outputs : tr.tokens;
    pt.input.resize(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i] >= 0 && rows[i] < src.rows(), ErrorKind::Shape, "predictor index out of range");
      pt.input.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
    }
    nn::linear<T>(pt.input, p("pred.w1"), p("pred.b1"), pt.pre);
    pt.act = pt.pre.unaryExpr([](T v) { return nn::gelu(v); });
    nn::linear<T>(pt.act, p("pred.w2"), p("pred.b2"), pt.out);
    return pt;
  }

  /// Accumulates predictor parameter gradients and scatters the input
  /// gradient into `d_raw` (transformer_out) or `d_tokens` (encoder_concat).
  void predictor_backward(const PredictorTrace<T>& pt, const Mat<T>& d_pred, std::vector<T>& grads,
                          Mat<T>& d_raw, Mat<T>& d_tokens) const {
    require(pt.params_version == version_, ErrorKind::Shape, "stale predictor trace");
    Mat<T> d_act;
    nn::linear_backward<T>(pt.act, d_pred, p("pred.w2"), g(grads, "pred.w2"), g(grads, "pred.b2"), &d_act);
    const Mat<T> d_pre = d_act.cwiseProduct(pt.pre.unaryExpr([](T v) { return nn::gelu_grad(v); }));
    Mat<T> d_in;
    nn::linear_backward<T>(pt.input, d_pre, p("pred.w1"), g(grads, "pred.w1"), g(grads, "pred.b1"), &d_in);
    Mat<T>& dst = cfg_.predictor_input == PredictorInput::TransformerOut ? d_raw : d_tokens;
    for (std::size_t i = 0; i < pt.rows.size(); ++i) dst.row(pt.rows[i]) += d_in.row(static_cast<Eigen::Index>(i));
  }

 private:
  void initialize(Rng& rng) {
    auto fill_normal = [&](const std::string& name, double std) {
      const ParamEntry& e = layout_.at(name);
      for (std::size_t i = 0; i < e.size(); ++i) params_[e.offset + i] = static_cast<T>(std * rng.normal());
    };
    auto fill_const = [&](const std::string& name, double v) {
      const ParamEntry& e = layout_.at(name);
      for (std::size_t i = 0; i < e.size(); ++i) params_[e.offset + i] = static_cast<T>(v);
    };
    auto fan_in = [](int n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    const int D = cfg_.model_dim, F = cfg_.ff_mult * D;
    fill_normal("enc.w1", fan_in(cfg_.obs_dim));
    fill_normal("enc.w2", fan_in(cfg_.enc_hidden));
    fill_normal("in.w", fan_in(cfg_.token_dim()));
    if (cfg_.positional == Positional::Learned) fill_normal("pos", 0.02);
    const double resid = 1.0 / std::sqrt(2.0 * std::max(1, cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      fill_const(pre + "ln1.g", 1.0);
      fill_const(pre + "ln2.g", 1.0);
      fill_normal(pre + "wq", fan_in(D));
      fill_normal(pre + "wk", fan_in(D));
      fill_normal(pre + "wv", fan_in(D));
      fill_normal(pre + "wo", fan_in(D) * resid);
      fill_normal(pre + "ff.w1", fan_in(D));
      fill_normal(pre + "ff.w2", fan_in(F) * resid);
    }
    fill_const("lnf.g", 1.0);
    fill_normal("out.w", fan_in(D));
    fill_normal("pred.w1", fan_in(cfg_.pred_in_dim()));
    fill_normal("pred.w2", fan_in(cfg_.pred_hidden));
  }

  void attention_forward(ForwardTrace<T>& tr, LayerTrace<T>& L) const {
    const int H = cfg_.n_heads, dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    L.ctx = Mat<T>::Zero(L.q.rows(), L.q.cols());
    L.probs.clear();
    std::vector<T> scores;
    for (std::size_t s = 0; s < tr.segments.size(); ++s) {
      const Segment& seg = tr.segments[s];
      for (int h = 0; h < H; ++h) {
        for (int i = 0; i < seg.length; ++i) {
          const auto& vis = tr.visible[s][static_cast<std::size_t>(i)];
          const int qi = seg.offset + i;
          const T* q = L.q.row(qi).data() + h * dh;
          scores.resize(vis.size());
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t t = 0; t < vis.size(); ++t) {
            const T* k = L.k.row(seg.offset + vis[t]).data() + h * dh;
            T acc = 0;
            for (int d = 0; d < dh; ++d) acc += q[d] * k[d];
            scores[t] = acc * scale;
            mx = std::max(mx, scores[t]);
          }
          T denom = 0;
          for (auto& sc : scores) {
            sc = std::exp(sc - mx);
            denom += sc;
          }
          T* out = L.ctx.row(qi).data() + h * dh;
          for (std::size_t t = 0; t < vis.size(); ++t) {
            const T pr = scores[t] / denom;
            L.probs.push_back(pr);
            const T* v = L.v.row(seg.offset + vis[t]).data() + h * dh;
            for (int d = 0; d < dh; ++d) out[d] += pr * v[d];
          }
        }
      }
    }
  }

  void attention_backward(const ForwardTrace<T>& tr, const LayerTrace<T>& L, const Mat<T>& d_ctx,
                          Mat<T>& dq, Mat<T>& dk, Mat<T>& dv) const {
    const int H = cfg_.n_heads, dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    dq = Mat<T>::Zero(L.q.rows(), L.q.cols());
    dk = Mat<T>::Zero(L.k.rows(), L.k.cols());
    dv = Mat<T>::Zero(L.v.rows(), L.v.cols());
    std::size_t pidx = 0;
    std::vector<T> dp;
    for (std::size_t s = 0; s < tr.segments.size(); ++s) {
      const Segment& seg = tr.segments[s];
      for (int h = 0; h < H; ++h) {
        for (int i = 0; i < seg.length; ++i) {
          const auto& vis = tr.visible[s][static_cast<std::size_t>(i)];
          const int qi = seg.offset + i;
          const T* go = d_ctx.row(qi).data() + h * dh;
          const T* probs = L.probs.data() + pidx;
          dp.resize(vis.size());
          T dot = 0;
          for (std::size_t t = 0; t < vis.size(); ++t) {
            const int kj = seg.offset + vis[t];
            const T* v = L.v.row(kj).data() + h * dh;
            T* gv = dv.row(kj).data() + h * dh;
            T acc = 0;
            for (int d = 0; d < dh; ++d) {
              acc += go[d] * v[d];
              gv[d] += probs[t] * go[d];
            }
            dp[t] = acc;
            dot += probs[t] * acc;
          }
          const T* q = L.q.row(qi).data() + h * dh;
          T* gq = dq.row(qi).data() + h * dh;
          for (std::size_t t = 0; t < vis.size(); ++t) {
            const T ds = probs[t] * (dp[t] - dot) * scale;
            const int kj = seg.offset + vis[t];
            const T* k = L.k.row(kj).data() + h * dh;
            T* gk = dk.row(kj).data() + h * dh;
            for (int d = 0; d < dh; ++d) {
              gq[d] += ds * k[d];
              gk[d] += ds * q[d];
            }
          }
          pidx += vis.size();
        }
      }
    }
  }

  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<T> params_;
  std::uint64_t version_ = 1;
};

}  // namespace ctxssl
