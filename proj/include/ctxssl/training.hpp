// Optimization loop: per-sequence environment sampling, fresh context masks
// every step, exact gradients, Adam with (by default decoupled) weight decay,
// and bit-exact checkpoints.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxssl/attention_mask.hpp"
#include "ctxssl/error.hpp"
#include "ctxssl/losses.hpp"
#include "ctxssl/model.hpp"
#include "ctxssl/rng.hpp"
#include "ctxssl/synthetic_world.hpp"
#include "ctxssl/tensor_file.hpp"

namespace ctxssl {

enum class TrainMode { ContextSSL, InvariantBaseline, Supervised };

inline std::string_view train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::ContextSSL: return "contextssl";
    case TrainMode::InvariantBaseline: return "invariant_baseline";
    case TrainMode::Supervised: return "supervised";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  for (TrainMode m : {TrainMode::ContextSSL, TrainMode::InvariantBaseline, TrainMode::Supervised})
    if (train_mode_name(m) == s) return m;
  throw Error(ErrorKind::Config, "unknown training mode '" + std::string(s) + "'");
}

struct TrainConfig {
  std::int64_t steps = 10000;
  int batch_sequences = 16;
  int k_max = 32;  // pairs per training sequence
  double lr = 5e-5;
  double weight_decay = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  bool coupled_wd = false;
  MaskConfig mask;
  LossConfig loss;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::ContextSSL;
  std::vector<GroupId> groups;  // empty: every group active in the world
  bool single_group_invariance_env = false;

  void validate() const {
    require(steps > 0 && batch_sequences > 0, ErrorKind::Config, "steps and batch must be positive");
    require(k_max >= 2, ErrorKind::Config, "k_max must be at least 2 (InfoNCE needs a negative)");
    require(lr >= 0.0 && weight_decay >= 0.0, ErrorKind::Config, "lr and weight_decay must be >= 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0,
            ErrorKind::Config, "invalid Adam hyper-parameters");
    mask.validate();
    loss.validate();
  }

  /// Loss weights actually used: the invariant baseline never trains g.
  double effective_lambda() const { return mode == TrainMode::InvariantBaseline ? 0.0 : loss.lambda; }
};

inline void to_json(json& j, const TrainConfig& c) {
  std::vector<std::string> groups;
  for (GroupId g : c.groups) groups.emplace_back(group_name(g));
  j = json{{"steps", c.steps},
           {"batch_sequences", c.batch_sequences},
           {"k_max", c.k_max},
           {"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"eps", c.eps},
           {"coupled_wd", c.coupled_wd},
           {"mask_p", c.mask.p},
           {"mask_pair_exclusion", c.mask.enable_pair_exclusion},
           {"mask_random_drop", c.mask.enable_random_drop},
           {"mask_per_row_draws", c.mask.per_row_draws},
           {"tau", c.loss.tau},
           {"lambda", c.loss.lambda},
           {"symmetric", c.loss.symmetric},
           {"seed", c.seed},
           {"mode", train_mode_name(c.mode)},
           {"groups", groups},
           {"single_group_invariance_env", c.single_group_invariance_env}};
}

inline void from_json(const json& j, TrainConfig& c) {
  c.steps = j.at("steps");
  c.batch_sequences = j.at("batch_sequences");
  c.k_max = j.at("k_max");
  c.lr = j.at("lr");
  c.weight_decay = j.at("weight_decay");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.eps = j.at("eps");
  c.coupled_wd = j.at("coupled_wd");
  c.mask.p = j.at("mask_p");
  c.mask.enable_pair_exclusion = j.at("mask_pair_exclusion");
  c.mask.enable_random_drop = j.at("mask_random_drop");
  c.mask.per_row_draws = j.at("mask_per_row_draws");
  c.loss.tau = j.at("tau");
  c.loss.lambda = j.at("lambda");
  c.loss.symmetric = j.at("symmetric");
  c.seed = j.at("seed");
  c.mode = parse_train_mode(j.at("mode").get<std::string>());
  c.groups.clear();
  for (const auto& g : j.at("groups")) c.groups.push_back(parse_group(g.get<std::string>()));
  c.single_group_invariance_env = j.at("single_group_invariance_env");
}

/// Model shape implied by a world and a training config; only the widths
/// that depend on them are overwritten.
inline ModelConfig resolve_model_config(ModelConfig m, const World& world, const TrainConfig& t) {
  m.obs_dim = world.config().obs_dim;
  m.t_dim = world.target_dim();
  m.max_positions = std::max(m.max_positions, 2 * t.k_max);
  if (t.mode == TrainMode::Supervised) m.out_dim = 2 * world.config().n_classes;
  m.validate();
  return m;
}

/// Label of a supervised sequence: classes shift by n_classes under rotation
/// contexts.
inline int context_label(int class_id, std::optional<GroupId> group, int n_classes) {
  return group == GroupId::Rotation ? class_id + n_classes : class_id;
}

struct TrainState {
  Model<float> model;
  std::vector<float> adam_m, adam_v;
  std::int64_t step = 0;
  Rng data_rng, mask_rng, init_rng;
  TrainConfig train_cfg;
  std::uint64_t world_hash = 0;

  friend bool operator==(const TrainState& a, const TrainState& b) {
    return std::equal(a.model.params().begin(), a.model.params().end(), b.model.params().begin(),
                      b.model.params().end()) &&
           a.adam_m == b.adam_m && a.adam_v == b.adam_v && a.step == b.step &&
           a.data_rng == b.data_rng && a.mask_rng == b.mask_rng && a.init_rng == b.init_rng;
  }
};

inline TrainState make_train_state(const World& world, const ModelConfig& model_cfg,
                                   const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.train_cfg = cfg;
  s.world_hash = world.config_hash();
  s.data_rng = Rng(mix_seed(cfg.seed * 3 + 1));
  s.mask_rng = Rng(mix_seed(cfg.seed * 3 + 2));
  s.init_rng = Rng(mix_seed(cfg.seed * 3 + 3));
  s.model = Model<float>(resolve_model_config(model_cfg, world, cfg), s.init_rng);
  s.adam_m.assign(s.model.layout().total(), 0.0f);
  s.adam_v.assign(s.model.layout().total(), 0.0f);
  return s;
}

// ---------------------------------------------------------------------------
// Batch objective

/// One training batch: sequences laid out back to back, each with 2K rows.
struct Batch {
  std::vector<ContextSequence> sequences;
  std::vector<MaskMatrix> masks;
};

template <typename T>
struct ObjectiveResult {
  LossBreakdown breakdown;
  std::vector<T> grads;
};

/// Stacked observation and action rows of a batch.
template <typename T>
void stack_batch(const Batch& batch, Mat<T>& obs, Mat<T>& actions) {
  Eigen::Index rows = 0;
  for (const auto& s : batch.sequences) rows += 2 * static_cast<Eigen::Index>(s.size());
  const Eigen::Index obs_dim =
      batch.sequences.empty() || batch.sequences[0].pairs.empty()
          ? 0
          : static_cast<Eigen::Index>(batch.sequences[0].pairs[0].x_obs.size());
  obs.resize(rows, obs_dim);
  actions = Mat<T>::Zero(rows, static_cast<Eigen::Index>(kActionDim));
  Eigen::Index r = 0;
  for (const auto& s : batch.sequences) {
    for (const auto& p : s.pairs) {
      for (Eigen::Index k = 0; k < obs_dim; ++k) {
        obs(r, k) = static_cast<T>(p.x_obs[static_cast<std::size_t>(k)]);
        obs(r + 1, k) = static_cast<T>(p.y_obs[static_cast<std::size_t>(k)]);
      }
      for (std::size_t k = 0; k < kActionDim; ++k)
        actions(r, static_cast<Eigen::Index>(k)) = static_cast<T>(p.action.values()[k]);
      r += 2;
    }
  }
}

template <typename T>
Mat<T> concat_tokens(const Mat<T>& reps, const Mat<T>& actions) {
  Mat<T> tokens(reps.rows(), reps.cols() + actions.cols());
  tokens << reps, actions;
  return tokens;
}

/// Contextual objective (contrastive + lambda * predictor) for a batch, with
/// gradients of the total w.r.t. every parameter.
template <typename T>
ObjectiveResult<T> contextual_objective(const Model<T>& model, const World& world, const Batch& batch,
                                        const LossConfig& loss_cfg, double lambda) {
  Mat<T> obs, actions;
  stack_batch(batch, obs, actions);
  EncoderTrace<T> enc;
  model.encode(obs, enc);
  const Mat<T> tokens = concat_tokens(enc.rep, actions);

  std::vector<Segment> segments;
  int offset = 0;
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    segments.push_back(make_segment(offset, batch.masks[b]));
    offset += batch.masks[b].size();
  }
  const ForwardTrace<T> tr = model.transformer_forward(tokens, segments);

  ObjectiveResult<T> res;
  res.grads = model.zero_grads();
  const Eigen::Index n = tr.outputs.rows();
  Mat<T> d_norm = Mat<T>::Zero(n, tr.outputs.cols());
  Mat<T> d_raw = Mat<T>::Zero(n, tr.outputs.cols());
  Mat<T> d_tok = Mat<T>::Zero(n, tokens.cols());

  const T tau = static_cast<T>(loss_cfg.tau);
  const T inv_b = T(1) / static_cast<T>(batch.sequences.size());
  double contrastive = 0.0;
  std::vector<double> per_index;
  std::vector<int> x_rows, y_rows;
  std::vector<std::vector<std::uint8_t>> tmask;
  Mat<T> targets(0, world.target_dim());
  {
    Eigen::Index total_pairs = 0;
    for (const auto& s : batch.sequences) total_pairs += static_cast<Eigen::Index>(s.size());
    targets.resize(total_pairs, world.target_dim());
  }
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    const auto& seq = batch.sequences[b];
    const auto K = static_cast<Eigen::Index>(seq.size());
    const int off = segments[b].offset;
    Mat<T> xe(K, tr.normalized.cols()), ye(K, tr.normalized.cols());
    const auto mask = world.target_mask(seq.group, seq.mode);
    for (Eigen::Index i = 0; i < K; ++i) {
      const int xr = off + 2 * static_cast<int>(i), yr = xr + 1;
      xe.row(i) = tr.normalized.row(xr);
      ye.row(i) = tr.normalized.row(yr);
      const auto row = static_cast<Eigen::Index>(x_rows.size());
      for (int k = 0; k < world.target_dim(); ++k)
        targets(row, k) = static_cast<T>(seq.pairs[static_cast<std::size_t>(i)].t_y[static_cast<std::size_t>(k)]);
      x_rows.push_back(xr);
      y_rows.push_back(yr);
      tmask.push_back(mask);
    }
    auto c = symmetric_contrastive<T>(xe, ye, tau, loss_cfg.symmetric);
    contrastive += static_cast<double>(c.loss) / static_cast<double>(batch.sequences.size());
    if (per_index.size() < c.terms.size()) per_index.resize(c.terms.size(), 0.0);
    for (std::size_t i = 0; i < c.terms.size(); ++i)
      per_index[i] += static_cast<double>(c.terms[i]) / static_cast<double>(batch.sequences.size());
    for (Eigen::Index i = 0; i < K; ++i) {
      d_norm.row(off + 2 * i) += c.d_x.row(i) * inv_b;
      d_norm.row(off + 2 * i + 1) += c.d_y.row(i) * inv_b;
    }
  }

  // Predictor: g at the (x|a) tokens and, in symmetric mode, at y tokens too.
  double predictor = 0.0;
  const T lam = static_cast<T>(lambda);
  auto run_predictor = [&](const std::vector<int>& rows, T weight) {
    const PredictorTrace<T> pt = model.predictor_forward(tr, rows);
    auto mse = predictor_mse<T>(pt.out, targets, tmask);
    predictor += static_cast<double>(weight) * static_cast<double>(mse.loss);
    const Mat<T> d_pred = mse.d_pred * (weight * lam);
    model.predictor_backward(pt, d_pred, res.grads, d_raw, d_tok);
  };
  if (loss_cfg.symmetric) {
    run_predictor(x_rows, T(0.5));
    run_predictor(y_rows, T(0.5));
  } else {
    run_predictor(x_rows, T(1));
  }

  res.breakdown = total_loss(contrastive, predictor, lambda);
  res.breakdown.per_index = std::move(per_index);

  d_tok += model.transformer_backward(tr, &d_raw, &d_norm, res.grads);
  const Mat<T> d_rep = d_tok.leftCols(model.config().rep_dim);
  model.encode_backward(enc, d_rep, res.grads);
  return res;
}

/// Supervised objective: cross-entropy of context-dependent labels at the y
/// tokens. The breakdown reports it as the primary (contrastive) term.
template <typename T>
ObjectiveResult<T> supervised_objective(const Model<T>& model, const World& world, const Batch& batch) {
  Mat<T> obs, actions;
  stack_batch(batch, obs, actions);
  EncoderTrace<T> enc;
  model.encode(obs, enc);
  const Mat<T> tokens = concat_tokens(enc.rep, actions);
  std::vector<Segment> segments;
  int offset = 0;
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    segments.push_back(make_segment(offset, batch.masks[b]));
    offset += batch.masks[b].size();
  }
  const ForwardTrace<T> tr = model.transformer_forward(tokens, segments);
  ObjectiveResult<T> res;
  res.grads = model.zero_grads();
  Mat<T> d_raw = Mat<T>::Zero(tr.outputs.rows(), tr.outputs.cols());
  const int n_classes = world.config().n_classes;
  std::size_t count = 0;
  for (const auto& s : batch.sequences) count += s.size();
  double ce = 0.0;
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    const auto& seq = batch.sequences[b];
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const int row = segments[b].offset + 2 * static_cast<int>(i) + 1;
      const int label = context_label(seq.pairs[i].latent_y.class_id, seq.group, n_classes);
      const auto logits = tr.outputs.row(row);
      const T mx = logits.maxCoeff();
      const T lse = mx + std::log((logits.array() - mx).exp().sum());
      ce += static_cast<double>(lse - logits(label)) / static_cast<double>(count);
      d_raw.row(row) = (logits.array() - lse).exp().matrix() / static_cast<T>(count);
      d_raw(row, label) -= T(1) / static_cast<T>(count);
    }
  }
  res.breakdown = total_loss(ce, 0.0, 0.0);
  const Mat<T> d_tok = model.transformer_backward(tr, &d_raw, nullptr, res.grads);
  const Mat<T> d_rep = d_tok.leftCols(model.config().rep_dim);
  model.encode_backward(enc, d_rep, res.grads);
  return res;
}

// ---------------------------------------------------------------------------
// Steps

struct StepInfo {
  LossBreakdown loss;
  std::vector<std::string> groups;  // per sequence, "<group>" or "<group>:none"
  std::size_t nonzero_actions = 0;  // context pairs whose action is not all zero
};

/// Samples the environment and context of every sequence in a batch.
inline Batch sample_batch(TrainState& state, const World& world) {
  const TrainConfig& cfg = state.train_cfg;
  const std::vector<GroupId>& groups = cfg.groups.empty() ? world.config().active_groups : cfg.groups;
  Batch batch;
  for (int b = 0; b < cfg.batch_sequences; ++b) {
    const GroupId g = groups[state.data_rng.below(groups.size())];
    ContextMode mode = ContextMode::Equivariant;
    if (cfg.mode == TrainMode::InvariantBaseline) mode = ContextMode::Invariant;
    else if (cfg.single_group_invariance_env && state.data_rng.bernoulli(0.5)) mode = ContextMode::Invariant;
    batch.sequences.push_back(sample_context(world, g, cfg.k_max, mode, state.data_rng, cfg.k_max));
    if (cfg.mode == TrainMode::Supervised) {
      batch.masks.push_back(causal_mask(2 * cfg.k_max));
    } else {
      batch.masks.push_back(compose(cfg.mask, cfg.k_max, state.mask_rng));
    }
  }
  return batch;
}

inline void adam_update(TrainState& state, const std::vector<float>& grads) {
  const TrainConfig& c = state.train_cfg;
  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  auto params = state.model.params_mut();
  const auto b1 = static_cast<float>(c.beta1), b2 = static_cast<float>(c.beta2);
  const auto lr = static_cast<float>(c.lr), wd = static_cast<float>(c.weight_decay);
  const auto eps = static_cast<float>(c.eps);
  const auto s1 = static_cast<float>(1.0 / bc1), s2 = static_cast<float>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    float gi = grads[i];
    if (c.coupled_wd) gi += wd * params[i];
    state.adam_m[i] = b1 * state.adam_m[i] + (1.0f - b1) * gi;
    state.adam_v[i] = b2 * state.adam_v[i] + (1.0f - b2) * gi * gi;
    const float mhat = state.adam_m[i] * s1;
    const float vhat = state.adam_v[i] * s2;
    float upd = mhat / (std::sqrt(vhat) + eps);
    if (!c.coupled_wd) upd += wd * params[i];
    params[i] -= lr * upd;
  }
}

inline StepInfo train_step(TrainState& state, const World& world) {
  require(state.world_hash == world.config_hash(), ErrorKind::Mismatch,
          "training state belongs to a different world");
  const TrainConfig& cfg = state.train_cfg;
  const Batch batch = sample_batch(state, world);
  ObjectiveResult<float> obj =
      cfg.mode == TrainMode::Supervised
          ? supervised_objective<float>(state.model, world, batch)
          : contextual_objective<float>(state.model, world, batch, cfg.loss, cfg.effective_lambda());
  if (!std::isfinite(obj.breakdown.total))
    throw Error(ErrorKind::Numeric, "non-finite loss at step " + std::to_string(state.step) +
                                        " (contrastive=" + std::to_string(obj.breakdown.contrastive) +
                                        ", predictor=" + std::to_string(obj.breakdown.predictor) + ")");
  for (float gv : obj.grads)
    if (!std::isfinite(gv))
      throw Error(ErrorKind::Numeric, "non-finite gradient at step " + std::to_string(state.step));
  adam_update(state, obj.grads);
  ++state.step;
  StepInfo info;
  info.loss = std::move(obj.breakdown);
  for (const auto& s : batch.sequences) {
    std::string g = s.group ? std::string(group_name(*s.group)) : "none";
    if (s.group && s.mode == ContextMode::Invariant) g += ":none";
    info.groups.push_back(std::move(g));
    for (const auto& p : s.pairs)
      info.nonzero_actions += std::any_of(p.action.values().begin(), p.action.values().end(),
                                          [](double v) { return v != 0.0; });
  }
  return info;
}

/// Runs steps until state.step == target, calling `on_step` after each one.
inline void train_until(TrainState& state, const World& world, std::int64_t target,
                        const std::function<void(const TrainState&, const StepInfo&)>& on_step = {}) {
  while (state.step < target) {
    const StepInfo info = train_step(state, world);
    if (on_step) on_step(state, info);
  }
}

/// Invariance reference: every action zeroed and the predictor weight at 0.
inline TrainState train_invariant_baseline(TrainState state, const World& world) {
  require(state.train_cfg.mode == TrainMode::InvariantBaseline, ErrorKind::Config,
          "train_invariant_baseline needs mode=invariant_baseline");
  train_until(state, world, state.train_cfg.steps);
  return state;
}

inline TrainState train_supervised(TrainState state, const World& world) {
  require(state.train_cfg.mode == TrainMode::Supervised, ErrorKind::Config,
          "train_supervised needs mode=supervised");
  train_until(state, world, state.train_cfg.steps);
  return state;
}

/// One JSON object per line: {step, contrastive, predictor, total, group, wallclock_ms}.
class TrainLog {
 public:
  explicit TrainLog(const std::filesystem::path& path, bool append = false)
      : os_(path, append ? std::ios::app : std::ios::trunc), start_(std::chrono::steady_clock::now()) {
    require(static_cast<bool>(os_), ErrorKind::Io, "cannot open log " + path.string());
  }

  void write(const TrainState& s, const StepInfo& info) {
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - start_)
                        .count();
    os_ << json{{"step", s.step},
                {"contrastive", info.loss.contrastive},
                {"predictor", info.loss.predictor},
                {"total", info.loss.total},
                {"group", info.groups},
                {"wallclock_ms", ms}}
               .dump()
        << '\n';
  }

 private:
  std::ofstream os_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

inline TensorFile checkpoint_to_file(const TrainState& s) {
  TensorFile f;
  f.kind = "checkpoint";
  f.meta["version"] = kCheckpointVersion;
  f.meta["model_config"] = s.model.config();
  f.meta["train_config"] = s.train_cfg;
  f.meta["world_hash"] = s.world_hash;
  f.meta["step"] = s.step;
  f.meta["rng"] = {{"data", s.data_rng.state()}, {"mask", s.mask_rng.state()}, {"init", s.init_rng.state()}};
  const auto params = s.model.params();
  for (const char* group : {"param", "adam_m", "adam_v"}) {
    const float* src = std::string(group) == "param"    ? params.data()
                       : std::string(group) == "adam_m" ? s.adam_m.data()
                                                        : s.adam_v.data();
    for (const auto& e : s.model.layout().entries()) {
      NamedTensor t;
      t.name = std::string(group) + "/" + e.name;
      t.shape = {e.rows, e.cols};
      t.data.assign(src + e.offset, src + e.offset + e.size());
      f.tensors.push_back(std::move(t));
    }
  }
  return f;
}

inline TrainState checkpoint_from_file(const TensorFile& f) {
  TrainState s;
  ModelConfig mc;
  try {
    require(f.meta.at("version").get<int>() == kCheckpointVersion, ErrorKind::Mismatch,
            "checkpoint version mismatch");
    mc = f.meta.at("model_config").get<ModelConfig>();
    s.train_cfg = f.meta.at("train_config").get<TrainConfig>();
    s.world_hash = f.meta.at("world_hash").get<std::uint64_t>();
    s.step = f.meta.at("step").get<std::int64_t>();
    s.data_rng.restore(f.meta.at("rng").at("data").get<std::string>());
    s.mask_rng.restore(f.meta.at("rng").at("mask").get<std::string>());
    s.init_rng.restore(f.meta.at("rng").at("init").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("corrupt checkpoint manifest: ") + e.what());
  }
  s.model = Model<float>(mc);
  s.adam_m.assign(s.model.layout().total(), 0.0f);
  s.adam_v.assign(s.model.layout().total(), 0.0f);
  auto params = s.model.params_mut();
  for (const char* group : {"param", "adam_m", "adam_v"}) {
    float* dst = std::string(group) == "param"    ? params.data()
                 : std::string(group) == "adam_m" ? s.adam_m.data()
                                                  : s.adam_v.data();
    for (const auto& e : s.model.layout().entries()) {
      const NamedTensor& t = f.get(std::string(group) + "/" + e.name);
      require(t.shape.size() == 2 && t.shape[0] == e.rows && t.shape[1] == e.cols, ErrorKind::Shape,
              "shape mismatch for checkpoint tensor '" + t.name + "'");
      std::copy(t.data.begin(), t.data.end(), dst + e.offset);
    }
  }
  return s;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  save_tensor_file(path, checkpoint_to_file(s));
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_file(load_tensor_file(path, "checkpoint"));
}

}  // namespace ctxssl
