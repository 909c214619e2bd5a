// Deterministic synthetic world: objects with class structure, latent views
// rendered to observation vectors through a frozen random two-layer map, and
// samplers for contexts of (x, a, y) triples.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ctxssl/attention_mask.hpp"
#include "ctxssl/error.hpp"
#include "ctxssl/group_transforms.hpp"
#include "ctxssl/rng.hpp"
#include "ctxssl/tensor_file.hpp"

namespace ctxssl {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct WorldConfig {
  int n_classes = 10;
  int objects_per_class = 5;
  int prototype_dim = 32;
  int obs_dim = 128;
  int render_hidden = 256;
  std::uint64_t seed = 1;
  std::vector<GroupId> active_groups = {GroupId::Rotation, GroupId::Color};

  int n_objects() const { return n_classes * objects_per_class; }

  /// Width of the render input: prototype, rotation matrix, hue as a point on
  /// the circle, saturation, crop, blur.
  int render_input_dim() const { return prototype_dim + 9 + 3 + 4 + 1; }

  bool has_group(GroupId g) const {
    return std::find(active_groups.begin(), active_groups.end(), g) != active_groups.end();
  }

  void validate() const {
    require(n_classes >= 1 && objects_per_class >= 1, ErrorKind::Config,
            "world needs at least one class and one object per class");
    require(prototype_dim >= 1 && render_hidden >= 1, ErrorKind::Config, "invalid world dims");
    require(obs_dim >= prototype_dim + static_cast<int>(kActionDim), ErrorKind::Config,
            "obs_dim must be >= prototype_dim + 11");
    require(!active_groups.empty(), ErrorKind::Config, "world needs at least one active group");
    for (std::size_t i = 0; i < active_groups.size(); ++i)
      for (std::size_t j = i + 1; j < active_groups.size(); ++j)
        require(active_groups[i] != active_groups[j], ErrorKind::Config,
                "duplicate active group");
  }
};

inline void to_json(json& j, const WorldConfig& c) {
  std::vector<std::string> groups;
  for (GroupId g : c.active_groups) groups.emplace_back(group_name(g));
  j = json{{"n_classes", c.n_classes},         {"objects_per_class", c.objects_per_class},
           {"prototype_dim", c.prototype_dim}, {"obs_dim", c.obs_dim},
           {"render_hidden", c.render_hidden}, {"seed", c.seed},
           {"active_groups", groups}};
}

inline void from_json(const json& j, WorldConfig& c) {
  c.n_classes = j.at("n_classes").get<int>();
  c.objects_per_class = j.at("objects_per_class").get<int>();
  c.prototype_dim = j.at("prototype_dim").get<int>();
  c.obs_dim = j.at("obs_dim").get<int>();
  c.render_hidden = j.at("render_hidden").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.active_groups.clear();
  for (const auto& g : j.at("active_groups")) c.active_groups.push_back(parse_group(g.get<std::string>()));
}

enum class ContextMode { Equivariant, Invariant };

inline std::string_view mode_name(ContextMode m) {
  return m == ContextMode::Equivariant ? "equivariant" : "invariant";
}

struct ContextPair {
  std::vector<double> x_obs, y_obs;
  Action action;               // context group's parameters only (zero in invariant mode)
  std::vector<double> t_y;     // standardized latent features of y over world groups
  LatentState latent_x, latent_y;
};

struct ContextSequence {
  std::vector<ContextPair> pairs;
  std::optional<GroupId> group;
  ContextMode mode = ContextMode::Equivariant;

  std::size_t size() const { return pairs.size(); }
};

using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Immutable after construction; safe to share across threads.
class World {
 public:
  World() = default;

  const WorldConfig& config() const { return cfg_; }
  int n_objects() const { return cfg_.n_objects(); }
  int class_of(int object_id) const { return object_id / cfg_.objects_per_class; }

  const RowMatrixF& prototypes() const { return prototypes_; }
  const RowMatrixF& render_w1() const { return w1_; }
  const Eigen::VectorXf& render_b1() const { return b1_; }
  const RowMatrixF& render_w2() const { return w2_; }

  /// Hash of the generating config; checkpoints record it to detect mismatch.
  std::uint64_t config_hash() const { return fnv1a64(json(cfg_).dump()); }

  /// Width of the predictor target: latent features of every active group.
  int target_dim() const {
    int d = 0;
    for (GroupId g : cfg_.active_groups) d += static_cast<int>(latent_feature_width(g));
    return d;
  }

  /// Offset of group `g`'s features inside the target vector, or -1.
  int target_offset(GroupId g) const {
    int d = 0;
    for (GroupId h : cfg_.active_groups) {
      if (h == g) return d;
      d += static_cast<int>(latent_feature_width(h));
    }
    return -1;
  }

  /// 1 where the predictor target is supervised for a context of `group` in
  /// `mode`; invariant contexts supervise nothing.
  std::vector<std::uint8_t> target_mask(std::optional<GroupId> group, ContextMode mode) const {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(target_dim()), 0);
    if (mode == ContextMode::Invariant || !group) return m;
    const int off = target_offset(*group);
    if (off < 0) return m;
    for (std::size_t i = 0; i < latent_feature_width(*group); ++i) m[static_cast<std::size_t>(off) + i] = 1;
    return m;
  }

  std::vector<double> raw_targets(const LatentState& s) const {
    std::vector<double> t;
    for (GroupId g : cfg_.active_groups) append_latent_features(s, g, t);
    return t;
  }

  std::vector<double> standardized_targets(const LatentState& s) const {
    std::vector<double> t = raw_targets(s);
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = (t[i] - target_mean_[static_cast<Eigen::Index>(i)]) /
             target_std_[static_cast<Eigen::Index>(i)];
    return t;
  }

  const Eigen::VectorXf& target_mean() const { return target_mean_; }
  const Eigen::VectorXf& target_std() const { return target_std_; }

  /// Observation for a latent state.
  std::vector<double> render(const LatentState& s) const {
    require(s.object_id >= 0 && s.object_id < n_objects(), ErrorKind::Domain,
            "render: unknown object_id " + std::to_string(s.object_id));
    const int P = cfg_.prototype_dim;
    Eigen::VectorXd u(cfg_.render_input_dim());
    u.head(P) = prototypes_.row(s.object_id).transpose().cast<double>();
    // Inputs are standardized to comparable scales before the frozen map.
    const Mat3 m = quat_to_matrix(s.pose);
    for (int i = 0; i < 9; ++i) u[P + i] = std::sqrt(3.0) * m[static_cast<std::size_t>(i)];
    u[P + 9] = std::sqrt(2.0) * std::cos(s.color.theta);
    u[P + 10] = std::sqrt(2.0) * std::sin(s.color.theta);
    u[P + 11] = (s.color.phi - 0.5) / 0.25;
    u[P + 12] = s.crop.cx / 0.5;
    u[P + 13] = s.crop.cy / 0.5;
    u[P + 14] = (s.crop.sw - 0.6) / 0.2;
    u[P + 15] = (s.crop.sh - 0.6) / 0.2;
    u[P + 16] = (s.blur.sigma - 0.75) / 0.4;
    const Eigen::VectorXd h =
        (w1_.cast<double>() * u + b1_.cast<double>()).array().tanh().matrix();
    const Eigen::VectorXd obs = w2_.cast<double>() * h;
    return std::vector<double>(obs.data(), obs.data() + obs.size());
  }

  /// Canonical value of every latent field whose group is not active; only
  /// active groups vary across views.
  LatentState sample_view(int object_id, Rng& rng) const {
    LatentState s = sample_base_latent(object_id, class_of(object_id), rng);
    if (!cfg_.has_group(GroupId::Rotation)) s.pose = Quaternion::identity();
    if (!cfg_.has_group(GroupId::Color)) s.color = {std::numbers::pi, 0.5};
    if (!cfg_.has_group(GroupId::Crop)) s.crop = {0.0, 0.0, 0.6, 0.6};
    if (!cfg_.has_group(GroupId::Blur)) s.blur = {0.75};
    return s;
  }

  /// Transforms `x` by a fresh composition of one sampled action per active
  /// group. Returns the transformed state and the individual actions.
  std::pair<LatentState, std::vector<Action>> transform(const LatentState& x, Rng& rng) const {
    LatentState y = x;
    std::vector<Action> actions;
    for (GroupId g : cfg_.active_groups) {
      Action a = sample_action(g, rng);
      y = apply_action(y, a);
      actions.push_back(a);
    }
    return {y, actions};
  }

  friend World make_world(const WorldConfig& cfg);
  friend TensorFile world_to_file(const World& w);
  friend World world_from_file(const TensorFile& f);

 private:
  WorldConfig cfg_;
  RowMatrixF prototypes_;  // n_objects x prototype_dim
  RowMatrixF w1_;          // render_hidden x render_input_dim
  Eigen::VectorXf b1_;     // render_hidden
  RowMatrixF w2_;          // obs_dim x render_hidden
  Eigen::VectorXf target_mean_, target_std_;
};

inline World make_world(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.cfg_ = cfg;
  Rng proto_rng(mix_seed(cfg.seed ^ 0x70726f746fULL));
  Rng render_rng(mix_seed(cfg.seed ^ 0x72656e646572ULL));
  Rng stats_rng(mix_seed(cfg.seed ^ 0x7374617473ULL));

  // prototype = sqrt(rho) * class mean + sqrt(1 - rho) * object offset, so
  // each entry stays marginally standard normal.
  constexpr double rho = 0.6;
  const int P = cfg.prototype_dim;
  RowMatrixD class_means(cfg.n_classes, P);
  for (int c = 0; c < cfg.n_classes; ++c)
    for (int k = 0; k < P; ++k) class_means(c, k) = proto_rng.normal();
  w.prototypes_.resize(cfg.n_objects(), P);
  for (int o = 0; o < cfg.n_objects(); ++o)
    for (int k = 0; k < P; ++k)
      w.prototypes_(o, k) = static_cast<float>(std::sqrt(rho) * class_means(o / cfg.objects_per_class, k) +
                                               std::sqrt(1.0 - rho) * proto_rng.normal());

  const int in = cfg.render_input_dim();
  const int H = cfg.render_hidden;
  w.w1_.resize(H, in);
  w.b1_.resize(H);
  w.w2_.resize(cfg.obs_dim, H);
  const double s1 = 1.2 / std::sqrt(static_cast<double>(in));
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < in; ++j) w.w1_(i, j) = static_cast<float>(s1 * render_rng.normal());
  for (int i = 0; i < H; ++i) w.b1_[i] = static_cast<float>(0.3 * render_rng.normal());
  const double s2 = 1.0 / std::sqrt(static_cast<double>(H));
  for (int i = 0; i < cfg.obs_dim; ++i)
    for (int j = 0; j < H; ++j) w.w2_(i, j) = static_cast<float>(s2 * render_rng.normal());

  // Standardization statistics of transformed-view latent features.
  const int T = w.target_dim();
  constexpr int n_stats = 4096;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(T), sq = Eigen::VectorXd::Zero(T);
  for (int n = 0; n < n_stats; ++n) {
    const int obj = static_cast<int>(stats_rng.below(static_cast<std::uint64_t>(cfg.n_objects())));
    const LatentState y = w.transform(w.sample_view(obj, stats_rng), stats_rng).first;
    const std::vector<double> t = w.raw_targets(y);
    for (int i = 0; i < T; ++i) {
      sum[i] += t[static_cast<std::size_t>(i)];
      sq[i] += t[static_cast<std::size_t>(i)] * t[static_cast<std::size_t>(i)];
    }
  }
  w.target_mean_.resize(T);
  w.target_std_.resize(T);
  for (int i = 0; i < T; ++i) {
    const double mean = sum[i] / n_stats;
    const double var = std::max(sq[i] / n_stats - mean * mean, 1e-8);
    w.target_mean_[i] = static_cast<float>(mean);
    w.target_std_[i] = static_cast<float>(std::sqrt(var));
  }
  return w;
}

inline ContextPair make_pair_from(const World& world, const LatentState& x, const LatentState& y,
                                  const std::vector<Action>& actions, std::optional<GroupId> group,
                                  ContextMode mode) {
  ContextPair p;
  p.latent_x = x;
  p.latent_y = y;
  p.x_obs = world.render(x);
  p.y_obs = world.render(y);
  p.t_y = world.standardized_targets(y);
  if (mode == ContextMode::Equivariant && group) {
    const auto& groups = world.config().active_groups;
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (groups[i] == *group) p.action = actions[i];
  }
  return p;
}

/// Draws one (x, a, y) pair: every active group transforms the data, but the
/// action records only `group`'s parameters.
inline ContextPair sample_pair(const World& world, std::optional<GroupId> group, ContextMode mode,
                               Rng& rng) {
  const int obj = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.n_objects())));
  const LatentState x = world.sample_view(obj, rng);
  auto [y, actions] = world.transform(x, rng);
  return make_pair_from(world, x, y, actions, group, mode);
}

inline ContextSequence sample_context(const World& world, std::optional<GroupId> group, int K,
                                      ContextMode mode, Rng& rng, int max_pairs = 4096) {
  require(K >= 0, ErrorKind::Config, "context size must be non-negative");
  require(K <= max_pairs, ErrorKind::Config, "context size exceeds the configured maximum");
  require(mode == ContextMode::Invariant || group.has_value(), ErrorKind::Config,
          "equivariant context needs a group");
  if (group)
    require(world.config().has_group(*group), ErrorKind::Config,
            "context group is not active in this world");
  ContextSequence ctx;
  ctx.group = group;
  ctx.mode = mode;
  ctx.pairs.reserve(static_cast<std::size_t>(K));
  for (int i = 0; i < K; ++i) ctx.pairs.push_back(sample_pair(world, group, mode, rng));
  return ctx;
}

/// Token layout of a context: token 2i = [x_rep_i | a_i], token 2i+1 =
/// [y_rep_i | 0]; `pairs` lists the (2i, 2i+1) couples.
template <typename T>
struct TokenSequence {
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tokens;
  std::vector<std::pair<int, int>> pairs;
};

/// Action rows for the 2K tokens of a context (y rows are zero).
inline RowMatrixD action_rows(const ContextSequence& ctx) {
  RowMatrixD a = RowMatrixD::Zero(2 * static_cast<Eigen::Index>(ctx.size()), kActionDim);
  for (std::size_t i = 0; i < ctx.size(); ++i)
    for (std::size_t k = 0; k < kActionDim; ++k)
      a(2 * static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = ctx.pairs[i].action.values()[k];
  return a;
}

template <typename Derived>
TokenSequence<typename Derived::Scalar> build_token_sequence(const ContextSequence& ctx,
                                                             const Eigen::MatrixBase<Derived>& reps_x,
                                                             const Eigen::MatrixBase<Derived>& reps_y) {
  using T = typename Derived::Scalar;
  const auto K = static_cast<Eigen::Index>(ctx.size());
  require(reps_x.rows() == K && reps_y.rows() == K && reps_x.cols() == reps_y.cols(),
          ErrorKind::Shape, "build_token_sequence: representation count mismatch");
  const Eigen::Index R = reps_x.cols();
  TokenSequence<T> seq;
  seq.tokens.setZero(2 * K, R + static_cast<Eigen::Index>(kActionDim));
  const RowMatrixD act = action_rows(ctx);
  for (Eigen::Index i = 0; i < K; ++i) {
    seq.tokens.row(2 * i).head(R) = reps_x.row(i);
    seq.tokens.row(2 * i).tail(kActionDim) = act.row(2 * i).template cast<T>();
    seq.tokens.row(2 * i + 1).head(R) = reps_y.row(i);
  }
  seq.pairs = context_pairs(static_cast<int>(K));
  return seq;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

template <typename M>
NamedTensor matrix_tensor(const std::string& name, const M& m) {
  NamedTensor t;
  t.name = name;
  t.shape = {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t.data[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  return t;
}

inline RowMatrixF tensor_matrix(const NamedTensor& t, Eigen::Index rows, Eigen::Index cols) {
  require(t.shape.size() == 2 && t.shape[0] == rows && t.shape[1] == cols, ErrorKind::Shape,
          "shape mismatch for tensor '" + t.name + "'");
  RowMatrixF m(rows, cols);
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

}  // namespace detail

inline TensorFile world_to_file(const World& w) {
  TensorFile f;
  f.kind = "world";
  f.meta["config"] = w.cfg_;
  f.meta["render_input_dim"] = w.cfg_.render_input_dim();
  f.meta["target_dim"] = w.target_dim();
  f.tensors.push_back(detail::matrix_tensor("prototypes", w.prototypes_));
  f.tensors.push_back(detail::matrix_tensor("render_w1", w.w1_));
  f.tensors.push_back(detail::matrix_tensor("render_b1", RowMatrixF(w.b1_.transpose())));
  f.tensors.push_back(detail::matrix_tensor("render_w2", w.w2_));
  f.tensors.push_back(detail::matrix_tensor("target_mean", RowMatrixF(w.target_mean_.transpose())));
  f.tensors.push_back(detail::matrix_tensor("target_std", RowMatrixF(w.target_std_.transpose())));
  return f;
}

inline World world_from_file(const TensorFile& f) {
  World w;
  try {
    w.cfg_ = f.meta.at("config").get<WorldConfig>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("corrupt world manifest: ") + e.what());
  }
  w.cfg_.validate();
  const auto& c = w.cfg_;
  w.prototypes_ = detail::tensor_matrix(f.get("prototypes"), c.n_objects(), c.prototype_dim);
  w.w1_ = detail::tensor_matrix(f.get("render_w1"), c.render_hidden, c.render_input_dim());
  w.b1_ = detail::tensor_matrix(f.get("render_b1"), 1, c.render_hidden).transpose();
  w.w2_ = detail::tensor_matrix(f.get("render_w2"), c.obs_dim, c.render_hidden);
  w.target_mean_ = detail::tensor_matrix(f.get("target_mean"), 1, w.target_dim()).transpose();
  w.target_std_ = detail::tensor_matrix(f.get("target_std"), 1, w.target_dim()).transpose();
  return w;
}

inline void save_world(const World& w, const std::filesystem::path& path) {
  save_tensor_file(path, world_to_file(w));
}

inline World load_world(const std::filesystem::path& path) {
  return world_from_file(load_tensor_file(path, "world"));
}

}  // namespace ctxssl
