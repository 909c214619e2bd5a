// Measurement suite: ridge R^2 probes of relative transformations across
// context lengths, linear classification probes on encoder representations,
// MRR / H@k retrieval among views of the same object, and report assembly.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ctxssl/attention_mask.hpp"
#include "ctxssl/error.hpp"
#include "ctxssl/model.hpp"
#include "ctxssl/synthetic_world.hpp"
#include "ctxssl/training.hpp"

namespace ctxssl {

using MatD = Mat<double>;

enum class ProbeFeatures {
  Linear,    // [anchor | target]
  Bilinear,  // [anchor | target | outer(PCA(anchor), PCA(target))]
};

struct ProbeConfig {
  double ridge_lambda = 1e-3;
  std::vector<int> lengths = {0, 2, 6, 14, 30};  // context length in tokens
  int n_eval_samples = 2048;
  int n_contexts = 8;  // contexts per cell; queries are split across them
  std::uint64_t eval_seed = 12345;
  ProbeFeatures features = ProbeFeatures::Bilinear;
  int pca_dim = 16;
  double train_fraction = 0.7;
  int retrieval_queries = 256;
  int retrieval_views = 50;
  std::vector<int> hit_ks = {1, 5};
  int classification_samples = 2000;
  bool individual_latents = false;

  void validate(int max_tokens) const {
    require(ridge_lambda > 0.0, ErrorKind::Config, "ridge lambda must be positive");
    require(!lengths.empty(), ErrorKind::Config, "no context lengths to evaluate");
    for (int L : lengths)
      require(L >= 0 && L % 2 == 0 && L <= max_tokens, ErrorKind::Config,
              "context lengths must be even and within the trained maximum");
    require(n_eval_samples > 0 && n_contexts > 0 && pca_dim > 0, ErrorKind::Config,
            "invalid probe sample counts");
    require(train_fraction > 0.0 && train_fraction < 1.0, ErrorKind::Config,
            "train_fraction must lie in (0,1)");
    require(retrieval_views >= 2, ErrorKind::Config, "retrieval needs at least two views per object");
  }
};

inline void to_json(json& j, const ProbeConfig& c) {
  j = json{{"ridge_lambda", c.ridge_lambda},
           {"lengths", c.lengths},
           {"n_eval_samples", c.n_eval_samples},
           {"n_contexts", c.n_contexts},
           {"eval_seed", c.eval_seed},
           {"features", c.features == ProbeFeatures::Linear ? "linear" : "bilinear"},
           {"pca_dim", c.pca_dim},
           {"train_fraction", c.train_fraction},
           {"retrieval_queries", c.retrieval_queries},
           {"retrieval_views", c.retrieval_views},
           {"hit_ks", c.hit_ks},
           {"classification_samples", c.classification_samples},
           {"individual_latents", c.individual_latents}};
}

inline void from_json(const json& j, ProbeConfig& c) {
  c.ridge_lambda = j.at("ridge_lambda");
  c.lengths = j.at("lengths").get<std::vector<int>>();
  c.n_eval_samples = j.at("n_eval_samples");
  c.n_contexts = j.at("n_contexts");
  c.eval_seed = j.at("eval_seed");
  const std::string f = j.at("features");
  if (f == "linear") c.features = ProbeFeatures::Linear;
  else if (f == "bilinear") c.features = ProbeFeatures::Bilinear;
  else throw Error(ErrorKind::Config, "unknown probe features '" + f + "'");
  c.pca_dim = j.at("pca_dim");
  c.train_fraction = j.at("train_fraction");
  c.retrieval_queries = j.at("retrieval_queries");
  c.retrieval_views = j.at("retrieval_views");
  c.hit_ks = j.at("hit_ks").get<std::vector<int>>();
  c.classification_samples = j.at("classification_samples");
  c.individual_latents = j.at("individual_latents");
}

// ---------------------------------------------------------------------------
// Ridge regression

struct RidgeFit {
  MatD weights;          // features x targets
  RowVec<double> bias;   // 1 x targets
};

/// Closed-form ridge with an unpenalized intercept: on centered data solve
/// (X^T X + lambda I) W = X^T Y.
inline RidgeFit ridge_fit(const MatD& X, const MatD& Y, double lambda) {
  require(lambda > 0.0, ErrorKind::Config, "ridge lambda must be positive");
  require(X.rows() == Y.rows() && X.rows() > 0, ErrorKind::Shape, "ridge: sample count mismatch");
  const RowVec<double> xm = X.colwise().mean();
  const RowVec<double> ym = Y.colwise().mean();
  const MatD Xc = X.rowwise() - xm;
  const MatD Yc = Y.rowwise() - ym;
  MatD A = Xc.transpose() * Xc;
  A.diagonal().array() += lambda;
  const MatD B = Xc.transpose() * Yc;
  RidgeFit fit;
  fit.weights = A.ldlt().solve(B);
  fit.bias = ym - xm * fit.weights;
  return fit;
}

inline MatD ridge_predict(const RidgeFit& fit, const MatD& X) {
  MatD P = X * fit.weights;
  P.rowwise() += fit.bias;
  return P;
}

/// Coefficient of determination per target column.
inline std::vector<double> r2_per_dim(const MatD& truth, const MatD& pred) {
  std::vector<double> r2;
  for (Eigen::Index j = 0; j < truth.cols(); ++j) {
    const double mean = truth.col(j).mean();
    const double ss_tot = (truth.col(j).array() - mean).square().sum();
    const double ss_res = (truth.col(j) - pred.col(j)).squaredNorm();
    r2.push_back(ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0);
  }
  return r2;
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Seeded train/test split of n indices.
inline std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double train_fraction,
                                                                   std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed));
  for (int i = n - 1; i > 0; --i)
    std::swap(idx[static_cast<std::size_t>(i)], idx[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  const int n_train = static_cast<int>(std::round(train_fraction * n));
  return {std::vector<int>(idx.begin(), idx.begin() + n_train), std::vector<int>(idx.begin() + n_train, idx.end())};
}

inline MatD take_rows(const MatD& m, const std::vector<int>& rows) {
  MatD out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

/// Top principal directions (columns) of the rows of X.
inline MatD principal_directions(const MatD& X, int k) {
  const MatD Xc = X.rowwise() - X.colwise().mean();
  const MatD C = Xc.transpose() * Xc / std::max<double>(1.0, static_cast<double>(X.rows() - 1));
  Eigen::SelfAdjointEigenSolver<MatD> es(C);
  const int d = static_cast<int>(C.rows());
  k = std::min(k, d);
  MatD P(d, k);
  for (int i = 0; i < k; ++i) P.col(i) = es.eigenvectors().col(d - 1 - i);  // descending
  return P;
}

/// Probe feature map; PCA basis and centering come from `basis_rows`.
inline MatD probe_features(const MatD& anchors, const MatD& targets, ProbeFeatures kind,
                           const MatD& basis, const RowVec<double>& center) {
  if (kind == ProbeFeatures::Linear) {
    MatD F(anchors.rows(), anchors.cols() + targets.cols());
    F << anchors, targets;
    return F;
  }
  const MatD pa = (anchors.rowwise() - center) * basis;
  const MatD pt = (targets.rowwise() - center) * basis;
  const Eigen::Index k = basis.cols();
  MatD F(anchors.rows(), anchors.cols() + targets.cols() + k * k);
  F.leftCols(anchors.cols()) = anchors;
  F.middleCols(anchors.cols(), targets.cols()) = targets;
  for (Eigen::Index r = 0; r < anchors.rows(); ++r)
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index b = 0; b < k; ++b)
        F(r, anchors.cols() + targets.cols() + a * k + b) = pa(r, a) * pt(r, b);
  return F;
}

struct ProbeResult {
  double r2 = 0.0;               // mean over target dims, test split
  std::vector<double> r2_dims;
};

/// Ridge probe from (anchor, target) embedding pairs to transformation
/// parameters; fit on the train split, scored on the held-out split.
inline ProbeResult r2_probe(const MatD& anchors, const MatD& targets_emb, const MatD& params,
                            double ridge_lambda, ProbeFeatures kind, int pca_dim,
                            double train_fraction, std::uint64_t seed) {
  const auto n = anchors.rows();
  require(targets_emb.rows() == n && params.rows() == n, ErrorKind::Shape, "r2_probe: row mismatch");
  require(n > params.cols() + 2, ErrorKind::Config, "r2_probe needs more samples than target dims");
  const auto [tr, te] = split_indices(static_cast<int>(n), train_fraction, seed);
  const MatD a_tr = take_rows(anchors, tr), a_te = take_rows(anchors, te);
  const MatD t_tr = take_rows(targets_emb, tr), t_te = take_rows(targets_emb, te);
  MatD basis;
  RowVec<double> center;
  if (kind == ProbeFeatures::Bilinear) {
    // Both views show the same object, so their difference keeps only the
    // directions that transformations move; identity directions cancel.
    MatD stacked(a_tr.rows() + t_tr.rows(), a_tr.cols());
    stacked << a_tr, t_tr;
    center = stacked.colwise().mean();
    basis = principal_directions(MatD(t_tr - a_tr), pca_dim);
  }
  const RidgeFit fit =
      ridge_fit(probe_features(a_tr, t_tr, kind, basis, center), take_rows(params, tr), ridge_lambda);
  const MatD pred = ridge_predict(fit, probe_features(a_te, t_te, kind, basis, center));
  ProbeResult r;
  r.r2_dims = r2_per_dim(take_rows(params, te), pred);
  r.r2 = mean_of(r.r2_dims);
  return r;
}

/// Linear classifier by ridge regression onto one-hot labels, argmax
/// prediction, scored on the held-out split.
inline double linear_probe_classification(const MatD& reps, const std::vector<int>& labels,
                                          double ridge_lambda, double train_fraction,
                                          std::uint64_t seed) {
  require(static_cast<Eigen::Index>(labels.size()) == reps.rows(), ErrorKind::Shape,
          "classification probe: label count mismatch");
  require(!labels.empty(), ErrorKind::Config, "classification probe: no samples");
  const int n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  const auto distinct = std::count_if(labels.begin(), labels.end(), [&](int l) { return l != labels[0]; });
  require(distinct > 0, ErrorKind::Config, "classification probe needs at least two classes");
  MatD Y = MatD::Zero(reps.rows(), n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0, ErrorKind::Config, "negative class label");
    Y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  const auto [tr, te] = split_indices(static_cast<int>(reps.rows()), train_fraction, seed);
  const RidgeFit fit = ridge_fit(take_rows(reps, tr), take_rows(Y, tr), ridge_lambda);
  const MatD scores = ridge_predict(fit, take_rows(reps, te));
  int correct = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index arg;
    scores.row(i).maxCoeff(&arg);
    correct += static_cast<int>(arg) == labels[static_cast<std::size_t>(te[static_cast<std::size_t>(i)])];
  }
  return static_cast<double>(correct) / static_cast<double>(te.size());
}

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalResult {
  double mrr = 0.0;
  std::map<int, double> hits;  // k -> H@k
  friend bool operator==(const RetrievalResult&, const RetrievalResult&) = default;
};

/// For each query, ranks the candidates of the query's object by cosine
/// similarity to its predicted embedding. The rank of the true view is one
/// plus the number of same-object candidates with strictly higher similarity.
inline RetrievalResult retrieval_metrics(const MatD& predicted, const MatD& candidates,
                                         const std::vector<int>& candidate_objects,
                                         const std::vector<int>& query_objects,
                                         const std::vector<int>& true_candidate,
                                         const std::vector<int>& ks) {
  const auto Q = predicted.rows();
  require(static_cast<Eigen::Index>(query_objects.size()) == Q &&
              static_cast<Eigen::Index>(true_candidate.size()) == Q &&
              static_cast<Eigen::Index>(candidate_objects.size()) == candidates.rows(),
          ErrorKind::Shape, "retrieval_metrics: size mismatch");
  require(Q > 0, ErrorKind::Config, "retrieval_metrics: no queries");
  std::map<int, std::vector<int>> by_object;
  for (std::size_t c = 0; c < candidate_objects.size(); ++c)
    by_object[candidate_objects[c]].push_back(static_cast<int>(c));
  auto unit = [](const auto& row) {
    const double n = row.norm();
    require(n > 0.0, ErrorKind::Numeric, "zero-norm embedding in retrieval");
    return RowVec<double>(row / n);
  };
  RetrievalResult r;
  for (int k : ks) r.hits[k] = 0.0;
  for (Eigen::Index q = 0; q < Q; ++q) {
    const int obj = query_objects[static_cast<std::size_t>(q)];
    const auto it = by_object.find(obj);
    require(it != by_object.end() && it->second.size() >= 2, ErrorKind::Config,
            "retrieval: object " + std::to_string(obj) + " has fewer than two views");
    const int truth = true_candidate[static_cast<std::size_t>(q)];
    require(truth >= 0 && truth < candidates.rows() && candidate_objects[static_cast<std::size_t>(truth)] == obj,
            ErrorKind::Config, "retrieval: true view is not a candidate of the query's object");
    const RowVec<double> pq = unit(predicted.row(q));
    const double s_true = pq.dot(unit(candidates.row(truth)));
    int rank = 1;
    for (int c : it->second)
      if (c != truth && pq.dot(unit(candidates.row(c))) > s_true) ++rank;
    r.mrr += 1.0 / rank;
    for (int k : ks)
      if (rank <= k) r.hits[k] += 1.0;
  }
  r.mrr /= static_cast<double>(Q);
  for (auto& [k, v] : r.hits) v /= static_cast<double>(Q);
  return r;
}

// ---------------------------------------------------------------------------
// Contextual embedding

/// Evaluation context of `length_tokens` tokens (length/2 pairs).
inline ContextSequence build_eval_context(const World& world, std::optional<GroupId> group, ContextMode mode,
                                          int length_tokens, Rng& rng, int max_tokens) {
  require(length_tokens >= 0 && length_tokens % 2 == 0, ErrorKind::Config, "context length must be even");
  require(length_tokens <= max_tokens, ErrorKind::Config, "context length exceeds the trained maximum");
  return sample_context(world, group, length_tokens / 2, mode, rng, max_tokens / 2);
}

/// One query: an anchor observation (with or without its action) and any
/// number of zero-action views, all conditioned on the same context.
struct Query {
  std::vector<double> anchor_obs;
  Action anchor_action;
  std::vector<std::vector<double>> views;
  bool anchor_at_view_position = false;  // zero-action probes embed both views alike
};

struct QueryEmbeddings {
  MatD anchors;               // one row per query
  std::vector<MatD> views;    // per query, one row per view
};

/// Appends every query after the context tokens. Context rows follow the
/// causal + pair-exclusion mask; each query row sees the full context and
/// itself only, so queries do not interact. Anchors take the position of an
/// (x|a) token and views that of a y token, as in a single appended pair.
inline QueryEmbeddings embed_with_context(const Model<float>& model, const ContextSequence& ctx,
                                          const std::vector<Query>& queries) {
  const int K = static_cast<int>(ctx.size());
  const int C = 2 * K;
  int n = C;
  for (const auto& q : queries) n += 1 + static_cast<int>(q.views.size());
  const int obs_dim = model.config().obs_dim;
  Mat<float> obs(n, obs_dim), actions = Mat<float>::Zero(n, static_cast<Eigen::Index>(kActionDim));
  auto put_obs = [&](int row, const std::vector<double>& o) {
    require(static_cast<int>(o.size()) == obs_dim, ErrorKind::Shape, "observation width mismatch");
    for (int k = 0; k < obs_dim; ++k) obs(row, k) = static_cast<float>(o[static_cast<std::size_t>(k)]);
  };
  for (int i = 0; i < K; ++i) {
    put_obs(2 * i, ctx.pairs[static_cast<std::size_t>(i)].x_obs);
    put_obs(2 * i + 1, ctx.pairs[static_cast<std::size_t>(i)].y_obs);
    for (std::size_t k = 0; k < kActionDim; ++k)
      actions(2 * i, static_cast<Eigen::Index>(k)) = static_cast<float>(ctx.pairs[static_cast<std::size_t>(i)].action.values()[k]);
  }
  MaskMatrix mask(n);
  const MaskMatrix ctx_mask = pair_exclusion(causal_mask(C), context_pairs(K));
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j) mask.set(i, j, ctx_mask.visible(i, j));
  Segment seg;
  seg.offset = 0;
  seg.length = n;
  seg.positions.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < C; ++i) seg.positions[static_cast<std::size_t>(i)] = i;
  int row = C;
  std::vector<int> anchor_rows;
  std::vector<std::vector<int>> view_rows;
  for (const auto& q : queries) {
    put_obs(row, q.anchor_obs);
    for (std::size_t k = 0; k < kActionDim; ++k)
      actions(row, static_cast<Eigen::Index>(k)) = static_cast<float>(q.anchor_action.values()[k]);
    seg.positions[static_cast<std::size_t>(row)] = q.anchor_at_view_position ? C + 1 : C;
    anchor_rows.push_back(row++);
    view_rows.emplace_back();
    for (const auto& v : q.views) {
      put_obs(row, v);
      seg.positions[static_cast<std::size_t>(row)] = C + 1;
      view_rows.back().push_back(row++);
    }
  }
  for (int r = C; r < n; ++r) {
    for (int j = 0; j < C; ++j) mask.set(r, j, true);
    mask.set(r, r, true);
  }
  seg.mask = std::move(mask);
  const Mat<float> reps = model.encode(obs);
  const Mat<float> tokens = concat_tokens(reps, actions);
  const ForwardTrace<float> tr = model.transformer_forward(tokens, {seg});
  QueryEmbeddings out;
  out.anchors.resize(static_cast<Eigen::Index>(queries.size()), tr.outputs.cols());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    out.anchors.row(static_cast<Eigen::Index>(q)) = tr.outputs.row(anchor_rows[q]).cast<double>();
    MatD v(static_cast<Eigen::Index>(view_rows[q].size()), tr.outputs.cols());
    for (std::size_t i = 0; i < view_rows[q].size(); ++i)
      v.row(static_cast<Eigen::Index>(i)) = tr.outputs.row(view_rows[q][i]).cast<double>();
    out.views.push_back(std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct EvalCell {
  GroupId context_group = GroupId::Rotation;
  ContextMode mode = ContextMode::Equivariant;
  int length = 0;
  std::map<std::string, double> metrics;  // e.g. "r2_rotation", "mrr", "h@1"
  friend bool operator==(const EvalCell&, const EvalCell&) = default;
};

struct EvalReport {
  std::vector<EvalCell> cells;
  double classification_top1 = 0.0;
  json metadata = json::object();
  friend bool operator==(const EvalReport&, const EvalReport&) = default;

  const EvalCell& cell(GroupId g, ContextMode m, int length) const {
    for (const auto& c : cells)
      if (c.context_group == g && c.mode == m && c.length == length) return c;
    throw Error(ErrorKind::Config, "report has no cell for the requested group/mode/length");
  }

  double metric(GroupId g, ContextMode m, int length, const std::string& name) const {
    const auto& c = cell(g, m, length);
    const auto it = c.metrics.find(name);
    require(it != c.metrics.end(), ErrorKind::Config, "report cell has no metric '" + name + "'");
    return it->second;
  }
};

inline void to_json(json& j, const EvalCell& c) {
  j = json{{"context_group", group_name(c.context_group)},
           {"mode", mode_name(c.mode)},
           {"length", c.length},
           {"metrics", c.metrics}};
}

inline void from_json(const json& j, EvalCell& c) {
  c.context_group = parse_group(j.at("context_group").get<std::string>());
  const std::string m = j.at("mode");
  require(m == "equivariant" || m == "invariant", ErrorKind::Io, "bad context mode in report");
  c.mode = m == "equivariant" ? ContextMode::Equivariant : ContextMode::Invariant;
  c.length = j.at("length");
  c.metrics = j.at("metrics").get<std::map<std::string, double>>();
}

inline void to_json(json& j, const EvalReport& r) {
  j = json{{"cells", r.cells}, {"classification_top1", r.classification_top1}, {"metadata", r.metadata}};
}

inline void from_json(const json& j, EvalReport& r) {
  r.cells = j.at("cells").get<std::vector<EvalCell>>();
  r.classification_top1 = j.at("classification_top1");
  r.metadata = j.at("metadata");
}

/// One row per (context group, mode, length, metric); the classification
/// probe has no context and is written with empty group/mode/length.
inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "context_group,mode,length,metric,value\n";
  for (const auto& c : r.cells)
    for (const auto& [name, v] : c.metrics)
      os << group_name(c.context_group) << ',' << mode_name(c.mode) << ',' << c.length << ',' << name << ','
         << v << '\n';
  os << ",,,classification_top1," << r.classification_top1 << '\n';
  return os.str();
}

namespace detail {

inline std::uint64_t cell_seed(std::uint64_t eval_seed, GroupId g, ContextMode m, int length, int salt) {
  return mix_seed(eval_seed ^ mix_seed((static_cast<std::uint64_t>(g) << 40) ^
                                       (static_cast<std::uint64_t>(m) << 32) ^
                                       (static_cast<std::uint64_t>(length) << 8) ^
                                       static_cast<std::uint64_t>(salt)));
}

inline MatD group_params(const std::vector<Action>& actions, GroupId g) {
  const SlotRange r = action_slots(g);
  MatD m(static_cast<Eigen::Index>(actions.size()), static_cast<Eigen::Index>(r.width));
  for (std::size_t i = 0; i < actions.size(); ++i)
    for (std::size_t k = 0; k < r.width; ++k)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = actions[i].values()[r.offset + k];
  return m;
}

}  // namespace detail

/// R^2 of every active group's relative transformation, read from the
/// zero-action embeddings of two views under one (group, mode, length) context.
inline std::map<std::string, double> probe_cell(const Model<float>& model, const World& world,
                                                const ProbeConfig& cfg, GroupId group, ContextMode mode,
                                                int length, int max_tokens) {
  Rng rng(detail::cell_seed(cfg.eval_seed, group, mode, length, 1));
  const auto& groups = world.config().active_groups;
  std::vector<std::vector<Action>> rel(groups.size());
  std::vector<LatentState> ys;
  MatD anchors(cfg.n_eval_samples, model.config().out_dim), targets(cfg.n_eval_samples, model.config().out_dim);
  int done = 0;
  for (int c = 0; c < cfg.n_contexts && done < cfg.n_eval_samples; ++c) {
    const ContextSequence ctx = build_eval_context(world, group, mode, length, rng, max_tokens);
    const int q_here = (cfg.n_eval_samples - done) / (cfg.n_contexts - c);
    std::vector<Query> queries;
    for (int q = 0; q < q_here; ++q) {
      const int obj = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.n_objects())));
      const LatentState x = world.sample_view(obj, rng);
      const LatentState y = world.transform(x, rng).first;
      for (std::size_t gi = 0; gi < groups.size(); ++gi) rel[gi].push_back(relative_action(x, y, groups[gi]));
      ys.push_back(y);
      queries.push_back({world.render(x), Action::none(), {world.render(y)}, true});
    }
    const QueryEmbeddings e = embed_with_context(model, ctx, queries);
    for (int q = 0; q < q_here; ++q) {
      anchors.row(done + q) = e.anchors.row(q);
      targets.row(done + q) = e.views[static_cast<std::size_t>(q)].row(0);
    }
    done += q_here;
  }
  std::map<std::string, double> out;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const ProbeResult pr =
        r2_probe(anchors, targets, detail::group_params(rel[gi], groups[gi]), cfg.ridge_lambda, cfg.features,
                 cfg.pca_dim, cfg.train_fraction, cfg.eval_seed + gi);
    out["r2_" + std::string(group_name(groups[gi]))] = pr.r2;
    if (cfg.individual_latents) {
      MatD lat(static_cast<Eigen::Index>(ys.size()), static_cast<Eigen::Index>(latent_feature_width(groups[gi])));
      for (std::size_t i = 0; i < ys.size(); ++i) {
        std::vector<double> f;
        append_latent_features(ys[i], groups[gi], f);
        for (std::size_t k = 0; k < f.size(); ++k) lat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = f[k];
      }
      const auto [tr, te] = split_indices(static_cast<int>(ys.size()), cfg.train_fraction, cfg.eval_seed + 7 + gi);
      const RidgeFit fit = ridge_fit(take_rows(targets, tr), take_rows(lat, tr), cfg.ridge_lambda);
      out["r2_latent_" + std::string(group_name(groups[gi]))] =
          mean_of(r2_per_dim(take_rows(lat, te), ridge_predict(fit, take_rows(targets, te))));
    }
  }
  return out;
}

/// MRR / H@k of the true transformed view among views of the same object,
/// using the action-conditioned anchor embedding as the prediction.
inline RetrievalResult retrieval_cell(const Model<float>& model, const World& world, const ProbeConfig& cfg,
                                      GroupId group, int length, int max_tokens) {
  Rng rng(detail::cell_seed(cfg.eval_seed, group, ContextMode::Equivariant, length, 2));
  const int per_ctx = std::max(1, cfg.retrieval_queries / cfg.n_contexts);
  std::vector<MatD> preds, cands;
  std::vector<int> cand_obj, query_obj, truth;
  int n_cand = 0;
  for (int c = 0; c < cfg.n_contexts; ++c) {
    const ContextSequence ctx =
        build_eval_context(world, group, ContextMode::Equivariant, length, rng, max_tokens);
    std::vector<Query> queries;
    for (int q = 0; q < per_ctx; ++q) {
      const ContextPair p = sample_pair(world, group, ContextMode::Equivariant, rng);
      Query qu{p.x_obs, p.action, {p.y_obs}};
      for (int v = 1; v < cfg.retrieval_views; ++v)
        qu.views.push_back(world.render(world.transform(world.sample_view(p.latent_x.object_id, rng), rng).first));
      queries.push_back(std::move(qu));
    }
    const QueryEmbeddings e = embed_with_context(model, ctx, queries);
    for (int q = 0; q < per_ctx; ++q) {
      preds.push_back(e.anchors.row(q));
      cands.push_back(e.views[static_cast<std::size_t>(q)]);
      // Candidate object ids are made unique per query so each query only
      // competes against its own view set.
      const int uid = static_cast<int>(query_obj.size());
      query_obj.push_back(uid);
      truth.push_back(n_cand);
      for (int v = 0; v < cfg.retrieval_views; ++v) cand_obj.push_back(uid);
      n_cand += cfg.retrieval_views;
    }
  }
  MatD P(static_cast<Eigen::Index>(preds.size()), model.config().out_dim);
  for (std::size_t i = 0; i < preds.size(); ++i) P.row(static_cast<Eigen::Index>(i)) = preds[i];
  MatD Cm(n_cand, model.config().out_dim);
  Eigen::Index r = 0;
  for (const auto& m : cands) {
    Cm.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  return retrieval_metrics(P, Cm, cand_obj, query_obj, truth, cfg.hit_ks);
}

/// Linear probe top-1 on encoder representations of fresh views.
inline double encoder_classification(const Model<float>& model, const World& world, const ProbeConfig& cfg) {
  Rng rng(mix_seed(cfg.eval_seed ^ 0xC1A55ULL));
  Mat<float> obs(cfg.classification_samples, model.config().obs_dim);
  std::vector<int> labels;
  for (int i = 0; i < cfg.classification_samples; ++i) {
    const int obj = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.n_objects())));
    const auto o = world.transform(world.sample_view(obj, rng), rng).first;
    const auto v = world.render(o);
    for (int k = 0; k < model.config().obs_dim; ++k) obs(i, k) = static_cast<float>(v[static_cast<std::size_t>(k)]);
    labels.push_back(world.class_of(obj));
  }
  const MatD reps = model.encode(obs).cast<double>();
  return linear_probe_classification(reps, labels, cfg.ridge_lambda, cfg.train_fraction, cfg.eval_seed);
}

/// Accuracy of context-dependent labels read at a zero-action query token.
inline double supervised_accuracy(const Model<float>& model, const World& world, const ProbeConfig& cfg,
                                  int length, int max_tokens) {
  const int n_classes = world.config().n_classes;
  require(model.config().out_dim == 2 * n_classes, ErrorKind::Mismatch,
          "supervised accuracy needs a supervised checkpoint");
  int correct = 0, total = 0;
  for (GroupId g : world.config().active_groups) {
    Rng rng(detail::cell_seed(cfg.eval_seed, g, ContextMode::Equivariant, length, 3));
    const int per_ctx = std::max(1, cfg.n_eval_samples / cfg.n_contexts);
    for (int c = 0; c < cfg.n_contexts; ++c) {
      const ContextSequence ctx = build_eval_context(world, g, ContextMode::Equivariant, length, rng, max_tokens);
      std::vector<Query> queries;
      std::vector<int> labels;
      for (int q = 0; q < per_ctx; ++q) {
        const int obj = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.n_objects())));
        const LatentState s = world.transform(world.sample_view(obj, rng), rng).first;
        queries.push_back({world.render(s), Action::none(), {}, true});
        labels.push_back(context_label(s.class_id, g, n_classes));
      }
      const QueryEmbeddings e = embed_with_context(model, ctx, queries);
      for (int q = 0; q < per_ctx; ++q) {
        Eigen::Index arg;
        e.anchors.row(q).maxCoeff(&arg);
        correct += static_cast<int>(arg) == labels[static_cast<std::size_t>(q)];
        ++total;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

inline EvalReport full_report(const TrainState& state, const World& world, const ProbeConfig& cfg) {
  require(state.world_hash == world.config_hash(), ErrorKind::Mismatch,
          "checkpoint was trained on a different world");
  const int max_tokens = 2 * state.train_cfg.k_max;
  cfg.validate(max_tokens);
  const Model<float>& model = state.model;
  const bool supervised = state.train_cfg.mode == TrainMode::Supervised;
  EvalReport rep;
  for (GroupId g : world.config().active_groups) {
    for (ContextMode m : {ContextMode::Equivariant, ContextMode::Invariant}) {
      for (int L : cfg.lengths) {
        EvalCell cell;
        cell.context_group = g;
        cell.mode = m;
        cell.length = L;
        if (supervised) {
          if (m == ContextMode::Equivariant) {
            // Accuracy is pooled over every context group; stored once per length.
            if (g == world.config().active_groups.front())
              cell.metrics["supervised_top1"] = supervised_accuracy(model, world, cfg, L, max_tokens);
          }
        } else {
          cell.metrics = probe_cell(model, world, cfg, g, m, L, max_tokens);
          if (m == ContextMode::Equivariant && cfg.retrieval_queries > 0) {
            const RetrievalResult rr = retrieval_cell(model, world, cfg, g, L, max_tokens);
            cell.metrics["mrr"] = rr.mrr;
            for (const auto& [k, v] : rr.hits) cell.metrics["h@" + std::to_string(k)] = v;
          }
        }
        if (!cell.metrics.empty()) rep.cells.push_back(std::move(cell));
      }
    }
  }
  rep.classification_top1 = encoder_classification(model, world, cfg);
  std::uint64_t ph = 0xcbf29ce484222325ULL;
  for (float v : model.params()) {
    ph ^= std::bit_cast<std::uint32_t>(v);
    ph *= 0x100000001b3ULL;
  }
  rep.metadata = {{"world_config_hash", world.config_hash()},
                  {"checkpoint_step", state.step},
                  {"checkpoint_param_hash", ph},
                  {"train_mode", train_mode_name(state.train_cfg.mode)},
                  {"probe_config", cfg},
                  {"random_pair_drop_at_eval", false},
                  {"note", "evaluation contexts use causal + pair-exclusion visibility only; lengths near "
                           "the trained maximum see more pairs than high-p training masks expose"}};
  return rep;
}

// ---------------------------------------------------------------------------
// SVG line charts

struct Series {
  std::string label;
  std::vector<double> x, y;
};

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string svg_line_chart(const std::string& title, const std::string& x_label,
                                  const std::string& y_label, const std::vector<Series>& series) {
  const double W = 520, H = 340, L = 60, R = 130, T = 40, B = 50;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmin > xmax) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  ymin = std::min(ymin, 0.0);
  ymax = std::max(ymax, 1.0);
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << xml_escape(x_label) << "</text>\n"
     << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
  for (double t : {ymin, (ymin + ymax) / 2, ymax})
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(t) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << t
       << "</text>\n";
  if (!series.empty())
    for (double t : series.front().x)
      os << "<text x=\"" << px(t) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\" font-size=\"10\">" << t
         << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* col = colors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i)
      os << (i ? " " : "") << px(series[s].x[i]) << ',' << py(series[s].y[i]);
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 8 << "\" y=\"" << T + 16 * (s + 1) << "\" font-size=\"11\" fill=\"" << col << "\">"
       << xml_escape(series[s].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// One chart per (mode, metric): metric vs context length, one series per
/// context group.
inline std::map<std::string, std::string> report_charts(const EvalReport& r) {
  std::map<std::string, std::map<std::string, Series>> by_chart;
  for (const auto& c : r.cells)
    for (const auto& [name, v] : c.metrics) {
      const std::string key = std::string(mode_name(c.mode)) + "_" + name;
      Series& s = by_chart[key][std::string(group_name(c.context_group))];
      s.label = std::string(group_name(c.context_group)) + " context";
      s.x.push_back(c.length);
      s.y.push_back(v);
    }
  std::map<std::string, std::string> out;
  for (auto& [key, m] : by_chart) {
    std::vector<Series> ss;
    for (auto& [g, s] : m) ss.push_back(s);
    out[key] = svg_line_chart(key, "context length (tokens)", key, ss);
  }
  return out;
}

}  // namespace ctxssl
