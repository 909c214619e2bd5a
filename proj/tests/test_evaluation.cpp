#include <gtest/gtest.h>

#include <algorithm>
#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <sstream>

#include "ctxssl/evaluation.hpp"

using namespace ctxssl;

namespace {

MatD random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  MatD m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

// Rank of the true candidate after a full descending sort by cosine
// similarity; ties are broken in favor of the true candidate.
int sorted_rank(const RowVec<double>& q, const MatD& cands, const std::vector<int>& pool, int truth) {
  std::vector<std::pair<double, int>> scored;
  for (int c : pool) scored.emplace_back(q.dot(cands.row(c)) / (q.norm() * cands.row(c).norm()), c);
  std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return (a.second == truth) > (b.second == truth);
  });
  for (std::size_t i = 0; i < scored.size(); ++i)
    if (scored[i].second == truth) return static_cast<int>(i) + 1;
  return -1;
}

WorldConfig small_world_config() {
  WorldConfig c;
  c.n_classes = 4;
  c.objects_per_class = 2;
  c.prototype_dim = 16;
  c.obs_dim = 48;
  c.render_hidden = 64;
  return c;
}

const World& small_world() {
  static const World w = make_world(small_world_config());
  return w;
}

const TrainState& small_state() {
  static const TrainState s = [] {
    ModelConfig mc;
    mc.enc_hidden = 32;
    mc.rep_dim = 16;
    mc.model_dim = 32;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.ff_mult = 2;
    mc.out_dim = 16;
    mc.pred_hidden = 16;
    TrainConfig tc;
    tc.steps = 20;
    tc.batch_sequences = 4;
    tc.k_max = 8;
    tc.lr = 1e-3;
    TrainState st = make_train_state(small_world(), mc, tc);
    train_until(st, small_world(), 20);
    return st;
  }();
  return s;
}

ProbeConfig small_probe() {
  ProbeConfig p;
  p.lengths = {0, 6};
  p.n_eval_samples = 256;
  p.n_contexts = 2;
  p.retrieval_queries = 16;
  p.retrieval_views = 10;
  p.classification_samples = 200;
  return p;
}

}  // namespace

TEST(Ridge, MatchesHandSolvedNormalEquations) {
  // Two features, five samples: on centered data the normal equations are a
  // 2x2 system, solved here by Cramer's rule.
  MatD X(5, 2), Y(5, 1);
  X << 1, 2, 2, 0, 3, 1, 4, 3, 5, 5;
  Y << 1.0, 0.5, 2.0, 3.5, 4.0;
  const double lambda = 0.3;
  const double xm0 = 3.0, xm1 = 2.2, ym = 2.2;
  double a = 0, b = 0, d = 0, r0 = 0, r1 = 0;
  for (int i = 0; i < 5; ++i) {
    const double u = X(i, 0) - xm0, v = X(i, 1) - xm1, y = Y(i, 0) - ym;
    a += u * u, b += u * v, d += v * v, r0 += u * y, r1 += v * y;
  }
  a += lambda, d += lambda;
  const double det = a * d - b * b;
  const double w0 = (r0 * d - b * r1) / det, w1 = (a * r1 - b * r0) / det;
  const double bias = ym - xm0 * w0 - xm1 * w1;
  const RidgeFit fit = ridge_fit(X, Y, lambda);
  EXPECT_NEAR(fit.weights(0, 0), w0, 1e-8);
  EXPECT_NEAR(fit.weights(1, 0), w1, 1e-8);
  EXPECT_NEAR(fit.bias(0, 0), bias, 1e-8);
}

TEST(Ridge, RealizableTargetIsRecovered) {
  Rng rng(1);
  const MatD X = random_matrix(400, 6, rng), W = random_matrix(6, 3, rng);
  const MatD Y = X * W;
  const ProbeResult r = r2_probe(X.leftCols(3), X.rightCols(3), Y, 1e-8, ProbeFeatures::Linear, 0, 0.7, 1);
  EXPECT_GE(r.r2, 0.999);
}

TEST(Ridge, NoiseTargetScoresNearZero) {
  Rng rng(2);
  const MatD X = random_matrix(2000, 8, rng), Y = random_matrix(2000, 2, rng);
  const ProbeResult r = r2_probe(X.leftCols(4), X.rightCols(4), Y, 1e-3, ProbeFeatures::Linear, 0, 0.7, 2);
  EXPECT_LE(r.r2, 0.05);
}

TEST(Ridge, BilinearFeaturesCaptureRelativeRotation) {
  // Embeddings rotate with a planar angle; the relative angle's cosine is
  // bilinear in the two views and invisible to a linear probe.
  Rng rng(3);
  const int n = 3000;
  MatD a(n, 2), t(n, 2), y(n, 1);
  for (int i = 0; i < n; ++i) {
    const double th = rng.uniform(0, kTwoPi), d = rng.uniform(0, kTwoPi);
    a.row(i) << std::cos(th), std::sin(th);
    t.row(i) << std::cos(th + d), std::sin(th + d);
    y(i, 0) = std::cos(d);
  }
  EXPECT_LT(r2_probe(a, t, y, 1e-6, ProbeFeatures::Linear, 0, 0.7, 3).r2, 0.05);
  EXPECT_GT(r2_probe(a, t, y, 1e-6, ProbeFeatures::Bilinear, 2, 0.7, 3).r2, 0.99);
}

TEST(Ridge, Errors) {
  MatD X = MatD::Zero(3, 2), Y = MatD::Zero(4, 1);
  EXPECT_THROW(ridge_fit(X, Y, 1.0), Error);
  EXPECT_THROW(ridge_fit(X, MatD::Zero(3, 1), 0.0), Error);
}

TEST(Split, DeterministicPartition) {
  const auto [a, b] = split_indices(100, 0.7, 5);
  const auto [c, d] = split_indices(100, 0.7, 5);
  EXPECT_EQ(a, c);
  EXPECT_EQ(b, d);
  EXPECT_EQ(a.size(), 70u);
  std::vector<int> all(a);
  all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(all[static_cast<std::size_t>(i)], i);
}

TEST(Classification, SeparatedBlobs) {
  Rng rng(4);
  const int n = 1000, classes = 4;
  MatD X(n, 5);
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    const int c = i % classes;
    labels.push_back(c);
    for (int k = 0; k < 5; ++k) X(i, k) = 0.1 * rng.normal() + (k == c ? 3.0 : 0.0);
  }
  EXPECT_GE(linear_probe_classification(X, labels, 1e-3, 0.7, 1), 0.99);
  EXPECT_EQ(linear_probe_classification(X, labels, 1e-3, 0.7, 1), linear_probe_classification(X, labels, 1e-3, 0.7, 1));
}

TEST(Classification, ShuffledLabelsAreAtChance) {
  Rng rng(5);
  const int n = 6000, classes = 4;
  const MatD X = random_matrix(n, 5, rng);
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(classes)));
  EXPECT_NEAR(linear_probe_classification(X, labels, 1e-3, 0.7, 2), 0.25, 0.05);
}

TEST(Classification, SingleClassIsRejected) {
  EXPECT_THROW(linear_probe_classification(MatD::Zero(10, 2), std::vector<int>(10, 1), 1e-3, 0.7, 1), Error);
}

TEST(Retrieval, ExactPredictionRanksFirst) {
  Rng rng(6);
  const MatD cands = random_matrix(20, 4, rng);
  std::vector<int> objs(20, 0), qobj, truth;
  for (int q = 0; q < 20; ++q) qobj.push_back(0), truth.push_back(q);
  const auto r = retrieval_metrics(cands, cands, objs, qobj, truth, {1, 5});
  EXPECT_EQ(r.mrr, 1.0);
  EXPECT_EQ(r.hits.at(1), 1.0);
}

TEST(Retrieval, RandomEmbeddingsHitAtChance) {
  Rng rng(7);
  const int Q = 4000, V = 50;
  MatD pred = random_matrix(Q, 16, rng), cands = random_matrix(Q * V, 16, rng);
  std::vector<int> objs, qobj, truth;
  for (int q = 0; q < Q; ++q) {
    for (int v = 0; v < V; ++v) objs.push_back(q);
    qobj.push_back(q);
    truth.push_back(q * V + static_cast<int>(rng.below(V)));
  }
  const auto r = retrieval_metrics(pred, cands, objs, qobj, truth, {1});
  EXPECT_NEAR(r.hits.at(1), 0.02, 0.01);
}

TEST(Retrieval, MatchesExhaustiveSortOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int n_obj = 4, per = 20;
    MatD cands = random_matrix(n_obj * per, 6, rng);
    if (trial % 2) cands.row(3) = cands.row(5);  // exact ties
    std::vector<int> objs;
    for (int o = 0; o < n_obj; ++o)
      for (int v = 0; v < per; ++v) objs.push_back(o);
    const int Q = 30;
    MatD pred = random_matrix(Q, 6, rng);
    std::vector<int> qobj, truth;
    for (int q = 0; q < Q; ++q) {
      const int o = static_cast<int>(rng.below(n_obj));
      qobj.push_back(o);
      truth.push_back(o * per + static_cast<int>(rng.below(per)));
    }
    double mrr = 0.0, h1 = 0.0, h5 = 0.0;
    for (int q = 0; q < Q; ++q) {
      std::vector<int> pool;
      for (int c = 0; c < n_obj * per; ++c)
        if (objs[static_cast<std::size_t>(c)] == qobj[static_cast<std::size_t>(q)]) pool.push_back(c);
      const int rank = sorted_rank(pred.row(q), cands, pool, truth[static_cast<std::size_t>(q)]);
      mrr += 1.0 / rank, h1 += rank <= 1, h5 += rank <= 5;
    }
    const auto r = retrieval_metrics(pred, cands, objs, qobj, truth, {1, 5});
    EXPECT_NEAR(r.mrr, mrr / Q, 1e-12);
    EXPECT_NEAR(r.hits.at(1), h1 / Q, 1e-12);
    EXPECT_NEAR(r.hits.at(5), h5 / Q, 1e-12);
  }
}

TEST(Retrieval, SingleViewIsRejected) {
  const MatD c = MatD::Identity(2, 2);
  EXPECT_THROW(retrieval_metrics(c.topRows(1), c, {0, 1}, {0}, {0}, {1}), Error);
}

TEST(Context, EvalContextRules) {
  Rng rng(9);
  EXPECT_EQ(build_eval_context(small_world(), GroupId::Rotation, ContextMode::Equivariant, 0, rng, 16).size(), 0u);
  const auto inv = build_eval_context(small_world(), GroupId::Color, ContextMode::Invariant, 6, rng, 16);
  ASSERT_EQ(inv.size(), 3u);
  for (const auto& p : inv.pairs)
    for (double v : p.action.values()) EXPECT_EQ(v, 0.0);
  Rng a(10), b(10);
  const auto c1 = build_eval_context(small_world(), GroupId::Color, ContextMode::Equivariant, 8, a, 16);
  const auto c2 = build_eval_context(small_world(), GroupId::Color, ContextMode::Equivariant, 8, b, 16);
  for (std::size_t i = 0; i < c1.size(); ++i) EXPECT_EQ(c1.pairs[i].y_obs, c2.pairs[i].y_obs);
  EXPECT_THROW(build_eval_context(small_world(), GroupId::Color, ContextMode::Equivariant, 18, rng, 16), Error);
  EXPECT_THROW(build_eval_context(small_world(), GroupId::Color, ContextMode::Equivariant, 3, rng, 16), Error);
}

TEST(Context, EmptyContextEqualsPlainPair) {
  const Model<float>& m = small_state().model;
  Rng rng(11);
  const ContextPair p = sample_pair(small_world(), GroupId::Rotation, ContextMode::Equivariant, rng);
  Query q{p.x_obs, p.action, {p.y_obs}};
  const auto emb = embed_with_context(m, ContextSequence{}, {q});
  ContextSequence one;
  one.pairs.push_back(p);
  Batch batch{{one}, {pair_exclusion(causal_mask(2), context_pairs(1))}};
  Mat<float> obs, actions;
  stack_batch(batch, obs, actions);
  const auto tr = m.transformer_forward(concat_tokens(m.encode(obs), actions), {make_segment(0, batch.masks[0])});
  for (Eigen::Index k = 0; k < tr.outputs.cols(); ++k) {
    EXPECT_NEAR(emb.anchors(0, k), tr.outputs(0, k), 1e-5);
    EXPECT_NEAR(emb.views[0](0, k), tr.outputs(1, k), 1e-5);
  }
}

TEST(Context, QueriesDoNotInteract) {
  const Model<float>& m = small_state().model;
  Rng rng(12);
  const auto ctx = build_eval_context(small_world(), GroupId::Color, ContextMode::Equivariant, 6, rng, 16);
  const ContextPair p1 = sample_pair(small_world(), GroupId::Color, ContextMode::Equivariant, rng);
  const ContextPair p2 = sample_pair(small_world(), GroupId::Color, ContextMode::Equivariant, rng);
  const Query q1{p1.x_obs, p1.action, {p1.y_obs}}, q2{p2.x_obs, p2.action, {p2.y_obs, p1.y_obs}};
  const auto alone = embed_with_context(m, ctx, {q1});
  const auto both = embed_with_context(m, ctx, {q1, q2});
  EXPECT_LT((alone.anchors.row(0) - both.anchors.row(0)).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_LT((alone.views[0] - both.views[0]).cwiseAbs().maxCoeff(), 1e-5);
  // The same observation as a view of another query embeds identically.
  EXPECT_LT((both.views[1].row(1) - both.views[0].row(0)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Report, DeterministicAndRoundTrips) {
  const EvalReport a = full_report(small_state(), small_world(), small_probe());
  const EvalReport b = full_report(small_state(), small_world(), small_probe());
  EXPECT_EQ(json(a).dump(), json(b).dump());
  const EvalReport back = json::parse(json(a).dump()).get<EvalReport>();
  EXPECT_TRUE(back == a);
  // Every group/mode/length cell is present and carries both R^2 metrics.
  for (GroupId g : small_world().config().active_groups)
    for (ContextMode m : {ContextMode::Equivariant, ContextMode::Invariant})
      for (int L : {0, 6}) {
        EXPECT_NO_THROW(a.metric(g, m, L, "r2_rotation"));
        EXPECT_NO_THROW(a.metric(g, m, L, "r2_color"));
      }
  EXPECT_NO_THROW(a.metric(GroupId::Rotation, ContextMode::Equivariant, 6, "h@1"));
  EXPECT_THROW(a.metric(GroupId::Rotation, ContextMode::Invariant, 6, "h@1"), Error);
}

TEST(Report, WorldMismatch) {
  WorldConfig other = small_world_config();
  other.seed = 3;
  try {
    full_report(small_state(), make_world(other), small_probe());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Mismatch);
  }
}

TEST(Report, LengthBeyondTrainingIsRejected) {
  ProbeConfig p = small_probe();
  p.lengths = {0, 18};
  EXPECT_THROW(full_report(small_state(), small_world(), p), Error);
}

TEST(Report, CsvHasOneRowPerMetric) {
  EvalReport r;
  r.cells.push_back({GroupId::Rotation, ContextMode::Equivariant, 0, {{"r2_rotation", 0.5}, {"r2_color", 0.25}}});
  r.cells.push_back({GroupId::Color, ContextMode::Invariant, 14, {{"r2_rotation", 0.1}}});
  r.classification_top1 = 0.75;
  const std::string csv = report_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("rotation,equivariant,0,r2_color,0.25\n"), std::string::npos);
  EXPECT_NE(csv.find(",,,classification_top1,0.75\n"), std::string::npos);
}

TEST(Report, ChartsAreWellFormedXml) {
  EvalReport r;
  for (int L : {0, 2, 14})
    for (GroupId g : {GroupId::Rotation, GroupId::Color})
      r.cells.push_back({g, ContextMode::Equivariant, L, {{"r2_<&>", 0.1 * L}}});
  const auto charts = report_charts(r);
  ASSERT_EQ(charts.size(), 1u);
  for (const auto& [name, svg] : charts) {
    std::istringstream in(svg);
    boost::property_tree::ptree tree;
    ASSERT_NO_THROW(boost::property_tree::read_xml(in, tree)) << name;
    EXPECT_EQ(tree.get_child("svg").count("polyline"), 2u);
  }
}
