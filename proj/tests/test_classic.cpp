#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "runpat/classic.hpp"
#include "runpat/common.hpp"

using namespace runpat;

namespace {

// Two gaussian blobs around +/- (2,2,...), labels 1/0.
void blobs(int n_per_class, int d, std::uint64_t seed, double sep, Eigen::MatrixXd& X,
           Eigen::VectorXi& y) {
  RngStream rng(seed);
  X.resize(2 * n_per_class, d);
  y.resize(2 * n_per_class);
  for (int i = 0; i < 2 * n_per_class; ++i) {
    const int cls = i % 2;
    y(i) = cls;
    for (int j = 0; j < d; ++j)
      X(i, j) = rng.normal() + (cls ? sep : -sep);
  }
}

ClassifierSpec spec_of(ModelKind kind, std::uint64_t seed = 5) {
  ClassifierSpec s = shipped_defaults(kind);
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("1-NN recalls its training set exactly") {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  blobs(20, 4, 11, 0.5, X, y);
  ClassifierSpec s = spec_of(ModelKind::KNN);
  s.hp["k"] = 1L;
  TrainedModel m = fit(s, X, y);
  Eigen::VectorXd p = predict_proba(m, X);
  for (int i = 0; i < y.size(); ++i)
    CHECK(p(i) == doctest::Approx(static_cast<double>(y(i))).epsilon(1e-12));
}

TEST_CASE("k-NN probabilities match a brute-force neighbour count") {
  RngStream rng(13);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 10 + static_cast<int>(rng.uniform_int(60));
    const int d = 2 + static_cast<int>(rng.uniform_int(5));
    const int k = 1 + static_cast<int>(rng.uniform_int(std::min(n, 9)));
    Eigen::MatrixXd X(n, d);
    Eigen::VectorXi y(n);
    for (int i = 0; i < n; ++i) {
      y(i) = static_cast<int>(rng.uniform_int(2));
      for (int j = 0; j < d; ++j) X(i, j) = rng.normal();
    }
    ClassifierSpec s = spec_of(ModelKind::KNN);
    s.hp["k"] = static_cast<long>(k);
    TrainedModel m = fit(s, X, y);

    Eigen::MatrixXd Q(5, d);
    for (long q = 0; q < Q.size(); ++q) Q.data()[q] = rng.normal() * 2;
    Eigen::VectorXd got = predict_proba(m, Q);
    for (int q = 0; q < Q.rows(); ++q) {
      std::vector<int> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        return (X.row(a) - Q.row(q)).squaredNorm() < (X.row(b) - Q.row(q)).squaredNorm();
      });
      double pos = 0;
      for (int r = 0; r < k; ++r) pos += y(idx[r]);
      CHECK(got(q) == doctest::Approx(pos / k).epsilon(1e-9));
    }
  }
}

TEST_CASE("linear SVM separates linearly separable blobs") {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  blobs(40, 3, 17, 3.0, X, y);
  ClassifierSpec s = spec_of(ModelKind::SVM_L);
  s.hp["C"] = 0.01;
  TrainedModel m = fit(s, X, y);
  Eigen::VectorXd p = predict_proba(m, X);
  int correct = 0;
  for (int i = 0; i < y.size(); ++i) correct += (p(i) >= 0.5) == (y(i) == 1);
  CHECK(correct == y.size());
  const auto& par = std::get<LinSvmParams>(m.params);
  CHECK(par.w.size() == 3);
  CHECK(par.w.allFinite());
}

TEST_CASE("polynomial SVM learns a circular boundary") {
  RngStream rng(19);
  const int n = 120;
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXi y(n);
  for (int i = 0; i < n; ++i) {
    const int cls = i % 2;
    const double r = cls ? 2.5 + 0.3 * rng.normal() : 0.8 * std::abs(rng.normal());
    const double th = rng.uniform(0, 2 * M_PI);
    X(i, 0) = r * std::cos(th);
    X(i, 1) = r * std::sin(th);
    y(i) = cls;
  }
  ClassifierSpec s = spec_of(ModelKind::SVM_P);
  TrainedModel m = fit(s, X, y);
  Eigen::VectorXd p = predict_proba(m, X);
  int correct = 0;
  for (int i = 0; i < n; ++i) correct += (p(i) >= 0.5) == (y(i) == 1);
  CHECK(correct >= static_cast<int>(0.95 * n));
}

TEST_CASE("GP posterior is symmetric for mirrored data") {
  // Training set mirror-symmetric about the origin with flipped labels: the
  // latent mode is antisymmetric, so p(origin) must be exactly one half.
  Eigen::MatrixXd X(8, 1);
  X << -2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0;
  Eigen::VectorXi y(8);
  y << 0, 0, 0, 0, 1, 1, 1, 1;
  TrainedModel m = fit(spec_of(ModelKind::GP), X, y);
  Eigen::MatrixXd origin = Eigen::MatrixXd::Zero(1, 1);
  Eigen::VectorXd p = predict_proba(m, origin);
  CHECK(std::abs(p(0) - 0.5) < 1e-6);
  // and it should classify its own side of the axis correctly
  Eigen::VectorXd self = predict_proba(m, X);
  for (int i = 0; i < 8; ++i) CHECK((self(i) >= 0.5) == (y(i) == 1));
}

TEST_CASE("leaf probability is the weighted positive fraction") {
  Eigen::MatrixXd X(4, 1);
  X << 1, 2, 3, 4;
  Eigen::VectorXi y(4);
  y << 1, 1, 1, 0;
  TreeConfig cfg;
  cfg.min_split = 100;  // forces a single leaf
  TreeParams t = fit_tree(X, y, Eigen::VectorXd::Ones(4), cfg, 1);
  REQUIRE(t.nodes.size() == 1);
  CHECK(t.nodes[0].feature == -1);
  CHECK(t.leaf_prob(X.row(0)) == doctest::Approx(0.75).epsilon(1e-12));

  Eigen::VectorXd w(4);
  w << 1, 1, 1, 3;  // re-weighting shifts the fraction to 0.5
  TreeParams t2 = fit_tree(X, y, w, cfg, 1);
  CHECK(t2.leaf_prob(X.row(0)) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("unlimited depth tree memorizes distinct points") {
  RngStream rng(23);
  const int n = 64;
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXi y(n);
  for (int i = 0; i < n; ++i) {
    y(i) = static_cast<int>(rng.uniform_int(2));
    for (int j = 0; j < 3; ++j) X(i, j) = rng.normal();
  }
  TreeConfig cfg;  // defaults: unlimited depth, best splitter, all features
  TreeParams t = fit_tree(X, y, Eigen::VectorXd::Ones(n), cfg, 3);
  for (int i = 0; i < n; ++i)
    CHECK((t.leaf_prob(X.row(i)) >= 0.5) == (y(i) == 1));
}

TEST_CASE("forest probability is the mean of its trees") {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  blobs(30, 4, 29, 1.0, X, y);
  ClassifierSpec s = spec_of(ModelKind::RF, 7);
  s.hp["n_trees"] = 25L;
  TrainedModel m = fit(s, X, y);
  const auto& par = std::get<RfParams>(m.params);
  REQUIRE(par.trees.size() == 25);

  Eigen::MatrixXd Q = X.topRows(10);
  Eigen::VectorXd got = predict_proba(m, Q);
  for (int q = 0; q < Q.rows(); ++q) {
    double acc = 0;
    for (const auto& t : par.trees) acc += t.leaf_prob(Q.row(q));
    CHECK(got(q) == doctest::Approx(acc / par.trees.size()).epsilon(1e-12));
  }
}

TEST_CASE("adaboost vote recomputed from stored stumps, and boosting helps") {
  // 1-D staircase: a single depth-1 stump cannot get past 75%, a boosted
  // committee of stumps can carve out both intervals.
  const int n = 200;
  Eigen::MatrixXd X(n, 1);
  Eigen::VectorXi y(n);
  for (int i = 0; i < n; ++i) {
    const double x = 4.0 * i / (n - 1);
    X(i, 0) = x;
    y(i) = ((x >= 1 && x < 2) || x >= 3) ? 1 : 0;
  }
  ClassifierSpec s = spec_of(ModelKind::ADB, 31);
  s.hp["n_rounds"] = 60L;
  s.hp["weak_depth"] = 1L;
  TrainedModel m = fit(s, X, y);
  const auto& par = std::get<AdbParams>(m.params);
  REQUIRE(!par.stumps.empty());
  REQUIRE(par.stumps.size() == par.alpha.size());

  Eigen::VectorXd p = predict_proba(m, X);
  const double total = std::accumulate(par.alpha.begin(), par.alpha.end(), 0.0);
  int correct = 0, first_correct = 0;
  for (int i = 0; i < n; ++i) {
    double score = 0;
    for (size_t mdx = 0; mdx < par.stumps.size(); ++mdx) {
      const int h = par.stumps[mdx].leaf_prob(X.row(i)) >= 0.5 ? 1 : 0;
      score += par.alpha[mdx] * (2 * h - 1);
    }
    CHECK(p(i) == doctest::Approx(0.5 * (score / total + 1.0)).epsilon(1e-12));
    correct += (p(i) >= 0.5) == (y(i) == 1);
    first_correct += (par.stumps[0].leaf_prob(X.row(i)) >= 0.5) == (y(i) == 1);
  }
  CHECK(correct >= first_correct);
  CHECK(correct >= static_cast<int>(0.95 * n));
}

TEST_CASE("MLP fits a separable problem") {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  blobs(40, 2, 37, 2.0, X, y);
  ClassifierSpec s = spec_of(ModelKind::MLP, 41);
  s.hp["neurons"] = 10L;
  s.hp["max_iter"] = 500L;
  TrainedModel m = fit(s, X, y);
  Eigen::VectorXd p = predict_proba(m, X);
  int correct = 0;
  for (int i = 0; i < y.size(); ++i) correct += (p(i) >= 0.5) == (y(i) == 1);
  CHECK(correct >= static_cast<int>(0.98 * y.size()));
}

TEST_CASE("hyper-parameter grids match the published search spaces") {
  CHECK(hyper_grid(ModelKind::KNN).size() == 11);
  CHECK(hyper_grid(ModelKind::SVM_L).size() == 9);
  CHECK(hyper_grid(ModelKind::SVM_P).size() == 44);
  CHECK(hyper_grid(ModelKind::GP).size() == 1);
  CHECK(hyper_grid(ModelKind::DT).size() == 360);
  CHECK(hyper_grid(ModelKind::ADB).size() == 3);
  CHECK(hyper_grid(ModelKind::RF).size() == 243);
  CHECK(hyper_grid(ModelKind::MLP).size() == 24);

  const std::vector<double> c_expect = {0.0001, 0.001, 0.005, 0.01, 0.02,
                                        0.03,   0.04,  0.05,  0.06};
  auto lin = hyper_grid(ModelKind::SVM_L);
  for (size_t i = 0; i < lin.size(); ++i)
    CHECK(lin[i].getd("C") == doctest::Approx(c_expect[i]).epsilon(1e-15));

  auto knn = hyper_grid(ModelKind::KNN);
  for (size_t i = 0; i < knn.size(); ++i)
    CHECK(knn[i].geti("k") == static_cast<long>(i) + 2);

  auto poly = hyper_grid(ModelKind::SVM_P);
  CHECK(poly.front().getd("C") == doctest::Approx(0.1));
  CHECK(poly.front().geti("degree") == 2);
  CHECK(poly.back().getd("C") == doctest::Approx(1.1));
  CHECK(poly.back().geti("degree") == 5);
}

TEST_CASE("shipped defaults carry the documented settings") {
  CHECK(shipped_defaults(ModelKind::KNN).geti("k") == 7);
  CHECK(shipped_defaults(ModelKind::SVM_L).getd("C") == doctest::Approx(0.001));
  ClassifierSpec sp = shipped_defaults(ModelKind::SVM_P);
  CHECK(sp.getd("C") == doctest::Approx(1.1));
  CHECK(sp.geti("degree") == 3);
  ClassifierSpec dt = shipped_defaults(ModelKind::DT);
  CHECK(dt.geti("max_depth") == 10);
  CHECK(dt.geti("min_leaf") == 2);
  CHECK(dt.gets("splitter") == "random");
  CHECK(dt.gets("max_features") == "sqrt");
  ClassifierSpec rf = shipped_defaults(ModelKind::RF);
  CHECK(rf.geti("n_trees") == 200);
  CHECK(rf.geti("max_depth") == 10);
  CHECK(rf.gets("max_features") == "log2");
  CHECK(rf.gets("criterion") == "gini");
  ClassifierSpec mlp = shipped_defaults(ModelKind::MLP);
  CHECK(mlp.geti("neurons") == 100);
  CHECK(mlp.geti("max_iter") == 1000);
  ClassifierSpec adb = shipped_defaults(ModelKind::ADB);
  CHECK(adb.geti("n_rounds") == 100);
  CHECK(adb.geti("weak_depth") == 3);
}

TEST_CASE("round-tripped models predict bit-identically") {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  blobs(25, 3, 43, 1.5, X, y);
  Eigen::MatrixXd Q = X.topRows(12);
  for (ModelKind kind : {ModelKind::KNN, ModelKind::SVM_L, ModelKind::SVM_P,
                         ModelKind::GP, ModelKind::DT, ModelKind::ADB, ModelKind::RF,
                         ModelKind::MLP}) {
    ClassifierSpec s = spec_of(kind, 47);
    if (kind == ModelKind::ADB) s.hp["n_rounds"] = 10L;
    if (kind == ModelKind::RF) s.hp["n_trees"] = 10L;
    if (kind == ModelKind::MLP) s.hp["max_iter"] = 100L;
    TrainedModel m = fit(s, X, y, InputRegime::points, "h1");
    const std::string text = serialize_model(m);
    TrainedModel back = deserialize_model(text);
    CHECK(back.schema_hash == "h1");
    CHECK(back.n_features == 3);
    Eigen::VectorXd a = predict_proba(m, Q, "h1");
    Eigen::VectorXd b = predict_proba(back, Q, "h1");
    INFO("model ", to_string(kind));
    CHECK(a == b);
    CHECK(serialize_model(back) == text);
  }
}

TEST_CASE("prediction rejects a mismatched feature count or schema") {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  blobs(10, 3, 53, 1.5, X, y);
  TrainedModel m = fit(spec_of(ModelKind::KNN), X, y, InputRegime::points, "right");
  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 4);
  CHECK_THROWS_AS(predict_proba(m, bad, "right"), Error);
  try {
    predict_proba(m, X.topRows(2), "wrong");
    FAIL("expected SchemaMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::SchemaMismatch);
  }
}

TEST_CASE("stochastic learners are reproducible under a fixed seed") {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  blobs(30, 4, 59, 1.0, X, y);
  for (ModelKind kind : {ModelKind::DT, ModelKind::RF, ModelKind::MLP}) {
    ClassifierSpec s = spec_of(kind, 61);
    if (kind == ModelKind::RF) s.hp["n_trees"] = 15L;
    if (kind == ModelKind::MLP) s.hp["max_iter"] = 120L;
    TrainedModel a = fit(s, X, y);
    TrainedModel b = fit(s, X, y);
    Eigen::VectorXd pa = predict_proba(a, X);
    Eigen::VectorXd pb = predict_proba(b, X);
    INFO("model ", to_string(kind));
    CHECK(pa == pb);
  }
}

TEST_CASE("single-class training is rejected") {
  Eigen::MatrixXd X = Eigen::MatrixXd::Random(10, 2);
  Eigen::VectorXi y = Eigen::VectorXi::Zero(10);
  try {
    fit(spec_of(ModelKind::KNN), X, y);
    FAIL("expected SingleClassTraining");
  } catch (const Error& e) {
    CHECK(e.code() == Err::SingleClassTraining);
  }
}
