#include "runpat/classic.hpp"

#include <nlohmann/json.hpp>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "runpat/common.hpp"
#include "runpat/csv.hpp"

namespace runpat {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::KNN: return "knn";
    case ModelKind::SVM_L: return "svm_l";
    case ModelKind::SVM_P: return "svm_p";
    case ModelKind::GP: return "gp";
    case ModelKind::DT: return "dt";
    case ModelKind::ADB: return "adb";
    case ModelKind::RF: return "rf";
    case ModelKind::MLP: return "mlp";
  }
  fail(Err::InvariantViolation, "bad model kind");
}

ModelKind model_kind_from_string(const std::string& s) {
  for (ModelKind k : {ModelKind::KNN, ModelKind::SVM_L, ModelKind::SVM_P, ModelKind::GP,
                      ModelKind::DT, ModelKind::ADB, ModelKind::RF, ModelKind::MLP})
    if (to_string(k) == s) return k;
  fail(Err::SchemaMismatch, "unknown model kind '" + s + "'");
}

std::string to_string(InputRegime r) {
  switch (r) {
    case InputRegime::time_series: return "time_series";
    case InputRegime::ts_plus_points: return "ts_plus_points";
    case InputRegime::points: return "points";
  }
  fail(Err::InvariantViolation, "bad input regime");
}

InputRegime regime_from_string(const std::string& s) {
  for (InputRegime r :
       {InputRegime::time_series, InputRegime::ts_plus_points, InputRegime::points})
    if (to_string(r) == s) return r;
  fail(Err::SchemaMismatch, "unknown input regime '" + s + "'");
}

namespace {

const HyperValue& get_hp(const ClassifierSpec& spec, const std::string& name) {
  auto it = spec.hp.find(name);
  if (it == spec.hp.end())
    fail(Err::SchemaMismatch,
         to_string(spec.kind) + " spec is missing hyperparameter '" + name + "'");
  return it->second;
}

}  // namespace

long ClassifierSpec::geti(const std::string& name) const {
  const auto& v = get_hp(*this, name);
  if (const long* p = std::get_if<long>(&v)) return *p;
  fail(Err::SchemaMismatch, "hyperparameter '" + name + "' is not an integer");
}

double ClassifierSpec::getd(const std::string& name) const {
  const auto& v = get_hp(*this, name);
  if (const double* p = std::get_if<double>(&v)) return *p;
  if (const long* p = std::get_if<long>(&v)) return static_cast<double>(*p);
  fail(Err::SchemaMismatch, "hyperparameter '" + name + "' is not numeric");
}

std::string ClassifierSpec::gets(const std::string& name) const {
  const auto& v = get_hp(*this, name);
  if (const std::string* p = std::get_if<std::string>(&v)) return *p;
  fail(Err::SchemaMismatch, "hyperparameter '" + name + "' is not a string");
}

std::string ClassifierSpec::describe() const {
  std::ostringstream os;
  os << to_string(kind) << "(";
  bool first = true;
  for (const auto& [k, v] : hp) {
    if (!first) os << ",";
    first = false;
    os << k << "=";
    if (const long* p = std::get_if<long>(&v))
      os << *p;
    else if (const double* p = std::get_if<double>(&v))
      os << fmt_g9(*p);
    else
      os << std::get<std::string>(v);
  }
  os << ")";
  return os.str();
}

ClassifierSpec shipped_defaults(ModelKind kind) {
  ClassifierSpec s;
  s.kind = kind;
  switch (kind) {
    case ModelKind::KNN:
      s.hp = {{"k", 7L}};
      break;
    case ModelKind::SVM_L:
      s.hp = {{"C", 0.001}};
      break;
    case ModelKind::SVM_P:
      s.hp = {{"C", 1.1}, {"degree", 3L}};
      break;
    case ModelKind::GP:
      break;
    case ModelKind::DT:
      s.hp = {{"max_depth", 10L},    {"min_split", 2L},       {"min_leaf", 2L},
              {"splitter", std::string("random")}, {"max_features", std::string("sqrt")},
              {"criterion", std::string("gini")}};
      break;
    case ModelKind::ADB:
      s.hp = {{"n_rounds", 100L}, {"weak_depth", 3L}};
      break;
    case ModelKind::RF:
      s.hp = {{"n_trees", 200L},   {"max_depth", 10L},
              {"min_split", 2L},   {"min_leaf", 1L},
              {"max_features", std::string("log2")}, {"criterion", std::string("gini")}};
      break;
    case ModelKind::MLP:
      s.hp = {{"neurons", 100L}, {"max_iter", 1000L}, {"lr", 0.01}};
      break;
  }
  return s;
}

std::vector<ClassifierSpec> hyper_grid(ModelKind kind) {
  std::vector<ClassifierSpec> out;
  auto push = [&](std::map<std::string, HyperValue> hp) {
    ClassifierSpec s;
    s.kind = kind;
    s.hp = std::move(hp);
    out.push_back(std::move(s));
  };
  switch (kind) {
    case ModelKind::KNN:
      for (long k = 2; k <= 12; ++k) push({{"k", k}});
      break;
    case ModelKind::SVM_L:
      for (double C : {0.0001, 0.001, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06})
        push({{"C", C}});
      break;
    case ModelKind::SVM_P:
      for (double C : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1})
        for (long d = 2; d <= 5; ++d) push({{"C", C}, {"degree", d}});
      break;
    case ModelKind::GP:
      push({});
      break;
    case ModelKind::DT:
      for (long depth : {0L, 5L, 10L, 20L, 30L})  // 0 = unlimited
        for (long ms : {2L, 5L, 10L})
          for (long ml : {1L, 2L, 4L})
            for (const char* sp : {"best", "random"})
              for (const char* mf : {"sqrt", "log2"})
                for (const char* cr : {"gini", "entropy"})
                  push({{"max_depth", depth},
                        {"min_split", ms},
                        {"min_leaf", ml},
                        {"splitter", std::string(sp)},
                        {"max_features", std::string(mf)},
                        {"criterion", std::string(cr)}});
      break;
    case ModelKind::ADB:
      for (long d : {1L, 2L, 3L}) push({{"n_rounds", 100L}, {"weak_depth", d}});
      break;
    case ModelKind::RF:
      for (long n : {100L, 200L, 300L})
        for (long depth : {10L, 15L, 20L})
          for (long ms : {2L, 5L, 10L})
            for (long ml : {1L, 2L, 4L})
              for (const char* cr : {"gini", "entropy", "log_loss"})
                push({{"n_trees", n},
                      {"max_depth", depth},
                      {"min_split", ms},
                      {"min_leaf", ml},
                      {"max_features", std::string("log2")},
                      {"criterion", std::string(cr)}});
      break;
    case ModelKind::MLP:
      for (long h : {1L, 10L, 25L, 50L, 75L, 100L})
        for (long it : {100L, 250L, 500L, 1000L})
          push({{"neurons", h}, {"max_iter", it}, {"lr", 0.01}});
      break;
  }
  return out;
}

// --- CART --------------------------------------------------------------------

namespace {

double impurity(double wp, double wn, TreeConfig::Criterion crit) {
  const double tot = wp + wn;
  if (tot <= 0) return 0;
  const double p = wp / tot, q = wn / tot;
  if (crit == TreeConfig::Criterion::gini) return 1.0 - p * p - q * q;
  double h = 0;  // entropy and log_loss share the formula
  if (p > 0) h -= p * std::log2(p);
  if (q > 0) h -= q * std::log2(q);
  return h;
}

struct SplitChoice {
  int feature = -1;
  double threshold = 0;
  double score = std::numeric_limits<double>::infinity();
};

struct TreeBuilder {
  const Eigen::MatrixXd& X;
  const Eigen::VectorXi& y;
  const Eigen::VectorXd& w;
  const TreeConfig& cfg;
  RngStream rng;
  std::vector<TreeNode> nodes;

  int n_candidate_features() const {
    const int d = static_cast<int>(X.cols());
    switch (cfg.max_features) {
      case TreeConfig::MaxFeatures::all: return d;
      case TreeConfig::MaxFeatures::sqrt_:
        return std::max(1, static_cast<int>(std::sqrt(double(d))));
      case TreeConfig::MaxFeatures::log2_:
        return std::max(1, static_cast<int>(std::log2(double(d))));
    }
    return d;
  }

  std::vector<int> sample_features() {
    const int d = static_cast<int>(X.cols());
    const int m = n_candidate_features();
    std::vector<int> perm(d);
    std::iota(perm.begin(), perm.end(), 0);
    if (m < d) {
      for (int i = 0; i < m; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(d - i));
        std::swap(perm[i], perm[j]);
      }
      perm.resize(m);
      std::sort(perm.begin(), perm.end());
    }
    return perm;
  }

  // Best (feature, threshold) among the candidates; invalid when no split
  // leaves min_leaf samples on each side.
  SplitChoice find_split(const std::vector<int>& idx, const std::vector<int>& features) {
    SplitChoice best;
    const int n = static_cast<int>(idx.size());
    std::vector<std::pair<double, int>> vals(n);
    for (int f : features) {
      for (int i = 0; i < n; ++i) vals[i] = {X(idx[i], f), idx[i]};
      std::sort(vals.begin(), vals.end());
      if (vals.front().first == vals.back().first) continue;
      if (cfg.random_splitter) {
        const double lo = vals.front().first, hi = vals.back().first;
        const double thr = lo + rng.uniform01() * (hi - lo);
        double wlp = 0, wln = 0, wrp = 0, wrn = 0;
        int nl = 0;
        for (const auto& [v, i] : vals) {
          if (v <= thr) {
            ++nl;
            (y(i) ? wlp : wln) += w(i);
          } else {
            (y(i) ? wrp : wrn) += w(i);
          }
        }
        if (nl < cfg.min_leaf || n - nl < cfg.min_leaf) continue;
        const double wl = wlp + wln, wr = wrp + wrn;
        if (wl + wr <= 0) continue;
        const double score = (wl * impurity(wlp, wln, cfg.criterion) +
                              wr * impurity(wrp, wrn, cfg.criterion)) /
                             (wl + wr);
        if (score < best.score) best = {f, thr, score};
      } else {
        double wrp = 0, wrn = 0;
        for (const auto& [v, i] : vals) (y(i) ? wrp : wrn) += w(i);
        double wlp = 0, wln = 0;
        const double wtot = wrp + wrn;
        for (int i = 0; i + 1 < n; ++i) {
          const auto& [v, ridx] = vals[i];
          (y(ridx) ? wlp : wln) += w(ridx);
          (y(ridx) ? wrp : wrn) -= w(ridx);
          if (v == vals[i + 1].first) continue;
          if (i + 1 < cfg.min_leaf || n - i - 1 < cfg.min_leaf) continue;
          const double wl = wlp + wln, wr = wrp + wrn;
          if (wtot <= 0) continue;
          const double score = (wl * impurity(wlp, wln, cfg.criterion) +
                                wr * impurity(wrp, wrn, cfg.criterion)) /
                               wtot;
          if (score < best.score) best = {f, 0.5 * (v + vals[i + 1].first), score};
        }
      }
    }
    return best;
  }

  int build(std::vector<int> idx, int depth) {
    TreeNode node;
    int n_pos = 0;
    for (int i : idx) {
      (y(i) ? node.w_pos : node.w_neg) += w(i);
      n_pos += y(i);
    }
    const int id = static_cast<int>(nodes.size());
    nodes.push_back(node);

    const bool pure = n_pos == 0 || n_pos == static_cast<int>(idx.size());
    const bool depth_ok = cfg.max_depth == 0 || depth < cfg.max_depth;
    if (pure || !depth_ok || static_cast<int>(idx.size()) < cfg.min_split) return id;

    SplitChoice split = find_split(idx, sample_features());
    if (split.feature < 0 && cfg.max_features != TreeConfig::MaxFeatures::all) {
      // Sampled features were all constant here; retry with every feature so
      // that consistent data always ends in pure leaves.
      std::vector<int> all(X.cols());
      std::iota(all.begin(), all.end(), 0);
      split = find_split(idx, all);
    }
    if (split.feature < 0) return id;

    std::vector<int> left_idx, right_idx;
    for (int i : idx)
      (X(i, split.feature) <= split.threshold ? left_idx : right_idx).push_back(i);
    if (left_idx.empty() || right_idx.empty()) return id;

    nodes[id].feature = split.feature;
    nodes[id].threshold = split.threshold;
    const int l = build(std::move(left_idx), depth + 1);
    const int r = build(std::move(right_idx), depth + 1);
    nodes[id].left = l;
    nodes[id].right = r;
    return id;
  }
};

}  // namespace

double TreeParams::leaf_prob(const Eigen::VectorXd& x) const {
  int cur = 0;
  while (nodes[cur].feature >= 0)
    cur = x(nodes[cur].feature) <= nodes[cur].threshold ? nodes[cur].left : nodes[cur].right;
  const double tot = nodes[cur].w_pos + nodes[cur].w_neg;
  return tot > 0 ? nodes[cur].w_pos / tot : 0.5;
}

TreeParams fit_tree(const Eigen::MatrixXd& X, const Eigen::VectorXi& y,
                    const Eigen::VectorXd& sample_weight, const TreeConfig& cfg,
                    std::uint64_t seed) {
  TreeBuilder builder{X, y, sample_weight, cfg, RngStream(seed), {}};
  std::vector<int> idx(X.rows());
  std::iota(idx.begin(), idx.end(), 0);
  builder.build(std::move(idx), 0);
  TreeParams out;
  out.nodes = std::move(builder.nodes);
  return out;
}

// --- model fitting -----------------------------------------------------------

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

TreeConfig tree_config_from(const ClassifierSpec& spec) {
  TreeConfig cfg;
  cfg.max_depth = static_cast<int>(spec.geti("max_depth"));
  cfg.min_split = static_cast<int>(spec.geti("min_split"));
  cfg.min_leaf = static_cast<int>(spec.geti("min_leaf"));
  const auto sp = spec.hp.find("splitter");  // forests have no splitter choice
  cfg.random_splitter =
      sp != spec.hp.end() && std::get<std::string>(sp->second) == "random";
  const std::string mf = spec.gets("max_features");
  cfg.max_features = mf == "sqrt"   ? TreeConfig::MaxFeatures::sqrt_
                     : mf == "log2" ? TreeConfig::MaxFeatures::log2_
                                    : TreeConfig::MaxFeatures::all;
  const std::string cr = spec.gets("criterion");
  cfg.criterion = cr == "gini"      ? TreeConfig::Criterion::gini
                  : cr == "entropy" ? TreeConfig::Criterion::entropy
                                    : TreeConfig::Criterion::log_loss;
  return cfg;
}

KnnParams fit_knn(const ClassifierSpec& spec, const Eigen::MatrixXd& X,
                  const Eigen::VectorXi& y) {
  KnnParams p;
  p.X = X;
  p.y = y;
  p.k = static_cast<int>(spec.geti("k"));
  if (p.k < 1) fail(Err::InvariantViolation, "knn needs k >= 1");
  return p;
}

Eigen::VectorXd predict_knn(const KnnParams& p, const Eigen::MatrixXd& X) {
  const int n = static_cast<int>(p.X.rows());
  const int k = std::min(p.k, n);
  Eigen::VectorXd out(X.rows());
  std::vector<std::pair<double, int>> dist(n);
  for (int q = 0; q < X.rows(); ++q) {
    for (int i = 0; i < n; ++i)
      dist[i] = {(p.X.row(i) - X.row(q)).squaredNorm(), i};
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    int pos = 0;
    double dpos = 0, dneg = 0;
    for (int i = 0; i < k; ++i) {
      const double d = std::sqrt(dist[i].first);
      if (p.y(dist[i].second)) {
        ++pos;
        dpos += d;
      } else {
        dneg += d;
      }
    }
    double prob = static_cast<double>(pos) / k;
    // Ties go to the class with the smaller summed neighbor distance, then to
    // class 0; the probability is nudged so "1 iff p >= 0.5" stays the rule.
    if (2 * pos == k && !(dpos < dneg)) prob -= 1e-9;
    out(q) = prob;
  }
  return out;
}

LinSvmParams fit_svm_l(const ClassifierSpec& spec, const Eigen::MatrixXd& X,
                       const Eigen::VectorXi& y) {
  const double C = spec.getd("C");
  if (!(C > 0)) fail(Err::InvariantViolation, "svm_l needs C > 0");
  const int n = static_cast<int>(X.rows());
  const double lambda = 1.0 / (2.0 * C * n);
  Eigen::VectorXd yy(n);
  for (int i = 0; i < n; ++i) yy(i) = y(i) ? 1.0 : -1.0;

  Eigen::VectorXd w = Eigen::VectorXd::Zero(X.cols());
  double b = 0;
  const int epochs = 10000;
  const double radius = 1.0 / std::sqrt(lambda);
  for (int t = 1; t <= epochs; ++t) {
    const double eta = 1.0 / (lambda * t);
    Eigen::VectorXd margin = yy.array() * (X * w).array() + yy.array() * b;
    Eigen::VectorXd gw = lambda * w;
    double gb = 0;
    for (int i = 0; i < n; ++i)
      if (margin(i) < 1.0) {
        gw -= (yy(i) / n) * X.row(i).transpose();
        gb -= yy(i) / n;
      }
    w -= eta * gw;
    b -= eta * gb;
    const double norm = w.norm();
    if (norm > radius) w *= radius / norm;
  }
  return {w, b};
}

Eigen::MatrixXd poly_kernel(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, int degree) {
  Eigen::MatrixXd K = (A * B.transpose()).array() + 1.0;
  return K.array().pow(degree);
}

PolySvmParams fit_svm_p(const ClassifierSpec& spec, const Eigen::MatrixXd& X,
                        const Eigen::VectorXi& y) {
  const double C = spec.getd("C");
  const int degree = static_cast<int>(spec.geti("degree"));
  if (!(C > 0) || degree < 1) fail(Err::InvariantViolation, "svm_p needs C > 0, degree >= 1");
  const int n = static_cast<int>(X.rows());
  Eigen::VectorXd yy(n);
  for (int i = 0; i < n; ++i) yy(i) = y(i) ? 1.0 : -1.0;
  const Eigen::MatrixXd K = poly_kernel(X, X, degree);

  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  double b = 0;
  const double tol = 1e-3;
  auto f_at = [&](int i) { return (alpha.array() * yy.array() * K.col(i).array()).sum() + b; };

  // Two-coordinate dual ascent, SMO style: sweep i, try the partner with the
  // largest |E_i - E_j| first, then any partner whose 2-variable subproblem
  // actually moves (the best-gap pair is often clipped to an empty window).
  auto try_pair = [&](int i, int j, double Ei) {
    if (j == i) return false;
    const double Ej = f_at(j) - yy(j);
    const double ai_old = alpha(i), aj_old = alpha(j);
    double L, H;
    if (yy(i) != yy(j)) {
      L = std::max(0.0, aj_old - ai_old);
      H = std::min(C, C + aj_old - ai_old);
    } else {
      L = std::max(0.0, ai_old + aj_old - C);
      H = std::min(C, ai_old + aj_old);
    }
    if (L >= H) return false;
    const double eta = 2.0 * K(i, j) - K(i, i) - K(j, j);
    if (eta >= 0) return false;
    double aj = aj_old - yy(j) * (Ei - Ej) / eta;
    aj = std::clamp(aj, L, H);
    if (std::abs(aj - aj_old) < 1e-5) return false;
    const double ai = ai_old + yy(i) * yy(j) * (aj_old - aj);
    alpha(i) = ai;
    alpha(j) = aj;
    const double b1 =
        b - Ei - yy(i) * (ai - ai_old) * K(i, i) - yy(j) * (aj - aj_old) * K(i, j);
    const double b2 =
        b - Ej - yy(i) * (ai - ai_old) * K(i, j) - yy(j) * (aj - aj_old) * K(j, j);
    if (ai > 0 && ai < C)
      b = b1;
    else if (aj > 0 && aj < C)
      b = b2;
    else
      b = 0.5 * (b1 + b2);
    return true;
  };

  const int max_passes = 200;
  for (int pass = 0; pass < max_passes; ++pass) {
    int changed = 0;
    for (int i = 0; i < n; ++i) {
      const double Ei = f_at(i) - yy(i);
      const bool violates = (yy(i) * Ei < -tol && alpha(i) < C) ||
                            (yy(i) * Ei > tol && alpha(i) > 0);
      if (!violates) continue;
      int jbest = -1;
      double best = -1;
      for (int cand = 0; cand < n; ++cand) {
        if (cand == i) continue;
        const double gap = std::abs(Ei - (f_at(cand) - yy(cand)));
        if (gap > best) {
          best = gap;
          jbest = cand;
        }
      }
      bool moved = jbest >= 0 && try_pair(i, jbest, Ei);
      for (int cand = 0; !moved && cand < n; ++cand) moved = try_pair(i, cand, Ei);
      if (moved) ++changed;
    }
    if (changed == 0) break;
  }

  PolySvmParams p;
  p.degree = degree;
  p.b = b;
  std::vector<int> sv;
  for (int i = 0; i < n; ++i)
    if (alpha(i) > 1e-12) sv.push_back(i);
  p.support.resize(sv.size(), X.cols());
  p.alpha_y.resize(sv.size());
  for (size_t s = 0; s < sv.size(); ++s) {
    p.support.row(s) = X.row(sv[s]);
    p.alpha_y(s) = alpha(sv[s]) * yy(sv[s]);
  }
  return p;
}

GpParams fit_gp(const Eigen::MatrixXd& X, const Eigen::VectorXi& y) {
  const int n = static_cast<int>(X.rows());
  // Median-distance lengthscale heuristic.
  std::vector<double> d2;
  d2.reserve(static_cast<size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) d2.push_back((X.row(i) - X.row(j)).norm());
  double ell = 1.0;
  if (!d2.empty()) {
    std::nth_element(d2.begin(), d2.begin() + d2.size() / 2, d2.end());
    ell = d2[d2.size() / 2];
    if (!(ell > 0)) ell = 1.0;
  }

  Eigen::VectorXd t(n);  // targets as Bernoulli {0,1}
  for (int i = 0; i < n; ++i) t(i) = y(i) ? 1.0 : 0.0;
  Eigen::VectorXd yy = 2.0 * t.array() - 1.0;

  for (double jitter = 0.0; jitter <= 1.1e-3;
       jitter = jitter == 0.0 ? 1e-9 : jitter * 10.0) {
    Eigen::MatrixXd K(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) {
        const double v = std::exp(-(X.row(i) - X.row(j)).squaredNorm() / (2.0 * ell * ell));
        K(i, j) = v;
        K(j, i) = v;
      }
    K.diagonal().array() += jitter;

    Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
    auto objective = [&](const Eigen::VectorXd& fv, const Eigen::VectorXd& av) {
      double lik = 0;
      for (int i = 0; i < n; ++i) lik += -std::log1p(std::exp(-yy(i) * fv(i)));
      return 0.5 * av.dot(fv) - lik;  // negative unnormalized log posterior
    };

    bool chol_ok = true;
    Eigen::MatrixXd L;
    Eigen::VectorXd sqrt_w(n), pi(n);
    for (int iter = 0; iter < 100; ++iter) {
      for (int i = 0; i < n; ++i) pi(i) = sigmoid(f(i));
      Eigen::VectorXd wdiag = pi.array() * (1.0 - pi.array());
      sqrt_w = wdiag.array().sqrt();
      Eigen::MatrixXd B = sqrt_w.asDiagonal() * K * sqrt_w.asDiagonal();
      B.diagonal().array() += 1.0;
      Eigen::LLT<Eigen::MatrixXd> llt(B);
      if (llt.info() != Eigen::Success) {
        chol_ok = false;
        break;
      }
      L = llt.matrixL();
      Eigen::VectorXd grad = t - pi;
      Eigen::VectorXd bvec = wdiag.asDiagonal() * f + grad;
      Eigen::VectorXd sKb = sqrt_w.asDiagonal() * (K * bvec);
      Eigen::VectorXd a_new =
          bvec - sqrt_w.asDiagonal() * llt.solve(sKb);
      Eigen::VectorXd f_new = K * a_new;

      // Halve the Newton step if it does not lower the objective; halving in
      // the dual variable keeps f = K a consistent without factorizing K.
      double prev = objective(f, a);
      int halvings = 0;
      while (objective(f_new, a_new) > prev + 1e-12 && halvings < 40) {
        a_new = 0.5 * (a + a_new);
        f_new = K * a_new;
        ++halvings;
      }
      const double delta = (f_new - f).norm();
      f = f_new;
      a = a_new;
      for (int i = 0; i < n; ++i) pi(i) = sigmoid(f(i));
      const double gnorm = (a - (t - pi)).norm();  // = ||d(-log posterior)/df||
      if (gnorm < 1e-8 || delta < 1e-12) break;
    }
    if (!chol_ok) continue;  // escalate jitter

    for (int i = 0; i < n; ++i) pi(i) = sigmoid(f(i));
    GpParams p;
    p.X = X;
    p.grad = t - pi;
    p.sqrt_w = sqrt_w;
    p.L = L;
    p.lengthscale = ell;
    return p;
  }
  fail(Err::NumericalFailure, "gp: covariance not positive definite after jitter escalation");
}

Eigen::VectorXd predict_gp(const GpParams& p, const Eigen::MatrixXd& X) {
  const int n = static_cast<int>(p.X.rows());
  Eigen::VectorXd out(X.rows());
  for (int q = 0; q < X.rows(); ++q) {
    Eigen::VectorXd ks(n);
    for (int i = 0; i < n; ++i)
      ks(i) = std::exp(-(p.X.row(i) - X.row(q)).squaredNorm() /
                       (2.0 * p.lengthscale * p.lengthscale));
    const double mu = ks.dot(p.grad);
    Eigen::VectorXd v =
        p.L.triangularView<Eigen::Lower>().solve(p.sqrt_w.asDiagonal() * ks);
    const double var = std::max(0.0, 1.0 - v.squaredNorm());
    out(q) = sigmoid(mu / std::sqrt(1.0 + 3.14159265358979323846 * var / 8.0));
  }
  return out;
}

AdbParams fit_adb(const ClassifierSpec& spec, const Eigen::MatrixXd& X,
                  const Eigen::VectorXi& y) {
  const int rounds = static_cast<int>(spec.geti("n_rounds"));
  const int depth = static_cast<int>(spec.geti("weak_depth"));
  if (rounds < 1 || depth < 1)
    fail(Err::InvariantViolation, "adb needs n_rounds >= 1, weak_depth >= 1");
  const int n = static_cast<int>(X.rows());
  TreeConfig cfg;
  cfg.max_depth = depth;
  Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0 / n);
  AdbParams p;
  for (int m = 0; m < rounds; ++m) {
    TreeParams tree = fit_tree(X, y, w, cfg, derive_seed(spec.seed, "adb", m));
    double err = 0;
    std::vector<int> miss(n);
    for (int i = 0; i < n; ++i) {
      const int h = tree.leaf_prob(X.row(i)) >= 0.5 ? 1 : 0;
      miss[i] = h != y(i);
      if (miss[i]) err += w(i);
    }
    if (err >= 0.5) {
      if (p.stumps.empty()) {
        p.stumps.push_back(std::move(tree));
        p.alpha.push_back(1e-8);
      }
      break;
    }
    err = std::max(err, 1e-10);
    const double alpha = std::log((1.0 - err) / err);
    for (int i = 0; i < n; ++i)
      if (miss[i]) w(i) *= std::exp(alpha);
    w /= w.sum();
    p.stumps.push_back(std::move(tree));
    p.alpha.push_back(alpha);
    if (err <= 1e-10) break;  // perfect learner dominates the vote
  }
  return p;
}

Eigen::VectorXd predict_adb(const AdbParams& p, const Eigen::MatrixXd& X) {
  Eigen::VectorXd out(X.rows());
  const double total = std::accumulate(p.alpha.begin(), p.alpha.end(), 0.0);
  for (int q = 0; q < X.rows(); ++q) {
    double score = 0;
    for (size_t m = 0; m < p.stumps.size(); ++m) {
      const int h = p.stumps[m].leaf_prob(X.row(q)) >= 0.5 ? 1 : 0;
      score += p.alpha[m] * (2 * h - 1);
    }
    const double df = total > 0 ? score / total : 0.0;  // in [-1, 1]
    out(q) = 0.5 * (df + 1.0);
  }
  return out;
}

RfParams fit_rf(const ClassifierSpec& spec, const Eigen::MatrixXd& X,
                const Eigen::VectorXi& y) {
  const int n_trees = static_cast<int>(spec.geti("n_trees"));
  if (n_trees < 1) fail(Err::InvariantViolation, "rf needs n_trees >= 1");
  TreeConfig cfg = tree_config_from(spec);
  const int n = static_cast<int>(X.rows());
  RfParams p;
  p.trees.resize(n_trees);
  for (int tix = 0; tix < n_trees; ++tix) {
    RngStream rng(derive_seed(spec.seed, "bootstrap", tix));
    Eigen::MatrixXd Xb(n, X.cols());
    Eigen::VectorXi yb(n);
    for (int i = 0; i < n; ++i) {
      const int src = static_cast<int>(rng.uniform_int(n));
      Xb.row(i) = X.row(src);
      yb(i) = y(src);
    }
    p.trees[tix] = fit_tree(Xb, yb, Eigen::VectorXd::Ones(n), cfg,
                            derive_seed(spec.seed, "tree", tix));
  }
  return p;
}

Eigen::VectorXd predict_rf(const RfParams& p, const Eigen::MatrixXd& X) {
  Eigen::VectorXd out(X.rows());
  for (int q = 0; q < X.rows(); ++q) {
    int votes = 0;
    for (const auto& t : p.trees) votes += t.leaf_prob(X.row(q)) >= 0.5 ? 1 : 0;
    out(q) = static_cast<double>(votes) / static_cast<double>(p.trees.size());
  }
  return out;
}

struct RmsState {
  Eigen::MatrixXd s;
  void update(Eigen::MatrixXd& w, const Eigen::MatrixXd& g, double lr) {
    if (s.size() == 0) s = Eigen::MatrixXd::Zero(g.rows(), g.cols());
    s = 0.9 * s + 0.1 * g.cwiseProduct(g);
    w -= lr * g.cwiseQuotient((s.array() + 1e-8).sqrt().matrix());
  }
};

MlpParams fit_mlp(const ClassifierSpec& spec, const Eigen::MatrixXd& X,
                  const Eigen::VectorXi& y) {
  const int H = static_cast<int>(spec.geti("neurons"));
  const int iters = static_cast<int>(spec.geti("max_iter"));
  const double lr = spec.getd("lr");
  if (H < 1 || iters < 1 || !(lr > 0))
    fail(Err::InvariantViolation, "mlp needs neurons >= 1, max_iter >= 1, lr > 0");
  const int n = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());

  RngStream rng(spec.seed);
  auto glorot = [&](int rows, int cols, int fan_in, int fan_out) {
    const double lim = std::sqrt(6.0 / (fan_in + fan_out));
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = lim * (2.0 * rng.uniform01() - 1.0);
    return m;
  };
  MlpParams p;
  p.W1 = glorot(d, H, d, H);
  p.b1 = Eigen::VectorXd::Zero(H);
  p.W2 = glorot(H, 1, H, 1);
  p.b2 = 0;

  Eigen::VectorXd t(n);
  for (int i = 0; i < n; ++i) t(i) = y(i);
  RmsState sW1, sb1, sW2, sb2;
  for (int it = 0; it < iters; ++it) {
    Eigen::MatrixXd Z = (X * p.W1).rowwise() + p.b1.transpose();
    Eigen::MatrixXd A = Z.cwiseMax(0.0);
    Eigen::VectorXd logit = (A * p.W2).col(0).array() + p.b2;
    Eigen::VectorXd prob = logit.unaryExpr([](double z) { return sigmoid(z); });
    if (!prob.allFinite())
      fail(Err::NumericalFailure, "mlp: non-finite activations during training");
    Eigen::VectorXd dlogit = (prob - t) / n;
    Eigen::MatrixXd gW2 = A.transpose() * dlogit;
    const double gb2 = dlogit.sum();
    Eigen::MatrixXd dA = dlogit * p.W2.transpose();
    Eigen::MatrixXd dZ = dA.cwiseProduct((Z.array() > 0.0).cast<double>().matrix());
    Eigen::MatrixXd gW1 = X.transpose() * dZ;
    Eigen::VectorXd gb1 = dZ.colwise().sum();

    sW1.update(p.W1, gW1, lr);
    Eigen::MatrixXd b1m = p.b1, gb1m = gb1;
    sb1.update(b1m, gb1m, lr);
    p.b1 = b1m;
    Eigen::MatrixXd W2m = p.W2;
    sW2.update(W2m, gW2, lr);
    p.W2 = W2m;
    Eigen::MatrixXd b2m(1, 1), gb2m(1, 1);
    b2m(0, 0) = p.b2;
    gb2m(0, 0) = gb2;
    sb2.update(b2m, gb2m, lr);
    p.b2 = b2m(0, 0);
  }
  return p;
}

Eigen::VectorXd predict_mlp(const MlpParams& p, const Eigen::MatrixXd& X) {
  Eigen::MatrixXd Z = (X * p.W1).rowwise() + p.b1.transpose();
  Eigen::MatrixXd A = Z.cwiseMax(0.0);
  Eigen::VectorXd logit = (A * p.W2).col(0).array() + p.b2;
  return logit.unaryExpr([](double z) { return sigmoid(z); });
}

}  // namespace

TrainedModel fit(const ClassifierSpec& spec, const Eigen::MatrixXd& X,
                 const Eigen::VectorXi& y, InputRegime regime, std::string schema_hash) {
  if (X.rows() != y.size())
    fail(Err::ShapeMismatch, "fit: X has " + std::to_string(X.rows()) + " rows but y has " +
                                 std::to_string(y.size()));
  const int pos = y.sum();
  if (pos == 0 || pos == y.size())
    fail(Err::SingleClassTraining,
         "fit(" + to_string(spec.kind) + "): training labels are single-class");

  TrainedModel m;
  m.spec = spec;
  m.regime = regime;
  m.schema_hash = std::move(schema_hash);
  m.n_features = static_cast<int>(X.cols());
  switch (spec.kind) {
    case ModelKind::KNN: m.params = fit_knn(spec, X, y); break;
    case ModelKind::SVM_L: m.params = fit_svm_l(spec, X, y); break;
    case ModelKind::SVM_P: m.params = fit_svm_p(spec, X, y); break;
    case ModelKind::GP: m.params = fit_gp(X, y); break;
    case ModelKind::DT:
      m.params = fit_tree(X, y, Eigen::VectorXd::Ones(X.rows()), tree_config_from(spec),
                          spec.seed);
      break;
    case ModelKind::ADB: m.params = fit_adb(spec, X, y); break;
    case ModelKind::RF: m.params = fit_rf(spec, X, y); break;
    case ModelKind::MLP: m.params = fit_mlp(spec, X, y); break;
  }
  return m;
}

Eigen::VectorXd predict_proba(const TrainedModel& model, const Eigen::MatrixXd& X,
                              const std::string& schema_hash) {
  if (!model.schema_hash.empty() && !schema_hash.empty() && model.schema_hash != schema_hash)
    fail(Err::SchemaMismatch, "model was fitted on schema " + model.schema_hash.substr(0, 12) +
                                  "..., queried with " + schema_hash.substr(0, 12) + "...");
  if (X.cols() != model.n_features)
    fail(Err::SchemaMismatch, "model expects " + std::to_string(model.n_features) +
                                  " features, got " + std::to_string(X.cols()));
  Eigen::VectorXd out;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, KnnParams>) {
          out = predict_knn(p, X);
        } else if constexpr (std::is_same_v<T, LinSvmParams>) {
          out = ((X * p.w).array() + p.b).unaryExpr([](double z) { return sigmoid(z); });
        } else if constexpr (std::is_same_v<T, PolySvmParams>) {
          Eigen::MatrixXd K = poly_kernel(X, p.support, p.degree);
          out = ((K * p.alpha_y).array() + p.b)
                    .unaryExpr([](double z) { return sigmoid(z); });
        } else if constexpr (std::is_same_v<T, GpParams>) {
          out = predict_gp(p, X);
        } else if constexpr (std::is_same_v<T, TreeParams>) {
          out.resize(X.rows());
          for (int q = 0; q < X.rows(); ++q) out(q) = p.leaf_prob(X.row(q));
        } else if constexpr (std::is_same_v<T, AdbParams>) {
          out = predict_adb(p, X);
        } else if constexpr (std::is_same_v<T, RfParams>) {
          out = predict_rf(p, X);
        } else if constexpr (std::is_same_v<T, MlpParams>) {
          out = predict_mlp(p, X);
        }
      },
      model.params);
  for (int i = 0; i < out.size(); ++i)
    if (!std::isfinite(out(i)) || out(i) < 0 || out(i) > 1)
      fail(Err::NumericalFailure, "predict_proba produced an out-of-range value");
  return out;
}

// --- serialization -----------------------------------------------------------

namespace {

nlohmann::json mat_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd mat_from_json(const nlohmann::json& j) {
  const auto rows = j.size();
  if (rows == 0) return {};
  Eigen::MatrixXd m(rows, j.at(0).size());
  for (size_t i = 0; i < rows; ++i)
    for (size_t c = 0; c < j.at(i).size(); ++c) m(i, c) = j.at(i).at(c).get<double>();
  return m;
}

nlohmann::json vec_to_json(const Eigen::VectorXd& v) {
  nlohmann::json out = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Eigen::VectorXd vec_from_json(const nlohmann::json& j) {
  Eigen::VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v(i) = j.at(i).get<double>();
  return v;
}

nlohmann::json tree_to_json(const TreeParams& t) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : t.nodes)
    nodes.push_back({{"f", n.feature},
                     {"thr", n.threshold},
                     {"l", n.left},
                     {"r", n.right},
                     {"wp", n.w_pos},
                     {"wn", n.w_neg}});
  return nodes;
}

TreeParams tree_from_json(const nlohmann::json& j) {
  TreeParams t;
  for (const auto& n : j) {
    TreeNode node;
    node.feature = n.at("f").get<int>();
    node.threshold = n.at("thr").get<double>();
    node.left = n.at("l").get<int>();
    node.right = n.at("r").get<int>();
    node.w_pos = n.at("wp").get<double>();
    node.w_neg = n.at("wn").get<double>();
    t.nodes.push_back(node);
  }
  return t;
}

}  // namespace

std::string serialize_model(const TrainedModel& model) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = to_string(model.spec.kind);
  j["seed"] = model.spec.seed;
  j["regime"] = to_string(model.regime);
  j["schema_hash"] = model.schema_hash;
  j["n_features"] = model.n_features;
  nlohmann::json hp = nlohmann::json::object();
  for (const auto& [k, v] : model.spec.hp)
    std::visit([&](const auto& x) { hp[k] = x; }, v);
  j["hyperparameters"] = hp;

  nlohmann::json p;
  std::visit(
      [&](const auto& par) {
        using T = std::decay_t<decltype(par)>;
        if constexpr (std::is_same_v<T, KnnParams>) {
          p = {{"X", mat_to_json(par.X)},
               {"y", std::vector<int>(par.y.data(), par.y.data() + par.y.size())},
               {"k", par.k}};
        } else if constexpr (std::is_same_v<T, LinSvmParams>) {
          p = {{"w", vec_to_json(par.w)}, {"b", par.b}};
        } else if constexpr (std::is_same_v<T, PolySvmParams>) {
          p = {{"support", mat_to_json(par.support)},
               {"alpha_y", vec_to_json(par.alpha_y)},
               {"b", par.b},
               {"degree", par.degree}};
        } else if constexpr (std::is_same_v<T, GpParams>) {
          p = {{"X", mat_to_json(par.X)},
               {"grad", vec_to_json(par.grad)},
               {"sqrt_w", vec_to_json(par.sqrt_w)},
               {"L", mat_to_json(par.L)},
               {"lengthscale", par.lengthscale}};
        } else if constexpr (std::is_same_v<T, TreeParams>) {
          p = {{"nodes", tree_to_json(par)}};
        } else if constexpr (std::is_same_v<T, AdbParams>) {
          nlohmann::json stumps = nlohmann::json::array();
          for (const auto& s : par.stumps) stumps.push_back(tree_to_json(s));
          p = {{"stumps", stumps}, {"alpha", par.alpha}};
        } else if constexpr (std::is_same_v<T, RfParams>) {
          nlohmann::json trees = nlohmann::json::array();
          for (const auto& t : par.trees) trees.push_back(tree_to_json(t));
          p = {{"trees", trees}};
        } else if constexpr (std::is_same_v<T, MlpParams>) {
          p = {{"W1", mat_to_json(par.W1)},
               {"b1", vec_to_json(par.b1)},
               {"W2", vec_to_json(par.W2)},
               {"b2", par.b2}};
        }
      },
      model.params);
  j["parameters"] = p;
  return j.dump(2);
}

TrainedModel deserialize_model(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(Err::SchemaMismatch, std::string("model envelope: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != 1)
      fail(Err::SchemaMismatch, "unsupported model format version");
    TrainedModel m;
    m.spec.kind = model_kind_from_string(j.at("kind").get<std::string>());
    m.spec.seed = j.at("seed").get<std::uint64_t>();
    m.regime = regime_from_string(j.at("regime").get<std::string>());
    m.schema_hash = j.at("schema_hash").get<std::string>();
    m.n_features = j.at("n_features").get<int>();
    for (const auto& [k, v] : j.at("hyperparameters").items()) {
      if (v.is_number_integer())
        m.spec.hp[k] = v.get<long>();
      else if (v.is_number_float())
        m.spec.hp[k] = v.get<double>();
      else
        m.spec.hp[k] = v.get<std::string>();
    }
    const auto& p = j.at("parameters");
    switch (m.spec.kind) {
      case ModelKind::KNN: {
        KnnParams par;
        par.X = mat_from_json(p.at("X"));
        const auto yv = p.at("y").get<std::vector<int>>();
        par.y = Eigen::Map<const Eigen::VectorXi>(yv.data(), yv.size());
        par.k = p.at("k").get<int>();
        m.params = std::move(par);
        break;
      }
      case ModelKind::SVM_L:
        m.params = LinSvmParams{vec_from_json(p.at("w")), p.at("b").get<double>()};
        break;
      case ModelKind::SVM_P: {
        PolySvmParams par;
        par.support = mat_from_json(p.at("support"));
        par.alpha_y = vec_from_json(p.at("alpha_y"));
        par.b = p.at("b").get<double>();
        par.degree = p.at("degree").get<int>();
        m.params = std::move(par);
        break;
      }
      case ModelKind::GP: {
        GpParams par;
        par.X = mat_from_json(p.at("X"));
        par.grad = vec_from_json(p.at("grad"));
        par.sqrt_w = vec_from_json(p.at("sqrt_w"));
        par.L = mat_from_json(p.at("L"));
        par.lengthscale = p.at("lengthscale").get<double>();
        m.params = std::move(par);
        break;
      }
      case ModelKind::DT: m.params = tree_from_json(p.at("nodes")); break;
      case ModelKind::ADB: {
        AdbParams par;
        for (const auto& s : p.at("stumps")) par.stumps.push_back(tree_from_json(s));
        par.alpha = p.at("alpha").get<std::vector<double>>();
        m.params = std::move(par);
        break;
      }
      case ModelKind::RF: {
        RfParams par;
        for (const auto& t : p.at("trees")) par.trees.push_back(tree_from_json(t));
        m.params = std::move(par);
        break;
      }
      case ModelKind::MLP: {
        MlpParams par;
        par.W1 = mat_from_json(p.at("W1"));
        par.b1 = vec_from_json(p.at("b1"));
        par.W2 = vec_from_json(p.at("W2"));
        par.b2 = p.at("b2").get<double>();
        m.params = std::move(par);
        break;
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(Err::SchemaMismatch, std::string("model envelope: ") + e.what());
  }
}

}  // namespace runpat
