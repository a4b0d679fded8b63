// Acceptance gate: property-based and synthetic-study checks over the whole
// pipeline. Prints one [PASS]/[FAIL] line per criterion; exit code is the
// number of failures. argv[1] must point at the command-line binary.

#include <sys/wait.h>

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "runpat/classic.hpp"
#include "runpat/common.hpp"
#include "runpat/deepnet.hpp"
#include "runpat/eval.hpp"
#include "runpat/explain.hpp"
#include "runpat/features.hpp"
#include "runpat/gait.hpp"
#include "runpat/spline.hpp"
#include "runpat/synth.hpp"

using namespace runpat;
namespace fs = std::filesystem;

namespace {

std::string g_cli;
fs::path g_root;
std::vector<std::string> g_notes;  // failure details, printed at the end

void note(const std::string& s) { g_notes.push_back(s); }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

int run_cli(const std::string& args, const std::string& tag) {
  const fs::path log = g_root / ("log_" + tag + ".txt");
  const std::string cmd = g_cli + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (code != 0) note("command failed (" + tag + ", exit " + std::to_string(code) +
                      "): " + args);
  return code;
}

// --- 1: metric formulas vs an independent recount ---------------------------

bool check_metric_formulas() {
  RngStream rng(1001);
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(60));
    Eigen::VectorXd probs(n);
    Eigen::VectorXi labels(n);
    for (int i = 0; i < n; ++i) {
      probs(i) = rng.uniform(0, 1);
      if (rng.uniform_int(10) == 0) probs(i) = 0.5;  // exercise the boundary
      labels(i) = static_cast<int>(rng.uniform_int(2));
    }
    long tp = 0, tn = 0, fp = 0, fn = 0;
    for (int i = 0; i < n; ++i) {
      const bool hit = probs(i) >= 0.5;
      if (labels(i) == 1 && hit) ++tp;
      if (labels(i) == 1 && !hit) ++fn;
      if (labels(i) == 0 && hit) ++fp;
      if (labels(i) == 0 && !hit) ++tn;
    }
    const ConfusionCounts c = count_confusion(probs, labels);
    if (c.tp != tp || c.tn != tn || c.fp != fp || c.fn != fn) {
      note("confusion recount mismatch");
      return false;
    }
    const FoldMetrics m = metrics(c);
    const double acc = 100.0 * static_cast<double>(tp + tn) / static_cast<double>(n);
    if (m.acc.value != acc) return false;
    if (tp + fp > 0) {
      if (!m.pre.defined ||
          m.pre.value != 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fp))
        return false;
    } else if (m.pre.defined) {
      return false;
    }
    if (tp + fn > 0) {
      if (!m.rec.defined ||
          m.rec.value != 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fn))
        return false;
    } else if (m.rec.defined) {
      return false;
    }
    if (2 * tp + fp + fn > 0) {
      if (!m.f1.defined || m.f1.value != 100.0 * 2.0 * static_cast<double>(tp) /
                                             static_cast<double>(2 * tp + fp + fn))
        return false;
    } else if (m.f1.defined) {
      return false;
    }
  }
  return true;
}

// --- 2: subject-wise folds never leak and always cover ----------------------

bool check_fold_no_leakage() {
  RngStream rng(2002);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n_subjects = 3 + static_cast<int>(rng.uniform_int(48));
    std::vector<std::string> rows;  // one entry per record, 1-6 per subject
    std::vector<std::string> subjects;
    for (int s = 0; s < n_subjects; ++s) {
      const std::string id = "subj_" + std::to_string(s);
      subjects.push_back(id);
      const int records = 1 + static_cast<int>(rng.uniform_int(6));
      for (int r = 0; r < records; ++r) rows.push_back(id);
    }
    rng.shuffle(rows);
    const int k = 2 + static_cast<int>(rng.uniform_int(std::min(n_subjects, 5) - 1));
    const FoldPlan plan = split_by_subject(rows, k, 3000 + trial);

    std::vector<int> tested(n_subjects, 0);
    for (int f = 0; f < k; ++f) {
      std::set<std::string> test(plan.test_subjects[f].begin(), plan.test_subjects[f].end());
      for (const auto& s : plan.train_subjects[f])
        if (test.count(s)) {
          note("leak in trial " + std::to_string(trial));
          return false;
        }
      if (static_cast<int>(test.size() + plan.train_subjects[f].size()) != n_subjects)
        return false;
      for (const auto& s : test) tested[std::stoi(s.substr(5))] += 1;
    }
    for (int s = 0; s < n_subjects; ++s)
      if (tested[s] != 1) {
        note("subject tested " + std::to_string(tested[s]) + " times");
        return false;
      }
    plan.validate(subjects);
  }
  return true;
}

// --- 3: stance resampling exactness ------------------------------------------

bool check_resampling() {
  RngStream rng(3003);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 5 + static_cast<int>(rng.uniform_int(396));
    const double a = rng.normal() * 10, b = rng.normal();
    Eigen::VectorXd lin(n), noisy(n);
    for (int i = 0; i < n; ++i) {
      lin(i) = a + b * i;
      noisy(i) = rng.normal() * 5;
    }
    const Eigen::VectorXd rl = resample_uniform<double>(lin, 101);
    const Eigen::VectorXd rn = resample_uniform<double>(noisy, 101);
    if (std::abs(rn(0) - noisy(0)) > 1e-9 || std::abs(rn(100) - noisy(n - 1)) > 1e-9)
      return false;
    for (int k = 0; k < 101; ++k) {
      const double t = static_cast<double>(n - 1) * k / 100.0;
      if (std::abs(rl(k) - (a + b * t)) > 1e-9) {
        note("linear resample error at trial " + std::to_string(trial));
        return false;
      }
    }
  }
  // dense sine against the analytic curve
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 60 + static_cast<int>(rng.uniform_int(300));
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) y(i) = std::sin(2 * M_PI * i / (n - 1.0));
    const Eigen::VectorXd r = resample_uniform<double>(y, 101);
    for (int k = 0; k < 101; ++k)
      if (std::abs(r(k) - std::sin(2 * M_PI * k / 100.0)) > 1e-3) {
        note("sine oracle error");
        return false;
      }
  }
  return true;
}

// --- 4: band powers preserve total power --------------------------------------

bool check_band_power() {
  RngStream rng(4004);
  for (int trial = 0; trial < 1000; ++trial) {
    const double rate = rng.uniform(7.0, 190.0);
    const int n = static_cast<int>(2.0 * rate) + 10 + static_cast<int>(rng.uniform_int(300));
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) y(i) = rng.normal() * 3 + rng.uniform(-2, 2);
    const BandPower bp = band_power(y, rate);
    const double mean = y.mean();
    const double ms = (y.array() - mean).square().mean();
    if (ms > 0 && std::abs(bp.lf + bp.mf + bp.hf - ms) > 1e-9 * ms) {
      note("parseval violation at trial " + std::to_string(trial));
      return false;
    }
  }
  const int n = 2000;
  Eigen::VectorXd tone(n);
  for (int i = 0; i < n; ++i) tone(i) = std::sin(2 * M_PI * 2.0 * i / 200.0);
  const BandPower bp = band_power(tone, 200.0);
  if (std::abs(bp.mf - 0.5) > 1e-3) {
    note("2 Hz tone mf = " + std::to_string(bp.mf));
    return false;
  }
  return true;
}

// --- 5: every layer's gradients vs central differences ------------------------

double layer_fd_worst(nn::Layer& layer, nn::Batch x, RngStream& rng) {
  nn::Batch probe = layer.forward(x, true, nullptr);
  nn::Batch g(probe.size());
  for (size_t s = 0; s < probe.size(); ++s) {
    g[s].resize(probe[s].rows(), probe[s].cols());
    for (long i = 0; i < g[s].size(); ++i) g[s].data()[i] = rng.normal();
  }
  layer.zero_grad();
  nn::Batch dx = layer.backward(g);
  std::vector<nn::Mat> analytic;
  for (nn::Mat* gr : layer.grads()) analytic.push_back(*gr);

  const double h = 1e-5;
  auto loss = [&]() {
    nn::Batch out = layer.forward(x, true, nullptr);
    double acc = 0;
    for (size_t s = 0; s < out.size(); ++s) acc += (out[s].array() * g[s].array()).sum();
    return acc + layer.reg_loss();
  };
  double worst = 0;
  auto probe_coord = [&](double* v, double a) {
    const double keep = *v;
    *v = keep + h;
    const double up = loss();
    *v = keep - h;
    const double dn = loss();
    *v = keep;
    const double fd = (up - dn) / (2 * h);
    worst = std::max(worst, std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)}));
  };
  auto probe_tensor = [&](double* data, double* adata, long size) {
    const long budget = 20;
    if (size <= budget) {
      for (long i = 0; i < size; ++i) probe_coord(&data[i], adata[i]);
    } else {
      for (long s = 0; s < budget; ++s) {
        const long i = static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(size)));
        probe_coord(&data[i], adata[i]);
      }
    }
  };
  for (size_t s = 0; s < x.size(); ++s)
    probe_tensor(x[s].data(), dx[s].data(), x[s].size());
  std::vector<nn::Mat*> params = layer.params();
  for (size_t p = 0; p < params.size(); ++p)
    probe_tensor(params[p]->data(), analytic[p].data(), params[p]->size());
  return worst;
}

nn::Batch fd_batch(int n, int rows, int cols, RngStream& rng) {
  nn::Batch b(n);
  for (int s = 0; s < n; ++s) {
    b[s].resize(rows, cols);
    for (long i = 0; i < b[s].size(); ++i) b[s].data()[i] = rng.normal();
  }
  return b;
}

bool check_layer_gradients() {
  RngStream rng(5005);
  auto ui = [&](int lo, int hi) {
    return lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
  };
  const double tol = 1e-4;
  double worst_any = 0;
  std::string worst_kind;
  auto record = [&](const std::string& kind, double w) {
    if (w > worst_any) {
      worst_any = w;
      worst_kind = kind;
    }
    return w < tol;
  };

  for (int shape = 0; shape < 50; ++shape) {
    {
      nn::Dense layer(ui(1, 8), ui(1, 6), shape % 3 == 0 ? 0.1 : 0.0, 50 + shape);
      nn::Batch x = fd_batch(ui(1, 4), 1, static_cast<int>(layer.W.rows()), rng);
      if (!record("dense", layer_fd_worst(layer, std::move(x), rng))) return false;
    }
    {
      const int c = ui(1, 4);
      nn::Conv1DTime layer(c, ui(1, 5), 2 * ui(0, 2) + 1, 150 + shape);
      nn::Batch x = fd_batch(ui(1, 3), ui(2, 12), c, rng);
      if (!record("conv1d", layer_fd_worst(layer, std::move(x), rng))) return false;
    }
    {
      const int c = ui(1, 5);
      nn::InceptionResidual layer(c, 4 * ui(1, 3), 250 + shape);
      nn::Batch x = fd_batch(ui(1, 2), ui(3, 10), c, rng);
      if (!record("inception_residual", layer_fd_worst(layer, std::move(x), rng)))
        return false;
    }
    {
      const int c = ui(2, 8);
      nn::SqueezeExcitation layer(c, ui(1, 4), 350 + shape);
      nn::Batch x = fd_batch(ui(1, 3), ui(2, 8), c, rng);
      if (!record("squeeze_excitation", layer_fd_worst(layer, std::move(x), rng)))
        return false;
    }
    {
      const int c = ui(1, 6);
      nn::BatchNorm layer(c);
      nn::Batch x = fd_batch(ui(2, 4), ui(2, 9), c, rng);
      if (!record("batchnorm", layer_fd_worst(layer, std::move(x), rng))) return false;
    }
    {
      const int d = ui(1, 4);
      nn::BiLSTM layer(d, ui(1, 3), 0.0, shape % 2 == 0, 450 + shape);
      nn::Batch x = fd_batch(ui(1, 2), ui(2, 6), d, rng);
      if (!record("bilstm", layer_fd_worst(layer, std::move(x), rng))) return false;
    }
    {
      const int spatial = ui(1, 3), c = ui(1, 3);
      nn::BiConvLSTM1D layer(spatial, c, ui(1, 3), 2 * ui(0, 1) + 1, 0.0, 550 + shape);
      nn::Batch x = fd_batch(ui(1, 2), ui(2, 4), spatial * c, rng);
      if (!record("biconvlstm1d", layer_fd_worst(layer, std::move(x), rng))) return false;
    }
  }
  std::fprintf(stderr, "  gradient check worst relative error %.3g (%s)\n", worst_any,
               worst_kind.c_str());
  return true;
}

// --- 6: classifier and attribution oracles ------------------------------------

bool check_classifier_oracles() {
  RngStream rng(6006);
  // nearest-neighbour probabilities vs a full scan
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 5 + static_cast<int>(rng.uniform_int(196));
    const int d = 1 + static_cast<int>(rng.uniform_int(6));
    const int k = 1 + static_cast<int>(rng.uniform_int(std::min(n, 15)));
    Eigen::MatrixXd X(n, d);
    Eigen::VectorXi y(n);
    bool has0 = false, has1 = false;
    for (int i = 0; i < n; ++i) {
      y(i) = static_cast<int>(rng.uniform_int(2));
      (y(i) ? has1 : has0) = true;
      for (int j = 0; j < d; ++j) X(i, j) = rng.normal();
    }
    if (!has0) y(0) = 0;
    if (!has1) y(n - 1) = 1;
    ClassifierSpec spec = shipped_defaults(ModelKind::KNN);
    spec.hp["k"] = static_cast<long>(k);
    const TrainedModel m = fit(spec, X, y);
    Eigen::MatrixXd Q(3, d);
    for (long q = 0; q < Q.size(); ++q) Q.data()[q] = rng.normal() * 1.5;
    const Eigen::VectorXd got = predict_proba(m, Q);
    for (int q = 0; q < 3; ++q) {
      std::vector<int> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        return (X.row(a) - Q.row(q)).squaredNorm() < (X.row(b) - Q.row(q)).squaredNorm();
      });
      double pos = 0;
      for (int r = 0; r < k; ++r) pos += y(idx[r]);
      if (std::abs(got(q) - pos / k) > 1e-12) {
        note("knn brute-force mismatch at trial " + std::to_string(trial));
        return false;
      }
    }
  }
  // unlimited tree memorizes consistent data
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 20 + static_cast<int>(rng.uniform_int(130));
    Eigen::MatrixXd X(n, 4);
    Eigen::VectorXi y(n);
    for (int i = 0; i < n; ++i) {
      y(i) = static_cast<int>(rng.uniform_int(2));
      for (int j = 0; j < 4; ++j) X(i, j) = rng.normal();
    }
    y(0) = 0;
    y(n - 1) = 1;
    const TreeParams t = fit_tree(X, y, Eigen::VectorXd::Ones(n), TreeConfig{}, trial);
    for (int i = 0; i < n; ++i)
      if ((t.leaf_prob(X.row(i)) >= 0.5) != (y(i) == 1)) {
        note("unlimited tree failed to memorize");
        return false;
      }
  }
  // exact attribution axioms
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 2 + static_cast<int>(rng.uniform_int(6));
    Eigen::VectorXd w(m);
    for (int j = 0; j < m; ++j) w(j) = rng.normal();
    w(m - 1) = 0.0;  // dummy player
    w(1) = w(0);     // symmetric pair
    const ModelFn f = [w, m](const Eigen::MatrixXd& X) {
      Eigen::VectorXd out(X.rows());
      for (int i = 0; i < X.rows(); ++i) {
        double z = 0;
        for (int j = 0; j < m; ++j) z += w(j) * X(i, j);
        out(i) = std::tanh(z) + 0.1 * X(i, 0) * w(0) * X(i, 1);
      }
      return out;
    };
    Eigen::RowVectorXd x(m), base(m);
    for (int j = 0; j < m; ++j) {
      x(j) = rng.normal();
      base(j) = rng.normal();
    }
    x(1) = x(0);
    base(1) = base(0);
    const ShapleyResult r = shapley(f, x, base, ShapleyConfig{});
    if (r.efficiency_residual > 1e-9) {
      note("efficiency residual " + std::to_string(r.efficiency_residual));
      return false;
    }
    if (std::abs(r.phi(0) - r.phi(1)) > 1e-9) {
      note("symmetry violation");
      return false;
    }
    if (std::abs(r.phi(m - 1)) > 1e-9) {
      note("dummy player got credit");
      return false;
    }
  }
  // sampled attribution: standard error shrinks like 1/sqrt(P)
  const ModelFn f = [](const Eigen::MatrixXd& X) {
    Eigen::VectorXd out(X.rows());
    for (int i = 0; i < X.rows(); ++i)
      out(i) = std::tanh(X(i, 0) * X(i, 1)) + std::sin(X(i, 2)) * X(i, 3) +
               0.5 * X(i, 4) * X(i, 0);
    return out;
  };
  Eigen::RowVectorXd x(5), base(5);
  x << 1.2, -0.7, 0.4, 0.9, -1.1;
  base << 0.1, 0.2, -0.3, 0.0, 0.4;
  auto pooled_se = [&](int P) {
    const int reseeds = 20;
    Eigen::MatrixXd phis(reseeds, 5);
    for (int s = 0; s < reseeds; ++s) {
      ShapleyConfig cfg;
      cfg.mode = ShapleyConfig::Mode::monte_carlo;
      cfg.permutations = P;
      cfg.seed = 7000 + s;
      phis.row(s) = shapley(f, x, base, cfg).phi.transpose();
    }
    double var = 0;
    for (int j = 0; j < 5; ++j) {
      const double mu = phis.col(j).mean();
      var += (phis.col(j).array() - mu).square().sum() / (phis.rows() - 1);
    }
    return std::sqrt(var / 5);
  };
  const double se1 = pooled_se(200);
  const double se2 = pooled_se(400);
  const double ratio = se2 / se1;
  std::fprintf(stderr, "  monte-carlo se(400)/se(200) = %.3f (ideal 0.707)\n", ratio);
  if (ratio < 0.707 * 0.7 || ratio > 0.707 * 1.3) {
    note("std-error ratio " + std::to_string(ratio) + " outside 0.707 +/- 30%");
    return false;
  }
  return true;
}

// --- 7: hyperparameter grids and shipped defaults -----------------------------

bool check_hyper_golden() {
  if (hyper_grid(ModelKind::KNN).size() != 11) return false;
  if (hyper_grid(ModelKind::SVM_L).size() != 9) return false;
  if (hyper_grid(ModelKind::SVM_P).size() != 44) return false;
  if (hyper_grid(ModelKind::GP).size() != 1) return false;
  if (hyper_grid(ModelKind::DT).size() != 360) return false;
  if (hyper_grid(ModelKind::ADB).size() != 3) return false;
  if (hyper_grid(ModelKind::RF).size() != 243) return false;
  if (hyper_grid(ModelKind::MLP).size() != 24) return false;

  const std::vector<double> cs = {0.0001, 0.001, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06};
  const auto lin = hyper_grid(ModelKind::SVM_L);
  for (size_t i = 0; i < lin.size(); ++i)
    if (lin[i].getd("C") != cs[i]) return false;
  const auto knn = hyper_grid(ModelKind::KNN);
  for (size_t i = 0; i < knn.size(); ++i)
    if (knn[i].geti("k") != static_cast<long>(i) + 2) return false;

  if (shipped_defaults(ModelKind::KNN).geti("k") != 7) return false;
  if (shipped_defaults(ModelKind::SVM_L).getd("C") != 0.001) return false;
  const ClassifierSpec svp = shipped_defaults(ModelKind::SVM_P);
  if (svp.getd("C") != 1.1 || svp.geti("degree") != 3) return false;
  const ClassifierSpec rf = shipped_defaults(ModelKind::RF);
  if (rf.geti("n_trees") != 200 || rf.geti("max_depth") != 10) return false;
  const ClassifierSpec mlp = shipped_defaults(ModelKind::MLP);
  if (mlp.geti("neurons") != 100 || mlp.geti("max_iter") != 1000) return false;
  const ClassifierSpec adb = shipped_defaults(ModelKind::ADB);
  if (adb.geti("n_rounds") != 100 || adb.geti("weak_depth") != 3) return false;
  return true;
}

// --- 8: end-to-end synthetic study via the command line -----------------------

double report_mean_acc(const fs::path& report, const std::string& model) {
  const ExperimentReport r = report_from_json(slurp(report));
  for (const auto& m : r.models)
    if (m.model == model) return m.acc.mean;
  note("model " + model + " missing from " + report.string());
  return -1;
}

bool check_end_to_end() {
  const fs::path study = g_root / "study";
  const fs::path null_study = g_root / "null_study";
  if (run_cli("synth --out " + study.string() +
                  " --subjects 60 --records 1 --strides 12 --rate 200 --seed 101"
                  " --healthy-stance 0.26 --injured-stance 0.32 --injured-mf 3.0",
              "e2e_synth") != 0)
    return false;
  if (run_cli("synth --out " + null_study.string() +
                  " --subjects 60 --records 1 --strides 12 --rate 200 --seed 202",
              "e2e_null_synth") != 0)
    return false;

  const std::string data = (study / "dataset").string();
  const std::string null_data = (null_study / "dataset").string();
  bool ok = true;

  // separable data: linear SVM on point values, CNN on raw stance tensors
  const fs::path svm_dir = g_root / "e2e_svm";
  if (run_cli("evaluate --data " + data + " --out " + svm_dir.string() +
                  " --task PFPS --regime points --models svm_l --folds 5 --no-grid --seed 7",
              "e2e_svm") != 0)
    return false;
  const double svm_acc = report_mean_acc(svm_dir / "report.json", "svm_l");
  std::fprintf(stderr, "  svm_l points accuracy %.1f%%\n", svm_acc);
  if (svm_acc < 90.0) {
    note("svm_l accuracy " + std::to_string(svm_acc) + " below 90");
    ok = false;
  }

  const fs::path cnn_dir = g_root / "e2e_cnn";
  if (run_cli("evaluate --data " + data + " --out " + cnn_dir.string() +
                  " --task PFPS --regime time_series --models cnn --folds 5"
                  " --epochs 40 --seed 7",
              "e2e_cnn") != 0)
    return false;
  const double cnn_acc = report_mean_acc(cnn_dir / "report.json", "cnn");
  std::fprintf(stderr, "  cnn time-series accuracy %.1f%%\n", cnn_acc);
  if (cnn_acc < 90.0) {
    note("cnn accuracy " + std::to_string(cnn_acc) + " below 90");
    ok = false;
  }

  // null data: both models should hover at chance
  const fs::path nsvm_dir = g_root / "e2e_null_svm";
  if (run_cli("evaluate --data " + null_data + " --out " + nsvm_dir.string() +
                  " --task PFPS --regime points --models svm_l --folds 5 --no-grid --seed 7",
              "e2e_null_svm") != 0)
    return false;
  const double nsvm = report_mean_acc(nsvm_dir / "report.json", "svm_l");
  const fs::path ncnn_dir = g_root / "e2e_null_cnn";
  if (run_cli("evaluate --data " + null_data + " --out " + ncnn_dir.string() +
                  " --task PFPS --regime time_series --models cnn --folds 5"
                  " --epochs 30 --seed 7",
              "e2e_null_cnn") != 0)
    return false;
  const double ncnn = report_mean_acc(ncnn_dir / "report.json", "cnn");
  std::fprintf(stderr, "  null accuracies: svm_l %.1f%%, cnn %.1f%%\n", nsvm, ncnn);
  if (nsvm < 43.0 || nsvm > 57.0) {
    note("null svm_l accuracy " + std::to_string(nsvm) + " outside 50 +/- 7");
    ok = false;
  }
  if (ncnn < 43.0 || ncnn > 57.0) {
    note("null cnn accuracy " + std::to_string(ncnn) + " outside 50 +/- 7");
    ok = false;
  }

  // event detection against the generator's sidecar truth
  const Dataset ds = load_dataset(data);
  const SynthTruth truth = load_truth(study / "truth.json");
  long total = 0, matched = 0;
  const double tol_frames = 0.010 * 200.0;  // 10 ms
  for (const auto& rec : ds.records) {
    const auto it = std::find_if(truth.records.begin(), truth.records.end(),
                                 [&](const SynthRecordTruth& t) {
                                   return t.record_id == rec.record_id;
                                 });
    if (it == truth.records.end()) continue;
    RunnerRecord stripped = rec;
    stripped.events.reset();  // force detection
    const std::vector<GaitEvent> got = detect_events(stripped);
    for (const auto& want : it->events) {
      ++total;
      for (const auto& have : got)
        if (have.foot == want.foot && have.kind == want.kind &&
            std::abs(have.frame_index - want.frame_index) <= tol_frames) {
          ++matched;
          break;
        }
    }
  }
  const double hit = total ? 100.0 * matched / total : 0.0;
  std::fprintf(stderr, "  event detection: %ld/%ld within 10 ms (%.2f%%)\n", matched, total,
               hit);
  if (hit < 99.0) {
    note("event match rate " + std::to_string(hit) + " below 99%");
    ok = false;
  }
  return ok;
}

// --- 9: identical seeds give identical bytes ---------------------------------

bool check_determinism() {
  const fs::path base = g_root / "det_synth";
  if (run_cli("synth --out " + base.string() +
                  " --subjects 6 --records 1 --strides 6 --rate 100 --seed 11"
                  " --healthy-stance 0.26 --injured-stance 0.34",
              "det_synth") != 0)
    return false;
  const std::string data = (base / "dataset").string();

  bool ok = true;
  auto rerun_identical = [&](const std::string& args, const std::string& tag,
                             const std::vector<std::string>& files) {
    const fs::path a = g_root / (tag + "_a");
    const fs::path b = g_root / (tag + "_b");
    if (run_cli(args + " --out " + a.string(), tag + "_a") != 0) return false;
    if (run_cli(args + " --out " + b.string(), tag + "_b") != 0) return false;
    for (const auto& f : files) {
      const std::string fa = slurp(a / f), fb = slurp(b / f);
      if (fa.empty() || fa != fb) {
        note(tag + ": " + f + (fa.empty() ? " missing" : " differs between reruns"));
        return false;
      }
    }
    return true;
  };

  ok &= rerun_identical("evaluate --data " + data +
                            " --task PFPS --regime points --models svm_l,knn"
                            " --folds 3 --no-grid --seed 5",
                        "det_eval", {"report.json", "report.csv"});
  ok &= rerun_identical("explain --data " + data +
                            " --task PFPS --regime points --model svm_l"
                            " --permutations 100 --folds 3 --fold 0 --seed 5",
                        "det_shap", {"maps/shapley_ranking.csv"});
  ok &= rerun_identical("explain --data " + data +
                            " --task PFPS --regime time_series --model cnn"
                            " --methods saliency,gradcam --epochs 2 --folds 3 --fold 0"
                            " --seed 5",
                        "det_deep",
                        {"maps/saliency.csv", "maps/saliency.svg", "maps/gradcam.csv",
                         "maps/gradcam.svg"});
  return ok;
}

// --- 10: attribution sanity on analytically known models ----------------------

bool check_explain_sanity() {
  // saliency of a linear network is proportional to |weights|
  const int T = 101, C = 4;
  nn::Network net;
  const int flat = net.add("flat", std::make_unique<nn::Flatten>(), {nn::Network::kStanceInput});
  auto dp = std::make_unique<nn::Dense>(T * C, 1, 0.0, 9009);
  nn::Dense* dense = dp.get();
  net.add("logit", std::move(dp), {flat});

  RngStream rng(9010);
  nn::Batch cases(3);
  for (auto& m : cases) {
    m.resize(T, C);
    for (long i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  }
  const ExplanationMap sal =
      saliency(net, cases, nullptr, {"c0", "c1", "c2", "c3"}, SmoothGradConfig{});
  if (sal.values.rows() != C || sal.values.cols() != T) {
    note("saliency map has the wrong shape");
    return false;
  }
  double dot = 0, nw = 0, nv = 0;
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < C; ++c) {
      const double w = std::abs(dense->W(t * C + c, 0));
      const double v = sal.values(c, t);
      dot += w * v;
      nw += w * w;
      nv += v * v;
    }
  const double cosine = dot / std::sqrt(nw * nv);
  std::fprintf(stderr, "  linear saliency cosine %.6f\n", cosine);
  if (!(cosine > 0.999)) {
    note("saliency cosine " + std::to_string(cosine));
    return false;
  }

  // grad-cam: non-negative, one row, 101 time steps
  nn::Network conv_net;
  const int cn = conv_net.add("conv", std::make_unique<nn::Conv1DTime>(2, 3, 3, 9011),
                              {nn::Network::kStanceInput});
  const int cf = conv_net.add("flat", std::make_unique<nn::Flatten>(), {cn});
  conv_net.add("logit", std::make_unique<nn::Dense>(40 * 3, 1, 0.0, 9012), {cf});
  nn::Batch conv_cases(2);
  for (auto& m : conv_cases) {
    m.resize(40, 2);
    for (long i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  }
  const ExplanationMap cam = gradcam(conv_net, conv_cases, nullptr, "conv");
  if (cam.values.rows() != 1 || cam.values.cols() != kStanceSamples) {
    note("grad-cam map is not a (101,) time row");
    return false;
  }
  if (cam.values.minCoeff() < 0) {
    note("grad-cam produced negative importance");
    return false;
  }

  // partial dependence of an ignored feature is flat
  Eigen::MatrixXd X(80, 3);
  for (long i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  const ModelFn ignores = [](const Eigen::MatrixXd& M) {
    return Eigen::VectorXd((M.col(0).array().tanh() * 0.5 + 0.5).matrix());
  };
  const PdpCurve curve = pdp(ignores, X, 2, 20);
  const double range = curve.mean_pred.maxCoeff() - curve.mean_pred.minCoeff();
  if (range >= 1e-12) {
    note("pdp range " + std::to_string(range) + " for an ignored feature");
    return false;
  }
  return true;
}

struct Criterion {
  const char* name;
  std::function<bool()> fn;
  double limit_s;
};

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <path-to-cli-binary>\n");
    return 64;
  }
  g_cli = argv[1];
  g_root = fs::temp_directory_path() / "runpat_acceptance";
  std::error_code ec;
  fs::remove_all(g_root, ec);
  fs::create_directories(g_root);

  const std::vector<Criterion> criteria = {
      {"metric_formulas_match_brute_force", check_metric_formulas, 5},
      {"subject_folds_never_leak", check_fold_no_leakage, 10},
      {"stance_resampling_exactness", check_resampling, 10},
      {"band_power_parseval", check_band_power, 10},
      {"layer_gradients_finite_difference", check_layer_gradients, 300},
      {"classifier_and_shapley_oracles", check_classifier_oracles, 120},
      {"hyperparameter_grids_golden", check_hyper_golden, 1},
      {"synthetic_study_end_to_end", check_end_to_end, 1200},
      {"pipeline_determinism", check_determinism, 0},  // bounded by the pipeline itself
      {"explainability_sanity", check_explain_sanity, 60},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = false;
    try {
      ok = c.fn();
    } catch (const std::exception& e) {
      note(std::string(c.name) + " threw: " + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (ok && c.limit_s > 0 && secs > c.limit_s) {
      note(std::string(c.name) + " exceeded its " + std::to_string(c.limit_s) +
           " s budget: " + std::to_string(secs) + " s");
      ok = false;
    }
    std::printf("[%s] %s (%.1f s)\n", ok ? "PASS" : "FAIL", c.name, secs);
    std::fflush(stdout);
    failures += ok ? 0 : 1;
  }
  for (const auto& n : g_notes) std::fprintf(stderr, "note: %s\n", n.c_str());
  return failures;
}
