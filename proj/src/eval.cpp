#include "runpat/eval.hpp"

#include <nlohmann/json.hpp>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>
#include <sstream>

#include "runpat/csv.hpp"
#include "runpat/sha256.hpp"

namespace runpat {

ConfusionCounts count_confusion(const Eigen::VectorXd& probs, const Eigen::VectorXi& labels) {
  if (probs.size() != labels.size())
    fail(Err::ShapeMismatch, "confusion: probability/label count mismatch");
  ConfusionCounts c;
  for (int i = 0; i < probs.size(); ++i) {
    const bool hit = probs(i) >= 0.5;
    if (labels(i))
      (hit ? c.tp : c.fn) += 1;
    else
      (hit ? c.fp : c.tn) += 1;
  }
  return c;
}

FoldMetrics metrics(const ConfusionCounts& c) {
  if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0)
    fail(Err::InvariantViolation, "negative confusion count");
  if (c.total() == 0) fail(Err::UndefinedMetric, "metrics over an empty evaluation");
  FoldMetrics m;
  m.counts = c;
  m.acc.value = 100.0 * static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  if (c.tp + c.fp > 0)
    m.pre.value = 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  else
    m.pre = {0, false};
  if (c.tp + c.fn > 0)
    m.rec.value = 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  else
    m.rec = {0, false};
  if (2 * c.tp + c.fp + c.fn > 0)
    m.f1.value =
        100.0 * 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
  else
    m.f1 = {0, false};
  return m;
}

MetricSummary summarize(const std::vector<MetricValue>& folds) {
  MetricSummary s;
  double sum = 0;
  for (const auto& f : folds)
    if (f.defined) {
      sum += f.value;
      ++s.n_defined;
    }
  if (s.n_defined == 0) return s;
  s.mean = sum / s.n_defined;
  double ss = 0;
  for (const auto& f : folds)
    if (f.defined) ss += (f.value - s.mean) * (f.value - s.mean);
  s.stddev = std::sqrt(ss / s.n_defined);
  return s;
}

void FoldPlan::validate(const std::vector<std::string>& all_subjects) const {
  if (k != static_cast<int>(test_subjects.size()) ||
      k != static_cast<int>(train_subjects.size()))
    fail(Err::InvariantViolation, "fold plan bookkeeping mismatch");
  std::set<std::string> all(all_subjects.begin(), all_subjects.end());
  std::set<std::string> covered;
  for (int f = 0; f < k; ++f) {
    std::set<std::string> test(test_subjects[f].begin(), test_subjects[f].end());
    for (const auto& s : train_subjects[f])
      if (test.count(s))
        fail(Err::InvariantViolation,
             "subject " + s + " leaks between train and test of fold " + std::to_string(f));
    for (const auto& s : test_subjects[f]) {
      if (!covered.insert(s).second)
        fail(Err::InvariantViolation, "subject " + s + " tested in two folds");
      if (!all.count(s))
        fail(Err::InvariantViolation, "fold plan names unknown subject " + s);
    }
    if (test.size() + train_subjects[f].size() != all.size())
      fail(Err::InvariantViolation, "fold " + std::to_string(f) + " drops subjects");
  }
  if (covered.size() != all.size())
    fail(Err::InvariantViolation, "fold plan does not cover every subject");
}

FoldPlan split_by_subject(const std::vector<std::string>& subjects, int k,
                          std::uint64_t seed) {
  if (k < 1) fail(Err::InvariantViolation, "fold count must be >= 1");
  std::vector<std::string> uniq;
  {
    std::set<std::string> seen;
    for (const auto& s : subjects)
      if (seen.insert(s).second) uniq.push_back(s);
  }
  if (static_cast<int>(uniq.size()) < k)
    fail(Err::TooFewSubjects, "need at least " + std::to_string(k) + " subjects, have " +
                                  std::to_string(uniq.size()));
  std::vector<std::string> order = uniq;
  RngStream rng(derive_seed(seed, "folds"));
  rng.shuffle(order);

  FoldPlan plan;
  plan.k = k;
  plan.test_subjects.assign(k, {});
  plan.train_subjects.assign(k, {});
  for (std::size_t i = 0; i < order.size(); ++i)
    plan.test_subjects[i % k].push_back(order[i]);
  for (int f = 0; f < k; ++f) {
    std::set<std::string> test(plan.test_subjects[f].begin(), plan.test_subjects[f].end());
    for (const auto& s : uniq)
      if (!test.count(s)) plan.train_subjects[f].push_back(s);
  }
  plan.validate(uniq);
  return plan;
}

FoldPlan split_by_subject(const Dataset& ds, int k, std::uint64_t seed) {
  return split_by_subject(ds.subject_ids(), k, seed);
}

ClassifierSpec grid_search(const std::vector<ClassifierSpec>& grid,
                           const Eigen::MatrixXd& X, const Eigen::VectorXi& y,
                           const std::vector<std::string>& row_subjects,
                           std::uint64_t seed) {
  if (grid.empty()) fail(Err::InvariantViolation, "empty hyperparameter grid");
  if (X.rows() != y.size() || X.rows() != static_cast<long>(row_subjects.size()))
    fail(Err::ShapeMismatch, "grid_search: row bookkeeping mismatch");

  std::vector<std::string> uniq;
  {
    std::set<std::string> seen;
    for (const auto& s : row_subjects)
      if (seen.insert(s).second) uniq.push_back(s);
  }
  if (uniq.size() < 2)
    fail(Err::TooFewSubjects, "inner validation split needs at least 2 subjects");
  RngStream rng(derive_seed(seed, "inner"));
  rng.shuffle(uniq);
  std::size_t n_val = std::max<std::size_t>(1, std::lround(0.2 * uniq.size()));
  if (n_val >= uniq.size()) n_val = uniq.size() - 1;
  std::set<std::string> val_subjects(uniq.end() - n_val, uniq.end());

  std::vector<int> tr_rows, va_rows;
  for (long i = 0; i < X.rows(); ++i)
    (val_subjects.count(row_subjects[i]) ? va_rows : tr_rows).push_back(static_cast<int>(i));

  Eigen::MatrixXd Xtr(tr_rows.size(), X.cols()), Xva(va_rows.size(), X.cols());
  Eigen::VectorXi ytr(tr_rows.size()), yva(va_rows.size());
  for (std::size_t i = 0; i < tr_rows.size(); ++i) {
    Xtr.row(i) = X.row(tr_rows[i]);
    ytr(i) = y(tr_rows[i]);
  }
  for (std::size_t i = 0; i < va_rows.size(); ++i) {
    Xva.row(i) = X.row(va_rows[i]);
    yva(i) = y(va_rows[i]);
  }

  std::vector<double> score(grid.size(), 0.0);
  for (std::size_t c = 0; c < grid.size(); ++c) {
    try {
      TrainedModel m = fit(grid[c], Xtr, ytr);
      Eigen::VectorXd p = predict_proba(m, Xva);
      int hits = 0;
      for (long i = 0; i < p.size(); ++i)
        if ((p(i) >= 0.5 ? 1 : 0) == yva(i)) ++hits;
      score[c] = static_cast<double>(hits) / static_cast<double>(std::max<long>(1, p.size()));
    } catch (const std::exception& e) {
      std::cerr << "[grid] cell " << grid[c].describe() << " failed: " << e.what() << "\n";
      score[c] = 0.0;
    }
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < grid.size(); ++c)
    if (score[c] > score[best]) best = c;
  return grid[best];
}

std::string to_string(EvalModel m) {
  switch (m) {
    case EvalModel::knn: return "knn";
    case EvalModel::svm_l: return "svm_l";
    case EvalModel::svm_p: return "svm_p";
    case EvalModel::gp: return "gp";
    case EvalModel::dt: return "dt";
    case EvalModel::adb: return "adb";
    case EvalModel::rf: return "rf";
    case EvalModel::mlp: return "mlp";
    case EvalModel::cnn: return "cnn";
    case EvalModel::lstm: return "lstm";
  }
  fail(Err::InvariantViolation, "unhandled model enum");
}

EvalModel eval_model_from_string(const std::string& s) {
  for (EvalModel m : {EvalModel::knn, EvalModel::svm_l, EvalModel::svm_p, EvalModel::gp,
                      EvalModel::dt, EvalModel::adb, EvalModel::rf, EvalModel::mlp,
                      EvalModel::cnn, EvalModel::lstm})
    if (to_string(m) == s) return m;
  fail(Err::UsageError, "unknown model '" + s + "'");
}

bool is_deep(EvalModel m) { return m == EvalModel::cnn || m == EvalModel::lstm; }

bool regime_supported(EvalModel m, InputRegime regime) {
  if (m == EvalModel::lstm) return regime == InputRegime::time_series;
  if (m == EvalModel::cnn)
    return regime == InputRegime::time_series || regime == InputRegime::ts_plus_points;
  return true;
}

namespace {

ModelKind classic_kind(EvalModel m) {
  switch (m) {
    case EvalModel::knn: return ModelKind::KNN;
    case EvalModel::svm_l: return ModelKind::SVM_L;
    case EvalModel::svm_p: return ModelKind::SVM_P;
    case EvalModel::gp: return ModelKind::GP;
    case EvalModel::dt: return ModelKind::DT;
    case EvalModel::adb: return ModelKind::ADB;
    case EvalModel::rf: return ModelKind::RF;
    case EvalModel::mlp: return ModelKind::MLP;
    default: fail(Err::InvariantViolation, "not a classical model");
  }
}

}  // namespace

PreparedInputs prepare_inputs(const LabeledDataset& data, const GaitConfig& gait,
                              const FeatureConfig& features, int n_threads) {
  if (data.size() == 0) fail(Err::EmptyResult, "task view holds no records");
  PreparedInputs out;
  const std::size_t n = data.size();
  out.record_ids.resize(n);
  out.subject_ids.resize(n);
  out.labels.resize(n);
  out.tensors.resize(n);
  std::vector<FeatureVector> fvs(n);
  std::vector<std::vector<std::string>> rows(n);
  std::vector<std::exception_ptr> errors(n);

  parallel_for(n, n_threads, [&](std::size_t i) {
    try {
      const RunnerRecord& rec = data.record(i);
      out.record_ids[i] = rec.record_id;
      out.subject_ids[i] = rec.subject.subject_id;
      out.labels(i) = data.label[i];
      auto events = detect_events(rec, gait);
      auto phases = segment_stances(rec, events, gait);
      StanceTensor tensor = build_stance_tensor(phases, FootSel::both, gait.pelvis_dup);
      tensor.record_id = rec.record_id;
      auto st = spatiotemporal(events, rec.sample_rate(), rec.treadmill_speed);
      fvs[i] = extract_features(rec, phases, st, features);
      rows[i] = tensor.structure_labels;
      out.tensors[i] = std::move(tensor.data);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (std::size_t i = 0; i < n; ++i)
    if (errors[i]) std::rethrow_exception(errors[i]);

  out.tensor_rows = rows[0];
  for (std::size_t i = 1; i < n; ++i)
    if (rows[i] != out.tensor_rows)
      fail(Err::SchemaMismatch, "record " + out.record_ids[i] +
                                    ": stance tensor layout differs from " + out.record_ids[0]);
  out.schema = fvs[0].schema;
  out.points = feature_matrix(fvs);
  return out;
}

Eigen::MatrixXd flatten_tensors(const nn::Batch& tensors, const std::vector<int>& rows) {
  const long cols = tensors[rows[0]].size();
  Eigen::MatrixXd X(rows.size(), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const nn::Mat& t = tensors[rows[i]];
    for (long r = 0, at = 0; r < t.rows(); ++r)
      for (long c = 0; c < t.cols(); ++c, ++at) X(i, at) = t(r, c);
  }
  return X;
}

FoldRows rows_for_fold(const PreparedInputs& in, const FoldPlan& plan, int fold) {
  std::set<std::string> test(plan.test_subjects[fold].begin(),
                             plan.test_subjects[fold].end());
  std::set<std::string> train(plan.train_subjects[fold].begin(),
                              plan.train_subjects[fold].end());
  FoldRows rows;
  for (std::size_t i = 0; i < in.subject_ids.size(); ++i) {
    if (test.count(in.subject_ids[i])) {
      rows.test.push_back(static_cast<int>(i));
    } else if (train.count(in.subject_ids[i])) {
      rows.train.push_back(static_cast<int>(i));
      rows.train_subjects.push_back(in.subject_ids[i]);
    } else {
      fail(Err::InvariantViolation, "subject " + in.subject_ids[i] + " missing from fold plan");
    }
  }
  if (rows.train.empty() || rows.test.empty())
    fail(Err::TooFewSubjects, "fold " + std::to_string(fold) + " has an empty split");
  return rows;
}

Eigen::VectorXi take(const Eigen::VectorXi& v, const std::vector<int>& idx) {
  Eigen::VectorXi out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out(i) = v(idx[i]);
  return out;
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Eigen::MatrixXd out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = m.row(idx[i]);
  return out;
}

TensorScaler TensorScaler::fit(const nn::Batch& tensors, const std::vector<int>& rows) {
    const long C = tensors[rows[0]].cols();
    TensorScaler s;
    s.mean = Eigen::VectorXd::Zero(C);
    s.std = Eigen::VectorXd::Ones(C);
    double m = 0;
    for (int r : rows) {
      s.mean += tensors[r].colwise().sum().transpose();
      m += static_cast<double>(tensors[r].rows());
    }
    s.mean /= m;
    Eigen::VectorXd ss = Eigen::VectorXd::Zero(C);
    for (int r : rows)
      ss += (tensors[r].rowwise() - s.mean.transpose()).array().square().colwise().sum()
                .matrix().transpose();
    for (long c = 0; c < C; ++c) {
      const double sd = std::sqrt(ss(c) / m);
      s.std(c) = sd >= 1e-12 ? sd : 1.0;
    }
    return s;
}

nn::Batch TensorScaler::apply(const nn::Batch& tensors, const std::vector<int>& rows) const {
  nn::Batch out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out[i] = ((tensors[rows[i]].rowwise() - mean.transpose()).array().rowwise() /
              std.transpose().array())
                 .matrix();
  return out;
}

ExperimentReport run_experiment(const LabeledDataset& data, InputRegime regime,
                                const std::vector<EvalModel>& models,
                                const EvalConfig& cfg) {
  if (models.empty()) fail(Err::UsageError, "no models requested");
  for (EvalModel m : models)
    if (!regime_supported(m, regime))
      fail(Err::UsageError, "model " + to_string(m) + " does not accept the " +
                                to_string(regime) + " input regime");

  PreparedInputs in = prepare_inputs(data, cfg.gait, cfg.features, cfg.n_threads);
  FoldPlan plan = split_by_subject(in.subject_ids, cfg.k, cfg.seed);
  plan.validate([&] {
    std::vector<std::string> uniq;
    std::set<std::string> seen;
    for (const auto& s : in.subject_ids)
      if (seen.insert(s).second) uniq.push_back(s);
    return uniq;
  }());

  const std::string points_hash =
      sha256_hex([&] {
        std::string s = "points\n";
        for (const auto& n : in.schema->names()) s += n + "\n";
        return s;
      }());
  const std::string tensor_hash = sha256_hex([&] {
    std::string s = "tensor " + std::to_string(kStanceSamples) + "\n";
    for (const auto& r : in.tensor_rows) s += r + "\n";
    return s;
  }());
  const std::string regime_hash =
      regime == InputRegime::points
          ? points_hash
          : regime == InputRegime::time_series ? tensor_hash
                                               : sha256_hex(tensor_hash + points_hash);

  ExperimentReport report;
  report.task = data.task;
  report.regime = regime;
  report.seed = cfg.seed;
  report.k = cfg.k;

  for (EvalModel model : models) {
    ModelReport mr;
    mr.model = to_string(model);
    for (int fold = 0; fold < cfg.k; ++fold) {
      FoldRows rows = rows_for_fold(in, plan, fold);
      Eigen::VectorXi ytr = take(in.labels, rows.train);
      Eigen::VectorXi yte = take(in.labels, rows.test);
      Eigen::VectorXd probs;
      std::string chosen;

      if (!is_deep(model)) {
        Eigen::MatrixXd Xall;
        if (regime == InputRegime::points) {
          Xall = in.points;
        } else {
          std::vector<int> all(in.tensors.size());
          for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
          Xall = flatten_tensors(in.tensors, all);
          if (regime == InputRegime::ts_plus_points) {
            Eigen::MatrixXd joined(Xall.rows(), Xall.cols() + in.points.cols());
            joined << Xall, in.points;
            Xall = std::move(joined);
          }
        }
        Eigen::MatrixXd Xtr_raw = take_rows(Xall, rows.train);
        Eigen::MatrixXd Xte_raw = take_rows(Xall, rows.test);
        auto [Xtr, scaler] = standardize(Xtr_raw, Xtr_raw);
        Eigen::MatrixXd Xte = apply_scaler(scaler, Xte_raw);

        const ModelKind kind = classic_kind(model);
        ClassifierSpec spec;
        if (cfg.grid) {
          std::vector<ClassifierSpec> grid = hyper_grid(kind);
          for (std::size_t c = 0; c < grid.size(); ++c)
            grid[c].seed = derive_seed(cfg.seed, "cell " + mr.model, fold * 10000 + c);
          spec = grid_search(grid, Xtr, ytr, rows.train_subjects,
                             derive_seed(cfg.seed, "grid " + mr.model, fold));
        } else {
          spec = shipped_defaults(kind);
        }
        spec.seed = derive_seed(cfg.seed, "fit " + mr.model, fold);
        TrainedModel fitted = fit(spec, Xtr, ytr, regime, regime_hash);
        probs = predict_proba(fitted, Xte, regime_hash);
        chosen = spec.describe();
      } else {
        TensorScaler scaler = TensorScaler::fit(in.tensors, rows.train);
        nn::Batch str = scaler.apply(in.tensors, rows.train);
        nn::Batch ste = scaler.apply(in.tensors, rows.test);
        const bool with_points =
            model == EvalModel::cnn && regime == InputRegime::ts_plus_points;
        nn::Batch ptr_b, pte_b;
        if (with_points) {
          Eigen::MatrixXd Ptr_raw = take_rows(in.points, rows.train);
          Eigen::MatrixXd Pte_raw = take_rows(in.points, rows.test);
          auto [Ptr, psc] = standardize(Ptr_raw, Ptr_raw);
          Eigen::MatrixXd Pte = apply_scaler(psc, Pte_raw);
          for (long i = 0; i < Ptr.rows(); ++i) ptr_b.push_back(Ptr.row(i));
          for (long i = 0; i < Pte.rows(); ++i) pte_b.push_back(Pte.row(i));
        }
        const std::uint64_t net_seed = derive_seed(cfg.seed, "net " + mr.model, fold);
        nn::Network net =
            model == EvalModel::cnn
                ? nn::build_cnn(in.n_structures(), 9,
                                with_points ? static_cast<int>(in.points.cols()) : -1,
                                net_seed)
                : nn::build_lstm_net(in.n_structures(), 9, net_seed);
        nn::TrainConfig tc = cfg.net;
        tc.seed = derive_seed(cfg.seed, "train " + mr.model, fold);
        nn::train(net, str, with_points ? &ptr_b : nullptr, ytr, tc);
        probs = net.forward(ste, with_points ? &pte_b : nullptr, false);
        chosen = "epochs=" + std::to_string(tc.epochs);
      }

      mr.folds.push_back(metrics(count_confusion(probs, yte)));
      mr.chosen.push_back(chosen);
    }
    auto collect = [&](MetricValue FoldMetrics::*field) {
      std::vector<MetricValue> vals;
      for (const auto& f : mr.folds) vals.push_back(f.*field);
      return summarize(vals);
    };
    mr.acc = collect(&FoldMetrics::acc);
    mr.pre = collect(&FoldMetrics::pre);
    mr.rec = collect(&FoldMetrics::rec);
    mr.f1 = collect(&FoldMetrics::f1);
    report.models.push_back(std::move(mr));
  }
  return report;
}

namespace {

nlohmann::json metric_json(const MetricValue& v) {
  if (!v.defined) return {{"defined", false}};
  return {{"defined", true}, {"value", v.value}};
}

nlohmann::json summary_json(const MetricSummary& s) {
  if (s.n_defined == 0) return {{"folds_defined", 0}};
  return {{"folds_defined", s.n_defined}, {"mean", s.mean}, {"std", s.stddev}};
}

}  // namespace

std::string report_json(const ExperimentReport& r) {
  nlohmann::json j;
  j["task"] = to_string(r.task);
  j["regime"] = to_string(r.regime);
  j["seed"] = r.seed;
  j["folds"] = r.k;
  j["models"] = nlohmann::json::array();
  for (const auto& m : r.models) {
    nlohmann::json mj;
    mj["model"] = m.model;
    mj["folds"] = nlohmann::json::array();
    for (std::size_t f = 0; f < m.folds.size(); ++f) {
      const auto& fm = m.folds[f];
      mj["folds"].push_back({{"tp", fm.counts.tp},
                             {"tn", fm.counts.tn},
                             {"fp", fm.counts.fp},
                             {"fn", fm.counts.fn},
                             {"acc", metric_json(fm.acc)},
                             {"pre", metric_json(fm.pre)},
                             {"rec", metric_json(fm.rec)},
                             {"f1", metric_json(fm.f1)},
                             {"hyperparameters", m.chosen[f]}});
    }
    mj["summary"] = {{"acc", summary_json(m.acc)},
                     {"pre", summary_json(m.pre)},
                     {"rec", summary_json(m.rec)},
                     {"f1", summary_json(m.f1)}};
    j["models"].push_back(std::move(mj));
  }
  return j.dump(2) + "\n";
}

std::string report_csv(const std::vector<ExperimentReport>& reports) {
  CsvTable t;
  t.header = {"model"};
  for (const auto& r : reports) {
    const std::string g = std::string(to_string(r.task)) + "|" + to_string(r.regime);
    for (const char* metric : {"acc", "pre", "rec", "f1"}) {
      t.header.push_back(g + "|" + metric + "_mean");
      t.header.push_back(g + "|" + metric + "_std");
    }
  }
  std::vector<std::string> model_order;
  for (const auto& r : reports)
    for (const auto& m : r.models)
      if (std::find(model_order.begin(), model_order.end(), m.model) == model_order.end())
        model_order.push_back(m.model);
  for (const auto& name : model_order) {
    std::vector<std::string> row{name};
    for (const auto& r : reports) {
      const ModelReport* found = nullptr;
      for (const auto& m : r.models)
        if (m.model == name) found = &m;
      for (const MetricSummary* s :
           {found ? &found->acc : nullptr, found ? &found->pre : nullptr,
            found ? &found->rec : nullptr, found ? &found->f1 : nullptr}) {
        if (s && s->n_defined > 0) {
          row.push_back(fmt_g9(s->mean));
          row.push_back(fmt_g9(s->stddev));
        } else {
          row.push_back("");
          row.push_back("");
        }
      }
    }
    t.rows.push_back(std::move(row));
  }
  return to_csv(t);
}

ExperimentReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(Err::SchemaMismatch, std::string("report is not valid JSON: ") + e.what());
  }
  try {
    ExperimentReport r;
    r.task = task_from_string(j.at("task").get<std::string>());
    r.regime = regime_from_string(j.at("regime").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.k = j.at("folds").get<int>();
    auto metric = [](const nlohmann::json& m) {
      MetricValue v;
      v.defined = m.at("defined").get<bool>();
      if (v.defined) v.value = m.at("value").get<double>();
      return v;
    };
    auto summary = [](const nlohmann::json& m) {
      MetricSummary s;
      s.n_defined = m.at("folds_defined").get<int>();
      if (s.n_defined > 0) {
        s.mean = m.at("mean").get<double>();
        s.stddev = m.at("std").get<double>();
      }
      return s;
    };
    for (const auto& mj : j.at("models")) {
      ModelReport m;
      m.model = mj.at("model").get<std::string>();
      for (const auto& fj : mj.at("folds")) {
        FoldMetrics fm;
        fm.counts.tp = fj.at("tp").get<long>();
        fm.counts.tn = fj.at("tn").get<long>();
        fm.counts.fp = fj.at("fp").get<long>();
        fm.counts.fn = fj.at("fn").get<long>();
        fm.acc = metric(fj.at("acc"));
        fm.pre = metric(fj.at("pre"));
        fm.rec = metric(fj.at("rec"));
        fm.f1 = metric(fj.at("f1"));
        m.folds.push_back(fm);
        m.chosen.push_back(fj.at("hyperparameters").get<std::string>());
      }
      m.acc = summary(mj.at("summary").at("acc"));
      m.pre = summary(mj.at("summary").at("pre"));
      m.rec = summary(mj.at("summary").at("rec"));
      m.f1 = summary(mj.at("summary").at("f1"));
      r.models.push_back(std::move(m));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(Err::SchemaMismatch, std::string("report JSON shape: ") + e.what());
  }
}

}  // namespace runpat
