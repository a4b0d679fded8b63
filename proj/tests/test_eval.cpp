#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <set>

#include "runpat/common.hpp"
#include "runpat/eval.hpp"
#include "runpat/synth.hpp"

using namespace runpat;

TEST_CASE("confusion counting thresholds at one half") {
  Eigen::VectorXd p(6);
  p << 0.9, 0.5, 0.49, 0.1, 0.51, 0.2;
  Eigen::VectorXi y(6);
  y << 1, 0, 1, 0, 1, 1;
  ConfusionCounts c = count_confusion(p, y);
  CHECK(c.tp == 2);  // 0.9 and 0.51
  CHECK(c.fp == 1);  // the 0.5 on a negative
  CHECK(c.fn == 2);  // 0.49 and 0.2
  CHECK(c.tn == 1);
  CHECK(c.total() == 6);
}

TEST_CASE("metric percentages from a worked confusion table") {
  ConfusionCounts c;
  c.tp = 2;
  c.tn = 3;
  c.fp = 1;
  c.fn = 2;
  FoldMetrics m = metrics(c);
  CHECK(m.acc.value == doctest::Approx(62.5).epsilon(1e-9));
  CHECK(m.pre.value == doctest::Approx(100.0 * 2 / 3).epsilon(1e-9));
  CHECK(m.rec.value == doctest::Approx(50.0).epsilon(1e-9));
  CHECK(m.f1.value == doctest::Approx(100.0 * 4.0 / 7.0).epsilon(1e-9));
  CHECK(m.acc.defined);
  CHECK(m.f1.defined);

  ConfusionCounts perfect;
  perfect.tp = 4;
  perfect.tn = 6;
  FoldMetrics pm = metrics(perfect);
  CHECK(pm.acc.value == doctest::Approx(100.0));
  CHECK(pm.pre.value == doctest::Approx(100.0));
  CHECK(pm.rec.value == doctest::Approx(100.0));
  CHECK(pm.f1.value == doctest::Approx(100.0));
}

TEST_CASE("zero denominators flag the metric instead of inventing a number") {
  ConfusionCounts c;  // all positives missed, nothing predicted positive
  c.tn = 5;
  c.fn = 3;
  FoldMetrics m = metrics(c);
  CHECK(!m.pre.defined);  // tp + fp == 0
  CHECK(m.rec.defined);
  CHECK(m.rec.value == doctest::Approx(0.0));
  CHECK(m.f1.defined);  // its own denominator 2tp+fp+fn is nonzero
  CHECK(m.f1.value == doctest::Approx(0.0));

  ConfusionCounts neg;
  neg.tp = -1;
  CHECK_THROWS_AS(metrics(neg), Error);

  ConfusionCounts empty;
  try {
    metrics(empty);
    FAIL("expected UndefinedMetric");
  } catch (const Error& e) {
    CHECK(e.code() == Err::UndefinedMetric);
  }
}

TEST_CASE("fold summaries use the population deviation over defined folds") {
  std::vector<MetricValue> folds = {{80, true}, {90, true}, {100, true},
                                    {0, false}, {70, true}};
  MetricSummary s = summarize(folds);
  CHECK(s.n_defined == 4);
  CHECK(s.mean == doctest::Approx(85.0).epsilon(1e-12));
  // population std of {80, 90, 100, 70}
  const double want = std::sqrt((25.0 + 25.0 + 225.0 + 225.0) / 4.0);
  CHECK(s.stddev == doctest::Approx(want).epsilon(1e-12));

  MetricSummary none = summarize({{0, false}});
  CHECK(none.n_defined == 0);
}

TEST_CASE("subject-wise folds balance sizes and move whole subjects") {
  std::vector<std::string> subjects;
  for (int i = 0; i < 10; ++i) subjects.push_back("S" + std::to_string(i));
  FoldPlan plan = split_by_subject(subjects, 5, 42);
  REQUIRE(plan.k == 5);
  std::set<std::string> seen;
  for (int f = 0; f < 5; ++f) {
    CHECK(plan.test_subjects[f].size() == 2);
    CHECK(plan.train_subjects[f].size() == 8);
    for (const auto& s : plan.test_subjects[f]) {
      CHECK(seen.insert(s).second);  // each subject tested exactly once
      CHECK(std::find(plan.train_subjects[f].begin(), plan.train_subjects[f].end(), s) ==
            plan.train_subjects[f].end());
    }
  }
  CHECK(seen.size() == 10);
  plan.validate(subjects);

  // deterministic in the seed, shuffled between seeds
  FoldPlan again = split_by_subject(subjects, 5, 42);
  CHECK(again.test_subjects == plan.test_subjects);

  FoldPlan corrupted = plan;
  corrupted.train_subjects[0].push_back(corrupted.test_subjects[0][0]);
  CHECK_THROWS_AS(corrupted.validate(subjects), Error);
  FoldPlan dropped = plan;
  dropped.test_subjects[0].pop_back();
  CHECK_THROWS_AS(dropped.validate(subjects), Error);
}

TEST_CASE("too few subjects for the requested fold count") {
  std::vector<std::string> subjects = {"a", "b", "c"};
  try {
    split_by_subject(subjects, 5, 1);
    FAIL("expected TooFewSubjects");
  } catch (const Error& e) {
    CHECK(e.code() == Err::TooFewSubjects);
  }
}

TEST_CASE("grid search prefers the cell that survives label noise") {
  // 60 rows from 10 subjects on a clean 1-D rule, with a third of the training
  // labels flipped: k=1 memorizes the flips, k=7 smooths them out.
  RngStream rng(7);
  const int n = 60;
  Eigen::MatrixXd X(n, 1);
  Eigen::VectorXi y(n);
  std::vector<std::string> subj(n);
  for (int i = 0; i < n; ++i) {
    const int cls = i % 2;
    X(i, 0) = (cls ? 1.0 : -1.0) + 0.2 * rng.normal();
    y(i) = cls;
    if (i % 3 == 0) y(i) = 1 - y(i);
    subj[i] = "S" + std::to_string(i % 10);
  }
  ClassifierSpec one = shipped_defaults(ModelKind::KNN);
  one.hp["k"] = 1L;
  ClassifierSpec seven = shipped_defaults(ModelKind::KNN);
  seven.hp["k"] = 7L;
  ClassifierSpec best = grid_search({one, seven}, X, y, subj, 3);
  CHECK(best.geti("k") == 7);

  // a singleton grid returns its only cell untouched
  ClassifierSpec only = grid_search({one}, X, y, subj, 3);
  CHECK(only.geti("k") == 1);
}

TEST_CASE("model and regime names round-trip; unsupported pairs are rejected") {
  for (EvalModel m : {EvalModel::knn, EvalModel::svm_l, EvalModel::svm_p, EvalModel::gp,
                      EvalModel::dt, EvalModel::adb, EvalModel::rf, EvalModel::mlp,
                      EvalModel::cnn, EvalModel::lstm})
    CHECK(eval_model_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(eval_model_from_string("resnet"), Error);

  CHECK(regime_supported(EvalModel::knn, InputRegime::points));
  CHECK(regime_supported(EvalModel::knn, InputRegime::time_series));
  CHECK(regime_supported(EvalModel::cnn, InputRegime::time_series));
  CHECK(regime_supported(EvalModel::cnn, InputRegime::ts_plus_points));
  CHECK(!regime_supported(EvalModel::cnn, InputRegime::points));
  CHECK(!regime_supported(EvalModel::lstm, InputRegime::ts_plus_points));
  CHECK(!regime_supported(EvalModel::lstm, InputRegime::points));
}

namespace {

SynthResult small_synth(std::uint64_t seed) {
  SynthSpec spec;
  spec.n_subjects = 8;
  spec.records_per_subject = 1;
  spec.n_strides = 6;
  spec.sample_rate = 100.0;
  spec.seed = seed;
  spec.effects[0].stance_fraction = 0.26;
  spec.effects[1].stance_fraction = 0.34;
  return synth(spec);
}

}  // namespace

TEST_CASE("prepared inputs line up records, tensors and points") {
  SynthResult res = small_synth(5);
  LabeledDataset data = class_filter(res.dataset, Task::PFPS_vs_H);
  PreparedInputs in = prepare_inputs(data, GaitConfig{}, FeatureConfig{});
  REQUIRE(in.record_ids.size() == 16);
  CHECK(in.labels.size() == 16);
  CHECK(in.tensors.size() == 16);
  CHECK(in.points.rows() == 16);
  CHECK(in.n_structures() == 10);  // both feet, pelvis row per side
  for (const auto& t : in.tensors) {
    CHECK(t.rows() == 101);
    CHECK(t.cols() == 10 * 9);
  }
  CHECK(in.labels.sum() == 8);

  // flattening is row-major over (time, column)
  Eigen::MatrixXd flat = flatten_tensors(in.tensors, {0, 3});
  REQUIRE(flat.rows() == 2);
  REQUIRE(flat.cols() == 101 * 90);
  CHECK(flat(0, 5) == in.tensors[0](0, 5));
  CHECK(flat(1, 90 * 2 + 7) == in.tensors[3](2, 7));

  FoldPlan plan = split_by_subject(res.dataset, 4, 9);
  FoldRows rows = rows_for_fold(in, plan, 0);
  CHECK(rows.train.size() + rows.test.size() == 16);
  CHECK(rows.train_subjects.size() == rows.train.size());
  Eigen::VectorXi taken = take(in.labels, rows.test);
  CHECK(taken.size() == static_cast<long>(rows.test.size()));
}

TEST_CASE("tensor scaler removes per-channel moments on its fit rows") {
  SynthResult res = small_synth(11);
  LabeledDataset data = class_filter(res.dataset, Task::PFPS_vs_H);
  PreparedInputs in = prepare_inputs(data, GaitConfig{}, FeatureConfig{});
  std::vector<int> rows = {0, 1, 2, 3, 4, 5};
  TensorScaler sc = TensorScaler::fit(in.tensors, rows);
  nn::Batch z = sc.apply(in.tensors, rows);
  const int C = static_cast<int>(in.tensors[0].cols());
  for (int c = 0; c < C; c += 17) {
    double sum = 0, sq = 0;
    long count = 0;
    for (const auto& t : z) {
      sum += t.col(c).sum();
      sq += t.col(c).squaredNorm();
      count += t.rows();
    }
    const double mean = sum / count;
    const double var = sq / count - mean * mean;
    CHECK(std::abs(mean) < 1e-9);
    if (sc.std(c) > 1e-9) CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("an easy experiment scores high and reruns byte-identically") {
  SynthSpec spec;  // larger than small_synth: 4-fold CV needs some headroom
  spec.n_subjects = 12;
  spec.records_per_subject = 1;
  spec.n_strides = 6;
  spec.sample_rate = 100.0;
  spec.seed = 21;
  spec.effects[0].stance_fraction = 0.26;
  spec.effects[1].stance_fraction = 0.34;
  SynthResult res = synth(spec);
  LabeledDataset data = class_filter(res.dataset, Task::PFPS_vs_H);
  EvalConfig cfg;
  cfg.k = 4;
  cfg.seed = 13;
  cfg.grid = false;
  ExperimentReport rep =
      run_experiment(data, InputRegime::points, {EvalModel::svm_l}, cfg);
  REQUIRE(rep.models.size() == 1);
  CHECK(rep.models[0].model == "svm_l");
  REQUIRE(rep.models[0].folds.size() == 4);
  CHECK(rep.models[0].acc.mean > 90.0);

  ExperimentReport again =
      run_experiment(data, InputRegime::points, {EvalModel::svm_l}, cfg);
  CHECK(report_json(rep) == report_json(again));
}

TEST_CASE("reports render to csv and survive a json round-trip") {
  SynthResult res = small_synth(31);
  LabeledDataset data = class_filter(res.dataset, Task::PFPS_vs_H);
  EvalConfig cfg;
  cfg.k = 4;
  cfg.seed = 17;
  cfg.grid = false;
  ExperimentReport rep =
      run_experiment(data, InputRegime::points, {EvalModel::knn, EvalModel::dt}, cfg);
  REQUIRE(rep.models.size() == 2);

  const std::string json = report_json(rep);
  ExperimentReport back = report_from_json(json);
  CHECK(report_json(back) == json);

  const std::string csv = report_csv({rep});
  std::vector<std::string> lines;
  size_t at = 0;
  while (at < csv.size()) {
    const size_t nl = csv.find('\n', at);
    lines.push_back(csv.substr(at, nl - at));
    at = nl + 1;
  }
  REQUIRE(lines.size() == 3);  // header + one row per model
  CHECK(lines[0].rfind("model,", 0) == 0);
  CHECK(lines[1].rfind("knn,", 0) == 0);
  CHECK(lines[2].rfind("dt,", 0) == 0);

  CHECK_THROWS_AS(report_from_json("not json"), Error);
}

TEST_CASE("deep models cannot be asked for the points regime") {
  SynthResult res = small_synth(41);
  LabeledDataset data = class_filter(res.dataset, Task::PFPS_vs_H);
  EvalConfig cfg;
  cfg.k = 4;
  try {
    run_experiment(data, InputRegime::points, {EvalModel::cnn}, cfg);
    FAIL("expected UsageError");
  } catch (const Error& e) {
    CHECK(e.code() == Err::UsageError);
  }
}
