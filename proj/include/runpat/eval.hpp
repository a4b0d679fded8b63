#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "runpat/classic.hpp"
#include "runpat/dataset.hpp"
#include "runpat/deepnet.hpp"
#include "runpat/features.hpp"
#include "runpat/gait.hpp"

namespace runpat {

struct ConfusionCounts {
  long tp = 0, tn = 0, fp = 0, fn = 0;

  long pos() const { return tp + fn; }
  long neg() const { return tn + fp; }
  long total() const { return tp + tn + fp + fn; }
};

// Thresholds probabilities at 0.5 (decision = 1 iff p >= 0.5).
ConfusionCounts count_confusion(const Eigen::VectorXd& probs, const Eigen::VectorXi& labels);

struct MetricValue {
  double value = 0;  // percent
  bool defined = true;
};

struct FoldMetrics {
  ConfusionCounts counts;
  MetricValue acc, pre, rec, f1;
};

// Accuracy, precision, recall and F1 in percent. A zero denominator yields an
// undefined flag on that metric instead of a value; an empty count set fails.
FoldMetrics metrics(const ConfusionCounts& c);

struct MetricSummary {
  double mean = 0, stddev = 0;  // population std over the defined folds
  int n_defined = 0;
};

MetricSummary summarize(const std::vector<MetricValue>& folds);

struct FoldPlan {
  int k = 0;
  std::vector<std::vector<std::string>> train_subjects, test_subjects;  // per fold

  // No-leakage and coverage assertions; throws InvariantViolation.
  void validate(const std::vector<std::string>& all_subjects) const;
};

// Subjects are shuffled by seed, then dealt round-robin into K test groups.
// All records of a subject travel together (folds are subject-id based).
FoldPlan split_by_subject(const std::vector<std::string>& subjects, int k,
                          std::uint64_t seed);
FoldPlan split_by_subject(const Dataset& ds, int k, std::uint64_t seed);

// Picks the grid cell with the best accuracy on an inner subject-wise 80/20
// validation split of (X, y). Cells that throw are scored 0 and logged. Ties
// keep the earlier grid position. The caller refits the winner on all rows.
ClassifierSpec grid_search(const std::vector<ClassifierSpec>& grid,
                           const Eigen::MatrixXd& X, const Eigen::VectorXi& y,
                           const std::vector<std::string>& row_subjects,
                           std::uint64_t seed);

enum class EvalModel { knn, svm_l, svm_p, gp, dt, adb, rf, mlp, cnn, lstm };
std::string to_string(EvalModel m);
EvalModel eval_model_from_string(const std::string& s);
bool is_deep(EvalModel m);
// Deep models support only the tensor regimes (the LSTM only time_series);
// classical models accept all three.
bool regime_supported(EvalModel m, InputRegime regime);

struct EvalConfig {
  int k = 5;
  std::uint64_t seed = 1;
  bool grid = true;  // nested grid search for classical models
  GaitConfig gait;
  FeatureConfig features;
  nn::TrainConfig net;  // deep-model training recipe
  int n_threads = 1;
};

// Stance tensors and point features for every record of a task view, shared
// across models and regimes of one experiment.
struct PreparedInputs {
  std::vector<std::string> record_ids, subject_ids;
  Eigen::VectorXi labels;
  nn::Batch tensors;                      // each kStanceSamples x (A*9)
  std::vector<std::string> tensor_rows;   // structure labels, length A
  Eigen::MatrixXd points;                 // n x d
  std::shared_ptr<const FeatureSchema> schema;

  int n_structures() const { return static_cast<int>(tensor_rows.size()); }
};

PreparedInputs prepare_inputs(const LabeledDataset& data, const GaitConfig& gait,
                              const FeatureConfig& features, int n_threads = 1);

// One flat row per selected record, row-major over the stance tensor
// (flat index = t * n_cols + col).
Eigen::MatrixXd flatten_tensors(const nn::Batch& tensors, const std::vector<int>& rows);

struct FoldRows {
  std::vector<int> train, test;
  std::vector<std::string> train_subjects;  // per train row
};
FoldRows rows_for_fold(const PreparedInputs& in, const FoldPlan& plan, int fold);

Eigen::VectorXi take(const Eigen::VectorXi& v, const std::vector<int>& idx);
Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, const std::vector<int>& idx);

// Per-channel z-scoring of stance tensors with moments from the training fold
// (over samples x time), mirroring the point-value scaler.
struct TensorScaler {
  Eigen::VectorXd mean, std;

  static TensorScaler fit(const nn::Batch& tensors, const std::vector<int>& rows);
  nn::Batch apply(const nn::Batch& tensors, const std::vector<int>& rows) const;
};

struct ModelReport {
  std::string model;
  std::vector<FoldMetrics> folds;
  std::vector<std::string> chosen;  // winning hyperparameters per fold
  MetricSummary acc, pre, rec, f1;
};

struct ExperimentReport {
  Task task = Task::PFPS_ITBS_vs_H;
  InputRegime regime = InputRegime::points;
  std::uint64_t seed = 0;
  int k = 0;
  std::vector<ModelReport> models;
};

ExperimentReport run_experiment(const LabeledDataset& data, InputRegime regime,
                                const std::vector<EvalModel>& models,
                                const EvalConfig& cfg);

// Stable machine-readable renderings (byte-identical across reruns).
std::string report_json(const ExperimentReport& r);
// Rows = models, column groups = (task, regime) pairs in argument order.
std::string report_csv(const std::vector<ExperimentReport>& reports);
// Inverse of report_json, used to merge reports from separate runs.
ExperimentReport report_from_json(const std::string& text);

}  // namespace runpat
