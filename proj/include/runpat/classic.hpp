#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

namespace runpat {

enum class ModelKind { KNN, SVM_L, SVM_P, GP, DT, ADB, RF, MLP };
std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

enum class InputRegime { time_series, ts_plus_points, points };
std::string to_string(InputRegime r);
InputRegime regime_from_string(const std::string& s);

using HyperValue = std::variant<long, double, std::string>;

struct ClassifierSpec {
  ModelKind kind = ModelKind::KNN;
  std::map<std::string, HyperValue> hp;
  std::uint64_t seed = 0;

  long geti(const std::string& name) const;
  double getd(const std::string& name) const;
  std::string gets(const std::string& name) const;
  std::string describe() const;  // stable one-line rendering for logs/reports
};

ClassifierSpec shipped_defaults(ModelKind kind);

// The grid-search cells for one model kind, in stable enumeration order.
std::vector<ClassifierSpec> hyper_grid(ModelKind kind);

// --- fitted parameter blocks -------------------------------------------------

struct KnnParams {
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  int k = 1;
};

struct LinSvmParams {
  Eigen::VectorXd w;
  double b = 0;
};

struct PolySvmParams {
  Eigen::MatrixXd support;       // support vectors (alpha > 0 rows)
  Eigen::VectorXd alpha_y;       // alpha_i * y_i per support vector
  double b = 0;
  int degree = 3;
};

struct GpParams {
  Eigen::MatrixXd X;
  Eigen::VectorXd grad;          // d log p(y|f) / df at the mode
  Eigen::VectorXd sqrt_w;        // W^{1/2} diagonal at the mode
  Eigen::MatrixXd L;             // chol(I + W^{1/2} K W^{1/2})
  double lengthscale = 1;
};

struct TreeNode {
  int feature = -1;              // -1 marks a leaf
  double threshold = 0;
  int left = -1, right = -1;
  double w_pos = 0, w_neg = 0;   // weighted label counts at the node
};

struct TreeParams {
  std::vector<TreeNode> nodes;   // nodes[0] is the root
  double leaf_prob(const Eigen::VectorXd& x) const;
};

struct AdbParams {
  std::vector<TreeParams> stumps;
  std::vector<double> alpha;
};

struct RfParams {
  std::vector<TreeParams> trees;
};

struct MlpParams {
  Eigen::MatrixXd W1;            // d x H
  Eigen::VectorXd b1, W2;
  double b2 = 0;
};

using FittedParams = std::variant<KnnParams, LinSvmParams, PolySvmParams, GpParams,
                                  TreeParams, AdbParams, RfParams, MlpParams>;

struct TrainedModel {
  ClassifierSpec spec;
  InputRegime regime = InputRegime::points;
  std::string schema_hash;
  int n_features = 0;
  FittedParams params;
};

// Binary classification on rows of X, labels in {0,1}. Deterministic given
// (spec, X, y). KNN/SVM/GP/MLP expect standardized features.
TrainedModel fit(const ClassifierSpec& spec, const Eigen::MatrixXd& X,
                 const Eigen::VectorXi& y, InputRegime regime = InputRegime::points,
                 std::string schema_hash = {});

// Probabilities in [0,1]; the decision rule everywhere is 1 iff p >= 0.5.
Eigen::VectorXd predict_proba(const TrainedModel& model, const Eigen::MatrixXd& X,
                              const std::string& schema_hash = {});

std::string serialize_model(const TrainedModel& model);
TrainedModel deserialize_model(const std::string& json_text);

// CART fitting, shared with the AdaBoost/forest base learners.
struct TreeConfig {
  int max_depth = 0;  // 0 = unlimited
  int min_split = 2;
  int min_leaf = 1;
  bool random_splitter = false;
  enum class MaxFeatures { all, sqrt_, log2_ } max_features = MaxFeatures::all;
  enum class Criterion { gini, entropy, log_loss } criterion = Criterion::gini;
};

TreeParams fit_tree(const Eigen::MatrixXd& X, const Eigen::VectorXi& y,
                    const Eigen::VectorXd& sample_weight, const TreeConfig& cfg,
                    std::uint64_t seed);

}  // namespace runpat
