#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "runpat/dataset.hpp"
#include "runpat/gait.hpp"

namespace runpat {

enum class FeatureFamily {
  spatiotemporal,
  peak,
  excursion,
  velocity_peak,
  pct_time,
  band_power,
  demographic,
};

std::string to_string(FeatureFamily f);

struct FeatureDef {
  std::string name;
  std::string unit;
  FeatureFamily family;
};

struct FeatureSchema {
  std::vector<FeatureDef> defs;

  int size() const { return static_cast<int>(defs.size()); }
  int index_of(const std::string& name) const;  // UnknownFeature if absent
  std::vector<std::string> names() const;
  bool operator==(const FeatureSchema& o) const;
};

struct FeatureVector {
  std::shared_ptr<const FeatureSchema> schema;
  Eigen::VectorXd values;
  std::string record_id;
  InjuryLabel label = InjuryLabel::healthy;

  void validate() const;  // length matches schema, all entries finite
};

struct BandPower {
  double lf = 0;  // 0-1 Hz, deg^2
  double mf = 0;  // 1-3 Hz
  double hf = 0;  // 3 - min(99, Nyquist) Hz
};

// Which side's stance curves feed the angle features. `average` computes each
// feature per side and takes the mean of the two.
enum class FeatureSide { L, R, average };

struct FeatureConfig {
  FeatureSide side = FeatureSide::average;
  bool vertical_oscillation = false;  // pelvis sagittal-excursion proxy
  // Sign conventions per stance-block structure x axis (ankle, knee, hip,
  // foot, pelvis) so clinical conventions can be flipped without code changes.
  std::array<std::array<double, 3>, kStanceStructures> axis_sign = {{
      {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}}};
  double eversion_threshold_deg = 0.0;  // "ankle in eversion" predicate cutoff
};

// Primitive reductions. `sign` picks the clinical direction: the result is the
// maximum of sign*series, i.e. the extremum in that direction.
double peak(const Eigen::VectorXd& series, double sign = 1.0);
double excursion(const Eigen::VectorXd& series);
double peak_velocity(const Eigen::VectorXd& series, double dt);
double pct_time_above(const Eigen::VectorXd& series, double threshold);

BandPower band_power(const Eigen::VectorXd& series, double sample_rate);

FeatureVector extract_features(const RunnerRecord& record,
                               const std::vector<StancePhase>& phases,
                               const SpatioTemporalSummary& summary,
                               const FeatureConfig& config = {});

struct ScalerParams {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
  std::vector<char> scaled;  // 0 = near-constant column passed through
};

// Z-score `apply` with moments fitted on `train` (population std). Columns with
// std < 1e-12 pass through unscaled and are flagged.
std::pair<Eigen::MatrixXd, ScalerParams> standardize(const Eigen::MatrixXd& train,
                                                     const Eigen::MatrixXd& apply);
Eigen::MatrixXd apply_scaler(const ScalerParams& params, const Eigen::MatrixXd& m);

// Stack feature vectors sharing one schema into a design matrix (row = record).
Eigen::MatrixXd feature_matrix(const std::vector<FeatureVector>& rows);

}  // namespace runpat
