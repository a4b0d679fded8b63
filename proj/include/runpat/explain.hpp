#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "runpat/common.hpp"
#include "runpat/deepnet.hpp"

namespace runpat {

// A black-box probability model: one prediction per input row.
using ModelFn = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;

struct ShapleyConfig {
  enum class Mode { exact, monte_carlo };
  Mode mode = Mode::exact;
  int permutations = 200;  // monte_carlo; must be >= 100
  std::uint64_t seed = 1;
  // Optional player grouping (a partition of the feature indices); attribution
  // is then per group. Used as structure x time-bin superpixels for tensors.
  std::optional<std::vector<std::vector<int>>> groups;
};

struct ShapleyResult {
  Eigen::VectorXd phi;  // per feature, or per group when grouped
  double f_x = 0, f_baseline = 0;
  double efficiency_residual = 0;  // |sum(phi) - (f_x - f_baseline)|
};

// Attribution of f(x) - f(baseline) over features. Exact mode enumerates all
// coalitions (at most 12 players); Monte-Carlo averages marginal contributions
// over random player orderings with absent features held at the baseline.
ShapleyResult shapley(const ModelFn& f, const Eigen::RowVectorXd& x,
                      const Eigen::RowVectorXd& baseline, const ShapleyConfig& cfg);

// Partition of flattened (t, a, c) indices into (structure, time-bin) groups,
// all channels of a structure moving together. Group id = a * n_bins + bin.
std::vector<std::vector<int>> tensor_superpixels(int n_structures, int n_channels,
                                                 int n_steps, int bin_width);

struct PdpCurve {
  Eigen::VectorXd grid;       // quantiles of the observed feature values
  Eigen::VectorXd mean_pred;  // mean prediction with the feature forced there
};

PdpCurve pdp(const ModelFn& f, const Eigen::MatrixXd& X, int feature, int grid_size);

struct ExplanationMap {
  std::string method;  // shapley | pdp | saliency | gradcam
  std::vector<std::string> row_labels;
  Eigen::MatrixXd values;  // one row per label, kStanceSamples time columns
  std::string aggregation;
  std::string baseline;
};

struct SmoothGradConfig {
  int n = 25;
  double sigma_scale = 0.05;  // noise sigma = scale * (max - min) of the case
  std::uint64_t seed = 1;
};

// SmoothGrad saliency: mean |d output / d input| over noisy copies of each
// case, averaged across cases. Rows follow the stance-tensor channel order.
ExplanationMap saliency(nn::Network& net, const nn::Batch& cases, const nn::Batch* points,
                        const std::vector<std::string>& row_labels,
                        const SmoothGradConfig& cfg);

// Grad-CAM on a convolutional node: channel weights from globally averaged
// output gradients, rectified weighted activation sum, linearly resampled to
// kStanceSamples steps, averaged across cases. Single-row map.
ExplanationMap gradcam(nn::Network& net, const nn::Batch& cases, const nn::Batch* points,
                       const std::string& node);

// Expands per-group Shapley values of tensor superpixels into a 2D map
// (structure rows x time columns) for rendering.
ExplanationMap shapley_map(const Eigen::VectorXd& phi,
                           const std::vector<std::string>& structure_labels,
                           int n_steps, int bin_width, const std::string& baseline_desc);

void write_map_csv(const ExplanationMap& map, const std::filesystem::path& path);
// Heatmap; diverging palette around zero for Shapley, sequential otherwise.
void write_map_svg(const ExplanationMap& map, const std::filesystem::path& path);

void write_ranking_csv(const std::vector<std::string>& names, const Eigen::VectorXd& phi,
                       double efficiency_residual, const std::filesystem::path& path);
void write_pdp_csv(const std::string& feature, const PdpCurve& curve,
                   const std::filesystem::path& path);
void write_pdp_svg(const std::string& feature, const PdpCurve& curve,
                   const std::filesystem::path& path);

}  // namespace runpat
