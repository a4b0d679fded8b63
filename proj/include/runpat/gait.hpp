#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "runpat/dataset.hpp"

namespace runpat {

// Structures entering one stance block, in row order: side ankle, knee, hip,
// foot, then pelvis.
inline constexpr int kStanceStructures = 5;
std::array<Structure, kStanceStructures> stance_structures(Foot foot);

struct StancePhase {
  Foot foot = Foot::L;
  int start_frame = 0;  // touch-down
  int end_frame = 0;    // toe-off
  double duration = 0;  // seconds
  // kStanceSamples x (kStanceStructures*3), column = structure*3 + axis
  Eigen::MatrixXd resampled;
};

struct GaitConfig {
  int smoothing_window = 11;       // centered moving average, frames
  double min_stance_s = 0.1;
  double max_stance_s = 0.6;
  int min_stance_frames = 5;
  bool pelvis_dup = true;          // duplicate pelvis slot -> 10 structure rows
};

enum class FootSel { L, R, both };

// Normalized stance block: rows = 101 time steps, columns = structure x channel
// with channel = axis x modality (x_mean, x_upper, x_lower, y_mean, ...).
struct StanceTensor {
  std::string record_id;
  std::vector<std::string> structure_labels;       // length A
  std::array<std::string, 9> channel_labels;
  Eigen::MatrixXd data;                            // 101 x (A*9)

  int n_structures() const { return static_cast<int>(structure_labels.size()); }
  double at(int t, int a, int c) const { return data(t, a * 9 + c); }
  void validate() const;  // lower <= mean <= upper per (t, structure, axis)
};

struct SpatioTemporalSummary {
  double stride_rate = 0;                 // strides/min
  std::optional<double> stride_length;    // meters, needs treadmill speed
  double stance_pct = 0;
  double swing_pct = 0;
  std::optional<double> step_width;       // unavailable from angle data
  std::vector<std::pair<Foot, double>> contact_times;  // seconds per stance

  double mean_contact_time(Foot f) const;
};

// Touch-down/toe-off detection on the foot-segment angles: first principal
// component of the per-frame Cardan triple, smoothed, with touch-down at the
// negative-going zero crossing of the score derivative before each score
// minimum and toe-off at the following positive-going crossing. The score sign
// is calibrated so stance durations land in [min_stance_s, max_stance_s].
// Records that already carry ground-truth events return them verbatim.
std::vector<GaitEvent> detect_events(const RunnerRecord& record, const GaitConfig& cfg = {});

std::vector<StancePhase> segment_stances(const RunnerRecord& record,
                                         const std::vector<GaitEvent>& events,
                                         const GaitConfig& cfg = {});

StanceTensor build_stance_tensor(const std::vector<StancePhase>& phases, FootSel sel,
                                 bool pelvis_dup = true);

SpatioTemporalSummary spatiotemporal(const std::vector<GaitEvent>& events, double sample_rate,
                                     std::optional<double> treadmill_speed = std::nullopt);

}  // namespace runpat
