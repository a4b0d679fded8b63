#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "runpat/dataset.hpp"

namespace runpat {

// Per-class generator effects. With both classes at the defaults the two
// populations are statistically identical (null configuration).
struct ClassEffects {
  double stance_fraction = 0.30;  // of stride, must be in (0.2, 0.5)
  double period_scale = 1.0;      // stride-rate shift
  double mf_amp = 0.0;            // 2 Hz injection on ankle frontal angle, deg
  double hf_amp = 0.0;            // 6 Hz injection, deg
  double knee_peak = 40.0;        // stance knee-flexion peak, deg
};

struct SynthSpec {
  int n_subjects = 10;  // per class
  int records_per_subject = 1;
  double sample_rate = 200.0;           // Hz
  double period_s = 0.70;               // base stride period
  double jitter = 0.02;                 // relative per-stride period jitter
  int n_strides = 24;                   // complete left stances per record
  double noise_sigma = 0.0;             // additive Gaussian noise, deg
  std::optional<double> treadmill_speed = 3.0;  // m/s
  InjuryLabel injured_label = InjuryLabel::PFPS;
  std::array<ClassEffects, 2> effects{};  // [healthy, injured]
  bool embed_events = false;  // carry ground-truth events on the records
  std::uint64_t seed = 1;

  void validate() const;
};

struct SynthRecordTruth {
  std::string record_id;
  int cls = 0;  // 0 healthy, 1 injured
  std::vector<GaitEvent> events;
  double stance_fraction = 0;
  double period_s = 0;  // subject-adjusted mean stride period
  double knee_peak = 0;
  double mf_amp = 0;
  double hf_amp = 0;
};

struct SynthTruth {
  std::vector<SynthRecordTruth> records;
  // Separability certificate: a threshold on extracted stance_pct at the
  // midpoint of the two class levels.
  double stance_pct_threshold = 0;
  std::array<double, 2> expected_stance_pct{};
};

struct SynthResult {
  Dataset dataset;
  SynthTruth truth;
};

SynthResult synth(const SynthSpec& spec);

void save_truth(const SynthTruth& truth, const std::filesystem::path& path);
SynthTruth load_truth(const std::filesystem::path& path);

}  // namespace runpat
