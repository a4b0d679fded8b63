#include "runpat/features.hpp"

#include <unsupported/Eigen/FFT>
#include <algorithm>
#include <cmath>
#include <complex>
#include <iostream>

#include "runpat/common.hpp"
#include "runpat/csv.hpp"

namespace runpat {

std::string to_string(FeatureFamily f) {
  switch (f) {
    case FeatureFamily::spatiotemporal: return "spatiotemporal";
    case FeatureFamily::peak: return "peak";
    case FeatureFamily::excursion: return "excursion";
    case FeatureFamily::velocity_peak: return "velocity_peak";
    case FeatureFamily::pct_time: return "pct_time";
    case FeatureFamily::band_power: return "band_power";
    case FeatureFamily::demographic: return "demographic";
  }
  fail(Err::InvariantViolation, "bad feature family");
}

int FeatureSchema::index_of(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (defs[i].name == name) return i;
  fail(Err::UnknownFeature, "feature '" + name + "' is not in the schema");
}

std::vector<std::string> FeatureSchema::names() const {
  std::vector<std::string> out;
  out.reserve(defs.size());
  for (const auto& d : defs) out.push_back(d.name);
  return out;
}

bool FeatureSchema::operator==(const FeatureSchema& o) const {
  if (defs.size() != o.defs.size()) return false;
  for (size_t i = 0; i < defs.size(); ++i)
    if (defs[i].name != o.defs[i].name) return false;
  return true;
}

void FeatureVector::validate() const {
  if (!schema || values.size() != schema->size())
    fail(Err::SchemaMismatch, record_id + ": feature vector length " +
                                  std::to_string(values.size()) + " does not match schema");
  for (int i = 0; i < values.size(); ++i)
    if (!std::isfinite(values(i)))
      fail(Err::InvariantViolation,
           record_id + ": non-finite value for feature '" + schema->defs[i].name + "'");
}

double peak(const Eigen::VectorXd& series, double sign) {
  if (series.size() < 3) fail(Err::TooShort, "peak needs at least 3 samples");
  return (sign * series.array()).maxCoeff();
}

double excursion(const Eigen::VectorXd& series) {
  if (series.size() < 3) fail(Err::TooShort, "excursion needs at least 3 samples");
  return series.maxCoeff() - series.minCoeff();
}

double peak_velocity(const Eigen::VectorXd& series, double dt) {
  if (series.size() < 3) fail(Err::TooShort, "peak_velocity needs at least 3 samples");
  if (!(dt > 0)) fail(Err::InvariantViolation, "peak_velocity needs dt > 0");
  double best = 0;
  for (int i = 1; i + 1 < series.size(); ++i)
    best = std::max(best, std::abs(series(i + 1) - series(i - 1)) / (2.0 * dt));
  return best;
}

double pct_time_above(const Eigen::VectorXd& series, double threshold) {
  if (series.size() < 3) fail(Err::TooShort, "pct_time needs at least 3 samples");
  const auto n = static_cast<double>(series.size());
  return (series.array() > threshold).count() / n * 100.0;
}

BandPower band_power(const Eigen::VectorXd& series, double sample_rate) {
  if (!(sample_rate > 6.0))
    fail(Err::RateTooLow,
         "band powers need a sample rate above 6 Hz, got " + fmt_g9(sample_rate));
  const int n = static_cast<int>(series.size());
  if (n < 2.0 * sample_rate)
    fail(Err::TooShort, "band powers need at least 2 s of data, got " +
                            fmt_g9(n / sample_rate) + " s");

  std::vector<double> x(n);
  const double mu = series.mean();
  for (int i = 0; i < n; ++i) x[i] = series(i) - mu;

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, x);

  const double nyquist = sample_rate / 2.0;
  const double hf_hi = std::min(99.0, nyquist);
  BandPower bp;
  const int half = n / 2;
  for (int k = 0; k <= half; ++k) {
    double p = std::norm(spec[k]) / (double(n) * double(n));
    if (k != 0 && !(n % 2 == 0 && k == half)) p *= 2.0;  // one-sided fold
    const double f = k * sample_rate / n;
    if (f < 1.0)
      bp.lf += p;
    else if (f < 3.0)
      bp.mf += p;
    else if (f <= hf_hi + 1e-9)
      bp.hf += p;
  }
  return bp;
}

namespace {

constexpr int kAnkle = 0, kKnee = 1, kHip = 2, kFootSlot = 3, kPelvis = 4;

struct AngleFeature {
  const char* name;
  int slot;
  int axis;
  double dir;  // direction of the clinical extremum
};

constexpr AngleFeature kPeaks[] = {
    {"ankle_dorsiflexion_peak", kAnkle, 0, +1},
    {"ankle_eversion_peak", kAnkle, 1, +1},
    {"ankle_rotation_peak", kAnkle, 2, +1},
    {"knee_flexion_peak", kKnee, 0, +1},
    {"knee_abduction_peak", kKnee, 1, +1},
    {"knee_adduction_peak", kKnee, 1, -1},
    {"knee_rotation_peak", kKnee, 2, +1},
    {"hip_extension_peak", kHip, 0, -1},
    {"hip_adduction_peak", kHip, 1, +1},
    {"hip_rotation_peak", kHip, 2, +1},
    {"pelvis_drop_peak", kPelvis, 1, +1},
};

constexpr AngleFeature kExcursions[] = {
    {"pelvis_drop_excursion", kPelvis, 1, 0},
    {"ankle_eversion_excursion", kAnkle, 1, 0},
    {"ankle_rotation_excursion", kAnkle, 2, 0},
    {"knee_abduction_excursion", kKnee, 1, 0},
    {"knee_rotation_excursion", kKnee, 2, 0},
    {"hip_adduction_excursion", kHip, 1, 0},
    {"hip_rotation_excursion", kHip, 2, 0},
};

constexpr AngleFeature kVelocityPeaks[] = {
    {"ankle_eversion_velocity_peak", kAnkle, 1, 0},
    {"ankle_rotation_velocity_peak", kAnkle, 2, 0},
    {"knee_abduction_velocity_peak", kKnee, 1, 0},
    {"knee_rotation_velocity_peak", kKnee, 2, 0},
    {"hip_adduction_velocity_peak", kHip, 1, 0},
    {"hip_rotation_velocity_peak", kHip, 2, 0},
    {"pelvis_drop_velocity_peak", kPelvis, 1, 0},
};

// One side's view of a record: resampled mean curves plus the raw stance
// slices that velocity features are computed on (true dt, no resampling).
struct SideData {
  StanceTensor tensor;
  std::vector<const StancePhase*> phases;
};

Eigen::VectorXd mean_curve(const SideData& sd, int slot, int axis, double sign) {
  return sign * sd.tensor.data.col(slot * 9 + axis * 3);
}

double side_velocity_peak(const RunnerRecord& rec, const SideData& sd, int slot, int axis) {
  const double dt = 1.0 / rec.sample_rate();
  double sum = 0;
  for (const StancePhase* ph : sd.phases) {
    const auto structs = stance_structures(ph->foot);
    const auto& series = rec.series[static_cast<int>(structs[slot])];
    const int frames = ph->end_frame - ph->start_frame + 1;
    Eigen::VectorXd y = series.angles.block(ph->start_frame, axis, frames, 1);
    sum += peak_velocity(y, dt);
  }
  return sum / static_cast<double>(sd.phases.size());
}

constexpr const char* kAxisName[3] = {"x", "y", "z"};

}  // namespace

FeatureVector extract_features(const RunnerRecord& record,
                               const std::vector<StancePhase>& phases,
                               const SpatioTemporalSummary& summary,
                               const FeatureConfig& config) {
  std::vector<std::pair<Foot, SideData>> sides;
  auto add_side = [&](Foot f) {
    SideData sd;
    sd.tensor = build_stance_tensor(phases, f == Foot::L ? FootSel::L : FootSel::R);
    for (const auto& ph : phases)
      if (ph.foot == f) sd.phases.push_back(&ph);
    sides.emplace_back(f, std::move(sd));
  };
  if (config.side == FeatureSide::L || config.side == FeatureSide::average) add_side(Foot::L);
  if (config.side == FeatureSide::R || config.side == FeatureSide::average) add_side(Foot::R);

  auto schema = std::make_shared<FeatureSchema>();
  std::vector<double> values;
  auto emit = [&](std::string name, const char* unit, FeatureFamily fam, double v) {
    schema->defs.push_back({std::move(name), unit, fam});
    values.push_back(v);
  };
  // Feature computed per side, averaged when both sides are in play.
  auto emit_sided = [&](std::string name, const char* unit, FeatureFamily fam,
                        auto&& compute) {
    double sum = 0;
    for (const auto& [foot, sd] : sides) sum += compute(sd);
    emit(std::move(name), unit, fam, sum / static_cast<double>(sides.size()));
  };
  auto sign_of = [&](int slot, int axis) { return config.axis_sign[slot][axis]; };

  emit("stride_rate", "strides/min", FeatureFamily::spatiotemporal, summary.stride_rate);
  if (summary.stride_length)
    emit("stride_length", "m", FeatureFamily::spatiotemporal, *summary.stride_length);
  emit("stance_pct", "%", FeatureFamily::spatiotemporal, summary.stance_pct);
  emit("swing_pct", "%", FeatureFamily::spatiotemporal, summary.swing_pct);
  for (const auto& [foot, sd] : sides)
    emit(foot == Foot::L ? "stance_time_L" : "stance_time_R", "s",
         FeatureFamily::spatiotemporal, summary.mean_contact_time(foot));

  for (const auto& pf : kPeaks)
    emit_sided(pf.name, "deg", FeatureFamily::peak, [&](const SideData& sd) {
      return peak(mean_curve(sd, pf.slot, pf.axis, sign_of(pf.slot, pf.axis)), pf.dir);
    });
  emit_sided("foot_progression_angle", "deg", FeatureFamily::peak, [&](const SideData& sd) {
    return mean_curve(sd, kFootSlot, 2, sign_of(kFootSlot, 2)).mean();
  });

  for (const auto& ef : kExcursions)
    emit_sided(ef.name, "deg", FeatureFamily::excursion, [&](const SideData& sd) {
      return excursion(mean_curve(sd, ef.slot, ef.axis, 1.0));
    });
  // Transverse-plane foot excursion over the final fifth of stance.
  emit_sided("heel_whip_excursion", "deg", FeatureFamily::excursion, [&](const SideData& sd) {
    const int from = static_cast<int>(std::lround(0.8 * (kStanceSamples - 1)));
    Eigen::VectorXd tail = mean_curve(sd, kFootSlot, 2, 1.0).tail(kStanceSamples - from);
    return excursion(tail);
  });
  if (config.vertical_oscillation)
    emit_sided("vertical_oscillation", "deg", FeatureFamily::excursion,
               [&](const SideData& sd) { return excursion(mean_curve(sd, kPelvis, 0, 1.0)); });

  for (const auto& vf : kVelocityPeaks)
    emit_sided(vf.name, "deg/s", FeatureFamily::velocity_peak, [&](const SideData& sd) {
      return side_velocity_peak(record, sd, vf.slot, vf.axis);
    });

  emit_sided("pct_time_ankle_eversion", "%", FeatureFamily::pct_time, [&](const SideData& sd) {
    return pct_time_above(mean_curve(sd, kAnkle, 1, sign_of(kAnkle, 1)),
                          config.eversion_threshold_deg);
  });
  // First/last everted sample as % of stance; 100/0 encodes "never everted".
  auto onset_offset = [&](const SideData& sd) {
    Eigen::VectorXd ev = mean_curve(sd, kAnkle, 1, sign_of(kAnkle, 1));
    int first = -1, last = -1;
    for (int t = 0; t < kStanceSamples; ++t)
      if (ev(t) > config.eversion_threshold_deg) {
        if (first < 0) first = t;
        last = t;
      }
    const double denom = kStanceSamples - 1;
    return std::pair<double, double>{first < 0 ? 100.0 : first / denom * 100.0,
                                     last < 0 ? 0.0 : last / denom * 100.0};
  };
  emit_sided("pronation_onset_pct", "%", FeatureFamily::pct_time,
             [&](const SideData& sd) { return onset_offset(sd).first; });
  emit_sided("pronation_offset_pct", "%", FeatureFamily::pct_time,
             [&](const SideData& sd) { return onset_offset(sd).second; });

  const double rate = record.sample_rate();
  const bool bands_ok =
      rate > 6.0 && record.series[0].angles.rows() >= 2.0 * rate;
  if (bands_ok) {
    for (int s = 0; s < kNumStructures; ++s)
      for (int axis = 0; axis < 3; ++axis) {
        const BandPower bp =
            band_power(record.series[s].angles.col(axis), rate);
        const std::string tail = std::string("_") +
                                 to_string(static_cast<Structure>(s)) + "_" +
                                 kAxisName[axis];
        emit("bp_lf" + tail, "deg^2", FeatureFamily::band_power, bp.lf);
        emit("bp_mf" + tail, "deg^2", FeatureFamily::band_power, bp.mf);
        emit("bp_hf" + tail, "deg^2", FeatureFamily::band_power, bp.hf);
      }
  } else {
    std::cerr << "[features] record " << record.record_id
              << ": band powers omitted (rate " << fmt_g9(rate) << " Hz, "
              << record.series[0].angles.rows() << " frames)\n";
  }

  emit("age", "years", FeatureFamily::demographic, record.subject.age);
  emit("height", "m", FeatureFamily::demographic, record.subject.height);
  emit("weight", "kg", FeatureFamily::demographic, record.subject.weight);
  emit("sex_F", "", FeatureFamily::demographic, record.subject.sex == Sex::F ? 1.0 : 0.0);
  emit("sex_M", "", FeatureFamily::demographic, record.subject.sex == Sex::M ? 1.0 : 0.0);
  emit("leg_L", "", FeatureFamily::demographic,
       record.subject.dominant_leg == Leg::L ? 1.0 : 0.0);
  emit("leg_R", "", FeatureFamily::demographic,
       record.subject.dominant_leg == Leg::R ? 1.0 : 0.0);

  FeatureVector fv;
  fv.schema = schema;
  fv.values = Eigen::Map<Eigen::VectorXd>(values.data(), values.size());
  fv.record_id = record.record_id;
  fv.label = record.label;
  fv.validate();
  return fv;
}

std::pair<Eigen::MatrixXd, ScalerParams> standardize(const Eigen::MatrixXd& train,
                                                     const Eigen::MatrixXd& apply) {
  if (train.rows() == 0) fail(Err::EmptyResult, "cannot fit a scaler on an empty train set");
  if (train.cols() != apply.cols())
    fail(Err::SchemaMismatch, "scaler fitted on " + std::to_string(train.cols()) +
                                  " columns, applied to " + std::to_string(apply.cols()));
  ScalerParams p;
  p.mean = train.colwise().mean();
  p.std.resize(train.cols());
  p.scaled.resize(train.cols());
  for (int j = 0; j < train.cols(); ++j) {
    const double var = (train.col(j).array() - p.mean(j)).square().mean();
    p.std(j) = std::sqrt(var);
    p.scaled[j] = p.std(j) >= 1e-12 ? 1 : 0;
  }
  return {apply_scaler(p, apply), p};
}

Eigen::MatrixXd apply_scaler(const ScalerParams& params, const Eigen::MatrixXd& m) {
  if (m.cols() != params.mean.size())
    fail(Err::SchemaMismatch, "scaler fitted on " + std::to_string(params.mean.size()) +
                                  " columns, applied to " + std::to_string(m.cols()));
  Eigen::MatrixXd out = m;
  for (int j = 0; j < m.cols(); ++j)
    if (params.scaled[j])
      out.col(j) = (m.col(j).array() - params.mean(j)) / params.std(j);
  return out;
}

Eigen::MatrixXd feature_matrix(const std::vector<FeatureVector>& rows) {
  if (rows.empty()) fail(Err::EmptyResult, "no feature vectors to stack");
  const auto& schema = *rows[0].schema;
  Eigen::MatrixXd out(rows.size(), schema.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (!(*rows[i].schema == schema))
      fail(Err::SchemaMismatch, "record " + rows[i].record_id +
                                    " has a different feature schema than " + rows[0].record_id);
    out.row(i) = rows[i].values;
  }
  return out;
}

}  // namespace runpat
