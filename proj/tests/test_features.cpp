#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "runpat/common.hpp"
#include "runpat/features.hpp"
#include "runpat/gait.hpp"
#include "runpat/synth.hpp"

using namespace runpat;

TEST_CASE("primitive reductions") {
  Eigen::VectorXd s(3);
  s << 0, 5, 3;
  CHECK(peak(s) == doctest::Approx(5).epsilon(1e-12));
  CHECK(excursion(s) == doctest::Approx(5).epsilon(1e-12));

  Eigen::VectorXd flat = Eigen::VectorXd::Constant(10, 4.0);
  CHECK(excursion(flat) == doctest::Approx(0).epsilon(1e-12));
  CHECK(peak_velocity(flat, 0.01) == doctest::Approx(0).epsilon(1e-12));

  // signed extremum: most-negative value via dir = -1
  Eigen::VectorXd t(4);
  t << -7, 2, -3, 1;
  CHECK(peak(t, -1.0) == doctest::Approx(7).epsilon(1e-12));

  Eigen::VectorXd two(2);
  two << 0, 1;
  CHECK_THROWS_AS(peak(two), Error);
}

TEST_CASE("peak angular velocity of a sine matches the analytic derivative") {
  const double dt = 0.01;
  const int n = 101;
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y(i) = 10.0 * std::sin(2 * M_PI * i * dt);
  const double v = peak_velocity(y, dt);
  CHECK(std::abs(v - 20 * M_PI) / (20 * M_PI) < 0.01);
}

TEST_CASE("pct_time_above counts the sample fraction") {
  Eigen::VectorXd s(5);
  s << 1, -1, 2, -2, 3;
  CHECK(pct_time_above(s, 0.0) == doctest::Approx(60.0).epsilon(1e-12));
  CHECK(pct_time_above(s, 10.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(pct_time_above(s, -10.0) == doctest::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("band power: constant, pure tone, Parseval") {
  Eigen::VectorXd flat = Eigen::VectorXd::Constant(500, 3.25);
  BandPower zero = band_power(flat, 50.0);
  CHECK(zero.lf == doctest::Approx(0).epsilon(1e-15));
  CHECK(zero.mf == doctest::Approx(0).epsilon(1e-15));
  CHECK(zero.hf == doctest::Approx(0).epsilon(1e-15));

  const int n = 2000;  // 10 s at 200 Hz
  Eigen::VectorXd tone(n);
  for (int i = 0; i < n; ++i) tone(i) = std::sin(2 * M_PI * 2.0 * i / 200.0);
  BandPower bp = band_power(tone, 200.0);
  CHECK(std::abs(bp.mf - 0.5) < 1e-3);
  CHECK(bp.lf < 1e-3);
  CHECK(bp.hf < 1e-3);

  RngStream rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const int len = 150 + static_cast<int>(rng.uniform_int(400));
    Eigen::VectorXd y(len);
    for (int i = 0; i < len; ++i) y(i) = rng.normal() * 4 + 2;
    BandPower p = band_power(y, 50.0);  // Nyquist 25 < 99: bands cover everything
    const double mean = y.mean();
    const double ms = (y.array() - mean).square().mean();
    CHECK(std::abs(p.lf + p.mf + p.hf - ms) <= 1e-9 * ms);
    CHECK(p.lf >= 0);
    CHECK(p.mf >= 0);
    CHECK(p.hf >= 0);
  }
}

TEST_CASE("band power rejects rates at or below 6 Hz") {
  Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(40, 0, 1);
  try {
    band_power(y, 5.0);
    FAIL("expected RateTooLow");
  } catch (const Error& e) {
    CHECK(e.code() == Err::RateTooLow);
  }
}

namespace {

struct Extracted {
  FeatureVector fv;
  std::shared_ptr<const FeatureSchema> schema;

  double operator[](const std::string& name) const {
    return fv.values(schema->index_of(name));
  }
};

Extracted features_of(const RunnerRecord& rec, const std::vector<StancePhase>& phases,
                      const FeatureConfig& cfg = {}) {
  std::vector<GaitEvent> events = detect_events(rec);
  SpatioTemporalSummary summary =
      spatiotemporal(events, rec.sample_rate(), rec.treadmill_speed);
  Extracted out{extract_features(rec, phases, summary, cfg), nullptr};
  out.schema = out.fv.schema;
  return out;
}

}  // namespace

TEST_CASE("generator knee-flexion peak and demographics pass through") {
  SynthSpec spec;
  spec.n_subjects = 1;
  spec.records_per_subject = 1;
  spec.n_strides = 10;
  spec.jitter = 0.0;
  spec.seed = 17;
  spec.effects[0].knee_peak = 45.0;
  spec.effects[1].knee_peak = 45.0;
  SynthResult res = synth(spec);

  for (const auto& rec : res.dataset.records) {
    std::vector<GaitEvent> events = detect_events(rec);
    std::vector<StancePhase> phases = segment_stances(rec, events);
    Extracted ex = features_of(rec, phases);
    CHECK(std::abs(ex["knee_flexion_peak"] - 45.0) < 0.5);
    CHECK(ex["age"] == doctest::Approx(rec.subject.age).epsilon(1e-12));
    CHECK(ex["height"] == doctest::Approx(rec.subject.height).epsilon(1e-12));
    CHECK(ex["sex_F"] + ex["sex_M"] <= 1.0);
    CHECK(ex["stance_pct"] + ex["swing_pct"] == doctest::Approx(100.0).epsilon(1e-9));
    ex.fv.validate();
  }
}

TEST_CASE("duplicating every phase changes no feature") {
  SynthSpec spec;
  spec.n_subjects = 1;
  spec.records_per_subject = 1;
  spec.n_strides = 8;
  spec.seed = 23;
  SynthResult res = synth(spec);
  const RunnerRecord& rec = res.dataset.records.front();

  std::vector<GaitEvent> events = detect_events(rec);
  std::vector<StancePhase> phases = segment_stances(rec, events);
  std::vector<StancePhase> doubled = phases;
  doubled.insert(doubled.end(), phases.begin(), phases.end());

  SpatioTemporalSummary summary =
      spatiotemporal(events, rec.sample_rate(), rec.treadmill_speed);
  FeatureVector a = extract_features(rec, phases, summary);
  FeatureVector b = extract_features(rec, doubled, summary);
  REQUIRE(a.values.size() == b.values.size());
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("feature extraction is bit-stable across replays") {
  SynthSpec spec;
  spec.n_subjects = 1;
  spec.records_per_subject = 1;
  spec.n_strides = 8;
  spec.seed = 29;
  SynthResult res = synth(spec);
  const RunnerRecord& rec = res.dataset.records.front();
  std::vector<GaitEvent> events = detect_events(rec);
  std::vector<StancePhase> phases = segment_stances(rec, events);
  SpatioTemporalSummary summary =
      spatiotemporal(events, rec.sample_rate(), rec.treadmill_speed);
  FeatureVector a = extract_features(rec, phases, summary);
  FeatureVector b = extract_features(rec, phases, summary);
  CHECK(a.values == b.values);
  CHECK(a.schema->names() == b.schema->names());
}

TEST_CASE("schema order is stable and names unique") {
  SynthSpec spec;
  spec.n_subjects = 1;
  spec.records_per_subject = 1;
  spec.n_strides = 8;
  spec.seed = 31;
  SynthResult res = synth(spec);
  const RunnerRecord& rec = res.dataset.records.front();
  std::vector<GaitEvent> events = detect_events(rec);
  std::vector<StancePhase> phases = segment_stances(rec, events);
  SpatioTemporalSummary summary =
      spatiotemporal(events, rec.sample_rate(), rec.treadmill_speed);
  FeatureVector fv = extract_features(rec, phases, summary);

  std::set<std::string> seen;
  for (const auto& def : fv.schema->defs) CHECK(seen.insert(def.name).second);
  // the catalog leads with spatio-temporal values and ends with demographics
  CHECK(fv.schema->defs.front().family == FeatureFamily::spatiotemporal);
  CHECK(fv.schema->defs.back().family == FeatureFamily::demographic);
  CHECK(fv.schema->index_of("stride_rate") == 0);
  CHECK_THROWS_AS(fv.schema->index_of("no_such_feature"), Error);
}

TEST_CASE("standardization moments and degenerate columns") {
  Eigen::MatrixXd train(2, 2);
  train << 1, 5, 3, 5;  // col 0: mean 2, std 1; col 1 constant
  Eigen::MatrixXd apply(1, 2);
  apply << 4, 5;
  auto [scaled, params] = standardize(train, apply);
  CHECK(scaled(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(scaled(0, 1) == doctest::Approx(5.0).epsilon(1e-12));  // passthrough
  CHECK(params.scaled[0] == 1);
  CHECK(params.scaled[1] == 0);

  RngStream rng(37);
  Eigen::MatrixXd X(40, 6);
  for (long i = 0; i < X.size(); ++i) X.data()[i] = rng.normal() * 3 + 1;
  auto [Z, p2] = standardize(X, X);
  for (int c = 0; c < 6; ++c) {
    const double m = Z.col(c).mean();
    const double sd = std::sqrt((Z.col(c).array() - m).square().mean());
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(sd - 1) < 1e-9);
  }
}
