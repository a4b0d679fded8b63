#include "runpat/gait.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "runpat/common.hpp"
#include "runpat/spline.hpp"

namespace runpat {

std::array<Structure, kStanceStructures> stance_structures(Foot foot) {
  if (foot == Foot::L)
    return {Structure::ankle_L, Structure::knee_L, Structure::hip_L, Structure::foot_L,
            Structure::pelvis};
  return {Structure::ankle_R, Structure::knee_R, Structure::hip_R, Structure::foot_R,
          Structure::pelvis};
}

namespace {

Eigen::VectorXd moving_average(const Eigen::VectorXd& s, int window) {
  const int n = static_cast<int>(s.size());
  const int half = window / 2;
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - half);
    const int hi = std::min(n - 1, i + half);
    out(i) = s.segment(lo, hi - lo + 1).mean();
  }
  return out;
}

struct StanceCandidate {
  int td = 0;
  int to = 0;
};

// Stance intervals for one sign of the principal-component score: touch-down
// at the zero crossing of the score derivative preceding each score minimum,
// toe-off at the crossing bracketing the minimum itself.
std::vector<StanceCandidate> extract_stances(const Eigen::VectorXd& s, double rate,
                                             const GaitConfig& cfg) {
  const int n = static_cast<int>(s.size());
  std::vector<StanceCandidate> out;
  if (n < 5) return out;
  Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
  for (int i = 1; i + 1 < n; ++i) d(i) = 0.5 * (s(i + 1) - s(i - 1));

  auto crossing_frame = [&](int j) {
    const double denom = d(j) - d(j + 1);
    const double t = denom == 0 ? double(j) : j + d(j) / denom;
    return static_cast<int>(std::lround(t));
  };

  int last_to = -1;
  for (int m = 1; m + 1 < n; ++m) {
    if (!(s(m) < s(m - 1) && s(m) <= s(m + 1))) continue;
    int td = -1, to = -1;
    for (int j = m - 1; j >= 1; --j) {
      if (d(j) > 0 && d(j + 1) <= 0) {
        td = crossing_frame(j);
        break;
      }
    }
    for (int j = std::max(1, m - 1); j + 2 < n; ++j) {
      if (d(j) < 0 && d(j + 1) >= 0) {
        to = crossing_frame(j);
        break;
      }
    }
    if (td < 0 || to <= td) continue;
    td = std::max(td, 0);
    to = std::min(to, n - 1);
    if (td <= last_to) continue;
    const double dur = (to - td) / rate;
    if (dur < cfg.min_stance_s || dur > cfg.max_stance_s) continue;
    out.push_back({td, to});
    last_to = to;
  }
  return out;
}

double mean_stance_fraction(const std::vector<StanceCandidate>& st, double rate) {
  if (st.size() < 2) return 0;
  double stance = 0;
  for (const auto& c : st) stance += (c.to - c.td) / rate;
  stance /= static_cast<double>(st.size());
  double stride = 0;
  for (size_t i = 1; i < st.size(); ++i) stride += (st[i].td - st[i - 1].td) / rate;
  stride /= static_cast<double>(st.size() - 1);
  return stride > 0 ? stance / stride : 0;
}

std::vector<StanceCandidate> detect_foot(const AngleSeries& series, const GaitConfig& cfg,
                                         Foot foot) {
  const Eigen::MatrixXd& A = series.angles;
  const int n = static_cast<int>(A.rows());
  if (n < 2.0 * series.sample_rate)
    fail(Err::TooShort, "event detection needs at least 2 s of data, got " +
                            std::to_string(n / series.sample_rate) + " s on " +
                            to_string(foot == Foot::L ? Structure::foot_L : Structure::foot_R));
  Eigen::RowVector3d mu = A.colwise().mean();
  Eigen::MatrixXd centered = A.rowwise() - mu;
  Eigen::Matrix3d cov = centered.adjoint() * centered / double(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  if (es.eigenvalues()(2) < 1e-12)
    fail(Err::DegenerateSignal,
         std::string("no angular variation on ") +
             to_string(foot == Foot::L ? Structure::foot_L : Structure::foot_R));
  Eigen::VectorXd score = centered * es.eigenvectors().col(2);
  Eigen::VectorXd sm = moving_average(score, cfg.smoothing_window);

  auto pos = extract_stances(sm, series.sample_rate, cfg);
  auto neg = extract_stances(-sm, series.sample_rate, cfg);
  // Running stance occupies well under half the stride, so a candidate set
  // whose mean stance/stride fraction falls outside (0.15, 0.55) is the
  // inverted phase even if it yields more intervals.
  const double fp = mean_stance_fraction(pos, series.sample_rate);
  const double fn = mean_stance_fraction(neg, series.sample_rate);
  const bool pos_ok = fp > 0.15 && fp < 0.55;
  const bool neg_ok = fn > 0.15 && fn < 0.55;
  if (pos_ok != neg_ok) return pos_ok ? pos : neg;
  if (pos.size() != neg.size()) return pos.size() > neg.size() ? pos : neg;
  return std::abs(fn - 0.35) < std::abs(fp - 0.35) ? neg : pos;
}

}  // namespace

std::vector<GaitEvent> detect_events(const RunnerRecord& record, const GaitConfig& cfg) {
  if (record.events) {
    validate_events(*record.events, record.n_frames(), record.record_id);
    return *record.events;
  }
  std::vector<GaitEvent> events;
  for (Foot foot : {Foot::L, Foot::R}) {
    const Structure st = foot == Foot::L ? Structure::foot_L : Structure::foot_R;
    auto stances = detect_foot(record.series[static_cast<int>(st)], cfg, foot);
    if (stances.size() < 3)
      fail(Err::NoEventsFound, "record " + record.record_id + ": only " +
                                   std::to_string(stances.size()) + " stance phases on " +
                                   to_string(st) + " (need 3)");
    for (const auto& c : stances) {
      events.push_back({EventKind::touch_down, foot, c.td});
      events.push_back({EventKind::toe_off, foot, c.to});
    }
  }
  std::sort(events.begin(), events.end(), [](const GaitEvent& a, const GaitEvent& b) {
    if (a.frame_index != b.frame_index) return a.frame_index < b.frame_index;
    if (a.foot != b.foot) return a.foot < b.foot;
    return a.kind < b.kind;
  });
  validate_events(events, record.n_frames(), record.record_id);
  return events;
}

std::vector<StancePhase> segment_stances(const RunnerRecord& record,
                                         const std::vector<GaitEvent>& events,
                                         const GaitConfig& cfg) {
  validate_events(events, record.n_frames(), record.record_id);
  std::vector<StancePhase> out;
  for (Foot foot : {Foot::L, Foot::R}) {
    int td = -1;
    for (const auto& e : events) {
      if (e.foot != foot) continue;
      if (e.kind == EventKind::touch_down) {
        td = e.frame_index;
        continue;
      }
      const int to = e.frame_index;
      const int frames = to - td + 1;
      if (frames < cfg.min_stance_frames)
        fail(Err::TooShort, "record " + record.record_id + ": stance of " +
                                std::to_string(frames) + " frames at frame " +
                                std::to_string(td) + " (minimum " +
                                std::to_string(cfg.min_stance_frames) + ")");
      StancePhase ph;
      ph.foot = foot;
      ph.start_frame = td;
      ph.end_frame = to;
      ph.resampled.resize(kStanceSamples, kStanceStructures * 3);
      const auto structs = stance_structures(foot);
      for (int si = 0; si < kStanceStructures; ++si) {
        const AngleSeries& series = record.series[static_cast<int>(structs[si])];
        if (to >= series.angles.rows())
          fail(Err::InvariantViolation,
               "record " + record.record_id + ": event frame " + std::to_string(to) +
                   " beyond " + to_string(structs[si]) + " series of " +
                   std::to_string(series.angles.rows()) + " frames");
        for (int axis = 0; axis < 3; ++axis) {
          Eigen::VectorXd y = series.angles.block(td, axis, frames, 1);
          ph.resampled.col(si * 3 + axis) = resample_uniform(y, kStanceSamples);
        }
      }
      ph.duration = (to - td) / record.series[0].sample_rate;
      out.push_back(std::move(ph));
      td = -1;
    }
  }
  if (out.empty())
    fail(Err::NoPhases, "record " + record.record_id + ": no complete stance phases");
  std::sort(out.begin(), out.end(), [](const StancePhase& a, const StancePhase& b) {
    if (a.start_frame != b.start_frame) return a.start_frame < b.start_frame;
    return a.foot < b.foot;
  });
  return out;
}

namespace {

constexpr std::array<const char*, 9> kChannelLabels = {
    "x_mean", "x_upper", "x_lower", "y_mean", "y_upper",
    "y_lower", "z_mean", "z_upper", "z_lower"};

// Aggregate one structure row from (phase, source column block) pairs.
void fill_row(StanceTensor& tensor, int a,
              const std::vector<std::pair<const StancePhase*, int>>& sources) {
  for (int t = 0; t < kStanceSamples; ++t) {
    for (int axis = 0; axis < 3; ++axis) {
      double sum = 0, hi = -std::numeric_limits<double>::infinity(),
             lo = std::numeric_limits<double>::infinity();
      for (const auto& [ph, si] : sources) {
        const double v = ph->resampled(t, si * 3 + axis);
        sum += v;
        hi = std::max(hi, v);
        lo = std::min(lo, v);
      }
      const int base = a * 9 + axis * 3;
      tensor.data(t, base + 0) = sum / static_cast<double>(sources.size());
      tensor.data(t, base + 1) = hi;
      tensor.data(t, base + 2) = lo;
    }
  }
}

}  // namespace

void StanceTensor::validate() const {
  for (int t = 0; t < data.rows(); ++t)
    for (int a = 0; a < n_structures(); ++a)
      for (int axis = 0; axis < 3; ++axis) {
        const double mean = at(t, a, axis * 3);
        const double upper = at(t, a, axis * 3 + 1);
        const double lower = at(t, a, axis * 3 + 2);
        if (!(lower <= mean && mean <= upper))
          fail(Err::InvariantViolation,
               "envelope violation at t=" + std::to_string(t) + " structure " +
                   structure_labels[a]);
      }
}

StanceTensor build_stance_tensor(const std::vector<StancePhase>& phases, FootSel sel,
                                 bool pelvis_dup) {
  std::vector<const StancePhase*> left, right;
  for (const auto& ph : phases)
    (ph.foot == Foot::L ? left : right).push_back(&ph);

  auto require = [&](const std::vector<const StancePhase*>& v, const char* side) {
    if (v.empty()) fail(Err::NoPhases, std::string("no ") + side + " stance phases");
  };

  StanceTensor tensor;
  for (int c = 0; c < 9; ++c) tensor.channel_labels[c] = kChannelLabels[c];

  struct Row {
    std::string label;
    std::vector<std::pair<const StancePhase*, int>> sources;
  };
  std::vector<Row> rows;
  auto side_rows = [&](const std::vector<const StancePhase*>& v, const char* suffix) {
    const std::array<const char*, 4> names = {"ankle", "knee", "hip", "foot"};
    for (int si = 0; si < 4; ++si) {
      Row r;
      r.label = std::string(names[si]) + "_" + suffix;
      for (const auto* ph : v) r.sources.emplace_back(ph, si);
      rows.push_back(std::move(r));
    }
  };
  auto pelvis_row = [&](const std::vector<const StancePhase*>& v, std::string label) {
    Row r;
    r.label = std::move(label);
    for (const auto* ph : v) r.sources.emplace_back(ph, 4);
    rows.push_back(std::move(r));
  };

  if (sel == FootSel::L) {
    require(left, "left");
    side_rows(left, "L");
    pelvis_row(left, "pelvis");
  } else if (sel == FootSel::R) {
    require(right, "right");
    side_rows(right, "R");
    pelvis_row(right, "pelvis");
  } else {
    require(left, "left");
    require(right, "right");
    if (pelvis_dup) {
      side_rows(left, "L");
      pelvis_row(left, "pelvis_L");
      side_rows(right, "R");
      pelvis_row(right, "pelvis_R");
    } else {
      side_rows(left, "L");
      side_rows(right, "R");
      std::vector<const StancePhase*> all = left;
      all.insert(all.end(), right.begin(), right.end());
      pelvis_row(all, "pelvis");
    }
  }

  tensor.data.resize(kStanceSamples, static_cast<int>(rows.size()) * 9);
  for (size_t a = 0; a < rows.size(); ++a) {
    tensor.structure_labels.push_back(rows[a].label);
    fill_row(tensor, static_cast<int>(a), rows[a].sources);
  }
  tensor.validate();
  return tensor;
}

double SpatioTemporalSummary::mean_contact_time(Foot f) const {
  double sum = 0;
  int n = 0;
  for (const auto& [foot, t] : contact_times)
    if (foot == f) {
      sum += t;
      ++n;
    }
  if (n == 0)
    fail(Err::InsufficientEvents, std::string("no contact times for foot ") +
                                      (f == Foot::L ? "L" : "R"));
  return sum / n;
}

SpatioTemporalSummary spatiotemporal(const std::vector<GaitEvent>& events, double sample_rate,
                                     std::optional<double> treadmill_speed) {
  validate_events(events, std::numeric_limits<int>::max(), "event list");
  if (sample_rate <= 0) fail(Err::InvariantViolation, "sample rate must be positive");

  SpatioTemporalSummary out;
  std::vector<double> stride_times;
  for (Foot foot : {Foot::L, Foot::R}) {
    int prev_td = -1, td = -1;
    for (const auto& e : events) {
      if (e.foot != foot) continue;
      if (e.kind == EventKind::touch_down) {
        if (td >= 0) stride_times.push_back((e.frame_index - td) / sample_rate);
        prev_td = td;
        td = e.frame_index;
      } else if (td >= 0) {
        out.contact_times.emplace_back(foot, (e.frame_index - td) / sample_rate);
      }
    }
    (void)prev_td;
  }
  if (stride_times.empty() || out.contact_times.empty())
    fail(Err::InsufficientEvents,
         "need at least two touch-downs on one foot and one complete stance");

  const double stride_mean =
      std::accumulate(stride_times.begin(), stride_times.end(), 0.0) /
      static_cast<double>(stride_times.size());
  double stance_mean = 0;
  for (const auto& [f, t] : out.contact_times) stance_mean += t;
  stance_mean /= static_cast<double>(out.contact_times.size());

  out.stride_rate = 60.0 / stride_mean;
  out.stance_pct = stance_mean / stride_mean * 100.0;
  out.swing_pct = 100.0 - out.stance_pct;
  if (treadmill_speed) out.stride_length = *treadmill_speed * stride_mean;
  return out;
}

}  // namespace runpat
