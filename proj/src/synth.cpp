#include "runpat/synth.hpp"

#include <nlohmann/json.hpp>
#include <algorithm>
#include <cmath>
#include <fstream>

#include "runpat/common.hpp"
#include "runpat/csv.hpp"

namespace runpat {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) fail(Err::InvariantViolation, std::string(what) + " must be finite");
}

// One foot's stride timeline: boundary (touch-down) times plus the period of
// the stride starting at each boundary.
struct Timeline {
  std::vector<double> td;      // touch-down times, seconds
  std::vector<double> period;  // stride period starting at td[i]

  // Stride phase in [0,1) at time t; periodic extension beyond both ends.
  double phase(double t) const {
    if (t < td.front()) {
      double ph = 1.0 + (t - td.front()) / period.front();
      return ph - std::floor(ph);
    }
    size_t i = td.size() - 1;
    for (size_t k = 1; k < td.size(); ++k)
      if (t < td[k]) {
        i = k - 1;
        break;
      }
    double ph = (t - td[i]) / period[i];
    return ph - std::floor(ph);
  }
};

// Stance piece falls from +1 (touch-down) to -1 (toe-off); swing rises back.
// Each extreme sits inside a symmetric parabolic cap of half-width kEventCap
// (cycle fraction, wider than an 11-frame smoothing window at 100 Hz) so a
// symmetric filter cannot shift it; monotone cubic connectors join the caps
// C1-continuously.
constexpr double kEventCap = 0.09;
constexpr double kCapCurvature = 60.0;

double hermite01(double y0, double m0, double y1, double m1, double u) {
  const double u2 = u * u, u3 = u2 * u;
  return (2 * u3 - 3 * u2 + 1) * y0 + (u3 - 2 * u2 + u) * m0 + (3 * u2 - 2 * u3) * y1 +
         (u3 - u2) * m1;
}

double foot_wave(double ph, double sf) {
  const double d = kEventCap;
  const double edge = 1.0 - 0.5 * kCapCurvature * d * d;  // wave value at a cap edge
  const double slope = kCapCurvature * d;                 // |dy/dph| there
  if (ph <= d) return 1.0 - 0.5 * kCapCurvature * ph * ph;
  if (ph >= 1.0 - d) {
    const double q = 1.0 - ph;
    return 1.0 - 0.5 * kCapCurvature * q * q;
  }
  if (std::abs(ph - sf) <= d) {
    const double q = ph - sf;
    return -1.0 + 0.5 * kCapCurvature * q * q;
  }
  if (ph < sf) {  // falling connector across mid-stance
    const double len = sf - 2 * d;
    return hermite01(edge, -slope * len, -edge, -slope * len, (ph - d) / len);
  }
  const double len = 1.0 - sf - 2 * d;  // rising connector across mid-swing
  return hermite01(-edge, slope * len, edge, slope * len, (ph - sf - d) / len);
}

// Knee flexion: bump peaking at `peak` mid-stance, lower bump in swing.
double knee_wave(double ph, double sf, double peak) {
  if (ph <= sf) {
    const double s = std::sin(kPi * ph / sf);
    return peak * s * s;
  }
  const double s = std::sin(kPi * (ph - sf) / (1.0 - sf));
  return 0.55 * peak * s * s;
}

}  // namespace

void SynthSpec::validate() const {
  if (n_subjects < 1) fail(Err::InvariantViolation, "n_subjects must be >= 1");
  if (records_per_subject < 1)
    fail(Err::InvariantViolation, "records_per_subject must be >= 1");
  if (!(sample_rate > 0)) fail(Err::InvariantViolation, "sample_rate must be > 0");
  if (!(period_s > 0)) fail(Err::InvariantViolation, "period_s must be > 0");
  if (jitter < 0 || jitter > 0.2)
    fail(Err::InvariantViolation, "jitter must be in [0, 0.2]");
  if (n_strides < 4) fail(Err::InvariantViolation, "n_strides must be >= 4");
  if (noise_sigma < 0) fail(Err::InvariantViolation, "noise_sigma must be >= 0");
  if (injured_label == InjuryLabel::healthy)
    fail(Err::InvariantViolation, "injured_label must name an injury class");
  for (const auto& e : effects) {
    if (!(e.stance_fraction > 0.2 && e.stance_fraction < 0.5))
      fail(Err::InvariantViolation, "stance_fraction must be in (0.2, 0.5), got " +
                                        fmt_g9(e.stance_fraction));
    check_finite(e.period_scale, "period_scale");
    check_finite(e.mf_amp, "mf_amp");
    check_finite(e.hf_amp, "hf_amp");
    check_finite(e.knee_peak, "knee_peak");
    if (!(e.period_scale > 0)) fail(Err::InvariantViolation, "period_scale must be > 0");
  }
}

SynthResult synth(const SynthSpec& spec) {
  spec.validate();
  SynthResult out;

  for (int cls = 0; cls < 2; ++cls) {
    const ClassEffects& fx = spec.effects[cls];
    const char prefix = cls == 0 ? 'H' : (spec.injured_label == InjuryLabel::ITBS ? 'I' : 'P');
    for (int si = 0; si < spec.n_subjects; ++si) {
      RngStream subj_rng(derive_seed(spec.seed, "subject", cls * 1000000 + si));
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%c%03d", prefix, si + 1);
      SubjectMeta meta;
      meta.subject_id = buf;
      meta.age = 20.0 + 25.0 * subj_rng.uniform01();
      meta.height = 1.55 + 0.40 * subj_rng.uniform01();
      meta.weight = 50.0 + 40.0 * subj_rng.uniform01();
      meta.sex = subj_rng.uniform01() < 0.5 ? Sex::F : Sex::M;
      meta.dominant_leg = subj_rng.uniform01() < 0.85 ? Leg::R : Leg::L;
      const double subj_period = 1.0 + 0.04 * (2.0 * subj_rng.uniform01() - 1.0);
      const double subj_amp = 0.95 + 0.1 * subj_rng.uniform01();

      for (int ri = 0; ri < spec.records_per_subject; ++ri) {
        const int global =
            (cls * spec.n_subjects + si) * spec.records_per_subject + ri;
        RngStream rng(derive_seed(spec.seed, "record", global));

        const double sf = fx.stance_fraction;
        const int n = spec.n_strides;
        std::vector<double> periods(n);
        for (int i = 0; i < n; ++i)
          periods[i] = spec.period_s * fx.period_scale * subj_period *
                       (1.0 + spec.jitter * (2.0 * rng.uniform01() - 1.0));

        Timeline left, right;
        left.td.resize(n);
        left.period = periods;
        left.td[0] = 0.5 * (1.0 - sf) * periods[0];
        for (int i = 1; i < n; ++i) left.td[i] = left.td[i - 1] + periods[i - 1];
        for (int i = 0; i + 1 < n; ++i) {
          right.td.push_back(left.td[i] + 0.5 * periods[i]);
          right.period.push_back(periods[i]);
        }
        const double t_end =
            left.td[n - 1] + sf * periods[n - 1] + 0.5 * (1.0 - sf) * periods[n - 1];
        const int frames = static_cast<int>(std::floor(t_end * spec.sample_rate));

        RunnerRecord rec;
        rec.record_id = std::string(buf) + "_r" + std::to_string(ri);
        rec.subject = meta;
        rec.label = cls == 0 ? InjuryLabel::healthy : spec.injured_label;
        rec.treadmill_speed = spec.treadmill_speed;

        for (int s = 0; s < kNumStructures; ++s) {
          rec.series[s].structure = static_cast<Structure>(s);
          rec.series[s].sample_rate = spec.sample_rate;
          rec.series[s].angles.resize(frames, 3);
        }

        for (int k = 0; k < frames; ++k) {
          const double t = k / spec.sample_rate;
          const double pl = left.phase(t);
          const double pr = right.phase(t);
          auto& S = rec.series;
          auto set = [&](Structure st, double x, double y, double z) {
            S[static_cast<int>(st)].angles.row(k) << x, y, z;
          };
          auto foot_block = [&](double ph, Structure foot, Structure ankle, Structure knee,
                                Structure hip) {
            // Keep the sagittal stride wave dominant so the first principal
            // component of the foot block stays aligned with it.
            set(foot, 15.0 * subj_amp * foot_wave(ph, sf),
                1.2 * subj_amp * std::cos(2 * kPi * ph + 0.7),
                1.5 * subj_amp * std::cos(2 * kPi * ph + 1.9) +
                    0.6 * std::cos(4 * kPi * ph + 0.3));
            set(ankle,
                8.0 * subj_amp * std::cos(2 * kPi * ph + 0.5) +
                    3.0 * std::cos(4 * kPi * ph + 1.2),
                5.0 * std::sin(2 * kPi * ph) + 2.0 * std::sin(4 * kPi * ph + 0.4) +
                    fx.mf_amp * std::sin(2 * kPi * 2.0 * t) +
                    fx.hf_amp * std::sin(2 * kPi * 6.0 * t),
                3.0 * subj_amp * std::cos(2 * kPi * ph + 2.1) +
                    1.0 * std::cos(6 * kPi * ph + 0.9));
            set(knee, knee_wave(ph, sf, fx.knee_peak),
                4.0 * subj_amp * std::cos(2 * kPi * ph + 0.2) +
                    1.5 * std::cos(4 * kPi * ph + 2.5),
                2.5 * subj_amp * std::cos(2 * kPi * ph + 1.4));
            set(hip,
                20.0 * subj_amp * std::cos(2 * kPi * ph + 0.1) +
                    5.0 * std::cos(4 * kPi * ph + 0.6),
                6.0 * subj_amp * std::sin(2 * kPi * ph + 0.3) +
                    2.0 * std::sin(4 * kPi * ph + 1.8),
                4.0 * subj_amp * std::cos(2 * kPi * ph + 2.8) +
                    1.5 * std::cos(6 * kPi * ph + 1.1));
          };
          foot_block(pl, Structure::foot_L, Structure::ankle_L, Structure::knee_L,
                     Structure::hip_L);
          foot_block(pr, Structure::foot_R, Structure::ankle_R, Structure::knee_R,
                     Structure::hip_R);
          set(Structure::pelvis, 3.0 * subj_amp * std::cos(4 * kPi * pl + 0.9),
              5.0 * subj_amp * std::sin(2 * kPi * pl + 0.5) +
                  2.0 * std::sin(4 * kPi * pl + 1.3),
              4.0 * subj_amp * std::cos(2 * kPi * pl + 1.7));
        }

        if (spec.noise_sigma > 0)
          for (int s = 0; s < kNumStructures; ++s)
            for (int k = 0; k < frames; ++k)
              for (int a = 0; a < 3; ++a)
                rec.series[s].angles(k, a) += spec.noise_sigma * rng.normal();

        SynthRecordTruth truth;
        truth.record_id = rec.record_id;
        truth.cls = cls;
        truth.stance_fraction = sf;
        truth.period_s = spec.period_s * fx.period_scale * subj_period;
        truth.knee_peak = fx.knee_peak;
        truth.mf_amp = fx.mf_amp;
        truth.hf_amp = fx.hf_amp;
        auto add_events = [&](const Timeline& tl, Foot foot) {
          for (size_t i = 0; i < tl.td.size(); ++i) {
            const int td = static_cast<int>(std::lround(tl.td[i] * spec.sample_rate));
            const int to = static_cast<int>(
                std::lround((tl.td[i] + sf * tl.period[i]) * spec.sample_rate));
            truth.events.push_back({EventKind::touch_down, foot, td});
            truth.events.push_back({EventKind::toe_off, foot, to});
          }
        };
        add_events(left, Foot::L);
        add_events(right, Foot::R);
        std::sort(truth.events.begin(), truth.events.end(),
                  [](const GaitEvent& a, const GaitEvent& b) {
                    if (a.frame_index != b.frame_index) return a.frame_index < b.frame_index;
                    if (a.foot != b.foot) return a.foot < b.foot;
                    return a.kind < b.kind;
                  });
        if (spec.embed_events) rec.events = truth.events;

        rec.validate();
        out.dataset.records.push_back(std::move(rec));
        out.truth.records.push_back(std::move(truth));
      }
    }
  }

  out.truth.expected_stance_pct = {100.0 * spec.effects[0].stance_fraction,
                                   100.0 * spec.effects[1].stance_fraction};
  out.truth.stance_pct_threshold =
      0.5 * (out.truth.expected_stance_pct[0] + out.truth.expected_stance_pct[1]);
  return out;
}

void save_truth(const SynthTruth& truth, const std::filesystem::path& path) {
  nlohmann::json j;
  j["certificate"] = {{"feature", "stance_pct"},
                      {"threshold", truth.stance_pct_threshold},
                      {"expected", truth.expected_stance_pct}};
  j["records"] = nlohmann::json::array();
  for (const auto& r : truth.records) {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : r.events)
      ev.push_back({{"kind", to_string(e.kind)},
                    {"foot", e.foot == Foot::L ? "L" : "R"},
                    {"frame", e.frame_index}});
    j["records"].push_back({{"record_id", r.record_id},
                            {"class", r.cls},
                            {"stance_fraction", r.stance_fraction},
                            {"period_s", r.period_s},
                            {"knee_peak", r.knee_peak},
                            {"mf_amp", r.mf_amp},
                            {"hf_amp", r.hf_amp},
                            {"events", ev}});
  }
  std::ofstream f(path);
  if (!f) fail(Err::MissingFile, "cannot write " + path.string());
  f << j.dump(2) << "\n";
}

SynthTruth load_truth(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(Err::MissingFile, "cannot read " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Err::SchemaMismatch, path.string() + ": " + e.what());
  }
  SynthTruth out;
  try {
    out.stance_pct_threshold = j.at("certificate").at("threshold").get<double>();
    const auto exp = j.at("certificate").at("expected");
    out.expected_stance_pct = {exp.at(0).get<double>(), exp.at(1).get<double>()};
    for (const auto& r : j.at("records")) {
      SynthRecordTruth t;
      t.record_id = r.at("record_id").get<std::string>();
      t.cls = r.at("class").get<int>();
      t.stance_fraction = r.at("stance_fraction").get<double>();
      t.period_s = r.at("period_s").get<double>();
      t.knee_peak = r.at("knee_peak").get<double>();
      t.mf_amp = r.at("mf_amp").get<double>();
      t.hf_amp = r.at("hf_amp").get<double>();
      for (const auto& e : r.at("events")) {
        GaitEvent ev;
        ev.kind = event_kind_from_string(e.at("kind").get<std::string>());
        ev.foot = e.at("foot").get<std::string>() == "L" ? Foot::L : Foot::R;
        ev.frame_index = e.at("frame").get<int>();
        t.events.push_back(ev);
      }
      out.records.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Err::SchemaMismatch, path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace runpat
