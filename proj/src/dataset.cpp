#include "runpat/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "runpat/csv.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace runpat {

namespace {

constexpr const char* kStructureNames[kNumStructures] = {
    "ankle_L", "ankle_R", "knee_L", "knee_R", "hip_L", "hip_R", "foot_L", "foot_R", "pelvis"};

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Err::MissingFile, "cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::parse_error& e) {
    fail(Err::SchemaMismatch, path + ": " + e.what());
  }
  return j;
}

}  // namespace

const char* to_string(Structure s) { return kStructureNames[static_cast<int>(s)]; }

Structure structure_from_string(const std::string& s) {
  for (int i = 0; i < kNumStructures; ++i)
    if (s == kStructureNames[i]) return static_cast<Structure>(i);
  fail(Err::SchemaMismatch, "unknown structure '" + s + "'");
}

const char* to_string(Sex s) {
  switch (s) {
    case Sex::F: return "F";
    case Sex::M: return "M";
    default: return "other";
  }
}
const char* to_string(Leg l) {
  switch (l) {
    case Leg::L: return "L";
    case Leg::R: return "R";
    default: return "unknown";
  }
}
const char* to_string(InjuryLabel l) {
  switch (l) {
    case InjuryLabel::healthy: return "healthy";
    case InjuryLabel::PFPS: return "PFPS";
    default: return "ITBS";
  }
}
const char* to_string(Foot f) { return f == Foot::L ? "L" : "R"; }
const char* to_string(EventKind k) { return k == EventKind::touch_down ? "touch_down" : "toe_off"; }
const char* to_string(Task t) {
  switch (t) {
    case Task::PFPS_ITBS_vs_H: return "PFPS_ITBS";
    case Task::PFPS_vs_H: return "PFPS";
    default: return "ITBS";
  }
}

Sex sex_from_string(const std::string& s) {
  if (s == "F") return Sex::F;
  if (s == "M") return Sex::M;
  if (s == "other") return Sex::other;
  fail(Err::SchemaMismatch, "unknown sex '" + s + "'");
}
Leg leg_from_string(const std::string& s) {
  if (s == "L") return Leg::L;
  if (s == "R") return Leg::R;
  if (s == "unknown") return Leg::unknown;
  fail(Err::SchemaMismatch, "unknown leg '" + s + "'");
}
InjuryLabel label_from_string(const std::string& s) {
  if (s == "healthy") return InjuryLabel::healthy;
  if (s == "PFPS") return InjuryLabel::PFPS;
  if (s == "ITBS") return InjuryLabel::ITBS;
  fail(Err::SchemaMismatch, "unknown label '" + s + "'");
}
Foot foot_from_string(const std::string& s) {
  if (s == "L") return Foot::L;
  if (s == "R") return Foot::R;
  fail(Err::SchemaMismatch, "unknown foot '" + s + "'");
}
EventKind event_kind_from_string(const std::string& s) {
  if (s == "touch_down") return EventKind::touch_down;
  if (s == "toe_off") return EventKind::toe_off;
  fail(Err::SchemaMismatch, "unknown event kind '" + s + "'");
}
Task task_from_string(const std::string& s) {
  if (s == "PFPS_ITBS" || s == "PFPS_ITBS_vs_H") return Task::PFPS_ITBS_vs_H;
  if (s == "PFPS" || s == "PFPS_vs_H") return Task::PFPS_vs_H;
  if (s == "ITBS" || s == "ITBS_vs_H") return Task::ITBS_vs_H;
  fail(Err::UsageError, "unknown task '" + s + "'");
}

void SubjectMeta::validate() const {
  if (subject_id.empty()) fail(Err::InvariantViolation, "subject_id empty");
  auto bad = [this](const char* field, double v, double lo, double hi) {
    fail(Err::InvariantViolation, "subject " + subject_id + ": " + field + "=" +
                                      std::to_string(v) + " outside (" + std::to_string(lo) +
                                      "," + std::to_string(hi) + ")");
  };
  if (!(age > 0 && age < 120)) bad("age", age, 0, 120);
  if (!(height > 0.5 && height < 2.5)) bad("height", height, 0.5, 2.5);
  if (!(weight > 20 && weight < 200)) bad("weight", weight, 20, 200);
}

void validate_events(const std::vector<GaitEvent>& events, int n_frames,
                     const std::string& context) {
  int last_frame = -1;
  std::array<std::optional<EventKind>, 2> expect;  // per foot
  for (const auto& ev : events) {
    if (ev.frame_index < 0 || ev.frame_index >= n_frames)
      fail(Err::InvariantViolation, context + ": event frame " + std::to_string(ev.frame_index) +
                                        " outside series of length " + std::to_string(n_frames));
    if (ev.frame_index <= last_frame)
      fail(Err::InvariantViolation, context + ": events not strictly increasing in time");
    last_frame = ev.frame_index;
    auto& exp = expect[static_cast<int>(ev.foot)];
    if (exp && *exp != ev.kind)
      fail(Err::InvariantViolation,
           context + ": events do not alternate touch_down/toe_off for foot " +
               to_string(ev.foot));
    if (!exp && ev.kind == EventKind::toe_off)
      fail(Err::InvariantViolation,
           context + ": toe_off before any touch_down for foot " + std::string(to_string(ev.foot)));
    exp = ev.kind == EventKind::touch_down ? EventKind::toe_off : EventKind::touch_down;
  }
}

void RunnerRecord::validate() const {
  if (record_id.empty()) fail(Err::InvariantViolation, "record_id empty");
  subject.validate();
  const auto rows = series[0].angles.rows();
  const double rate = series[0].sample_rate;
  if (!(rate > 0)) fail(Err::InvariantViolation, record_id + ": sample_rate must be > 0");
  for (int i = 0; i < kNumStructures; ++i) {
    const auto& s = series[i];
    if (static_cast<int>(s.structure) != i)
      fail(Err::InvariantViolation, record_id + ": series out of structure order");
    if (s.angles.rows() != rows)
      fail(Err::InvariantViolation, record_id + ": series length mismatch for " +
                                        to_string(s.structure));
    if (s.sample_rate != rate)
      fail(Err::InvariantViolation, record_id + ": sample_rate mismatch for " +
                                        to_string(s.structure));
    if (!s.angles.allFinite())
      fail(Err::InvariantViolation, record_id + ": non-finite angle in " + to_string(s.structure));
  }
  if (static_cast<double>(rows) < 2.0 * rate)
    fail(Err::InvariantViolation, record_id + ": series shorter than 2 s of data");
  if (events) validate_events(*events, static_cast<int>(rows), record_id);
}

std::map<InjuryLabel, int> Dataset::class_histogram() const {
  std::map<InjuryLabel, int> h;
  for (const auto& r : records) ++h[r.label];
  return h;
}

std::vector<std::string> Dataset::subject_ids() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : records)
    if (seen.insert(r.subject.subject_id).second) out.push_back(r.subject.subject_id);
  return out;
}

namespace {

std::map<std::string, SubjectMeta> load_subjects_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  const std::vector<std::string> want = {"subject_id", "age", "height", "weight",
                                         "sex", "dominant_leg"};
  if (t.header != want) fail(Err::SchemaMismatch, path + ": bad subjects header");
  std::map<std::string, SubjectMeta> out;
  for (const auto& row : t.rows) {
    if (row.size() != want.size()) fail(Err::SchemaMismatch, path + ": wrong column count");
    SubjectMeta m;
    m.subject_id = row[0];
    m.age = parse_double(row[1], path);
    m.height = parse_double(row[2], path);
    m.weight = parse_double(row[3], path);
    m.sex = sex_from_string(row[4]);
    m.dominant_leg = leg_from_string(row[5]);
    if (out.count(m.subject_id)) fail(Err::SchemaMismatch, path + ": duplicate subject " + m.subject_id);
    out[m.subject_id] = m;
  }
  return out;
}

void load_angles_csv(const std::string& path, RunnerRecord& rec) {
  CsvTable t = read_csv(path);
  double rate = 0;
  for (const auto& c : t.comments) {
    auto pos = c.find("rate_hz=");
    if (pos != std::string::npos) rate = parse_double(c.substr(pos + 8), path);
  }
  if (!(rate > 0)) fail(Err::SchemaMismatch, path + ": missing '# rate_hz=' comment");
  const std::vector<std::string> want = {"frame", "structure", "ax", "ay", "az"};
  if (t.header != want) fail(Err::SchemaMismatch, path + ": bad angle header");

  std::array<std::vector<Eigen::Vector3d>, kNumStructures> cols;
  std::array<long, kNumStructures> next_frame;
  next_frame.fill(0);
  for (const auto& row : t.rows) {
    if (row.size() != want.size()) fail(Err::SchemaMismatch, path + ": wrong column count");
    long frame = parse_long(row[0], path);
    int sidx = static_cast<int>(structure_from_string(row[1]));
    if (frame != next_frame[sidx])
      fail(Err::SchemaMismatch, path + ": frames for " + row[1] + " not contiguous from 0");
    ++next_frame[sidx];
    cols[sidx].emplace_back(parse_double(row[2], path), parse_double(row[3], path),
                            parse_double(row[4], path));
  }
  for (int i = 0; i < kNumStructures; ++i) {
    auto& s = rec.series[i];
    s.structure = static_cast<Structure>(i);
    s.sample_rate = rate;
    s.angles.resize(static_cast<Eigen::Index>(cols[i].size()), 3);
    for (std::size_t f = 0; f < cols[i].size(); ++f) s.angles.row(static_cast<Eigen::Index>(f)) = cols[i][f].transpose();
  }
}

std::vector<GaitEvent> load_events_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  const std::vector<std::string> want = {"foot", "kind", "frame_index"};
  if (t.header != want) fail(Err::SchemaMismatch, path + ": bad events header");
  std::vector<GaitEvent> out;
  for (const auto& row : t.rows) {
    if (row.size() != want.size()) fail(Err::SchemaMismatch, path + ": wrong column count");
    GaitEvent ev;
    ev.foot = foot_from_string(row[0]);
    ev.kind = event_kind_from_string(row[1]);
    ev.frame_index = static_cast<int>(parse_long(row[2], path));
    out.push_back(ev);
  }
  return out;
}

}  // namespace

Dataset load_dataset(const std::string& manifest_path) {
  const std::string path = fs::is_directory(manifest_path)
                               ? (fs::path(manifest_path) / "manifest.json").string()
                               : manifest_path;
  json manifest = load_json_file(path);
  if (!manifest.contains("records") || !manifest.contains("subjects_csv"))
    fail(Err::SchemaMismatch, path + ": needs 'records' and 'subjects_csv'");
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&base](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q.string() : (base / q).string();
  };

  auto subjects = load_subjects_csv(resolve(manifest.at("subjects_csv").get<std::string>()));

  Dataset ds;
  std::map<std::string, const SubjectMeta*> seen_subject;
  for (const auto& jr : manifest.at("records")) {
    RunnerRecord rec;
    rec.record_id = jr.at("id").get<std::string>();
    rec.label = label_from_string(jr.at("label").get<std::string>());
    const std::string sid = jr.at("subject_id").get<std::string>();
    auto it = subjects.find(sid);
    if (it == subjects.end())
      fail(Err::SchemaMismatch, rec.record_id + ": subject " + sid + " not in subjects table");
    rec.subject = it->second;
    load_angles_csv(resolve(jr.at("angles_csv").get<std::string>()), rec);
    if (jr.contains("events_csv"))
      rec.events = load_events_csv(resolve(jr.at("events_csv").get<std::string>()));
    if (jr.contains("speed_mps")) rec.treadmill_speed = jr.at("speed_mps").get<double>();
    rec.validate();
    // subjects table is keyed by id, so meta is consistent by construction;
    // guard anyway in case of future per-record meta sources
    auto prev = seen_subject.find(sid);
    if (prev != seen_subject.end() && !(*prev->second == rec.subject))
      fail(Err::InconsistentSubjectMeta, "subject " + sid + " has conflicting metadata");
    seen_subject[sid] = &it->second;
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const fs::path base(out_dir);

  // subjects.csv in first-seen order
  CsvTable subjects;
  subjects.header = {"subject_id", "age", "height", "weight", "sex", "dominant_leg"};
  std::set<std::string> written;
  for (const auto& r : ds.records) {
    if (!written.insert(r.subject.subject_id).second) continue;
    const auto& m = r.subject;
    subjects.rows.push_back({m.subject_id, fmt_g9(m.age), fmt_g9(m.height), fmt_g9(m.weight),
                             to_string(m.sex), to_string(m.dominant_leg)});
  }
  write_csv((base / "subjects.csv").string(), subjects);

  json manifest;
  manifest["subjects_csv"] = "subjects.csv";
  manifest["records"] = json::array();
  for (const auto& r : ds.records) {
    CsvTable t;
    t.comments = {"# rate_hz=" + fmt_g9(r.sample_rate())};
    t.header = {"frame", "structure", "ax", "ay", "az"};
    for (int f = 0; f < r.n_frames(); ++f)
      for (int s = 0; s < kNumStructures; ++s) {
        const auto& a = r.series[s].angles;
        t.rows.push_back({std::to_string(f), kStructureNames[s], fmt_g9(a(f, 0)),
                          fmt_g9(a(f, 1)), fmt_g9(a(f, 2))});
      }
    const std::string angles_name = r.record_id + "_angles.csv";
    write_csv((base / angles_name).string(), t);

    json jr;
    jr["id"] = r.record_id;
    jr["subject_id"] = r.subject.subject_id;
    jr["label"] = to_string(r.label);
    jr["angles_csv"] = angles_name;
    if (r.events) {
      CsvTable ev;
      ev.header = {"foot", "kind", "frame_index"};
      for (const auto& e : *r.events)
        ev.rows.push_back({to_string(e.foot), to_string(e.kind), std::to_string(e.frame_index)});
      const std::string ev_name = r.record_id + "_events.csv";
      write_csv((base / ev_name).string(), ev);
      jr["events_csv"] = ev_name;
    }
    if (r.treadmill_speed) jr["speed_mps"] = *r.treadmill_speed;
    manifest["records"].push_back(jr);
  }
  std::ofstream mf(base / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

LabeledDataset class_filter(const Dataset& ds, Task task) {
  if (ds.records.empty()) fail(Err::EmptyResult, "dataset is empty");
  LabeledDataset out;
  out.base = &ds;
  out.task = task;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const InjuryLabel l = ds.records[i].label;
    bool keep = true;
    int y = 0;
    switch (task) {
      case Task::PFPS_ITBS_vs_H: y = l != InjuryLabel::healthy; break;
      case Task::PFPS_vs_H:
        keep = l != InjuryLabel::ITBS;
        y = l == InjuryLabel::PFPS;
        break;
      case Task::ITBS_vs_H:
        keep = l != InjuryLabel::PFPS;
        y = l == InjuryLabel::ITBS;
        break;
    }
    if (keep) {
      out.record_index.push_back(static_cast<int>(i));
      out.label.push_back(y);
    }
  }
  const auto pos = std::count(out.label.begin(), out.label.end(), 1);
  if (pos == 0 || pos == static_cast<long>(out.label.size()))
    fail(Err::EmptyResult, std::string("task ") + to_string(task) + " has an empty class side");
  return out;
}

}  // namespace runpat
