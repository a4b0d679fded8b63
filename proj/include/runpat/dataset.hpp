#pragma once

#include <Eigen/Dense>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "runpat/common.hpp"

namespace runpat {

// The nine anatomical structures carrying Cardan angle series.
enum class Structure {
  ankle_L, ankle_R, knee_L, knee_R, hip_L, hip_R, foot_L, foot_R, pelvis
};
inline constexpr int kNumStructures = 9;
inline constexpr int kStanceSamples = 101;

const char* to_string(Structure s);
Structure structure_from_string(const std::string& s);

enum class Sex { F, M, other };
enum class Leg { L, R, unknown };
enum class InjuryLabel { healthy, PFPS, ITBS };
enum class Foot { L, R };
enum class EventKind { touch_down, toe_off };

const char* to_string(Sex s);
const char* to_string(Leg l);
const char* to_string(InjuryLabel l);
const char* to_string(Foot f);
const char* to_string(EventKind k);
Sex sex_from_string(const std::string& s);
Leg leg_from_string(const std::string& s);
InjuryLabel label_from_string(const std::string& s);
Foot foot_from_string(const std::string& s);
EventKind event_kind_from_string(const std::string& s);

struct SubjectMeta {
  std::string subject_id;
  double age = 0;     // years
  double height = 0;  // meters
  double weight = 0;  // kilograms
  Sex sex = Sex::other;
  Leg dominant_leg = Leg::unknown;

  void validate() const;
  bool operator==(const SubjectMeta&) const = default;
};

struct GaitEvent {
  EventKind kind;
  Foot foot;
  int frame_index = 0;
  bool operator==(const GaitEvent&) const = default;
};

// Cardan triples (degrees) for one structure, rows = frames, cols = x,y,z.
struct AngleSeries {
  Structure structure = Structure::pelvis;
  Eigen::Matrix<double, Eigen::Dynamic, 3> angles;
  double sample_rate = 0;  // Hz
};

struct RunnerRecord {
  std::string record_id;
  SubjectMeta subject;
  std::array<AngleSeries, kNumStructures> series;  // indexed by Structure
  InjuryLabel label = InjuryLabel::healthy;
  std::optional<std::vector<GaitEvent>> events;
  std::optional<double> treadmill_speed;  // m/s

  int n_frames() const { return static_cast<int>(series[0].angles.rows()); }
  double sample_rate() const { return series[0].sample_rate; }
  const Eigen::Matrix<double, Eigen::Dynamic, 3>& angles(Structure s) const {
    return series[static_cast<int>(s)].angles;
  }
  void validate() const;
};

struct Dataset {
  std::vector<RunnerRecord> records;

  std::map<InjuryLabel, int> class_histogram() const;
  std::vector<std::string> subject_ids() const;  // unique, in first-seen order
};

// Binary classification view over a Dataset; positive label = injured.
enum class Task { PFPS_ITBS_vs_H, PFPS_vs_H, ITBS_vs_H };
const char* to_string(Task t);
Task task_from_string(const std::string& s);

struct LabeledDataset {
  const Dataset* base = nullptr;
  Task task = Task::PFPS_ITBS_vs_H;
  std::vector<int> record_index;  // into base->records
  std::vector<int> label;         // 0 = healthy, 1 = injured

  std::size_t size() const { return record_index.size(); }
  const RunnerRecord& record(std::size_t i) const { return base->records[record_index[i]]; }
};

Dataset load_dataset(const std::string& manifest_path);
void save_dataset(const Dataset& ds, const std::string& out_dir);

LabeledDataset class_filter(const Dataset& ds, Task task);

// Validates that events alternate touch-down/toe-off per foot and are strictly
// increasing overall; n_frames bounds frame_index.
void validate_events(const std::vector<GaitEvent>& events, int n_frames,
                     const std::string& context);

}  // namespace runpat
