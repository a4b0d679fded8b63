#include "runpat/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <sstream>

#include "runpat/classic.hpp"
#include "runpat/common.hpp"
#include "runpat/csv.hpp"
#include "runpat/dataset.hpp"
#include "runpat/deepnet.hpp"
#include "runpat/eval.hpp"
#include "runpat/explain.hpp"
#include "runpat/features.hpp"
#include "runpat/gait.hpp"
#include "runpat/sha256.hpp"
#include "runpat/synth.hpp"

namespace runpat::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(Err code) {
  switch (code) {
    case Err::UsageError: return 2;
    case Err::NumericalFailure:
    case Err::Divergence: return 4;
    default: return 3;
  }
}

void emit_error(const std::string& name, const std::string& message, int code) {
  json j{{"error", name}, {"message", message}, {"exit_code", code}};
  std::cerr << j.dump() << "\n";
}

// Every subcommand leaves a manifest.json in its run directory recording the
// exact invocation, the root seed, a 256-bit digest of every input file, and
// the list of files it produced, so a run can be replayed bit-exactly.
struct RunManifest {
  fs::path dir;
  std::string command;
  std::vector<std::string> argv;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;
  std::set<std::string> outputs;

  void input_file(const fs::path& p) {
    inputs.emplace_back(p.generic_string(), sha256_file_hex(p.string()));
  }

  // Hashes a dataset manifest plus every file it references.
  void input_dataset(const std::string& data_path) {
    const std::string manifest_path =
        fs::is_directory(data_path) ? (fs::path(data_path) / "manifest.json").string()
                                    : data_path;
    input_file(manifest_path);
    std::ifstream f(manifest_path);
    if (!f) fail(Err::MissingFile, "cannot read " + manifest_path);
    json m;
    try {
      m = json::parse(f);
    } catch (const json::exception& e) {
      fail(Err::SchemaMismatch, manifest_path + ": " + e.what());
    }
    const fs::path base = fs::path(manifest_path).parent_path();
    auto resolve = [&base](const std::string& p) {
      fs::path q(p);
      return q.is_absolute() ? q : base / q;
    };
    if (m.contains("subjects_csv"))
      input_file(resolve(m.at("subjects_csv").get<std::string>()));
    if (m.contains("records"))
      for (const auto& jr : m.at("records")) {
        if (jr.contains("angles_csv")) input_file(resolve(jr.at("angles_csv").get<std::string>()));
        if (jr.contains("events_csv")) input_file(resolve(jr.at("events_csv").get<std::string>()));
      }
  }

  void output(const fs::path& rel) { outputs.insert(rel.generic_string()); }

  void output_tree(const fs::path& rel_subdir) {
    std::vector<fs::path> found;
    for (const auto& e : fs::recursive_directory_iterator(dir / rel_subdir))
      if (e.is_regular_file()) found.push_back(e.path());
    for (const auto& p : found) output(fs::relative(p, dir));
  }

  void write() const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["seed"] = seed;
    j["inputs"] = json::array();
    for (const auto& [path, digest] : inputs)
      j["inputs"].push_back({{"path", path}, {"sha256", digest}});
    j["outputs"] = std::vector<std::string>(outputs.begin(), outputs.end());
    std::ofstream f(dir / "manifest.json");
    if (!f) fail(Err::MissingFile, "cannot write " + (dir / "manifest.json").string());
    f << j.dump(2) << "\n";
  }
};

void write_text(RunManifest& man, const fs::path& rel, const std::string& text) {
  const fs::path p = man.dir / rel;
  fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) fail(Err::MissingFile, "cannot write " + p.string());
  f << text;
  man.output(rel);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// --- shared option groups ----------------------------------------------------

struct CommonArgs {
  std::string out;
  std::string data;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct GaitArgs {
  GaitConfig cfg;

  void attach(CLI::App* cmd) {
    cmd->add_option("--smoothing-window", cfg.smoothing_window,
                    "Centered moving-average window for event detection, frames");
    cmd->add_option("--min-stance", cfg.min_stance_s, "Shortest plausible stance, seconds");
    cmd->add_option("--max-stance", cfg.max_stance_s, "Longest plausible stance, seconds");
    cmd->add_flag("--pelvis-dup,!--no-pelvis-dup", cfg.pelvis_dup,
                  "Duplicate the pelvis row so both body sides carry 5 structures");
  }
};

struct FeatureArgs {
  FeatureConfig cfg;
  std::string side = "average";

  void attach(CLI::App* cmd) {
    cmd->add_option("--side", side, "Body side feeding the angle features")
        ->check(CLI::IsMember({"L", "R", "average"}));
    cmd->add_option("--eversion-threshold", cfg.eversion_threshold_deg,
                    "Cutoff in degrees for the time-in-eversion features");
  }

  FeatureConfig resolved() const {
    FeatureConfig c = cfg;
    c.side = side == "L" ? FeatureSide::L : side == "R" ? FeatureSide::R : FeatureSide::average;
    return c;
  }
};

struct NetArgs {
  nn::TrainConfig cfg;

  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", cfg.epochs, "Deep-model training epochs");
    cmd->add_option("--batch", cfg.batch_size, "Deep-model batch size");
    cmd->add_option("--patience", cfg.patience, "Early-stop patience on the training loss");
    cmd->add_option("--lr", cfg.lr, "Deep-model learning rate");
    cmd->add_option("--accumulation", cfg.grad_accumulation, "Gradient accumulation steps");
  }
};

ModelKind classic_kind(EvalModel m) {
  switch (m) {
    case EvalModel::knn: return ModelKind::KNN;
    case EvalModel::svm_l: return ModelKind::SVM_L;
    case EvalModel::svm_p: return ModelKind::SVM_P;
    case EvalModel::gp: return ModelKind::GP;
    case EvalModel::dt: return ModelKind::DT;
    case EvalModel::adb: return ModelKind::ADB;
    case EvalModel::rf: return ModelKind::RF;
    case EvalModel::mlp: return ModelKind::MLP;
    default: fail(Err::InvariantViolation, "not a classical model");
  }
}

Eigen::MatrixXd regime_matrix(const PreparedInputs& in, InputRegime regime,
                              const std::vector<int>& rows) {
  if (regime == InputRegime::points) return take_rows(in.points, rows);
  Eigen::MatrixXd flat = flatten_tensors(in.tensors, rows);
  if (regime == InputRegime::time_series) return flat;
  Eigen::MatrixXd pts = take_rows(in.points, rows);
  Eigen::MatrixXd both(flat.rows(), flat.cols() + pts.cols());
  both << flat, pts;
  return both;
}

std::string regime_schema_hash(const PreparedInputs& in, InputRegime regime) {
  const std::string points_hash = sha256_hex([&] {
    std::string s = "points\n";
    for (const auto& n : in.schema->names()) s += n + "\n";
    return s;
  }());
  const std::string tensor_hash = sha256_hex([&] {
    std::string s = "tensor " + std::to_string(kStanceSamples) + "\n";
    for (const auto& r : in.tensor_rows) s += r + "\n";
    return s;
  }());
  switch (regime) {
    case InputRegime::points: return points_hash;
    case InputRegime::time_series: return tensor_hash;
    default: return sha256_hex(tensor_hash + points_hash);
  }
}

std::vector<int> all_rows(const PreparedInputs& in) {
  std::vector<int> rows(in.record_ids.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return rows;
}

struct FittedClassic {
  TrainedModel model;
  ScalerParams scaler;
  Eigen::MatrixXd train_raw;  // pre-scaling training design
};

FittedClassic fit_classic(const PreparedInputs& in, InputRegime regime, EvalModel model,
                          const std::vector<int>& rows, bool grid, std::uint64_t seed) {
  FittedClassic out;
  out.train_raw = regime_matrix(in, regime, rows);
  Eigen::MatrixXd X;
  std::tie(X, out.scaler) = standardize(out.train_raw, out.train_raw);
  const Eigen::VectorXi y = take(in.labels, rows);

  const ModelKind kind = classic_kind(model);
  ClassifierSpec spec;
  if (grid) {
    std::vector<ClassifierSpec> cells = hyper_grid(kind);
    for (std::size_t c = 0; c < cells.size(); ++c)
      cells[c].seed = derive_seed(seed, "cell " + to_string(model), c);
    std::vector<std::string> row_subjects(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) row_subjects[i] = in.subject_ids[rows[i]];
    spec = grid_search(cells, X, y, row_subjects, derive_seed(seed, "grid " + to_string(model)));
  } else {
    spec = shipped_defaults(kind);
  }
  spec.seed = derive_seed(seed, "fit " + to_string(model));
  out.model = fit(spec, X, y, regime, regime_schema_hash(in, regime));
  return out;
}

struct FittedDeep {
  nn::Network net;
  TensorScaler tensor_scaler;
  std::optional<ScalerParams> point_scaler;
  nn::TrainHistory history;
};

FittedDeep fit_deep(const PreparedInputs& in, InputRegime regime, EvalModel model,
                    const std::vector<int>& rows, const nn::TrainConfig& base_cfg,
                    std::uint64_t seed) {
  FittedDeep out;
  out.tensor_scaler = TensorScaler::fit(in.tensors, rows);
  nn::Batch stance = out.tensor_scaler.apply(in.tensors, rows);

  const bool with_points = model == EvalModel::cnn && regime == InputRegime::ts_plus_points;
  nn::Batch points;
  if (with_points) {
    Eigen::MatrixXd raw = take_rows(in.points, rows);
    auto [scaled, params] = standardize(raw, raw);
    out.point_scaler = params;
    for (long i = 0; i < scaled.rows(); ++i) points.push_back(scaled.row(i));
  }

  const int A = in.n_structures();
  out.net = model == EvalModel::cnn
                ? nn::build_cnn(A, 9, with_points ? static_cast<int>(in.points.cols()) : -1,
                                derive_seed(seed, "net " + to_string(model)))
                : nn::build_lstm_net(A, 9, derive_seed(seed, "net " + to_string(model)));
  nn::TrainConfig tc = base_cfg;
  tc.seed = derive_seed(seed, "train " + to_string(model));
  out.history = nn::train(out.net, stance, with_points ? &points : nullptr,
                          take(in.labels, rows), tc);
  return out;
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
  CommonArgs common;
  SynthSpec spec;
  std::string label = "PFPS";
  bool no_speed = false;
  double speed = 3.0;
};

void run_synth(SynthArgs& a, RunManifest& man) {
  a.spec.seed = a.common.seed;
  a.spec.injured_label = label_from_string(a.label);
  a.spec.treadmill_speed = a.no_speed ? std::nullopt : std::optional<double>(a.speed);
  a.spec.validate();

  SynthResult res = synth(a.spec);
  fs::create_directories(man.dir / "dataset");
  save_dataset(res.dataset, (man.dir / "dataset").string());
  save_truth(res.truth, man.dir / "truth.json");
  man.output_tree("dataset");
  man.output("truth.json");
}

// --- ingest ------------------------------------------------------------------

void run_ingest(CommonArgs& a, RunManifest& man) {
  man.input_dataset(a.data);
  Dataset ds = load_dataset(a.data);

  fs::create_directories(man.dir / "dataset");
  save_dataset(ds, (man.dir / "dataset").string());
  man.output_tree("dataset");

  json summary;
  summary["records"] = ds.records.size();
  summary["subjects"] = ds.subject_ids().size();
  json hist = json::object();
  for (const auto& [label, n] : ds.class_histogram()) hist[to_string(label)] = n;
  summary["labels"] = hist;
  json detail = json::array();
  for (const auto& r : ds.records)
    detail.push_back({{"id", r.record_id},
                      {"subject_id", r.subject.subject_id},
                      {"frames", r.n_frames()},
                      {"rate_hz", r.sample_rate()},
                      {"has_events", r.events.has_value()}});
  summary["records_detail"] = detail;
  write_text(man, "summary.json", summary.dump(2) + "\n");
}

// --- segment -----------------------------------------------------------------

struct SegmentArgs {
  CommonArgs common;
  GaitArgs gait;
  std::string record;  // empty = all
  std::string foot = "both";
};

void run_segment(SegmentArgs& a, RunManifest& man) {
  man.input_dataset(a.common.data);
  Dataset ds = load_dataset(a.common.data);
  const FootSel sel = a.foot == "L" ? FootSel::L : a.foot == "R" ? FootSel::R : FootSel::both;

  CsvTable st_table;
  st_table.header = {"record_id", "stride_rate", "stance_pct", "swing_pct",
                     "stride_length_m", "n_stances"};
  bool matched = false;
  for (const auto& rec : ds.records) {
    if (!a.record.empty() && rec.record_id != a.record) continue;
    matched = true;

    std::vector<GaitEvent> events = detect_events(rec, a.gait.cfg);
    CsvTable ev;
    ev.header = {"foot", "kind", "frame_index", "time_s"};
    for (const auto& e : events)
      ev.rows.push_back({to_string(e.foot), to_string(e.kind), std::to_string(e.frame_index),
                         fmt_g9(e.frame_index / rec.sample_rate())});
    const fs::path ev_rel = fs::path("events") / (rec.record_id + "_events.csv");
    fs::create_directories(man.dir / "events");
    write_csv((man.dir / ev_rel).string(), ev);
    man.output(ev_rel);

    std::vector<StancePhase> phases = segment_stances(rec, events, a.gait.cfg);
    StanceTensor tensor = build_stance_tensor(phases, sel, a.gait.cfg.pelvis_dup);
    CsvTable tt;
    tt.header = {"t", "structure", "channel", "value"};
    for (int t = 0; t < kStanceSamples; ++t)
      for (int s = 0; s < tensor.n_structures(); ++s)
        for (int c = 0; c < 9; ++c)
          tt.rows.push_back({std::to_string(t), tensor.structure_labels[s],
                             tensor.channel_labels[c], fmt_g9(tensor.at(t, s, c))});
    const fs::path st_rel = fs::path("stance") / (rec.record_id + "_stance.csv");
    fs::create_directories(man.dir / "stance");
    write_csv((man.dir / st_rel).string(), tt);
    man.output(st_rel);

    SpatioTemporalSummary sts = spatiotemporal(events, rec.sample_rate(), rec.treadmill_speed);
    st_table.rows.push_back({rec.record_id, fmt_g9(sts.stride_rate), fmt_g9(sts.stance_pct),
                             fmt_g9(sts.swing_pct),
                             sts.stride_length ? fmt_g9(*sts.stride_length) : "",
                             std::to_string(phases.size())});
  }
  if (!matched) fail(Err::EmptyResult, "no record matches '" + a.record + "'");
  write_csv((man.dir / "spatiotemporal.csv").string(), st_table);
  man.output("spatiotemporal.csv");
}

// --- features ----------------------------------------------------------------

struct FeaturesArgs {
  CommonArgs common;
  GaitArgs gait;
  FeatureArgs features;
};

void run_features(FeaturesArgs& a, RunManifest& man) {
  man.input_dataset(a.common.data);
  Dataset ds = load_dataset(a.common.data);
  const FeatureConfig fc = a.features.resolved();

  std::vector<FeatureVector> rows;
  for (const auto& rec : ds.records) {
    std::vector<GaitEvent> events = detect_events(rec, a.gait.cfg);
    std::vector<StancePhase> phases = segment_stances(rec, events, a.gait.cfg);
    SpatioTemporalSummary sts = spatiotemporal(events, rec.sample_rate(), rec.treadmill_speed);
    rows.push_back(extract_features(rec, phases, sts, fc));
    if (!(*rows.back().schema == *rows.front().schema))
      fail(Err::SchemaMismatch, rec.record_id + ": feature schema drifted");
  }
  if (rows.empty()) fail(Err::EmptyResult, "dataset has no records");

  CsvTable t;
  t.header = {"record_id", "subject_id", "label"};
  for (const auto& n : rows.front().schema->names()) t.header.push_back(n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<std::string> row{rows[i].record_id, ds.records[i].subject.subject_id,
                                 to_string(ds.records[i].label)};
    for (long j = 0; j < rows[i].values.size(); ++j) row.push_back(fmt_g9(rows[i].values(j)));
    t.rows.push_back(std::move(row));
  }
  write_csv((man.dir / "features.csv").string(), t);
  man.output("features.csv");

  json schema = json::array();
  for (const auto& def : rows.front().schema->defs)
    schema.push_back({{"name", def.name}, {"unit", def.unit}, {"family", to_string(def.family)}});
  write_text(man, "schema.json", schema.dump(2) + "\n");
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  CommonArgs common;
  GaitArgs gait;
  FeatureArgs features;
  NetArgs net;
  std::string task = "PFPS_ITBS";
  std::string model = "svm_l";
  std::string regime = "points";
  bool grid = false;
};

json scaler_json(const ScalerParams& p) {
  json j;
  j["mean"] = std::vector<double>(p.mean.data(), p.mean.data() + p.mean.size());
  j["std"] = std::vector<double>(p.std.data(), p.std.data() + p.std.size());
  j["scaled"] = std::vector<int>(p.scaled.begin(), p.scaled.end());
  return j;
}

void run_train(TrainArgs& a, RunManifest& man) {
  man.input_dataset(a.common.data);
  Dataset ds = load_dataset(a.common.data);
  const Task task = task_from_string(a.task);
  const InputRegime regime = regime_from_string(a.regime);
  const EvalModel model = eval_model_from_string(a.model);
  if (!regime_supported(model, regime))
    fail(Err::UsageError, "model " + to_string(model) + " does not accept the " +
                              to_string(regime) + " input regime");

  LabeledDataset view = class_filter(ds, task);
  PreparedInputs in =
      prepare_inputs(view, a.gait.cfg, a.features.resolved(), a.common.threads);
  const std::vector<int> rows = all_rows(in);

  fs::create_directories(man.dir / "models");
  json pre;
  if (is_deep(model)) {
    FittedDeep fitted =
        fit_deep(in, regime, model, rows, a.net.cfg, a.common.seed);
    nn::save_network(fitted.net, man.dir / "models" / (a.model + ".json"));
    man.output(fs::path("models") / (a.model + ".json"));
    man.output(fs::path("models") / (a.model + ".bin"));
    pre["tensor"] = {{"mean", std::vector<double>(fitted.tensor_scaler.mean.data(),
                                                  fitted.tensor_scaler.mean.data() +
                                                      fitted.tensor_scaler.mean.size())},
                     {"std", std::vector<double>(fitted.tensor_scaler.std.data(),
                                                 fitted.tensor_scaler.std.data() +
                                                     fitted.tensor_scaler.std.size())}};
    if (fitted.point_scaler) pre["points"] = scaler_json(*fitted.point_scaler);
    pre["final_train_loss"] =
        fitted.history.epochs.empty() ? 0.0 : fitted.history.epochs.back().loss;
  } else {
    FittedClassic fitted =
        fit_classic(in, regime, model, rows, a.grid, a.common.seed);
    write_text(man, fs::path("models") / (a.model + ".json"),
               serialize_model(fitted.model));
    pre["points"] = scaler_json(fitted.scaler);
    pre["hyperparameters"] = fitted.model.spec.describe();
  }
  write_text(man, fs::path("models") / (a.model + "_preprocess.json"), pre.dump(2) + "\n");
}

// --- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  CommonArgs common;
  GaitArgs gait;
  FeatureArgs features;
  NetArgs net;
  std::string task = "PFPS_ITBS";
  std::string regime = "points";
  std::string models;
  int folds = 5;
  bool grid = true;
};

void run_evaluate(EvaluateArgs& a, RunManifest& man) {
  man.input_dataset(a.common.data);
  Dataset ds = load_dataset(a.common.data);
  const Task task = task_from_string(a.task);
  const InputRegime regime = regime_from_string(a.regime);
  std::vector<EvalModel> models;
  for (const auto& name : split_list(a.models)) models.push_back(eval_model_from_string(name));
  if (models.empty()) fail(Err::UsageError, "no models requested");

  EvalConfig cfg;
  cfg.k = a.folds;
  cfg.seed = a.common.seed;
  cfg.grid = a.grid;
  cfg.gait = a.gait.cfg;
  cfg.features = a.features.resolved();
  cfg.net = a.net.cfg;
  cfg.n_threads = a.common.threads;

  LabeledDataset view = class_filter(ds, task);
  ExperimentReport report = run_experiment(view, regime, models, cfg);
  write_text(man, "report.json", report_json(report));
  write_text(man, "report.csv", report_csv({report}));
}

// --- explain -----------------------------------------------------------------

struct ExplainArgs {
  CommonArgs common;
  GaitArgs gait;
  FeatureArgs features;
  NetArgs net;
  std::string task = "PFPS_ITBS";
  std::string regime = "points";
  std::string model = "svm_l";
  std::string methods = "auto";
  int folds = 5;
  int fold = 0;
  int permutations = 200;
  int bin = 10;
  bool exact = false;
  std::string feature;  // pdp target
  int pdp_grid = 20;
  std::string node = "incept2";
};

std::vector<std::string> tensor_row_labels(const PreparedInputs& in) {
  static constexpr std::array<const char*, 9> channels = {
      "x_mean", "x_upper", "x_lower", "y_mean", "y_upper",
      "y_lower", "z_mean", "z_upper", "z_lower"};
  std::vector<std::string> labels;
  for (const auto& s : in.tensor_rows)
    for (const auto* c : channels) labels.push_back(s + ":" + c);
  return labels;
}

void write_map_outputs(RunManifest& man, const ExplanationMap& map, const std::string& stem) {
  fs::create_directories(man.dir / "maps");
  write_map_csv(map, man.dir / "maps" / (stem + ".csv"));
  write_map_svg(map, man.dir / "maps" / (stem + ".svg"));
  man.output(fs::path("maps") / (stem + ".csv"));
  man.output(fs::path("maps") / (stem + ".svg"));
}

void run_explain(ExplainArgs& a, RunManifest& man) {
  man.input_dataset(a.common.data);
  Dataset ds = load_dataset(a.common.data);
  const Task task = task_from_string(a.task);
  const InputRegime regime = regime_from_string(a.regime);
  const EvalModel model = eval_model_from_string(a.model);
  if (!regime_supported(model, regime))
    fail(Err::UsageError, "model " + to_string(model) + " does not accept the " +
                              to_string(regime) + " input regime");
  const bool deep = is_deep(model);

  std::vector<std::string> methods = split_list(a.methods);
  if (methods.size() == 1 && methods[0] == "auto") {
    methods = deep ? std::vector<std::string>{"saliency", "gradcam"}
                   : std::vector<std::string>{"shapley"};
    if (!deep && !a.feature.empty() && regime == InputRegime::points)
      methods.push_back("pdp");
  }
  for (const auto& m : methods)
    if (m != "shapley" && m != "pdp" && m != "saliency" && m != "gradcam")
      fail(Err::UsageError, "unknown method '" + m + "'");

  LabeledDataset view = class_filter(ds, task);
  PreparedInputs in =
      prepare_inputs(view, a.gait.cfg, a.features.resolved(), a.common.threads);
  FoldPlan plan = split_by_subject(in.subject_ids, a.folds, a.common.seed);
  if (a.fold < 0 || a.fold >= plan.k)
    fail(Err::UsageError, "fold " + std::to_string(a.fold) + " outside 0.." +
                              std::to_string(plan.k - 1));
  FoldRows rows = rows_for_fold(in, plan, a.fold);
  std::vector<int> positives;
  for (int i : rows.test)
    if (in.labels(i) == 1) positives.push_back(i);
  if (positives.empty())
    fail(Err::NoPositiveCases, "fold " + std::to_string(a.fold) + " has no positive test cases");

  const int A = in.n_structures();
  const int n_bins = (kStanceSamples + a.bin - 1) / a.bin;

  std::optional<FittedClassic> classic;
  std::optional<FittedDeep> fitted_deep;
  if (deep)
    fitted_deep = fit_deep(in, regime, model, rows.train, a.net.cfg, a.common.seed);
  else
    classic = fit_classic(in, regime, model, rows.train, false, a.common.seed);

  for (const auto& method : methods) {
    if (method == "shapley") {
      ShapleyConfig scfg;
      scfg.permutations = a.permutations;
      scfg.seed = derive_seed(a.common.seed, "shapley");

      ModelFn f;
      Eigen::MatrixXd design;  // raw-space rows matching f's input layout
      if (deep) {
        nn::Network& net = fitted_deep->net;
        const TensorScaler& ts = fitted_deep->tensor_scaler;
        const long flat = static_cast<long>(kStanceSamples) * A * 9;
        const bool with_points = net.expect_points > 0;
        design = regime_matrix(in, regime, all_rows(in));
        f = [&net, &ts, flat, with_points, this_pre = fitted_deep->point_scaler](
                const Eigen::MatrixXd& R) {
          nn::Batch stance(R.rows());
          nn::Batch pts;
          for (long i = 0; i < R.rows(); ++i) {
            nn::Mat t(kStanceSamples, flat / kStanceSamples);
            for (long r = 0, at = 0; r < t.rows(); ++r)
              for (long c = 0; c < t.cols(); ++c, ++at)
                t(r, c) = (R(i, at) - ts.mean(c)) / ts.std(c);
            stance[i] = std::move(t);
            if (with_points) {
              Eigen::RowVectorXd p = R.row(i).tail(R.cols() - flat);
              pts.push_back(apply_scaler(*this_pre, p));
            }
          }
          return net.forward(stance, with_points ? &pts : nullptr, false);
        };
      } else {
        design = regime_matrix(in, regime, all_rows(in));
        f = [&classic](const Eigen::MatrixXd& R) {
          return predict_proba(classic->model, apply_scaler(classic->scaler, R));
        };
      }
      Eigen::RowVectorXd baseline =
          regime_matrix(in, regime, rows.train).colwise().mean();

      if (regime == InputRegime::points) {
        scfg.mode = (!a.exact && in.points.cols() > 12) ? ShapleyConfig::Mode::monte_carlo
                                                        : ShapleyConfig::Mode::exact;
        Eigen::VectorXd phi = Eigen::VectorXd::Zero(in.points.cols());
        double residual = 0;
        for (int i : positives) {
          ShapleyResult r = shapley(f, design.row(i), baseline, scfg);
          phi += r.phi;
          residual += r.efficiency_residual;
        }
        phi /= static_cast<double>(positives.size());
        residual /= static_cast<double>(positives.size());
        fs::create_directories(man.dir / "maps");
        write_ranking_csv(in.schema->names(), phi, residual,
                          man.dir / "maps" / "shapley_ranking.csv");
        man.output("maps/shapley_ranking.csv");
      } else {
        std::vector<std::vector<int>> groups =
            tensor_superpixels(A, 9, kStanceSamples, a.bin);
        const int tensor_groups = static_cast<int>(groups.size());
        for (long col = static_cast<long>(kStanceSamples) * A * 9; col < design.cols(); ++col)
          groups.push_back({static_cast<int>(col)});
        scfg.groups = groups;
        scfg.mode = (!a.exact && groups.size() > 12) ? ShapleyConfig::Mode::monte_carlo
                                                     : ShapleyConfig::Mode::exact;
        Eigen::VectorXd phi = Eigen::VectorXd::Zero(groups.size());
        for (int i : positives) {
          ShapleyResult r = shapley(f, design.row(i), baseline, scfg);
          phi += r.phi;
        }
        phi /= static_cast<double>(positives.size());
        ExplanationMap map = shapley_map(phi.head(tensor_groups), in.tensor_rows,
                                         kStanceSamples, a.bin, "training-fold mean");
        map.aggregation = "mean over " + std::to_string(positives.size()) + " positive cases";
        write_map_outputs(man, map, "shapley");
      }
    } else if (method == "pdp") {
      if (deep || regime != InputRegime::points)
        fail(Err::UsageError, "pdp needs a classical model on the points regime");
      if (a.feature.empty()) fail(Err::UsageError, "pdp needs --feature");
      const int idx = in.schema->index_of(a.feature);
      ModelFn f = [&classic](const Eigen::MatrixXd& R) {
        return predict_proba(classic->model, apply_scaler(classic->scaler, R));
      };
      PdpCurve curve = pdp(f, classic->train_raw, idx, a.pdp_grid);
      fs::create_directories(man.dir / "maps");
      write_pdp_csv(a.feature, curve, man.dir / "maps" / ("pdp_" + a.feature + ".csv"));
      write_pdp_svg(a.feature, curve, man.dir / "maps" / ("pdp_" + a.feature + ".svg"));
      man.output(fs::path("maps") / ("pdp_" + a.feature + ".csv"));
      man.output(fs::path("maps") / ("pdp_" + a.feature + ".svg"));
    } else if (method == "saliency" || method == "gradcam") {
      if (!deep) fail(Err::UsageError, method + " needs a deep model");
      nn::Network& net = fitted_deep->net;
      nn::Batch cases = fitted_deep->tensor_scaler.apply(in.tensors, positives);
      nn::Batch pts;
      const bool with_points = net.expect_points > 0;
      if (with_points) {
        Eigen::MatrixXd scaled =
            apply_scaler(*fitted_deep->point_scaler, take_rows(in.points, positives));
        for (long i = 0; i < scaled.rows(); ++i) pts.push_back(scaled.row(i));
      }
      if (method == "saliency") {
        SmoothGradConfig sg;
        sg.seed = derive_seed(a.common.seed, "saliency");
        ExplanationMap map = saliency(net, cases, with_points ? &pts : nullptr,
                                      tensor_row_labels(in), sg);
        write_map_outputs(man, map, "saliency");
      } else {
        ExplanationMap map = gradcam(net, cases, with_points ? &pts : nullptr, a.node);
        write_map_outputs(man, map, "gradcam");
      }
    }
  }
}

// --- report ------------------------------------------------------------------

struct ReportArgs {
  CommonArgs common;
  std::vector<std::string> inputs;
  std::string in_list;
};

void run_report(ReportArgs& a, RunManifest& man) {
  std::vector<std::string> paths = a.inputs;
  for (const auto& p : split_list(a.in_list)) paths.push_back(p);
  if (paths.empty()) fail(Err::UsageError, "no report files given");

  std::vector<ExperimentReport> reports;
  for (const auto& p : paths) {
    man.input_file(p);
    std::ifstream f(p);
    if (!f) fail(Err::MissingFile, "cannot read " + p);
    std::ostringstream text;
    text << f.rdbuf();
    reports.push_back(report_from_json(text.str()));
  }
  write_text(man, "report.csv", report_csv(reports));
}

// --- config file & dispatch --------------------------------------------------

// Pulls --config out of the raw tokens and appends the file's keys as
// ordinary options. Appending after the command line means the file wins
// (last occurrence is kept); unknown keys surface as unknown options.
std::vector<std::string> inject_config(std::vector<std::string> tokens) {
  std::string path;
  std::vector<std::string> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t == "--config") {
      if (i + 1 >= tokens.size()) fail(Err::UsageError, "--config needs a file path");
      path = tokens[++i];
    } else if (t.rfind("--config=", 0) == 0) {
      path = t.substr(9);
    } else {
      out.push_back(t);
    }
  }
  if (path.empty()) return out;

  std::ifstream f(path);
  if (!f) fail(Err::UsageError, "cannot read config file " + path);
  json cfg;
  try {
    cfg = json::parse(f);
  } catch (const json::exception& e) {
    fail(Err::UsageError, path + ": " + e.what());
  }
  if (!cfg.is_object()) fail(Err::UsageError, path + ": config must be a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    if (value.is_boolean()) {
      out.push_back(value.get<bool>() ? "--" + key : "--no-" + key);
    } else if (value.is_string()) {
      out.push_back("--" + key + "=" + value.get<std::string>());
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& item : value) {
        if (!joined.empty()) joined += ",";
        joined += item.is_string() ? item.get<std::string>() : item.dump();
      }
      out.push_back("--" + key + "=" + joined);
    } else {
      out.push_back("--" + key + "=" + value.dump());
    }
  }
  return out;
}

int run_impl(std::vector<std::string> argv) {
  CLI::App app{"Running-gait injury pattern pipeline"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  SynthArgs synth_args;
  CommonArgs ingest_args;
  SegmentArgs segment_args;
  FeaturesArgs features_args;
  TrainArgs train_args;
  EvaluateArgs evaluate_args;
  ExplainArgs explain_args;
  ReportArgs report_args;

  auto add_common = [](CLI::App* cmd, CommonArgs& c, bool with_data) {
    cmd->add_option("--out", c.out, "Run directory for outputs and the manifest")->required();
    if (with_data)
      cmd->add_option("--data", c.data, "Dataset directory or its manifest.json")->required();
    cmd->add_option("--seed", c.seed, "Root seed; every stochastic path derives from it");
    cmd->add_option("--threads", c.threads, "Worker threads for record preparation");
  };

  CLI::App* c_synth = app.add_subcommand("synth", "Generate a synthetic gait dataset");
  add_common(c_synth, synth_args.common, false);
  c_synth->add_option("--subjects", synth_args.spec.n_subjects, "Subjects per class");
  c_synth->add_option("--records", synth_args.spec.records_per_subject, "Records per subject");
  c_synth->add_option("--rate", synth_args.spec.sample_rate, "Sample rate, Hz");
  c_synth->add_option("--period", synth_args.spec.period_s, "Base stride period, seconds");
  c_synth->add_option("--jitter", synth_args.spec.jitter, "Relative per-stride period jitter");
  c_synth->add_option("--strides", synth_args.spec.n_strides, "Strides per record");
  c_synth->add_option("--noise", synth_args.spec.noise_sigma, "Additive angle noise sigma, deg");
  c_synth->add_option("--speed", synth_args.speed, "Treadmill speed, m/s");
  c_synth->add_flag("--no-speed", synth_args.no_speed, "Omit treadmill speed");
  c_synth->add_option("--label", synth_args.label, "Injured-class label")
      ->check(CLI::IsMember({"PFPS", "ITBS"}));
  c_synth->add_flag("--embed-events,!--no-embed-events", synth_args.spec.embed_events,
                    "Carry ground-truth events on the records");
  auto& fx = synth_args.spec.effects;
  c_synth->add_option("--healthy-stance", fx[0].stance_fraction, "Healthy stance fraction");
  c_synth->add_option("--injured-stance", fx[1].stance_fraction, "Injured stance fraction");
  c_synth->add_option("--healthy-period-scale", fx[0].period_scale, "Healthy period scale");
  c_synth->add_option("--injured-period-scale", fx[1].period_scale, "Injured period scale");
  c_synth->add_option("--healthy-mf", fx[0].mf_amp, "Healthy 2 Hz ankle injection, deg");
  c_synth->add_option("--injured-mf", fx[1].mf_amp, "Injured 2 Hz ankle injection, deg");
  c_synth->add_option("--healthy-hf", fx[0].hf_amp, "Healthy 6 Hz ankle injection, deg");
  c_synth->add_option("--injured-hf", fx[1].hf_amp, "Injured 6 Hz ankle injection, deg");
  c_synth->add_option("--healthy-knee", fx[0].knee_peak, "Healthy knee flexion peak, deg");
  c_synth->add_option("--injured-knee", fx[1].knee_peak, "Injured knee flexion peak, deg");

  CLI::App* c_ingest = app.add_subcommand("ingest", "Validate and normalize a dataset");
  add_common(c_ingest, ingest_args, true);

  CLI::App* c_segment =
      app.add_subcommand("segment", "Detect gait events and extract stance blocks");
  add_common(c_segment, segment_args.common, true);
  segment_args.gait.attach(c_segment);
  c_segment->add_option("--record", segment_args.record, "Only this record id");
  c_segment->add_option("--foot", segment_args.foot, "Feet entering the stance tensor")
      ->check(CLI::IsMember({"L", "R", "both"}));

  CLI::App* c_features =
      app.add_subcommand("features", "Derive point-value features per record");
  add_common(c_features, features_args.common, true);
  features_args.gait.attach(c_features);
  features_args.features.attach(c_features);

  CLI::App* c_train = app.add_subcommand("train", "Fit one model on the whole dataset");
  add_common(c_train, train_args.common, true);
  train_args.gait.attach(c_train);
  train_args.features.attach(c_train);
  train_args.net.attach(c_train);
  c_train->add_option("--task", train_args.task, "Classification task")
      ->check(CLI::IsMember({"PFPS_ITBS", "PFPS", "ITBS"}));
  c_train->add_option("--model", train_args.model, "Model name");
  c_train->add_option("--regime", train_args.regime, "Input regime")
      ->check(CLI::IsMember({"time_series", "ts_plus_points", "points"}));
  c_train->add_flag("--grid,!--no-grid", train_args.grid,
                    "Hyperparameter search on an inner subject split");

  CLI::App* c_evaluate =
      app.add_subcommand("evaluate", "Subject-wise K-fold cross-validation");
  add_common(c_evaluate, evaluate_args.common, true);
  evaluate_args.gait.attach(c_evaluate);
  evaluate_args.features.attach(c_evaluate);
  evaluate_args.net.attach(c_evaluate);
  c_evaluate->add_option("--task", evaluate_args.task, "Classification task")
      ->check(CLI::IsMember({"PFPS_ITBS", "PFPS", "ITBS"}));
  c_evaluate->add_option("--regime", evaluate_args.regime, "Input regime")
      ->check(CLI::IsMember({"time_series", "ts_plus_points", "points"}));
  c_evaluate->add_option("--models", evaluate_args.models, "Comma-separated model list")
      ->required();
  c_evaluate->add_option("--folds", evaluate_args.folds, "Number of folds");
  c_evaluate->add_flag("--grid,!--no-grid", evaluate_args.grid,
                       "Nested hyperparameter search for classical models");

  CLI::App* c_explain =
      app.add_subcommand("explain", "Attribution maps for one trained model");
  add_common(c_explain, explain_args.common, true);
  explain_args.gait.attach(c_explain);
  explain_args.features.attach(c_explain);
  explain_args.net.attach(c_explain);
  c_explain->add_option("--task", explain_args.task, "Classification task")
      ->check(CLI::IsMember({"PFPS_ITBS", "PFPS", "ITBS"}));
  c_explain->add_option("--regime", explain_args.regime, "Input regime")
      ->check(CLI::IsMember({"time_series", "ts_plus_points", "points"}));
  c_explain->add_option("--model", explain_args.model, "Model name");
  c_explain->add_option("--methods", explain_args.methods,
                        "Comma list of shapley,pdp,saliency,gradcam or 'auto'");
  c_explain->add_option("--folds", explain_args.folds, "Number of folds");
  c_explain->add_option("--fold", explain_args.fold, "Fold whose test positives are explained");
  c_explain->add_option("--permutations", explain_args.permutations,
                        "Monte-Carlo permutations for shapley");
  c_explain->add_option("--bin", explain_args.bin, "Superpixel width in time steps");
  c_explain->add_flag("--exact", explain_args.exact, "Force exact shapley enumeration");
  c_explain->add_option("--feature", explain_args.feature, "Feature for pdp");
  c_explain->add_option("--pdp-grid", explain_args.pdp_grid, "pdp quantile-grid size");
  c_explain->add_option("--node", explain_args.node, "Grad-CAM target node");

  CLI::App* c_report = app.add_subcommand("report", "Merge evaluation reports into one table");
  add_common(c_report, report_args.common, false);
  c_report->add_option("files", report_args.inputs, "report.json files to merge");
  c_report->add_option("--in", report_args.in_list, "Comma list of report.json files");

  std::vector<std::string> tokens(argv.begin() + 1, argv.end());
  tokens = inject_config(std::move(tokens));
  std::reverse(tokens.begin(), tokens.end());
  try {
    app.parse(tokens);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("UsageError", e.what(), 2);
    std::cerr << app.help();
    return 2;
  }

  struct Cmd {
    CLI::App* app;
    std::string name;
    CommonArgs* common;
    std::function<void(RunManifest&)> fn;
  };
  const std::vector<Cmd> commands = {
      {c_synth, "synth", &synth_args.common, [&](RunManifest& m) { run_synth(synth_args, m); }},
      {c_ingest, "ingest", &ingest_args, [&](RunManifest& m) { run_ingest(ingest_args, m); }},
      {c_segment, "segment", &segment_args.common,
       [&](RunManifest& m) { run_segment(segment_args, m); }},
      {c_features, "features", &features_args.common,
       [&](RunManifest& m) { run_features(features_args, m); }},
      {c_train, "train", &train_args.common, [&](RunManifest& m) { run_train(train_args, m); }},
      {c_evaluate, "evaluate", &evaluate_args.common,
       [&](RunManifest& m) { run_evaluate(evaluate_args, m); }},
      {c_explain, "explain", &explain_args.common,
       [&](RunManifest& m) { run_explain(explain_args, m); }},
      {c_report, "report", &report_args.common,
       [&](RunManifest& m) { run_report(report_args, m); }},
  };
  for (const auto& cmd : commands) {
    if (!app.got_subcommand(cmd.app)) continue;
    RunManifest man;
    man.dir = cmd.common->out;
    man.command = cmd.name;
    man.argv.assign(argv.begin() + 1, argv.end());
    man.seed = cmd.common->seed;
    fs::create_directories(man.dir);
    cmd.fn(man);
    man.write();
    return 0;
  }
  fail(Err::UsageError, "no subcommand given");
}

}  // namespace

int run(std::vector<std::string> argv) {
  try {
    return run_impl(std::move(argv));
  } catch (const Error& e) {
    const int code = exit_code_for(e.code());
    emit_error(err_name(e.code()), e.what(), code);
    return code;
  } catch (const std::exception& e) {
    emit_error("InternalError", e.what(), 3);
    return 3;
  }
}

int run(int argc, const char* const* argv) {
  return run(std::vector<std::string>(argv, argv + argc));
}

}  // namespace runpat::cli
