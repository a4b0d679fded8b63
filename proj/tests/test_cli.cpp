#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string g_cli;         // path to the command-line binary under test
fs::path g_root;           // scratch directory for this run

struct RunResult {
  int exit_code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

RunResult run_cli(const std::string& args) {
  static int serial = 0;
  const fs::path out = g_root / ("stdout_" + std::to_string(serial));
  const fs::path err = g_root / ("stderr_" + std::to_string(serial));
  ++serial;
  const std::string cmd =
      g_cli + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path dir(const std::string& leaf) {
  const fs::path p = g_root / leaf;
  fs::create_directories(p);
  return p;
}

// one small dataset shared by the pipeline tests, generated once
const fs::path& synth_dir() {
  static fs::path cached;
  if (cached.empty()) {
    cached = g_root / "base_synth";
    RunResult r = run_cli("synth --out " + cached.string() +
                          " --subjects 4 --records 1 --strides 6 --rate 100"
                          " --healthy-stance 0.26 --injured-stance 0.34 --seed 5");
    REQUIRE(r.exit_code == 0);
  }
  return cached;
}

}  // namespace

TEST_CASE("no subcommand and unknown flags are usage errors") {
  RunResult none = run_cli("");
  CHECK(none.exit_code == 2);
  CHECK(none.err.find("\"error\"") != std::string::npos);
  CHECK(none.err.find("UsageError") != std::string::npos);

  RunResult bad = run_cli("synth --out " + dir("junk").string() + " --no-such-flag");
  CHECK(bad.exit_code == 2);
  CHECK(bad.err.find("UsageError") != std::string::npos);

  RunResult help = run_cli("--help");
  CHECK(help.exit_code == 0);
  CHECK(help.out.find("synth") != std::string::npos);
  CHECK(help.out.find("evaluate") != std::string::npos);
}

TEST_CASE("synth writes a loadable dataset, truth and a run manifest") {
  const fs::path& base = synth_dir();
  CHECK(fs::exists(base / "dataset" / "manifest.json"));
  CHECK(fs::exists(base / "dataset" / "subjects.csv"));
  CHECK(fs::exists(base / "truth.json"));
  REQUIRE(fs::exists(base / "manifest.json"));

  const nlohmann::json m = nlohmann::json::parse(slurp(base / "manifest.json"));
  CHECK(m.at("command") == "synth");
  CHECK(m.at("seed") == 5);
  REQUIRE(m.contains("outputs"));
  bool saw_truth = false;
  for (const auto& o : m.at("outputs"))
    if (o.get<std::string>().find("truth.json") != std::string::npos) saw_truth = true;
  CHECK(saw_truth);

  const nlohmann::json ds = nlohmann::json::parse(slurp(base / "dataset" / "manifest.json"));
  CHECK(ds.at("records").size() == 8);  // 4 subjects per class, 1 record each
}

TEST_CASE("ingest summarizes and re-saves a dataset byte-stably") {
  const fs::path out = dir("ingest_out");
  RunResult r = run_cli("ingest --data " + (synth_dir() / "dataset").string() +
                        " --out " + out.string());
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(out / "summary.json"));
  const nlohmann::json s = nlohmann::json::parse(slurp(out / "summary.json"));
  CHECK(s.at("records") == 8);
  CHECK(s.at("subjects") == 8);
  CHECK(s.at("labels").contains("PFPS"));
  CHECK(fs::exists(out / "dataset" / "manifest.json"));
  CHECK(slurp(out / "dataset" / "subjects.csv") ==
        slurp(synth_dir() / "dataset" / "subjects.csv"));
}

TEST_CASE("segment emits per-record event and stance tables") {
  const fs::path out = dir("segment_out");
  RunResult r = run_cli("segment --data " + (synth_dir() / "dataset").string() +
                        " --out " + out.string());
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists(out / "spatiotemporal.csv"));
  int event_files = 0, stance_files = 0;
  if (fs::exists(out / "events"))
    for (const auto& e : fs::directory_iterator(out / "events")) (void)e, ++event_files;
  if (fs::exists(out / "stance"))
    for (const auto& e : fs::directory_iterator(out / "stance")) (void)e, ++stance_files;
  CHECK(event_files == 8);
  CHECK(stance_files == 8);

  RunResult none = run_cli("segment --data " + (synth_dir() / "dataset").string() +
                           " --out " + dir("segment_none").string() +
                           " --record does_not_exist");
  CHECK(none.exit_code == 3);
  CHECK(none.err.find("EmptyResult") != std::string::npos);
}

TEST_CASE("features writes one row per record plus a schema") {
  const fs::path out = dir("features_out");
  RunResult r = run_cli("features --data " + (synth_dir() / "dataset").string() +
                        " --out " + out.string());
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(out / "features.csv"));
  REQUIRE(fs::exists(out / "schema.json"));
  const std::string csv = slurp(out / "features.csv");
  int lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == 9);  // header + 8 records
  CHECK(csv.find("record_id,subject_id,label,") == 0);
  CHECK(csv.find("stride_rate") != std::string::npos);
  const nlohmann::json schema = nlohmann::json::parse(slurp(out / "schema.json"));
  CHECK(schema.is_array());
  CHECK(schema.size() > 50);
  CHECK(schema[0].contains("name"));
  CHECK(schema[0].contains("family"));
}

TEST_CASE("train persists a model with its preprocessing") {
  const fs::path out = dir("train_out");
  RunResult r = run_cli("train --data " + (synth_dir() / "dataset").string() +
                        " --out " + out.string() +
                        " --model knn --task PFPS --regime points --no-grid --seed 3");
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists(out / "models" / "knn.json"));
  REQUIRE(fs::exists(out / "models" / "knn_preprocess.json"));
  const nlohmann::json pre =
      nlohmann::json::parse(slurp(out / "models" / "knn_preprocess.json"));
  CHECK(pre.contains("points"));
  const std::string hp = pre.at("hyperparameters").get<std::string>();
  CHECK(hp.find("knn(") == 0);
  CHECK(hp.find("k=7") != std::string::npos);
}

TEST_CASE("evaluate reports are byte-identical across reruns") {
  const std::string common = "evaluate --data " + (synth_dir() / "dataset").string() +
                             " --task PFPS --regime points --models svm_l"
                             " --folds 4 --no-grid --seed 9 --out ";
  const fs::path a = dir("eval_a");
  const fs::path b = dir("eval_b");
  RunResult ra = run_cli(common + a.string());
  REQUIRE(ra.exit_code == 0);
  RunResult rb = run_cli(common + b.string());
  REQUIRE(rb.exit_code == 0);
  REQUIRE(fs::exists(a / "report.json"));
  REQUIRE(fs::exists(a / "report.csv"));
  CHECK(slurp(a / "report.json") == slurp(b / "report.json"));
  CHECK(slurp(a / "report.csv") == slurp(b / "report.csv"));

  const nlohmann::json rep = nlohmann::json::parse(slurp(a / "report.json"));
  CHECK(rep.at("task") == "PFPS");
  CHECK(rep.at("regime") == "points");
  CHECK(rep.at("models").size() == 1);
  CHECK(rep.at("models")[0].at("model") == "svm_l");
  CHECK(rep.at("models")[0].at("folds").size() == 4);
}

TEST_CASE("config file values override command-line flags") {
  const fs::path cfg = g_root / "override.json";
  {
    std::ofstream f(cfg);
    f << "{\"seed\": 77}\n";
  }
  const fs::path out = dir("config_out");
  RunResult r = run_cli("synth --out " + out.string() +
                        " --subjects 2 --records 1 --strides 4 --rate 100 --seed 5"
                        " --config " + cfg.string());
  REQUIRE(r.exit_code == 0);
  const nlohmann::json m = nlohmann::json::parse(slurp(out / "manifest.json"));
  CHECK(m.at("seed") == 77);

  const fs::path bad = g_root / "bad.json";
  {
    std::ofstream f(bad);
    f << "{\"not_a_real_option\": 1}\n";
  }
  RunResult rb = run_cli("synth --out " + dir("config_bad").string() +
                         " --subjects 2 --config " + bad.string());
  CHECK(rb.exit_code == 2);
  CHECK(rb.err.find("UsageError") != std::string::npos);
}

TEST_CASE("incompatible model and regime is a usage error") {
  RunResult r = run_cli("evaluate --data " + (synth_dir() / "dataset").string() +
                        " --out " + dir("eval_bad").string() +
                        " --task PFPS --regime points --models cnn --folds 4");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("UsageError") != std::string::npos);
}

TEST_CASE("a missing dataset maps to a data error, not a crash") {
  RunResult r = run_cli("features --data " + (g_root / "nowhere").string() +
                        " --out " + dir("missing_out").string());
  CHECK(r.exit_code == 3);
  CHECK(r.err.find("\"error\"") != std::string::npos);
  CHECK(r.err.find("MissingFile") != std::string::npos);
}

TEST_CASE("explain produces a ranking for a classical model") {
  const fs::path out = dir("explain_out");
  RunResult r = run_cli("explain --data " + (synth_dir() / "dataset").string() +
                        " --out " + out.string() +
                        " --task PFPS --regime points --model svm_l"
                        " --permutations 100 --folds 4 --fold 0 --seed 11");
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(out / "maps" / "shapley_ranking.csv"));
  const std::string text = slurp(out / "maps" / "shapley_ranking.csv");
  CHECK(text.find("# method=shapley") == 0);
  CHECK(text.find("feature,phi") != std::string::npos);
  CHECK(text.find("stance_pct") != std::string::npos);
}

TEST_CASE("report merges evaluation outputs into one table") {
  // reuse eval_a from the rerun test; evaluate a second model set quickly
  const fs::path a = g_root / "eval_a";
  REQUIRE(fs::exists(a / "report.json"));
  const fs::path c = dir("eval_c");
  RunResult rc = run_cli("evaluate --data " + (synth_dir() / "dataset").string() +
                         " --task ITBS --regime points --models knn"
                         " --folds 4 --no-grid --seed 9 --out " + c.string());
  REQUIRE(rc.exit_code == 0);

  const fs::path merged = dir("merged");
  RunResult rm = run_cli("report --out " + merged.string() + " " +
                         (a / "report.json").string() + " " +
                         (c / "report.json").string());
  REQUIRE(rm.exit_code == 0);
  REQUIRE(fs::exists(merged / "report.csv"));
  const std::string csv = slurp(merged / "report.csv");
  CHECK(csv.find("svm_l") != std::string::npos);
  CHECK(csv.find("knn") != std::string::npos);
  CHECK(csv.find("PFPS") != std::string::npos);
  CHECK(csv.find("ITBS") != std::string::npos);
}

int main(int argc, char** argv) {
  if (argc >= 2 && argv[1][0] != '-') {
    g_cli = argv[1];
    for (int i = 1; i + 1 < argc; ++i) argv[i] = argv[i + 1];
    --argc;
  }
  if (g_cli.empty()) {
    std::fprintf(stderr, "usage: test_cli <path-to-cli-binary> [doctest args]\n");
    return 1;
  }
  g_root = fs::temp_directory_path() / "runpat_cli_tests";
  std::error_code ec;
  fs::remove_all(g_root, ec);
  fs::create_directories(g_root);

  doctest::Context ctx;
  ctx.applyCommandLine(argc, argv);
  return ctx.run();
}
