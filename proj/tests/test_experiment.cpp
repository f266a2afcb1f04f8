#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "txt/experiment.hpp"

using namespace txt;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

nlohmann::json read(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::set<fs::path> tree(const fs::path& root) {
  std::set<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) out.insert(e.path());
  return out;
}

ExperimentConfig tiny(Task task, const fs::path& out) {
  ExperimentConfig c;
  c.task = task;
  c.seed = 3;
  c.output_dir = out;
  c.dataset.scenes = 20;
  c.detector_training.epochs = 1;
  c.vqa.epochs = 2;
  c.vqa.frozen_epochs = 1;
  return c;
}

// One shared pipeline run: data, detector, extraction, calibration and both VQA modes.
class Pipeline : public ::testing::Test {
 protected:
  static fs::path root;
  static std::set<fs::path> outside_before;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "txt_experiment_pipeline";
    fs::remove_all(root);
    fs::create_directories(root);
    run_experiment(tiny(Task::kGenData, root / "data"));
    auto with_data = [](Task t, const std::string& dir) {
      ExperimentConfig c = tiny(t, root / dir);
      c.dataset_dir = root / "data" / "dataset";
      c.detector_checkpoint = root / "detector" / "detector.bin";
      return c;
    };
    run_experiment(with_data(Task::kDetectTrain, "detector"));
    run_experiment(with_data(Task::kExtract, "extract"));
    ExperimentConfig cal = with_data(Task::kCalibrate, "calibrate");
    cal.target_total = 100;
    run_experiment(cal);
    run_experiment(with_data(Task::kVqaFrozen, "frozen"));
    run_experiment(with_data(Task::kVqaEndToEnd, "e2e"));
  }
};

fs::path Pipeline::root;
std::set<fs::path> Pipeline::outside_before;

}  // namespace

TEST(ExperimentConfig, RejectsUnknownKeys) {
  EXPECT_THROW(ExperimentConfig::from_json({{"task", "profile"}, {"learning_rate", 1}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"detector", {{"widths", 3}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"task", "train"}}), ConfigError);
}

TEST(ExperimentConfig, JsonRoundTripAndNestedMerge) {
  const ExperimentConfig c = tiny(Task::kVqaGated, "somewhere");
  EXPECT_EQ(ExperimentConfig::from_json(c.to_json()).to_json(), c.to_json());
  const ExperimentConfig merged = ExperimentConfig::from_json({{"detector", {{"num_queries", 5}}}});
  EXPECT_EQ(merged.detector.num_queries, 5u);
  EXPECT_EQ(merged.detector.encoder_layers, desk_detector_config().encoder_layers);
}

TEST(ExperimentConfig, MissingCheckpointNamesKey) {
  const fs::path out = fs::temp_directory_path() / "txt_experiment_missing";
  fs::remove_all(out);
  try {
    run_experiment(tiny(Task::kExtract, out));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("detector_checkpoint"), std::string::npos);
  }
}

TEST(Profile, TwoConfigsGiveTwoReportsInOrder) {
  const fs::path out = fs::temp_directory_path() / "txt_experiment_profile";
  fs::remove_all(out);
  ExperimentConfig c = tiny(Task::kProfile, out);
  DetectorConfig multi = c.detector, single = c.detector;
  multi.encoder = EncoderVariant::multi_scale();
  single.encoder = EncoderVariant::single_scale();
  c.profile_configs = {multi, single};
  const nlohmann::json s = run_experiment(c);
  ASSERT_EQ(s.at("flops").size(), 2u);
  const nlohmann::json reports = read(out / "flops.json");
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0].at("total_macs").get<std::uint64_t>(), count_flops(multi, 64, 64).total_macs);
  EXPECT_EQ(reports[1].at("total_macs").get<std::uint64_t>(), count_flops(single, 64, 64).total_macs);
  EXPECT_NE(reports[0].at("name"), reports[1].at("name"));
  const std::string csv = slurp(out / "flops.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Profile, DefaultVariantsAreOrdered) {
  const fs::path out = fs::temp_directory_path() / "txt_experiment_profile_default";
  fs::remove_all(out);
  const nlohmann::json s = run_experiment(tiny(Task::kProfile, out));
  ASSERT_EQ(s.at("flops").size(), 5u);
  for (std::size_t i = 1; i < 5; ++i)
    EXPECT_LT(s.at("flops")[i - 1].at("total_flops").get<std::uint64_t>(),
              s.at("flops")[i].at("total_flops").get<std::uint64_t>());
}

TEST_F(Pipeline, FrozenAndEndToEndSummariesAreComparable) {
  const nlohmann::json f = read(root / "frozen" / "summary.json"), e = read(root / "e2e" / "summary.json");
  EXPECT_EQ(f.at("mode"), "frozen");
  EXPECT_EQ(e.at("mode"), "e2e");
  EXPECT_EQ(f.at("chance"), e.at("chance"));
  EXPECT_EQ(f.at("epoch_accuracy").size(), e.at("epoch_accuracy").size());
  for (const auto* s : {&f, &e}) {
    const double acc = s->at("accuracy").get<double>();
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
  EXPECT_TRUE(fs::exists(root / "e2e" / "detector_tuned.bin"));
  EXPECT_FALSE(fs::exists(root / "frozen" / "detector_tuned.bin"));
}

TEST_F(Pipeline, CalibrationHitsReachableTarget) {
  const nlohmann::json s = read(root / "calibrate" / "summary.json");
  const nlohmann::json cal = read(root / "calibrate" / "calibration.json");
  EXPECT_EQ(s.at("target_total"), 100);
  EXPECT_EQ(cal.at("deviation").get<std::size_t>(),
            static_cast<std::size_t>(std::llabs(static_cast<long long>(cal.at("total").get<std::size_t>()) - 100)));
  std::size_t total = 0;
  const auto hist = s.at("regions").at("histogram").get<std::vector<std::size_t>>();
  const std::size_t first = s.at("regions").at("first_bin").get<std::size_t>();
  for (std::size_t i = 0; i < hist.size(); ++i) total += (first + i) * hist[i];
  EXPECT_EQ(total, cal.at("total").get<std::size_t>());
}

TEST_F(Pipeline, ReportRowsHistogramsAndRegeneration) {
  const std::vector<fs::path> runs{root / "extract", root / "frozen", root / "e2e", root / "never_ran"};
  const std::string md = emit_report(runs, root / "report");
  std::size_t rows = 0;
  std::istringstream lines(md);
  for (std::string line; std::getline(lines, line);) rows += line.rfind("| ", 0) == 0 && line.find("---") == std::string::npos;
  EXPECT_EQ(rows, 1 + runs.size());
  EXPECT_NE(md.find("| never_ran | absent |"), std::string::npos);
  EXPECT_NE(md.find("| frozen | vqa-frozen |"), std::string::npos);

  std::istringstream hist(slurp(root / "report" / "histograms.csv"));
  std::string line;
  std::getline(hist, line);
  EXPECT_EQ(line, "run,bin,count");
  std::size_t images = 0;
  while (std::getline(hist, line)) {
    EXPECT_EQ(line.rfind("extract,", 0), 0u);
    images += std::stoul(line.substr(line.rfind(',') + 1));
  }
  EXPECT_EQ(images, 20u);

  const std::string first_md = slurp(root / "report" / "report.md"), first_csv = slurp(root / "report" / "histograms.csv");
  emit_report(runs, root / "report");
  EXPECT_EQ(slurp(root / "report" / "report.md"), first_md);
  EXPECT_EQ(slurp(root / "report" / "histograms.csv"), first_csv);
}

TEST_F(Pipeline, AttributionReadsBothCheckpoints) {
  ExperimentConfig c = tiny(Task::kAttribute, root / "attribute");
  c.dataset_dir = root / "data" / "dataset";
  c.detector_checkpoint = root / "e2e" / "detector_tuned.bin";
  c.lm_checkpoint = root / "e2e" / "lm.bin";
  c.scene = 17;
  const nlohmann::json s = run_experiment(c);
  EXPECT_EQ(s.at("scene"), 17);
  const std::string csv = slurp(root / "attribute" / "attribution.csv");
  EXPECT_EQ(csv.rfind("object,cx,cy,w,h,score,salient\n", 0), 0u);
}

TEST_F(Pipeline, EveryArtifactStaysUnderItsOutputDir) {
  for (const char* dir : {"data", "detector", "extract", "calibrate", "frozen", "e2e"}) {
    const fs::path base = fs::weakly_canonical(root / dir);
    for (const auto& p : tree(root / dir)) {
      const std::string rel = fs::relative(fs::weakly_canonical(p), base).string();
      EXPECT_NE(rel.rfind("..", 0), 0u) << p;
    }
    EXPECT_TRUE(fs::exists(root / dir / "summary.json"));
    EXPECT_TRUE(fs::exists(root / dir / "config.json"));
  }
  const ExperimentConfig c = tiny(Task::kGenData, root / "isolated");
  std::set<fs::path> before;
  for (const auto& e : fs::directory_iterator(root)) before.insert(e.path());
  run_experiment(c);
  std::set<fs::path> after;
  for (const auto& e : fs::directory_iterator(root)) after.insert(e.path());
  before.insert(root / "isolated");
  EXPECT_EQ(after, before);
}

#ifdef TXT_CLI_PATH
namespace {

int run_cli(const std::string& args, const fs::path& stderr_file) {
  const std::string cmd = std::string(TXT_CLI_PATH) + " " + args + " >/dev/null 2>" + stderr_file.string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_F(Pipeline, CliCalibrateOutOfRangeExitsTwoNamingBounds) {
  const fs::path cfg = root / "cli.json";
  std::ofstream(cfg) << tiny(Task::kCalibrate, root / "unused").to_json().dump();
  const fs::path err = root / "cli_err.txt";
  const int rc = run_cli("calibrate --config " + cfg.string() + " --dataset " + (root / "data" / "dataset").string() +
                             " --detector " + (root / "detector" / "detector.bin").string() + " --target 5000 --out " +
                             (root / "cli_calibrate").string(),
                         err);
  EXPECT_EQ(rc, 2);
  // 20 images clamped to [2, 8] regions each.
  EXPECT_NE(slurp(err).find("[40, 160]"), std::string::npos) << slurp(err);
}

TEST_F(Pipeline, CliRejectsBadArgumentsWithExitOne) {
  const fs::path err = root / "cli_err_mode.txt";
  EXPECT_EQ(run_cli("train-vqa --mode joint --out " + (root / "cli_mode").string(), err), 1);
  EXPECT_EQ(run_cli("extract --out " + (root / "cli_extract").string(), err), 1);
  EXPECT_NE(slurp(err).find("detector_checkpoint"), std::string::npos) << slurp(err);
}
#endif
