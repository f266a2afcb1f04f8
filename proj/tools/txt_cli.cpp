#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "txt/experiment.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::string detector;
  std::string lm;
  std::string mode = "frozen";
  std::optional<std::size_t> target;
  std::optional<std::size_t> scene;
  std::optional<std::size_t> answer;
  std::vector<std::string> runs;
};

txt::ExperimentConfig build_config(const std::string& verb, const Options& o) {
  txt::ExperimentConfig c = o.config.empty() ? txt::ExperimentConfig{} : txt::ExperimentConfig::load(o.config);
  if (verb == "train-vqa") {
    const txt::VqaMode m = txt::parse_vqa_mode(o.mode);
    c.task = m == txt::VqaMode::kFrozen     ? txt::Task::kVqaFrozen
             : m == txt::VqaMode::kEndToEnd ? txt::Task::kVqaEndToEnd
                                            : txt::Task::kVqaGated;
  } else {
    c.task = txt::parse_task(verb);
  }
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  if (!o.dataset.empty()) c.dataset_dir = o.dataset;
  if (!o.detector.empty()) c.detector_checkpoint = o.detector;
  if (!o.lm.empty()) c.lm_checkpoint = o.lm;
  if (o.target) c.target_total = *o.target;
  if (o.scene) c.scene = *o.scene;
  if (o.answer) c.answer = *o.answer;
  if (!o.runs.empty()) c.report_runs.assign(o.runs.begin(), o.runs.end());
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crossmodal detection and question-answering experiments"};
  app.require_subcommand(1);
  Options o;

  const std::vector<std::pair<std::string, std::string>> verbs{
      {"gen-data", "Generate the synthetic scene corpus"},
      {"train-detector", "Train the detector on the synthetic corpus"},
      {"extract", "Extract regions at a fixed threshold and histogram the counts"},
      {"calibrate", "Find the threshold whose total region count is closest to --target"},
      {"train-vqa", "Train the question-answering model on detector outputs"},
      {"profile", "Count operations of detector variants"},
      {"attribute", "Attribute an answer to the detected regions"},
      {"report", "Summarize finished runs"},
  };
  for (const auto& [name, help] : verbs) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Seed for data and initialization");
    sub->add_option("--out", o.out, "Output directory");
    if (name != "gen-data" && name != "profile" && name != "report")
      sub->add_option("--dataset", o.dataset, "Dataset directory written by gen-data");
    if (name == "extract" || name == "calibrate" || name == "train-vqa" || name == "attribute")
      sub->add_option("--detector", o.detector, "Detector checkpoint (detector.bin)");
    if (name == "attribute") {
      sub->add_option("--lm", o.lm, "Language model checkpoint (lm.bin)");
      sub->add_option("--scene", o.scene, "Scene index");
      sub->add_option("--answer", o.answer, "Answer index (defaults to the ground truth)");
    }
    if (name == "calibrate") sub->add_option("--target", o.target, "Target total region count");
    if (name == "train-vqa")
      sub->add_option("--mode", o.mode, "Training mode")->check(CLI::IsMember({"frozen", "e2e", "gated"}));
    if (name == "report") sub->add_option("--runs", o.runs, "Run directories to compare");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  txt::ExperimentConfig config;
  try {
    config = build_config(verb, o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  try {
    const nlohmann::json summary = txt::run_experiment(config);
    std::cout << summary.dump(2) << '\n';
  } catch (const txt::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
