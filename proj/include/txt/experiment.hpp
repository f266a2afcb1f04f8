#pragma once

// Task runner behind the command-line tool: every task reads one config,
// writes its artifacts under the output directory and returns a summary.

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "txt/profiler.hpp"
#include "txt/regions.hpp"
#include "txt/training.hpp"

namespace txt {

enum class Task {
  kGenData,
  kDetectTrain,
  kExtract,
  kCalibrate,
  kVqaFrozen,
  kVqaEndToEnd,
  kVqaGated,
  kProfile,
  kAttribute,
  kReport,
};

std::string to_string(Task task);
Task parse_task(std::string_view text);

/// Small deformable detector used by the desk-scale experiments.
DetectorConfig desk_detector_config();
/// Language model sized for the synthetic question vocabulary.
LanguageModelConfig desk_language_model_config(std::size_t object_feature_dim);
DetectorTrainConfig desk_detector_training();
VqaTrainConfig desk_vqa_training(VqaMode mode);
DatasetSpec desk_dataset_spec();

struct ExperimentConfig {
  Task task = Task::kGenData;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";

  DatasetSpec dataset = desk_dataset_spec();
  std::optional<std::filesystem::path> dataset_dir;
  DetectorConfig detector = desk_detector_config();
  DetectorTrainConfig detector_training = desk_detector_training();
  std::optional<std::filesystem::path> detector_checkpoint;
  std::optional<LanguageModelConfig> language_model;
  VqaTrainConfig vqa = desk_vqa_training(VqaMode::kFrozen);
  std::optional<std::filesystem::path> lm_checkpoint;
  /// Region bounds sized for the desk detector's query count.
  ExtractionConfig extraction{0.5, 2, 8};
  std::size_t target_total = 0;
  std::vector<DetectorConfig> profile_configs;
  std::size_t profile_height = 64;
  std::size_t profile_width = 64;
  std::size_t scene = 0;
  std::optional<std::size_t> answer;
  std::vector<std::filesystem::path> report_runs;

  LanguageModelConfig lm_config() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Writes `j` as one line of JSON.
class JsonLinesWriter {
 public:
  explicit JsonLinesWriter(const std::filesystem::path& path);
  void operator()(const nlohmann::json& j);
  MetricSink sink();

 private:
  std::shared_ptr<std::ofstream> out_;
};

/// Loads a detector checkpoint written by the detector-training task; the
/// configuration comes from the adjacent detector.json when present.
Detector load_detector(const std::filesystem::path& checkpoint, const DetectorConfig& fallback);
void save_detector(const Detector& detector, const std::filesystem::path& dir, const std::string& stem);

/// Per-image confidences of every scene.
std::vector<std::vector<double>> corpus_confidences(const Detector& detector, const Dataset& data);

/// Runs `config.task`; returns the summary that is also written to
/// summary.json in the output directory.
nlohmann::json run_experiment(const ExperimentConfig& config);

/// Markdown comparison of the summaries found in `runs`, also written to
/// out_dir/report.md together with out_dir/histograms.csv.
std::string emit_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out_dir);

struct VqaComparison {
  double chance = 0.0;
  double frozen = 0.0;
  double end_to_end = 0.0;
};

/// Dataset, detector pre-training, then frozen and end-to-end VQA training
/// from the same pre-trained detector. Metrics land in out_dir.
VqaComparison run_vqa_comparison(const ExperimentConfig& config, std::uint64_t seed,
                                 const std::filesystem::path& out_dir);

}  // namespace txt
