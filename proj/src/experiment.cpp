#include "txt/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace txt {

namespace fs = std::filesystem;

namespace {

constexpr std::pair<Task, const char*> kTaskNames[] = {
    {Task::kGenData, "gen-data"},       {Task::kDetectTrain, "train-detector"}, {Task::kExtract, "extract"},
    {Task::kCalibrate, "calibrate"},    {Task::kVqaFrozen, "vqa-frozen"},       {Task::kVqaEndToEnd, "vqa-e2e"},
    {Task::kVqaGated, "vqa-gated"},     {Task::kProfile, "profile"},            {Task::kAttribute, "attribute"},
    {Task::kReport, "report"},
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string to_string(Task task) {
  for (const auto& [t, name] : kTaskNames)
    if (t == task) return name;
  return "gen-data";
}

Task parse_task(std::string_view text) {
  for (const auto& [t, name] : kTaskNames)
    if (text == name) return t;
  throw ConfigError("unknown task '" + std::string(text) + "'");
}

DetectorConfig desk_detector_config() {
  DetectorConfig c;
  c.backbone_widths = {16, 32, 64, 64};
  c.attention = {32, 4, 64, 4, 4};
  c.encoder_layers = 2;
  c.decoder_layers = 3;
  c.num_queries = 8;
  c.num_classes = 3;
  c.encoder = EncoderVariant::query_stride(16);
  c.box_refinement = false;
  c.loss = ClassLossKind::kCrossEntropy;
  c.context = ContextMode::kNone;
  return c;
}

LanguageModelConfig desk_language_model_config(std::size_t object_feature_dim) {
  LanguageModelConfig c;
  c.vocab_size = question_vocabulary().size();
  c.max_length = 8;
  c.segments = 2;
  c.width = 48;
  c.heads = 4;
  c.ffn_dim = 96;
  c.layers = 2;
  c.answers = answer_vocabulary().size();
  c.head_hidden = 96;
  c.object_feature_dim = object_feature_dim;
  return c;
}

DetectorTrainConfig desk_detector_training() {
  DetectorTrainConfig c;
  c.epochs = 10;
  c.lr = 1e-3;
  c.backbone_lr = 1e-3;
  c.warmup_steps = 20;
  c.accumulation = 4;
  return c;
}

VqaTrainConfig desk_vqa_training(VqaMode mode) {
  VqaTrainConfig c;
  c.mode = mode;
  c.epochs = 12;
  c.frozen_epochs = 2;
  c.lm_lr = 1e-3;
  c.detector_lr = 1e-4;
  c.backbone_lr = 1e-3;
  c.warmup_steps = 20;
  c.accumulation = 4;
  return c;
}

DatasetSpec desk_dataset_spec() {
  DatasetSpec s;
  s.scenes = 5000;
  return s;
}

LanguageModelConfig ExperimentConfig::lm_config() const {
  return language_model.value_or(desk_language_model_config(detector.feature_width(vqa.context)));
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["task"] = to_string(task);
  j["seed"] = seed;
  j["output_dir"] = output_dir.string();
  j["dataset"] = dataset.to_json();
  if (dataset_dir) j["dataset_dir"] = dataset_dir->string();
  j["detector"] = detector.to_json();
  j["detector_training"] = detector_training.to_json();
  if (detector_checkpoint) j["detector_checkpoint"] = detector_checkpoint->string();
  j["language_model"] = lm_config().to_json();
  j["vqa"] = vqa.to_json();
  if (lm_checkpoint) j["lm_checkpoint"] = lm_checkpoint->string();
  j["extraction"] = {{"threshold", extraction.threshold},
                     {"min_regions", extraction.min_regions},
                     {"max_regions", extraction.max_regions}};
  j["target_total"] = target_total;
  j["profile_configs"] = nlohmann::json::array();
  for (const auto& c : profile_configs) j["profile_configs"].push_back(c.to_json());
  j["profile_height"] = profile_height;
  j["profile_width"] = profile_width;
  j["scene"] = scene;
  if (answer) j["answer"] = *answer;
  j["report_runs"] = nlohmann::json::array();
  for (const auto& r : report_runs) j["report_runs"].push_back(r.string());
  return j;
}

namespace {

// Overlays `override` on `defaults`, rejecting keys the defaults do not have.
void overlay(nlohmann::json& defaults, const nlohmann::json& override, const std::string& section) {
  if (!override.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : override.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
    nlohmann::json& slot = defaults[key];
    if (slot.is_object() && value.is_object()) {
      overlay(slot, value, section + "." + key);
    } else {
      slot = value;
    }
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known{
      "task",         "seed",       "output_dir",     "dataset",        "dataset_dir",   "detector",
      "detector_training", "detector_checkpoint", "language_model", "vqa", "lm_checkpoint", "extraction",
      "target_total", "profile_configs", "profile_height", "profile_width", "scene", "answer", "report_runs"};
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  ExperimentConfig c;
  try {
    if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("dataset")) {
      nlohmann::json merged = c.dataset.to_json();
      overlay(merged, j.at("dataset"), "dataset");
      c.dataset = DatasetSpec::from_json(merged);
    }
    if (j.contains("dataset_dir")) c.dataset_dir = j.at("dataset_dir").get<std::string>();
    if (j.contains("detector")) {
      nlohmann::json merged = c.detector.to_json();
      overlay(merged, j.at("detector"), "detector");
      c.detector = DetectorConfig::from_json(merged);
    }
    if (j.contains("detector_training")) {
      nlohmann::json merged = c.detector_training.to_json();
      overlay(merged, j.at("detector_training"), "detector_training");
      c.detector_training = DetectorTrainConfig::from_json(merged);
    }
    if (j.contains("detector_checkpoint")) c.detector_checkpoint = j.at("detector_checkpoint").get<std::string>();
    if (j.contains("vqa")) {
      nlohmann::json merged = c.vqa.to_json();
      overlay(merged, j.at("vqa"), "vqa");
      c.vqa = VqaTrainConfig::from_json(merged);
    }
    if (j.contains("language_model")) {
      nlohmann::json merged = c.lm_config().to_json();
      overlay(merged, j.at("language_model"), "language_model");
      c.language_model = LanguageModelConfig::from_json(merged);
    }
    if (j.contains("lm_checkpoint")) c.lm_checkpoint = j.at("lm_checkpoint").get<std::string>();
    if (j.contains("extraction")) {
      const auto& e = j.at("extraction");
      nlohmann::json known_extraction{{"threshold", 0}, {"min_regions", 0}, {"max_regions", 0}};
      overlay(known_extraction, e, "extraction");
      if (e.contains("threshold")) c.extraction.threshold = e.at("threshold").get<double>();
      if (e.contains("min_regions")) c.extraction.min_regions = e.at("min_regions").get<std::size_t>();
      if (e.contains("max_regions")) c.extraction.max_regions = e.at("max_regions").get<std::size_t>();
    }
    if (j.contains("target_total")) c.target_total = j.at("target_total").get<std::size_t>();
    if (j.contains("profile_configs"))
      for (const auto& p : j.at("profile_configs")) {
        nlohmann::json merged = c.detector.to_json();
        overlay(merged, p, "profile_configs");
        c.profile_configs.push_back(DetectorConfig::from_json(merged));
      }
    if (j.contains("profile_height")) c.profile_height = j.at("profile_height").get<std::size_t>();
    if (j.contains("profile_width")) c.profile_width = j.at("profile_width").get<std::size_t>();
    if (j.contains("scene")) c.scene = j.at("scene").get<std::size_t>();
    if (j.contains("answer")) c.answer = j.at("answer").get<std::size_t>();
    if (j.contains("report_runs"))
      for (const auto& r : j.at("report_runs")) c.report_runs.emplace_back(r.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.extraction.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_json(read_json(path)); }

JsonLinesWriter::JsonLinesWriter(const fs::path& path)
    : out_(std::make_shared<std::ofstream>(path, std::ios::binary | std::ios::trunc)) {
  if (!*out_) throw std::runtime_error("cannot write " + path.string());
}

void JsonLinesWriter::operator()(const nlohmann::json& j) { *out_ << j.dump() << '\n'; }

MetricSink JsonLinesWriter::sink() {
  auto out = out_;
  return [out](const nlohmann::json& j) { *out << j.dump() << '\n'; };
}

void save_detector(const Detector& detector, const fs::path& dir, const std::string& stem) {
  fs::create_directories(dir);
  save_tensors(dir / (stem + ".bin"), detector.parameters());
  write_json(dir / (stem + ".json"), detector.config().to_json());
}

Detector load_detector(const fs::path& checkpoint, const DetectorConfig& fallback) {
  if (!fs::exists(checkpoint)) throw std::runtime_error("detector checkpoint " + checkpoint.string() + " not found");
  fs::path cfg_path = checkpoint;
  cfg_path.replace_extension(".json");
  const DetectorConfig cfg = fs::exists(cfg_path) ? DetectorConfig::from_json(read_json(cfg_path)) : fallback;
  Detector det(cfg, 0);
  assign_tensors(det.parameters(), load_tensors(checkpoint));
  return det;
}

namespace {

LanguageModel load_language_model(const fs::path& checkpoint, const LanguageModelConfig& fallback) {
  if (!fs::exists(checkpoint)) throw std::runtime_error("language model checkpoint " + checkpoint.string() + " not found");
  fs::path cfg_path = checkpoint;
  cfg_path.replace_extension(".json");
  const LanguageModelConfig cfg = fs::exists(cfg_path) ? LanguageModelConfig::from_json(read_json(cfg_path)) : fallback;
  LanguageModel lm(cfg, 0);
  assign_tensors(lm.parameters(), load_tensors(checkpoint));
  return lm;
}

Dataset obtain_dataset(const ExperimentConfig& c) {
  return c.dataset_dir ? load_dataset(*c.dataset_dir) : generate_synthetic_dataset(c.dataset, c.seed);
}

const fs::path& require(const std::optional<fs::path>& p, const char* key, Task task) {
  if (!p) throw ConfigError(std::string(key) + " is required for task " + to_string(task));
  return *p;
}

std::string histogram_csv(const RegionStats& s) { return s.csv(); }

nlohmann::json region_summary(const RegionStats& s, double threshold) {
  nlohmann::json j = s.summary(threshold);
  j["histogram"] = s.histogram;
  j["first_bin"] = s.first_bin;
  return j;
}

std::vector<std::size_t> counts_at(const std::vector<std::vector<double>>& conf, double threshold,
                                   const ExtractionConfig& cfg) {
  std::vector<std::size_t> counts;
  for (const auto& c : conf) counts.push_back(extracted_count(c, threshold, cfg));
  return counts;
}

std::vector<DetectorConfig> default_profile_configs(const DetectorConfig& base) {
  std::vector<DetectorConfig> out;
  for (const char* v : {"single", "stride-32", "stride-16", "stride-8", "multi"}) {
    DetectorConfig c = base;
    c.kind = DetectorKind::kDeformable;
    c.encoder = EncoderVariant::parse(v);
    out.push_back(c);
  }
  return out;
}

VqaMode mode_of(Task t) {
  return t == Task::kVqaGated ? VqaMode::kGated : t == Task::kVqaEndToEnd ? VqaMode::kEndToEnd : VqaMode::kFrozen;
}

}  // namespace

std::vector<std::vector<double>> corpus_confidences(const Detector& detector, const Dataset& data) {
  NoGradGuard guard;
  std::vector<std::vector<double>> out;
  out.reserve(data.scenes.size());
  for (std::size_t i = 0; i < data.scenes.size(); ++i) {
    const DetectorOutput o = detector.forward(data.image(i));
    out.emplace_back(o.detections.confidence.data().begin(), o.detections.confidence.data().end());
  }
  return out;
}

nlohmann::json run_experiment(const ExperimentConfig& config) {
  const fs::path& out = config.output_dir;
  fs::create_directories(out);
  write_json(out / "config.json", config.to_json());
  nlohmann::json summary{{"task", to_string(config.task)}, {"seed", config.seed}};

  switch (config.task) {
    case Task::kGenData: {
      const Dataset data = generate_synthetic_dataset(config.dataset, config.seed);
      save_dataset(data, out / "dataset");
      summary["scenes"] = data.scenes.size();
      summary["train_scenes"] = data.train_size();
      summary["chance"] = majority_answer_rate(data, data.train_size(), data.scenes.size());
      break;
    }
    case Task::kDetectTrain: {
      const Dataset data = obtain_dataset(config);
      Detector det(config.detector, config.seed);
      JsonLinesWriter metrics(out / "metrics.jsonl");
      const double loss = train_detector(det, data, config.detector_training, metrics.sink());
      save_detector(det, out, "detector");
      summary["loss"] = loss;
      break;
    }
    case Task::kExtract:
    case Task::kCalibrate: {
      const Detector det = load_detector(require(config.detector_checkpoint, "detector_checkpoint", config.task),
                                         config.detector);
      const Dataset data = obtain_dataset(config);
      const auto conf = corpus_confidences(det, data);
      double threshold = config.extraction.threshold;
      if (config.task == Task::kCalibrate) {
        if (config.target_total == 0) throw ConfigError("target_total is required for calibrate");
        const Calibration cal = calibrate_threshold(conf, config.target_total, config.extraction);
        threshold = cal.threshold;
        summary["target_total"] = config.target_total;
        summary["deviation"] = cal.deviation;
        write_json(out / "calibration.json",
                   {{"threshold", cal.threshold}, {"total", cal.total}, {"deviation", cal.deviation}});
      }
      const RegionStats stats = region_histogram(counts_at(conf, threshold, config.extraction), config.extraction);
      write_text(out / "histogram.csv", histogram_csv(stats));
      std::ostringstream counts;
      counts << "image,count\n";
      for (std::size_t i = 0; i < stats.counts.size(); ++i) counts << i << ',' << stats.counts[i] << '\n';
      write_text(out / "counts.csv", counts.str());
      summary["regions"] = region_summary(stats, threshold);
      break;
    }
    case Task::kVqaFrozen:
    case Task::kVqaEndToEnd:
    case Task::kVqaGated: {
      Detector det = load_detector(require(config.detector_checkpoint, "detector_checkpoint", config.task),
                                   config.detector);
      const Dataset data = obtain_dataset(config);
      VqaTrainConfig vqa = config.vqa;
      vqa.mode = mode_of(config.task);
      const LanguageModelConfig lm_cfg =
          config.language_model.value_or(desk_language_model_config(det.config().feature_width(vqa.context)));
      LanguageModel lm(lm_cfg, config.seed + 1);
      JsonLinesWriter metrics(out / "metrics.jsonl");
      const VqaResult r = train_vqa(det, lm, data, vqa, config.seed, metrics.sink());
      save_tensors(out / "lm.bin", lm.parameters());
      write_json(out / "lm.json", lm.config().to_json());
      if (vqa.mode != VqaMode::kFrozen) save_detector(det, out, "detector_tuned");
      summary["mode"] = to_string(vqa.mode);
      summary["accuracy"] = r.accuracy;
      summary["loss"] = r.final_loss;
      summary["epoch_accuracy"] = r.epoch_accuracy;
      summary["chance"] = majority_answer_rate(data, data.train_size(), data.scenes.size());
      break;
    }
    case Task::kProfile: {
      const auto configs = config.profile_configs.empty() ? default_profile_configs(config.detector)
                                                          : config.profile_configs;
      nlohmann::json reports = nlohmann::json::array(), brief = nlohmann::json::array();
      std::ostringstream csv;
      csv << "name,total_macs,total_flops,backbone,input_proj,encoder,decoder,heads\n";
      for (const auto& c : configs) {
        const FlopReport r = count_flops(c, config.profile_height, config.profile_width);
        const std::string name = to_string(c.kind) + ":" + c.encoder.name();
        nlohmann::json j = r.to_json();
        j["name"] = name;
        reports.push_back(j);
        brief.push_back({{"name", name}, {"total_flops", r.flops()}});
        csv << name << ',' << r.total_macs << ',' << r.flops() << ',' << r.macs("backbone") << ','
            << r.macs("input_proj") << ',' << r.macs("encoder") << ',' << r.macs("decoder") << ','
            << r.macs("heads") << '\n';
      }
      write_json(out / "flops.json", reports);
      write_text(out / "flops.csv", csv.str());
      summary["flops"] = brief;
      break;
    }
    case Task::kAttribute: {
      const Detector det = load_detector(require(config.detector_checkpoint, "detector_checkpoint", config.task),
                                         config.detector);
      const LanguageModel lm =
          load_language_model(require(config.lm_checkpoint, "lm_checkpoint", config.task),
                              config.language_model.value_or(
                                  desk_language_model_config(det.config().feature_width(config.vqa.context))));
      const Dataset data = obtain_dataset(config);
      if (config.scene >= data.scenes.size()) throw ConfigError("scene index out of range");
      const std::size_t answer = config.answer.value_or(data.scenes[config.scene].question.answer);
      const Attribution a =
          region_attribution(det, lm, data.image(config.scene), data.question(config.scene), answer, config.vqa);
      write_text(out / "attribution.csv", a.csv());
      summary["scene"] = config.scene;
      summary["answer"] = answer_vocabulary().at(answer);
      summary["salient"] = std::count(a.salient.begin(), a.salient.end(), true);
      summary["all_zero"] = a.all_zero;
      break;
    }
    case Task::kReport: {
      summary["report"] = emit_report(config.report_runs, out);
      break;
    }
  }
  write_json(out / "summary.json", summary);
  return summary;
}

std::string emit_report(const std::vector<fs::path>& runs, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ostringstream md, hist, flops;
  md << "| run | task | accuracy | chance | loss | FLOPs | regions mean | skewness | threshold |\n";
  md << "|---|---|---|---|---|---|---|---|---|\n";
  hist << "run,bin,count\n";
  bool any_flops = false;
  for (const auto& run : runs) {
    const std::string name = run.filename().empty() ? run.parent_path().filename().string() : run.filename().string();
    const fs::path path = run / "summary.json";
    if (!fs::exists(path)) {
      md << "| " << name << " | absent | | | | | | | |\n";
      continue;
    }
    const nlohmann::json s = read_json(path);
    auto num = [&](const nlohmann::json& obj, const char* key) {
      return obj.contains(key) && obj.at(key).is_number() ? fixed(obj.at(key).get<double>()) : std::string();
    };
    std::string flops_cell, mean, skew, thr;
    if (s.contains("flops")) {
      any_flops = true;
      for (const auto& f : s.at("flops")) {
        flops << "| " << name << " | " << f.at("name").get<std::string>() << " | " << f.at("total_flops").get<std::uint64_t>()
              << " |\n";
      }
      flops_cell = std::to_string(s.at("flops").size()) + " configs";
    }
    if (s.contains("regions")) {
      const auto& r = s.at("regions");
      mean = num(r, "mean");
      skew = num(r, "skewness");
      thr = num(r, "threshold");
      const std::size_t first = r.at("first_bin").get<std::size_t>();
      const auto counts = r.at("histogram").get<std::vector<std::size_t>>();
      for (std::size_t i = 0; i < counts.size(); ++i) hist << name << ',' << first + i << ',' << counts[i] << '\n';
    }
    md << "| " << name << " | " << s.value("task", std::string()) << " | " << num(s, "accuracy") << " | "
       << num(s, "chance") << " | " << num(s, "loss") << " | " << flops_cell << " | " << mean << " | " << skew << " | "
       << thr << " |\n";
  }
  if (any_flops) md << "\n| run | config | FLOPs |\n|---|---|---|\n" << flops.str();
  write_text(out_dir / "report.md", md.str());
  write_text(out_dir / "histograms.csv", hist.str());
  return md.str();
}

VqaComparison run_vqa_comparison(const ExperimentConfig& config, std::uint64_t seed, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const Dataset data = generate_synthetic_dataset(config.dataset, seed);
  Detector pretrained(config.detector, seed);
  {
    JsonLinesWriter metrics(out_dir / "detector_metrics.jsonl");
    train_detector(pretrained, data, config.detector_training, metrics.sink());
  }
  VqaComparison result;
  result.chance = majority_answer_rate(data, data.train_size(), data.scenes.size());
  for (VqaMode mode : {VqaMode::kFrozen, VqaMode::kEndToEnd}) {
    Detector det(config.detector, seed);
    assign_tensors(det.parameters(), pretrained.parameters());
    VqaTrainConfig vqa = config.vqa;
    vqa.mode = mode;
    const LanguageModelConfig lm_cfg =
        config.language_model.value_or(desk_language_model_config(det.config().feature_width(vqa.context)));
    LanguageModel lm(lm_cfg, seed + 1);
    JsonLinesWriter metrics(out_dir / (to_string(mode) + "_metrics.jsonl"));
    const VqaResult r = train_vqa(det, lm, data, vqa, seed, metrics.sink());
    (mode == VqaMode::kFrozen ? result.frozen : result.end_to_end) = r.accuracy;
  }
  write_json(out_dir / "comparison.json",
             {{"seed", seed}, {"chance", result.chance}, {"frozen", result.frozen}, {"e2e", result.end_to_end}});
  return result;
}

}  // namespace txt
