#pragma once

// Deterministic geometric scenes with programmatic questions, standing in for
// a real detection and VQA corpus.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "txt/fusion.hpp"
#include "txt/set_loss.hpp"

namespace txt {

enum class QuestionType { kCount, kExist, kColor };

std::string to_string(QuestionType t);

struct SceneObject {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::array<double, 4> box{};  // normalized (cx, cy, w, h)
};

struct Question {
  QuestionType type = QuestionType::kCount;
  std::size_t shape = 0;
  std::size_t color = 0;  // used by existence questions
  std::vector<std::string> words;
  std::vector<std::size_t> tokens;
  std::size_t answer = 0;
};

struct Scene {
  std::vector<SceneObject> objects;
  Question question;
};

/// Closed vocabularies shared by the generator and the language model.
const std::vector<std::string>& shape_names();
const std::vector<std::string>& color_names();
const std::vector<std::string>& question_vocabulary();
const std::vector<std::string>& answer_vocabulary();
std::size_t token_id(const std::string& word);
std::size_t answer_id(const std::string& answer);

struct DatasetSpec {
  std::size_t image_size = 64;
  std::size_t scenes = 2000;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  std::size_t min_object_size = 14;
  std::size_t max_object_size = 22;
  std::vector<std::string> shapes{"square", "circle", "triangle"};
  std::vector<std::string> colors{"red", "green", "blue"};
  std::vector<std::string> question_types{"count", "exist", "color"};
  double train_fraction = 0.8;

  /// Throws ConfigError naming every offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
};

struct Dataset {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  std::vector<Scene> scenes;
  std::vector<std::uint8_t> pixels;  // [scenes, H, W, 3]

  std::size_t train_size() const;
  /// [H, W, 3] in [0, 1].
  Tensor image(std::size_t index) const;
  GroundTruth ground_truth(std::size_t index) const;
  TokenSequence question(std::size_t index) const;
  /// One-hot answer target over answer_vocabulary().
  Tensor answer_target(std::size_t index) const;
};

/// Scene law: object count uniform on [min, max]; shape, colour and size
/// uniform and independent; non-overlapping placement by rejection. Question
/// type uniform; count and existence questions draw their shape (and colour)
/// uniformly; colour questions pick uniformly among shapes present exactly
/// once and fall back to a count question when there is none.
Dataset generate_synthetic_dataset(const DatasetSpec& spec, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Relative frequency of the most common answer over scenes [begin, end).
double majority_answer_rate(const Dataset& data, std::size_t begin, std::size_t end);

}  // namespace txt
