#include "txt/synthetic.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace txt {

std::string to_string(QuestionType t) {
  switch (t) {
    case QuestionType::kCount: return "count";
    case QuestionType::kExist: return "exist";
    case QuestionType::kColor: return "color";
  }
  return "count";
}

namespace {

QuestionType parse_question_type(const std::string& s) {
  for (auto t : {QuestionType::kCount, QuestionType::kExist, QuestionType::kColor})
    if (s == to_string(t)) return t;
  throw ConfigError("unknown question type '" + s + "'");
}

std::size_t index_in(const std::vector<std::string>& names, const std::string& name, const char* what) {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError(std::string("unknown ") + what + " '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

}  // namespace

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v{"square", "circle", "triangle"};
  return v;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v{"red", "green", "blue"};
  return v;
}

const std::vector<std::string>& question_vocabulary() {
  static const std::vector<std::string> v{"[CLS]", "how", "many", "is",     "there",  "a",     "what", "color",
                                          "the",   "?",   "square", "circle", "triangle", "red", "green", "blue"};
  return v;
}

const std::vector<std::string>& answer_vocabulary() {
  static const std::vector<std::string> v{"0", "1", "2", "3", "4", "yes", "no", "red", "green", "blue"};
  return v;
}

std::size_t token_id(const std::string& word) { return index_in(question_vocabulary(), word, "word"); }
std::size_t answer_id(const std::string& answer) { return index_in(answer_vocabulary(), answer, "answer"); }

void DatasetSpec::validate() const {
  std::vector<std::string> bad;
  if (image_size == 0 || image_size % 64 != 0) bad.push_back("image_size (positive multiple of 64)");
  if (scenes == 0) bad.push_back("scenes (positive)");
  if (min_objects == 0 || min_objects > max_objects) bad.push_back("min_objects (1..max_objects)");
  if (max_objects > 4) bad.push_back("max_objects (at most 4)");
  if (min_object_size < 4 || min_object_size > max_object_size) bad.push_back("min_object_size (4..max_object_size)");
  if (max_object_size * 2 > image_size) bad.push_back("max_object_size (at most image_size / 2)");
  if (shapes.empty()) bad.push_back("shapes (non-empty)");
  for (const auto& s : shapes)
    if (std::find(shape_names().begin(), shape_names().end(), s) == shape_names().end())
      bad.push_back("shapes ('" + s + "' unsupported)");
  if (colors.empty()) bad.push_back("colors (non-empty)");
  for (const auto& c : colors)
    if (std::find(color_names().begin(), color_names().end(), c) == color_names().end())
      bad.push_back("colors ('" + c + "' unsupported)");
  if (question_types.empty()) bad.push_back("question_types (non-empty)");
  for (const auto& q : question_types)
    if (q != "count" && q != "exist" && q != "color") bad.push_back("question_types ('" + q + "' unsupported)");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) bad.push_back("train_fraction (in (0, 1))");
  if (bad.empty()) return;
  std::string msg = "invalid dataset spec:";
  for (const auto& b : bad) msg += " " + b + ";";
  throw ConfigError(msg);
}

nlohmann::json DatasetSpec::to_json() const {
  return {{"image_size", image_size},
          {"scenes", scenes},
          {"min_objects", min_objects},
          {"max_objects", max_objects},
          {"min_object_size", min_object_size},
          {"max_object_size", max_object_size},
          {"shapes", shapes},
          {"colors", colors},
          {"question_types", question_types},
          {"train_fraction", train_fraction}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("dataset spec must be an object");
  DatasetSpec s;
  try {
    auto read = [&](const char* key, auto& dst) {
      if (j.contains(key)) j.at(key).get_to(dst);
    };
    read("image_size", s.image_size);
    read("scenes", s.scenes);
    read("min_objects", s.min_objects);
    read("max_objects", s.max_objects);
    read("min_object_size", s.min_object_size);
    read("max_object_size", s.max_object_size);
    read("shapes", s.shapes);
    read("colors", s.colors);
    read("question_types", s.question_types);
    read("train_fraction", s.train_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::size_t Dataset::train_size() const {
  return static_cast<std::size_t>(spec.train_fraction * static_cast<double>(scenes.size()));
}

Tensor Dataset::image(std::size_t index) const {
  const std::size_t n = spec.image_size * spec.image_size * 3;
  if (index >= scenes.size()) throw ContractError("scene index out of range");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = pixels[index * n + i] / 255.0;
  return Tensor({spec.image_size, spec.image_size, 3}, std::move(v));
}

GroundTruth Dataset::ground_truth(std::size_t index) const {
  GroundTruth gt;
  for (const auto& o : scenes.at(index).objects) {
    gt.boxes.push_back(o.box);
    gt.labels.push_back(o.shape);
  }
  return gt;
}

TokenSequence Dataset::question(std::size_t index) const { return TokenSequence::of(scenes.at(index).question.tokens); }

Tensor Dataset::answer_target(std::size_t index) const {
  Tensor t({answer_vocabulary().size()}, 0.0);
  t.mutable_data()[scenes.at(index).question.answer] = 1.0;
  return t;
}

namespace {

struct Placed {
  std::size_t x0, y0, size;
};

bool inside_shape(const std::string& shape, double px, double py, const Placed& p) {
  const double s = static_cast<double>(p.size);
  const double lx = px - static_cast<double>(p.x0), ly = py - static_cast<double>(p.y0);
  if (lx < 0 || ly < 0 || lx >= s || ly >= s) return false;
  if (shape == "square") return true;
  if (shape == "circle") {
    const double dx = lx - s / 2, dy = ly - s / 2;
    return dx * dx + dy * dy <= s * s / 4;
  }
  // Apex centred on the top edge, base along the bottom edge.
  return std::abs(lx - s / 2) <= ly / 2;
}

void render(const Placed& p, const std::string& shape, std::size_t color, double intensity, std::size_t image_size,
            std::uint8_t* out) {
  const auto value = static_cast<std::uint8_t>(std::lround(255.0 * intensity));
  for (std::size_t y = p.y0; y < p.y0 + p.size; ++y)
    for (std::size_t x = p.x0; x < p.x0 + p.size; ++x) {
      if (!inside_shape(shape, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, p)) continue;
      std::uint8_t* px = out + (y * image_size + x) * 3;
      px[0] = px[1] = px[2] = 0;
      px[color] = value;
    }
}

Question make_question(const DatasetSpec& spec, const std::vector<SceneObject>& objects, Rng& rng) {
  Question q;
  q.type = parse_question_type(spec.question_types[rng.index(spec.question_types.size())]);
  std::vector<std::size_t> counts(spec.shapes.size(), 0);
  for (const auto& o : objects) ++counts[o.shape];
  if (q.type == QuestionType::kColor) {
    std::vector<std::size_t> unique;
    for (std::size_t s = 0; s < counts.size(); ++s)
      if (counts[s] == 1) unique.push_back(s);
    if (unique.empty()) {
      q.type = QuestionType::kCount;
    } else {
      q.shape = unique[rng.index(unique.size())];
      for (const auto& o : objects)
        if (o.shape == q.shape) q.color = o.color;
      q.words = {"what", "color", "is", "the", spec.shapes[q.shape], "?"};
      q.answer = answer_id(spec.colors[q.color]);
    }
  }
  if (q.type == QuestionType::kCount) {
    q.shape = rng.index(spec.shapes.size());
    q.words = {"how", "many", spec.shapes[q.shape], "?"};
    q.answer = answer_id(std::to_string(counts[q.shape]));
  } else if (q.type == QuestionType::kExist) {
    q.color = rng.index(spec.colors.size());
    q.shape = rng.index(spec.shapes.size());
    bool found = false;
    for (const auto& o : objects) found = found || (o.shape == q.shape && o.color == q.color);
    q.words = {"is", "there", "a", spec.colors[q.color], spec.shapes[q.shape], "?"};
    q.answer = answer_id(found ? "yes" : "no");
  }
  q.tokens.push_back(token_id("[CLS]"));
  for (const auto& w : q.words) q.tokens.push_back(token_id(w));
  return q;
}

}  // namespace

Dataset generate_synthetic_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset data;
  data.spec = spec;
  data.seed = seed;
  const std::size_t n = spec.image_size;
  data.pixels.assign(spec.scenes * n * n * 3, 0);
  Rng rng(seed);
  for (std::size_t s = 0; s < spec.scenes; ++s) {
    Scene scene;
    const std::size_t count = spec.min_objects + rng.index(spec.max_objects - spec.min_objects + 1);
    for (std::size_t i = 0; i < count; ++i) {
      SceneObject o;
      o.shape = rng.index(spec.shapes.size());
      o.color = rng.index(spec.colors.size());
      scene.objects.push_back(o);
    }
    std::vector<Placed> placed;
    while (placed.size() < count) {
      placed.clear();
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t size = spec.min_object_size + rng.index(spec.max_object_size - spec.min_object_size + 1);
        bool ok = false;
        for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
          const Placed p{rng.index(n - size + 1), rng.index(n - size + 1), size};
          ok = std::all_of(placed.begin(), placed.end(), [&](const Placed& o) {
            return p.x0 >= o.x0 + o.size + 2 || o.x0 >= p.x0 + p.size + 2 || p.y0 >= o.y0 + o.size + 2 ||
                   o.y0 >= p.y0 + p.size + 2;
          });
          if (ok) placed.push_back(p);
        }
        if (!ok) break;
      }
    }
    std::uint8_t* img = data.pixels.data() + s * n * n * 3;
    for (std::size_t i = 0; i < n * n * 3; ++i) img[i] = static_cast<std::uint8_t>(rng.index(24));
    for (std::size_t i = 0; i < count; ++i) {
      const Placed& p = placed[i];
      const double intensity = rng.uniform(0.6, 1.0);
      const std::size_t channel = index_in(color_names(), spec.colors[scene.objects[i].color], "colour");
      render(p, spec.shapes[scene.objects[i].shape], channel, intensity, n, img);
      const double inv = 1.0 / static_cast<double>(n), sz = static_cast<double>(p.size);
      scene.objects[i].box = {(static_cast<double>(p.x0) + sz / 2) * inv, (static_cast<double>(p.y0) + sz / 2) * inv,
                              sz * inv, sz * inv};
    }
    scene.question = make_question(spec, scene.objects, rng);
    data.scenes.push_back(std::move(scene));
  }
  return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["spec"] = data.spec.to_json();
  j["seed"] = data.seed;
  auto& scenes = j["scenes"] = nlohmann::json::array();
  for (const auto& s : data.scenes) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects) objs.push_back({{"shape", o.shape}, {"color", o.color}, {"box", o.box}});
    scenes.push_back({{"objects", objs},
                      {"question",
                       {{"type", to_string(s.question.type)},
                        {"shape", s.question.shape},
                        {"color", s.question.color},
                        {"words", s.question.words},
                        {"tokens", s.question.tokens},
                        {"answer", s.question.answer}}}});
  }
  std::ofstream js(dir / "dataset.json");
  js << j.dump(1) << '\n';
  std::ofstream bin(dir / "images.bin", std::ios::binary);
  bin.write(reinterpret_cast<const char*>(data.pixels.data()), static_cast<std::streamsize>(data.pixels.size()));
  if (!js || !bin) throw std::runtime_error("failed to write dataset to " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream js(dir / "dataset.json");
  if (!js) throw std::runtime_error("missing " + (dir / "dataset.json").string());
  Dataset data;
  try {
    const nlohmann::json j = nlohmann::json::parse(js);
    data.spec = DatasetSpec::from_json(j.at("spec"));
    data.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("scenes")) {
      Scene scene;
      for (const auto& o : s.at("objects"))
        scene.objects.push_back({o.at("shape").get<std::size_t>(), o.at("color").get<std::size_t>(),
                                 o.at("box").get<std::array<double, 4>>()});
      const auto& q = s.at("question");
      scene.question.type = parse_question_type(q.at("type").get<std::string>());
      q.at("shape").get_to(scene.question.shape);
      q.at("color").get_to(scene.question.color);
      q.at("words").get_to(scene.question.words);
      q.at("tokens").get_to(scene.question.tokens);
      q.at("answer").get_to(scene.question.answer);
      data.scenes.push_back(std::move(scene));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt dataset.json: " + std::string(e.what()));
  }
  const std::size_t n = data.spec.image_size;
  data.pixels.resize(data.scenes.size() * n * n * 3);
  std::ifstream bin(dir / "images.bin", std::ios::binary);
  bin.read(reinterpret_cast<char*>(data.pixels.data()), static_cast<std::streamsize>(data.pixels.size()));
  if (!bin || bin.gcount() != static_cast<std::streamsize>(data.pixels.size()))
    throw std::runtime_error("images.bin is missing or truncated in " + dir.string());
  return data;
}

double majority_answer_rate(const Dataset& data, std::size_t begin, std::size_t end) {
  if (begin >= end || end > data.scenes.size()) throw ContractError("empty or invalid scene range");
  std::map<std::size_t, std::size_t> freq;
  for (std::size_t i = begin; i < end; ++i) ++freq[data.scenes[i].question.answer];
  std::size_t best = 0;
  for (const auto& [a, c] : freq) best = std::max(best, c);
  return static_cast<double>(best) / static_cast<double>(end - begin);
}

}  // namespace txt
