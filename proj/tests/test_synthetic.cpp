#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "txt/synthetic.hpp"

using namespace txt;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("txt_synthetic_" + name);
  fs::remove_all(p);
  return p;
}

// Exact answer distribution of the scene law, by enumerating object count,
// every attribute assignment and every question draw.
std::vector<double> answer_law(const DatasetSpec& spec) {
  const std::size_t ns = spec.shapes.size(), nc = spec.colors.size();
  std::vector<double> p(answer_vocabulary().size(), 0.0);
  const double p_count = 1.0 / static_cast<double>(spec.max_objects - spec.min_objects + 1);
  for (std::size_t n = spec.min_objects; n <= spec.max_objects; ++n) {
    std::size_t combos = 1;
    for (std::size_t i = 0; i < n; ++i) combos *= ns * nc;
    const double p_scene = p_count / static_cast<double>(combos);
    for (std::size_t code = 0; code < combos; ++code) {
      std::vector<std::size_t> shape(n), color(n);
      std::size_t c = code;
      for (std::size_t i = 0; i < n; ++i, c /= ns * nc) {
        shape[i] = (c % (ns * nc)) / nc;
        color[i] = c % nc;
      }
      std::vector<std::size_t> per_shape(ns, 0);
      for (auto s : shape) ++per_shape[s];
      const double third = 1.0 / 3.0;
      auto add_count = [&](double w) {
        for (std::size_t s = 0; s < ns; ++s)
          p[answer_id(std::to_string(per_shape[s]))] += w / static_cast<double>(ns);
      };
      add_count(p_scene * third);
      for (std::size_t qc = 0; qc < nc; ++qc)
        for (std::size_t qs = 0; qs < ns; ++qs) {
          bool found = false;
          for (std::size_t i = 0; i < n; ++i) found = found || (shape[i] == qs && color[i] == qc);
          p[answer_id(found ? "yes" : "no")] += p_scene * third / static_cast<double>(nc * ns);
        }
      std::vector<std::size_t> unique;
      for (std::size_t s = 0; s < ns; ++s)
        if (per_shape[s] == 1) unique.push_back(s);
      if (unique.empty()) {
        add_count(p_scene * third);
      } else {
        for (auto s : unique)
          for (std::size_t i = 0; i < n; ++i)
            if (shape[i] == s) p[answer_id(spec.colors[color[i]])] += p_scene * third / static_cast<double>(unique.size());
      }
    }
  }
  return p;
}

DatasetSpec small_spec(std::size_t scenes) {
  DatasetSpec s;
  s.scenes = scenes;
  return s;
}

}  // namespace

TEST(Synthetic, SameSeedGivesByteIdenticalFiles) {
  const fs::path a = scratch("a"), b = scratch("b"), c = scratch("c");
  save_dataset(generate_synthetic_dataset(small_spec(30), 5), a);
  save_dataset(generate_synthetic_dataset(small_spec(30), 5), b);
  save_dataset(generate_synthetic_dataset(small_spec(30), 6), c);
  for (const char* f : {"dataset.json", "images.bin"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    EXPECT_NE(slurp(a / f), slurp(c / f)) << f;
  }
  EXPECT_EQ(fs::file_size(a / "images.bin"), 30u * 64 * 64 * 3);
}

TEST(Synthetic, LoadRoundTrip) {
  const fs::path dir = scratch("roundtrip");
  const Dataset d = generate_synthetic_dataset(small_spec(12), 7);
  save_dataset(d, dir);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.seed, 7u);
  ASSERT_EQ(back.scenes.size(), d.scenes.size());
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    EXPECT_EQ(back.scenes[i].question.tokens, d.scenes[i].question.tokens);
    EXPECT_EQ(back.scenes[i].question.answer, d.scenes[i].question.answer);
    EXPECT_EQ(back.ground_truth(i).labels, d.ground_truth(i).labels);
  }
  const fs::path missing = scratch("missing");
  EXPECT_THROW(load_dataset(missing), std::runtime_error);
}

TEST(Synthetic, AnswersAgreeWithSceneContents) {
  const Dataset d = generate_synthetic_dataset(small_spec(400), 8);
  std::size_t square_counts = 0;
  for (const Scene& s : d.scenes) {
    const Question& q = s.question;
    ASSERT_EQ(q.tokens.size(), q.words.size() + 1);
    EXPECT_EQ(q.tokens[0], token_id("[CLS]"));
    std::size_t same_shape = 0;
    bool exists = false;
    for (const auto& o : s.objects) {
      same_shape += o.shape == q.shape;
      exists = exists || (o.shape == q.shape && o.color == q.color);
    }
    switch (q.type) {
      case QuestionType::kCount:
        EXPECT_EQ(answer_vocabulary()[q.answer], std::to_string(same_shape));
        square_counts += d.spec.shapes[q.shape] == "square";
        break;
      case QuestionType::kExist:
        EXPECT_EQ(answer_vocabulary()[q.answer], exists ? "yes" : "no");
        break;
      case QuestionType::kColor:
        ASSERT_EQ(same_shape, 1u);
        EXPECT_EQ(answer_vocabulary()[q.answer], d.spec.colors[q.color]);
        break;
    }
  }
  EXPECT_GT(square_counts, 20u);
}

TEST(Synthetic, BoxesCoverRenderedColour) {
  const Dataset d = generate_synthetic_dataset(small_spec(50), 9);
  const std::size_t n = d.spec.image_size;
  for (std::size_t s = 0; s < d.scenes.size(); ++s) {
    const GroundTruth gt = d.ground_truth(s);
    ASSERT_EQ(gt.boxes.size(), d.scenes[s].objects.size());
    for (const auto& o : d.scenes[s].objects) {
      if (d.spec.shapes[o.shape] != "square") continue;
      const auto x = static_cast<std::size_t>(o.box[0] * static_cast<double>(n));
      const auto y = static_cast<std::size_t>(o.box[1] * static_cast<double>(n));
      const std::size_t channel = static_cast<std::size_t>(
          std::find(color_names().begin(), color_names().end(), d.spec.colors[o.color]) - color_names().begin());
      EXPECT_GE(d.pixels[((s * n + y) * n + x) * 3 + channel], 153);
    }
  }
}

TEST(Synthetic, AnswerDistributionFollowsSceneLaw) {
  const DatasetSpec spec = small_spec(1000);
  const Dataset d = generate_synthetic_dataset(spec, 10);
  const std::vector<double> law = answer_law(spec);
  double total = 0.0;
  for (double p : law) total += p;
  ASSERT_NEAR(total, 1.0, 1e-12);

  // Pool cells with expected count below 5 into their left neighbour.
  std::vector<double> observed(law.size(), 0.0);
  for (const auto& s : d.scenes) observed[s.question.answer] += 1.0;
  std::vector<double> exp_cells, obs_cells;
  for (std::size_t a = 0; a < law.size(); ++a) {
    const double e = law[a] * static_cast<double>(spec.scenes);
    if (e < 5.0 && !exp_cells.empty()) {
      exp_cells.back() += e;
      obs_cells.back() += observed[a];
    } else {
      exp_cells.push_back(e);
      obs_cells.push_back(observed[a]);
    }
  }
  double chi2 = 0.0;
  for (std::size_t i = 0; i < exp_cells.size(); ++i)
    chi2 += (obs_cells[i] - exp_cells[i]) * (obs_cells[i] - exp_cells[i]) / exp_cells[i];
  const boost::math::chi_squared dist(static_cast<double>(exp_cells.size() - 1));
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01) << "chi2 " << chi2;
}

TEST(Synthetic, MajorityRateMatchesTally) {
  const Dataset d = generate_synthetic_dataset(small_spec(200), 11);
  std::map<std::size_t, std::size_t> tally;
  for (std::size_t i = 160; i < 200; ++i) ++tally[d.scenes[i].question.answer];
  std::size_t top = 0;
  for (auto [a, c] : tally) top = std::max(top, c);
  EXPECT_DOUBLE_EQ(majority_answer_rate(d, 160, 200), static_cast<double>(top) / 40.0);
  EXPECT_EQ(d.train_size(), 160u);
}

TEST(Synthetic, ValidationListsEveryOffendingField) {
  DatasetSpec s;
  s.scenes = 0;
  s.max_objects = 9;
  s.shapes = {"hexagon"};
  s.train_fraction = 1.5;
  try {
    s.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* field : {"scenes", "max_objects", "hexagon", "train_fraction"})
      EXPECT_NE(msg.find(field), std::string::npos) << field;
  }
  EXPECT_NO_THROW(DatasetSpec::from_json(DatasetSpec{}.to_json()).validate());
}
