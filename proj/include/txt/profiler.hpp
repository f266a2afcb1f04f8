#pragma once

// Analytic operation counts and gradient-based region attribution.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "txt/training.hpp"

namespace txt {

struct FlopReport {
  std::map<std::string, std::uint64_t> components;  // backbone, input_proj, encoder, decoder, heads
  std::map<std::string, std::uint64_t> details;     // finer terms, not added to the total
  std::uint64_t total_macs = 0;
  nlohmann::json config;
  std::size_t height = 0;
  std::size_t width = 0;

  std::uint64_t macs(const std::string& component) const;
  /// Reported FLOPs are 2 * MACs.
  std::uint64_t flops() const { return 2 * total_macs; }
  nlohmann::json to_json() const;
};

/// Multiply-accumulates of one forward pass of the detector on an
/// height x width image, counted without running it.
FlopReport count_flops(const DetectorConfig& config, std::size_t height, std::size_t width);

struct Attribution {
  std::vector<double> scores;  // in [0, 1]
  std::vector<bool> salient;   // score > 0.9
  Tensor boxes;
  bool all_zero = false;

  std::string csv() const;
};

/// Grad-CAM over the object-projection layer: per object, the positive part
/// of sum(gradient * activation) of the answer logit, max-normalized.
Attribution attribute_regions(const Tensor& object_features, const Tensor& boxes, const TokenSequence& question,
                              const LanguageModel& lm, std::size_t answer_index);

/// Runs the detector (objects as in `mode`) and attributes the answer logit.
Attribution region_attribution(const Detector& detector, const LanguageModel& lm, const Tensor& image,
                               const TokenSequence& question, std::size_t answer_index, const VqaTrainConfig& cfg);

}  // namespace txt
