#pragma once

// Thresholded region extraction, corpus-level threshold calibration and
// per-image count statistics.

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "txt/detector.hpp"

namespace txt {

struct ExtractionConfig {
  double threshold = 0.5;
  std::size_t min_regions = 10;
  std::size_t max_regions = 100;

  void validate() const;
};

/// Indices kept for one image, by descending confidence, ties by index.
std::vector<std::size_t> select_regions(std::span<const double> confidence, const ExtractionConfig& cfg);

/// Number of regions select_regions keeps at `threshold`.
std::size_t extracted_count(std::span<const double> confidence, double threshold, const ExtractionConfig& cfg);

DetectionSet extract_regions(const DetectionSet& det, const ExtractionConfig& cfg);

struct Calibration {
  double threshold = 0.0;
  std::size_t total = 0;
  std::size_t deviation = 0;
};

/// Raised when no threshold can reach the requested total.
class CalibrationRangeError : public std::range_error {
 public:
  CalibrationRangeError(std::size_t lo, std::size_t hi, std::size_t target);
  std::size_t low() const { return low_; }
  std::size_t high() const { return high_; }

 private:
  std::size_t low_;
  std::size_t high_;
};

/// Smallest threshold whose corpus total is closest to `target_total`.
/// Candidates are 0 and every distinct score; the achievable totals lie in
/// [sum min(min_regions, Q_i), sum min(max_regions, Q_i)].
Calibration calibrate_threshold(const std::vector<std::vector<double>>& confidences, std::size_t target_total,
                                const ExtractionConfig& cfg);

struct RegionStats {
  std::vector<std::size_t> counts;
  std::size_t first_bin = 0;
  std::vector<std::size_t> histogram;  // histogram[i] counts images with first_bin + i regions
  std::size_t total = 0;
  double mean = 0.0;
  double skewness = 0.0;  // m3 / m2^1.5, zero for a constant sample

  std::string csv() const;
  nlohmann::json summary(double threshold) const;
};

RegionStats region_histogram(const std::vector<std::size_t>& counts, const ExtractionConfig& cfg);

}  // namespace txt
