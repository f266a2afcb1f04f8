#include "txt/regions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace txt {

void ExtractionConfig::validate() const {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("threshold must lie in [0, 1]");
  if (min_regions == 0 || min_regions > max_regions)
    throw ConfigError("need 0 < min_regions <= max_regions, got " + std::to_string(min_regions) + ", " +
                      std::to_string(max_regions));
}

namespace {

std::size_t clamp_count(std::size_t above, std::size_t q, const ExtractionConfig& cfg) {
  return std::min(std::clamp(above, cfg.min_regions, cfg.max_regions), q);
}

}  // namespace

std::vector<std::size_t> select_regions(std::span<const double> confidence, const ExtractionConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> order(confidence.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return confidence[a] > confidence[b]; });
  order.resize(extracted_count(confidence, cfg.threshold, cfg));
  return order;
}

std::size_t extracted_count(std::span<const double> confidence, double threshold, const ExtractionConfig& cfg) {
  const auto above = static_cast<std::size_t>(
      std::count_if(confidence.begin(), confidence.end(), [&](double c) { return c > threshold; }));
  return clamp_count(above, confidence.size(), cfg);
}

DetectionSet extract_regions(const DetectionSet& det, const ExtractionConfig& cfg) {
  return det.select(select_regions(det.confidence.data(), cfg));
}

CalibrationRangeError::CalibrationRangeError(std::size_t lo, std::size_t hi, std::size_t target)
    : std::range_error("target total " + std::to_string(target) + " outside achievable range [" +
                       std::to_string(lo) + ", " + std::to_string(hi) + "]"),
      low_(lo),
      high_(hi) {}

Calibration calibrate_threshold(const std::vector<std::vector<double>>& confidences, std::size_t target_total,
                                const ExtractionConfig& cfg) {
  cfg.validate();
  std::size_t lo = 0, hi = 0;
  struct Score {
    double value;
    std::size_t image;
  };
  std::vector<Score> scores;
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    lo += std::min(cfg.min_regions, confidences[i].size());
    hi += std::min(cfg.max_regions, confidences[i].size());
    for (double s : confidences[i]) scores.push_back({s, i});
  }
  if (target_total < lo || target_total > hi) throw CalibrationRangeError(lo, hi, target_total);
  std::sort(scores.begin(), scores.end(), [](const Score& a, const Score& b) { return a.value > b.value; });

  std::vector<double> candidates;
  for (const auto& s : scores)
    if (s.value > 0.0 && (candidates.empty() || candidates.back() != s.value)) candidates.push_back(s.value);
  candidates.push_back(0.0);

  // Descending sweep: admit every score above the candidate, keep the total
  // current incrementally, prefer the later (smaller) threshold on ties.
  std::vector<std::size_t> above(confidences.size(), 0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < confidences.size(); ++i) total += clamp_count(0, confidences[i].size(), cfg);
  std::size_t next = 0;
  Calibration best{1.0, 0, static_cast<std::size_t>(-1)};
  for (double t : candidates) {
    while (next < scores.size() && scores[next].value > t) {
      const std::size_t i = scores[next].image, q = confidences[i].size();
      total -= clamp_count(above[i], q, cfg);
      total += clamp_count(++above[i], q, cfg);
      ++next;
    }
    const std::size_t dev = total > target_total ? total - target_total : target_total - total;
    if (dev <= best.deviation) best = {t, total, dev};
  }
  return best;
}

std::string RegionStats::csv() const {
  std::ostringstream os;
  os << "bin,count\n";
  for (std::size_t i = 0; i < histogram.size(); ++i) os << first_bin + i << ',' << histogram[i] << '\n';
  return os.str();
}

nlohmann::json RegionStats::summary(double threshold) const {
  return {{"images", counts.size()}, {"total", total}, {"mean", mean}, {"skewness", skewness},
          {"threshold", threshold}};
}

RegionStats region_histogram(const std::vector<std::size_t>& counts, const ExtractionConfig& cfg) {
  cfg.validate();
  RegionStats s;
  s.counts = counts;
  s.first_bin = cfg.min_regions;
  s.histogram.assign(cfg.max_regions - cfg.min_regions + 1, 0);
  for (std::size_t c : counts) {
    if (c < cfg.min_regions || c > cfg.max_regions)
      throw ContractError("region count " + std::to_string(c) + " outside the configured bins");
    ++s.histogram[c - cfg.min_regions];
    s.total += c;
  }
  if (counts.empty()) return s;
  const double n = static_cast<double>(counts.size());
  s.mean = static_cast<double>(s.total) / n;
  double m2 = 0.0, m3 = 0.0;
  for (std::size_t c : counts) {
    const double d = static_cast<double>(c) - s.mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  s.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  return s;
}

}  // namespace txt
