#pragma once

#include <string>
#include <vector>

#include "rstereo/tensor.hpp"

namespace rstereo {

struct MetricsReport {
  double epe = 0;
  std::vector<double> thresholds;
  std::vector<double> bad;  // percent of valid pixels with error > threshold
  double d1 = 0;            // bad-3
  Index valid = 0;

  double bad_at(double threshold) const;
  std::string to_json() const;
};

inline const std::vector<double> kDefaultThresholds{0.5, 1, 2, 3, 4};

/// Errors over pixels where mask > 0 and gt is finite.
MetricsReport compute_metrics(std::span<const float> pred, std::span<const float> gt, std::span<const float> mask,
                              const std::vector<double>& thresholds = kDefaultThresholds);
MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                              const std::vector<double>& thresholds = kDefaultThresholds);

/// Pools reports by valid-pixel count.
MetricsReport merge(const std::vector<MetricsReport>& reports);

}  // namespace rstereo
