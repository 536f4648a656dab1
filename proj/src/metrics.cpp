#include "rstereo/metrics.hpp"

#include <cmath>
#include <json.hpp>

#include "rstereo/errors.hpp"

namespace rstereo {

double MetricsReport::bad_at(double threshold) const {
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] == threshold) return bad[i];
  }
  throw ContractError("metrics: threshold " + std::to_string(threshold) + " not computed");
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["epe"] = epe;
  j["d1"] = d1;
  j["valid"] = valid;
  auto& b = j["bad"];
  b = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    std::ostringstream key;
    key << thresholds[i];
    b[key.str()] = bad[i];
  }
  return j.dump(2);
}

MetricsReport compute_metrics(std::span<const float> pred, std::span<const float> gt, std::span<const float> mask,
                              const std::vector<double>& thresholds) {
  if (pred.size() != gt.size() || pred.size() != mask.size()) {
    throw DimensionError("metrics: prediction, ground truth and mask sizes differ");
  }
  MetricsReport r;
  r.thresholds = thresholds;
  std::vector<Index> over(thresholds.size(), 0);
  Index over3 = 0;
  double total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!(mask[i] > 0) || !std::isfinite(gt[i])) continue;
    const double err = std::abs(double(pred[i]) - double(gt[i]));
    ++r.valid;
    total += err;
    for (std::size_t t = 0; t < thresholds.size(); ++t) over[t] += err > thresholds[t] ? 1 : 0;
    over3 += err > 3.0 ? 1 : 0;
  }
  if (r.valid == 0) throw ContractError("metrics: mask selects no valid pixels");
  r.epe = total / double(r.valid);
  for (Index n : over) r.bad.push_back(100.0 * double(n) / double(r.valid));
  r.d1 = 100.0 * double(over3) / double(r.valid);
  return r;
}

MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                              const std::vector<double>& thresholds) {
  if (pred.shape() != gt.shape() || pred.shape() != mask.shape()) {
    throw DimensionError("metrics: shapes differ: " + pred.shape().str() + ", " + gt.shape().str() + ", " +
                         mask.shape().str());
  }
  return compute_metrics(pred.data(), gt.data(), mask.data(), thresholds);
}

MetricsReport merge(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ContractError("metrics: nothing to merge");
  MetricsReport r;
  r.thresholds = reports.front().thresholds;
  r.bad.assign(r.thresholds.size(), 0.0);
  for (const auto& p : reports) {
    if (p.thresholds != r.thresholds) throw ContractError("metrics: threshold sets differ");
    r.valid += p.valid;
  }
  for (const auto& p : reports) {
    const double w = double(p.valid) / double(r.valid);
    r.epe += w * p.epe;
    r.d1 += w * p.d1;
    for (std::size_t t = 0; t < r.bad.size(); ++t) r.bad[t] += w * p.bad[t];
  }
  return r;
}

}  // namespace rstereo
