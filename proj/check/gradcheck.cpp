#include <cmath>
#include <numeric>

#include "rstereo/check.hpp"

namespace rstereo::check {

namespace {

double eval(const std::function<TensorD()>& loss) {
  NoGradGuard guard;
  return loss().item();
}

GradReport compare(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  GradReport r;
  double diff = 0, an = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    an += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  r.analytic_norm = std::sqrt(an);
  r.numeric_norm = std::sqrt(nn);
  const double denom = std::max({r.analytic_norm, r.numeric_norm, 1e-300});
  r.rel_error = (an == 0 && nn == 0) ? 0.0 : std::sqrt(diff) / denom;
  r.coordinates = analytic.size();
  return r;
}

struct Coord {
  std::size_t tensor;
  Index index;
};

GradReport run(const std::function<TensorD()>& loss, std::vector<TensorD>& params, const std::vector<Coord>& coords,
               double eps) {
  for (auto& p : params) p.zero_grad();
  loss().backward();
  std::vector<double> analytic, numeric;
  for (const auto& c : coords) {
    auto& p = params[c.tensor];
    analytic.push_back(p.has_grad() ? p.grad()[static_cast<std::size_t>(c.index)] : 0.0);
    double& v = p.mutable_data()[static_cast<std::size_t>(c.index)];
    const double saved = v;
    v = saved + eps;
    const double up = eval(loss);
    v = saved - eps;
    const double down = eval(loss);
    v = saved;
    numeric.push_back((up - down) / (2 * eps));
  }
  return compare(analytic, numeric);
}

}  // namespace

GradReport gradcheck(const std::function<TensorD(const std::vector<TensorD>&)>& loss, std::vector<TensorD> inputs,
                     double eps) {
  std::vector<Coord> coords;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (!inputs[t].requires_grad()) inputs[t].set_requires_grad();
    for (Index i = 0; i < inputs[t].numel(); ++i) coords.push_back({t, i});
  }
  return run([&] { return loss(inputs); }, inputs, coords, eps);
}

GradReport gradcheck_sampled(const std::function<TensorD()>& loss, std::vector<TensorD> params,
                             std::size_t per_tensor, std::mt19937_64& rng, double eps) {
  std::vector<Coord> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<Index> idx(static_cast<std::size_t>(params[t].numel()));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), per_tensor));
    for (Index i : idx) coords.push_back({t, i});
  }
  return run(loss, params, coords, eps);
}

}  // namespace rstereo::check
