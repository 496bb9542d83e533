#include "mct/numeric.hpp"

#include <algorithm>
#include <cmath>

#include "mct/errors.hpp"

namespace mct {

namespace {

void require_finite(std::span<const double> v, const char* who) {
  for (double x : v) {
    if (!std::isfinite(x)) throw DomainError(std::string(who) + ": non-finite input");
  }
}

}  // namespace

std::vector<double> softmax_neg(std::span<const double> distances) {
  if (distances.empty()) throw ContractError("softmax_neg: need at least one entry");
  require_finite(distances, "softmax_neg");
  // exp(-d) is largest where d is smallest.
  const double lo = *std::min_element(distances.begin(), distances.end());
  std::vector<double> out(distances.size());
  double total = 0.0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    out[i] = std::exp(-(distances[i] - lo));
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

double logsumexp(std::span<const double> values) {
  if (values.empty()) throw ContractError("logsumexp: empty input");
  require_finite(values, "logsumexp");
  if (values.size() == 1) return values[0];
  const double hi = *std::max_element(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += std::exp(v - hi);
  return hi + std::log(total);
}

}  // namespace mct
