#pragma once

#include <span>
#include <vector>

namespace mct {

/// Softmax of negated distances: out_c = exp(-d_c) / sum_c' exp(-d_c').
/// Uses the max-shift trick, so adding a constant to every entry leaves the
/// result unchanged and large inputs do not overflow.
std::vector<double> softmax_neg(std::span<const double> distances);

/// log(sum(exp(v))) with max subtraction. Exact for a single element.
double logsumexp(std::span<const double> values);

}  // namespace mct
