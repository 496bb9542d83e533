#pragma once

#include <optional>
#include <span>
#include <string>

#include "mct/encoder.hpp"
#include "mct/random.hpp"
#include "mct/tape.hpp"
#include "mct/tensor.hpp"

namespace mct {

enum class MetricKind { Euclid, Scaled, Instance, Pair };

std::string metric_name(MetricKind kind);
MetricKind parse_metric(const std::string& name);

// Learned length scale g(features) = exp(alpha) * sigmoid(mlp(features)) + exp(beta),
// with mlp = affine -> relu -> affine(->1). Always positive.
struct ScalerParams {
  Tensor w1, b1, w2, b2, alpha, beta;

  static ScalerParams init(std::size_t input_width, std::size_t hidden, Rng& rng);
  std::size_t input_width() const { return w1.rows(); }
};

inline constexpr double kScaledMetricInit = 7.5;
inline constexpr std::size_t kScalerHidden = 32;

struct MetricSpec {
  MetricKind kind = MetricKind::Euclid;
  double s = kScaledMetricInit;         // scaled kind only
  std::optional<ScalerParams> scaler;   // instance / pair kinds only

  static MetricSpec euclid();
  static MetricSpec scaled(double s = kScaledMetricInit);
  // embedding_dim is the flattened embedding width; the pair scaler reads
  // the concatenation of two embeddings.
  static MetricSpec instance(std::size_t embedding_dim, Rng& rng, std::size_t hidden = kScalerHidden);
  static MetricSpec pair(std::size_t embedding_dim, Rng& rng, std::size_t hidden = kScalerHidden);
  static MetricSpec make(MetricKind kind, std::size_t embedding_dim, Rng& rng);

  void validate() const;
  bool normalized() const { return kind == MetricKind::Instance || kind == MetricKind::Pair; }
};

struct BoundMetric {
  MetricKind kind = MetricKind::Euclid;
  Var s;
  Var w1, b1, w2, b2, alpha, beta;
};

BoundMetric bind(Tape& tape, const MetricSpec& spec, bool trainable);

// g for each row of `features` (n x input_width) -> n x 1.
Var scaler_eval(const BoundMetric& metric, Var features);

// D[i][j] = d(a_i, b_j) for a (n x l), b (m x l):
//   euclid   ||a - b||^2
//   scaled   s ||a - b||^2
//   instance ||a^/g(a) - b^/g(b)||^2            with x^ = x / ||x||
//   pair     ||a^ - b^||^2 / g([a, b])^2        one scale per ordered pair
// Normalized kinds raise DomainError on (near) zero-norm rows.
Var distance_matrix(const BoundMetric& metric, Var a, Var b);

double distance(const MetricSpec& spec, std::span<const double> a1, std::span<const double> a2);
double scaler_eval(const ScalerParams& scaler, std::span<const double> features);

void append_params(const MetricSpec& spec, ParamList& out);
MetricSpec metric_from_params(const ParamList& list);

}  // namespace mct
