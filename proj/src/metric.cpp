#include "mct/metric.hpp"

#include <cmath>

#include "mct/errors.hpp"

namespace mct {

std::string metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::Euclid: return "euclid";
    case MetricKind::Scaled: return "scaled";
    case MetricKind::Instance: return "instance";
    case MetricKind::Pair: return "pair";
  }
  return "?";
}

MetricKind parse_metric(const std::string& name) {
  if (name == "euclid") return MetricKind::Euclid;
  if (name == "scaled") return MetricKind::Scaled;
  if (name == "instance") return MetricKind::Instance;
  if (name == "pair") return MetricKind::Pair;
  throw ContractError("unknown metric '" + name + "' (expected euclid|scaled|instance|pair)");
}

ScalerParams ScalerParams::init(std::size_t input_width, std::size_t hidden, Rng& rng) {
  if (input_width == 0 || hidden == 0) throw ContractError("scaler: dimensions must be positive");
  std::normal_distribution<double> n1(0.0, std::sqrt(2.0 / static_cast<double>(input_width)));
  std::normal_distribution<double> n2(0.0, std::sqrt(1.0 / static_cast<double>(hidden)));
  std::vector<double> w1(input_width * hidden), w2(hidden);
  for (auto& x : w1) x = n1(rng);
  for (auto& x : w2) x = n2(rng);
  return ScalerParams{Tensor::matrix(input_width, hidden, std::move(w1)), Tensor::zeros({1, hidden}),
                      Tensor::matrix(hidden, 1, std::move(w2)),        Tensor::scalar(0.0),
                      Tensor::scalar(0.0),                              Tensor::scalar(0.0)};
}

MetricSpec MetricSpec::euclid() { return MetricSpec{}; }

MetricSpec MetricSpec::scaled(double s) {
  MetricSpec m;
  m.kind = MetricKind::Scaled;
  m.s = s;
  return m;
}

MetricSpec MetricSpec::instance(std::size_t embedding_dim, Rng& rng, std::size_t hidden) {
  MetricSpec m;
  m.kind = MetricKind::Instance;
  m.scaler = ScalerParams::init(embedding_dim, hidden, rng);
  return m;
}

MetricSpec MetricSpec::pair(std::size_t embedding_dim, Rng& rng, std::size_t hidden) {
  MetricSpec m;
  m.kind = MetricKind::Pair;
  m.scaler = ScalerParams::init(2 * embedding_dim, hidden, rng);
  return m;
}

MetricSpec MetricSpec::make(MetricKind kind, std::size_t embedding_dim, Rng& rng) {
  switch (kind) {
    case MetricKind::Euclid: return euclid();
    case MetricKind::Scaled: return scaled();
    case MetricKind::Instance: return instance(embedding_dim, rng);
    case MetricKind::Pair: return pair(embedding_dim, rng);
  }
  throw ContractError("unknown metric kind");
}

void MetricSpec::validate() const {
  if (!std::isfinite(s)) throw DomainError("metric: non-finite scale");
  if (normalized() != scaler.has_value()) throw ContractError("metric: scaler present iff kind is instance or pair");
  if (!scaler) return;
  const auto& sc = *scaler;
  const auto h = sc.w1.cols();
  if (sc.b1.rows() != 1 || sc.b1.cols() != h || sc.w2.rows() != h || sc.w2.cols() != 1 || sc.b2.size() != 1 ||
      sc.alpha.size() != 1 || sc.beta.size() != 1)
    throw ContractError("metric: inconsistent scaler shapes");
  if (kind == MetricKind::Pair && sc.w1.rows() % 2 != 0) throw ContractError("metric: pair scaler width must be even");
}

BoundMetric bind(Tape& tape, const MetricSpec& spec, bool trainable) {
  spec.validate();
  auto leaf = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
  BoundMetric m;
  m.kind = spec.kind;
  if (spec.kind == MetricKind::Scaled) m.s = leaf(Tensor::scalar(spec.s));
  if (spec.scaler) {
    const auto& sc = *spec.scaler;
    m.w1 = leaf(sc.w1);
    m.b1 = leaf(sc.b1);
    m.w2 = leaf(sc.w2);
    m.b2 = leaf(sc.b2);
    m.alpha = leaf(sc.alpha);
    m.beta = leaf(sc.beta);
  }
  return m;
}

namespace {

// exp(alpha) * sigmoid(logit) + exp(beta)
Var calibrate(const BoundMetric& m, Var logit) { return add(mul(sigmoid(logit), exp(m.alpha)), exp(m.beta)); }

Var scaler_head(const BoundMetric& m, Var pre_activation) {
  Var hidden = relu(add(pre_activation, m.b1));
  return calibrate(m, add(matmul(hidden, m.w2), m.b2));
}

}  // namespace

Var scaler_eval(const BoundMetric& metric, Var features) {
  if (!metric.w1.valid()) throw ContractError("scaler_eval: metric has no scaler");
  if (features.cols() != metric.w1.rows()) throw ContractError("scaler_eval: feature width does not match scaler input");
  return scaler_head(metric, matmul(features, metric.w1));
}

Var distance_matrix(const BoundMetric& metric, Var a, Var b) {
  if (a.cols() != b.cols()) throw ContractError("distance: embedding shapes differ");
  switch (metric.kind) {
    case MetricKind::Euclid: return pairwise_sqdist(a, b);
    case MetricKind::Scaled: return mul(pairwise_sqdist(a, b), metric.s);
    case MetricKind::Instance: {
      Var an = row_normalize(a);
      Var bn = row_normalize(b);
      if (metric.w1.rows() != a.cols()) throw ContractError("distance: scaler input width does not match embedding");
      Var ua = div(an, scaler_eval(metric, a));
      Var ub = div(bn, scaler_eval(metric, b));
      return pairwise_sqdist(ua, ub);
    }
    case MetricKind::Pair: {
      Var an = row_normalize(a);
      Var bn = row_normalize(b);
      const auto l = a.cols();
      if (metric.w1.rows() != 2 * l) throw ContractError("distance: pair scaler expects two concatenated embeddings");
      // [a, b] W1 = a W1[:l] + b W1[l:], evaluated for every (a_i, b_j).
      Var pre = pairwise_add(matmul(a, slice_rows(metric.w1, 0, l)), matmul(b, slice_rows(metric.w1, l, l)));
      Var g = reshape(scaler_head(metric, pre), a.rows(), b.rows());
      return div(pairwise_sqdist(an, bn), square(g));
    }
  }
  throw ContractError("distance: unknown metric kind");
}

double distance(const MetricSpec& spec, std::span<const double> a1, std::span<const double> a2) {
  if (a1.size() != a2.size()) throw ContractError("distance: embedding shapes differ");
  Tape tape;
  auto m = bind(tape, spec, false);
  Var a = tape.constant(Tensor::row({a1.begin(), a1.end()}));
  Var b = tape.constant(Tensor::row({a2.begin(), a2.end()}));
  return distance_matrix(m, a, b).value().item();
}

double scaler_eval(const ScalerParams& scaler, std::span<const double> features) {
  MetricSpec spec;
  spec.kind = MetricKind::Instance;
  spec.scaler = scaler;
  Tape tape;
  auto m = bind(tape, spec, false);
  return scaler_eval(m, tape.constant(Tensor::row({features.begin(), features.end()}))).value().item();
}

void append_params(const MetricSpec& spec, ParamList& out) {
  out.push_back({"metric.kind", Tensor::scalar(static_cast<double>(spec.kind))});
  if (spec.kind == MetricKind::Scaled) out.push_back({"metric.s", Tensor::scalar(spec.s)});
  if (spec.scaler) {
    const auto& sc = *spec.scaler;
    out.push_back({"scaler.w1", sc.w1});
    out.push_back({"scaler.b1", sc.b1});
    out.push_back({"scaler.w2", sc.w2});
    out.push_back({"scaler.b2", sc.b2});
    out.push_back({"scaler.alpha", sc.alpha});
    out.push_back({"scaler.beta", sc.beta});
  }
}

MetricSpec metric_from_params(const ParamList& list) {
  const double k = find_param(list, "metric.kind").item();
  if (k != 0.0 && k != 1.0 && k != 2.0 && k != 3.0) throw FormatError("checkpoint has unknown metric kind", 0);
  MetricSpec spec;
  spec.kind = static_cast<MetricKind>(static_cast<int>(k));
  if (spec.kind == MetricKind::Scaled) spec.s = find_param(list, "metric.s").item();
  if (spec.normalized()) {
    spec.scaler = ScalerParams{find_param(list, "scaler.w1"), find_param(list, "scaler.b1"),
                               find_param(list, "scaler.w2"), find_param(list, "scaler.b2"),
                               find_param(list, "scaler.alpha"), find_param(list, "scaler.beta")};
  }
  try {
    spec.validate();
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("inconsistent metric checkpoint: ") + e.what(), 0);
  }
  return spec;
}

}  // namespace mct
