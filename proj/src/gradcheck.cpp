#include <algorithm>
#include <cmath>
#include <random>

#include "mct/errors.hpp"
#include "mct/evaluate.hpp"

namespace mct {

namespace {

constexpr double kPlainShrink = 0.5;

// Raised when a difference stencil straddles a relu kink; the one-sided
// slopes differ there, so the central difference says nothing about the
// gradient.
struct KinkCrossed {};

LossEvaluation loss_at(const ParamList& params, const Episode& episode, const TrainConfig& train,
                       std::uint64_t loss_seed) {
  Rng rng(loss_seed);
  return evaluate_loss(Model::from_params(params), episode, train, rng, false);
}

// Moves zero-initialised tensors off their special points (an all-zero
// classifier, zero biases) and conditions the network for central
// differences. Near-zero embedding norms make normalization sharply curved, so
// the normalized metrics get a positive encoder bias. Large raw distances
// cancel inside the loss and swamp the difference quotient in rounding, so the
// plain metrics get a shrunken encoder.
Model jitter(const Model& model, Rng& rng) {
  const bool normalized = model.metric.scaler.has_value();
  const double offset = normalized ? 0.5 : 0.0;
  const double shrink = normalized ? 1.0 : kPlainShrink;
  auto params = model.to_params();
  std::normal_distribution<double> noise(0.0, 0.3);
  for (auto& [name, value] : params) {
    const bool encoder_bias = name.starts_with("encoder.") && (name.ends_with(".b1") || name.ends_with(".b2") ||
                                                               name == "encoder.in.b");
    const bool encoder_weight = name.starts_with("encoder.") && (name.ends_with(".w1") || name.ends_with(".w2") ||
                                                                 name == "encoder.in.w");
    if (encoder_bias || name == "classifier.weight" || name.starts_with("scaler.b") || name == "scaler.alpha" ||
        name == "scaler.beta") {
      std::vector<double> v(value.data().begin(), value.data().end());
      for (auto& x : v) x += noise(rng) + (encoder_bias ? offset : 0.0);
      value = Tensor(value.shape(), std::move(v));
    }
    if ((encoder_weight || encoder_bias) && shrink != 1.0) {
      std::vector<double> v(value.data().begin(), value.data().end());
      for (auto& x : v) x *= shrink;
      value = Tensor(value.shape(), std::move(v));
    }
  }
  return Model::from_params(params);
}

void check_model(const Model& model, const Episode& episode, const TrainConfig& train, std::uint64_t loss_seed,
                 const GradcheckConfig& config, const std::string& label, GradcheckResult& result) {
  Rng rng(loss_seed);
  const auto evaluation = evaluate_loss(model, episode, train, rng, true);
  const auto& analytic = evaluation.gradients;
  const auto base = model.to_params();
  for (const auto& [name, grad] : analytic) {
    const auto slot = std::find_if(base.begin(), base.end(), [&](const NamedTensor& p) { return p.name == name; });
    if (slot == base.end()) throw ContractError("gradcheck: gradient for unknown parameter " + name);
    const auto index = static_cast<std::size_t>(slot - base.begin());

    auto group = std::find_if(result.groups.begin(), result.groups.end(),
                              [&](const GradcheckGroup& g) { return g.metric == label && g.name == name; });
    if (group == result.groups.end()) {
      result.groups.push_back({label, name, 0, 0.0});
      group = std::prev(result.groups.end());
    }

    const auto n = grad.size();
    std::size_t stride = 1;
    if (config.max_entries_per_tensor && n > config.max_entries_per_tensor)
      stride = (n + config.max_entries_per_tensor - 1) / config.max_entries_per_tensor;
    for (std::size_t j = 0; j < n; j += stride) {
      auto shifted = [&](double delta) {
        auto params = base;
        std::vector<double> v(params[index].value.data().begin(), params[index].value.data().end());
        v[j] += delta;
        params[index].value = Tensor(params[index].value.shape(), std::move(v));
        const auto shifted_eval = loss_at(params, episode, train, loss_seed);
        if (shifted_eval.branches != evaluation.branches) throw KinkCrossed{};
        return shifted_eval.report.total;
      };
      const double numeric = (shifted(config.step) - shifted(-config.step)) / (2.0 * config.step);
      const double a = grad[j];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), config.floor});
      ++group->entries;
      group->max_rel_error = std::max(group->max_rel_error, rel);
      if (result.worst.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = label + "/" + name + "[" + std::to_string(j) + "]";
      }
    }
  }
}

void merge(GradcheckResult& into, const GradcheckResult& part) {
  for (const auto& g : part.groups) {
    auto it = std::find_if(into.groups.begin(), into.groups.end(),
                           [&](const GradcheckGroup& x) { return x.metric == g.metric && x.name == g.name; });
    if (it == into.groups.end()) {
      into.groups.push_back(g);
    } else {
      it->entries += g.entries;
      it->max_rel_error = std::max(it->max_rel_error, g.max_rel_error);
    }
  }
  if (into.worst.empty() || part.max_rel_error > into.max_rel_error) {
    into.max_rel_error = part.max_rel_error;
    into.worst = part.worst;
  }
}

// A draw is outside the domain of the check when the random network maps a
// sample to an all-zero embedding (rejected by the normalized metrics) or
// when a stencil crosses a relu kink. Such a trial is redrawn with the next
// seed.
constexpr std::uint64_t kMaxDraws = 20;

template <class Fn>
void run_trial(GradcheckResult& result, const GradcheckConfig& config, std::uint64_t trial, Fn&& fn) {
  for (std::uint64_t draw = 0;; ++draw) {
    GradcheckResult part;
    try {
      fn(derive_seed(config.seed, trial * kMaxDraws + draw), part);
    } catch (const DomainError&) {
      if (draw + 1 >= kMaxDraws) throw;
      ++result.redraws;
      continue;
    } catch (const KinkCrossed&) {
      if (draw + 1 >= kMaxDraws) throw ContractError("gradcheck: every draw crossed a relu kink");
      ++result.redraws;
      continue;
    }
    merge(result, part);
    return;
  }
}

}  // namespace

GradcheckResult gradcheck(const GradcheckConfig& config) {
  if (config.trials == 0) throw ContractError("gradcheck: need at least one trial");
  if (!(config.step > 0.0)) throw ContractError("gradcheck: step must be positive");
  GradcheckResult result;
  for (const auto kind : config.metrics) {
    for (std::size_t t = 0; t < config.trials; ++t) {
      const auto trial = static_cast<std::uint64_t>(kind) * 100003u + t;
      run_trial(result, config, trial, [&](std::uint64_t seed, GradcheckResult& part) {
        Rng rng(seed);
        ModelConfig mc;
        mc.input_dim = 6;
        mc.encoder.hidden = 8;
        mc.encoder.blocks = 2;
        mc.encoder.positions = 2;
        mc.encoder.dropout = 0.1;
        mc.metric = kind;
        mc.global_classes = 10;
        const Model model = jitter(Model::create(mc, rng), rng);

        SyntheticSpec spec;
        spec.input_dim = mc.input_dim;
        spec.class_spread = 3.0;
        spec.within_std = 1.0;
        spec.pool_classes = mc.global_classes;
        spec.pool_seed = seed;

        TrainConfig train;
        train.shape = EpisodeShape{3, 2, 2, 0, 0};
        const auto episode = EpisodeSource(spec).sample(train.shape, derive_seed(seed, 1));
        check_model(model, episode, train, derive_seed(seed, 2), config, metric_name(kind), part);
      });
    }
  }
  result.passed = result.max_rel_error < config.tolerance;
  return result;
}

GradcheckResult gradcheck(const Model& model, const EpisodeSource& source, const TrainConfig& train,
                          const GradcheckConfig& config) {
  if (config.trials == 0) throw ContractError("gradcheck: need at least one trial");
  if (!(config.step > 0.0)) throw ContractError("gradcheck: step must be positive");
  GradcheckResult result;
  for (std::size_t t = 0; t < config.trials; ++t) {
    run_trial(result, config, t, [&](std::uint64_t seed, GradcheckResult& part) {
      const auto episode = source.sample(train.shape, derive_seed(seed, 1));
      check_model(model, episode, train, derive_seed(seed, 2), config, metric_name(model.metric.kind), part);
    });
  }
  result.passed = result.max_rel_error < config.tolerance;
  return result;
}

}  // namespace mct
