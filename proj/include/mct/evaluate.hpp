#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mct/episodes.hpp"
#include "mct/metatrain.hpp"
#include "mct/transduce.hpp"

namespace mct {

enum class EvalMode { Inductive, Transductive, Semi };

std::string mode_name(EvalMode mode);
EvalMode parse_mode(const std::string& name);

struct Protocol {
  EpisodeShape shape{5, 1, 15, 0, 0};
  std::size_t episodes = 1000;
  std::size_t steps = 10;  // ignored in inductive mode
  EvalMode mode = EvalMode::Transductive;
  bool ensemble = true;    // all four views, else full-path only
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  SemiOptions semi;

  // Unlabeled items per class for semi mode when shape.unlabeled == 0:
  // 30 at 1-shot, 50 otherwise.
  std::size_t unlabeled_per_class() const;
};

struct EpisodeRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double nll_initial = 0.0;  // before any transduction step
  double nll_final = 0.0;    // after the last step
};

struct Report {
  std::size_t n_episodes = 0;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;
  double mean_nll = 0.0;        // pre-transduction
  double mean_nll_final = 0.0;
  std::size_t infinite_nll = 0; // episodes whose NLL is +inf
  EvalMode mode = EvalMode::Transductive;
  std::vector<EpisodeRecord> records;
  std::string config;           // JSON echo of the protocol and model
};

// Mean over rows of -log q[row][label]. A zero confidence on the true label
// yields +inf rather than a clamped value.
double nll(const Tensor& confidence, std::span<const int> labels);

// 1.96 * sample_std / sqrt(n); 0 for fewer than two samples.
double ci95(std::span<const double> samples);

// Scores one episode under the protocol.
EpisodeRecord evaluate_episode(const Model& model, const Episode& episode, const Protocol& protocol);

// Episodes are scored by `protocol.workers` threads and reduced in index
// order, so the report does not depend on the worker count.
Report evaluate(const Model& model, const EpisodeSource& source, const Protocol& protocol);

// One JSON object per episode followed by a summary object.
std::string report_jsonl(const Report& report);
// "mean +- ci" table line(s).
std::string report_table(const Report& report);

// ---- gradient check --------------------------------------------------------------

struct GradcheckConfig {
  std::size_t trials = 20;
  double tolerance = 1e-4;
  double step = 1e-5;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-5;
  std::vector<MetricKind> metrics{MetricKind::Euclid, MetricKind::Scaled, MetricKind::Instance, MetricKind::Pair};
  std::uint64_t seed = 0;
  // Entries checked per tensor when checking a caller-supplied model; 0 = all.
  std::size_t max_entries_per_tensor = 0;
};

struct GradcheckGroup {
  std::string metric;
  std::string name;         // parameter tensor name
  std::size_t entries = 0;
  double max_rel_error = 0.0;
};

struct GradcheckResult {
  bool passed = false;
  double max_rel_error = 0.0;
  std::string worst;        // "metric/param[index]"
  std::vector<GradcheckGroup> groups;
  std::size_t redraws = 0;  // trials redrawn: all-zero embedding or a stencil across a relu kink
};

// Samples small random episodes and models and compares tape gradients of
// L = lambda * L_I + L_D against central finite differences on every entry
// of every trainable tensor.
GradcheckResult gradcheck(const GradcheckConfig& config);

// Same check on a given model, with episodes drawn from `source`.
GradcheckResult gradcheck(const Model& model, const EpisodeSource& source, const TrainConfig& train,
                          const GradcheckConfig& config);

}  // namespace mct
