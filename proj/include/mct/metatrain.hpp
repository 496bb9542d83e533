#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mct/encoder.hpp"
#include "mct/episodes.hpp"
#include "mct/metric.hpp"
#include "mct/transduce.hpp"

namespace mct {

// Piecewise-constant learning rate. Breakpoint steps are divided by
// `step_divisor`, so the full-scale schedule can be compressed for short runs.
struct LrSchedule {
  double initial = 0.1;
  std::vector<std::pair<std::size_t, double>> breakpoints{{25000, 0.006}, {35000, 0.0012}};
  double step_divisor = 1.0;

  static LrSchedule full_scale() { return {}; }
  static LrSchedule desk_scale() {
    LrSchedule s;
    s.step_divisor = 50.0;
    return s;
  }
};

double lr_at(std::size_t step, const LrSchedule& schedule);

struct TrainConfig {
  double lambda = 0.5;
  std::size_t transduction_steps = 1;
  LrSchedule schedule = LrSchedule::desk_scale();
  double momentum = 0.9;  // Nesterov
  double weight_decay = 5e-4;
  EpisodeShape shape{15, 1, 8, 0, 0};
  bool weak_strong = true;        // weak-augment support, strong-augment queries
  PerturbConfig perturb;
  bool all_views = true;          // sample h from all four views, else full-path only
  bool detach_confidence = false; // stop gradients through q in the prototype update
  bool dimension_loss = true;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;

  void validate() const;
};

// Linear classifier over embedding channels, one column per dataset class.
struct GlobalClassifier {
  Tensor weight;  // channels x classes

  static GlobalClassifier init(std::size_t channels, std::size_t classes);
};

struct ModelConfig {
  std::size_t input_dim = 16;
  bool identity_encoder = false;  // embeddings are precomputed
  EncoderConfig encoder;          // input_dim is overwritten from above
  MetricKind metric = MetricKind::Instance;
  std::size_t global_classes = 0; // 0: no dimension-wise classifier
};

struct Model {
  std::optional<EncoderParams> encoder;
  MetricSpec metric;
  std::optional<GlobalClassifier> classifier;
  std::size_t input_dim = 0;

  static Model create(const ModelConfig& config, Rng& rng);

  std::size_t embedding_dim() const { return encoder ? encoder->width() : input_dim; }
  std::size_t positions() const { return encoder ? encoder->positions : 1; }
  std::size_t channels() const { return embedding_dim() / positions(); }

  ParamList to_params() const;
  static Model from_params(const ParamList& list);
};

// A model placed on a tape, plus its trainable leaves by checkpoint name.
struct BoundModel {
  BoundEncoder encoder;
  BoundMetric metric;
  Var classifier;
  std::vector<std::pair<std::string, Var>> leaves;
};

BoundModel bind(Tape& tape, const Model& model, bool trainable);

// Instance-wise loss after `steps` transduction steps. Confidences come from
// the selected view's space; the prototypes that are refined and scored live
// in the full-path space:
//   mean over queries of d(f(x~), P_y) + log sum_c exp(-d(f(x~), P_c))
// steps = 0 gives the inductive loss against support means.
Var instance_loss(const BoundMetric& metric, const ViewEmbeddings& selected, const ViewEmbeddings& full,
                  std::span<const int> support_labels, std::span<const int> query_labels, std::size_t ways,
                  std::size_t steps = 1, bool detach_confidence = false);

// Mean over items and positions of the cross-entropy of each position's
// channel vector, classified against the item's dataset-level class.
Var dimension_loss(Var embeddings, std::size_t positions, std::span<const int> global_labels, Var classifier);

struct LossReport {
  double total = 0.0;
  double instance = 0.0;
  double dimension = 0.0;
  std::string view;
  double lr = 0.0;
};

struct LossEvaluation {
  LossReport report;
  ParamList gradients;  // trainable leaves only, by name
  std::uint64_t branches = 0;  // Tape::branch_fingerprint of the forward pass
};

// Forward + backward of L = lambda * L_I + L_D on one episode. All
// randomness (view choice, augmentation, dropout) is drawn from `rng`.
LossEvaluation evaluate_loss(const Model& model, const Episode& episode, const TrainConfig& config, Rng& rng,
                             bool want_gradients = true);

class NesterovSgd {
 public:
  // p <- p - lr * (d + momentum * v), v <- momentum * v + d, d = grad + wd * p
  void step(ParamList& params, const ParamList& gradients, double lr, double momentum, double weight_decay);

 private:
  std::vector<std::pair<std::string, std::vector<double>>> velocity_;
};

LossReport train_step(const Episode& episode, Model& model, NesterovSgd& optimizer, const TrainConfig& config,
                      Rng& rng, std::size_t step_index);

using TrainCallback = std::function<void(std::size_t step, const LossReport& report)>;

// Runs `steps` train steps on episodes drawn from `source` (episode seed
// derived from config.seed and the step index).
std::vector<LossReport> train(Model& model, const EpisodeSource& source, const TrainConfig& config,
                              std::size_t steps, const TrainCallback& callback = {});

}  // namespace mct
