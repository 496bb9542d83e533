#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mct/encoder.hpp"
#include "mct/episodes.hpp"
#include "mct/metric.hpp"
#include "mct/tape.hpp"

namespace mct {

// Embeddings of one episode under one view. `unlabeled` is only valid when
// the episode has an unlabeled set and it was requested.
struct ViewEmbeddings {
  Var support;
  Var query;
  Var unlabeled;
};

std::vector<ViewEmbeddings> embed_episode(const BoundEncoder& encoder, Tape& tape, const Episode& episode,
                                          std::span<const ViewSpec> views, Mode mode, Rng* rng,
                                          bool with_unlabeled = false);

// P_c = mean of support rows with label c  ->  ways x l.
Var init_prototypes(Var support, std::span<const int> labels, std::size_t ways);

// Row i = softmax over classes of -d(query_i, P_c)  ->  queries x ways.
Var confidence(const BoundMetric& metric, Var query, Var prototypes);

// Confidence-weighted prototype refinement. Support items carry weight 1:
//   P_c = (sum_S f(x) + sum_Q q_c(x~) f(x~)) / (|S_c| + sum_Q q_c(x~))
Var update_prototypes(Var support, std::span<const int> labels, std::size_t ways, Var query, Var conf);

// Called once per step t = 0..T with the ensemble confidence and the local
// (per-view) confidences that produced it.
using StepObserver = std::function<void(std::size_t step, Var ensemble, std::span<const Var> local)>;

// Soft k-means on one view: alternate confidence / update T times and return
// q^(T). T = 0 is plain prototypical inference.
Var soft_kmeans(const BoundMetric& metric, const ViewEmbeddings& view, std::span<const int> support_labels,
                std::size_t ways, std::size_t steps, const StepObserver& observer = {});

// Multi-view ensemble transduction. At each step every view computes local
// confidences against its own prototypes, the ensemble is their arithmetic
// mean, and every view's prototypes are refined with the shared ensemble
// weights but that view's own embeddings.
Var mct_infer(const BoundMetric& metric, std::span<const ViewEmbeddings> views, std::span<const int> support_labels,
              std::size_t ways, std::size_t steps, const StepObserver& observer = {});

struct SemiOptions {
  // Unlabeled rows whose max ensemble confidence is below this get weight 0.
  // 0 disables masking.
  double confidence_floor = 0.0;
};

struct SemiResult {
  std::vector<Var> prototypes;  // refined, one per view
  Var unlabeled_confidence;     // ensemble, before refinement
  Var query_confidence;         // inductive against refined prototypes
};

// Single refinement step driven by the unlabeled set, then inductive
// classification of the queries.
SemiResult semi_infer(const BoundMetric& metric, std::span<const ViewEmbeddings> views,
                      std::span<const int> support_labels, std::size_t ways, const SemiOptions& options = {});

// ---- tape-free helpers ---------------------------------------------------------

// encoder == nullptr means the episode already holds embeddings.
Tensor soft_kmeans(const Episode& episode, const EncoderParams* encoder, ViewSpec view, const MetricSpec& metric,
                   std::size_t steps);
Tensor mct_infer(const Episode& episode, const EncoderParams* encoder, std::span<const ViewSpec> views,
                 const MetricSpec& metric, std::size_t steps, std::vector<Tensor>* per_step = nullptr);

// Argmax per row; exact ties go to the lowest class index.
std::vector<int> predict(const Tensor& confidence);
double accuracy(const Tensor& confidence, std::span<const int> labels);

}  // namespace mct
