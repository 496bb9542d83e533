#include "mct/transduce.hpp"

#include <algorithm>
#include <string>

#include "mct/errors.hpp"

namespace mct {

std::vector<ViewEmbeddings> embed_episode(const BoundEncoder& encoder, Tape& tape, const Episode& episode,
                                          std::span<const ViewSpec> views, Mode mode, Rng* rng,
                                          bool with_unlabeled) {
  if (!episode.query) throw ContractError("embed_episode: episode has no queries");
  if (with_unlabeled && !episode.unlabeled) throw ContractError("embed_episode: episode has no unlabeled set");
  std::vector<Tensor> parts{episode.support, *episode.query};
  if (with_unlabeled) parts.push_back(*episode.unlabeled);
  Var inputs = tape.constant(vstack(parts));
  const auto ns = episode.support.rows();
  const auto nq = episode.query->rows();

  std::vector<ViewEmbeddings> out;
  for (const auto& view : views) {
    Var z = encode(encoder, inputs, view, mode, rng);
    ViewEmbeddings e{slice_rows(z, 0, ns), slice_rows(z, ns, nq), {}};
    if (with_unlabeled) e.unlabeled = slice_rows(z, ns + nq, episode.unlabeled->rows());
    out.push_back(e);
  }
  return out;
}

namespace {

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t ways) {
  if (ways == 0) throw ContractError("prototypes: need at least one class");
  if (labels.size() != rows) throw ContractError("prototypes: one label per support row required");
  std::vector<std::size_t> count(ways, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= ways) throw ContractError("prototypes: label out of range");
    ++count[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < ways; ++c) {
    if (count[c] == 0) throw ContractError("prototypes: class " + std::to_string(c) + " has no support items");
  }
}

// ways x rows indicator matrix and per-class counts.
std::pair<Tensor, Tensor> class_indicator(std::span<const int> labels, std::size_t ways) {
  std::vector<double> ind(ways * labels.size(), 0.0), counts(ways, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    ind[c * labels.size() + i] = 1.0;
    counts[c] += 1.0;
  }
  return {Tensor::matrix(ways, labels.size(), std::move(ind)), Tensor::matrix(ways, 1, std::move(counts))};
}

}  // namespace

Var init_prototypes(Var support, std::span<const int> labels, std::size_t ways) {
  check_labels(labels, support.rows(), ways);
  auto& tape = support.tape();
  auto [ind, counts] = class_indicator(labels, ways);
  return div(matmul(tape.constant(std::move(ind)), support), tape.constant(std::move(counts)));
}

Var confidence(const BoundMetric& metric, Var query, Var prototypes) {
  return row_softmax_neg(distance_matrix(metric, query, prototypes));
}

Var update_prototypes(Var support, std::span<const int> labels, std::size_t ways, Var query, Var conf) {
  check_labels(labels, support.rows(), ways);
  if (conf.rows() != query.rows() || conf.cols() != ways)
    throw ContractError("update_prototypes: confidence shape must be queries x ways");
  if (support.cols() != query.cols()) throw ContractError("update_prototypes: embedding widths differ");
  auto& tape = support.tape();
  auto [ind, counts] = class_indicator(labels, ways);
  Var conf_t = transpose(conf);
  Var numer = add(matmul(tape.constant(std::move(ind)), support), matmul(conf_t, query));
  Var denom = add(tape.constant(std::move(counts)), row_sum(conf_t));
  return div(numer, denom);
}

Var soft_kmeans(const BoundMetric& metric, const ViewEmbeddings& view, std::span<const int> support_labels,
                std::size_t ways, std::size_t steps, const StepObserver& observer) {
  Var protos = init_prototypes(view.support, support_labels, ways);
  Var q = confidence(metric, view.query, protos);
  if (observer) observer(0, q, std::span<const Var>(&q, 1));
  for (std::size_t t = 1; t <= steps; ++t) {
    protos = update_prototypes(view.support, support_labels, ways, view.query, q);
    q = confidence(metric, view.query, protos);
    if (observer) observer(t, q, std::span<const Var>(&q, 1));
  }
  return q;
}

Var mct_infer(const BoundMetric& metric, std::span<const ViewEmbeddings> views, std::span<const int> support_labels,
              std::size_t ways, std::size_t steps, const StepObserver& observer) {
  if (views.empty()) throw ContractError("mct_infer: need at least one view");
  const double weight = 1.0 / static_cast<double>(views.size());
  std::vector<Var> protos;
  for (const auto& v : views) protos.push_back(init_prototypes(v.support, support_labels, ways));

  std::vector<Var> local(views.size());
  Var q;
  for (std::size_t t = 0;; ++t) {
    for (std::size_t h = 0; h < views.size(); ++h) {
      local[h] = confidence(metric, views[h].query, protos[h]);
      Var term = scale(local[h], weight);
      q = h == 0 ? term : add(q, term);
    }
    if (observer) observer(t, q, local);
    if (t == steps) break;
    for (std::size_t h = 0; h < views.size(); ++h)
      protos[h] = update_prototypes(views[h].support, support_labels, ways, views[h].query, q);
  }
  return q;
}

SemiResult semi_infer(const BoundMetric& metric, std::span<const ViewEmbeddings> views,
                      std::span<const int> support_labels, std::size_t ways, const SemiOptions& options) {
  if (views.empty()) throw ContractError("semi_infer: need at least one view");
  for (const auto& v : views) {
    if (!v.unlabeled.valid()) throw ContractError("semi_infer: unlabeled set is empty");
  }
  const double weight = 1.0 / static_cast<double>(views.size());
  SemiResult out;
  std::vector<Var> protos;
  for (std::size_t h = 0; h < views.size(); ++h) {
    protos.push_back(init_prototypes(views[h].support, support_labels, ways));
    Var term = scale(confidence(metric, views[h].unlabeled, protos[h]), weight);
    out.unlabeled_confidence = h == 0 ? term : add(out.unlabeled_confidence, term);
  }

  Var weights = out.unlabeled_confidence;
  if (options.confidence_floor > 0.0) {
    const Tensor& q = weights.value();
    std::vector<double> keep(q.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
      const auto row = q.row_span(i);
      keep[i] = *std::max_element(row.begin(), row.end()) >= options.confidence_floor ? 1.0 : 0.0;
    }
    weights = mul(weights, weights.tape().constant(Tensor::matrix(q.rows(), 1, std::move(keep))));
  }

  for (std::size_t h = 0; h < views.size(); ++h) {
    out.prototypes.push_back(
        update_prototypes(views[h].support, support_labels, ways, views[h].unlabeled, weights));
    Var term = scale(confidence(metric, views[h].query, out.prototypes[h]), weight);
    out.query_confidence = h == 0 ? term : add(out.query_confidence, term);
  }
  return out;
}

// ---- tape-free helpers -----------------------------------------------------------

namespace {

BoundEncoder bind_optional(Tape& tape, const EncoderParams* encoder) {
  return encoder ? bind(tape, *encoder, false) : bind_identity();
}

}  // namespace

Tensor soft_kmeans(const Episode& episode, const EncoderParams* encoder, ViewSpec view, const MetricSpec& metric,
                   std::size_t steps) {
  Tape tape;
  auto enc = bind_optional(tape, encoder);
  auto m = bind(tape, metric, false);
  const ViewSpec views[] = {view};
  auto emb = embed_episode(enc, tape, episode, views, Mode::Eval, nullptr);
  return soft_kmeans(m, emb[0], episode.support_labels, episode.ways, steps).value();
}

Tensor mct_infer(const Episode& episode, const EncoderParams* encoder, std::span<const ViewSpec> views,
                 const MetricSpec& metric, std::size_t steps, std::vector<Tensor>* per_step) {
  Tape tape;
  auto enc = bind_optional(tape, encoder);
  auto m = bind(tape, metric, false);
  auto emb = embed_episode(enc, tape, episode, views, Mode::Eval, nullptr);
  StepObserver observer;
  if (per_step) {
    per_step->clear();
    observer = [per_step](std::size_t, Var q, std::span<const Var>) { per_step->push_back(q.value()); };
  }
  return mct_infer(m, emb, episode.support_labels, episode.ways, steps, observer).value();
}

std::vector<int> predict(const Tensor& confidence) {
  std::vector<int> out(confidence.rows());
  for (std::size_t i = 0; i < confidence.rows(); ++i) {
    const auto row = confidence.row_span(i);
    // max_element returns the first maximum, i.e. the lowest index on ties.
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double accuracy(const Tensor& confidence, std::span<const int> labels) {
  if (labels.size() != confidence.rows()) throw ContractError("accuracy: one label per row required");
  const auto pred = predict(confidence);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace mct
