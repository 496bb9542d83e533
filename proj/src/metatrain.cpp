#include "mct/metatrain.hpp"

#include <algorithm>
#include <cmath>

#include "mct/errors.hpp"

namespace mct {

double lr_at(std::size_t step, const LrSchedule& schedule) {
  if (!(schedule.step_divisor > 0.0)) throw ContractError("lr schedule: step_divisor must be positive");
  double lr = schedule.initial;
  const double scaled = static_cast<double>(step) * schedule.step_divisor;
  for (const auto& [at, value] : schedule.breakpoints) {
    if (scaled >= static_cast<double>(at)) lr = value;
  }
  return lr;
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ContractError("train config: lambda must be >= 0");
  if (transduction_steps < 1) throw ContractError("train config: transduction_steps must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("train config: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ContractError("train config: weight_decay must be >= 0");
  if (shape.ways < 2 || shape.shots == 0 || shape.queries == 0)
    throw ContractError("train config: need >= 2 ways, >= 1 shot and >= 1 query");
}

GlobalClassifier GlobalClassifier::init(std::size_t channels, std::size_t classes) {
  if (channels == 0 || classes == 0) throw ContractError("classifier: dimensions must be positive");
  return GlobalClassifier{Tensor::zeros({channels, classes})};
}

// ---- model ------------------------------------------------------------------------

Model Model::create(const ModelConfig& config, Rng& rng) {
  if (config.input_dim == 0) throw ContractError("model: input_dim must be positive");
  Model m;
  m.input_dim = config.input_dim;
  if (!config.identity_encoder) {
    auto enc = config.encoder;
    enc.input_dim = config.input_dim;
    m.encoder = EncoderParams::init(enc, rng);
  }
  m.metric = MetricSpec::make(config.metric, m.embedding_dim(), rng);
  if (config.global_classes) m.classifier = GlobalClassifier::init(m.channels(), config.global_classes);
  return m;
}

ParamList Model::to_params() const {
  ParamList out;
  out.push_back({"model.input_dim", Tensor::scalar(static_cast<double>(input_dim))});
  if (encoder) append_params(*encoder, out);
  append_params(metric, out);
  if (classifier) out.push_back({"classifier.weight", classifier->weight});
  return out;
}

Model Model::from_params(const ParamList& list) {
  Model m;
  m.input_dim = static_cast<std::size_t>(find_param(list, "model.input_dim").item());
  if (has_param(list, "encoder.in.w")) {
    m.encoder = encoder_from_params(list);
    if (m.encoder->input_dim() != m.input_dim) throw FormatError("encoder input width disagrees with model.input_dim", 0);
  }
  m.metric = metric_from_params(list);
  if (m.metric.scaler) {
    const auto want = m.metric.kind == MetricKind::Pair ? 2 * m.embedding_dim() : m.embedding_dim();
    if (m.metric.scaler->input_width() != want) throw FormatError("scaler input width disagrees with embedding", 0);
  }
  if (has_param(list, "classifier.weight")) {
    m.classifier = GlobalClassifier{find_param(list, "classifier.weight")};
    if (m.classifier->weight.rows() != m.channels())
      throw FormatError("classifier rows disagree with embedding channels", 0);
  }
  return m;
}

BoundModel bind(Tape& tape, const Model& model, bool trainable) {
  BoundModel out;
  if (model.encoder) {
    out.encoder = bind(tape, *model.encoder, trainable);
    out.leaves.push_back({"encoder.in.w", out.encoder.in_w});
    out.leaves.push_back({"encoder.in.b", out.encoder.in_b});
    for (std::size_t b = 0; b < out.encoder.blocks.size(); ++b) {
      const auto prefix = "encoder.block" + std::to_string(b) + ".";
      const auto& [w1, b1, w2, b2] = out.encoder.blocks[b];
      out.leaves.push_back({prefix + "w1", w1});
      out.leaves.push_back({prefix + "b1", b1});
      out.leaves.push_back({prefix + "w2", w2});
      out.leaves.push_back({prefix + "b2", b2});
    }
  } else {
    out.encoder = bind_identity();
  }
  out.metric = bind(tape, model.metric, trainable);
  if (model.metric.kind == MetricKind::Scaled) out.leaves.push_back({"metric.s", out.metric.s});
  if (model.metric.scaler) {
    out.leaves.push_back({"scaler.w1", out.metric.w1});
    out.leaves.push_back({"scaler.b1", out.metric.b1});
    out.leaves.push_back({"scaler.w2", out.metric.w2});
    out.leaves.push_back({"scaler.b2", out.metric.b2});
    out.leaves.push_back({"scaler.alpha", out.metric.alpha});
    out.leaves.push_back({"scaler.beta", out.metric.beta});
  }
  if (model.classifier) {
    out.classifier = trainable ? tape.parameter(model.classifier->weight) : tape.constant(model.classifier->weight);
    out.leaves.push_back({"classifier.weight", out.classifier});
  }
  if (!trainable) out.leaves.clear();
  return out;
}

// ---- losses -------------------------------------------------------------------------

Var instance_loss(const BoundMetric& metric, const ViewEmbeddings& selected, const ViewEmbeddings& full,
                  std::span<const int> support_labels, std::span<const int> query_labels, std::size_t ways,
                  std::size_t steps, bool detach_confidence) {
  if (query_labels.size() != full.query.rows()) throw ContractError("instance_loss: one label per query required");
  Var conf_protos = init_prototypes(selected.support, support_labels, ways);
  Var protos = init_prototypes(full.support, support_labels, ways);
  for (std::size_t t = 1; t <= steps; ++t) {
    Var q = confidence(metric, selected.query, conf_protos);
    if (detach_confidence) q = stop_gradient(q);
    protos = update_prototypes(full.support, support_labels, ways, full.query, q);
    if (t < steps) conf_protos = update_prototypes(selected.support, support_labels, ways, selected.query, q);
  }
  Var d = distance_matrix(metric, full.query, protos);
  return mean(add(pick(d, query_labels), row_logsumexp(neg(d))));
}

Var dimension_loss(Var embeddings, std::size_t positions, std::span<const int> global_labels, Var classifier) {
  if (global_labels.empty()) throw ContractError("dimension_loss: episode has no global labels");
  const auto n = embeddings.rows();
  if (global_labels.size() != n) throw ContractError("dimension_loss: one global label per item required");
  if (positions == 0 || embeddings.cols() % positions != 0)
    throw ContractError("dimension_loss: embedding does not split into positions");
  const auto channels = embeddings.cols() / positions;
  if (classifier.rows() != channels) throw ContractError("dimension_loss: classifier rows must equal channels");
  std::vector<int> labels;
  labels.reserve(n * positions);
  for (int y : global_labels) labels.insert(labels.end(), positions, y);
  Var logits = matmul(reshape(embeddings, n * positions, channels), classifier);
  return mean(sub(row_logsumexp(logits), pick(logits, labels)));
}

LossEvaluation evaluate_loss(const Model& model, const Episode& episode, const TrainConfig& config, Rng& rng,
                             bool want_gradients) {
  config.validate();
  if (!episode.query) throw ContractError("evaluate_loss: episode has no queries");

  ViewSpec selected_view = kFullView;
  if (config.all_views) {
    const auto views = all_views();
    std::uniform_int_distribution<std::size_t> pick_view(0, views.size() - 1);
    selected_view = views[pick_view(rng)];
  }

  Episode ep = episode;
  if (config.weak_strong) {
    ep.support = perturb_rows(ep.support, Strength::Weak, rng, config.perturb);
    ep.query = perturb_rows(*ep.query, Strength::Strong, rng, config.perturb);
  }

  Tape tape;
  auto bm = bind(tape, model, want_gradients);
  std::vector<ViewSpec> views{kFullView};
  if (selected_view != kFullView) views.push_back(selected_view);
  auto emb = embed_episode(bm.encoder, tape, ep, views, Mode::Train, &rng);
  const auto& full = emb[0];
  const auto& selected = emb.back();

  Var li = instance_loss(bm.metric, selected, full, ep.support_labels, ep.query_labels, ep.ways,
                         config.transduction_steps, config.detach_confidence);
  Var loss = scale(li, config.lambda);

  LossEvaluation out;
  out.report.instance = li.value().item();
  out.report.view = view_name(selected_view);
  if (config.dimension_loss && model.classifier) {
    if (ep.support_global.empty() || ep.query_global.empty())
      throw ContractError("evaluate_loss: dimension-wise loss needs global labels");
    std::vector<int> labels = ep.support_global;
    labels.insert(labels.end(), ep.query_global.begin(), ep.query_global.end());
    const Var parts[] = {full.support, full.query};
    Var ld = dimension_loss(vstack(parts), model.positions(), labels, bm.classifier);
    out.report.dimension = ld.value().item();
    loss = add(loss, ld);
  }
  out.report.total = loss.value().item();
  out.branches = tape.branch_fingerprint();

  if (want_gradients) {
    const auto grads = tape.grad(loss);
    for (const auto& [name, var] : bm.leaves) out.gradients.push_back({name, grads[var]});
  }
  return out;
}

void NesterovSgd::step(ParamList& params, const ParamList& gradients, double lr, double momentum,
                       double weight_decay) {
  for (const auto& [name, grad] : gradients) {
    auto it = std::find_if(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == name; });
    if (it == params.end()) throw ContractError("optimizer: no parameter named " + name);
    if (!it->value.same_shape(grad)) throw ContractError("optimizer: gradient shape mismatch for " + name);

    auto vel = std::find_if(velocity_.begin(), velocity_.end(), [&](const auto& v) { return v.first == name; });
    if (vel == velocity_.end()) {
      velocity_.push_back({name, std::vector<double>(grad.size(), 0.0)});
      vel = std::prev(velocity_.end());
    }
    auto& v = vel->second;
    const auto p = it->value.data();
    const auto g = grad.data();
    std::vector<double> next(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = g[i] + weight_decay * p[i];
      v[i] = momentum * v[i] + d;
      next[i] = p[i] - lr * (d + momentum * v[i]);
    }
    it->value = Tensor(it->value.shape(), std::move(next));
  }
}

LossReport train_step(const Episode& episode, Model& model, NesterovSgd& optimizer, const TrainConfig& config,
                      Rng& rng, std::size_t step_index) {
  auto eval = evaluate_loss(model, episode, config, rng, true);
  const double lr = lr_at(step_index, config.schedule);
  auto params = model.to_params();
  optimizer.step(params, eval.gradients, lr, config.momentum, config.weight_decay);
  model = Model::from_params(params);
  eval.report.lr = lr;
  return eval.report;
}

std::vector<LossReport> train(Model& model, const EpisodeSource& source, const TrainConfig& config,
                              std::size_t steps, const TrainCallback& callback) {
  config.validate();
  Rng rng(config.seed);
  NesterovSgd optimizer;
  std::vector<LossReport> history;
  history.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    const auto episode = source.sample(config.shape, derive_seed(config.seed, step));
    history.push_back(train_step(episode, model, optimizer, config, rng, step));
    if (callback) callback(step, history.back());
    if (config.checkpoint_every && (step + 1) % config.checkpoint_every == 0 && !config.checkpoint_path.empty())
      save_checkpoint(config.checkpoint_path, model.to_params());
  }
  return history;
}

}  // namespace mct
