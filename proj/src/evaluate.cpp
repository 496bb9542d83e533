#include "mct/evaluate.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "mct/errors.hpp"

namespace mct {

std::string mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::Inductive: return "inductive";
    case EvalMode::Transductive: return "transductive";
    case EvalMode::Semi: return "semi";
  }
  return "?";
}

EvalMode parse_mode(const std::string& name) {
  if (name == "inductive") return EvalMode::Inductive;
  if (name == "transductive") return EvalMode::Transductive;
  if (name == "semi") return EvalMode::Semi;
  throw ContractError("unknown mode '" + name + "' (expected inductive|transductive|semi)");
}

std::size_t Protocol::unlabeled_per_class() const {
  if (shape.unlabeled) return shape.unlabeled;
  return shape.shots == 1 ? 30 : 50;
}

double nll(const Tensor& confidence, std::span<const int> labels) {
  if (labels.size() != confidence.rows()) throw ContractError("nll: one label per row required");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= confidence.cols())
      throw ContractError("nll: label out of range");
    const double q = confidence.at(i, static_cast<std::size_t>(labels[i]));
    if (q <= 0.0) return std::numeric_limits<double>::infinity();
    total -= std::log(q);
  }
  return total / static_cast<double>(labels.size());
}

double ci95(std::span<const double> samples) {
  const auto n = samples.size();
  if (n < 2) return 0.0;
  double mean = 0.0;
  for (double x : samples) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return 1.96 * sd / std::sqrt(static_cast<double>(n));
}

EpisodeRecord evaluate_episode(const Model& model, const Episode& episode, const Protocol& protocol) {
  std::vector<ViewSpec> views{kFullView};
  if (protocol.ensemble) {
    const auto all = all_views();
    views.assign(all.begin(), all.end());
  }
  const bool semi = protocol.mode == EvalMode::Semi;
  Tape tape;
  auto bm = bind(tape, model, false);
  auto emb = embed_episode(bm.encoder, tape, episode, views, Mode::Eval, nullptr, semi);

  EpisodeRecord rec;
  Tensor initial;
  Tensor final_conf;
  if (semi) {
    initial = mct_infer(bm.metric, emb, episode.support_labels, episode.ways, 0).value();
    final_conf = semi_infer(bm.metric, emb, episode.support_labels, episode.ways, protocol.semi).query_confidence.value();
  } else {
    const auto steps = protocol.mode == EvalMode::Inductive ? 0 : protocol.steps;
    auto observer = [&initial](std::size_t t, Var q, std::span<const Var>) {
      if (t == 0) initial = q.value();
    };
    final_conf = mct_infer(bm.metric, emb, episode.support_labels, episode.ways, steps, observer).value();
  }
  rec.accuracy = accuracy(final_conf, episode.query_labels);
  rec.nll_initial = nll(initial, episode.query_labels);
  rec.nll_final = nll(final_conf, episode.query_labels);
  return rec;
}

namespace {

nlohmann::json protocol_json(const Model& model, const Protocol& p) {
  return {
      {"ways", p.shape.ways},
      {"shots", p.shape.shots},
      {"queries", p.shape.queries},
      {"unlabeled", p.mode == EvalMode::Semi ? p.unlabeled_per_class() : 0},
      {"distractors", p.shape.distractors},
      {"episodes", p.episodes},
      {"transduction_steps", p.mode == EvalMode::Inductive ? 0 : p.steps},
      {"mode", mode_name(p.mode)},
      {"ensemble", p.ensemble},
      {"seed", p.seed},
      {"metric", metric_name(model.metric.kind)},
      {"encoder", model.encoder ? "residual" : "identity"},
      {"confidence_floor", p.semi.confidence_floor},
  };
}

}  // namespace

Report evaluate(const Model& model, const EpisodeSource& source, const Protocol& protocol) {
  if (protocol.episodes == 0) throw ContractError("evaluate: need at least one episode");
  auto shape = protocol.shape;
  if (protocol.mode == EvalMode::Semi) shape.unlabeled = protocol.unlabeled_per_class();

  std::vector<EpisodeRecord> records(protocol.episodes);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto work = [&] {
    for (std::size_t i = next++; i < protocol.episodes && !failed; i = next++) {
      try {
        const auto seed = derive_seed(protocol.seed, i);
        auto rec = evaluate_episode(model, source.sample(shape, seed), protocol);
        rec.index = i;
        rec.seed = seed;
        records[i] = rec;
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  const auto workers = std::max<std::size_t>(1, protocol.workers);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  Report r;
  r.n_episodes = records.size();
  r.mode = protocol.mode;
  std::vector<double> accs;
  for (const auto& rec : records) {
    accs.push_back(rec.accuracy);
    r.mean_accuracy += rec.accuracy;
    r.mean_nll += rec.nll_initial;
    r.mean_nll_final += rec.nll_final;
    if (std::isinf(rec.nll_initial) || std::isinf(rec.nll_final)) ++r.infinite_nll;
  }
  const auto n = static_cast<double>(records.size());
  r.mean_accuracy /= n;
  r.mean_nll /= n;
  r.mean_nll_final /= n;
  r.ci95 = ci95(accs);
  r.records = std::move(records);
  r.config = protocol_json(model, protocol).dump();
  return r;
}

std::string report_jsonl(const Report& report) {
  std::string out;
  for (const auto& rec : report.records) {
    nlohmann::json j = {{"episode", rec.index},         {"seed", rec.seed},
                        {"accuracy", rec.accuracy},     {"nll_initial", rec.nll_initial},
                        {"nll_final", rec.nll_final}};
    out += j.dump() + "\n";
  }
  nlohmann::json summary = {{"summary", true},
                            {"n_episodes", report.n_episodes},
                            {"mean_accuracy", report.mean_accuracy},
                            {"ci95", report.ci95},
                            {"mean_nll", report.mean_nll},
                            {"mean_nll_final", report.mean_nll_final},
                            {"infinite_nll", report.infinite_nll},
                            {"mode", mode_name(report.mode)},
                            {"config", nlohmann::json::parse(report.config)}};
  out += summary.dump() + "\n";
  return out;
}

std::string report_table(const Report& report) {
  const auto cfg = nlohmann::json::parse(report.config);
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %-8s %zu-way %zu-shot  acc %6.2f +- %.2f  nll@0 %.4f  nll@T %.4f  (%zu episodes)\n",
                mode_name(report.mode).c_str(), cfg.at("metric").get<std::string>().c_str(),
                cfg.at("ways").get<std::size_t>(), cfg.at("shots").get<std::size_t>(), 100.0 * report.mean_accuracy,
                100.0 * report.ci95, report.mean_nll, report.mean_nll_final, report.n_episodes);
  return line;
}

}  // namespace mct
