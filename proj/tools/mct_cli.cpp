#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mct/errors.hpp"
#include "mct/evaluate.hpp"

using namespace mct;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitFormat = 2;
constexpr int kExitGradcheck = 3;

struct SourceOptions {
  std::string source = "synth";
  std::size_t dim = 16;
  double spread = 4.0;
  double within_std = 1.0;
  std::size_t pool_classes = 0;
  std::uint64_t pool_seed = 1;

  void add(CLI::App* app) {
    app->add_option("--source", source, "synth or an MCTE embedding file");
    app->add_option("--dim", dim, "synthetic input width");
    app->add_option("--spread", spread, "synthetic class-mean radius");
    app->add_option("--std", within_std, "synthetic within-class std");
    app->add_option("--pool-classes", pool_classes, "synthetic class pool size (0: fresh means per episode)");
    app->add_option("--pool-seed", pool_seed, "synthetic class pool seed");
  }

  EpisodeSource make() const {
    if (source != "synth") return EpisodeSource(std::make_shared<const EmbeddingTable>(load_embeddings(source)));
    SyntheticSpec spec;
    spec.input_dim = dim;
    spec.class_spread = spread;
    spec.within_std = within_std;
    spec.pool_classes = pool_classes;
    spec.pool_seed = pool_seed;
    return EpisodeSource(spec);
  }
};

bool on_off(const std::string& value, const std::string& flag) {
  if (value == "on") return true;
  if (value == "off") return false;
  throw ContractError(flag + " expects on|off, got '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// key=value lines become "--key=value" arguments placed before the command
// line ones, so explicit flags win.
std::vector<std::string> config_args(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config file " + path);
  std::vector<std::string> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ContractError(path + ":" + std::to_string(n) + ": expected key=value");
    auto key = trim(line.substr(0, eq));
    while (key.starts_with("-")) key.erase(0, 1);
    for (auto& c : key)
      if (c == '_') c = '-';
    out.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return out;
}

// Splices --config files into the argument list after the subcommand.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::vector<std::string> rest;
  std::vector<std::string> from_file;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      const auto more = config_args(args[++i]);
      from_file.insert(from_file.end(), more.begin(), more.end());
    } else if (args[i].starts_with("--config=")) {
      const auto more = config_args(args[i].substr(9));
      from_file.insert(from_file.end(), more.begin(), more.end());
    } else {
      rest.push_back(args[i]);
    }
  }
  std::vector<std::string> out{args[0]};
  if (!rest.empty()) out.push_back(rest[0]);
  out.insert(out.end(), from_file.begin(), from_file.end());
  if (rest.size() > 1) out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

int run_train(const SourceOptions& src, const EpisodeShape& shape, std::size_t steps, double lambda, double lr,
              std::uint64_t seed, const std::string& out, const std::string& metric, const std::string& encoder,
              const std::string& views, const std::string& weak_strong, const std::string& schedule,
              std::size_t log_every) {
  const auto source = src.make();
  ModelConfig mc;
  mc.input_dim = source.input_dim();
  mc.metric = parse_metric(metric);
  if (encoder == "identity") {
    mc.identity_encoder = true;
  } else if (encoder != "residual") {
    throw ContractError("--encoder expects residual|identity");
  }
  mc.global_classes = source.global_classes();

  TrainConfig tc;
  tc.shape = shape;
  tc.lambda = lambda;
  tc.seed = seed;
  tc.all_views = views == "all";
  if (views != "all" && views != "full") throw ContractError("--views expects all|full");
  tc.weak_strong = on_off(weak_strong, "--weak-strong");
  if (schedule == "full") {
    tc.schedule = LrSchedule::full_scale();
  } else if (schedule != "desk") {
    throw ContractError("--schedule expects desk|full");
  }
  // --lr rescales the whole schedule, keeping the breakpoint ratios.
  const double ratio = lr / tc.schedule.initial;
  tc.schedule.initial = lr;
  for (auto& bp : tc.schedule.breakpoints) bp.second *= ratio;

  Rng rng(seed);
  auto model = Model::create(mc, rng);
  if (!model.classifier) tc.dimension_loss = false;
  train(model, source, tc, steps, [&](std::size_t step, const LossReport& r) {
    if (log_every && ((step + 1) % log_every == 0 || step + 1 == steps))
      std::printf("step %zu  loss %.4f  instance %.4f  dimension %.4f  lr %g\n", step + 1, r.total, r.instance,
                  r.dimension, r.lr);
  });
  save_checkpoint(out, model.to_params());
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned metric transduction for few-shot classification"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all");
  app.footer("Any subcommand accepts --config <file> with key=value lines; flags override the file.");

  // train
  auto* train_cmd = app.add_subcommand("train", "meta-train a model and write an MCTP checkpoint");
  SourceOptions train_src;
  train_src.pool_classes = 64;
  train_src.add(train_cmd);
  EpisodeShape train_shape = TrainConfig{}.shape;
  std::size_t train_steps = 500, log_every = 50;
  double lambda = 0.5, lr = 0.1;
  std::uint64_t train_seed = 0;
  std::string out, train_metric = "instance", encoder = "residual", views = "all", weak_strong = "on",
                   schedule = "desk";
  train_cmd->add_option("--ways", train_shape.ways, "classes per training episode");
  train_cmd->add_option("--shots", train_shape.shots, "support items per class");
  train_cmd->add_option("--queries", train_shape.queries, "query items per class");
  train_cmd->add_option("--steps", train_steps, "optimizer steps");
  train_cmd->add_option("--lambda", lambda, "weight of the instance-wise loss");
  train_cmd->add_option("--lr", lr, "initial learning rate");
  train_cmd->add_option("--seed", train_seed, "master seed");
  train_cmd->add_option("--out", out, "checkpoint path")->required();
  train_cmd->add_option("--metric", train_metric, "euclid|scaled|instance|pair");
  train_cmd->add_option("--encoder", encoder, "residual|identity");
  train_cmd->add_option("--views", views, "all|full");
  train_cmd->add_option("--weak-strong", weak_strong, "on|off");
  train_cmd->add_option("--schedule", schedule, "desk|full");
  train_cmd->add_option("--log-every", log_every, "steps between log lines (0: quiet)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score a model on seeded episodes");
  SourceOptions eval_src;
  eval_src.add(eval_cmd);
  Protocol protocol;
  std::string checkpoint, eval_metric, mode = "transductive", ensemble = "on", report;
  double floor = 0.0;
  eval_cmd->add_option("--checkpoint", checkpoint, "MCTP model (default: identity encoder)");
  eval_cmd->add_option("--mode", mode, "inductive|transductive|semi");
  eval_cmd->add_option("--transduction-steps", protocol.steps, "prototype refinement steps");
  eval_cmd->add_option("--metric", eval_metric, "euclid|scaled|instance|pair");
  eval_cmd->add_option("--ensemble", ensemble, "on|off");
  eval_cmd->add_option("--episodes", protocol.episodes, "number of episodes");
  eval_cmd->add_option("--seed", protocol.seed, "master seed");
  eval_cmd->add_option("--report", report, "write per-episode JSON lines here");
  eval_cmd->add_option("--workers", protocol.workers, "scoring threads");
  eval_cmd->add_option("--ways", protocol.shape.ways, "classes per episode");
  eval_cmd->add_option("--shots", protocol.shape.shots, "support items per class");
  eval_cmd->add_option("--queries", protocol.shape.queries, "query items per class");
  eval_cmd->add_option("--unlabeled", protocol.shape.unlabeled, "unlabeled items per class in semi mode");
  eval_cmd->add_option("--distractors", protocol.shape.distractors, "distractor classes in semi mode");
  eval_cmd->add_option("--confidence-floor", floor, "semi mode: drop unlabeled rows below this confidence");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "compare tape gradients with central differences");
  GradcheckConfig gc;
  std::string grad_metric = "all";
  grad_cmd->add_option("--trials", gc.trials, "random models per metric");
  grad_cmd->add_option("--tolerance", gc.tolerance, "maximum relative error");
  grad_cmd->add_option("--seed", gc.seed, "master seed");
  grad_cmd->add_option("--metric", grad_metric, "all|euclid|scaled|instance|pair");

  // make-synth
  auto* synth_cmd = app.add_subcommand("make-synth", "write a synthetic MCTE embedding file");
  SyntheticSpec synth;
  synth.pool_classes = 64;
  std::size_t per_class = 100;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  synth_cmd->add_option("--out", synth_out, "MCTE path")->required();
  synth_cmd->add_option("--classes", synth.pool_classes, "number of classes");
  synth_cmd->add_option("--per-class", per_class, "rows per class");
  synth_cmd->add_option("--dim", synth.input_dim, "embedding width");
  synth_cmd->add_option("--spread", synth.class_spread, "class-mean radius");
  synth_cmd->add_option("--std", synth.within_std, "within-class std");
  synth_cmd->add_option("--pool-seed", synth.pool_seed, "class-mean seed");
  synth_cmd->add_option("--seed", synth_seed, "row sampling seed");

  try {
    auto args = expand_config(argc, argv);
    std::vector<char*> ptrs;
    for (auto& a : args) ptrs.push_back(a.data());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }

  try {
    if (*train_cmd) {
      return run_train(train_src, train_shape, train_steps, lambda, lr, train_seed, out, train_metric, encoder, views,
                       weak_strong, schedule, log_every);
    }

    if (*eval_cmd) {
      const auto source = eval_src.make();
      Model model;
      if (!checkpoint.empty()) {
        model = Model::from_params(load_checkpoint(checkpoint));
        if (!eval_metric.empty() && parse_metric(eval_metric) != model.metric.kind)
          throw ContractError("--metric " + eval_metric + " disagrees with the checkpoint's " +
                              metric_name(model.metric.kind));
        if (model.input_dim != source.input_dim())
          throw ContractError("checkpoint expects input width " + std::to_string(model.input_dim) + ", source has " +
                              std::to_string(source.input_dim()));
      } else {
        ModelConfig mc;
        mc.input_dim = source.input_dim();
        mc.identity_encoder = true;
        mc.metric = parse_metric(eval_metric.empty() ? "euclid" : eval_metric);
        Rng rng(protocol.seed);
        model = Model::create(mc, rng);
      }
      protocol.mode = parse_mode(mode);
      protocol.ensemble = on_off(ensemble, "--ensemble");
      protocol.semi.confidence_floor = floor;
      const auto r = evaluate(model, source, protocol);
      if (!report.empty()) {
        std::ofstream f(report, std::ios::binary);
        if (!f) throw ContractError("cannot write report " + report);
        f << report_jsonl(r);
      }
      std::fputs(report_table(r).c_str(), stdout);
      return 0;
    }

    if (*grad_cmd) {
      if (grad_metric != "all") gc.metrics = {parse_metric(grad_metric)};
      const auto r = gradcheck(gc);
      for (const auto& g : r.groups)
        std::printf("%-9s %-22s entries %6zu  max rel %.3e\n", g.metric.c_str(), g.name.c_str(), g.entries,
                    g.max_rel_error);
      std::printf("%s  max rel %.3e at %s  (tolerance %g, %zu redrawn trials)\n", r.passed ? "PASS" : "FAIL",
                  r.max_rel_error, r.worst.c_str(), gc.tolerance, r.redraws);
      return r.passed ? 0 : kExitGradcheck;
    }

    if (*synth_cmd) {
      save_embeddings(synth_out, synthetic_table(synth, per_class, synth_seed));
      std::printf("wrote %s (%zu rows, dim %zu)\n", synth_out.c_str(), synth.pool_classes * per_class,
                  synth.input_dim);
      return 0;
    }
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitFormat;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
