#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mct/errors.hpp"
#include "mct/evaluate.hpp"

using namespace mct;

namespace {

Model identity_model(MetricKind kind, std::size_t dim = 16) {
  ModelConfig mc;
  mc.input_dim = dim;
  mc.identity_encoder = true;
  mc.metric = kind;
  Rng rng(1);
  return Model::create(mc, rng);
}

Model encoder_model(MetricKind kind) {
  ModelConfig mc;
  mc.metric = kind;
  Rng rng(2);
  return Model::create(mc, rng);
}

Protocol small_protocol(EvalMode mode, std::size_t episodes = 40) {
  Protocol p;
  p.episodes = episodes;
  p.mode = mode;
  p.seed = 17;
  return p;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("mode names round trip") {
  for (auto m : {EvalMode::Inductive, EvalMode::Transductive, EvalMode::Semi}) CHECK(parse_mode(mode_name(m)) == m);
  CHECK_THROWS_AS(parse_mode("greedy"), ContractError);
}

TEST_CASE("nll closed forms") {
  const auto onehot = Tensor::matrix({{1, 0, 0}, {0, 0, 1}});
  const int labels[] = {0, 2};
  CHECK(nll(onehot, labels) == 0.0);

  const auto uniform = Tensor::filled({2, 5}, 0.2);
  const int ul[] = {3, 1};
  CHECK(std::abs(nll(uniform, ul) - std::log(5.0)) < 1e-12);

  const int wrong[] = {1, 2};
  CHECK(nll(onehot, wrong) == std::numeric_limits<double>::infinity());

  const int out_of_range[] = {0, 3};
  CHECK_THROWS_AS(nll(onehot, out_of_range), ContractError);
  const int short_labels[] = {0};
  CHECK_THROWS_AS(nll(onehot, short_labels), ContractError);
}

TEST_CASE("ci95 matches the reference formula") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(2 + trial * 10);
    for (auto& v : x) v = u(rng);
    const double n = static_cast<double>(x.size());
    double m = 0.0;
    for (double v : x) m += v / n;
    double var = 0.0;
    for (double v : x) var += (v - m) * (v - m) / (n - 1.0);
    REQUIRE(std::abs(ci95(x) - 1.96 * std::sqrt(var / n)) < 1e-12);
  }
  CHECK(ci95(std::vector<double>{0.7}) == 0.0);
  CHECK(ci95(std::vector<double>{}) == 0.0);
  CHECK(ci95(std::vector<double>{0.5, 0.5, 0.5}) == 0.0);
}

TEST_CASE("unlabeled set size defaults") {
  Protocol p;
  CHECK(p.unlabeled_per_class() == 30);
  p.shape.shots = 5;
  CHECK(p.unlabeled_per_class() == 50);
  p.shape.unlabeled = 7;
  CHECK(p.unlabeled_per_class() == 7);
}

TEST_CASE("summary statistics agree with the episode records") {
  const auto model = identity_model(MetricKind::Euclid);
  const auto r = evaluate(model, EpisodeSource(SyntheticSpec{}), small_protocol(EvalMode::Transductive));
  REQUIRE(r.records.size() == 40);
  std::vector<double> accs;
  double acc = 0.0, nll0 = 0.0;
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    CHECK(r.records[i].index == i);
    CHECK(r.records[i].seed == derive_seed(17, i));
    accs.push_back(r.records[i].accuracy);
    acc += r.records[i].accuracy / 40.0;
    nll0 += r.records[i].nll_initial / 40.0;
  }
  CHECK(std::abs(r.mean_accuracy - acc) < 1e-12);
  CHECK(std::abs(r.mean_nll - nll0) < 1e-12);
  CHECK(r.ci95 == ci95(accs));
  CHECK(r.infinite_nll == 0);
}

TEST_CASE("reports are byte-identical across runs and worker counts") {
  const auto model = encoder_model(MetricKind::Instance);
  const EpisodeSource source(SyntheticSpec{});
  auto p = small_protocol(EvalMode::Transductive, 24);
  const auto base = report_jsonl(evaluate(model, source, p));
  CHECK(report_jsonl(evaluate(model, source, p)) == base);
  for (std::size_t w : {2u, 3u, 8u}) {
    p.workers = w;
    CHECK(report_jsonl(evaluate(model, source, p)) == base);
  }
  p.seed = 18;
  CHECK(report_jsonl(evaluate(model, source, p)) != base);
}

TEST_CASE("zero transduction steps reproduce inductive inference") {
  const auto model = encoder_model(MetricKind::Pair);
  const EpisodeSource source(SyntheticSpec{});
  auto trans = small_protocol(EvalMode::Transductive, 20);
  trans.steps = 0;
  const auto a = evaluate(model, source, trans);
  const auto b = evaluate(model, source, small_protocol(EvalMode::Inductive, 20));
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].accuracy == b.records[i].accuracy);
    CHECK(a.records[i].nll_initial == b.records[i].nll_initial);
    CHECK(b.records[i].nll_final == b.records[i].nll_initial);
  }
}

TEST_CASE("inference never reads query labels") {
  const auto model = encoder_model(MetricKind::Instance);
  auto ep = EpisodeSource(SyntheticSpec{}).sample(EpisodeShape{5, 1, 15, 0, 0}, 4);
  const auto views = all_views();
  for (std::size_t steps : {0u, 1u, 10u}) {
    const auto before = mct_infer(ep, &*model.encoder, views, model.metric, steps);
    auto blind = ep;
    for (auto& y : blind.query_labels) y = 0;
    CHECK(mct_infer(blind, &*model.encoder, views, model.metric, steps) == before);
  }
}

TEST_CASE("transduction helps on separable synthetic tasks") {
  const auto model = identity_model(MetricKind::Euclid);
  const EpisodeSource source(SyntheticSpec{});
  const auto ind = evaluate(model, source, small_protocol(EvalMode::Inductive, 200));
  const auto tr = evaluate(model, source, small_protocol(EvalMode::Transductive, 200));
  CHECK(tr.mean_accuracy > ind.mean_accuracy);
}

TEST_CASE("semi-supervised mode uses the unlabeled pool") {
  const auto model = identity_model(MetricKind::Euclid);
  const EpisodeSource source(SyntheticSpec{});
  auto p = small_protocol(EvalMode::Semi, 20);
  p.shape.unlabeled = 10;
  const auto r = evaluate(model, source, p);
  const auto cfg = nlohmann::json::parse(r.config);
  CHECK(cfg.at("unlabeled").get<std::size_t>() == 10);
  CHECK(cfg.at("transduction_steps").get<std::size_t>() == 10);
  bool moved = false;
  for (const auto& rec : r.records) moved = moved || rec.nll_final != rec.nll_initial;
  CHECK(moved);
}

TEST_CASE("report formats") {
  const auto model = identity_model(MetricKind::Euclid);
  const auto r = evaluate(model, EpisodeSource(SyntheticSpec{}), small_protocol(EvalMode::Transductive, 5));
  const auto ls = lines(report_jsonl(r));
  REQUIRE(ls.size() == 6);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto j = nlohmann::json::parse(ls[i]);
    CHECK(j.at("episode").get<std::size_t>() == i);
    CHECK(j.at("accuracy").get<double>() == r.records[i].accuracy);
  }
  const auto s = nlohmann::json::parse(ls.back());
  CHECK(s.at("summary").get<bool>());
  CHECK(s.at("n_episodes").get<std::size_t>() == 5);
  CHECK(s.at("config").at("ways").get<std::size_t>() == 5);
  CHECK(s.at("config").at("mode").get<std::string>() == "transductive");
  CHECK(s.at("config").at("encoder").get<std::string>() == "identity");

  const auto table = report_table(r);
  CHECK(table.find("transductive") != std::string::npos);
  CHECK(table.find("5-way 1-shot") != std::string::npos);
  CHECK(table.find("+-") != std::string::npos);

  auto none = small_protocol(EvalMode::Transductive, 0);
  CHECK_THROWS_AS(evaluate(model, EpisodeSource(SyntheticSpec{}), none), ContractError);
}

TEST_CASE("gradient check harness") {
  GradcheckConfig quick;
  quick.trials = 2;
  const auto r = gradcheck(quick);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
  CHECK_FALSE(r.worst.empty());
  bool has_scaler = false;
  for (const auto& g : r.groups) {
    CHECK(g.entries > 0);
    if (g.metric == "euclid") CHECK_FALSE(g.name.starts_with("scaler."));
    if (g.metric == "euclid") CHECK(g.name != "metric.s");
    has_scaler = has_scaler || (g.metric == "pair" && g.name == "scaler.alpha");
  }
  CHECK(has_scaler);

  SUBCASE("tolerance zero always fails") {
    auto strict = quick;
    strict.tolerance = 0.0;
    strict.trials = 1;
    CHECK_FALSE(gradcheck(strict).passed);
  }

  SUBCASE("bad configs") {
    auto bad = quick;
    bad.trials = 0;
    CHECK_THROWS_AS(gradcheck(bad), ContractError);
    bad = quick;
    bad.step = 0.0;
    CHECK_THROWS_AS(gradcheck(bad), ContractError);
  }

  SUBCASE("caller-supplied model") {
    ModelConfig mc;
    mc.input_dim = 6;
    mc.encoder.hidden = 8;
    mc.encoder.positions = 2;
    mc.metric = MetricKind::Instance;
    mc.global_classes = 10;
    Rng rng(5);
    const auto model = Model::create(mc, rng);
    SyntheticSpec spec;
    spec.input_dim = 6;
    spec.pool_classes = 10;
    TrainConfig train;
    train.shape = {3, 1, 2, 0, 0};
    auto cfg = quick;
    cfg.max_entries_per_tensor = 8;
    const auto res = gradcheck(model, EpisodeSource(spec), train, cfg);
    CHECK(res.passed);
    for (const auto& g : res.groups) CHECK(g.entries <= 2 * 8);
  }
}
