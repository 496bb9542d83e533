#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "mct/errors.hpp"
#include "mct/metatrain.hpp"
#include "test_util.hpp"

using namespace mct;
using mct::testing::max_fd_error;
using mct::testing::random_tensor;

namespace {

ViewEmbeddings constant_view(Tape& tape, const Tensor& support, const Tensor& query) {
  return {tape.constant(support), tape.constant(query), Var{}};
}

// -log softmax(-d)_y over rows, computed directly from the definition.
double oracle_nll(const Tensor& query, const std::vector<std::vector<double>>& protos, std::span<const int> labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < query.rows(); ++i) {
    std::vector<double> d;
    for (const auto& p : protos) {
      double s = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) s += (query.at(i, k) - p[k]) * (query.at(i, k) - p[k]);
      d.push_back(s);
    }
    double z = 0.0;
    for (double x : d) z += std::exp(-x);
    total += -std::log(std::exp(-d[labels[i]]) / z);
  }
  return total / static_cast<double>(query.rows());
}

SyntheticSpec pooled_spec() {
  SyntheticSpec spec;
  spec.pool_classes = 64;
  spec.pool_seed = 1;
  return spec;
}

Model make_model(MetricKind kind, std::uint64_t seed, std::size_t global_classes = 64) {
  ModelConfig mc;
  mc.metric = kind;
  mc.global_classes = global_classes;
  Rng rng(seed);
  return Model::create(mc, rng);
}

bool bitwise_equal(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || !a[i].value.same_shape(b[i].value)) return false;
    if (std::memcmp(a[i].value.data().data(), b[i].value.data().data(), a[i].value.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

const Tensor& gradient(const LossEvaluation& eval, const std::string& name) { return find_param(eval.gradients, name); }

}  // namespace

TEST_CASE("learning-rate schedule breakpoints") {
  const auto full = LrSchedule::full_scale();
  CHECK(lr_at(0, full) == 0.1);
  CHECK(lr_at(24999, full) == 0.1);
  CHECK(lr_at(25000, full) == 0.006);
  CHECK(lr_at(34999, full) == 0.006);
  CHECK(lr_at(35000, full) == 0.0012);
  CHECK(lr_at(100000, full) == 0.0012);

  const auto desk = LrSchedule::desk_scale();
  CHECK(lr_at(499, desk) == 0.1);
  CHECK(lr_at(500, desk) == 0.006);
  CHECK(lr_at(699, desk) == 0.006);
  CHECK(lr_at(700, desk) == 0.0012);

  auto broken = full;
  broken.step_divisor = 0.0;
  CHECK_THROWS_AS(lr_at(0, broken), ContractError);
}

TEST_CASE("train config defaults and validation") {
  const TrainConfig c;
  CHECK(c.lambda == 0.5);
  CHECK(c.momentum == 0.9);
  CHECK(c.transduction_steps == 1);
  CHECK(c.all_views);
  CHECK_FALSE(c.detach_confidence);
  CHECK_NOTHROW(c.validate());

  auto bad = c;
  bad.lambda = -1.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = c;
  bad.transduction_steps = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = c;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = c;
  bad.shape.ways = 1;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("instance loss with equidistant prototypes is ln C") {
  // Supports at the unit vectors, one query at the origin: every distance is
  // 1 before transduction and 0.75^2 after one uniform-confidence step.
  const auto support = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const auto query = Tensor::matrix({{0, 0, 0}});
  const int sl[] = {0, 1, 2};
  const int ql[] = {1};
  for (std::size_t steps : {0u, 1u, 3u}) {
    Tape tape;
    const auto v = constant_view(tape, support, query);
    const auto m = bind(tape, MetricSpec::euclid(), false);
    CHECK(std::abs(instance_loss(m, v, v, sl, ql, 3, steps).value().item() - std::log(3.0)) < 1e-12);
  }
}

TEST_CASE("instance loss vanishes with perfect confidence") {
  const auto support = Tensor::matrix({{100, 0}, {0, 100}, {-100, 0}});
  const auto query = Tensor::matrix({{0, 100}, {-100, 0}});
  const int sl[] = {0, 1, 2};
  const int ql[] = {1, 2};
  Tape tape;
  const auto v = constant_view(tape, support, query);
  const auto m = bind(tape, MetricSpec::euclid(), false);
  CHECK(std::abs(instance_loss(m, v, v, sl, ql, 3, 0).value().item()) < 1e-12);
}

TEST_CASE("inductive instance loss matches a direct softmax cross-entropy") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto support = random_tensor(8, 5, rng);
    const auto query = random_tensor(6, 5, rng);
    const int sl[] = {0, 1, 2, 3, 0, 1, 2, 3};
    const int ql[] = {3, 2, 1, 0, 0, 1};
    std::vector<std::vector<double>> protos(4, std::vector<double>(5, 0.0));
    for (int i = 0; i < 8; ++i)
      for (int k = 0; k < 5; ++k) protos[sl[i]][k] += support.at(i, k) / 2.0;
    Tape tape;
    const auto v = constant_view(tape, support, query);
    const auto m = bind(tape, MetricSpec::euclid(), false);
    REQUIRE(std::abs(instance_loss(m, v, v, sl, ql, 4, 0).value().item() - oracle_nll(query, protos, ql)) < 1e-10);
  }
}

TEST_CASE("instance loss is differentiable in embeddings and scaler parameters") {
  std::mt19937_64 rng(4);
  Rng init(5);
  const auto spec = MetricSpec::instance(4, init);
  const int sl[] = {0, 1, 2};
  const int ql[] = {2, 0};
  std::vector<Tensor> inputs{random_tensor(3, 4, rng), random_tensor(2, 4, rng), random_tensor(3, 4, rng),
                             random_tensor(2, 4, rng),  spec.scaler->w1,         random_tensor(1, spec.scaler->b1.cols(), rng, 0.3),
                             spec.scaler->w2,           random_tensor(1, 1, rng, 0.3), random_tensor(1, 1, rng, 0.3),
                             random_tensor(1, 1, rng, 0.3)};
  auto fn = [&](Tape&, std::span<const Var> v) {
    BoundMetric m;
    m.kind = MetricKind::Instance;
    m.w1 = v[4];
    m.b1 = v[5];
    m.w2 = v[6];
    m.b2 = v[7];
    m.alpha = v[8];
    m.beta = v[9];
    const ViewEmbeddings full{v[0], v[1], Var{}}, selected{v[2], v[3], Var{}};
    return instance_loss(m, selected, full, sl, ql, 3, 2);
  };
  CHECK(max_fd_error(fn, inputs) < 1e-4);
}

TEST_CASE("dimension loss closed forms") {
  std::mt19937_64 rng(6);
  const auto emb = random_tensor(4, 6, rng);
  const std::vector<int> labels{0, 2, 1, 2};

  SUBCASE("zero classifier gives ln K") {
    Tape tape;
    const Var d = dimension_loss(tape.constant(emb), 3, labels, tape.constant(Tensor::zeros({2, 5})));
    CHECK(std::abs(d.value().item() - std::log(5.0)) < 1e-12);
  }

  SUBCASE("one position is plain cross-entropy") {
    const auto w = random_tensor(6, 3, rng);
    double expected = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> logits(3, 0.0);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t k = 0; k < 6; ++k) logits[c] += emb.at(i, k) * w.at(k, c);
      double z = 0.0;
      for (double l : logits) z += std::exp(l);
      expected += std::log(z) - logits[labels[i]];
    }
    Tape tape;
    const Var d = dimension_loss(tape.constant(emb), 1, labels, tape.constant(w));
    CHECK(std::abs(d.value().item() - expected / 4.0) < 1e-12);
  }

  SUBCASE("replicated positions average to the single-position loss") {
    const auto w = random_tensor(3, 4, rng);
    const auto one = random_tensor(4, 3, rng);
    std::vector<double> rep;
    for (std::size_t i = 0; i < 4; ++i)
      for (int p = 0; p < 2; ++p)
        for (std::size_t k = 0; k < 3; ++k) rep.push_back(one.at(i, k));
    Tape tape;
    const double a = dimension_loss(tape.constant(one), 1, labels, tape.constant(w)).value().item();
    const double b =
        dimension_loss(tape.constant(Tensor::matrix(4, 6, rep)), 2, labels, tape.constant(w)).value().item();
    CHECK(std::abs(a - b) < 1e-12);
  }

  SUBCASE("item order does not matter") {
    const auto w = random_tensor(2, 3, rng);
    std::vector<double> swapped;
    for (std::size_t i : {2u, 0u, 3u, 1u})
      for (std::size_t k = 0; k < 6; ++k) swapped.push_back(emb.at(i, k));
    const std::vector<int> swapped_labels{labels[2], labels[0], labels[3], labels[1]};
    Tape tape;
    const double a = dimension_loss(tape.constant(emb), 3, labels, tape.constant(w)).value().item();
    const double b =
        dimension_loss(tape.constant(Tensor::matrix(4, 6, swapped)), 3, swapped_labels, tape.constant(w)).value().item();
    CHECK(std::abs(a - b) < 1e-12);
  }

  SUBCASE("contract errors") {
    Tape tape;
    const Var w = tape.constant(Tensor::zeros({2, 3}));
    CHECK_THROWS_AS(dimension_loss(tape.constant(emb), 3, {}, w), ContractError);
    CHECK_THROWS_AS(dimension_loss(tape.constant(emb), 4, labels, w), ContractError);
    CHECK_THROWS_AS(dimension_loss(tape.constant(emb), 2, labels, w), ContractError);
  }
}

TEST_CASE("dimension-wise loss requires global labels") {
  SyntheticSpec fresh;  // no pool, so no global labels
  const auto ep = EpisodeSource(fresh).sample(TrainConfig{}.shape, 1);
  const auto model = make_model(MetricKind::Instance, 2, 10);
  Rng rng(3);
  CHECK_THROWS_AS(evaluate_loss(model, ep, TrainConfig{}, rng), ContractError);

  auto off = TrainConfig{};
  off.dimension_loss = false;
  Rng rng2(3);
  CHECK(evaluate_loss(model, ep, off, rng2).report.dimension == 0.0);
}

TEST_CASE("lambda zero leaves the scaler without gradient") {
  const auto ep = EpisodeSource(pooled_spec()).sample(TrainConfig{}.shape, 7);
  auto model = make_model(MetricKind::Instance, 8);
  TrainConfig c;
  c.lambda = 0.0;
  Rng rng(9);
  const auto eval = evaluate_loss(model, ep, c, rng);
  for (const auto* name : {"scaler.w1", "scaler.b1", "scaler.w2", "scaler.b2", "scaler.alpha", "scaler.beta"})
    for (double g : gradient(eval, name).data()) REQUIRE(g == 0.0);
  CHECK(eval.report.total == eval.report.dimension);

  c.lambda = 0.5;
  Rng rng2(9);
  const auto live = evaluate_loss(model, ep, c, rng2);
  double mass = 0.0;
  for (double g : gradient(live, "scaler.alpha").data()) mass += std::abs(g);
  CHECK(mass > 0.0);
  CHECK(live.report.total == doctest::Approx(0.5 * live.report.instance + live.report.dimension).epsilon(1e-14));
}

TEST_CASE("detaching confidences changes gradients but not the loss") {
  const auto ep = EpisodeSource(pooled_spec()).sample(TrainConfig{}.shape, 13);
  const auto model = make_model(MetricKind::Instance, 14);
  TrainConfig c;
  Rng r1(15);
  const auto live = evaluate_loss(model, ep, c, r1);
  c.detach_confidence = true;
  Rng r2(15);
  const auto detached = evaluate_loss(model, ep, c, r2);
  CHECK(detached.report.view == live.report.view);
  CHECK(detached.report.total == doctest::Approx(live.report.total).epsilon(1e-14));
  double diff = 0.0;
  for (const auto* name : {"scaler.alpha", "encoder.in.w"}) {
    const auto& a = gradient(live, name).data();
    const auto& b = gradient(detached, name).data();
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  CHECK(diff > 1e-8);
}

TEST_CASE("euclid model has no metric parameters to train") {
  const auto ep = EpisodeSource(pooled_spec()).sample(TrainConfig{}.shape, 10);
  const auto model = make_model(MetricKind::Euclid, 11);
  Rng rng(12);
  const auto eval = evaluate_loss(model, ep, TrainConfig{}, rng);
  for (const auto& g : eval.gradients) {
    CHECK_FALSE(g.name.starts_with("scaler."));
    CHECK(g.name != "metric.s");
  }
  CHECK(has_param(eval.gradients, "classifier.weight"));
}

TEST_CASE("nesterov update matches a hand-computed trajectory") {
  ParamList params{{"p", Tensor::row({1.0, -2.0})}};
  NesterovSgd opt;
  const std::vector<std::vector<double>> grads{{0.5, 0.1}, {-0.25, 0.3}, {1.0, -0.7}};
  const std::vector<std::vector<double>> expected{
      {0.9031, -2.0152}, {0.90757411, -2.07485112}, {0.6981892081909999, -1.966408590872}};
  for (std::size_t t = 0; t < grads.size(); ++t) {
    opt.step(params, {{"p", Tensor::row(grads[t])}}, 0.1, 0.9, 0.01);
    CHECK(std::abs(params[0].value[0] - expected[t][0]) < 1e-12);
    CHECK(std::abs(params[0].value[1] - expected[t][1]) < 1e-12);
  }
  CHECK_THROWS_AS(opt.step(params, {{"q", Tensor::row({1.0})}}, 0.1, 0.9, 0.0), ContractError);
  CHECK_THROWS_AS(opt.step(params, {{"p", Tensor::row({1.0})}}, 0.1, 0.9, 0.0), ContractError);
}

TEST_CASE("plain gradient step on the scaled metric") {
  // Identity encoder, no augmentation, full view only: the step is rng-free,
  // so s' = s - lr * dL/ds exactly.
  ModelConfig mc;
  mc.input_dim = 16;
  mc.identity_encoder = true;
  mc.metric = MetricKind::Scaled;
  Rng init(1);
  auto model = Model::create(mc, init);
  TrainConfig c;
  c.momentum = 0.0;
  c.weight_decay = 0.0;
  c.weak_strong = false;
  c.all_views = false;
  c.shape = {5, 1, 4, 0, 0};
  const auto ep = EpisodeSource(SyntheticSpec{}).sample(c.shape, 2);

  Rng r1(3);
  const double g = gradient(evaluate_loss(model, ep, c, r1), "metric.s").item();
  CHECK(g != 0.0);
  NesterovSgd opt;
  Rng r2(3);
  train_step(ep, model, opt, c, r2, 0);
  CHECK(model.metric.s == 7.5 - 0.1 * g);
}

TEST_CASE("training is bitwise reproducible") {
  EpisodeSource source(pooled_spec());
  TrainConfig c;
  c.seed = 21;
  auto a = make_model(MetricKind::Pair, 4);
  auto b = make_model(MetricKind::Pair, 4);
  const auto ha = train(a, source, c, 20);
  const auto hb = train(b, source, c, 20);
  CHECK(bitwise_equal(a.to_params(), b.to_params()));
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].total == hb[i].total);
    CHECK(ha[i].view == hb[i].view);
  }

  auto d = make_model(MetricKind::Pair, 4);
  c.seed = 22;
  train(d, source, c, 20);
  CHECK_FALSE(bitwise_equal(a.to_params(), d.to_params()));
}

TEST_CASE("training reduces the loss") {
  // Calibrated run: first-50 mean 5.48, last-50 mean 4.01.
  EpisodeSource source(pooled_spec());
  auto model = make_model(MetricKind::Instance, 0);
  TrainConfig c;
  c.seed = 5;
  const auto h = train(model, source, c, 500);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    first += h[i].total / 50.0;
    last += h[450 + i].total / 50.0;
  }
  CHECK(first - last > 1.0);
  for (const auto& r : h) REQUIRE(std::isfinite(r.total));
}

TEST_CASE("model parameters round trip and checkpoints are written") {
  for (auto kind : {MetricKind::Euclid, MetricKind::Scaled, MetricKind::Instance, MetricKind::Pair}) {
    const auto m = make_model(kind, 30);
    const auto back = Model::from_params(m.to_params());
    CHECK(bitwise_equal(back.to_params(), m.to_params()));
  }

  auto bad = make_model(MetricKind::Instance, 31).to_params();
  for (auto& p : bad)
    if (p.name == "model.input_dim") p.value = Tensor::scalar(5.0);
  CHECK_THROWS_AS(Model::from_params(bad), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "mct_test_train_ckpt.mctp";
  std::filesystem::remove(path);
  EpisodeSource source(pooled_spec());
  auto model = make_model(MetricKind::Instance, 32);
  TrainConfig c;
  c.checkpoint_every = 3;
  c.checkpoint_path = path;
  train(model, source, c, 2);
  CHECK_FALSE(std::filesystem::exists(path));
  train(model, source, c, 3);
  REQUIRE(std::filesystem::exists(path));
  const auto saved = Model::from_params(load_checkpoint(path));
  std::filesystem::remove(path);
  CHECK(bitwise_equal(saved.to_params(), model.to_params()));
}
