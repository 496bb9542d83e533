#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "mct/encoder.hpp"
#include "mct/errors.hpp"
#include "test_util.hpp"

using namespace mct;
using mct::testing::random_tensor;

namespace {

EncoderParams small_encoder(std::uint64_t seed, std::size_t input_dim = 6) {
  Rng rng(seed);
  EncoderConfig cfg;
  cfg.input_dim = input_dim;
  cfg.hidden = 12;
  cfg.blocks = 2;
  cfg.positions = 3;
  return EncoderParams::init(cfg, rng);
}

Tensor reversed_cols(const Tensor& t) {
  std::vector<double> v;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = t.row_span(r);
    v.insert(v.end(), row.rbegin(), row.rend());
  }
  return Tensor::matrix(t.rows(), t.cols(), std::move(v));
}

}  // namespace

TEST_CASE("default encoder shape") {
  Rng rng(0);
  const auto p = EncoderParams::init(EncoderConfig{}, rng);
  CHECK(p.input_dim() == 16);
  CHECK(p.width() == 64);
  CHECK(p.positions == 4);
  CHECK(p.channels() == 16);
  CHECK(p.blocks.size() == 2);
  CHECK(p.dropout == 0.1);
  CHECK(encode(p, Tensor::zeros({3, 16}), kFullView, Mode::Eval, nullptr).cols() == 64);
}

TEST_CASE("the four views are distinct and enumerate every combination") {
  const auto views = all_views();
  CHECK(views[0] == kFullView);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) CHECK_FALSE(views[i] == views[j]);
  CHECK(view_name(views[1]) != view_name(views[2]));
}

TEST_CASE("zeroing the last block's branch makes full and drop paths identical") {
  auto p = small_encoder(1);
  auto& last = p.blocks.back();
  last.w1 = Tensor::zeros(last.w1.shape());
  last.b1 = Tensor::zeros(last.b1.shape());
  last.w2 = Tensor::zeros(last.w2.shape());
  last.b2 = Tensor::zeros(last.b2.shape());
  std::mt19937_64 rng(2);
  const auto x = random_tensor(10, 6, rng);
  const auto full = encode(p, x, {false, false}, Mode::Eval, nullptr);
  const auto drop = encode(p, x, {true, false}, Mode::Eval, nullptr);
  CHECK(full == drop);
  CHECK(encode(p, x, {false, true}, Mode::Eval, nullptr) == encode(p, x, {true, true}, Mode::Eval, nullptr));

  // With a live branch the two paths differ.
  const auto q = small_encoder(1);
  CHECK_FALSE(encode(q, x, {false, false}, Mode::Eval, nullptr) == encode(q, x, {true, false}, Mode::Eval, nullptr));
}

TEST_CASE("eval mode is deterministic") {
  const auto p = small_encoder(3);
  std::mt19937_64 rng(4);
  const auto x = random_tensor(5, 6, rng);
  for (const auto view : all_views()) CHECK(encode(p, x, view, Mode::Eval, nullptr) == encode(p, x, view, Mode::Eval, nullptr));
}

TEST_CASE("augmented view equals encoding the reversed input") {
  const auto p = small_encoder(5);
  std::mt19937_64 rng(6);
  const auto x = random_tensor(7, 6, rng);
  CHECK(encode(p, x, {false, true}, Mode::Eval, nullptr) == encode(p, reversed_cols(x), {false, false}, Mode::Eval, nullptr));
  CHECK(encode(p, x, {true, true}, Mode::Eval, nullptr) == encode(p, reversed_cols(x), {true, false}, Mode::Eval, nullptr));
  CHECK(reversed_cols(reversed_cols(x)) == x);

  const auto single = encode(p, x.row_span(2), {false, true}, Mode::Eval, nullptr);
  const auto batch = encode(p, x, {false, true}, Mode::Eval, nullptr);
  for (std::size_t c = 0; c < batch.cols(); ++c) CHECK(single[c] == batch.at(2, c));
}

TEST_CASE("train-mode dropout draws only from the supplied rng") {
  const auto p = small_encoder(7);
  std::mt19937_64 data(8);
  const auto x = random_tensor(6, 6, data);
  Rng a(11), b(11), c(12);
  const auto ya = encode(p, x, kFullView, Mode::Train, &a);
  const auto yb = encode(p, x, kFullView, Mode::Train, &b);
  const auto yc = encode(p, x, kFullView, Mode::Train, &c);
  CHECK(ya == yb);
  CHECK_FALSE(ya == yc);
  CHECK_FALSE(ya == encode(p, x, kFullView, Mode::Eval, nullptr));
  CHECK_THROWS_AS(encode(p, x, kFullView, Mode::Train, nullptr), ContractError);

  auto no_drop = p;
  no_drop.dropout = 0.0;
  Rng d(13);
  CHECK(encode(no_drop, x, kFullView, Mode::Train, &d) == encode(no_drop, x, kFullView, Mode::Eval, nullptr));
}

TEST_CASE("encoder contract errors") {
  const auto p = small_encoder(9);
  CHECK_THROWS_AS(encode(p, Tensor::zeros({2, 5}), kFullView, Mode::Eval, nullptr), ContractError);
  Rng rng(0);
  EncoderConfig no_blocks;
  no_blocks.blocks = 0;
  CHECK_THROWS_AS(EncoderParams::init(no_blocks, rng), ContractError);
  EncoderConfig uneven;
  uneven.hidden = 10;
  uneven.positions = 4;
  CHECK_THROWS_AS(EncoderParams::init(uneven, rng), ContractError);
}

TEST_CASE("perturbation with every strength parameter at zero is the identity") {
  const PerturbConfig off{0.0, 0.0, 0.0, 0.0};
  const std::vector<double> x{1.5, -2.0, 3.25, 0.5, 7.0};
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    CHECK(perturb_input(x, Strength::Weak, rng, off) == x);
    CHECK(perturb_input(x, Strength::Strong, rng, off) == x);
  }
}

TEST_CASE("full masking yields the zero vector") {
  PerturbConfig cfg;
  cfg.mask_fraction = 1.0;
  Rng rng(2);
  const std::vector<double> x{1.0, 2.0, 3.0, 4.0};
  for (int i = 0; i < 20; ++i) {
    for (double v : perturb_input(x, Strength::Strong, rng, cfg)) CHECK(v == 0.0);
  }
}

TEST_CASE("flip alone is a coordinate reversal with probability one half") {
  const PerturbConfig flip_only{0.5, 0.0, 0.0, 0.0};
  const std::vector<double> x{1.0, 2.0, 3.0, 4.0};
  const std::vector<double> r{4.0, 3.0, 2.0, 1.0};
  Rng rng(3);
  int flipped = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto y = perturb_input(x, Strength::Weak, rng, flip_only);
    REQUIRE((y == x || y == r));
    flipped += y == r;
  }
  // 5 sigma of a Binomial(10000, 0.5).
  CHECK(std::abs(flipped - n / 2) < 250);
}

TEST_CASE("default perturbation variances") {
  // Independent oracle on a zero input of width 16:
  //   weak   per-coordinate variance sigma_weak^2 = 0.01
  //   strong 4 of 16 coordinates zeroed, the rest carry sigma_strong^2 = 0.25,
  //          so the pooled variance is 0.75 * 0.25 = 0.1875
  const std::vector<double> zero(16, 0.0);
  Rng rng(4);
  const int n = 10000;
  double weak = 0.0, strong = 0.0;
  for (int i = 0; i < n; ++i) {
    for (double v : perturb_input(zero, Strength::Weak, rng)) weak += v * v;
    const auto s = perturb_input(zero, Strength::Strong, rng);
    CHECK(std::count(s.begin(), s.end(), 0.0) == 4);
    for (double v : s) strong += v * v;
  }
  weak /= n * 16.0;
  strong /= n * 16.0;
  CHECK(std::abs(weak - 0.01) < 0.0005);
  CHECK(std::abs(strong - 0.1875) < 0.005);

  const std::vector<double> x{1.0, 2.0, 3.0};
  CHECK(perturb_input(x, Strength::Weak, rng) != x);
}

TEST_CASE("MCTP round trip is bit exact") {
  const auto p = small_encoder(21);
  ParamList list;
  append_params(p, list);
  list.push_back({"extra.rank3", Tensor({2, 1, 3}, {1e-300, -0.0, 3.5, 1e300, 2.0, -7.25})});
  const auto path = std::filesystem::temp_directory_path() / "mct_test_roundtrip.mctp";
  save_checkpoint(path, list);
  const auto back = load_checkpoint(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == list.size());
  for (std::size_t i = 0; i < list.size(); ++i) {
    CHECK(back[i].name == list[i].name);
    CHECK(back[i].value.shape() == list[i].value.shape());
    CHECK(std::memcmp(back[i].value.data().data(), list[i].value.data().data(), list[i].value.size() * 8) == 0);
  }
  const auto q = encoder_from_params(back);
  std::mt19937_64 rng(1);
  const auto x = random_tensor(3, 6, rng);
  CHECK(encode(q, x, kFullView, Mode::Eval, nullptr) == encode(p, x, kFullView, Mode::Eval, nullptr));
  CHECK(q.dropout == p.dropout);
  CHECK(q.positions == p.positions);
}

TEST_CASE("MCTP decoding rejects malformed files") {
  ParamList list{{"a", Tensor::matrix({{1, 2}})}};
  const auto good = encode_checkpoint(list);
  CHECK(good.size() == 4 + 4 + 4 + 4 + 1 + 4 + 8 + 16);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);

  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);

  auto trailing = good;
  trailing.push_back(1);
  CHECK_THROWS_AS(decode_checkpoint(trailing), FormatError);

  auto rank0 = good;
  rank0[17] = 0;  // rank field follows magic, version, count, name_len, name
  CHECK_THROWS_AS(decode_checkpoint(rank0), FormatError);

  CHECK_THROWS_AS(find_param(list, "missing"), FormatError);
  CHECK(has_param(list, "a"));
  CHECK_THROWS_AS(encoder_from_params(list), FormatError);
}
