#include "mct/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mct/binary_io.hpp"
#include "mct/errors.hpp"

namespace mct {

namespace {

Tensor normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> data(rows * cols);
  for (auto& x : data) x = normal(rng);
  return Tensor::matrix(rows, cols, std::move(data));
}

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& config, Rng& rng) {
  if (config.input_dim == 0 || config.hidden == 0) throw ContractError("encoder: dimensions must be positive");
  if (config.blocks == 0) throw ContractError("encoder: at least one residual block is required");
  if (config.positions == 0 || config.hidden % config.positions != 0)
    throw ContractError("encoder: hidden width must split evenly into positions");
  EncoderParams p;
  const auto h = config.hidden;
  p.in_w = normal_matrix(config.input_dim, h, std::sqrt(2.0 / static_cast<double>(config.input_dim)), rng);
  p.in_b = Tensor::zeros({1, h});
  for (std::size_t b = 0; b < config.blocks; ++b) {
    ResidualBlock blk;
    blk.w1 = normal_matrix(h, h, std::sqrt(2.0 / static_cast<double>(h)), rng);
    blk.b1 = Tensor::zeros({1, h});
    blk.w2 = normal_matrix(h, h, std::sqrt(1.0 / static_cast<double>(h)), rng);
    blk.b2 = Tensor::zeros({1, h});
    p.blocks.push_back(std::move(blk));
  }
  p.positions = config.positions;
  p.dropout = config.dropout;
  p.validate();
  return p;
}

void EncoderParams::validate() const {
  const auto h = in_w.cols();
  if (in_w.rank() != 2 || in_b.rows() != 1 || in_b.cols() != h) throw ContractError("encoder: bad input layer shape");
  if (blocks.empty()) throw ContractError("encoder: at least one residual block is required");
  for (const auto& b : blocks) {
    if (b.w1.rows() != h || b.w1.cols() != h || b.w2.rows() != h || b.w2.cols() != h || b.b1.cols() != h ||
        b.b2.cols() != h || b.b1.rows() != 1 || b.b2.rows() != 1)
      throw ContractError("encoder: bad residual block shape");
  }
  if (positions == 0 || h % positions != 0) throw ContractError("encoder: width does not split into positions");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("encoder: dropout must lie in [0, 1)");
}

std::array<ViewSpec, 4> all_views() {
  return {ViewSpec{false, false}, ViewSpec{true, false}, ViewSpec{false, true}, ViewSpec{true, true}};
}

std::string view_name(ViewSpec view) {
  if (view.augment) return view.drop_last_block ? "aug+drop" : "aug";
  return view.drop_last_block ? "drop" : "full";
}

BoundEncoder bind_identity() {
  BoundEncoder enc;
  enc.identity = true;
  return enc;
}

BoundEncoder bind(Tape& tape, const EncoderParams& params, bool trainable) {
  params.validate();
  auto leaf = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
  BoundEncoder enc;
  enc.in_w = leaf(params.in_w);
  enc.in_b = leaf(params.in_b);
  for (const auto& b : params.blocks) enc.blocks.push_back({leaf(b.w1), leaf(b.b1), leaf(b.w2), leaf(b.b2)});
  enc.positions = params.positions;
  enc.dropout = params.dropout;
  return enc;
}

namespace {

Var dropout(Var h, double rate, Mode mode, Rng* rng) {
  if (mode == Mode::Eval || rate == 0.0) return h;
  if (!rng) throw ContractError("encode: train mode needs an rng for dropout");
  std::bernoulli_distribution keep(1.0 - rate);
  const double kept = 1.0 / (1.0 - rate);
  std::vector<double> mask(h.value().size());
  for (auto& m : mask) m = keep(*rng) ? kept : 0.0;
  return mul(h, h.tape().constant(Tensor(h.value().shape(), std::move(mask))));
}

}  // namespace

Var encode(const BoundEncoder& enc, Var inputs, ViewSpec view, Mode mode, Rng* rng) {
  Var x = view.augment ? reverse_cols(inputs) : inputs;
  if (enc.identity) return x;
  if (inputs.cols() != enc.in_w.rows()) throw ContractError("encode: input dimension does not match encoder");
  Var h = relu(add(matmul(x, enc.in_w), enc.in_b));
  const auto n = enc.blocks.size();
  for (std::size_t b = 0; b < n; ++b) {
    if (view.drop_last_block && b + 1 == n) break;
    const auto& [w1, b1, w2, b2] = enc.blocks[b];
    Var branch = relu(add(matmul(dropout(h, enc.dropout, mode, rng), w1), b1));
    branch = add(matmul(dropout(branch, enc.dropout, mode, rng), w2), b2);
    h = relu(add(h, branch));
  }
  return h;
}

Tensor encode(const EncoderParams& params, const Tensor& inputs, ViewSpec view, Mode mode, Rng* rng) {
  Tape tape;
  auto enc = bind(tape, params, false);
  return encode(enc, tape.constant(inputs), view, mode, rng).value();
}

std::vector<double> encode(const EncoderParams& params, std::span<const double> input, ViewSpec view, Mode mode,
                           Rng* rng) {
  auto out = encode(params, Tensor::row({input.begin(), input.end()}), view, mode, rng);
  return {out.data().begin(), out.data().end()};
}

// ---- perturbations ---------------------------------------------------------------

std::vector<double> perturb_input(std::span<const double> input, Strength strength, Rng& rng,
                                  const PerturbConfig& config) {
  for (double x : input) {
    if (!std::isfinite(x)) throw DomainError("perturb_input: non-finite input");
  }
  std::vector<double> out(input.begin(), input.end());
  std::bernoulli_distribution flip(config.flip_prob);
  if (flip(rng)) std::reverse(out.begin(), out.end());

  const double sigma = strength == Strength::Weak ? config.sigma_weak : config.sigma_strong;
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& x : out) x += noise(rng);
  }
  if (strength == Strength::Strong && config.mask_fraction > 0.0) {
    const auto k = static_cast<std::size_t>(std::lround(config.mask_fraction * static_cast<double>(out.size())));
    std::vector<std::size_t> idx(out.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < std::min(k, idx.size()); ++i) out[idx[i]] = 0.0;
  }
  return out;
}

Tensor perturb_rows(const Tensor& inputs, Strength strength, Rng& rng, const PerturbConfig& config) {
  std::vector<double> data;
  data.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    auto row = perturb_input(inputs.row_span(i), strength, rng, config);
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor::matrix(inputs.rows(), inputs.cols(), std::move(data));
}

// ---- checkpoints -------------------------------------------------------------------

void append_params(const EncoderParams& params, ParamList& out) {
  out.push_back({"encoder.in.w", params.in_w});
  out.push_back({"encoder.in.b", params.in_b});
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const auto prefix = "encoder.block" + std::to_string(b) + ".";
    out.push_back({prefix + "w1", params.blocks[b].w1});
    out.push_back({prefix + "b1", params.blocks[b].b1});
    out.push_back({prefix + "w2", params.blocks[b].w2});
    out.push_back({prefix + "b2", params.blocks[b].b2});
  }
  out.push_back({"encoder.positions", Tensor::scalar(static_cast<double>(params.positions))});
  out.push_back({"encoder.dropout", Tensor::scalar(params.dropout)});
}

EncoderParams encoder_from_params(const ParamList& list) {
  EncoderParams p;
  p.in_w = find_param(list, "encoder.in.w");
  p.in_b = find_param(list, "encoder.in.b");
  for (std::size_t b = 0;; ++b) {
    const auto prefix = "encoder.block" + std::to_string(b) + ".";
    if (!has_param(list, prefix + "w1")) break;
    p.blocks.push_back({find_param(list, prefix + "w1"), find_param(list, prefix + "b1"),
                        find_param(list, prefix + "w2"), find_param(list, prefix + "b2")});
  }
  p.positions = static_cast<std::size_t>(find_param(list, "encoder.positions").item());
  p.dropout = find_param(list, "encoder.dropout").item();
  try {
    p.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("inconsistent encoder checkpoint: ") + e.what(), 0);
  }
  return p;
}

std::vector<std::uint8_t> encode_checkpoint(const ParamList& list) {
  ByteWriter w;
  w.bytes("MCTP");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(list.size()));
  for (const auto& [name, value] : list) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(value.rank()));
    for (auto e : value.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : value.data()) w.f64(v);
  }
  return w.take();
}

ParamList decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.bytes(4, "magic") != "MCTP") throw FormatError("bad magic, expected MCTP", 0);
  const auto version_at = r.offset();
  if (r.u32("version") != 1) throw FormatError("unsupported MCTP version", version_at);
  const auto n = r.u32("tensor count");
  ParamList list;
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto name_len = r.u32("name length");
    auto name = r.bytes(name_len, "name");
    const auto rank_at = r.offset();
    const auto rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw FormatError("unsupported tensor rank", rank_at);
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto at = r.offset();
      const auto e = r.u32("extent");
      if (e == 0) throw FormatError("zero tensor extent", at);
      shape.push_back(e);
      count *= e;
    }
    if (r.remaining() / 8 < count) throw FormatError("truncated tensor data for " + name, r.offset());
    std::vector<double> data(count);
    for (auto& v : data) {
      const auto at = r.offset();
      v = r.f64("tensor value");
      if (!std::isfinite(v)) throw FormatError("non-finite value in " + name, at);
    }
    list.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  r.expect_end();
  return list;
}

void save_checkpoint(const std::filesystem::path& path, const ParamList& list) {
  write_file(path, encode_checkpoint(list));
}

ParamList load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

const Tensor& find_param(const ParamList& list, const std::string& name) {
  for (const auto& p : list) {
    if (p.name == name) return p.value;
  }
  throw FormatError("checkpoint is missing tensor '" + name + "'", 0);
}

bool has_param(const ParamList& list, const std::string& name) {
  return std::any_of(list.begin(), list.end(), [&](const NamedTensor& p) { return p.name == name; });
}

}  // namespace mct
