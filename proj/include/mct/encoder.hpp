#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mct/random.hpp"
#include "mct/tape.hpp"
#include "mct/tensor.hpp"

namespace mct {

struct EncoderConfig {
  std::size_t input_dim = 16;
  std::size_t hidden = 64;
  std::size_t blocks = 2;
  std::size_t positions = 4;  // hidden must split evenly into positions x channels
  double dropout = 0.1;
};

struct ResidualBlock {
  Tensor w1, b1, w2, b2;
};

// Residual MLP f_theta:
//   h0 = relu(x W + b)
//   h  = relu(h + relu(drop(h) W1 + b1) W2 + b2)   for each block
// The final hidden vector is the embedding, read as positions x channels and
// never pooled.
struct EncoderParams {
  Tensor in_w, in_b;
  std::vector<ResidualBlock> blocks;
  std::size_t positions = 4;
  double dropout = 0.1;

  static EncoderParams init(const EncoderConfig& config, Rng& rng);

  std::size_t input_dim() const { return in_w.rows(); }
  std::size_t width() const { return in_w.cols(); }
  std::size_t channels() const { return width() / positions; }
  void validate() const;
};

// One of the four perturbation sources: full, drop, aug, aug+drop.
struct ViewSpec {
  bool drop_last_block = false;
  bool augment = false;

  friend bool operator==(const ViewSpec&, const ViewSpec&) = default;
};

inline constexpr ViewSpec kFullView{false, false};
std::array<ViewSpec, 4> all_views();
std::string view_name(ViewSpec view);

enum class Mode { Train, Eval };

// Encoder parameters placed on a tape. An identity encoder passes inputs
// through unchanged as a single position (used for precomputed embeddings).
struct BoundEncoder {
  bool identity = false;
  Var in_w, in_b;
  std::vector<std::array<Var, 4>> blocks;
  std::size_t positions = 1;
  double dropout = 0.0;
};

BoundEncoder bind_identity();
BoundEncoder bind(Tape& tape, const EncoderParams& params, bool trainable);

// Embeds every row of `inputs`. Augmentation reverses coordinates before the
// first layer; drop_last_block skips the final block's branch. Train mode
// applies inverted dropout drawn from `rng`, which must then be non-null.
Var encode(const BoundEncoder& enc, Var inputs, ViewSpec view, Mode mode, Rng* rng);

// Tape-free convenience wrappers.
Tensor encode(const EncoderParams& params, const Tensor& inputs, ViewSpec view, Mode mode, Rng* rng);
std::vector<double> encode(const EncoderParams& params, std::span<const double> input, ViewSpec view, Mode mode,
                           Rng* rng);

// ---- input perturbations ------------------------------------------------------

enum class Strength { Weak, Strong };

struct PerturbConfig {
  double flip_prob = 0.5;
  double sigma_weak = 0.1;
  double sigma_strong = 0.5;
  double mask_fraction = 0.25;  // strong only
};

// weak:   reverse with probability flip_prob, add N(0, sigma_weak^2) noise
// strong: reverse with probability flip_prob, add N(0, sigma_strong^2) noise,
//         then zero round(mask_fraction * dim) random coordinates
std::vector<double> perturb_input(std::span<const double> input, Strength strength, Rng& rng,
                                  const PerturbConfig& config = {});
Tensor perturb_rows(const Tensor& inputs, Strength strength, Rng& rng, const PerturbConfig& config = {});

// ---- MCTP checkpoints ----------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor value;
};
using ParamList = std::vector<NamedTensor>;

void append_params(const EncoderParams& params, ParamList& out);
EncoderParams encoder_from_params(const ParamList& list);

// "MCTP" | u32 version=1 | u32 n | n x (u32 name_len, name, u32 rank,
// rank x u32 extent, f64 data)
std::vector<std::uint8_t> encode_checkpoint(const ParamList& list);
ParamList decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamList& list);
ParamList load_checkpoint(const std::filesystem::path& path);

// Lookup by name; throws FormatError when absent.
const Tensor& find_param(const ParamList& list, const std::string& name);
bool has_param(const ParamList& list, const std::string& name);

}  // namespace mct
