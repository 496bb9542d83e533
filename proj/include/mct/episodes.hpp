#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "mct/random.hpp"
#include "mct/tensor.hpp"

namespace mct {

struct EpisodeShape {
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries = 15;    // per class
  std::size_t unlabeled = 0;   // per class, semi-supervised mode
  std::size_t distractors = 0; // extra classes that only feed the unlabeled set
};

// One C-way N-shot task. Labels are 0-based class indices into the episode's
// ways; rows are grouped class-major (all of class 0, then class 1, ...).
struct Episode {
  std::size_t ways = 0;
  std::size_t shots = 0;
  Tensor support;
  std::vector<int> support_labels;
  std::optional<Tensor> query;
  std::vector<int> query_labels;
  std::optional<Tensor> unlabeled;
  // Ground truth for unlabeled rows (-1 for distractors); diagnostics only.
  std::vector<int> unlabeled_labels;
  // Dataset-level class ids for the dimension-wise loss; empty when unknown.
  std::vector<int> support_global;
  std::vector<int> query_global;

  std::size_t dim() const { return support.cols(); }
  std::size_t query_count() const { return query ? query->rows() : 0; }
};

// ---- synthetic tasks -------------------------------------------------------

struct SyntheticSpec {
  std::size_t input_dim = 16;
  double class_spread = 4.0;  // radius of the ball class means are drawn from
  double within_std = 1.0;
  // 0: class means drawn fresh per episode. Otherwise a fixed pool of latent
  // classes generated from pool_seed, which also provides global labels.
  std::size_t pool_classes = 0;
  std::uint64_t pool_seed = 0;

  void validate(const EpisodeShape& shape) const;
};

// Bayes-optimal classifier for an isotropic equal-prior Gaussian episode:
// nearest true class mean. Ties resolve to the lowest class index.
class BayesOracle {
 public:
  explicit BayesOracle(std::vector<std::vector<double>> means) : means_(std::move(means)) {}

  int predict(std::span<const double> x) const;
  double accuracy(const Tensor& inputs, std::span<const int> labels) const;
  double accuracy(const Episode& episode) const;
  const std::vector<std::vector<double>>& means() const { return means_; }

 private:
  std::vector<std::vector<double>> means_;
};

struct SyntheticEpisode {
  Episode episode;
  BayesOracle oracle;
};

std::vector<std::vector<double>> synthetic_pool_means(const SyntheticSpec& spec);

SyntheticEpisode gen_synthetic(const SyntheticSpec& spec, const EpisodeShape& shape, std::uint64_t seed);

// ---- precomputed embeddings ------------------------------------------------

struct EmbeddingTable {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<float> rows;  // count x dim, row-major
  std::vector<std::uint32_t> labels;
  std::map<std::uint32_t, std::vector<std::size_t>> class_index;

  // Validates and fills class_index.
  static EmbeddingTable build(std::size_t dim, std::vector<float> rows, std::vector<std::uint32_t> labels);
  std::span<const float> row(std::size_t i) const { return std::span<const float>(rows).subspan(i * dim, dim); }
};

Episode sample_episode(const EmbeddingTable& table, const EpisodeShape& shape, std::uint64_t seed);

// MCTE binary format, little-endian:
//   "MCTE" | u32 version=1 | u32 count | u32 dim | count*dim f32 | count u32 ids
std::vector<std::uint8_t> encode_embeddings(const EmbeddingTable& table);
EmbeddingTable decode_embeddings(std::span<const std::uint8_t> bytes);
void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable load_embeddings(const std::filesystem::path& path);

// Build a table by drawing `per_class` rows for each class of a pooled
// synthetic spec.
EmbeddingTable synthetic_table(const SyntheticSpec& spec, std::size_t per_class, std::uint64_t seed);

// Either a synthetic generator or a loaded embedding table.
class EpisodeSource {
 public:
  explicit EpisodeSource(SyntheticSpec spec) : source_(spec) {}
  explicit EpisodeSource(std::shared_ptr<const EmbeddingTable> table) : source_(std::move(table)) {}

  Episode sample(const EpisodeShape& shape, std::uint64_t seed) const;
  std::size_t input_dim() const;
  // Number of dataset-level classes, 0 when the source has none.
  std::size_t global_classes() const;
  bool is_synthetic() const { return std::holds_alternative<SyntheticSpec>(source_); }

 private:
  std::variant<SyntheticSpec, std::shared_ptr<const EmbeddingTable>> source_;
};

}  // namespace mct
