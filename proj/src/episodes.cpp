#include "mct/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mct/binary_io.hpp"
#include "mct/errors.hpp"

namespace mct {

// ---- synthetic ---------------------------------------------------------------

void SyntheticSpec::validate(const EpisodeShape& shape) const {
  if (input_dim == 0) throw ContractError("synthetic spec: input_dim must be positive");
  if (!(class_spread >= 0.0) || !std::isfinite(class_spread))
    throw ContractError("synthetic spec: class_spread must be finite and >= 0");
  if (!(within_std > 0.0) || !std::isfinite(within_std))
    throw ContractError("synthetic spec: within_std must be finite and > 0");
  if (shape.ways == 0 || shape.shots == 0) throw ContractError("episode shape: ways and shots must be positive");
  if (pool_classes != 0 && pool_classes < shape.ways + shape.distractors)
    throw ContractError("synthetic spec: pool_classes smaller than ways + distractors");
}

namespace {

std::vector<double> draw_in_ball(Rng& rng, std::size_t dim, double radius) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> v(dim);
  double norm2 = 0.0;
  for (auto& x : v) {
    x = normal(rng);
    norm2 += x * x;
  }
  const double r = radius * std::pow(unit(rng), 1.0 / static_cast<double>(dim)) / std::sqrt(norm2);
  for (auto& x : v) x *= r;
  return v;
}

void append_gaussian(Rng& rng, const std::vector<double>& mean, double stddev, std::vector<double>& out) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (double m : mean) out.push_back(m + normal(rng));
}

}  // namespace

std::vector<std::vector<double>> synthetic_pool_means(const SyntheticSpec& spec) {
  if (spec.pool_classes == 0) throw ContractError("synthetic_pool_means: spec has no class pool");
  Rng rng(spec.pool_seed);
  std::vector<std::vector<double>> means;
  means.reserve(spec.pool_classes);
  for (std::size_t k = 0; k < spec.pool_classes; ++k) means.push_back(draw_in_ball(rng, spec.input_dim, spec.class_spread));
  return means;
}

int BayesOracle::predict(std::span<const double> x) const {
  int best = 0;
  double best_d = 0.0;
  for (std::size_t c = 0; c < means_.size(); ++c) {
    if (means_[c].size() != x.size()) throw ContractError("bayes oracle: dimension mismatch");
    double d = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) d += (x[j] - means_[c][j]) * (x[j] - means_[c][j]);
    if (c == 0 || d < best_d) {
      best = static_cast<int>(c);
      best_d = d;
    }
  }
  return best;
}

double BayesOracle::accuracy(const Tensor& inputs, std::span<const int> labels) const {
  if (labels.size() != inputs.rows()) throw ContractError("bayes oracle: label count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predict(inputs.row_span(i)) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double BayesOracle::accuracy(const Episode& episode) const {
  if (!episode.query) throw ContractError("bayes oracle: episode has no queries");
  return accuracy(*episode.query, episode.query_labels);
}

SyntheticEpisode gen_synthetic(const SyntheticSpec& spec, const EpisodeShape& shape, std::uint64_t seed) {
  spec.validate(shape);
  Rng rng(seed);
  const auto total = shape.ways + shape.distractors;

  std::vector<std::vector<double>> means;
  std::vector<int> global;
  if (spec.pool_classes) {
    auto pool = synthetic_pool_means(spec);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t c = 0; c < total; ++c) {
      means.push_back(pool[order[c]]);
      global.push_back(static_cast<int>(order[c]));
    }
  } else {
    for (std::size_t c = 0; c < total; ++c) means.push_back(draw_in_ball(rng, spec.input_dim, spec.class_spread));
  }

  Episode ep;
  ep.ways = shape.ways;
  ep.shots = shape.shots;
  std::vector<double> buf;
  for (std::size_t c = 0; c < shape.ways; ++c)
    for (std::size_t i = 0; i < shape.shots; ++i) {
      append_gaussian(rng, means[c], spec.within_std, buf);
      ep.support_labels.push_back(static_cast<int>(c));
      if (!global.empty()) ep.support_global.push_back(global[c]);
    }
  ep.support = Tensor::matrix(ep.support_labels.size(), spec.input_dim, std::move(buf));

  if (shape.queries) {
    buf.clear();
    for (std::size_t c = 0; c < shape.ways; ++c)
      for (std::size_t i = 0; i < shape.queries; ++i) {
        append_gaussian(rng, means[c], spec.within_std, buf);
        ep.query_labels.push_back(static_cast<int>(c));
        if (!global.empty()) ep.query_global.push_back(global[c]);
      }
    ep.query = Tensor::matrix(ep.query_labels.size(), spec.input_dim, std::move(buf));
  }

  if (shape.unlabeled) {
    buf.clear();
    for (std::size_t c = 0; c < total; ++c)
      for (std::size_t i = 0; i < shape.unlabeled; ++i) {
        append_gaussian(rng, means[c], spec.within_std, buf);
        ep.unlabeled_labels.push_back(c < shape.ways ? static_cast<int>(c) : -1);
      }
    ep.unlabeled = Tensor::matrix(ep.unlabeled_labels.size(), spec.input_dim, std::move(buf));
  }

  means.resize(shape.ways);
  return SyntheticEpisode{std::move(ep), BayesOracle(std::move(means))};
}

// ---- embedding tables ----------------------------------------------------------

EmbeddingTable EmbeddingTable::build(std::size_t dim, std::vector<float> rows, std::vector<std::uint32_t> labels) {
  if (dim == 0) throw ContractError("embedding table: dim must be positive");
  if (labels.empty()) throw ContractError("embedding table: no rows");
  if (rows.size() != labels.size() * dim) throw ContractError("embedding table: row data does not match count x dim");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!std::isfinite(rows[i])) throw DomainError("embedding table: non-finite value at " + std::to_string(i));
  }
  EmbeddingTable t;
  t.count = labels.size();
  t.dim = dim;
  t.rows = std::move(rows);
  t.labels = std::move(labels);
  for (std::size_t i = 0; i < t.count; ++i) t.class_index[t.labels[i]].push_back(i);
  return t;
}

Episode sample_episode(const EmbeddingTable& table, const EpisodeShape& shape, std::uint64_t seed) {
  if (shape.ways == 0 || shape.shots == 0) throw ContractError("episode shape: ways and shots must be positive");
  const auto per_class = shape.shots + shape.queries + shape.unlabeled;
  std::vector<std::uint32_t> eligible;
  std::map<std::uint32_t, int> global_of;
  int g = 0;
  for (const auto& [id, rows] : table.class_index) {
    global_of[id] = g++;
    if (rows.size() >= per_class) eligible.push_back(id);
  }
  const auto total = shape.ways + shape.distractors;
  if (eligible.size() < total) {
    throw CapacityError("sample_episode: need " + std::to_string(total) + " classes with >= " +
                        std::to_string(per_class) + " rows, table has " + std::to_string(eligible.size()));
  }

  Rng rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(total);

  std::vector<std::vector<std::size_t>> picks;
  for (auto id : eligible) {
    auto rows = table.class_index.at(id);
    std::shuffle(rows.begin(), rows.end(), rng);
    picks.push_back(std::move(rows));
  }

  auto gather = [&](std::size_t classes, std::size_t offset, std::size_t n, std::vector<int>& labels,
                    std::vector<int>* globals) {
    std::vector<double> buf;
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = table.row(picks[c][offset + i]);
        buf.insert(buf.end(), r.begin(), r.end());
        labels.push_back(c < shape.ways ? static_cast<int>(c) : -1);
        if (globals) globals->push_back(global_of[eligible[c]]);
      }
    return Tensor::matrix(labels.size(), table.dim, std::move(buf));
  };

  Episode ep;
  ep.ways = shape.ways;
  ep.shots = shape.shots;
  ep.support = gather(shape.ways, 0, shape.shots, ep.support_labels, &ep.support_global);
  if (shape.queries) ep.query = gather(shape.ways, shape.shots, shape.queries, ep.query_labels, &ep.query_global);
  if (shape.unlabeled)
    ep.unlabeled = gather(total, shape.shots + shape.queries, shape.unlabeled, ep.unlabeled_labels, nullptr);
  return ep;
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingTable& table) {
  ByteWriter w;
  w.bytes("MCTE");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(table.count));
  w.u32(static_cast<std::uint32_t>(table.dim));
  for (float v : table.rows) w.f32(v);
  for (auto id : table.labels) w.u32(id);
  return w.take();
}

EmbeddingTable decode_embeddings(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.bytes(4, "magic") != "MCTE") throw FormatError("bad magic, expected MCTE", 0);
  const auto version_at = r.offset();
  if (r.u32("version") != 1) throw FormatError("unsupported MCTE version", version_at);
  const auto count_at = r.offset();
  const auto count = r.u32("count");
  if (count == 0) throw FormatError("empty embedding table", count_at);
  const auto dim_at = r.offset();
  const auto dim = r.u32("dim");
  if (dim == 0) throw FormatError("zero embedding dimension", dim_at);
  const std::uint64_t expected = std::uint64_t{count} * dim * 4 + std::uint64_t{count} * 4;
  if (r.remaining() < expected) throw FormatError("truncated file: payload shorter than count/dim imply", r.offset());

  std::vector<float> rows(std::size_t{count} * dim);
  for (auto& v : rows) {
    const auto at = r.offset();
    v = r.f32("row value");
    if (!std::isfinite(v)) throw FormatError("non-finite embedding value", at);
  }
  std::vector<std::uint32_t> labels(count);
  for (auto& id : labels) id = r.u32("class id");
  r.expect_end();
  return EmbeddingTable::build(dim, std::move(rows), std::move(labels));
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  write_file(path, encode_embeddings(table));
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) { return decode_embeddings(read_file(path)); }

EmbeddingTable synthetic_table(const SyntheticSpec& spec, std::size_t per_class, std::uint64_t seed) {
  if (spec.pool_classes == 0) throw ContractError("synthetic_table: spec needs pool_classes > 0");
  if (per_class == 0) throw ContractError("synthetic_table: per_class must be positive");
  spec.validate(EpisodeShape{1, 1, 0, 0, 0});
  const auto means = synthetic_pool_means(spec);
  Rng rng(seed);
  std::vector<double> buf;
  std::vector<std::uint32_t> labels;
  for (std::size_t k = 0; k < means.size(); ++k)
    for (std::size_t i = 0; i < per_class; ++i) {
      append_gaussian(rng, means[k], spec.within_std, buf);
      labels.push_back(static_cast<std::uint32_t>(k));
    }
  std::vector<float> rows(buf.begin(), buf.end());
  return EmbeddingTable::build(spec.input_dim, std::move(rows), std::move(labels));
}

Episode EpisodeSource::sample(const EpisodeShape& shape, std::uint64_t seed) const {
  if (const auto* spec = std::get_if<SyntheticSpec>(&source_)) return gen_synthetic(*spec, shape, seed).episode;
  return sample_episode(*std::get<std::shared_ptr<const EmbeddingTable>>(source_), shape, seed);
}

std::size_t EpisodeSource::input_dim() const {
  if (const auto* spec = std::get_if<SyntheticSpec>(&source_)) return spec->input_dim;
  return std::get<std::shared_ptr<const EmbeddingTable>>(source_)->dim;
}

std::size_t EpisodeSource::global_classes() const {
  if (const auto* spec = std::get_if<SyntheticSpec>(&source_)) return spec->pool_classes;
  return std::get<std::shared_ptr<const EmbeddingTable>>(source_)->class_index.size();
}

}  // namespace mct
