#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mct/tensor.hpp"

namespace mct {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients of one scalar node with respect to every parameter leaf.
class Gradients {
 public:
  const Tensor& operator[](Var v) const;
  bool contains(Var v) const { return grads_.count(v.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Tensor> grads_;
};

// Define-by-run reverse-mode differentiation record. Nodes are appended in
// evaluation order, so every node's inputs precede it. Single-threaded.
class Tape {
 public:
  // Backward rule: receives d(loss)/d(output) and one accumulation buffer per
  // input (nullptr where the input needs no gradient).
  using Backward = std::function<void(std::span<const double> out_grad,
                                      std::span<std::vector<double>* const> in_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  Var record(Tensor value, std::vector<Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Throws ContractError unless `loss` holds exactly one element.
  Gradients grad(Var loss) const;

  // Fingerprint of every branch taken by kinked ops (relu) so far. Two runs
  // with equal fingerprints evaluate the same smooth piece of the graph.
  void note_branches(std::span<const double> inputs);
  std::uint64_t branch_fingerprint() const noexcept { return branches_; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
    bool parameter = false;
  };
  std::vector<Node> nodes_;
  std::uint64_t branches_ = 0xcbf29ce484222325ull;
};

// ---- differentiable primitives -------------------------------------------
// Binary elementwise ops accept b with the same shape as a, or b broadcast as
// a 1x1 scalar, a 1xC row or an Rx1 column.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double k);
Var exp(Var a);
Var log(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);             // R x 1
Var col_sum(Var a);             // 1 x C
Var row_logsumexp(Var a);       // R x 1
Var row_softmax_neg(Var d);     // per-row softmax of -d
Var pick(Var a, std::span<const int> column_per_row);  // R x 1

Var reshape(Var a, std::size_t rows, std::size_t cols);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var vstack(std::span<const Var> parts);
Var reverse_cols(Var a);

// a_i / ||a_i||_2 per row. Rows with norm below 1e-12 raise DomainError.
Var row_normalize(Var a);
// D[i][j] = ||a_i - b_j||^2, computed from explicit differences.
Var pairwise_sqdist(Var a, Var b);
// Row (i * m + j) = a_i + b_j for a (n x k), b (m x k).
Var pairwise_add(Var a, Var b);

// Forward identity, no gradient flows back.
Var stop_gradient(Var a);

}  // namespace mct
