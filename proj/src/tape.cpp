#include "mct/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mct/errors.hpp"
#include "mct/numeric.hpp"

namespace mct {

const Tensor& Var::value() const { return tape_->value(*this); }

const Tensor& Gradients::operator[](Var v) const {
  auto it = grads_.find(v.id());
  if (it == grads_.end()) throw ContractError("gradients: node is not a parameter leaf");
  return it->second;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Backward backward) {
  Node node{std::move(value), {}, std::move(backward), false, false};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw ContractError("tape: input recorded on a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::note_branches(std::span<const double> inputs) {
  for (double x : inputs) branches_ = (branches_ ^ (x > 0.0 ? 1u : 0u)) * 0x100000001b3ull;
}

Gradients Tape::grad(Var loss) const {
  if (&loss.tape() != this) throw ContractError("grad: loss belongs to another tape");
  if (value(loss).size() != 1) throw ContractError("grad: loss must be scalar-valued");

  std::vector<std::vector<double>> buffers(loss.id() + 1);
  buffers[loss.id()] = {1.0};
  std::vector<std::vector<double>*> slots;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    const Node& node = nodes_[k];
    if (!node.requires_grad || node.parameter || buffers[k].empty() || !node.backward) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const auto in = node.inputs[j];
      if (!nodes_[in].requires_grad) continue;
      if (buffers[in].empty()) buffers[in].assign(nodes_[in].value.size(), 0.0);
      slots[j] = &buffers[in];
    }
    node.backward(buffers[k], slots);
    // Intermediate buffers are no longer needed once propagated.
    if (k != loss.id()) std::vector<double>().swap(buffers[k]);
  }

  Gradients out;
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    if (!nodes_[k].parameter) continue;
    const auto& shape = nodes_[k].value.shape();
    if (k < buffers.size() && !buffers[k].empty()) {
      out.grads_.emplace(k, Tensor(shape, std::move(buffers[k])));
    } else {
      out.grads_.emplace(k, Tensor::zeros(shape));
    }
  }
  return out;
}

namespace {

using Buf = std::vector<double>;

const Tensor& val(Var v) { return v.value(); }

enum class Bcast { Same, Scalar, Row, Col };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.size() == 1) return Bcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::Col;
  throw ContractError(std::string(op) + ": incompatible shapes");
}

std::size_t bindex(Bcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Bcast::Same: return i;
    case Bcast::Scalar: return 0;
    case Bcast::Row: return i % cols;
    case Bcast::Col: return i / cols;
  }
  return 0;
}

// Shared driver for broadcasting binary ops. `fwd(a, b)` computes the value,
// `da(a, b, out)` and `db(a, b, out)` the local partials.
template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F fwd, DA da, DB db) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  const auto kind = broadcast_kind(av, bv, name);
  const auto cols = av.cols();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[bindex(kind, i, cols)]);
  Tensor result(av.shape(), std::move(out));
  return a.tape().record(std::move(result), {a, b},
                         [a, b, kind, cols, da, db](std::span<const double> g, std::span<Buf* const> in) {
                           const Tensor& av = val(a);
                           const Tensor& bv = val(b);
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const auto j = bindex(kind, i, cols);
                             if (in[0]) (*in[0])[i] += g[i] * da(av[i], bv[j]);
                             if (in[1]) (*in[1])[j] += g[i] * db(av[i], bv[j]);
                           }
                         });
}

template <class F, class D>
Var unary(Var a, F fwd, D deriv) {
  const Tensor& av = val(a);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  Tensor result(av.shape(), std::move(out));
  auto& tape = a.tape();
  auto self = Var(&tape, tape.size());
  return tape.record(std::move(result), {a}, [a, self, deriv](std::span<const double> g, std::span<Buf* const> in) {
    const Tensor& av = val(a);
    const Tensor& ov = val(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * deriv(av[i], ov[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  const auto n = av.rows(), k = av.cols(), m = bv.cols();
  if (bv.rows() != k) throw ContractError("matmul: inner dimensions differ");
  std::vector<double> out(n * m, 0.0);
  const auto A = av.data();
  const auto B = bv.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = A[i * k + p];
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += x * B[p * m + j];
    }
  }
  return a.tape().record(Tensor::matrix(n, m, std::move(out)), {a, b},
                         [a, b, n, k, m](std::span<const double> g, std::span<Buf* const> in) {
                           const auto A = val(a).data();
                           const auto B = val(b).data();
                           if (in[0]) {
                             auto& ga = *in[0];
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 double s = 0.0;
                                 for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * B[p * m + j];
                                 ga[i * k + p] += s;
                               }
                           }
                           if (in[1]) {
                             auto& gb = *in[1];
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double x = A[i * k + p];
                                 if (x == 0.0) continue;
                                 for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += x * g[i * m + j];
                               }
                           }
                         });
}

Var transpose(Var a) {
  const Tensor& av = val(a);
  const auto r = av.rows(), c = av.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av.at(i, j);
  return a.tape().record(Tensor::matrix(c, r, std::move(out)), {a},
                         [r, c](std::span<const double> g, std::span<Buf* const> in) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) (*in[0])[i * c + j] += g[j * r + i];
                         });
}

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var neg(Var a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(Var a, double k) {
  return unary(a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var relu(Var a) {
  a.tape().note_branches(val(a).data());
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
  const Tensor& av = val(a);
  double s = 0.0;
  for (double x : av.data()) s += x;
  return a.tape().record(Tensor::scalar(s), {a}, [](std::span<const double> g, std::span<Buf* const> in) {
    for (auto& x : *in[0]) x += g[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }

Var row_sum(Var a) {
  const Tensor& av = val(a);
  const auto r = av.rows(), c = av.cols();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av.at(i, j);
  return a.tape().record(Tensor::matrix(r, 1, std::move(out)), {a},
                         [r, c](std::span<const double> g, std::span<Buf* const> in) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) (*in[0])[i * c + j] += g[i];
                         });
}

Var col_sum(Var a) {
  const Tensor& av = val(a);
  const auto r = av.rows(), c = av.cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += av.at(i, j);
  return a.tape().record(Tensor::matrix(1, c, std::move(out)), {a},
                         [r, c](std::span<const double> g, std::span<Buf* const> in) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) (*in[0])[i * c + j] += g[j];
                         });
}

Var row_logsumexp(Var a) {
  const Tensor& av = val(a);
  const auto r = av.rows(), c = av.cols();
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = logsumexp(av.row_span(i));
  auto& tape = a.tape();
  auto self = Var(&tape, tape.size());
  return tape.record(Tensor::matrix(r, 1, std::move(out)), {a},
                     [a, self, r, c](std::span<const double> g, std::span<Buf* const> in) {
                       const Tensor& av = val(a);
                       const Tensor& lse = val(self);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           (*in[0])[i * c + j] += g[i] * std::exp(av.at(i, j) - lse[i]);
                     });
}

Var row_softmax_neg(Var d) {
  const Tensor& dv = val(d);
  const auto r = dv.rows(), c = dv.cols();
  std::vector<double> out;
  out.reserve(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const auto row = softmax_neg(dv.row_span(i));
    out.insert(out.end(), row.begin(), row.end());
  }
  auto& tape = d.tape();
  auto self = Var(&tape, tape.size());
  return tape.record(Tensor::matrix(r, c, std::move(out)), {d},
                     [self, r, c](std::span<const double> g, std::span<Buf* const> in) {
                       const Tensor& y = val(self);
                       for (std::size_t i = 0; i < r; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y.at(i, j);
                         for (std::size_t j = 0; j < c; ++j)
                           (*in[0])[i * c + j] -= y.at(i, j) * (g[i * c + j] - dot);
                       }
                     });
}

Var pick(Var a, std::span<const int> column_per_row) {
  const Tensor& av = val(a);
  const auto r = av.rows(), c = av.cols();
  if (column_per_row.size() != r) throw ContractError("pick: one index per row required");
  std::vector<std::size_t> idx(r);
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (column_per_row[i] < 0 || static_cast<std::size_t>(column_per_row[i]) >= c)
      throw ContractError("pick: index out of range");
    idx[i] = i * c + static_cast<std::size_t>(column_per_row[i]);
    out[i] = av[idx[i]];
  }
  return a.tape().record(Tensor::matrix(r, 1, std::move(out)), {a},
                         [idx = std::move(idx)](std::span<const double> g, std::span<Buf* const> in) {
                           for (std::size_t i = 0; i < idx.size(); ++i) (*in[0])[idx[i]] += g[i];
                         });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& av = val(a);
  return a.tape().record(av.reshaped({rows, cols}), {a}, [](std::span<const double> g, std::span<Buf* const> in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = val(a);
  const auto c = av.cols();
  if (count == 0 || begin + count > av.rows()) throw ContractError("slice_rows: range out of bounds");
  const auto d = av.data();
  std::vector<double> out(d.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          d.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  const auto offset = begin * c;
  return a.tape().record(Tensor::matrix(count, c, std::move(out)), {a},
                         [offset](std::span<const double> g, std::span<Buf* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[offset + i] += g[i];
                         });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& av = val(a);
  const auto c = av.cols();
  if (rows.empty()) throw ContractError("gather_rows: no rows requested");
  std::vector<double> out;
  out.reserve(rows.size() * c);
  for (auto r : rows) {
    if (r >= av.rows()) throw ContractError("gather_rows: row out of range");
    const auto s = av.row_span(r);
    out.insert(out.end(), s.begin(), s.end());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return a.tape().record(Tensor::matrix(rows.size(), c, std::move(out)), {a},
                         [idx = std::move(idx), c](std::span<const double> g, std::span<Buf* const> in) {
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < c; ++j) (*in[0])[idx[i] * c + j] += g[i * c + j];
                         });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("vstack: no parts");
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(val(p));
  std::vector<Var> inputs(parts.begin(), parts.end());
  std::vector<std::size_t> sizes;
  for (const auto& v : values) sizes.push_back(v.size());
  return parts.front().tape().record(mct::vstack(values), std::move(inputs),
                                     [sizes](std::span<const double> g, std::span<Buf* const> in) {
                                       std::size_t off = 0;
                                       for (std::size_t k = 0; k < sizes.size(); ++k) {
                                         if (in[k])
                                           for (std::size_t i = 0; i < sizes[k]; ++i) (*in[k])[i] += g[off + i];
                                         off += sizes[k];
                                       }
                                     });
}

Var reverse_cols(Var a) {
  const Tensor& av = val(a);
  const auto r = av.rows(), c = av.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av.at(i, c - 1 - j);
  return a.tape().record(Tensor::matrix(r, c, std::move(out)), {a},
                         [r, c](std::span<const double> g, std::span<Buf* const> in) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) (*in[0])[i * c + c - 1 - j] += g[i * c + j];
                         });
}

Var row_normalize(Var a) {
  const Tensor& av = val(a);
  const auto r = av.rows(), c = av.cols();
  std::vector<double> norms(r), out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (double x : av.row_span(i)) s += x * x;
    norms[i] = std::sqrt(s);
    if (!(norms[i] >= 1e-12)) {
      throw DomainError("row_normalize: row " + std::to_string(i) + " has (near) zero norm");
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av.at(i, j) / norms[i];
  }
  auto& tape = a.tape();
  auto self = Var(&tape, tape.size());
  return tape.record(Tensor::matrix(r, c, std::move(out)), {a},
                     [self, norms = std::move(norms), r, c](std::span<const double> g, std::span<Buf* const> in) {
                       // d(a/|a|) = (g - u (u.g)) / |a|
                       const Tensor& u = val(self);
                       for (std::size_t i = 0; i < r; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += u.at(i, j) * g[i * c + j];
                         for (std::size_t j = 0; j < c; ++j)
                           (*in[0])[i * c + j] += (g[i * c + j] - u.at(i, j) * dot) / norms[i];
                       }
                     });
}

Var pairwise_sqdist(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  const auto n = av.rows(), m = bv.rows(), k = av.cols();
  if (bv.cols() != k) throw ContractError("pairwise_sqdist: embedding widths differ");
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double diff = av.at(i, p) - bv.at(j, p);
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  return a.tape().record(Tensor::matrix(n, m, std::move(out)), {a, b},
                         [a, b, n, m, k](std::span<const double> g, std::span<Buf* const> in) {
                           const Tensor& av = val(a);
                           const Tensor& bv = val(b);
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < m; ++j) {
                               const double w = 2.0 * g[i * m + j];
                               if (w == 0.0) continue;
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double diff = av.at(i, p) - bv.at(j, p);
                                 if (in[0]) (*in[0])[i * k + p] += w * diff;
                                 if (in[1]) (*in[1])[j * k + p] -= w * diff;
                               }
                             }
                         });
}

Var pairwise_add(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  const auto n = av.rows(), m = bv.rows(), k = av.cols();
  if (bv.cols() != k) throw ContractError("pairwise_add: widths differ");
  std::vector<double> out(n * m * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < k; ++p) out[(i * m + j) * k + p] = av.at(i, p) + bv.at(j, p);
  return a.tape().record(Tensor::matrix(n * m, k, std::move(out)), {a, b},
                         [n, m, k](std::span<const double> g, std::span<Buf* const> in) {
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < m; ++j)
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double x = g[(i * m + j) * k + p];
                                 if (in[0]) (*in[0])[i * k + p] += x;
                                 if (in[1]) (*in[1])[j * k + p] += x;
                               }
                         });
}

Var stop_gradient(Var a) { return a.tape().constant(val(a)); }

}  // namespace mct
