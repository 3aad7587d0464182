#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "wbm/data.hpp"
#include "wbm/errors.hpp"

// Reverse-mode autodiff over dense Eigen matrices, templated on scalar so the
// same model code runs in float for training and double for gradient checks.
// Values live on a tape; every op appends a node whose backward closure
// accumulates into its parents. Closures capture node indices, never
// references: the node vector may reallocate.
namespace wbm::ad {

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int index = -1;

  bool valid() const { return tape != nullptr && index >= 0; }
  const Matrix<S>& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
};

template <typename S>
class Tape {
 public:
  // Backward receives the tape and the node's own index; it reads the node's
  // accumulated gradient and value through the tape.
  using BackwardFn = std::function<void(Tape&, int)>;

  struct Node {
    Matrix<S> value;
    Matrix<S> grad;  // empty until touched during backward
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var<S> leaf(Matrix<S> value, bool needs_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, needs_grad, {}});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<S> constant(Matrix<S> value) { return leaf(std::move(value), false); }

  Var<S> scalar_const(S v) {
    Matrix<S> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  Var<S> make(Matrix<S> value, bool needs_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), {}, needs_grad, needs_grad ? std::move(backward) : BackwardFn{}});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix<S>& val(int i) const { return nodes_[static_cast<std::size_t>(i)].value; }

  bool needs_grad(int i) const { return nodes_[static_cast<std::size_t>(i)].needs_grad; }

  // Gradient accumulator, allocated to the value's shape on first use.
  Matrix<S>& grad(int i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) n.grad = Matrix<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool grad_touched(int i) const { return nodes_[static_cast<std::size_t>(i)].grad.size() != 0; }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse creation order
  // (creation order is a topological order by construction).
  void backward(const Var<S>& loss) {
    if (loss.tape != this) throw ContractError("backward: variable from a different tape");
    const Matrix<S>& lv = val(loss.index);
    if (lv.rows() != 1 || lv.cols() != 1) throw ContractError("backward: loss must be 1x1");
    grad(loss.index).setOnes();
    for (int i = loss.index; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  Matrix<S> grad_of(const Var<S>& v) {
    const Node& n = nodes_[static_cast<std::size_t>(v.index)];
    if (n.grad.size() == 0) return Matrix<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

 private:
  std::vector<Node> nodes_;
};

template <typename S>
const Matrix<S>& Var<S>::val() const {
  return tape->val(index);
}

namespace detail {

template <typename S>
Tape<S>& same_tape(const Var<S>& a, const Var<S>& b) {
  if (a.tape != b.tape) throw ContractError("operands from different tapes");
  return *a.tape;
}

// Broadcast m to (r, c). Allowed source shapes: (r,c), (1,c), (r,1), (1,1).
template <typename S>
Matrix<S> bcast(const Matrix<S>& m, Eigen::Index r, Eigen::Index c) {
  if (m.rows() == r && m.cols() == c) return m;
  if (m.rows() == 1 && m.cols() == c) return m.replicate(r, 1);
  if (m.rows() == r && m.cols() == 1) return m.replicate(1, c);
  if (m.rows() == 1 && m.cols() == 1) return Matrix<S>::Constant(r, c, m(0, 0));
  throw ContractError("broadcast shape mismatch");
}

// Sum g back down to (r, c); the adjoint of bcast.
template <typename S>
Matrix<S> reduce_to(const Matrix<S>& g, Eigen::Index r, Eigen::Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  if (r == 1 && c == g.cols()) return g.colwise().sum();
  if (r == g.rows() && c == 1) return g.rowwise().sum();
  if (r == 1 && c == 1) {
    Matrix<S> m(1, 1);
    m(0, 0) = g.sum();
    return m;
  }
  throw ContractError("broadcast reduce shape mismatch");
}

template <typename S>
std::pair<Eigen::Index, Eigen::Index> bshape(const Var<S>& a, const Var<S>& b) {
  Eigen::Index r = std::max(a.rows(), b.rows());
  Eigen::Index c = std::max(a.cols(), b.cols());
  auto ok = [&](const Var<S>& v) {
    return (v.rows() == r || v.rows() == 1) && (v.cols() == c || v.cols() == 1);
  };
  if (!ok(a) || !ok(b)) throw ContractError("incompatible shapes for broadcast op");
  return {r, c};
}

template <typename S>
bool either_needs_grad(const Var<S>& a, const Var<S>& b) {
  return a.tape->needs_grad(a.index) || b.tape->needs_grad(b.index);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  auto [r, c] = detail::bshape(a, b);
  Matrix<S> out = detail::bcast(a.val(), r, c) + detail::bcast(b.val(), r, c);
  int ia = a.index, ib = b.index;
  return t.make(std::move(out), detail::either_needs_grad(a, b), [ia, ib](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += detail::reduce_to(g, t.val(ia).rows(), t.val(ia).cols());
    if (t.needs_grad(ib)) t.grad(ib) += detail::reduce_to(g, t.val(ib).rows(), t.val(ib).cols());
  });
}

template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  auto [r, c] = detail::bshape(a, b);
  Matrix<S> out = detail::bcast(a.val(), r, c) - detail::bcast(b.val(), r, c);
  int ia = a.index, ib = b.index;
  return t.make(std::move(out), detail::either_needs_grad(a, b), [ia, ib](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += detail::reduce_to(g, t.val(ia).rows(), t.val(ia).cols());
    if (t.needs_grad(ib)) t.grad(ib) -= detail::reduce_to(g, t.val(ib).rows(), t.val(ib).cols());
  });
}

// Elementwise (Hadamard) product with broadcasting.
template <typename S>
Var<S> operator*(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  auto [r, c] = detail::bshape(a, b);
  Matrix<S> av = detail::bcast(a.val(), r, c);
  Matrix<S> bv = detail::bcast(b.val(), r, c);
  Matrix<S> out = av.cwiseProduct(bv);
  int ia = a.index, ib = b.index;
  return t.make(std::move(out), detail::either_needs_grad(a, b), [ia, ib, r = r, c = c](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    if (t.needs_grad(ia)) {
      Matrix<S> gb = g.cwiseProduct(detail::bcast(t.val(ib), r, c));
      t.grad(ia) += detail::reduce_to(gb, t.val(ia).rows(), t.val(ia).cols());
    }
    if (t.needs_grad(ib)) {
      Matrix<S> ga = g.cwiseProduct(detail::bcast(t.val(ia), r, c));
      t.grad(ib) += detail::reduce_to(ga, t.val(ib).rows(), t.val(ib).cols());
    }
  });
}

template <typename S>
Var<S> operator/(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  auto [r, c] = detail::bshape(a, b);
  Matrix<S> av = detail::bcast(a.val(), r, c);
  Matrix<S> bv = detail::bcast(b.val(), r, c);
  Matrix<S> out = av.cwiseQuotient(bv);
  int ia = a.index, ib = b.index;
  return t.make(std::move(out), detail::either_needs_grad(a, b), [ia, ib, r = r, c = c](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    Matrix<S> bb = detail::bcast(t.val(ib), r, c);
    if (t.needs_grad(ia)) {
      Matrix<S> ga = g.cwiseQuotient(bb);
      t.grad(ia) += detail::reduce_to(ga, t.val(ia).rows(), t.val(ia).cols());
    }
    if (t.needs_grad(ib)) {
      Matrix<S> ab = detail::bcast(t.val(ia), r, c);
      Matrix<S> gb = -(g.cwiseProduct(ab).cwiseQuotient(bb.cwiseProduct(bb)));
      t.grad(ib) += detail::reduce_to(gb, t.val(ib).rows(), t.val(ib).cols());
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S k) {
  int ia = a.index;
  return a.tape->make(a.val() * k, a.tape->needs_grad(ia), [ia, k](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self) * k;
  });
}

template <typename S>
Var<S> add_const(const Var<S>& a, S k) {
  int ia = a.index;
  return a.tape->make(a.val().array() + k, a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self);
  });
}

template <typename S>
Var<S> operator-(const Var<S>& a) {
  return scale(a, S(-1));
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  Tape<S>& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw ContractError("matmul inner dimension mismatch");
  Matrix<S> out = a.val() * b.val();
  int ia = a.index, ib = b.index;
  return t.make(std::move(out), detail::either_needs_grad(a, b), [ia, ib](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.val(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.val(ia).transpose() * g;
  });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
  int ia = a.index;
  return a.tape->make(a.val().transpose(), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self).transpose();
  });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
Var<S> exp(const Var<S>& a) {
  int ia = a.index;
  return a.tape->make(a.val().array().exp(), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia).array() += t.grad(self).array() * t.val(self).array();
  });
}

// Natural log; caller guarantees positivity (floors applied where needed).
template <typename S>
Var<S> log(const Var<S>& a) {
  int ia = a.index;
  return a.tape->make(a.val().array().log(), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia).array() += t.grad(self).array() / t.val(ia).array();
  });
}

template <typename S>
Var<S> sqrt(const Var<S>& a) {
  int ia = a.index;
  return a.tape->make(a.val().array().sqrt(), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia).array() += t.grad(self).array() * S(0.5) / t.val(self).array();
  });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  int ia = a.index;
  return a.tape->make(a.val().array().square(), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia).array() += t.grad(self).array() * S(2) * t.val(ia).array();
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Matrix<S> out = (S(1) / (S(1) + (-a.val().array()).exp())).matrix();
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    auto y = t.val(self).array();
    t.grad(ia).array() += t.grad(self).array() * y * (S(1) - y);
  });
}

// swish: x * sigmoid(x)
template <typename S>
Var<S> silu(const Var<S>& a) {
  auto x = a.val().array();
  Matrix<S> sig = (S(1) / (S(1) + (-x).exp())).matrix();
  Matrix<S> out = a.val().cwiseProduct(sig);
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    auto x = t.val(ia).array();
    auto s = S(1) / (S(1) + (-x).exp());
    t.grad(ia).array() += t.grad(self).array() * (s + x * s * (S(1) - s));
  });
}

template <typename S>
Var<S> softplus(const Var<S>& a) {
  // Stable: log1p(exp(-|x|)) + max(x, 0).
  auto x = a.val().array();
  Matrix<S> out = ((-x.abs()).exp().log1p() + x.max(S(0))).matrix();
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    auto x = t.val(ia).array();
    t.grad(ia).array() += t.grad(self).array() / (S(1) + (-x).exp());
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum(const Var<S>& a) {
  Matrix<S> out(1, 1);
  out(0, 0) = a.val().sum();
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  Matrix<S> out(1, 1);
  out(0, 0) = a.val().mean();
  int ia = a.index;
  S inv = S(1) / static_cast<S>(a.val().size());
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia, inv](Tape<S>& t, int self) {
    t.grad(ia).array() += t.grad(self)(0, 0) * inv;
  });
}

template <typename S>
Var<S> rowsum(const Var<S>& a) {
  Matrix<S> out = a.val().rowwise().sum();
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self).replicate(1, t.val(ia).cols());
  });
}

template <typename S>
Var<S> rowmean(const Var<S>& a) {
  Matrix<S> out = a.val().rowwise().mean();
  int ia = a.index;
  S inv = S(1) / static_cast<S>(a.val().cols());
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia, inv](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self).replicate(1, t.val(ia).cols()) * inv;
  });
}

template <typename S>
Var<S> colsum(const Var<S>& a) {
  Matrix<S> out = a.val().colwise().sum();
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self).replicate(t.val(ia).rows(), 1);
  });
}

template <typename S>
Var<S> colmean(const Var<S>& a) {
  Matrix<S> out = a.val().colwise().mean();
  int ia = a.index;
  S inv = S(1) / static_cast<S>(a.val().rows());
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia, inv](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self).replicate(t.val(ia).rows(), 1) * inv;
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> block(const Var<S>& a, Eigen::Index i0, Eigen::Index j0, Eigen::Index r, Eigen::Index c) {
  if (i0 < 0 || j0 < 0 || i0 + r > a.rows() || j0 + c > a.cols()) {
    throw ContractError("block out of range");
  }
  Matrix<S> out = a.val().block(i0, j0, r, c);
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia, i0, j0, r, c](Tape<S>& t, int self) {
    t.grad(ia).block(i0, j0, r, c) += t.grad(self);
  });
}

template <typename S>
Var<S> rows(const Var<S>& a, Eigen::Index i0, Eigen::Index n) {
  return block(a, i0, 0, n, a.cols());
}

template <typename S>
Var<S> cols(const Var<S>& a, Eigen::Index j0, Eigen::Index n) {
  return block(a, 0, j0, a.rows(), n);
}

template <typename S>
Var<S> vstack(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("vstack of zero parts");
  Tape<S>& t = *parts.front().tape;
  Eigen::Index c = parts.front().cols();
  Eigen::Index r = 0;
  bool ng = false;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ContractError("vstack across tapes");
    if (p.cols() != c) throw ContractError("vstack column mismatch");
    r += p.rows();
    ng = ng || t.needs_grad(p.index);
  }
  Matrix<S> out(r, c);
  std::vector<int> idx;
  idx.reserve(parts.size());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.val();
    at += p.rows();
    idx.push_back(p.index);
  }
  return t.make(std::move(out), ng, [idx](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    Eigen::Index at = 0;
    for (int i : idx) {
      Eigen::Index n = t.val(i).rows();
      if (t.needs_grad(i)) t.grad(i) += g.middleRows(at, n);
      at += n;
    }
  });
}

template <typename S>
Var<S> hstack(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("hstack of zero parts");
  Tape<S>& t = *parts.front().tape;
  Eigen::Index r = parts.front().rows();
  Eigen::Index c = 0;
  bool ng = false;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ContractError("hstack across tapes");
    if (p.rows() != r) throw ContractError("hstack row mismatch");
    c += p.cols();
    ng = ng || t.needs_grad(p.index);
  }
  Matrix<S> out(r, c);
  std::vector<int> idx;
  idx.reserve(parts.size());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.val();
    at += p.cols();
    idx.push_back(p.index);
  }
  return t.make(std::move(out), ng, [idx](Tape<S>& t, int self) {
    const Matrix<S>& g = t.grad(self);
    Eigen::Index at = 0;
    for (int i : idx) {
      Eigen::Index n = t.val(i).cols();
      if (t.needs_grad(i)) t.grad(i) += g.middleCols(at, n);
      at += n;
    }
  });
}

// Embedding-style lookup: out.row(k) = a.row(indices[k]).
template <typename S>
Var<S> gather_rows(const Var<S>& a, std::vector<int> indices) {
  for (int i : indices) {
    if (i < 0 || i >= a.rows()) throw ContractError("gather_rows index out of range");
  }
  Matrix<S> out(static_cast<Eigen::Index>(indices.size()), a.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = a.val().row(indices[k]);
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia),
                      [ia, indices = std::move(indices)](Tape<S>& t, int self) {
                        const Matrix<S>& g = t.grad(self);
                        Matrix<S>& ga = t.grad(ia);
                        for (std::size_t k = 0; k < indices.size(); ++k) {
                          ga.row(indices[k]) += g.row(static_cast<Eigen::Index>(k));
                        }
                      });
}

template <typename S>
Var<S> reverse_rows(const Var<S>& a) {
  Matrix<S> out = a.val().colwise().reverse();
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self).colwise().reverse();
  });
}

// Shift rows down by k with zero fill (causal delay line).
template <typename S>
Var<S> shift_rows(const Var<S>& a, Eigen::Index k) {
  if (k < 0) throw ContractError("shift_rows requires k >= 0");
  Eigen::Index r = a.rows();
  Matrix<S> out = Matrix<S>::Zero(r, a.cols());
  if (k < r) out.bottomRows(r - k) = a.val().topRows(r - k);
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia, k](Tape<S>& t, int self) {
    Eigen::Index r = t.val(ia).rows();
    if (k < r) t.grad(ia).topRows(r - k) += t.grad(self).bottomRows(r - k);
  });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename S>
Var<S> softmax_rows(const Var<S>& a) {
  Matrix<S> out = a.val();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    const Matrix<S>& y = t.val(self);
    const Matrix<S>& g = t.grad(self);
    Matrix<S> gy = g.cwiseProduct(y);
    Vector<S> dot = gy.rowwise().sum();
    t.grad(ia) += gy - y.cwiseProduct(dot.replicate(1, y.cols()));
  });
}

// Row softmax restricted to keep != 0. Fully masked rows produce zero rows
// rather than NaN.
template <typename S>
Var<S> softmax_rows_masked(const Var<S>& a, const Matrix<S>& keep) {
  if (keep.rows() != a.rows() || keep.cols() != a.cols()) {
    throw ContractError("softmax mask shape mismatch");
  }
  Matrix<S> out = Matrix<S>::Zero(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    S best = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (keep(i, j) != S(0)) {
        any = true;
        best = std::max(best, a.val()(i, j));
      }
    }
    if (!any) continue;
    S denom = S(0);
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (keep(i, j) != S(0)) {
        out(i, j) = std::exp(a.val()(i, j) - best);
        denom += out(i, j);
      }
    }
    out.row(i) /= denom;
  }
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia), [ia](Tape<S>& t, int self) {
    const Matrix<S>& y = t.val(self);
    const Matrix<S>& g = t.grad(self);
    Matrix<S> gy = g.cwiseProduct(y);
    Vector<S> dot = gy.rowwise().sum();
    // y is zero at masked entries, so the masked terms vanish on their own.
    t.grad(ia) += gy - y.cwiseProduct(dot.replicate(1, y.cols()));
  });
}

// ---------------------------------------------------------------------------
// specials
// ---------------------------------------------------------------------------

// Row-wise minimum over off-diagonal entries of a square matrix, floored at
// `floor_value`. Gradient routes to the argmin entry unless the floor is
// active.
template <typename S>
Var<S> offdiag_row_min(const Var<S>& a, S floor_value) {
  if (a.rows() != a.cols() || a.rows() < 2) {
    throw ContractError("offdiag_row_min requires a square matrix with n >= 2");
  }
  Eigen::Index n = a.rows();
  Matrix<S> out(n, 1);
  std::vector<Eigen::Index> argmin(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    S best = std::numeric_limits<S>::max();
    Eigen::Index bj = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (a.val()(i, j) < best) {
        best = a.val()(i, j);
        bj = j;
      }
    }
    argmin[static_cast<std::size_t>(i)] = bj;
    out(i, 0) = std::max(best, floor_value);
  }
  int ia = a.index;
  return a.tape->make(std::move(out), a.tape->needs_grad(ia),
                      [ia, argmin = std::move(argmin), floor_value](Tape<S>& t, int self) {
                        const Matrix<S>& g = t.grad(self);
                        Matrix<S>& ga = t.grad(ia);
                        for (Eigen::Index i = 0; i < g.rows(); ++i) {
                          Eigen::Index j = argmin[static_cast<std::size_t>(i)];
                          // Floored rows have zero derivative.
                          if (t.val(ia)(i, j) >= floor_value) ga(i, j) += g(i, 0);
                        }
                      });
}

// Chunked selective-state-space scan for one head.
//   state[t] = decay[t] * state[t-1] + x[t] b[t]^T      (state: P x N)
//   y[t]     = state[t] c[t]                            (y[t]: P)
// decay: L x 1 in (0, 1]; x: L x P; b, c: L x N. Forward runs the chunked
// form (intra-chunk quadratic + carried inter-chunk state); backward
// recomputes states with the sequential recurrence.
template <typename S>
Var<S> ssd_scan(const Var<S>& decay, const Var<S>& x, const Var<S>& b, const Var<S>& c,
                Eigen::Index chunk = 32) {
  Tape<S>& t = detail::same_tape(decay, x);
  detail::same_tape(x, b);
  detail::same_tape(b, c);
  const Eigen::Index L = x.rows(), P = x.cols(), N = b.cols();
  if (decay.rows() != L || decay.cols() != 1) throw ContractError("ssd_scan: decay must be L x 1");
  if (b.rows() != L || c.rows() != L || c.cols() != N) throw ContractError("ssd_scan: b/c must be L x N");
  if (chunk < 1) throw ContractError("ssd_scan: chunk must be >= 1");

  const Matrix<S>& A = decay.val();
  const Matrix<S>& X = x.val();
  const Matrix<S>& B = b.val();
  const Matrix<S>& C = c.val();

  Matrix<S> Y = Matrix<S>::Zero(L, P);
  Matrix<S> carry = Matrix<S>::Zero(P, N);
  const double kLogFloor = -40.0;  // keeps chained decay ratios finite

  for (Eigen::Index s0 = 0; s0 < L; s0 += chunk) {
    const Eigen::Index Q = std::min(chunk, L - s0);
    // Decay products via 64-bit log accumulation regardless of S.
    Eigen::VectorXd cumlog(Q);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < Q; ++i) {
      acc += std::max(std::log(static_cast<double>(A(s0 + i, 0))), kLogFloor);
      cumlog(i) = acc;
    }
    // Inter-chunk: y_t += cum[t] * (carry c_t).
    for (Eigen::Index i = 0; i < Q; ++i) {
      Y.row(s0 + i) +=
          static_cast<S>(std::exp(cumlog(i))) * (carry * C.row(s0 + i).transpose()).transpose();
    }
    // Intra-chunk: scores(t, s) = (c_t . b_s) * prod_{r=s+1..t} a_r for s <= t.
    Matrix<S> scores = C.middleRows(s0, Q) * B.middleRows(s0, Q).transpose();
    for (Eigen::Index i = 0; i < Q; ++i) {
      for (Eigen::Index j = 0; j < Q; ++j) {
        if (j > i) {
          scores(i, j) = S(0);
        } else if (j < i) {
          scores(i, j) *= static_cast<S>(std::exp(cumlog(i) - cumlog(j)));
        }
      }
    }
    Y.middleRows(s0, Q) += scores * X.middleRows(s0, Q);
    // Carry to the next chunk.
    Matrix<S> new_carry = static_cast<S>(std::exp(cumlog(Q - 1))) * carry;
    for (Eigen::Index i = 0; i < Q; ++i) {
      S w = (i == Q - 1) ? S(1) : static_cast<S>(std::exp(cumlog(Q - 1) - cumlog(i)));
      new_carry.noalias() += w * (X.row(s0 + i).transpose() * B.row(s0 + i));
    }
    carry = std::move(new_carry);
  }

  bool ng = t.needs_grad(decay.index) || t.needs_grad(x.index) || t.needs_grad(b.index) ||
            t.needs_grad(c.index);
  int id = decay.index, ix = x.index, ib = b.index, ic = c.index;
  return t.make(std::move(Y), ng, [id, ix, ib, ic, L, P, N](Tape<S>& t, int self) {
    const Matrix<S>& A = t.val(id);
    const Matrix<S>& X = t.val(ix);
    const Matrix<S>& B = t.val(ib);
    const Matrix<S>& C = t.val(ic);
    const Matrix<S>& G = t.grad(self);

    // Recompute states sequentially; store every state for the adjoint pass.
    std::vector<Matrix<S>> states(static_cast<std::size_t>(L));
    Matrix<S> h = Matrix<S>::Zero(P, N);
    for (Eigen::Index i = 0; i < L; ++i) {
      h = A(i, 0) * h + X.row(i).transpose() * B.row(i);
      states[static_cast<std::size_t>(i)] = h;
    }

    Matrix<S> dH = Matrix<S>::Zero(P, N);
    Matrix<S> dA = Matrix<S>::Zero(L, 1);
    Matrix<S> dX = Matrix<S>::Zero(L, P);
    Matrix<S> dB = Matrix<S>::Zero(L, N);
    Matrix<S> dC = Matrix<S>::Zero(L, N);
    for (Eigen::Index i = L - 1; i >= 0; --i) {
      const Matrix<S>& Hi = states[static_cast<std::size_t>(i)];
      dH.noalias() += G.row(i).transpose() * C.row(i);
      dC.row(i).noalias() += G.row(i) * Hi;
      if (i > 0) {
        const Matrix<S>& Hp = states[static_cast<std::size_t>(i - 1)];
        dA(i, 0) = dH.cwiseProduct(Hp).sum();
      }
      dX.row(i).noalias() += (dH * B.row(i).transpose()).transpose();
      dB.row(i).noalias() += X.row(i) * dH;
      dH *= A(i, 0);
    }
    if (t.needs_grad(id)) t.grad(id) += dA;
    if (t.needs_grad(ix)) t.grad(ix) += dX;
    if (t.needs_grad(ib)) t.grad(ib) += dB;
    if (t.needs_grad(ic)) t.grad(ic) += dC;
  });
}

// ---------------------------------------------------------------------------
// composite helpers
// ---------------------------------------------------------------------------

template <typename S>
S scalar_value(const Var<S>& v) {
  if (v.rows() != 1 || v.cols() != 1) throw ContractError("scalar_value on non-scalar");
  return v.val()(0, 0);
}

// x W + bias(optional row vector)
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& bias) {
  return matmul(x, w) + bias;
}

// Row-wise layer norm followed by elementwise affine (gamma/beta row vectors).
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  Var<S> mu = rowmean(x);
  Var<S> centered = x - mu;
  Var<S> var = rowmean(square(centered));
  Var<S> inv = sqrt(add_const(var, eps));
  return (centered / inv) * gamma + beta;
}

// Row-wise RMS norm with elementwise scale.
template <typename S>
Var<S> rms_norm(const Var<S>& x, const Var<S>& gamma, S eps = S(1e-5)) {
  Var<S> ms = rowmean(square(x));
  Var<S> inv = sqrt(add_const(ms, eps));
  return (x / inv) * gamma;
}

// Batch norm over rows (samples); per-column statistics. Returns the
// normalized output and exposes the batch statistics for running updates.
template <typename S>
Var<S> batch_norm_train(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps,
                        Matrix<S>* batch_mean_out = nullptr, Matrix<S>* batch_var_out = nullptr) {
  Var<S> mu = colmean(x);
  Var<S> centered = x - mu;
  Var<S> var = colmean(square(centered));
  if (batch_mean_out) *batch_mean_out = mu.val();
  if (batch_var_out) *batch_var_out = var.val();
  Var<S> inv = sqrt(add_const(var, eps));
  return (centered / inv) * gamma + beta;
}

// Inference-mode batch norm with frozen statistics.
template <typename S>
Var<S> batch_norm_eval(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                       const Matrix<S>& running_mean, const Matrix<S>& running_var, S eps) {
  Tape<S>& t = *x.tape;
  Var<S> mu = t.constant(running_mean);
  Matrix<S> inv_sd = (running_var.array() + eps).sqrt().matrix();
  Var<S> inv = t.constant(inv_sd);
  return ((x - mu) / inv) * gamma + beta;
}

}  // namespace wbm::ad
