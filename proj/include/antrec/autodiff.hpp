#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. Every op records its output value and, when any input requires a
// gradient, a closure that pushes the output gradient back to its inputs.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "antrec/error.hpp"

namespace antrec {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Overflow-safe ln(1 + e^x).
template <class T>
T softplus(T x) {
  if (x > T(30)) return x;
  return std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace antrec

namespace antrec::ad {

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Mat<T>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  /// Accumulated gradient; empty if nothing flowed into this node.
  const Mat<T>& grad() const { return tape_->grad(id_); }

  std::size_t id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  /// Called with the tape and the id of the node that owns the closure.
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr); }
  Var<T> variable(Mat<T> v) { return push(std::move(v), true, nullptr); }

  Var<T> push(Mat<T> v, bool requires_grad, Backward bw) {
    nodes_.push_back(Node{std::move(v), Mat<T>(), requires_grad, requires_grad ? std::move(bw) : Backward{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Mat<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Mat<T>& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of a node, zero-initialized on first touch.
  Mat<T>& grad_acc(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape backwards.
  void backward(const Var<T>& root) {
    if (root.rows() != 1 || root.cols() != 1) throw ValidationError("backward: root must be a scalar");
    if (!root.requires_grad()) return;
    grad_acc(root.id()).setOnes();
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
void same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw ValidationError("autodiff: operands live on different tapes");
}

inline void require(bool ok, const char* op) {
  if (!ok) throw ValidationError(std::string("autodiff: shape mismatch in ") + op);
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  detail::require(a.cols() == b.rows(), "matmul");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() * b.value(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_acc(ia).noalias() += g * t.value(ib).transpose();
                          if (t.requires_grad(ib)) t.grad_acc(ib).noalias() += t.value(ia).transpose() * g;
                        });
}

/// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  detail::require(a.cols() == b.cols(), "matmul_nt");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() * b.value().transpose(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_acc(ia).noalias() += g * t.value(ib);
                          if (t.requires_grad(ib)) t.grad_acc(ib).noalias() += g.transpose() * t.value(ia);
                        });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_acc(ia) += g;
                          if (t.requires_grad(ib)) t.grad_acc(ib) += g;
                        });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_acc(ia) += g;
                          if (t.requires_grad(ib)) t.grad_acc(ib) -= g;
                        });
}

template <class T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(a.value().cwiseProduct(b.value()), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_acc(ia) += g.cwiseProduct(t.value(ib));
                          if (t.requires_grad(ib)) t.grad_acc(ib) += g.cwiseProduct(t.value(ia));
                        });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  const std::size_t ia = a.id();
  return a.tape()->push(a.value() * c, a.requires_grad(), [ia, c](Tape<T>& t, std::size_t self) {
    t.grad_acc(ia) += t.grad(self) * c;
  });
}

/// a (N x d) + r (1 x d) broadcast over rows.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& r) {
  detail::same_tape(a, r);
  detail::require(r.rows() == 1 && r.cols() == a.cols(), "add_row");
  const std::size_t ia = a.id(), ir = r.id();
  Mat<T> out = a.value();
  out.rowwise() += r.value().row(0);
  return a.tape()->push(std::move(out), a.requires_grad() || r.requires_grad(),
                        [ia, ir](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_acc(ia) += g;
                          if (t.requires_grad(ir)) t.grad_acc(ir) += g.colwise().sum();
                        });
}

/// a (N x d) - r (1 x d) broadcast over rows.
template <class T>
Var<T> sub_row(const Var<T>& a, const Var<T>& r) {
  detail::same_tape(a, r);
  detail::require(r.rows() == 1 && r.cols() == a.cols(), "sub_row");
  const std::size_t ia = a.id(), ir = r.id();
  Mat<T> out = a.value();
  out.rowwise() -= r.value().row(0);
  return a.tape()->push(std::move(out), a.requires_grad() || r.requires_grad(),
                        [ia, ir](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) t.grad_acc(ia) += g;
                          if (t.requires_grad(ir)) t.grad_acc(ir) -= g.colwise().sum();
                        });
}

/// Scales row i of a (N x d) by c(i) where c is N x 1.
template <class T>
Var<T> mul_col(const Var<T>& a, const Var<T>& c) {
  detail::same_tape(a, c);
  detail::require(c.cols() == 1 && c.rows() == a.rows(), "mul_col");
  const std::size_t ia = a.id(), ic = c.id();
  Mat<T> out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) *= c.value()(i, 0);
  return a.tape()->push(std::move(out), a.requires_grad() || c.requires_grad(),
                        [ia, ic](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          if (t.requires_grad(ia)) {
                            Mat<T>& ga = t.grad_acc(ia);
                            const Mat<T>& cv = t.value(ic);
                            for (Eigen::Index i = 0; i < g.rows(); ++i) ga.row(i) += g.row(i) * cv(i, 0);
                          }
                          if (t.requires_grad(ic))
                            t.grad_acc(ic) += g.cwiseProduct(t.value(ia)).rowwise().sum();
                        });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  const std::size_t ia = a.id();
  return a.tape()->push(a.value().cwiseMax(T(0)), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    const Mat<T>& g = t.grad(self);
    const Mat<T>& x = t.value(ia);
    t.grad_acc(ia) += (x.array() > T(0)).select(g, T(0));
  });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  const std::size_t ia = a.id();
  return a.tape()->push(a.value().unaryExpr([](T x) { return antrec::softplus(x); }), a.requires_grad(),
                        [ia](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          t.grad_acc(ia) +=
                              g.cwiseProduct(t.value(ia).unaryExpr([](T x) { return antrec::sigmoid(x); }));
                        });
}

namespace detail {

template <class T>
void softmax_backward_rows(const Mat<T>& p, const Mat<T>& g, Mat<T>& gin) {
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const T dot = p.row(i).dot(g.row(i));
    gin.row(i).array() += p.row(i).array() * (g.row(i).array() - dot);
  }
}

}  // namespace detail

/// Row-wise softmax (max-subtracted).
template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  const std::size_t ia = a.id();
  Mat<T> p = a.value();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const T m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return a.tape()->push(std::move(p), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    detail::softmax_backward_rows(t.value(self), t.grad(self), t.grad_acc(ia));
  });
}

/// Row-wise softmax over a square score matrix where row i only sees columns
/// j <= i. Masked entries are exactly zero.
template <class T>
Var<T> causal_softmax(const Var<T>& a) {
  detail::require(a.rows() == a.cols(), "causal_softmax");
  const std::size_t ia = a.id();
  const Eigen::Index n = a.rows();
  Mat<T> p = Mat<T>::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto src = a.value().row(i).head(i + 1);
    const T m = src.maxCoeff();
    p.row(i).head(i + 1) = (src.array() - m).exp();
    p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
  }
  return a.tape()->push(std::move(p), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    detail::softmax_backward_rows(t.value(self), t.grad(self), t.grad_acc(ia));
  });
}

/// Per-row layer normalization: gamma * (x - mean) / sqrt(var + eps) + beta,
/// with gamma, beta of shape 1 x d and the biased variance.
template <class T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  detail::require(gamma.rows() == 1 && gamma.cols() == x.cols() && beta.rows() == 1 && beta.cols() == x.cols(),
                  "layer_norm_rows");
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> xhat(n, d);
  Mat<T> inv_std(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.value().row(i).mean();
    const auto c = x.value().row(i).array() - mean;
    const T var = c.square().mean();
    inv_std(i, 0) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = c * inv_std(i, 0);
  }
  Mat<T> out = xhat;
  for (Eigen::Index i = 0; i < n; ++i)
    out.row(i) = xhat.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->push(
      std::move(out), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const Mat<T>& g = t.grad(self);
        if (t.requires_grad(ig)) t.grad_acc(ig) += g.cwiseProduct(xhat).colwise().sum();
        if (t.requires_grad(ib)) t.grad_acc(ib) += g.colwise().sum();
        if (t.requires_grad(ix)) {
          Mat<T>& gx = t.grad_acc(ix);
          const auto gam = t.value(ig).row(0);
          for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const Eigen::Array<T, 1, Eigen::Dynamic> dxhat = g.row(i).cwiseProduct(gam).array();
            const T m1 = dxhat.mean();
            const T m2 = (dxhat * xhat.row(i).array()).mean();
            gx.row(i).array() += inv_std(i, 0) * (dxhat - m1 - xhat.row(i).array() * m2);
          }
        }
      });
}

/// Divides each row by its L2 norm. A zero row is an upstream bug and raises.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& a) {
  const std::size_t ia = a.id();
  Mat<T> norms(a.rows(), 1);
  Mat<T> out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const T nrm = out.row(i).norm();
    if (!(nrm > T(0))) throw ValidationError("cosine similarity of a zero-norm vector (row " + std::to_string(i) + ")");
    norms(i, 0) = nrm;
    out.row(i) /= nrm;
  }
  return a.tape()->push(std::move(out), a.requires_grad(),
                        [ia, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
                          const Mat<T>& g = t.grad(self);
                          const Mat<T>& y = t.value(self);
                          Mat<T>& ga = t.grad_acc(ia);
                          for (Eigen::Index i = 0; i < g.rows(); ++i) {
                            const T dot = g.row(i).dot(y.row(i));
                            ga.row(i) += (g.row(i) - y.row(i) * dot) / norms(i, 0);
                          }
                        });
}

/// Sum over rows of -log softmax(logits)[row, target[row]], computed with the
/// max-subtracted log-sum-exp. Returns a 1 x 1 node.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::size_t> targets) {
  detail::require(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "softmax_cross_entropy");
  const Mat<T>& z = logits.value();
  Mat<T> p(z.rows(), z.cols());
  T loss = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const std::size_t tgt = targets[static_cast<std::size_t>(i)];
    if (tgt >= static_cast<std::size_t>(z.cols())) throw ValidationError("softmax_cross_entropy: target out of range");
    const T m = z.row(i).maxCoeff();
    p.row(i) = (z.row(i).array() - m).exp();
    const T s = p.row(i).sum();
    p.row(i) /= s;
    loss += (m + std::log(s)) - z(i, static_cast<Eigen::Index>(tgt));
  }
  Mat<T> out(1, 1);
  out(0, 0) = loss;
  const std::size_t il = logits.id();
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return logits.tape()->push(std::move(out), logits.requires_grad(),
                             [il, p = std::move(p), tg = std::move(tg)](Tape<T>& t, std::size_t self) {
                               const T g = t.grad(self)(0, 0);
                               Mat<T>& gl = t.grad_acc(il);
                               gl += p * g;
                               for (std::size_t i = 0; i < tg.size(); ++i)
                                 gl(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(tg[i])) -= g;
                             });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  const std::size_t ia = a.id();
  Mat<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->push(std::move(out), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    t.grad_acc(ia).array() += t.grad(self)(0, 0);
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  const std::size_t ia = a.id();
  return a.tape()->push(a.value().transpose(), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    t.grad_acc(ia) += t.grad(self).transpose();
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index n) {
  detail::require(start >= 0 && n >= 0 && start + n <= a.cols(), "slice_cols");
  const std::size_t ia = a.id();
  return a.tape()->push(a.value().middleCols(start, n), a.requires_grad(),
                        [ia, start, n](Tape<T>& t, std::size_t self) {
                          t.grad_acc(ia).middleCols(start, n) += t.grad(self);
                        });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, Eigen::Index start, Eigen::Index n) {
  detail::require(start >= 0 && n >= 0 && start + n <= a.rows(), "slice_rows");
  const std::size_t ia = a.id();
  return a.tape()->push(a.value().middleRows(start, n), a.requires_grad(),
                        [ia, start, n](Tape<T>& t, std::size_t self) {
                          t.grad_acc(ia).middleRows(start, n) += t.grad(self);
                        });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    detail::require(p.rows() == rows, "concat_cols");
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  Mat<T> out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.cols();
  }
  return parts[0].tape()->push(std::move(out), rg, [layout = std::move(layout)](Tape<T>& t, std::size_t self) {
    const Mat<T>& g = t.grad(self);
    for (const auto& [id, o] : layout)
      if (t.requires_grad(id)) t.grad_acc(id) += g.middleCols(o, t.value(id).cols());
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    detail::require(p.cols() == cols, "concat_rows");
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  Mat<T> out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.rows();
  }
  return parts[0].tape()->push(std::move(out), rg, [layout = std::move(layout)](Tape<T>& t, std::size_t self) {
    const Mat<T>& g = t.grad(self);
    for (const auto& [id, o] : layout)
      if (t.requires_grad(id)) t.grad_acc(id) += g.middleRows(o, t.value(id).rows());
  });
}

/// Row lookup; the backward pass scatter-adds into the source rows.
template <class T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> idx) {
  Mat<T> out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= static_cast<std::size_t>(a.rows())) throw ValidationError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(static_cast<Eigen::Index>(idx[i]));
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  return a.tape()->push(std::move(out), a.requires_grad(), [ia, ix = std::move(ix)](Tape<T>& t, std::size_t self) {
    const Mat<T>& g = t.grad(self);
    Mat<T>& ga = t.grad_acc(ia);
    for (std::size_t i = 0; i < ix.size(); ++i)
      ga.row(static_cast<Eigen::Index>(ix[i])) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }

}  // namespace antrec::ad
