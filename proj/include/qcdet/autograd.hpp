// Copyright 2026 the qcdet authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

namespace qcdet::ag {

using Mat = Eigen::MatrixXd;
using BoolArr = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// One node of the dynamically built computation graph. Values are dense
/// double matrices; scalars are 1x1. Creation order doubles as a topological
/// order for the backward sweep (the graph is built front-to-back and the
/// training loop is single-threaded).
struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Mat& grad_ref() {
    if (!grad_ready) {
      grad = Mat::Zero(value.rows(), value.cols());
      grad_ready = true;
    }
    return grad;
  }
};

inline std::uint64_t next_node_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}

/// Value-semantic handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var leaf(Mat v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->id = next_node_id();
    return Var(std::move(n));
  }
  static Var constant(Mat v) { return leaf(std::move(v), false); }
  static Var scalar(double c) { return constant(Mat::Constant(1, 1, c)); }

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  double item() const { return node_->value(0, 0); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const Mat& grad() const {
    if (!node_->grad_ready) {
      const_cast<Node*>(node_.get())->grad_ref();
    }
    return node_->grad;
  }
  void zero_grad() { node_->grad_ready = false; }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(Mat value, std::initializer_list<Var> parents,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->id = next_node_id();
  bool rg = false;
  for (const Var& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(parents.size());
    for (const Var& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

}  // namespace detail

/// Reverse sweep from a scalar root. Gradients accumulate into every
/// reachable node with requires_grad set.
inline void backward(const Var& root, double seed = 1.0) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward: root must be a scalar");
  }
  if (!root.requires_grad()) return;

  // Collect the reachable grad-requiring subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  for (Node* n : order) n->grad_ready = false;
  root.node()->grad_ref()(0, 0) = seed;
  for (Node* n : order) {
    if (n->backward && n->grad_ready) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.value() + b.value(), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) an->grad_ref() += n.grad;
    if (bn->requires_grad) bn->grad_ref() += n.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.value() - b.value(), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) an->grad_ref() += n.grad;
    if (bn->requires_grad) bn->grad_ref() -= n.grad;
  });
}

inline Var mul(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.value().cwiseProduct(b.value()), {a, b},
                         [an, bn](Node& n) {
                           if (an->requires_grad)
                             an->grad_ref() += n.grad.cwiseProduct(bn->value);
                           if (bn->requires_grad)
                             bn->grad_ref() += n.grad.cwiseProduct(an->value);
                         });
}

inline Var div(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.value().cwiseQuotient(b.value()), {a, b},
                         [an, bn](Node& n) {
                           if (an->requires_grad)
                             an->grad_ref() += n.grad.cwiseQuotient(bn->value);
                           if (bn->requires_grad)
                             bn->grad_ref() -= n.grad
                                                   .cwiseProduct(an->value)
                                                   .cwiseQuotient(
                                                       bn->value.cwiseProduct(
                                                           bn->value));
                         });
}

inline Var scale(const Var& a, double c) {
  auto an = a.node();
  return detail::make_op(a.value() * c, {a}, [an, c](Node& n) {
    if (an->requires_grad) an->grad_ref() += n.grad * c;
  });
}

inline Var add_const(const Var& a, double c) {
  auto an = a.node();
  return detail::make_op(a.value().array() + c, {a}, [an](Node& n) {
    if (an->requires_grad) an->grad_ref() += n.grad;
  });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var matmul(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.value() * b.value(), {a, b}, [an, bn](Node& n) {
    if (an->requires_grad) an->grad_ref() += n.grad * bn->value.transpose();
    if (bn->requires_grad) bn->grad_ref() += an->value.transpose() * n.grad;
  });
}

inline Var transpose(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().transpose(), {a}, [an](Node& n) {
    if (an->requires_grad) an->grad_ref() += n.grad.transpose();
  });
}

/// X (n x d) + broadcast row b (1 x d).
inline Var rowwise_add(const Var& x, const Var& b) {
  auto xn = x.node(), bn = b.node();
  Mat v = x.value();
  v.rowwise() += b.value().row(0);
  return detail::make_op(std::move(v), {x, b}, [xn, bn](Node& n) {
    if (xn->requires_grad) xn->grad_ref() += n.grad;
    if (bn->requires_grad) bn->grad_ref() += n.grad.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Var relu(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().cwiseMax(0.0), {a}, [an](Node& n) {
    if (!an->requires_grad) return;
    an->grad_ref() +=
        (an->value.array() > 0.0).select(n.grad.array(), 0.0).matrix();
  });
}

inline Var sigmoid(const Var& a) {
  Mat s = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  auto an = a.node();
  return detail::make_op(std::move(s), {a}, [an](Node& n) {
    if (!an->requires_grad) return;
    an->grad_ref() +=
        (n.grad.array() * n.value.array() * (1.0 - n.value.array())).matrix();
  });
}

inline Var tanh(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().array().tanh().matrix(), {a}, [an](Node& n) {
    if (!an->requires_grad) return;
    an->grad_ref() +=
        (n.grad.array() * (1.0 - n.value.array().square())).matrix();
  });
}

inline Var exp(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().array().exp().matrix(), {a}, [an](Node& n) {
    if (an->requires_grad)
      an->grad_ref() += (n.grad.array() * n.value.array()).matrix();
  });
}

inline Var log(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().array().log().matrix(), {a}, [an](Node& n) {
    if (an->requires_grad)
      an->grad_ref() += (n.grad.array() / an->value.array()).matrix();
  });
}

inline Var sqrt(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().array().sqrt().matrix(), {a}, [an](Node& n) {
    if (an->requires_grad)
      an->grad_ref() += (n.grad.array() / (2.0 * n.value.array())).matrix();
  });
}

inline Var sin(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().array().sin().matrix(), {a}, [an](Node& n) {
    if (an->requires_grad)
      an->grad_ref() += (n.grad.array() * an->value.array().cos()).matrix();
  });
}

inline Var cos(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().array().cos().matrix(), {a}, [an](Node& n) {
    if (an->requires_grad)
      an->grad_ref() -= (n.grad.array() * an->value.array().sin()).matrix();
  });
}

/// Elementwise atan2(y, x).
inline Var atan2(const Var& y, const Var& x) {
  Mat v(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j)
      v(i, j) = std::atan2(y.value()(i, j), x.value()(i, j));
  auto yn = y.node(), xn = x.node();
  return detail::make_op(std::move(v), {y, x}, [yn, xn](Node& n) {
    const auto denom =
        (xn->value.array().square() + yn->value.array().square()).eval();
    if (yn->requires_grad)
      yn->grad_ref() += (n.grad.array() * xn->value.array() / denom).matrix();
    if (xn->requires_grad)
      xn->grad_ref() -= (n.grad.array() * yn->value.array() / denom).matrix();
  });
}

/// Numerically stable log(1 + e^x); gradient is sigmoid(x).
inline Var softplus(const Var& a) {
  Mat v(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      const double x = a.value()(i, j);
      v(i, j) = x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
    }
  auto an = a.node();
  return detail::make_op(std::move(v), {a}, [an](Node& n) {
    if (!an->requires_grad) return;
    an->grad_ref() +=
        (n.grad.array() / (1.0 + (-an->value.array()).exp())).matrix();
  });
}

inline Var pow_const(const Var& a, double p) {
  auto an = a.node();
  return detail::make_op(a.value().array().pow(p).matrix(), {a},
                         [an, p](Node& n) {
                           if (!an->requires_grad) return;
                           an->grad_ref() +=
                               (n.grad.array() * p *
                                an->value.array().pow(p - 1.0))
                                   .matrix();
                         });
}

/// Elementwise max(a, c); subgradient 0 at the tie.
inline Var clamp_min(const Var& a, double c) {
  auto an = a.node();
  return detail::make_op(a.value().cwiseMax(c), {a}, [an, c](Node& n) {
    if (!an->requires_grad) return;
    an->grad_ref() +=
        (an->value.array() > c).select(n.grad.array(), 0.0).matrix();
  });
}

/// Elementwise smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
inline Var smooth_l1(const Var& a) {
  Mat v(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      const double x = a.value()(i, j);
      v(i, j) = std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
    }
  auto an = a.node();
  return detail::make_op(std::move(v), {a}, [an](Node& n) {
    if (!an->requires_grad) return;
    an->grad_ref() +=
        (n.grad.array() * an->value.array().max(-1.0).min(1.0)).matrix();
  });
}

/// Wrap angles to [-pi, pi); gradient passes through unchanged.
inline Var wrap_angle(const Var& a) {
  Mat v(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      const double t = a.value()(i, j);
      const double pi = 3.14159265358979323846;
      double x = t;
      if (!(x >= -pi && x < pi)) {
        x = std::fmod(x + pi, 2.0 * pi);
        if (x < 0.0) x += 2.0 * pi;
        x -= pi;
      }
      v(i, j) = x;
    }
  auto an = a.node();
  return detail::make_op(std::move(v), {a}, [an](Node& n) {
    if (an->requires_grad) an->grad_ref() += n.grad;
  });
}

// ---------------------------------------------------------------------------
// Reductions, reshaping, indexing
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  auto an = a.node();
  return detail::make_op(Mat::Constant(1, 1, a.value().sum()), {a},
                         [an](Node& n) {
                           if (an->requires_grad)
                             an->grad_ref().array() += n.grad(0, 0);
                         });
}

inline Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.rows() * a.cols()));
}

/// Row sums: (n x m) -> (n x 1).
inline Var sum_rowwise(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().rowwise().sum(), {a}, [an](Node& n) {
    if (!an->requires_grad) return;
    an->grad_ref() += n.grad * Mat::Ones(1, an->value.cols());
  });
}

/// Column sums: (n x m) -> (1 x m).
inline Var sum_colwise(const Var& a) {
  auto an = a.node();
  return detail::make_op(a.value().colwise().sum(), {a}, [an](Node& n) {
    if (!an->requires_grad) return;
    an->grad_ref() += Mat::Ones(an->value.rows(), 1) * n.grad;
  });
}

inline Var block(const Var& a, Eigen::Index r0, Eigen::Index c0,
                 Eigen::Index nr, Eigen::Index nc) {
  auto an = a.node();
  return detail::make_op(a.value().block(r0, c0, nr, nc), {a},
                         [an, r0, c0, nr, nc](Node& n) {
                           if (an->requires_grad)
                             an->grad_ref().block(r0, c0, nr, nc) += n.grad;
                         });
}

inline Var at(const Var& a, Eigen::Index i, Eigen::Index j) {
  return block(a, i, j, 1, 1);
}

inline Var rows(const Var& a, Eigen::Index r0, Eigen::Index nr) {
  return block(a, r0, 0, nr, a.cols());
}

inline Var cols(const Var& a, Eigen::Index c0, Eigen::Index nc) {
  return block(a, 0, c0, a.rows(), nc);
}

inline Var concat_rows(const std::vector<Var>& parts) {
  Eigen::Index total = 0;
  const Eigen::Index c = parts.front().cols();
  for (const auto& p : parts) total += p.rows();
  Mat v(total, c);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->id = next_node_id();
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    for (const auto& p : parts) n->parents.push_back(p.node());
    std::vector<std::shared_ptr<Node>> ps = n->parents;
    n->backward = [ps](Node& nd) {
      Eigen::Index r = 0;
      for (const auto& p : ps) {
        if (p->requires_grad)
          p->grad_ref() += nd.grad.middleRows(r, p->value.rows());
        r += p->value.rows();
      }
    };
  }
  return Var(std::move(n));
}

inline Var concat_cols(const std::vector<Var>& parts) {
  std::vector<Var> t;
  t.reserve(parts.size());
  for (const auto& p : parts) t.push_back(transpose(p));
  return transpose(concat_rows(t));
}

/// out.row(i) = a.row(idx[i]); duplicate indices accumulate on backward.
inline Var gather_rows(const Var& a, std::vector<Eigen::Index> idx) {
  Mat v(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) v.row(i) = a.value().row(idx[i]);
  auto an = a.node();
  return detail::make_op(std::move(v), {a}, [an, idx](Node& n) {
    if (!an->requires_grad) return;
    Mat& g = an->grad_ref();
    for (std::size_t i = 0; i < idx.size(); ++i)
      g.row(idx[i]) += n.grad.row(i);
  });
}

/// out(r, 0) = a(row_idx[r], col_idx[r]).
inline Var gather_elems(const Var& a, std::vector<Eigen::Index> row_idx,
                        std::vector<Eigen::Index> col_idx) {
  const auto n_out = static_cast<Eigen::Index>(row_idx.size());
  Mat v(n_out, 1);
  for (Eigen::Index i = 0; i < n_out; ++i)
    v(i, 0) = a.value()(row_idx[i], col_idx[i]);
  auto an = a.node();
  return detail::make_op(std::move(v), {a}, [an, row_idx, col_idx](Node& n) {
    if (!an->requires_grad) return;
    Mat& g = an->grad_ref();
    for (std::size_t i = 0; i < row_idx.size(); ++i)
      g(row_idx[i], col_idx[i]) += n.grad(i, 0);
  });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Row-wise softmax restricted to allowed entries; disallowed entries are
/// exactly 0 and never read, so masked tokens cannot leak into the result
/// even at the last bit.
inline Var softmax_masked_rows(const Var& a, const BoolArr& allowed) {
  const Eigen::Index nr = a.rows(), nc = a.cols();
  Mat v = Mat::Zero(nr, nc);
  for (Eigen::Index i = 0; i < nr; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < nc; ++j)
      if (allowed(i, j)) m = std::max(m, a.value()(i, j));
    if (!std::isfinite(m)) continue;  // fully masked row stays zero
    double denom = 0.0;
    for (Eigen::Index j = 0; j < nc; ++j)
      if (allowed(i, j)) denom += std::exp(a.value()(i, j) - m);
    for (Eigen::Index j = 0; j < nc; ++j)
      if (allowed(i, j)) v(i, j) = std::exp(a.value()(i, j) - m) / denom;
  }
  auto an = a.node();
  return detail::make_op(std::move(v), {a}, [an, allowed](Node& n) {
    if (!an->requires_grad) return;
    Mat& g = an->grad_ref();
    for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
      double dot = 0.0;
      for (Eigen::Index j = 0; j < n.value.cols(); ++j)
        if (allowed(i, j)) dot += n.grad(i, j) * n.value(i, j);
      for (Eigen::Index j = 0; j < n.value.cols(); ++j)
        if (allowed(i, j))
          g(i, j) += n.value(i, j) * (n.grad(i, j) - dot);
    }
  });
}

inline Var softmax_rows(const Var& a) {
  return softmax_masked_rows(a, BoolArr::Constant(a.rows(), a.cols(), true));
}

/// Row-wise log(sum_j exp(a_ij)) -> (n x 1).
inline Var logsumexp_rows(const Var& a) {
  const Eigen::Index nr = a.rows();
  Mat v(nr, 1);
  for (Eigen::Index i = 0; i < nr; ++i) {
    const double m = a.value().row(i).maxCoeff();
    v(i, 0) = m + std::log((a.value().row(i).array() - m).exp().sum());
  }
  auto an = a.node();
  return detail::make_op(std::move(v), {a}, [an](Node& n) {
    if (!an->requires_grad) return;
    Mat& g = an->grad_ref();
    for (Eigen::Index i = 0; i < an->value.rows(); ++i) {
      const auto row = an->value.row(i).array();
      const double m = row.maxCoeff();
      const Eigen::ArrayXd e = (row - m).exp();
      g.row(i) += (n.grad(i, 0) * e / e.sum()).matrix();
    }
  });
}

// ---------------------------------------------------------------------------
// Structured ops: layer norm, convolution, bilinear sampling, attention mix
// ---------------------------------------------------------------------------

/// Per-row layer normalization with affine parameters gamma/beta (1 x d).
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                           double eps = 1e-5) {
  const Eigen::Index nr = x.rows(), nc = x.cols();
  Mat xhat(nr, nc);
  Eigen::VectorXd inv_std(nr);
  for (Eigen::Index i = 0; i < nr; ++i) {
    const double mu = x.value().row(i).mean();
    const double var =
        (x.value().row(i).array() - mu).square().sum() / static_cast<double>(nc);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu).matrix() * inv_std(i);
  }
  Mat v(nr, nc);
  for (Eigen::Index i = 0; i < nr; ++i)
    v.row(i) = xhat.row(i).cwiseProduct(gamma.value().row(0)) +
               beta.value().row(0);
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_op(
      std::move(v), {x, gamma, beta}, [xn, gn, bn, xhat, inv_std](Node& n) {
        const Eigen::Index nr = n.value.rows(), nc = n.value.cols();
        if (gn->requires_grad)
          gn->grad_ref() += n.grad.cwiseProduct(xhat).colwise().sum();
        if (bn->requires_grad) bn->grad_ref() += n.grad.colwise().sum();
        if (!xn->requires_grad) return;
        Mat& gx = xn->grad_ref();
        const double inv_n = 1.0 / static_cast<double>(nc);
        for (Eigen::Index i = 0; i < nr; ++i) {
          // dL/dxhat for this row
          const Eigen::RowVectorXd dxhat =
              n.grad.row(i).cwiseProduct(gn->value.row(0));
          const double s1 = dxhat.sum();
          const double s2 = dxhat.cwiseProduct(xhat.row(i)).sum();
          gx.row(i) += inv_std(i) *
                       (dxhat.array() - inv_n * s1 -
                        xhat.row(i).array() * inv_n * s2)
                           .matrix();
        }
      });
}

/// 2D convolution over a feature map stored channels-by-pixels: x is
/// (c_in, h*w) with column index y*w + x. Zero padding. Returns
/// (c_out, h_out*w_out) with h_out = (h + 2*pad - kh) / stride + 1.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int h,
                  int w, int kh, int kw, int stride, int pad) {
  const Eigen::Index cin = x.rows();
  const Eigen::Index cout = weight.rows();
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;
  auto col = std::make_shared<Mat>(Mat::Zero(cin * kh * kw, ho * wo));
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index out_idx = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          col->block((static_cast<Eigen::Index>(ky) * kw + kx) * cin, out_idx,
                     cin, 1) =
              x.value().col(static_cast<Eigen::Index>(iy) * w + ix);
        }
      }
    }
  }
  Mat v = weight.value() * (*col);
  v.colwise() += bias.value().col(0);
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return detail::make_op(
      std::move(v), {x, weight, bias},
      [xn, wn, bn, col, h, w, kh, kw, stride, pad, ho, wo, cin,
       cout](Node& n) {
        if (bn->requires_grad) bn->grad_ref() += n.grad.rowwise().sum();
        if (wn->requires_grad) wn->grad_ref() += n.grad * col->transpose();
        if (!xn->requires_grad) return;
        const Mat dcol = wn->value.transpose() * n.grad;
        Mat& gx = xn->grad_ref();
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const Eigen::Index out_idx =
                static_cast<Eigen::Index>(oy) * wo + ox;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                gx.col(static_cast<Eigen::Index>(iy) * w + ix) +=
                    dcol.block(
                        (static_cast<Eigen::Index>(ky) * kw + kx) * cin,
                        out_idx, cin, 1);
              }
            }
          }
        }
      });
}

/// Bilinear sampling of a feature map (c, h*w) at continuous cell
/// coordinates px, py (p x 1 each, in units of cells, (0,0) = center of cell
/// (0,0)). Out-of-range taps read zero. Returns (c, p). Gradients flow to the
/// map and to the coordinates.
inline Var bilinear_sample(const Var& map, const Var& px, const Var& py,
                           int h, int w) {
  const Eigen::Index c = map.rows();
  const Eigen::Index p = px.rows();
  Mat v = Mat::Zero(c, p);
  for (Eigen::Index k = 0; k < p; ++k) {
    const double x = px.value()(k, 0);
    const double y = py.value()(k, 0);
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    for (int dy = 0; dy <= 1; ++dy) {
      const int yy = y0 + dy;
      if (yy < 0 || yy >= h) continue;
      const double wy = dy == 0 ? 1.0 - fy : fy;
      for (int dx = 0; dx <= 1; ++dx) {
        const int xx = x0 + dx;
        if (xx < 0 || xx >= w) continue;
        const double wx = dx == 0 ? 1.0 - fx : fx;
        v.col(k) += wy * wx * map.value().col(static_cast<Eigen::Index>(yy) * w + xx);
      }
    }
  }
  auto mn = map.node(), xn = px.node(), yn = py.node();
  return detail::make_op(
      std::move(v), {map, px, py}, [mn, xn, yn, h, w](Node& n) {
        const Eigen::Index p = xn->value.rows();
        for (Eigen::Index k = 0; k < p; ++k) {
          const double x = xn->value(k, 0);
          const double y = yn->value(k, 0);
          const int x0 = static_cast<int>(std::floor(x));
          const int y0 = static_cast<int>(std::floor(y));
          const double fx = x - x0, fy = y - y0;
          double gx_acc = 0.0, gy_acc = 0.0;
          for (int dy = 0; dy <= 1; ++dy) {
            const int yy = y0 + dy;
            if (yy < 0 || yy >= h) continue;
            const double wy = dy == 0 ? 1.0 - fy : fy;
            const double dwy = dy == 0 ? -1.0 : 1.0;
            for (int dx = 0; dx <= 1; ++dx) {
              const int xx = x0 + dx;
              if (xx < 0 || xx >= w) continue;
              const double wx = dx == 0 ? 1.0 - fx : fx;
              const double dwx = dx == 0 ? -1.0 : 1.0;
              const Eigen::Index col = static_cast<Eigen::Index>(yy) * w + xx;
              const double dot = n.grad.col(k).dot(mn->value.col(col));
              if (mn->requires_grad)
                mn->grad_ref().col(col) += wy * wx * n.grad.col(k);
              gx_acc += wy * dwx * dot;
              gy_acc += dwy * wx * dot;
            }
          }
          if (xn->requires_grad) xn->grad_ref()(k, 0) += gx_acc;
          if (yn->requires_grad) yn->grad_ref()(k, 0) += gy_acc;
        }
      });
}

/// Head-wise weighted mix of sampled values. sampled is (d, n*p) with the
/// p taps of token t in columns [t*p, (t+1)*p); attn is (n, heads*p),
/// already softmaxed per head. Output (n, d) where the rows of head g
/// (d/heads of them) mix that head's slice of the taps.
inline Var attn_combine(const Var& sampled, const Var& attn, int heads,
                        int taps) {
  const Eigen::Index d = sampled.rows();
  const Eigen::Index n = attn.rows();
  const Eigen::Index dh = d / heads;
  Mat v = Mat::Zero(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    for (int g = 0; g < heads; ++g) {
      for (int p = 0; p < taps; ++p) {
        const double a = attn.value()(t, static_cast<Eigen::Index>(g) * taps + p);
        v.row(t).segment(g * dh, dh) +=
            a * sampled.value().col(t * taps + p).segment(g * dh, dh).transpose();
      }
    }
  }
  auto sn = sampled.node(), an = attn.node();
  return detail::make_op(
      std::move(v), {sampled, attn}, [sn, an, heads, taps, dh](Node& nd) {
        const Eigen::Index n = an->value.rows();
        for (Eigen::Index t = 0; t < n; ++t) {
          for (int g = 0; g < heads; ++g) {
            for (int p = 0; p < taps; ++p) {
              const Eigen::Index ac = static_cast<Eigen::Index>(g) * taps + p;
              const Eigen::Index sc = t * taps + p;
              const auto gseg = nd.grad.row(t).segment(g * dh, dh);
              if (an->requires_grad)
                an->grad_ref()(t, ac) +=
                    gseg.dot(sn->value.col(sc).segment(g * dh, dh));
              if (sn->requires_grad)
                sn->grad_ref().col(sc).segment(g * dh, dh) +=
                    an->value(t, ac) * gseg.transpose();
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Scalar wrapper for templated geometry
// ---------------------------------------------------------------------------

/// 1x1 Var with value-style operators, so geometry templates can run under
/// autodiff. Implicit from double (constant).
class Scalar {
 public:
  Scalar() : v_(Var::scalar(0.0)) {}
  Scalar(double c) : v_(Var::scalar(c)) {}  // NOLINT: implicit by design
  explicit Scalar(Var v) : v_(std::move(v)) {}

  const Var& var() const { return v_; }
  double value() const { return v_.item(); }

  friend Scalar operator+(const Scalar& a, const Scalar& b) {
    return Scalar(add(a.v_, b.v_));
  }
  friend Scalar operator-(const Scalar& a, const Scalar& b) {
    return Scalar(sub(a.v_, b.v_));
  }
  friend Scalar operator*(const Scalar& a, const Scalar& b) {
    return Scalar(mul(a.v_, b.v_));
  }
  friend Scalar operator/(const Scalar& a, const Scalar& b) {
    return Scalar(div(a.v_, b.v_));
  }
  Scalar operator-() const { return Scalar(neg(v_)); }

  friend Scalar sin(const Scalar& a) { return Scalar(ag::sin(a.v_)); }
  friend Scalar cos(const Scalar& a) { return Scalar(ag::cos(a.v_)); }
  friend Scalar sqrt(const Scalar& a) { return Scalar(ag::sqrt(a.v_)); }
  friend Scalar exp(const Scalar& a) { return Scalar(ag::exp(a.v_)); }
  friend Scalar log(const Scalar& a) { return Scalar(ag::log(a.v_)); }
  friend Scalar atan2(const Scalar& y, const Scalar& x) {
    return Scalar(ag::atan2(y.v_, x.v_));
  }

  friend double scalar_value(const Scalar& s) { return s.value(); }

 private:
  Var v_;
};

}  // namespace qcdet::ag
