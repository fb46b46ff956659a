#pragma once

// Reverse-mode differentiation over Tensor4 values.
//
// Every op returns a Var holding its value and, when any input requires a
// gradient, a closure that pushes the output gradient back to its inputs.
// backward() runs the closures in reverse topological order exactly once.

#include "moex/norm_scheme.hpp"
#include "moex/tensor.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace moex {

template <typename Scalar>
struct Node {
  Tensor4<Scalar> value;
  Tensor4<Scalar> grad;  // empty until something flows in
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor4<Scalar>& grad_buffer() {
    if (grad.size() != value.size() || !(grad.shape() == value.shape())) grad = Tensor4<Scalar>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }
};

template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  /// A graph leaf. Parameters are leaves with requires_grad = true.
  static Var leaf(Tensor4<Scalar> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor4<Scalar> value) { return leaf(std::move(value), false); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor4<Scalar>& value() const { return node_->value; }
  Tensor4<Scalar>& mutable_value() { return node_->value; }
  const Shape4& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient; zeros of the value's shape when nothing has flowed in.
  Tensor4<Scalar> grad() const { return node_->has_grad() ? node_->grad : Tensor4<Scalar>(shape()); }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.set_zero();
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {
inline thread_local bool grad_enabled = true;
}  // namespace detail

/// Disables graph recording on this thread for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename Scalar>
Var<Scalar> make_result(Tensor4<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                        std::function<void(Node<Scalar>&)> backward_fn) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  if (grad_enabled) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) n->requires_grad = true;
    }
  }
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<Scalar>(std::move(n));
}

template <typename Scalar>
bool wants(const std::shared_ptr<Node<Scalar>>& n) {
  return n && n->requires_grad;
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar root into every reachable leaf.
template <typename Scalar>
void backward(Var<Scalar>& root) {
  auto r = root.node();
  if (!r) throw std::invalid_argument("backward: undefined root");
  if (r->value.size() != 1) throw ShapeError("backward: root must be a scalar, got " + r->value.shape().str());
  if (r->consumed) throw std::logic_error("backward: graph already consumed; re-run the forward pass");
  if (!r->requires_grad) {
    r->consumed = true;
    return;
  }

  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{r.get(), 0}};
  seen.insert(r.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  r->grad_buffer().array().setOnes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
  // Intermediate buffers are released; leaves keep their accumulated gradients.
  for (Node<Scalar>* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->grad = Tensor4<Scalar>();
      n->consumed = true;
    }
  }
  r->consumed = true;
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_shape(a.shape() == b.shape(), "add", a.shape(), b.shape());
  Tensor4<Scalar> out(a.shape());
  out.array() = a.value().array() + b.value().array();
  auto an = a.node(), bn = b.node();
  return detail::make_result<Scalar>(std::move(out), {a, b}, [an, bn](Node<Scalar>& self) {
    if (detail::wants(an)) an->grad_buffer().array() += self.grad.array();
    if (detail::wants(bn)) bn->grad_buffer().array() += self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_shape(a.shape() == b.shape(), "sub", a.shape(), b.shape());
  Tensor4<Scalar> out(a.shape());
  out.array() = a.value().array() - b.value().array();
  auto an = a.node(), bn = b.node();
  return detail::make_result<Scalar>(std::move(out), {a, b}, [an, bn](Node<Scalar>& self) {
    if (detail::wants(an)) an->grad_buffer().array() += self.grad.array();
    if (detail::wants(bn)) bn->grad_buffer().array() -= self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_shape(a.shape() == b.shape(), "mul", a.shape(), b.shape());
  Tensor4<Scalar> out(a.shape());
  out.array() = a.value().array() * b.value().array();
  auto an = a.node(), bn = b.node();
  return detail::make_result<Scalar>(std::move(out), {a, b}, [an, bn](Node<Scalar>& self) {
    if (detail::wants(an)) an->grad_buffer().array() += self.grad.array() * bn->value.array();
    if (detail::wants(bn)) bn->grad_buffer().array() += self.grad.array() * an->value.array();
  });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_shape(a.shape() == b.shape(), "div", a.shape(), b.shape());
  Tensor4<Scalar> out(a.shape());
  out.array() = a.value().array() / b.value().array();
  auto an = a.node(), bn = b.node();
  return detail::make_result<Scalar>(std::move(out), {a, b}, [an, bn](Node<Scalar>& self) {
    const auto& bv = bn->value.array();
    if (detail::wants(an)) an->grad_buffer().array() += self.grad.array() / bv;
    if (detail::wants(bn)) bn->grad_buffer().array() -= self.grad.array() * an->value.array() / (bv * bv);
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar s) {
  Tensor4<Scalar> out(x.shape());
  out.array() = x.value().array() * s;
  auto xn = x.node();
  return detail::make_result<Scalar>(std::move(out), {x}, [xn, s](Node<Scalar>& self) {
    xn->grad_buffer().array() += self.grad.array() * s;
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& x, Scalar s) {
  Tensor4<Scalar> out(x.shape());
  out.array() = x.value().array() + s;
  auto xn = x.node();
  return detail::make_result<Scalar>(std::move(out), {x}, [xn](Node<Scalar>& self) {
    xn->grad_buffer().array() += self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& x) {
  Tensor4<Scalar> out(x.shape());
  out.array() = x.value().array().sqrt();
  auto xn = x.node();
  return detail::make_result<Scalar>(std::move(out), {x}, [xn](Node<Scalar>& self) {
    xn->grad_buffer().array() += self.grad.array() * Scalar(0.5) / self.value.array();
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor4<Scalar> out(x.shape());
  out.array() = x.value().array().max(Scalar(0));
  auto xn = x.node();
  return detail::make_result<Scalar>(std::move(out), {x}, [xn](Node<Scalar>& self) {
    xn->grad_buffer().array() += (xn->value.array() > Scalar(0)).select(self.grad.array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  auto xn = x.node();
  return detail::make_result<Scalar>(Tensor4<Scalar>::scalar(x.value().array().sum()), {x},
                                     [xn](Node<Scalar>& self) {
                                       xn->grad_buffer().array() += self.grad[0];
                                     });
}

/// (N,C,H,W) -> (N,C,1,1), averaging each plane.
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const Shape4 s = x.shape();
  if (s.plane() == 0) throw ShapeError("global_avg_pool: empty spatial extent " + s.str());
  Tensor4<Scalar> out(s.n, s.c, 1, 1);
  auto planes = x.value().matrix(s.n * s.c, s.plane());
  out.array() = planes.rowwise().mean().array();
  auto xn = x.node();
  return detail::make_result<Scalar>(std::move(out), {x}, [xn, s](Node<Scalar>& self) {
    auto g = xn->grad_buffer().matrix(s.n * s.c, s.plane());
    const Scalar inv = Scalar(1) / Scalar(s.plane());
    for (Index r = 0; r < s.n * s.c; ++r) g.row(r).array() += self.grad[r] * inv;
  });
}

/// x viewed as (N,D) times W (D,K,1,1) plus b (1,K,1,1) -> (N,K,1,1).
template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  const Shape4 xs = x.shape();
  const Index n = xs.n, d = xs.instance();
  const Index k = w.shape().c;
  if (w.shape().n != d || w.shape().plane() != 1) {
    throw ShapeError("affine: input " + xs.str() + " flattens to D=" + std::to_string(d) +
                     " but weight is " + w.shape().str());
  }
  if (b.defined() && b.value().size() != k) {
    throw ShapeError("affine: bias " + b.shape().str() + " does not match K=" + std::to_string(k));
  }
  Tensor4<Scalar> out(n, k, 1, 1);
  out.matrix(n, k).noalias() = x.value().matrix(n, d) * w.value().matrix(d, k);
  if (b.defined()) out.matrix(n, k).rowwise() += b.value().matrix(1, k).row(0);
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return detail::make_result<Scalar>(std::move(out), {x, w, b}, [xn, wn, bn, n, d, k](Node<Scalar>& self) {
    auto g = self.grad.matrix(n, k);
    if (detail::wants(xn)) xn->grad_buffer().matrix(n, d).noalias() += g * wn->value.matrix(d, k).transpose();
    if (detail::wants(wn)) wn->grad_buffer().matrix(d, k).noalias() += xn->value.matrix(n, d).transpose() * g;
    if (detail::wants(bn)) bn->grad_buffer().matrix(1, k).row(0) += g.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip)

struct ConvGeometry {
  Index cin, h, w, kh, kw, stride, pad, ho, wo;

  static ConvGeometry make(const Shape4& x, const Shape4& k, Index stride, Index pad) {
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
    require_shape(k.c == x.c, "conv2d (Cin)", x, k);
    ConvGeometry g{x.c, x.h, x.w, k.h, k.w, stride, pad, 0, 0};
    g.ho = (x.h + 2 * pad - k.h) / stride + 1;
    g.wo = (x.w + 2 * pad - k.w) / stride + 1;
    if (x.h + 2 * pad < k.h || x.w + 2 * pad < k.w) require_shape(false, "conv2d (kernel larger than input)", x, k);
    return g;
  }
  Index rows() const { return cin * kh * kw; }
  Index cols() const { return ho * wo; }
};

namespace detail {

template <typename Scalar, typename Mat>
void im2col(const Scalar* img, const ConvGeometry& g, Mat& col) {
  Index r = 0;
  for (Index c = 0; c < g.cin; ++c) {
    const Scalar* plane = img + c * g.h * g.w;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j, ++r) {
        Scalar* dst = col.row(r).data();
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index y = oy * g.stride - g.pad + i;
          Scalar* d = dst + oy * g.wo;
          if (y < 0 || y >= g.h) {
            std::fill(d, d + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = plane + y * g.w;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index x = ox * g.stride - g.pad + j;
            d[ox] = (x >= 0 && x < g.w) ? src[x] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar, typename Mat>
void col2im_add(const Mat& col, const ConvGeometry& g, Scalar* img) {
  Index r = 0;
  for (Index c = 0; c < g.cin; ++c) {
    Scalar* plane = img + c * g.h * g.w;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j, ++r) {
        const Scalar* src = col.row(r).data();
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index y = oy * g.stride - g.pad + i;
          if (y < 0 || y >= g.h) continue;
          Scalar* dst = plane + y * g.w;
          const Scalar* s = src + oy * g.wo;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index x = ox * g.stride - g.pad + j;
            if (x >= 0 && x < g.w) dst[x] += s[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of x (N,Cin,H,W) with w (Cout,Cin,kH,kW); b is (1,Cout,1,1) or undefined.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b, Index stride, Index pad) {
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Shape4 xs = x.shape(), ks = w.shape();
  const ConvGeometry g = ConvGeometry::make(xs, ks, stride, pad);
  const Index cout = ks.n;
  if (b.defined() && b.value().size() != cout) {
    throw ShapeError("conv2d: bias " + b.shape().str() + " does not match Cout=" + std::to_string(cout));
  }
  Tensor4<Scalar> out(xs.n, cout, g.ho, g.wo);
  RowMat col(g.rows(), g.cols());
  const auto wm = w.value().matrix(cout, g.rows());
  for (Index n = 0; n < xs.n; ++n) {
    detail::im2col(x.value().data() + n * xs.instance(), g, col);
    Eigen::Map<RowMat> o(out.data() + n * cout * g.cols(), cout, g.cols());
    o.noalias() = wm * col;
    if (b.defined()) o.colwise() += b.value().array().matrix();
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return detail::make_result<Scalar>(std::move(out), {x, w, b}, [xn, wn, bn, g, xs, cout](Node<Scalar>& self) {
    RowMat col(g.rows(), g.cols());
    RowMat dcol;
    const auto wm = wn->value.matrix(cout, g.rows());
    const bool gx = detail::wants(xn), gw = detail::wants(wn), gb = detail::wants(bn);
    Scalar* dx = gx ? xn->grad_buffer().data() : nullptr;
    Scalar* dw = gw ? wn->grad_buffer().data() : nullptr;
    for (Index n = 0; n < xs.n; ++n) {
      Eigen::Map<const RowMat> go(self.grad.data() + n * cout * g.cols(), cout, g.cols());
      if (gw) {
        detail::im2col(xn->value.data() + n * xs.instance(), g, col);
        Eigen::Map<RowMat>(dw, cout, g.rows()).noalias() += go * col.transpose();
      }
      if (gx) {
        dcol.noalias() = wm.transpose() * go;
        detail::col2im_add(dcol, g, dx + n * xs.instance());
      }
      if (gb) bn->grad_buffer().array() += go.rowwise().sum().array();
    }
  });
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, Index stride, Index pad) {
  return conv2d(x, w, Var<Scalar>(), stride, pad);
}

// ---------------------------------------------------------------------------
// Inter-instance (batch) normalization

template <typename Scalar>
struct BatchNormState {
  Tensor4<Scalar> running_mean;
  Tensor4<Scalar> running_var;
  long updates = 0;
  bool warned = false;

  BatchNormState() = default;
  explicit BatchNormState(Index channels)
      : running_mean(Shape4{1, channels, 1, 1}, Scalar(0)), running_var(Shape4{1, channels, 1, 1}, Scalar(1)) {}
};

enum class Mode { Train, Eval };

void log_warning(const std::string& message);

inline constexpr double kBatchNormEps = 1e-5;

/// Per-channel normalization over (N,H,W); gamma and beta are (1,C,1,1).
/// Train mode uses batch statistics and folds them into the running EMA
/// (unbiased variance); eval mode uses the running statistics.
template <typename Scalar>
Var<Scalar> batchnorm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                      BatchNormState<Scalar>& state, Mode mode, Scalar momentum = Scalar(0.1),
                      Scalar eps = Scalar(kBatchNormEps)) {
  const Shape4 s = x.shape();
  if (gamma.value().size() != s.c || beta.value().size() != s.c) {
    throw ShapeError("batchnorm: affine parameters " + gamma.shape().str() + " do not match input " + s.str());
  }
  if (state.running_mean.size() != s.c) state = BatchNormState<Scalar>(s.c);
  const Index count = s.n * s.plane();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean(s.c), inv_std(s.c);
  if (mode == Mode::Train) {
    if (count < 2) throw std::invalid_argument("batchnorm: train mode needs N*H*W >= 2, input " + s.str());
    mean.setZero();
    Eigen::Array<Scalar, Eigen::Dynamic, 1> var = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(s.c);
    auto planes = x.value().matrix(s.n * s.c, s.plane());
    for (Index n = 0; n < s.n; ++n)
      for (Index c = 0; c < s.c; ++c) mean[c] += planes.row(n * s.c + c).sum();
    mean /= Scalar(count);
    for (Index n = 0; n < s.n; ++n)
      for (Index c = 0; c < s.c; ++c) var[c] += (planes.row(n * s.c + c).array() - mean[c]).square().sum();
    var /= Scalar(count);
    inv_std = (var + eps).rsqrt();
    const Scalar unbias = Scalar(count) / Scalar(count - 1);
    state.running_mean.array() = (Scalar(1) - momentum) * state.running_mean.array() + momentum * mean;
    state.running_var.array() = (Scalar(1) - momentum) * state.running_var.array() + momentum * var * unbias;
    ++state.updates;
  } else {
    if (state.updates == 0 && !state.warned) {
      log_warning("batchnorm: eval before any train update; using initial running statistics");
      state.warned = true;
    }
    mean = state.running_mean.array();
    inv_std = (state.running_var.array() + eps).rsqrt();
  }

  Tensor4<Scalar> xhat(s);
  Tensor4<Scalar> out(s);
  {
    auto xin = x.value().matrix(s.n * s.c, s.plane());
    auto xh = xhat.matrix(s.n * s.c, s.plane());
    auto o = out.matrix(s.n * s.c, s.plane());
    for (Index n = 0; n < s.n; ++n) {
      for (Index c = 0; c < s.c; ++c) {
        const Index r = n * s.c + c;
        xh.row(r).array() = (xin.row(r).array() - mean[c]) * inv_std[c];
        o.row(r).array() = xh.row(r).array() * gamma.value()[c] + beta.value()[c];
      }
    }
  }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  const bool train = mode == Mode::Train;
  return detail::make_result<Scalar>(
      std::move(out), {x, gamma, beta},
      [xn, gn, bn, s, count, train, inv_std, xhat = std::move(xhat)](Node<Scalar>& self) {
        auto dy = self.grad.matrix(s.n * s.c, s.plane());
        auto xh = xhat.matrix(s.n * s.c, s.plane());
        Eigen::Array<Scalar, Eigen::Dynamic, 1> sum_dy = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(s.c);
        Eigen::Array<Scalar, Eigen::Dynamic, 1> sum_dy_xh = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(s.c);
        for (Index n = 0; n < s.n; ++n) {
          for (Index c = 0; c < s.c; ++c) {
            const Index r = n * s.c + c;
            sum_dy[c] += dy.row(r).sum();
            sum_dy_xh[c] += (dy.row(r).array() * xh.row(r).array()).sum();
          }
        }
        if (detail::wants(gn)) gn->grad_buffer().array() += sum_dy_xh;
        if (detail::wants(bn)) bn->grad_buffer().array() += sum_dy;
        if (!detail::wants(xn)) return;
        auto dx = xn->grad_buffer().matrix(s.n * s.c, s.plane());
        const auto& gam = gn->value;
        for (Index n = 0; n < s.n; ++n) {
          for (Index c = 0; c < s.c; ++c) {
            const Index r = n * s.c + c;
            const Scalar k = gam[c] * inv_std[c];
            if (train) {
              const Scalar inv_count = Scalar(1) / Scalar(count);
              dx.row(r).array() +=
                  k * (dy.row(r).array() - sum_dy[c] * inv_count - xh.row(r).array() * sum_dy_xh[c] * inv_count);
            } else {
              dx.row(r).array() += k * dy.row(r).array();
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over the batch of -sum_k target * log softmax(logits). logits and
/// target are (N,K,1,1); every target row must be a probability vector.
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, const Tensor4<Scalar>& target) {
  const Shape4 s = logits.shape();
  require_shape(s == target.shape(), "softmax_cross_entropy", s, target.shape());
  const Index n = s.n, k = s.instance();
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  auto t = target.matrix(n, k);
  for (Index i = 0; i < n; ++i) {
    const double row_sum = static_cast<double>(t.row(i).sum());
    if ((t.row(i).array() < Scalar(0)).any() || std::abs(row_sum - 1.0) > 1e-6) {
      throw std::invalid_argument("softmax_cross_entropy: target row " + std::to_string(i) +
                                  " is not a probability vector (sum " + std::to_string(row_sum) + ")");
    }
  }
  auto z = logits.value().matrix(n, k);
  Tensor4<Scalar> probs(s);
  auto p = probs.matrix(n, k);
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar m = z.row(i).maxCoeff();
    const auto shifted = (z.row(i).array() - m).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    p.row(i).array() = (shifted - lse).exp();
    total -= (t.row(i).array() * (shifted - lse)).sum();
  }
  auto ln = logits.node();
  return detail::make_result<Scalar>(Tensor4<Scalar>::scalar(total / Scalar(n)), {logits},
                                     [ln, probs = std::move(probs), target, n, k](Node<Scalar>& self) {
                                       const Scalar g = self.grad[0] / Scalar(n);
                                       ln->grad_buffer().matrix(n, k).array() +=
                                           g * (probs.matrix(n, k).array() - target.matrix(n, k).array());
                                     });
}

// ---------------------------------------------------------------------------
// Moment-slice ops used by in-graph normalization

/// Mean of x over each slice of the scheme's reduction axes -> moment-shaped tensor.
template <typename Scalar>
Var<Scalar> slice_mean(const Var<Scalar>& x, const NormScheme& scheme) {
  const SliceLayout layout(scheme, x.shape());
  Tensor4<Scalar> out(layout.moment_shape());
  const auto& xv = x.value();
  layout.for_each([&](Index i, Index m) { out[m] += xv[i]; });
  const Scalar inv = Scalar(1) / Scalar(layout.slice_size());
  out.array() *= inv;
  auto xn = x.node();
  return detail::make_result<Scalar>(std::move(out), {x}, [xn, layout, inv](Node<Scalar>& self) {
    auto& g = xn->grad_buffer();
    layout.for_each([&](Index i, Index m) { g[i] += self.grad[m] * inv; });
  });
}

/// Expands a moment-shaped tensor back over its slices to the full input shape.
template <typename Scalar>
Var<Scalar> slice_broadcast(const Var<Scalar>& m, const NormScheme& scheme, const Shape4& full) {
  const SliceLayout layout(scheme, full);
  require_shape(layout.moment_shape() == m.shape(), "slice_broadcast", layout.moment_shape(), m.shape());
  Tensor4<Scalar> out(full);
  const auto& mv = m.value();
  layout.for_each([&](Index i, Index s) { out[i] = mv[s]; });
  auto mn = m.node();
  return detail::make_result<Scalar>(std::move(out), {m}, [mn, layout](Node<Scalar>& self) {
    auto& g = mn->grad_buffer();
    layout.for_each([&](Index i, Index s) { g[s] += self.grad[i]; });
  });
}

/// out[i] = x[perm[i]] along the batch axis.
template <typename Scalar>
Var<Scalar> batch_gather(const Var<Scalar>& x, std::span<const Index> perm) {
  const Shape4 s = x.shape();
  if (static_cast<Index>(perm.size()) != s.n) {
    throw ShapeError("batch_gather: permutation of length " + std::to_string(perm.size()) +
                     " for batch " + s.str());
  }
  Tensor4<Scalar> out(s);
  const Index inst = s.instance();
  for (Index i = 0; i < s.n; ++i) {
    if (perm[i] < 0 || perm[i] >= s.n) throw std::out_of_range("batch_gather: index out of range");
    out.array().segment(i * inst, inst) = x.value().array().segment(perm[i] * inst, inst);
  }
  std::vector<Index> p(perm.begin(), perm.end());
  auto xn = x.node();
  return detail::make_result<Scalar>(std::move(out), {x}, [xn, p = std::move(p), inst](Node<Scalar>& self) {
    auto& g = xn->grad_buffer();
    for (std::size_t i = 0; i < p.size(); ++i) {
      g.array().segment(p[i] * inst, inst) += self.grad.array().segment(static_cast<Index>(i) * inst, inst);
    }
  });
}

/// Concatenates along the channel axis.
template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape4 sa = a.shape(), sb = b.shape();
  require_shape(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w, "concat_channels", sa, sb);
  Tensor4<Scalar> out(sa.n, sa.c + sb.c, sa.h, sa.w);
  const Index ia = sa.instance(), ib = sb.instance();
  for (Index n = 0; n < sa.n; ++n) {
    out.array().segment(n * (ia + ib), ia) = a.value().array().segment(n * ia, ia);
    out.array().segment(n * (ia + ib) + ia, ib) = b.value().array().segment(n * ib, ib);
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result<Scalar>(std::move(out), {a, b}, [an, bn, sa, ia, ib](Node<Scalar>& self) {
    for (Index n = 0; n < sa.n; ++n) {
      if (detail::wants(an)) an->grad_buffer().array().segment(n * ia, ia) += self.grad.array().segment(n * (ia + ib), ia);
      if (detail::wants(bn))
        bn->grad_buffer().array().segment(n * ib, ib) += self.grad.array().segment(n * (ia + ib) + ia, ib);
    }
  });
}

}  // namespace moex
