#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dwgl/error.hpp"
#include "dwgl/tensor.hpp"

namespace dwgl {

/// Handle to a value recorded on a tape.
struct Var {
  std::size_t id = 0;
};

template <class T>
using GradientMap = std::map<std::string, BasicTensor<T>>;

/// Reverse-mode tape. Every primitive appends one node holding its output and
/// a backward rule; `backward` replays the rules in reverse recording order
/// and accumulates gradients additively.
template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var constant(TensorT value) { return push(std::move(value), "constant", {}, nullptr, {}); }

  Var parameter(std::string name, TensorT value) {
    return push(std::move(value), "parameter", {}, nullptr, std::move(name));
  }

  Var record(TensorT value, std::string_view op, std::vector<std::size_t> inputs, BackwardFn backward) {
    if (backward_done_) throw Error(ErrorKind::state, "cannot record on a tape after backward()");
    return push(std::move(value), op, std::move(inputs), std::move(backward), {});
  }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  std::string_view op(Var v) const { return nodes_.at(v.id).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const TensorT& grad(Var v) const {
    if (!backward_done_) throw Error(ErrorKind::state, "gradients requested before backward()");
    return nodes_.at(v.id).grad;
  }

  /// Mutable gradient slot, for use inside backward rules.
  TensorT& grad_slot(std::size_t id) { return nodes_[id].grad; }
  const TensorT& value_at(std::size_t id) const { return nodes_[id].value; }

  void backward(Var loss) {
    if (backward_done_) throw Error(ErrorKind::state, "backward() called twice on one tape");
    if (nodes_.at(loss.id).value.size() != 1) {
      throw Error(ErrorKind::shape, "backward() needs a scalar loss, got shape " +
                                        shape_string(nodes_[loss.id].value.shape()));
    }
    backward_done_ = true;
    for (auto& node : nodes_) node.grad = TensorT(node.value.shape());
    nodes_[loss.id].grad[0] = T{1};
    visit_order_.clear();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (!nodes_[i].backward) continue;
      visit_order_.push_back(i);
      nodes_[i].backward(*this, i);
    }
  }

  /// Node ids whose backward rule ran, in the order they ran.
  const std::vector<std::size_t>& visit_order() const noexcept { return visit_order_; }

  /// Gradient of every named parameter; unreachable ones are zero.
  GradientMap<T> parameter_grads() const {
    if (!backward_done_) throw Error(ErrorKind::state, "gradients requested before backward()");
    GradientMap<T> out;
    for (const auto& node : nodes_) {
      if (!node.name.empty()) out.emplace(node.name, node.grad);
    }
    return out;
  }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    std::string op;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string name;
  };

  Var push(TensorT value, std::string_view op, std::vector<std::size_t> inputs, BackwardFn backward,
           std::string name) {
    nodes_.push_back(Node{std::move(value), {}, std::string(op), std::move(inputs), std::move(backward),
                          std::move(name)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
  bool backward_done_ = false;
};

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Output positions o in [lo, hi) for which o*stride - pad + tap lands inside [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t tap,
                                                       std::size_t stride, std::size_t pad) {
  const long long s = static_cast<long long>(stride);
  const long long first = static_cast<long long>(pad) - static_cast<long long>(tap);
  long long lo = first <= 0 ? 0 : (first + s - 1) / s;
  const long long last = static_cast<long long>(in) - 1 + first;
  long long hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<long long>(hi, static_cast<long long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

/// Cross-correlation of input [B,Cin,H,W] with weight [K,Cin,kh,kw] plus bias [K].
template <class T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  const auto& x = tape.value(input);
  const auto& w = tape.value(weight);
  const auto& b = tape.value(bias);
  if (x.rank() != 4) throw Error(ErrorKind::shape, "conv2d: input rank must be 4, got " + shape_string(x.shape()));
  if (w.rank() != 4) throw Error(ErrorKind::shape, "conv2d: weight rank must be 4, got " + shape_string(w.shape()));
  if (stride < 1) throw Error(ErrorKind::range, "conv2d: stride must be >= 1");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t k = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    throw Error(ErrorKind::shape, "conv2d: input channels " + std::to_string(cin) + " vs weight channels " +
                                      std::to_string(w.dim(1)) + " (dim 1)");
  }
  if (b.rank() != 1 || b.dim(0) != k) {
    throw Error(ErrorKind::shape, "conv2d: bias shape " + shape_string(b.shape()) + " vs filters " +
                                      std::to_string(k) + " (dim 0)");
  }
  if (kh > h + 2 * pad) throw Error(ErrorKind::shape, "conv2d: kernel height exceeds padded input height (dim 2)");
  if (kw > wd + 2 * pad) throw Error(ErrorKind::shape, "conv2d: kernel width exceeds padded input width (dim 3)");

  const std::size_t oh = detail::conv_out_extent(h, kh, stride, pad);
  const std::size_t ow = detail::conv_out_extent(wd, kw, stride, pad);
  BasicTensor<T> y(Shape{batch, k, oh, ow});
  std::vector<double> acc(oh * ow);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t f = 0; f < k; ++f) {
      std::fill(acc.begin(), acc.end(), static_cast<double>(b[f]));
      for (std::size_t c = 0; c < cin; ++c) {
        const T* plane = &x.values()[((n * cin) + c) * h * wd];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const auto [oy0, oy1] = detail::valid_range(oh, h, ky, stride, pad);
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const auto [ox0, ox1] = detail::valid_range(ow, wd, kx, stride, pad);
            const double wv = w.at(f, c, ky, kx);
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const T* row = plane + (oy * stride + ky - pad) * wd;
              double* out = &acc[oy * ow];
              for (std::size_t ox = ox0; ox < ox1; ++ox) out[ox] += wv * row[ox * stride + kx - pad];
            }
          }
        }
      }
      T* dst = &y.values()[((n * k) + f) * oh * ow];
      for (std::size_t i = 0; i < oh * ow; ++i) dst[i] = static_cast<T>(acc[i]);
    }
  }

  return tape.record(std::move(y), "conv2d", {input.id, weight.id, bias.id},
                     [stride, pad](Tape<T>& t, std::size_t self) {
                       const auto& node_inputs = t.inputs(Var{self});
                       const std::size_t xi = node_inputs[0], wi = node_inputs[1], bi = node_inputs[2];
                       const auto& x = t.value_at(xi);
                       const auto& w = t.value_at(wi);
                       const auto& g = t.grad_slot(self);
                       const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
                       const std::size_t k = w.dim(0), kh = w.dim(2), kw = w.dim(3);
                       const std::size_t oh = g.dim(2), ow = g.dim(3);

                       auto& gb = t.grad_slot(bi);
                       for (std::size_t f = 0; f < k; ++f) {
                         double s = 0.0;
                         for (std::size_t n = 0; n < batch; ++n) {
                           const T* gp = &g.values()[((n * k) + f) * oh * ow];
                           for (std::size_t i = 0; i < oh * ow; ++i) s += gp[i];
                         }
                         gb[f] += static_cast<T>(s);
                       }

                       auto& gw = t.grad_slot(wi);
                       std::vector<double> cols(ow);
                       for (std::size_t f = 0; f < k; ++f) {
                         for (std::size_t c = 0; c < cin; ++c) {
                           for (std::size_t ky = 0; ky < kh; ++ky) {
                             const auto [oy0, oy1] = detail::valid_range(oh, h, ky, stride, pad);
                             for (std::size_t kx = 0; kx < kw; ++kx) {
                               const auto [ox0, ox1] = detail::valid_range(ow, wd, kx, stride, pad);
                               // Per-column partial sums keep the inner loop free of a
                               // serial reduction.
                               std::fill(cols.begin(), cols.end(), 0.0);
                               for (std::size_t n = 0; n < batch; ++n) {
                                 const T* plane = &x.values()[((n * cin) + c) * h * wd];
                                 const T* gp = &g.values()[((n * k) + f) * oh * ow];
                                 for (std::size_t oy = oy0; oy < oy1; ++oy) {
                                   const T* row = plane + (oy * stride + ky - pad) * wd;
                                   const T* grow = gp + oy * ow;
                                   for (std::size_t ox = ox0; ox < ox1; ++ox) {
                                     cols[ox] += static_cast<double>(grow[ox]) * row[ox * stride + kx - pad];
                                   }
                                 }
                               }
                               double s = 0.0;
                               for (double v : cols) s += v;
                               gw.at(f, c, ky, kx) += static_cast<T>(s);
                             }
                           }
                         }
                       }

                       auto& gx = t.grad_slot(xi);
                       std::vector<double> acc(h * wd);
                       for (std::size_t n = 0; n < batch; ++n) {
                         for (std::size_t c = 0; c < cin; ++c) {
                           std::fill(acc.begin(), acc.end(), 0.0);
                           for (std::size_t f = 0; f < k; ++f) {
                             const T* gp = &g.values()[((n * k) + f) * oh * ow];
                             for (std::size_t ky = 0; ky < kh; ++ky) {
                               const auto [oy0, oy1] = detail::valid_range(oh, h, ky, stride, pad);
                               for (std::size_t kx = 0; kx < kw; ++kx) {
                                 const auto [ox0, ox1] = detail::valid_range(ow, wd, kx, stride, pad);
                                 const double wv = w.at(f, c, ky, kx);
                                 for (std::size_t oy = oy0; oy < oy1; ++oy) {
                                   double* row = &acc[(oy * stride + ky - pad) * wd];
                                   const T* grow = gp + oy * ow;
                                   for (std::size_t ox = ox0; ox < ox1; ++ox) row[ox * stride + kx - pad] += wv * grow[ox];
                                 }
                               }
                             }
                           }
                           T* dst = &gx.values()[((n * cin) + c) * h * wd];
                           for (std::size_t i = 0; i < h * wd; ++i) dst[i] += static_cast<T>(acc[i]);
                         }
                       }
                     });
}

template <class T>
Var eltwise_add(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  require_same_shape(va, vb, "eltwise_add");
  BasicTensor<T> y = va;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += vb[i];
  return tape.record(std::move(y), "eltwise_add", {a.id, b.id}, [](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_slot(self);
    for (std::size_t in : t.inputs(Var{self})) {
      auto& gi = t.grad_slot(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  BasicTensor<T> y = tape.value(x);
  for (auto& v : y.values()) v = v <= T{0} ? T{0} : v;  // NaN passes through
  return tape.record(std::move(y), "relu", {x.id}, [](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(Var{self})[0];
    const auto& xv = t.value_at(in);
    const auto& g = t.grad_slot(self);
    auto& gi = t.grad_slot(in);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T{0}) gi[i] += g[i];
    }
  });
}

/// Mean over the spatial extent: [B,C,H,W] -> [B,C].
template <class T>
Var avgpool_global(Tape<T>& tape, Var x) {
  const auto& v = tape.value(x);
  if (v.rank() != 4) throw Error(ErrorKind::shape, "avgpool_global: input rank must be 4, got " + shape_string(v.shape()));
  const std::size_t batch = v.dim(0), ch = v.dim(1), area = v.dim(2) * v.dim(3);
  BasicTensor<T> y(Shape{batch, ch});
  for (std::size_t i = 0; i < batch * ch; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < area; ++j) s += v[i * area + j];
    y[i] = static_cast<T>(s / static_cast<double>(area));
  }
  return tape.record(std::move(y), "avgpool_global", {x.id}, [area](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(Var{self})[0];
    const auto& g = t.grad_slot(self);
    auto& gi = t.grad_slot(in);
    const T scale = T{1} / static_cast<T>(area);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T share = g[i] * scale;
      for (std::size_t j = 0; j < area; ++j) gi[i * area + j] += share;
    }
  });
}

/// x [B,C] times w [C,M] plus b [M].
template <class T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(w);
  const auto& bv = tape.value(b);
  if (xv.rank() != 2 || wv.rank() != 2) throw Error(ErrorKind::shape, "linear: input and weight must be rank 2");
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), m = wv.dim(1);
  if (wv.dim(0) != cin) {
    throw Error(ErrorKind::shape, "linear: input features " + std::to_string(cin) + " vs weight rows " +
                                      std::to_string(wv.dim(0)) + " (dim 0)");
  }
  if (bv.rank() != 1 || bv.dim(0) != m) {
    throw Error(ErrorKind::shape, "linear: bias shape " + shape_string(bv.shape()) + " vs outputs " + std::to_string(m));
  }
  BasicTensor<T> y(Shape{batch, m});
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = bv[j];
      for (std::size_t c = 0; c < cin; ++c) s += static_cast<double>(xv.at(n, c)) * wv.at(c, j);
      y.at(n, j) = static_cast<T>(s);
    }
  }
  return tape.record(std::move(y), "linear", {x.id, w.id, b.id}, [](Tape<T>& t, std::size_t self) {
    const auto& ids = t.inputs(Var{self});
    const auto& xv = t.value_at(ids[0]);
    const auto& wv = t.value_at(ids[1]);
    const auto& g = t.grad_slot(self);
    const std::size_t batch = xv.dim(0), cin = xv.dim(1), m = wv.dim(1);
    auto& gx = t.grad_slot(ids[0]);
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t c = 0; c < cin; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += static_cast<double>(g.at(n, j)) * wv.at(c, j);
        gx.at(n, c) += static_cast<T>(s);
      }
    }
    auto& gw = t.grad_slot(ids[1]);
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t n = 0; n < batch; ++n) s += static_cast<double>(xv.at(n, c)) * g.at(n, j);
        gw.at(c, j) += static_cast<T>(s);
      }
    }
    auto& gb = t.grad_slot(ids[2]);
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) s += g.at(n, j);
      gb[j] += static_cast<T>(s);
    }
  });
}

/// Mean softmax cross-entropy over the batch.
template <class T>
Var softmax_xent(Tape<T>& tape, Var logits, std::vector<int> labels) {
  const auto& z = tape.value(logits);
  if (z.rank() != 2) throw Error(ErrorKind::shape, "softmax_xent: logits must be rank 2");
  const std::size_t batch = z.dim(0), m = z.dim(1);
  if (labels.size() != batch) {
    throw Error(ErrorKind::shape, "softmax_xent: " + std::to_string(labels.size()) + " labels for batch of " +
                                      std::to_string(batch));
  }
  BasicTensor<T> probs(z.shape());
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= m) {
      throw Error(ErrorKind::range, "softmax_xent: label " + std::to_string(label) + " at batch index " +
                                        std::to_string(n) + " outside [0," + std::to_string(m) + ")");
    }
    double peak = z.at(n, 0);
    for (std::size_t j = 1; j < m; ++j) peak = std::max(peak, static_cast<double>(z.at(n, j)));
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) denom += std::exp(static_cast<double>(z.at(n, j)) - peak);
    for (std::size_t j = 0; j < m; ++j) {
      probs.at(n, j) = static_cast<T>(std::exp(static_cast<double>(z.at(n, j)) - peak) / denom);
    }
    total += std::log(denom) + peak - static_cast<double>(z.at(n, static_cast<std::size_t>(label)));
  }
  auto loss = BasicTensor<T>::scalar(static_cast<T>(total / static_cast<double>(batch)));
  return tape.record(std::move(loss), "softmax_xent", {logits.id},
                     [probs = std::move(probs), labels = std::move(labels)](Tape<T>& t, std::size_t self) {
                       const std::size_t in = t.inputs(Var{self})[0];
                       const T g = t.grad_slot(self)[0];
                       auto& gi = t.grad_slot(in);
                       const std::size_t batch = probs.dim(0), m = probs.dim(1);
                       const T scale = g / static_cast<T>(batch);
                       for (std::size_t n = 0; n < batch; ++n) {
                         for (std::size_t j = 0; j < m; ++j) {
                           const T target = static_cast<std::size_t>(labels[n]) == j ? T{1} : T{0};
                           gi.at(n, j) += scale * (probs.at(n, j) - target);
                         }
                       }
                     });
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  double s = 0.0;
  for (T v : tape.value(x).values()) s += v;
  return tape.record(BasicTensor<T>::scalar(static_cast<T>(s)), "sum", {x.id}, [](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(Var{self})[0];
    const T g = t.grad_slot(self)[0];
    for (auto& v : t.grad_slot(in).values()) v += g;
  });
}

/// Elementwise product.
template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  require_same_shape(va, vb, "mul");
  BasicTensor<T> y = va;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= vb[i];
  return tape.record(std::move(y), "mul", {a.id, b.id}, [](Tape<T>& t, std::size_t self) {
    const auto& ids = t.inputs(Var{self});
    const auto& g = t.grad_slot(self);
    const auto& va = t.value_at(ids[0]);
    const auto& vb = t.value_at(ids[1]);
    auto& ga = t.grad_slot(ids[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    auto& gb = t.grad_slot(ids[1]);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
  });
}

template <class T>
Var scale(Tape<T>& tape, Var x, T factor) {
  BasicTensor<T> y = tape.value(x);
  for (auto& v : y.values()) v *= factor;
  return tape.record(std::move(y), "scale", {x.id}, [factor](Tape<T>& t, std::size_t self) {
    const std::size_t in = t.inputs(Var{self})[0];
    const auto& g = t.grad_slot(self);
    auto& gi = t.grad_slot(in);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * factor;
  });
}

}  // namespace dwgl
