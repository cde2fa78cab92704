#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dwgl/autodiff.hpp"
#include "dwgl/error.hpp"
#include "dwgl/network.hpp"

namespace dwgl {

enum class RegMode { subgradient, proximal };
enum class Direction { increasing, decreasing };
// Where the plain L2 term lives: decay inside sgd_step, or added to the gradient.
enum class L2Mode { decoupled, coupled };

struct RegularizerConfig {
  double lambda = 0.0;    // L2 coefficient
  double lambda_g = 0.0;  // group-lasso coefficient
  bool directed = true;   // false: plain group lasso with f(k) = 1
  // Multiply directed coefficients by K so they sum to K, the total weight
  // of the unweighted penalty.
  bool rescale = false;
  double steepness = 9.22;
  double epsilon = 1e-12;
  RegMode mode = RegMode::subgradient;
  Direction direction = Direction::increasing;
  L2Mode l2 = L2Mode::decoupled;

  void validate() const {
    if (!(lambda >= 0.0)) throw Error(ErrorKind::config, "reg.lambda must be >= 0");
    if (!(lambda_g >= 0.0)) throw Error(ErrorKind::config, "reg.lambda_g must be >= 0");
    if (!(steepness > 0.0)) throw Error(ErrorKind::config, "reg.steepness must be > 0");
    if (!(epsilon > 0.0)) throw Error(ErrorKind::config, "reg.epsilon must be > 0");
  }
};

/// Directed-weighting coefficients f(1..K): a softmax over k * steepness / K,
/// so they sum to one and grow by the constant factor e^{steepness/K}.
/// `Direction::decreasing` mirrors the sequence.
inline std::vector<double> directed_coefficients(std::size_t filters, double steepness,
                                                 Direction direction = Direction::increasing) {
  if (filters == 0) throw Error(ErrorKind::range, "coefficients need at least one filter");
  if (!(steepness > 0.0)) throw Error(ErrorKind::range, "steepness must be > 0");
  const double kf = static_cast<double>(filters);
  std::vector<double> f(filters);
  // Shifted by the largest exponent; the shift cancels in the ratio.
  double total = 0.0;
  for (std::size_t k = 1; k <= filters; ++k) {
    f[k - 1] = std::exp(steepness * (static_cast<double>(k) - kf) / kf);
    total += f[k - 1];
  }
  for (auto& v : f) v /= total;
  if (direction == Direction::decreasing) std::reverse(f.begin(), f.end());
  return f;
}

/// f(k) for a single 1-based index.
inline double coeff(std::size_t k, std::size_t filters, double steepness, Direction direction = Direction::increasing) {
  if (k < 1 || k > filters) {
    throw Error(ErrorKind::range, "filter index " + std::to_string(k) + " outside [1," + std::to_string(filters) + "]");
  }
  return directed_coefficients(filters, steepness, direction)[k - 1];
}

/// Per-filter coefficients under `cfg`: all ones for plain group lasso.
inline std::vector<double> coefficients(std::size_t filters, const RegularizerConfig& cfg) {
  if (!cfg.directed) return std::vector<double>(filters, 1.0);
  auto f = directed_coefficients(filters, cfg.steepness, cfg.direction);
  if (cfg.rescale) {
    for (auto& v : f) v *= static_cast<double>(filters);
  }
  return f;
}

/// One filter of a conv layer: its Cin*k*k weights and its bias.
struct FilterGroup {
  std::string layer;
  std::size_t index = 0;  // 1-based
  std::span<const float> weights;
  float bias = 0.0f;
};

/// sqrt of the sum of squares, accumulated in double.
template <class T>
double group_norm(std::span<const T> weights, T bias = T{0}) {
  double s = static_cast<double>(bias) * static_cast<double>(bias);
  for (T w : weights) s += static_cast<double>(w) * static_cast<double>(w);
  return std::sqrt(s);
}

inline double group_norm(const FilterGroup& g) { return group_norm<float>(g.weights, g.bias); }

inline std::vector<FilterGroup> filter_groups(const NetworkGraph& net, const LayerSpec& conv) {
  if (conv.kind != LayerKind::conv) throw Error(ErrorKind::range, "'" + conv.id + "' is not a conv layer");
  const Tensor& w = net.params.at(conv.weight_name());
  const Tensor& b = net.params.at(conv.bias_name());
  const std::size_t per = w.size() / conv.filters;
  std::vector<FilterGroup> out;
  out.reserve(conv.filters);
  for (std::size_t k = 0; k < conv.filters; ++k) {
    out.push_back(FilterGroup{conv.id, k + 1, w.data().subspan(k * per, per), b[k]});
  }
  return out;
}

/// Norm of every filter of `conv`, in index order.
inline std::vector<double> filter_norms(const NetworkGraph& net, const LayerSpec& conv) {
  std::vector<double> out;
  for (const auto& g : filter_groups(net, conv)) out.push_back(group_norm(g));
  return out;
}

/// Weighted sum of one layer's filter norms.
inline double layer_penalty(const NetworkGraph& net, const LayerSpec& conv, const RegularizerConfig& cfg) {
  const auto norms = filter_norms(net, conv);
  const auto f = coefficients(norms.size(), cfg);
  double s = 0.0;
  for (std::size_t k = 0; k < norms.size(); ++k) s += f[k] * norms[k];
  return s;
}

/// Sum of layer penalties over all regularized convs (no lambda_g factor).
inline double group_penalty(const NetworkGraph& net, const RegularizerConfig& cfg) {
  double s = 0.0;
  for (const auto* c : net.convs()) {
    if (c->regularized) s += layer_penalty(net, *c, cfg);
  }
  return s;
}

/// Half the sum of squares of every parameter.
inline double l2_term(const NetworkGraph& net) {
  double s = 0.0;
  for (const auto& [name, p] : net.params) {
    for (float v : p.values()) s += static_cast<double>(v) * v;
  }
  return 0.5 * s;
}

inline double total_objective(double data_loss, const NetworkGraph& net, const RegularizerConfig& cfg) {
  double total = data_loss;
  if (cfg.lambda != 0.0) total += cfg.lambda * l2_term(net);
  if (cfg.lambda_g != 0.0) total += cfg.lambda_g * group_penalty(net, cfg);
  return total;
}

/// Gradient of the penalty terms. Each filter of a regularized conv receives
/// lambda_g * f(k) * w / max(||w||, epsilon), which is zero for a zero filter.
/// The lambda * w term is included only in coupled L2 mode.
inline GradientMap<float> penalty_gradient(const NetworkGraph& net, const RegularizerConfig& cfg) {
  GradientMap<float> grads;
  if (cfg.l2 == L2Mode::coupled && cfg.lambda != 0.0) {
    for (const auto& [name, p] : net.params) {
      Tensor g(p.shape());
      for (std::size_t i = 0; i < p.size(); ++i) g[i] = static_cast<float>(cfg.lambda * p[i]);
      grads.emplace(name, std::move(g));
    }
  }
  if (cfg.lambda_g == 0.0) return grads;
  for (const auto* c : net.convs()) {
    if (!c->regularized) continue;
    const Tensor& w = net.params.at(c->weight_name());
    const Tensor& b = net.params.at(c->bias_name());
    auto& gw = grads.try_emplace(c->weight_name(), w.shape()).first->second;
    auto& gb = grads.try_emplace(c->bias_name(), b.shape()).first->second;
    const auto f = coefficients(c->filters, cfg);
    const std::size_t per = w.size() / c->filters;
    for (std::size_t k = 0; k < c->filters; ++k) {
      const double norm = group_norm<float>(w.data().subspan(k * per, per), b[k]);
      const double scale = cfg.lambda_g * f[k] / std::max(norm, cfg.epsilon);
      for (std::size_t j = 0; j < per; ++j) gw[k * per + j] += static_cast<float>(scale * w[k * per + j]);
      gb[k] += static_cast<float>(scale * b[k]);
    }
  }
  return grads;
}

/// Proximal group shrinkage after a gradient step of size `lr`: every filter
/// norm drops by lr * lambda_g * f(k) and clamps at exactly zero.
inline void proximal_step(NetworkGraph& net, const RegularizerConfig& cfg, double lr) {
  if (cfg.lambda_g == 0.0) return;
  for (const auto& l : net.layers) {
    if (l.kind != LayerKind::conv || !l.regularized) continue;
    Tensor& w = net.params.at(l.weight_name());
    Tensor& b = net.params.at(l.bias_name());
    const auto f = coefficients(l.filters, cfg);
    const std::size_t per = w.size() / l.filters;
    for (std::size_t k = 0; k < l.filters; ++k) {
      const double norm = group_norm<float>(w.data().subspan(k * per, per), b[k]);
      const double threshold = lr * cfg.lambda_g * f[k];
      const double keep = norm <= threshold ? 0.0 : 1.0 - threshold / norm;
      for (std::size_t j = 0; j < per; ++j) w[k * per + j] = static_cast<float>(keep * w[k * per + j]);
      b[k] = static_cast<float>(keep * b[k]);
    }
  }
}

}  // namespace dwgl
