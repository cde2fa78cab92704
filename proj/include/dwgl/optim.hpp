#pragma once

#include <map>
#include <string>

#include "dwgl/autodiff.hpp"
#include "dwgl/error.hpp"
#include "dwgl/tensor.hpp"

namespace dwgl {

using ParameterMap = std::map<std::string, Tensor>;

/// Plain SGD with decoupled L2 decay: p <- p - lr * (g + weight_decay * p).
/// Parameters without a gradient entry are treated as having g = 0.
inline void sgd_step(ParameterMap& params, const GradientMap<float>& grads, float lr, float weight_decay) {
  if (!(lr > 0.0f)) throw Error(ErrorKind::range, "sgd_step: lr must be > 0");
  if (weight_decay < 0.0f) throw Error(ErrorKind::range, "sgd_step: weight_decay must be >= 0");
  for (auto& [name, p] : params) {
    const auto it = grads.find(name);
    if (it != grads.end()) require_same_shape(p, it->second, "sgd_step(" + name + ")");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float g = it == grads.end() ? 0.0f : it->second[i];
      p[i] -= lr * (g + weight_decay * p[i]);
    }
  }
}

/// grads[name] += other[name] for every entry of `other`.
template <class T>
void accumulate(GradientMap<T>& grads, const GradientMap<T>& other) {
  for (const auto& [name, g] : other) {
    auto [it, inserted] = grads.try_emplace(name, g);
    if (inserted) continue;
    require_same_shape(it->second, g, "accumulate(" + name + ")");
    for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
  }
}

}  // namespace dwgl
