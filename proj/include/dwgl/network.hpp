#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "dwgl/autodiff.hpp"
#include "dwgl/error.hpp"
#include "dwgl/optim.hpp"
#include "dwgl/rng.hpp"
#include "dwgl/tensor.hpp"

namespace dwgl {

enum class LayerKind { input, conv, relu, eltwise, avgpool, linear, loss };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::eltwise: return "eltwise";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::linear: return "linear";
    case LayerKind::loss: return "loss";
  }
  return "unknown";
}

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::input;
  std::vector<std::string> inputs;
  // conv: filters K and input channels; linear: output and input features.
  std::size_t filters = 0;
  std::size_t in_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool stem = false;
  // Conv whose filters carry a group-lasso term.
  bool regularized = false;

  std::string weight_name() const { return id + ".weight"; }
  std::string bias_name() const { return id + ".bias"; }
};

/// Layers in topological order plus their parameters ("<id>.weight", "<id>.bias").
/// Conv weights are [K,Cin,k,k]; linear weights are [Cin,M].
struct NetworkGraph {
  std::size_t in_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<LayerSpec> layers;
  ParameterMap params;

  const LayerSpec& layer(std::string_view id) const {
    for (const auto& l : layers) {
      if (l.id == id) return l;
    }
    throw Error(ErrorKind::range, "no layer named '" + std::string(id) + "'");
  }

  LayerSpec& layer(std::string_view id) {
    return const_cast<LayerSpec&>(static_cast<const NetworkGraph&>(*this).layer(id));
  }

  std::vector<const LayerSpec*> convs() const {
    std::vector<const LayerSpec*> out;
    for (const auto& l : layers) {
      if (l.kind == LayerKind::conv) out.push_back(&l);
    }
    return out;
  }

  /// Layers that read `id`'s output.
  std::vector<const LayerSpec*> consumers(std::string_view id) const {
    std::vector<const LayerSpec*> out;
    for (const auto& l : layers) {
      if (std::find(l.inputs.begin(), l.inputs.end(), id) != l.inputs.end()) out.push_back(&l);
    }
    return out;
  }
};

/// Per-sample output shape of every layer ({C,H,W} for maps, {M} for vectors).
/// Throws ErrorKind::shape on any inconsistency between attributes, inputs
/// and parameter tensors.
inline std::map<std::string, Shape> infer_shapes(const NetworkGraph& net) {
  std::map<std::string, Shape> shapes;
  auto input_shape = [&](const LayerSpec& l, std::size_t i) -> const Shape& {
    const auto it = shapes.find(l.inputs.at(i));
    if (it == shapes.end()) {
      throw Error(ErrorKind::shape, "layer '" + l.id + "' reads '" + l.inputs[i] + "' which is not defined before it");
    }
    return it->second;
  };
  auto expect_inputs = [](const LayerSpec& l, std::size_t n) {
    if (l.inputs.size() != n) {
      throw Error(ErrorKind::shape, "layer '" + l.id + "' expects " + std::to_string(n) + " inputs, has " +
                                        std::to_string(l.inputs.size()));
    }
  };
  auto expect_param = [&](const std::string& name, const Shape& shape) {
    const auto it = net.params.find(name);
    if (it == net.params.end()) throw Error(ErrorKind::shape, "missing parameter " + name);
    if (it->second.shape() != shape) {
      throw Error(ErrorKind::shape, "parameter " + name + " has shape " + shape_string(it->second.shape()) +
                                        ", expected " + shape_string(shape));
    }
  };

  for (const auto& l : net.layers) {
    if (shapes.count(l.id)) throw Error(ErrorKind::shape, "duplicate layer id '" + l.id + "'");
    switch (l.kind) {
      case LayerKind::input:
        expect_inputs(l, 0);
        shapes[l.id] = {net.in_channels, net.height, net.width};
        break;
      case LayerKind::conv: {
        expect_inputs(l, 1);
        const Shape in = input_shape(l, 0);
        if (in.size() != 3) throw Error(ErrorKind::shape, "conv '" + l.id + "' needs a feature map input");
        if (in[0] != l.in_channels) {
          throw Error(ErrorKind::shape, "conv '" + l.id + "' declares " + std::to_string(l.in_channels) +
                                            " input channels but receives " + std::to_string(in[0]));
        }
        if (l.filters == 0 || l.kernel == 0 || l.stride == 0) {
          throw Error(ErrorKind::shape, "conv '" + l.id + "' has a zero filter count, kernel or stride");
        }
        if (l.kernel > in[1] + 2 * l.pad || l.kernel > in[2] + 2 * l.pad) {
          throw Error(ErrorKind::shape, "conv '" + l.id + "' kernel exceeds padded input");
        }
        expect_param(l.weight_name(), {l.filters, l.in_channels, l.kernel, l.kernel});
        expect_param(l.bias_name(), {l.filters});
        shapes[l.id] = {l.filters, detail::conv_out_extent(in[1], l.kernel, l.stride, l.pad),
                        detail::conv_out_extent(in[2], l.kernel, l.stride, l.pad)};
        break;
      }
      case LayerKind::relu:
        expect_inputs(l, 1);
        shapes[l.id] = input_shape(l, 0);
        break;
      case LayerKind::eltwise: {
        expect_inputs(l, 2);
        const Shape& a = input_shape(l, 0);
        const Shape& b = input_shape(l, 1);
        if (a != b) {
          throw Error(ErrorKind::shape, "eltwise '" + l.id + "' inputs differ: " + shape_string(a) + " vs " +
                                            shape_string(b));
        }
        shapes[l.id] = a;
        break;
      }
      case LayerKind::avgpool: {
        expect_inputs(l, 1);
        const Shape& in = input_shape(l, 0);
        if (in.size() != 3) throw Error(ErrorKind::shape, "avgpool '" + l.id + "' needs a feature map input");
        shapes[l.id] = {in[0]};
        break;
      }
      case LayerKind::linear: {
        expect_inputs(l, 1);
        const Shape& in = input_shape(l, 0);
        if (in.size() != 1 || in[0] != l.in_channels) {
          throw Error(ErrorKind::shape, "linear '" + l.id + "' expects " + std::to_string(l.in_channels) +
                                            " features, receives " + shape_string(in));
        }
        expect_param(l.weight_name(), {l.in_channels, l.filters});
        expect_param(l.bias_name(), {l.filters});
        shapes[l.id] = {l.filters};
        break;
      }
      case LayerKind::loss: {
        expect_inputs(l, 1);
        const Shape& in = input_shape(l, 0);
        if (in.size() != 1 || in[0] != net.classes) {
          throw Error(ErrorKind::shape, "loss '" + l.id + "' expects " + std::to_string(net.classes) + " logits");
        }
        shapes[l.id] = {1};
        break;
      }
    }
  }
  return shapes;
}

inline std::size_t parameter_count(const NetworkGraph& net) {
  std::size_t n = 0;
  for (const auto& [name, p] : net.params) n += p.size();
  return n;
}

/// Multiply-accumulates of one forward pass per sample, over conv and linear layers.
inline std::size_t mac_count(const NetworkGraph& net) {
  const auto shapes = infer_shapes(net);
  std::size_t macs = 0;
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::conv) {
      const Shape& out = shapes.at(l.id);
      macs += l.filters * l.in_channels * l.kernel * l.kernel * out[1] * out[2];
    } else if (l.kind == LayerKind::linear) {
      macs += l.in_channels * l.filters;
    }
  }
  return macs;
}

inline std::size_t filter_count(const NetworkGraph& net) {
  std::size_t n = 0;
  for (const auto* c : net.convs()) n += c->filters;
  return n;
}

/// He-style fan-in initialization; biases start at zero.
inline void initialize_parameters(NetworkGraph& net, std::uint64_t seed) {
  Rng rng(seed);
  net.params.clear();
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::conv) {
      Tensor w(Shape{l.filters, l.in_channels, l.kernel, l.kernel});
      const double std_dev = std::sqrt(2.0 / static_cast<double>(l.in_channels * l.kernel * l.kernel));
      for (auto& v : w.values()) v = static_cast<float>(std_dev * rng.normal());
      net.params.emplace(l.weight_name(), std::move(w));
      net.params.emplace(l.bias_name(), Tensor(Shape{l.filters}));
    } else if (l.kind == LayerKind::linear) {
      Tensor w(Shape{l.in_channels, l.filters});
      const double std_dev = std::sqrt(1.0 / static_cast<double>(l.in_channels));
      for (auto& v : w.values()) v = static_cast<float>(std_dev * rng.normal());
      net.params.emplace(l.weight_name(), std::move(w));
      net.params.emplace(l.bias_name(), Tensor(Shape{l.filters}));
    }
  }
}

// ---------------------------------------------------------------------------
// Coupling analysis

struct CouplingGroup {
  std::string id;                    // id of the first member, stable across pruning
  std::vector<std::string> members;  // conv ids in layer order
  std::size_t filters = 0;
  std::vector<std::string> consumers;  // conv/linear layers reading this channel space
  // False when the channel space also carries the raw input, which cannot shrink.
  bool prunable = true;
};

namespace detail {

/// Producers of a feature map: the convs (and the input layer, if reached)
/// whose outputs flow into it through relu/eltwise only.
inline void collect_producers(const NetworkGraph& net, const std::string& id, std::set<std::string>& out) {
  const LayerSpec& l = net.layer(id);
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::input:
      out.insert(l.id);
      break;
    case LayerKind::relu:
    case LayerKind::eltwise:
      for (const auto& in : l.inputs) collect_producers(net, in, out);
      break;
    default:
      throw Error(ErrorKind::shape, "layer '" + l.id + "' of kind " + std::string(to_string(l.kind)) +
                                        " cannot feed a feature map");
  }
}

}  // namespace detail

/// Channel space of each layer's output, as an index into the group list;
/// nullopt for the input image and vector-valued layers past the classifier.
struct CouplingAnalysis {
  std::vector<CouplingGroup> groups;
  std::map<std::string, std::optional<std::size_t>> space;  // layer id -> group index
  std::map<std::string, std::size_t> group_of;               // conv id -> group index
};

inline CouplingAnalysis analyze_coupling(const NetworkGraph& net) {
  infer_shapes(net);
  // Union-find over convs plus the input layer.
  std::map<std::string, std::string> parent;
  std::function<std::string(const std::string&)> find = [&](const std::string& x) {
    std::string& p = parent.at(x);
    if (p != x) p = find(p);
    return p;
  };
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::conv || l.kind == LayerKind::input) parent[l.id] = l.id;
  }
  for (const auto& l : net.layers) {
    if (l.kind != LayerKind::eltwise) continue;
    std::set<std::string> producers;
    detail::collect_producers(net, l.id, producers);
    std::optional<std::size_t> channels;
    for (const auto& p : producers) {
      const LayerSpec& pl = net.layer(p);
      const std::size_t c = pl.kind == LayerKind::conv ? pl.filters : net.in_channels;
      if (channels && *channels != c) {
        throw Error(ErrorKind::shape, "eltwise '" + l.id + "' joins producers with " + std::to_string(*channels) +
                                          " and " + std::to_string(c) + " channels");
      }
      channels = c;
    }
    const std::string root = find(*producers.begin());
    for (const auto& p : producers) parent[find(p)] = root;
  }

  CouplingAnalysis out;
  std::map<std::string, std::size_t> root_to_group;
  for (const auto& l : net.layers) {
    if (l.kind != LayerKind::conv) continue;
    const std::string root = find(l.id);
    auto [it, inserted] = root_to_group.try_emplace(root, out.groups.size());
    if (inserted) {
      CouplingGroup g;
      g.id = l.id;
      g.filters = l.filters;
      out.groups.push_back(std::move(g));
    }
    out.groups[it->second].members.push_back(l.id);
    out.group_of[l.id] = it->second;
  }
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::input) {
      const std::string root = find(l.id);
      const auto it = root_to_group.find(root);
      if (it != root_to_group.end()) out.groups[it->second].prunable = false;
      out.space[l.id] = std::nullopt;
    } else if (l.kind == LayerKind::conv) {
      out.space[l.id] = out.group_of.at(l.id);
    } else if (l.kind == LayerKind::linear || l.kind == LayerKind::loss) {
      out.space[l.id] = std::nullopt;
    } else if (l.kind == LayerKind::eltwise) {
      // Both sides share one space unless the raw input is involved.
      std::optional<std::size_t> s = out.space.at(l.inputs[0]);
      if (!s) s = out.space.at(l.inputs[1]);
      out.space[l.id] = s;
    } else {
      out.space[l.id] = out.space.at(l.inputs[0]);
    }
  }
  for (const auto& l : net.layers) {
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
    const auto s = out.space.at(l.inputs[0]);
    if (s) out.groups[*s].consumers.push_back(l.id);
  }
  return out;
}

/// Partition of all convs into eltwise-coupled groups.
inline std::vector<CouplingGroup> coupling_groups(const NetworkGraph& net) { return analyze_coupling(net).groups; }

/// A stem conv is exempt from group lasso unless an identity shortcut couples
/// it to other convs, in which case it is pruned with them and must vote too.
inline void assign_regularization(NetworkGraph& net) {
  const auto analysis = analyze_coupling(net);
  for (auto& l : net.layers) {
    if (l.kind != LayerKind::conv) continue;
    const auto& g = analysis.groups[analysis.group_of.at(l.id)];
    l.regularized = g.prunable && (!l.stem || g.members.size() > 1);
  }
}

// ---------------------------------------------------------------------------
// Construction

class GraphBuilder {
 public:
  GraphBuilder(std::size_t in_channels, std::size_t height, std::size_t width, std::size_t classes) {
    net_.in_channels = in_channels;
    net_.height = height;
    net_.width = width;
    net_.classes = classes;
    net_.layers.push_back(LayerSpec{.id = "input", .kind = LayerKind::input, .inputs = {}});
    channels_["input"] = in_channels;
  }

  std::string conv(std::string id, const std::string& from, std::size_t filters, std::size_t kernel,
                   std::size_t stride, std::size_t pad, bool stem = false) {
    LayerSpec l{.id = id, .kind = LayerKind::conv, .inputs = {from}, .filters = filters,
                .in_channels = channels_of(from), .kernel = kernel, .stride = stride, .pad = pad, .stem = stem};
    return add(std::move(l), filters);
  }

  std::string relu(std::string id, const std::string& from) {
    return add(LayerSpec{.id = id, .kind = LayerKind::relu, .inputs = {from}}, channels_of(from));
  }

  std::string eltwise(std::string id, const std::string& a, const std::string& b) {
    return add(LayerSpec{.id = id, .kind = LayerKind::eltwise, .inputs = {a, b}}, channels_of(a));
  }

  std::string avgpool(std::string id, const std::string& from) {
    return add(LayerSpec{.id = id, .kind = LayerKind::avgpool, .inputs = {from}}, channels_of(from));
  }

  std::string linear(std::string id, const std::string& from, std::size_t outputs) {
    LayerSpec l{.id = id, .kind = LayerKind::linear, .inputs = {from}, .filters = outputs,
                .in_channels = channels_of(from)};
    return add(std::move(l), outputs);
  }

  std::string loss(std::string id, const std::string& from) {
    return add(LayerSpec{.id = id, .kind = LayerKind::loss, .inputs = {from}}, 1);
  }

  NetworkGraph finish(std::uint64_t seed) {
    initialize_parameters(net_, seed);
    infer_shapes(net_);
    assign_regularization(net_);
    return std::move(net_);
  }

 private:
  std::size_t channels_of(const std::string& id) const {
    const auto it = channels_.find(id);
    if (it == channels_.end()) throw Error(ErrorKind::shape, "unknown layer '" + id + "'");
    return it->second;
  }

  std::string add(LayerSpec l, std::size_t channels) {
    if (channels_.count(l.id)) throw Error(ErrorKind::shape, "duplicate layer id '" + l.id + "'");
    channels_[l.id] = channels;
    net_.layers.push_back(std::move(l));
    return net_.layers.back().id;
  }

  NetworkGraph net_;
  std::map<std::string, std::size_t> channels_;
};

struct StageSpec {
  std::size_t channels = 0;
  std::size_t blocks = 0;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct NetworkConfig {
  std::string preset;  // informational once stages are set
  std::vector<StageSpec> stages;
  std::size_t in_channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 10;

  static std::vector<StageSpec> preset_stages(std::string_view name) {
    if (name == "resnet-tiny-8") return {{8, 1}, {16, 1}, {32, 1}};
    if (name == "resnet-20-narrow") return {{8, 3}, {16, 3}, {32, 3}};
    throw Error(ErrorKind::config, "unknown network preset '" + std::string(name) +
                                       "' (expected resnet-tiny-8 or resnet-20-narrow)");
  }

  /// Parses "CxB,CxB,..." (channels x blocks per stage), e.g. "8x1,16x1,32x1".
  static std::vector<StageSpec> parse_stages(std::string_view text) {
    std::vector<StageSpec> out;
    std::stringstream ss{std::string(text)};
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto x = item.find('x');
      try {
        if (x == std::string::npos) throw std::invalid_argument("missing x");
        std::size_t used = 0;
        const long long c = std::stoll(item.substr(0, x), &used);
        if (used != x) throw std::invalid_argument("channels");
        const std::string rest = item.substr(x + 1);
        const long long b = std::stoll(rest, &used);
        if (used != rest.size()) throw std::invalid_argument("blocks");
        if (c <= 0 || b <= 0) throw std::invalid_argument("nonpositive");
        out.push_back({static_cast<std::size_t>(c), static_cast<std::size_t>(b)});
      } catch (const std::exception&) {
        throw Error(ErrorKind::config, "invalid stage spec item '" + item + "' in '" + std::string(text) +
                                           "' (expected CHANNELSxBLOCKS)");
      }
    }
    if (out.empty()) throw Error(ErrorKind::config, "empty stage spec");
    return out;
  }
};

/// Residual CNN: 3x3 stem, stages of basic blocks (conv-relu-conv + shortcut,
/// eltwise, relu), global average pool, linear classifier. The first block
/// of every stage after the first downsamples with stride 2 and a 1x1
/// stride-2 conv shortcut; all other shortcuts are identities.
inline NetworkGraph build(const NetworkConfig& cfg, std::uint64_t seed) {
  std::vector<StageSpec> stages = cfg.stages.empty() ? NetworkConfig::preset_stages(cfg.preset) : cfg.stages;
  if (stages.empty()) throw Error(ErrorKind::config, "network needs at least one stage");
  for (const auto& s : stages) {
    if (s.channels == 0 || s.blocks == 0) throw Error(ErrorKind::config, "stage channels and blocks must be positive");
  }
  if (cfg.in_channels == 0 || cfg.height == 0 || cfg.width == 0) {
    throw Error(ErrorKind::config, "input shape must be positive");
  }
  if (cfg.classes < 2) throw Error(ErrorKind::config, "need at least 2 classes");

  GraphBuilder b(cfg.in_channels, cfg.height, cfg.width, cfg.classes);
  std::string x = b.conv("stem", "input", stages[0].channels, 3, 1, 1, true);
  x = b.relu("stem.relu", x);
  std::size_t channels = stages[0].channels;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t k = 0; k < stages[s].blocks; ++k) {
      const std::string p = "s" + std::to_string(s + 1) + "b" + std::to_string(k + 1) + ".";
      const bool down = s > 0 && k == 0;
      const std::size_t stride = down ? 2 : 1;
      std::string shortcut = x;
      if (down || channels != stages[s].channels) {
        shortcut = b.conv(p + "shortcut", x, stages[s].channels, 1, stride, 0);
      }
      std::string y = b.conv(p + "conv1", x, stages[s].channels, 3, stride, 1);
      y = b.relu(p + "relu1", y);
      y = b.conv(p + "conv2", y, stages[s].channels, 3, 1, 1);
      y = b.eltwise(p + "add", y, shortcut);
      x = b.relu(p + "relu2", y);
      channels = stages[s].channels;
    }
  }
  x = b.avgpool("pool", x);
  x = b.linear("fc", x, cfg.classes);
  b.loss("loss", x);
  return b.finish(seed);
}

// ---------------------------------------------------------------------------
// Forward pass

/// Records the forward pass on `tape` and returns the logits [B,classes].
/// Parameters enter the tape as named leaves so `parameter_grads()` maps
/// straight back onto `net.params`. `layer_outputs`, when given, receives
/// the Var of every layer.
template <class T>
Var forward(Tape<T>& tape, const NetworkGraph& net, const BasicTensor<T>& images,
            std::map<std::string, Var>* layer_outputs = nullptr) {
  if (images.rank() != 4 || images.dim(1) != net.in_channels || images.dim(2) != net.height ||
      images.dim(3) != net.width) {
    throw Error(ErrorKind::shape, "forward: images " + shape_string(images.shape()) + " do not match input [B," +
                                      std::to_string(net.in_channels) + "," + std::to_string(net.height) + "," +
                                      std::to_string(net.width) + "]");
  }
  std::map<std::string, Var> out;
  std::optional<Var> logits;
  auto param = [&](const std::string& name) {
    const auto it = net.params.find(name);
    if (it == net.params.end()) throw Error(ErrorKind::shape, "missing parameter " + name);
    if constexpr (std::is_same_v<T, float>) {
      return tape.parameter(name, it->second);
    } else {
      return tape.parameter(name, it->second.template cast<T>());
    }
  };
  for (const auto& l : net.layers) {
    switch (l.kind) {
      case LayerKind::input: out[l.id] = tape.constant(images); break;
      case LayerKind::conv:
        out[l.id] = conv2d(tape, out.at(l.inputs[0]), param(l.weight_name()), param(l.bias_name()), l.stride, l.pad);
        break;
      case LayerKind::relu: out[l.id] = relu(tape, out.at(l.inputs[0])); break;
      case LayerKind::eltwise: out[l.id] = eltwise_add(tape, out.at(l.inputs[0]), out.at(l.inputs[1])); break;
      case LayerKind::avgpool: out[l.id] = avgpool_global(tape, out.at(l.inputs[0])); break;
      case LayerKind::linear:
        out[l.id] = linear(tape, out.at(l.inputs[0]), param(l.weight_name()), param(l.bias_name()));
        break;
      case LayerKind::loss: logits = out.at(l.inputs[0]); break;
    }
  }
  if (!logits) throw Error(ErrorKind::shape, "network has no loss layer");
  if (layer_outputs) *layer_outputs = std::move(out);
  return *logits;
}

/// Forward pass without gradient bookkeeping beyond the tape itself.
inline Tensor predict_logits(const NetworkGraph& net, const Tensor& images) {
  Tape<float> tape;
  const Var logits = forward(tape, net, images);
  return tape.value(logits);
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  for (std::size_t n = 0; n < logits.dim(0); ++n) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.dim(1); ++j) {
      if (logits.at(n, j) > logits.at(n, best)) best = j;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

}  // namespace dwgl
