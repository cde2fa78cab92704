#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dwgl/error.hpp"
#include "dwgl/network.hpp"
#include "dwgl/regularizer.hpp"

namespace dwgl {

enum class VoteStrategy { intersection, union_ };

inline std::string_view to_string(VoteStrategy s) { return s == VoteStrategy::intersection ? "intersection" : "union"; }

inline VoteStrategy parse_strategy(std::string_view text) {
  if (text == "intersection") return VoteStrategy::intersection;
  if (text == "union") return VoteStrategy::union_;
  throw Error(ErrorKind::config, "unknown prune strategy '" + std::string(text) + "' (expected intersection|union)");
}

/// Which filters of a single conv are proposed for removal.
struct ThresholdRule {
  enum class Kind { mean, absolute, topfrac };
  Kind kind = Kind::mean;
  double value = 0.0;

  /// "mean", "abs:<eps>" or "topfrac:<p>".
  static ThresholdRule parse(std::string_view text) {
    if (text == "mean") return {};
    const auto colon = text.find(':');
    const std::string_view name = text.substr(0, colon);
    if (colon != std::string_view::npos && (name == "abs" || name == "topfrac")) {
      const std::string arg(text.substr(colon + 1));
      double v = 0.0;
      try {
        std::size_t used = 0;
        v = std::stod(arg, &used);
        if (used != arg.size()) throw std::invalid_argument(arg);
      } catch (const std::exception&) {
        throw Error(ErrorKind::config, "bad number in threshold rule '" + std::string(text) + "'");
      }
      if (name == "abs") {
        if (!(v >= 0.0)) throw Error(ErrorKind::config, "abs threshold must be >= 0");
        return {Kind::absolute, v};
      }
      if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorKind::config, "topfrac fraction must lie in [0,1]");
      return {Kind::topfrac, v};
    }
    throw Error(ErrorKind::config, "unknown threshold rule '" + std::string(text) + "' (expected mean|abs:E|topfrac:P)");
  }

  std::string str() const {
    switch (kind) {
      case Kind::mean: return "mean";
      case Kind::absolute: return "abs:" + nlohmann::json(value).dump();
      case Kind::topfrac: return "topfrac:" + nlohmann::json(value).dump();
    }
    return "mean";
  }
};

using IndexSet = std::set<std::size_t>;  // 1-based filter indices

struct PruneVote {
  std::string layer;
  IndexSet remove;
};

struct PruneMask {
  std::string group;
  IndexSet remove;
  VoteStrategy strategy = VoteStrategy::intersection;
};

/// Filter norms of every conv, keyed by layer id.
using ActivationMap = std::map<std::string, std::vector<double>>;

inline ActivationMap filter_activations(const NetworkGraph& net) {
  ActivationMap out;
  for (const auto* c : net.convs()) out.emplace(c->id, filter_norms(net, *c));
  return out;
}

inline PruneVote propose_vote(const std::string& layer, std::span<const double> norms, const ThresholdRule& rule) {
  if (norms.empty()) throw Error(ErrorKind::range, "no activations for layer '" + layer + "'");
  PruneVote vote{layer, {}};
  switch (rule.kind) {
    case ThresholdRule::Kind::mean: {
      const double mean = std::accumulate(norms.begin(), norms.end(), 0.0) / static_cast<double>(norms.size());
      for (std::size_t k = 0; k < norms.size(); ++k) {
        if (norms[k] < mean) vote.remove.insert(k + 1);
      }
      break;
    }
    case ThresholdRule::Kind::absolute:
      for (std::size_t k = 0; k < norms.size(); ++k) {
        if (norms[k] < rule.value) vote.remove.insert(k + 1);
      }
      break;
    case ThresholdRule::Kind::topfrac: {
      const auto count = static_cast<std::size_t>(rule.value * static_cast<double>(norms.size()));
      std::vector<std::size_t> order(norms.size());
      std::iota(order.begin(), order.end(), 0);
      // Weakest first; among equal norms the higher index goes first.
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return norms[a] != norms[b] ? norms[a] < norms[b] : a > b;
      });
      for (std::size_t i = 0; i < count; ++i) vote.remove.insert(order[i] + 1);
      break;
    }
  }
  return vote;
}

inline std::vector<PruneVote> propose_votes(const ActivationMap& activations, const ThresholdRule& rule) {
  std::vector<PruneVote> out;
  for (const auto& [layer, norms] : activations) out.push_back(propose_vote(layer, norms, rule));
  return out;
}

/// Combines the members' votes. The result never removes every filter: when
/// it would, the filter with the highest `keep_priority` (lowest index on
/// ties, or index 1 without priorities) survives.
inline PruneMask resolve_vote(const CouplingGroup& group, std::span<const PruneVote> votes, VoteStrategy strategy,
                              std::span<const double> keep_priority = {}) {
  PruneMask mask{group.id, {}, strategy};
  bool first = true;
  for (const auto& member : group.members) {
    const auto it = std::find_if(votes.begin(), votes.end(), [&](const PruneVote& v) { return v.layer == member; });
    if (it == votes.end()) {
      throw Error(ErrorKind::range, "group '" + group.id + "' has no vote from member '" + member + "'");
    }
    for (std::size_t k : it->remove) {
      if (k < 1 || k > group.filters) {
        throw Error(ErrorKind::range, "vote of '" + member + "' names filter " + std::to_string(k) + " outside [1," +
                                          std::to_string(group.filters) + "]");
      }
    }
    if (first) {
      mask.remove = it->remove;
      first = false;
    } else if (strategy == VoteStrategy::intersection) {
      IndexSet kept;
      std::set_intersection(mask.remove.begin(), mask.remove.end(), it->remove.begin(), it->remove.end(),
                            std::inserter(kept, kept.end()));
      mask.remove = std::move(kept);
    } else {
      mask.remove.insert(it->remove.begin(), it->remove.end());
    }
  }
  if (group.filters > 0 && mask.remove.size() >= group.filters) {
    std::size_t keep = 1;
    if (!keep_priority.empty()) {
      for (std::size_t k = 2; k <= group.filters; ++k) {
        if (keep_priority[k - 1] > keep_priority[keep - 1]) keep = k;
      }
    }
    mask.remove.erase(keep);
  }
  return mask;
}

namespace detail {

inline std::vector<std::size_t> kept_indices(std::size_t count, const IndexSet& remove) {
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < count; ++k) {
    if (!remove.count(k + 1)) keep.push_back(k);
  }
  return keep;
}

// Keeps the listed slices along `axis` of a row-major tensor.
inline Tensor slice_axis(const Tensor& t, std::size_t axis, const std::vector<std::size_t>& keep) {
  Shape shape = t.shape();
  const std::size_t outer = numel(Shape(shape.begin(), shape.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(shape.begin() + static_cast<std::ptrdiff_t>(axis) + 1, shape.end()));
  const std::size_t extent = shape[axis];
  shape[axis] = keep.size();
  Tensor out(shape);
  std::size_t pos = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k : keep) {
      const float* src = &t.values()[(o * extent + k) * inner];
      std::copy(src, src + inner, &out.values()[pos]);
      pos += inner;
    }
  }
  return out;
}

}  // namespace detail

/// Structurally removes the masked filters. Member convs lose output filters
/// (weights and bias); every conv or linear layer reading the group's channel
/// space loses the matching input channels.
inline NetworkGraph apply_mask(const NetworkGraph& net, std::span<const PruneMask> masks) {
  const auto analysis = analyze_coupling(net);
  NetworkGraph out = net;
  for (const auto& mask : masks) {
    const auto git = std::find_if(analysis.groups.begin(), analysis.groups.end(),
                                  [&](const CouplingGroup& g) { return g.id == mask.group; });
    if (git == analysis.groups.end()) throw Error(ErrorKind::range, "mask names unknown group '" + mask.group + "'");
    const CouplingGroup& group = *git;
    for (std::size_t k : mask.remove) {
      if (k < 1 || k > group.filters) {
        throw Error(ErrorKind::range, "mask for group '" + group.id + "' names stale filter index " +
                                          std::to_string(k) + " (group has " + std::to_string(group.filters) + ")");
      }
    }
    if (mask.remove.empty()) continue;
    if (!group.prunable) throw Error(ErrorKind::range, "group '" + group.id + "' shares channels with the input");
    if (mask.remove.size() >= group.filters) {
      throw Error(ErrorKind::range, "mask would remove every filter of group '" + group.id + "'");
    }
    const auto keep = detail::kept_indices(group.filters, mask.remove);
    for (const auto& member : group.members) {
      LayerSpec& l = out.layer(member);
      Tensor& w = out.params.at(l.weight_name());
      Tensor& b = out.params.at(l.bias_name());
      w = detail::slice_axis(w, 0, keep);
      b = detail::slice_axis(b, 0, keep);
      l.filters = keep.size();
    }
    for (const auto& consumer : group.consumers) {
      LayerSpec& l = out.layer(consumer);
      Tensor& w = out.params.at(l.weight_name());
      w = detail::slice_axis(w, l.kind == LayerKind::conv ? 1 : 0, keep);
      l.in_channels = keep.size();
    }
  }
  infer_shapes(out);
  return out;
}

struct LayerFilterCount {
  std::size_t before = 0;
  std::size_t after = 0;
};

struct CompressionReport {
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double rate = 0.0;  // parameter compression, the headline number
  std::size_t filters_before = 0;
  std::size_t filters_after = 0;
  double filter_rate = 0.0;
  std::size_t macs_before = 0;
  std::size_t macs_after = 0;
  double mac_rate = 0.0;
  double speedup = 1.0;
  std::map<std::string, LayerFilterCount> layers;
};

inline CompressionReport compression_report(const NetworkGraph& before, const NetworkGraph& after) {
  CompressionReport r;
  r.params_before = parameter_count(before);
  r.params_after = parameter_count(after);
  r.rate = 1.0 - static_cast<double>(r.params_after) / static_cast<double>(r.params_before);
  r.filters_before = filter_count(before);
  r.filters_after = filter_count(after);
  r.filter_rate = r.filters_before ? 1.0 - static_cast<double>(r.filters_after) / static_cast<double>(r.filters_before) : 0.0;
  r.macs_before = mac_count(before);
  r.macs_after = mac_count(after);
  r.mac_rate = 1.0 - static_cast<double>(r.macs_after) / static_cast<double>(r.macs_before);
  r.speedup = static_cast<double>(r.macs_before) / static_cast<double>(r.macs_after);
  for (const auto* c : before.convs()) r.layers[c->id].before = c->filters;
  for (const auto* c : after.convs()) r.layers[c->id].after = c->filters;
  return r;
}

inline nlohmann::json to_json(const CompressionReport& r) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [id, c] : r.layers) layers[id] = {{"before", c.before}, {"after", c.after}};
  return {{"params_before", r.params_before}, {"params_after", r.params_after}, {"rate", r.rate},
          {"filters_before", r.filters_before}, {"filters_after", r.filters_after}, {"filter_rate", r.filter_rate},
          {"macs_before", r.macs_before}, {"macs_after", r.macs_after}, {"mac_rate", r.mac_rate},
          {"speedup", r.speedup}, {"layers", layers}};
}

/// {group id -> sorted index list}, keys in lexicographic order.
inline nlohmann::json masks_to_json(std::span<const PruneMask> masks) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& m : masks) out[m.group] = std::vector<std::size_t>(m.remove.begin(), m.remove.end());
  return out;
}

inline std::vector<PruneMask> masks_from_json(const nlohmann::json& j, VoteStrategy strategy = VoteStrategy::intersection) {
  if (!j.is_object()) throw Error(ErrorKind::format, "mask file must be a JSON object");
  std::vector<PruneMask> out;
  for (const auto& [group, list] : j.items()) {
    if (!list.is_array()) throw Error(ErrorKind::format, "mask entry '" + group + "' must be an index list");
    PruneMask m{group, {}, strategy};
    for (const auto& v : list) {
      if (!v.is_number_unsigned()) throw Error(ErrorKind::format, "mask entry '" + group + "' has a non-index value");
      m.remove.insert(v.get<std::size_t>());
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace dwgl
