#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dwgl/autodiff.hpp"
#include "dwgl/checkpoint.hpp"
#include "dwgl/config.hpp"
#include "dwgl/data.hpp"
#include "dwgl/network.hpp"
#include "dwgl/optim.hpp"
#include "dwgl/pruning.hpp"
#include "dwgl/regularizer.hpp"
#include "dwgl/report.hpp"
#include "dwgl/rng.hpp"

namespace dwgl {

namespace fs = std::filesystem;

// Seed offsets so the data, split, init and batch order draw from separate streams.
struct Seeds {
  std::uint64_t data, split, init, order;
  explicit Seeds(std::uint64_t seed) : data(seed), split(seed + 1), init(seed + 2), order(seed + 3) {}
};

// ---------------------------------------------------------------------------
// Data and checkpoints

inline Dataset load_data(const DataConfig& cfg, std::uint64_t seed) {
  if (!cfg.cache.empty() && fs::exists(cfg.cache)) return load_dataset(cfg.cache);
  Dataset ds = cfg.source == "cifar10" ? load_cifar10(cfg.dir) : synth_generate(cfg.synth, seed);
  if (!cfg.cache.empty()) save_dataset(cfg.cache, ds);
  return ds;
}

inline TensorMap checkpoint_tensors(const NetworkGraph& net) { return {net.params.begin(), net.params.end()}; }

/// Rebuilds the architecture from `cfg` and adopts the checkpoint's tensors.
/// Filter and channel counts follow the stored shapes, so pruned
/// checkpoints load without a mask history.
inline NetworkGraph network_from_tensors(const NetworkConfig& cfg, const TensorMap& tensors, const std::string& source) {
  NetworkGraph net = build(cfg, 0);
  for (const auto& [name, t] : tensors) {
    if (!net.params.contains(name)) {
      throw Error(ErrorKind::format, source + ": tensor '" + name + "' does not belong to the configured network");
    }
  }
  for (auto& l : net.layers) {
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
    for (const auto& name : {l.weight_name(), l.bias_name()}) {
      if (!tensors.contains(name)) throw Error(ErrorKind::format, source + ": missing tensor '" + name + "'");
    }
    const Tensor& w = tensors.at(l.weight_name());
    if (l.kind == LayerKind::conv) {
      if (w.rank() != 4) throw Error(ErrorKind::format, source + ": '" + l.weight_name() + "' must have rank 4");
      l.filters = w.dim(0);
      l.in_channels = w.dim(1);
    } else {
      if (w.rank() != 2) throw Error(ErrorKind::format, source + ": '" + l.weight_name() + "' must have rank 2");
      l.in_channels = w.dim(0);
    }
  }
  for (auto& [name, p] : net.params) p = tensors.at(name);
  try {
    infer_shapes(net);
  } catch (const Error& e) {
    throw Error(ErrorKind::format, source + ": " + e.what());
  }
  return net;
}

inline NetworkGraph load_network(const NetworkConfig& cfg, const fs::path& path) {
  return network_from_tensors(cfg, load_checkpoint(path), path.string());
}

// ---------------------------------------------------------------------------
// Training

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;
};

inline Evaluation evaluate(const NetworkGraph& net, const Dataset& ds, std::size_t batch = 256) {
  Evaluation ev;
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch); ++i) idx.push_back(i);
    Tape<float> tape;
    const Var logits = forward(tape, net, ds.gather(idx));
    const auto labels = ds.gather_labels(idx);
    const Var l = softmax_xent(tape, logits, labels);
    loss += static_cast<double>(tape.value(l)[0]) * static_cast<double>(idx.size());
    const auto pred = argmax_rows(tape.value(logits));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    ev.predictions.insert(ev.predictions.end(), pred.begin(), pred.end());
  }
  ev.loss = loss / static_cast<double>(ds.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  return ev;
}

namespace detail {

// Names the first layer whose parameters or outputs are not finite.
inline std::string first_nonfinite_layer(const NetworkGraph& net, const Tensor& images) {
  for (const auto& l : net.layers) {
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
    if (!net.params.at(l.weight_name()).all_finite() || !net.params.at(l.bias_name()).all_finite()) {
      return l.id + " (parameters)";
    }
  }
  Tape<float> tape;
  std::map<std::string, Var> outputs;
  forward(tape, net, images, &outputs);
  for (const auto& l : net.layers) {
    const auto it = outputs.find(l.id);
    if (it != outputs.end() && !tape.value(it->second).all_finite()) return l.id;
  }
  return "loss";
}

}  // namespace detail

struct TrainOptions {
  std::size_t epochs = 0;
  bool penalty = true;           // false: data loss and L2 only
  std::size_t epoch_offset = 0;  // numbering for the history
  std::uint64_t order_seed = 0;
};

/// SGD over shuffled mini-batches. The group term enters as a subgradient
/// or a proximal shrink per `s.reg.mode`. Returns one train and one
/// held-out record per epoch.
inline std::vector<HistoryRecord> train(NetworkGraph& net, const Split& data, const Schedule& s, const TrainOptions& opt) {
  s.validate();
  std::vector<HistoryRecord> history;
  Rng rng(opt.order_seed);
  std::vector<std::size_t> idx(data.train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    const std::size_t epoch = opt.epoch_offset + e + 1;
    RegularizerConfig reg = s.reg;
    reg.lambda_g = opt.penalty ? s.lambda_g_at(e) : 0.0;
    const double lr = s.lr_at(e);
    const float decay = reg.l2 == L2Mode::decoupled ? static_cast<float>(reg.lambda) : 0.0f;
    rng.shuffle(idx);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, b = 0; start < idx.size(); start += s.batch, ++b) {
      const std::span<const std::size_t> batch(idx.data() + start, std::min(s.batch, idx.size() - start));
      const Tensor images = data.train.gather(batch);
      const auto labels = data.train.gather_labels(batch);
      Tape<float> tape;
      const Var logits = forward(tape, net, images);
      const Var loss = softmax_xent(tape, logits, labels);
      const double value = tape.value(loss)[0];
      if (!std::isfinite(value)) {
        throw Error(ErrorKind::numeric, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                            std::to_string(b + 1) + "; first non-finite layer: " +
                                            detail::first_nonfinite_layer(net, images));
      }
      tape.backward(loss);
      auto grads = tape.parameter_grads();
      if (reg.mode == RegMode::subgradient) {
        accumulate(grads, penalty_gradient(net, reg));
      } else if (reg.l2 == L2Mode::coupled) {
        RegularizerConfig l2_only = reg;
        l2_only.lambda_g = 0.0;
        accumulate(grads, penalty_gradient(net, l2_only));
      }
      sgd_step(net.params, grads, static_cast<float>(lr), decay);
      if (reg.mode == RegMode::proximal) proximal_step(net, reg, lr);
      loss_sum += value * static_cast<double>(batch.size());
      const auto pred = argmax_rows(tape.value(logits));
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    }
    for (const auto& l : net.layers) {
      if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
      if (!net.params.at(l.weight_name()).all_finite() || !net.params.at(l.bias_name()).all_finite()) {
        throw Error(ErrorKind::numeric, "non-finite parameters after epoch " + std::to_string(epoch) + " in layer " + l.id);
      }
    }
    const double penalty = reg.lambda_g * group_penalty(net, reg);
    const auto n = static_cast<double>(data.train.size());
    history.push_back({epoch, "train", loss_sum / n, penalty, static_cast<double>(correct) / n});
    const Evaluation held = evaluate(net, data.heldout);
    history.push_back({epoch, "heldout", held.loss, penalty, held.accuracy});
  }
  return history;
}

// ---------------------------------------------------------------------------
// Pruning

struct PruneOutcome {
  NetworkGraph net;  // rewritten with the configured strategy
  ActivationMap activations;
  std::vector<PruneVote> votes;
  std::vector<PruneMask> masks_intersection;
  std::vector<PruneMask> masks_union;
  CompressionReport report_intersection;
  CompressionReport report_union;
  VoteStrategy strategy = VoteStrategy::intersection;

  const std::vector<PruneMask>& masks() const {
    return strategy == VoteStrategy::intersection ? masks_intersection : masks_union;
  }
  const CompressionReport& report() const {
    return strategy == VoteStrategy::intersection ? report_intersection : report_union;
  }
};

/// Groups that take part in voting: prunable ones with a regularized member.
inline bool votes_in(const CouplingGroup& g, const NetworkGraph& net) {
  if (!g.prunable) return false;
  return std::any_of(g.members.begin(), g.members.end(), [&](const std::string& m) { return net.layer(m).regularized; });
}

/// Activations, votes and masks under both strategies from one set of votes.
/// When a mask would remove a whole group, the filter with the largest
/// summed member norm survives.
inline PruneOutcome prune_round(const NetworkGraph& net, const ThresholdRule& rule, VoteStrategy strategy) {
  PruneOutcome out;
  out.strategy = strategy;
  out.activations = filter_activations(net);
  out.votes = propose_votes(out.activations, rule);
  for (const auto& g : coupling_groups(net)) {
    if (!votes_in(g, net)) continue;
    std::vector<double> priority(g.filters, 0.0);
    for (const auto& m : g.members) {
      const auto& norms = out.activations.at(m);
      for (std::size_t k = 0; k < g.filters; ++k) priority[k] += norms[k];
    }
    out.masks_intersection.push_back(resolve_vote(g, out.votes, VoteStrategy::intersection, priority));
    out.masks_union.push_back(resolve_vote(g, out.votes, VoteStrategy::union_, priority));
  }
  NetworkGraph by_intersection = apply_mask(net, out.masks_intersection);
  NetworkGraph by_union = apply_mask(net, out.masks_union);
  out.report_intersection = compression_report(net, by_intersection);
  out.report_union = compression_report(net, by_union);
  out.net = strategy == VoteStrategy::intersection ? std::move(by_intersection) : std::move(by_union);
  return out;
}

/// Per-layer activation statistics plus trend, as written into reports.
inline nlohmann::json activation_json(const ActivationMap& activations) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [layer, norms] : activations) {
    nlohmann::json j = to_json(activation_stats(norms));
    j["filters"] = norms.size();
    j["trend"] = norms.size() >= 3 ? nlohmann::json(trend_score(norms)) : nlohmann::json(nullptr);
    out[layer] = std::move(j);
  }
  return out;
}

inline nlohmann::json prune_json(const PruneOutcome& p, const ThresholdRule& rule) {
  nlohmann::json votes = nlohmann::json::object();
  for (const auto& v : p.votes) votes[v.layer] = std::vector<std::size_t>(v.remove.begin(), v.remove.end());
  return {{"threshold", rule.str()},
          {"strategy", std::string(to_string(p.strategy))},
          {"votes", votes},
          {"masks", masks_to_json(p.masks())},
          {"masks_intersection", masks_to_json(p.masks_intersection)},
          {"masks_union", masks_to_json(p.masks_union)},
          {"report", to_json(p.report())},
          {"rate_intersection", p.report_intersection.rate},
          {"rate_union", p.report_union.rate},
          {"layers", activation_json(p.activations)}};
}

// ---------------------------------------------------------------------------
// Experiment

struct RoundResult {
  std::size_t round = 0;
  double accuracy_before = 0.0;  // trained, unpruned
  double accuracy_after = 0.0;   // pruned graph, before any further training
  double rate_intersection = 0.0;
  double rate_union = 0.0;
  CompressionReport report;      // configured strategy, this round only
  ActivationMap activations;
  std::map<std::string, std::size_t> removed;  // group id -> |RM| under the configured strategy
};

struct ArmResult {
  std::string name;
  double baseline_accuracy = 0.0;  // after the first training stage, before any pruning
  double final_accuracy = 0.0;
  std::vector<RoundResult> rounds;
  CompressionReport total;         // original network vs final network
  ActivationMap final_activations;
};

struct ExperimentResult {
  std::vector<ArmResult> arms;
};

inline nlohmann::json to_json(const ArmResult& a) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& r : a.rounds) {
    rounds.push_back({{"round", r.round},
                      {"accuracy_before", r.accuracy_before},
                      {"accuracy_after", r.accuracy_after},
                      {"rate_intersection", r.rate_intersection},
                      {"rate_union", r.rate_union},
                      {"removed", r.removed},
                      {"report", to_json(r.report)}});
  }
  return {{"arm", a.name},
          {"baseline_accuracy", a.baseline_accuracy},
          {"final_accuracy", a.final_accuracy},
          {"accuracy_drop", a.baseline_accuracy - a.final_accuracy},
          {"compression", to_json(a.total)},
          {"rounds", rounds},
          {"final_layers", activation_json(a.final_activations)}};
}

inline nlohmann::json to_json(const ExperimentResult& r) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : r.arms) arms.push_back(to_json(a));
  return {{"arms", arms}};
}

inline void write_activations(const fs::path& dir, const std::string& tag, const ActivationMap& activations) {
  for (const auto& [layer, norms] : activations) write_activation_csv(dir / (tag + "-" + layer + ".csv"), norms);
}

/// One arm: `rounds` x (train with penalty, prune), then a penalty-free
/// finetune. With zero rounds only the first training stage runs.
inline ArmResult run_arm(const std::string& name, const ExperimentConfig& cfg, const Split& data, const fs::path& out) {
  const Schedule& s = cfg.schedule;
  const Seeds seeds(s.seed);
  ArmResult arm;
  arm.name = name;
  fs::create_directories(out);
  const fs::path history_path = out / "history.csv";
  fs::remove(history_path);

  NetworkGraph net = build(cfg.net, seeds.init);
  const NetworkGraph original = net;
  std::size_t epoch = 0;
  auto stage = [&](std::size_t epochs, bool penalty, std::uint64_t salt) {
    const auto h = train(net, data, s, {epochs, penalty, epoch, seeds.order + 1000 * salt});
    append_history(history_path, h);
    epoch += epochs;
  };

  if (s.rounds == 0) {
    stage(s.epochs_train, true, 0);
    arm.baseline_accuracy = arm.final_accuracy = evaluate(net, data.heldout).accuracy;
  }
  for (std::size_t r = 1; r <= s.rounds; ++r) {
    stage(s.epochs_train, true, r);
    RoundResult rr;
    rr.round = r;
    rr.accuracy_before = evaluate(net, data.heldout).accuracy;
    if (r == 1) arm.baseline_accuracy = rr.accuracy_before;
    const PruneOutcome p = prune_round(net, s.threshold, s.strategy);
    const std::string tag = "round-" + std::to_string(r);
    write_activations(out / "activations", tag, p.activations);
    net = p.net;
    rr.accuracy_after = evaluate(net, data.heldout).accuracy;
    rr.rate_intersection = p.report_intersection.rate;
    rr.rate_union = p.report_union.rate;
    rr.report = p.report();
    rr.activations = p.activations;
    for (const auto& m : p.masks()) rr.removed[m.group] = m.remove.size();
    nlohmann::json j = prune_json(p, s.threshold);
    j["round"] = r;
    j["accuracy_before"] = rr.accuracy_before;
    j["accuracy_after"] = rr.accuracy_after;
    write_json(out / "reports" / (tag + ".json"), j);
    save_checkpoint(out / "checkpoints" / (tag + ".dwgl"), checkpoint_tensors(net));
    arm.rounds.push_back(std::move(rr));
  }
  if (s.rounds > 0) {
    if (s.epochs_finetune > 0) stage(s.epochs_finetune, false, s.rounds + 1);
    arm.final_accuracy = evaluate(net, data.heldout).accuracy;
  }
  arm.total = compression_report(original, net);
  arm.final_activations = filter_activations(net);
  write_activations(out / "activations", "final", arm.final_activations);
  save_checkpoint(out / "checkpoints" / "final.dwgl", checkpoint_tensors(net));
  return arm;
}

/// Runs the configured arm, or both arms in compare mode. Both arms see the
/// same data, split, initialization and batch order.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  write_text(out / "resolved-config", resolved_config_text(cfg));
  const Seeds seeds(cfg.schedule.seed);
  const Dataset ds = load_data(cfg.data, seeds.data);
  const Split data = split_holdout(ds, cfg.data.holdout, seeds.split);
  ExperimentResult result;
  if (!cfg.compare) {
    result.arms.push_back(run_arm(cfg.schedule.reg.directed ? "dwgl" : "group-lasso", cfg, data, out));
  } else {
    for (const bool directed : {true, false}) {
      ExperimentConfig arm = cfg;
      arm.schedule.reg.directed = directed;
      const std::string name = directed ? "dwgl" : "group-lasso";
      result.arms.push_back(run_arm(name, arm, data, out / name));
      write_json(out / name / "result.json", to_json(result.arms.back()));
    }
  }
  write_json(out / "result.json", to_json(result));
  return result;
}

}  // namespace dwgl
