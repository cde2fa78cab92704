#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dwgl/config.hpp"
#include "dwgl/pipeline.hpp"

namespace dwgl {

namespace detail {

struct CliOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string checkpoint;
};

inline ExperimentConfig resolve_config(const CliOptions& o) {
  ConfigValues values = o.config.empty() ? ConfigValues{} : read_config_file(o.config);
  for (const auto& ov : o.overrides) apply_override(values, ov);
  if (o.seed) values["seed"] = std::to_string(*o.seed);
  return make_config(values);
}

inline fs::path output_dir(const CliOptions& o) {
  if (!o.out.empty()) return o.out;
  if (const char* env = std::getenv("DWGL_OUT"); env && *env) return env;
  return "dwgl-out";
}

inline void require_checkpoint(const CliOptions& o, const char* command) {
  if (o.checkpoint.empty()) throw Error(ErrorKind::config, std::string(command) + " needs --checkpoint <path>");
}

inline Split load_split(const ExperimentConfig& cfg) {
  const Seeds seeds(cfg.schedule.seed);
  return split_holdout(load_data(cfg.data, seeds.data), cfg.data.holdout, seeds.split);
}

inline NetworkGraph initial_network(const ExperimentConfig& cfg, const CliOptions& o) {
  if (!o.checkpoint.empty()) return load_network(cfg.net, o.checkpoint);
  return build(cfg.net, Seeds(cfg.schedule.seed).init);
}

inline std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

inline int cmd_train(const CliOptions& o, bool finetune, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  if (finetune) require_checkpoint(o, "finetune");
  const fs::path dir = output_dir(o);
  write_text(dir / "resolved-config", resolved_config_text(cfg));
  const Split data = load_split(cfg);
  NetworkGraph net = initial_network(cfg, o);
  const std::size_t epochs = finetune ? cfg.schedule.epochs_finetune : cfg.schedule.epochs_train;
  const auto history = train(net, data, cfg.schedule, {epochs, !finetune, 0, Seeds(cfg.schedule.seed).order});
  append_history(dir / "history.csv", history);
  const std::string tag = finetune ? "finetuned" : "trained";
  write_activations(dir / "activations", tag, filter_activations(net));
  save_checkpoint(dir / "checkpoints" / (tag + ".dwgl"), checkpoint_tensors(net));
  out << tag << ": " << epochs << " epochs, held-out accuracy " << evaluate(net, data.heldout).accuracy << ", checkpoint "
      << (dir / "checkpoints" / (tag + ".dwgl")).string() << "\n";
  return 0;
}

inline int cmd_prune(const CliOptions& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  require_checkpoint(o, "prune");
  const fs::path dir = output_dir(o);
  write_text(dir / "resolved-config", resolved_config_text(cfg));
  const Split data = load_split(cfg);
  const NetworkGraph net = load_network(cfg.net, o.checkpoint);
  const PruneOutcome p = prune_round(net, cfg.schedule.threshold, cfg.schedule.strategy);
  nlohmann::json j = prune_json(p, cfg.schedule.threshold);
  j["accuracy_before"] = evaluate(net, data.heldout).accuracy;
  j["accuracy_after"] = evaluate(p.net, data.heldout).accuracy;
  write_activations(dir / "activations", "prune", p.activations);
  write_json(dir / "reports" / "prune.json", j);
  save_checkpoint(dir / "checkpoints" / "pruned.dwgl", checkpoint_tensors(p.net));
  out << "pruned: parameter rate " << p.report().rate << " (intersection " << p.report_intersection.rate << ", union "
      << p.report_union.rate << "), checkpoint " << (dir / "checkpoints" / "pruned.dwgl").string() << "\n";
  return 0;
}

inline int cmd_run(const CliOptions& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  const fs::path dir = output_dir(o);
  const ExperimentResult r = run_experiment(cfg, dir);
  for (const auto& a : r.arms) {
    out << a.name << ": baseline accuracy " << a.baseline_accuracy << ", final accuracy " << a.final_accuracy
        << ", parameter rate " << a.total.rate << ", MAC speedup " << a.total.speedup << "\n";
  }
  out << "results in " << dir.string() << "\n";
  return 0;
}

// Read-only: statistics, votes and masks of a checkpoint (or of the
// freshly initialized network) printed as JSON.
inline int cmd_analyze(const CliOptions& o, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(o);
  const NetworkGraph net = initial_network(cfg, o);
  const PruneOutcome p = prune_round(net, cfg.schedule.threshold, cfg.schedule.strategy);
  nlohmann::json j = prune_json(p, cfg.schedule.threshold);
  j["parameters"] = parameter_count(net);
  j["macs"] = mac_count(net);
  j["filters"] = filter_count(net);
  out << j.dump(2) << "\n";
  return 0;
}

// Regenerates summaries from files an earlier command left in the output directory.
inline int cmd_report(const CliOptions& o, std::ostream& out) {
  const fs::path dir = output_dir(o);
  const fs::path history_path = dir / "history.csv";
  if (!fs::exists(history_path)) throw Error(ErrorKind::io, "no history at " + history_path.string());
  const auto history = read_history(history_path);
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& h : history) {
    epochs.push_back({{"epoch", h.epoch}, {"split", h.split}, {"loss", h.loss}, {"penalty", h.penalty}, {"accuracy", h.accuracy}});
  }
  nlohmann::json summary = {{"epochs", epochs}};
  for (auto it = history.rbegin(); it != history.rend(); ++it) {
    if (it->split == "heldout") {
      summary["final_heldout_accuracy"] = it->accuracy;
      break;
    }
  }
  write_json(dir / "reports" / "history.json", summary);

  std::size_t plots = 0;
  nlohmann::json layers = nlohmann::json::object();
  if (fs::exists(dir / "activations")) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir / "activations")) {
      if (e.path().extension() == ".csv") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto norms = read_activation_csv(f);
      const std::string stem = f.stem().string();
      nlohmann::json s = to_json(activation_stats(norms));
      s["trend"] = norms.size() >= 3 ? nlohmann::json(trend_score(norms)) : nlohmann::json(nullptr);
      layers[stem] = s;
      write_text(dir / "reports" / "plots" / (stem + ".svg"), activation_svg(norms, stem));
      ++plots;
    }
  }
  write_json(dir / "reports" / "activations.json", layers);
  out << "report: " << history.size() << " history rows, " << plots << " activation plots in "
      << (dir / "reports").string() << "\n";
  return 0;
}

}  // namespace detail

/// Entry point of the `dwgl` binary. Exit codes: 0 success, 1 usage or
/// config error, 2 runtime error. Errors are one line on `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Directed-weighting group lasso: train, prune and analyze small residual CNNs", "dwgl"};
  detail::CliOptions o;
  app.add_option("--config", o.config, "INI config file");
  app.add_option("--out", o.out, "output directory (default: $DWGL_OUT, else ./dwgl-out)");
  app.add_option("--seed", o.seed, "overrides the config seed");
  app.add_option("--override", o.overrides, "dotted key=value, repeatable")->take_all();
  app.add_option("--checkpoint", o.checkpoint, "checkpoint to start from");
  app.require_subcommand(1, 1);
  const std::vector<std::pair<const char*, const char*>> commands = {
      {"train", "train from scratch (or --checkpoint) with the penalty"},
      {"prune", "vote, resolve and apply masks to --checkpoint"},
      {"finetune", "penalty-free training of --checkpoint"},
      {"run", "full train/prune/finetune experiment"},
      {"analyze", "activation statistics and masks as JSON, no training"},
      {"report", "regenerate summaries and plots from an output directory"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "dwgl: usage error: " << detail::one_line(e.what()) << "\n" << app.help();
    return 1;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "train") return detail::cmd_train(o, false, out);
    if (cmd == "finetune") return detail::cmd_train(o, true, out);
    if (cmd == "prune") return detail::cmd_prune(o, out);
    if (cmd == "run") return detail::cmd_run(o, out);
    if (cmd == "analyze") return detail::cmd_analyze(o, out);
    return detail::cmd_report(o, out);
  } catch (const Error& e) {
    err << "dwgl: error: " << detail::one_line(e.what()) << "\n";
    return e.kind() == ErrorKind::config ? 1 : 2;
  } catch (const std::exception& e) {
    err << "dwgl: error: " << detail::one_line(e.what()) << "\n";
    return 2;
  }
}

}  // namespace dwgl
