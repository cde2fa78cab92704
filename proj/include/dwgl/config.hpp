#pragma once

#include <cstdint>
#include <fstream>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dwgl/data.hpp"
#include "dwgl/error.hpp"
#include "dwgl/network.hpp"
#include "dwgl/pruning.hpp"
#include "dwgl/regularizer.hpp"
#include "dwgl/report.hpp"

namespace dwgl {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar10
  SynthConfig synth;
  std::string dir;           // CIFAR-10 binary batches
  double holdout = 0.1;
  std::string cache;         // optional dataset cache file
};

struct Schedule {
  std::size_t rounds = 3;
  std::size_t epochs_train = 20;
  std::size_t epochs_finetune = 10;  // penalty-free, after the last round
  double lr = 0.02;
  double lr_decay = 1.0;             // multiplied in every lr_decay_epochs
  std::size_t lr_decay_epochs = 0;   // 0: constant lr
  std::size_t batch = 32;
  std::size_t warmup_epochs = 2;     // linear lambda_g ramp; 0 disables
  std::uint64_t seed = 1;
  RegularizerConfig reg;
  ThresholdRule threshold;
  VoteStrategy strategy = VoteStrategy::intersection;

  void validate() const {
    if (epochs_train == 0) throw Error(ErrorKind::config, "train.epochs must be positive");
    if (!(lr > 0.0)) throw Error(ErrorKind::config, "train.lr must be > 0");
    if (!(lr_decay > 0.0)) throw Error(ErrorKind::config, "train.lr_decay must be > 0");
    if (batch == 0) throw Error(ErrorKind::config, "train.batch must be positive");
    reg.validate();
  }

  /// Learning rate in effect during `epoch` (0-based, counted within a round).
  double lr_at(std::size_t epoch) const {
    if (lr_decay_epochs == 0) return lr;
    double v = lr;
    for (std::size_t e = lr_decay_epochs; e <= epoch; e += lr_decay_epochs) v *= lr_decay;
    return v;
  }

  /// lambda_g during `epoch` of a round, ramped linearly over the warmup.
  double lambda_g_at(std::size_t epoch) const {
    if (warmup_epochs == 0 || epoch >= warmup_epochs) return reg.lambda_g;
    return reg.lambda_g * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
  }
};

struct ExperimentConfig {
  NetworkConfig net;
  DataConfig data;
  Schedule schedule;
  bool compare = false;  // also run a plain group-lasso arm
};

namespace detail {

// Every key the loader understands; anything else is a config error.
inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "seed",
      "net.preset", "net.stages", "net.classes",
      "data.source", "data.classes", "data.per_class", "data.size", "data.channels", "data.sigma",
      "data.jitter", "data.dir", "data.holdout", "data.cache",
      "train.epochs", "train.epochs_finetune", "train.lr", "train.lr_decay", "train.lr_decay_epochs",
      "train.batch", "train.warmup_epochs",
      "schedule.rounds",
      "reg.lambda", "reg.lambda_g", "reg.directed", "reg.rescale", "reg.steepness", "reg.epsilon",
      "reg.mode", "reg.direction", "reg.l2",
      "prune.threshold", "prune.strategy",
      "experiment.compare",
  };
  return keys;
}

inline void flatten(const boost::property_tree::ptree& tree, const std::string& prefix,
                    std::map<std::string, std::string>& out) {
  for (const auto& [key, child] : tree) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (child.empty()) {
      out[name] = child.data();
    } else {
      flatten(child, name, out);
    }
  }
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw Error(ErrorKind::config, key + ": expected true|false, got '" + text + "'");
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!text.empty() && text[0] == '-') throw Error(ErrorKind::config, key + ": must be non-negative, got '" + text + "'");
    in >> v;
  } else {
    in >> v;
  }
  if (in.fail() || !(in >> std::ws).eof()) {
    throw Error(ErrorKind::config, key + ": cannot parse '" + text + "'");
  }
  return v;
}

}  // namespace detail

/// Flat dotted-key view of a config. Sections of the INI file become key
/// prefixes; keys before the first section stay bare.
using ConfigValues = std::map<std::string, std::string>;

inline ConfigValues parse_config_text(const std::string& text, const std::string& source = "<config>") {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(ErrorKind::config, source + ": line " + std::to_string(e.line()) + ": " + e.message());
  }
  ConfigValues out;
  detail::flatten(tree, "", out);
  return out;
}

inline ConfigValues read_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::config, "config file not found: " + path.string());
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

/// Applies "dotted.key=value".
inline void apply_override(ConfigValues& values, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorKind::config, "override '" + assignment + "' is not key=value");
  }
  values[assignment.substr(0, eq)] = assignment.substr(eq + 1);
}

inline ExperimentConfig make_config(const ConfigValues& values) {
  for (const auto& [key, value] : values) {
    if (!detail::known_keys().contains(key)) throw Error(ErrorKind::config, "unknown config key '" + key + "'");
  }
  ExperimentConfig cfg;
  auto get = [&](const char* key, auto& target) {
    const auto it = values.find(key);
    if (it != values.end()) target = detail::parse_value<std::decay_t<decltype(target)>>(key, it->second);
  };
  auto text = [&](const char* key) -> const std::string* {
    const auto it = values.find(key);
    return it == values.end() ? nullptr : &it->second;
  };

  Schedule& s = cfg.schedule;
  get("seed", s.seed);

  cfg.net.preset = "resnet-tiny-8";
  if (const auto* v = text("net.preset")) cfg.net.preset = *v;
  if (const auto* v = text("net.stages")) {
    cfg.net.stages = NetworkConfig::parse_stages(*v);
  } else {
    cfg.net.stages = NetworkConfig::preset_stages(cfg.net.preset);
  }

  DataConfig& d = cfg.data;
  if (const auto* v = text("data.source")) d.source = *v;
  if (d.source != "synthetic" && d.source != "cifar10") {
    throw Error(ErrorKind::config, "data.source must be synthetic or cifar10, got '" + d.source + "'");
  }
  get("data.classes", d.synth.classes);
  get("data.per_class", d.synth.per_class);
  get("data.size", d.synth.size);
  get("data.channels", d.synth.channels);
  get("data.sigma", d.synth.sigma);
  get("data.jitter", d.synth.jitter);
  get("data.holdout", d.holdout);
  if (const auto* v = text("data.dir")) d.dir = *v;
  if (const auto* v = text("data.cache")) d.cache = *v;
  if (d.source == "cifar10") {
    if (d.dir.empty()) throw Error(ErrorKind::config, "data.dir is required when data.source = cifar10");
    d.synth.classes = 10;
    d.synth.channels = 3;
    d.synth.size = kCifarSide;
  }
  if (!(d.holdout > 0.0 && d.holdout < 1.0)) throw Error(ErrorKind::config, "data.holdout must lie in (0,1)");
  cfg.net.in_channels = d.synth.channels;
  cfg.net.height = cfg.net.width = d.synth.size;
  cfg.net.classes = d.synth.classes;
  get("net.classes", cfg.net.classes);
  if (cfg.net.classes != d.synth.classes) throw Error(ErrorKind::config, "net.classes must equal data.classes");

  get("train.epochs", s.epochs_train);
  get("train.epochs_finetune", s.epochs_finetune);
  get("train.lr", s.lr);
  get("train.lr_decay", s.lr_decay);
  get("train.lr_decay_epochs", s.lr_decay_epochs);
  get("train.batch", s.batch);
  get("train.warmup_epochs", s.warmup_epochs);
  get("schedule.rounds", s.rounds);

  RegularizerConfig& r = s.reg;
  get("reg.lambda", r.lambda);
  get("reg.lambda_g", r.lambda_g);
  get("reg.directed", r.directed);
  get("reg.rescale", r.rescale);
  get("reg.steepness", r.steepness);
  get("reg.epsilon", r.epsilon);
  if (const auto* v = text("reg.mode")) {
    if (*v == "subgradient") r.mode = RegMode::subgradient;
    else if (*v == "proximal") r.mode = RegMode::proximal;
    else throw Error(ErrorKind::config, "reg.mode must be subgradient or proximal, got '" + *v + "'");
  }
  if (const auto* v = text("reg.direction")) {
    if (*v == "increasing") r.direction = Direction::increasing;
    else if (*v == "decreasing") r.direction = Direction::decreasing;
    else throw Error(ErrorKind::config, "reg.direction must be increasing or decreasing, got '" + *v + "'");
  }
  if (const auto* v = text("reg.l2")) {
    if (*v == "decoupled") r.l2 = L2Mode::decoupled;
    else if (*v == "coupled") r.l2 = L2Mode::coupled;
    else throw Error(ErrorKind::config, "reg.l2 must be decoupled or coupled, got '" + *v + "'");
  }

  if (const auto* v = text("prune.threshold")) s.threshold = ThresholdRule::parse(*v);
  if (const auto* v = text("prune.strategy")) s.strategy = parse_strategy(*v);
  get("experiment.compare", cfg.compare);

  s.validate();
  return cfg;
}

inline std::string stages_string(const std::vector<StageSpec>& stages) {
  std::string out;
  for (const auto& st : stages) {
    if (!out.empty()) out += ',';
    out += std::to_string(st.channels) + "x" + std::to_string(st.blocks);
  }
  return out;
}

/// Every resolved value, in the same INI syntax the loader reads.
inline std::string resolved_config_text(const ExperimentConfig& cfg) {
  const Schedule& s = cfg.schedule;
  const RegularizerConfig& r = s.reg;
  auto num = [](double v) { return format_number(v); };
  auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
  std::ostringstream os;
  os << "seed = " << s.seed << "\n\n";
  os << "[net]\npreset = " << cfg.net.preset << "\nstages = " << stages_string(cfg.net.stages)
     << "\nclasses = " << cfg.net.classes << "\n\n";
  os << "[data]\nsource = " << cfg.data.source << "\nclasses = " << cfg.data.synth.classes
     << "\nper_class = " << cfg.data.synth.per_class << "\nsize = " << cfg.data.synth.size
     << "\nchannels = " << cfg.data.synth.channels << "\nsigma = " << num(cfg.data.synth.sigma)
     << "\njitter = " << num(cfg.data.synth.jitter) << "\nholdout = " << num(cfg.data.holdout) << "\n";
  if (!cfg.data.dir.empty()) os << "dir = " << cfg.data.dir << "\n";
  if (!cfg.data.cache.empty()) os << "cache = " << cfg.data.cache << "\n";
  os << "\n[train]\nepochs = " << s.epochs_train << "\nepochs_finetune = " << s.epochs_finetune
     << "\nlr = " << num(s.lr) << "\nlr_decay = " << num(s.lr_decay) << "\nlr_decay_epochs = " << s.lr_decay_epochs
     << "\nbatch = " << s.batch << "\nwarmup_epochs = " << s.warmup_epochs << "\n\n";
  os << "[schedule]\nrounds = " << s.rounds << "\n\n";
  os << "[reg]\nlambda = " << num(r.lambda) << "\nlambda_g = " << num(r.lambda_g) << "\ndirected = " << flag(r.directed)
     << "\nrescale = " << flag(r.rescale) << "\nsteepness = " << num(r.steepness) << "\nepsilon = " << num(r.epsilon)
     << "\nmode = " << (r.mode == RegMode::proximal ? "proximal" : "subgradient")
     << "\ndirection = " << (r.direction == Direction::decreasing ? "decreasing" : "increasing")
     << "\nl2 = " << (r.l2 == L2Mode::coupled ? "coupled" : "decoupled") << "\n\n";
  os << "[prune]\nthreshold = " << s.threshold.str() << "\nstrategy = " << to_string(s.strategy) << "\n\n";
  os << "[experiment]\ncompare = " << flag(cfg.compare) << "\n";
  return os.str();
}

}  // namespace dwgl
