#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dwgl/checkpoint.hpp"
#include "dwgl/error.hpp"
#include "dwgl/rng.hpp"
#include "dwgl/tensor.hpp"

namespace dwgl {

/// Images [N,C,H,W] in [-1,1] with integer labels in [0, classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.classes = classes;
    out.images = gather(indices);
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) out.labels.push_back(labels.at(i));
    return out;
  }

  Tensor gather(std::span<const std::size_t> indices) const {
    const std::size_t per = images.size() / images.dim(0);
    Tensor out(Shape{indices.size(), channels(), height(), width()});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const float* src = &images.values()[indices[i] * per];
      std::copy(src, src + per, &out.values()[i * per]);
    }
    return out;
  }

  std::vector<int> gather_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels.at(i));
    return out;
  }
};

struct SynthConfig {
  std::size_t classes = 10;
  std::size_t per_class = 120;
  std::size_t size = 16;
  std::size_t channels = 3;
  double sigma = 0.1;   // additive Gaussian noise
  double jitter = 0.3;  // per-sample phase jitter, radians (uniform +-)
};

/// Noise-free pattern of one class: a sinusoidal grating with a class-specific
/// orientation and spatial frequency, amplitude 0.8, identical across channels.
inline Tensor synth_template(const SynthConfig& cfg, std::size_t cls, double phase_offset = 0.0) {
  const std::size_t orientations = (cfg.classes + 1) / 2;
  const double theta = std::numbers::pi * static_cast<double>(cls % orientations) / static_cast<double>(orientations);
  const double cycles = cls < orientations ? 2.0 : 3.5;
  const double phase = 0.7 * static_cast<double>(cls) + phase_offset;
  const double n = static_cast<double>(cfg.size);
  Tensor out(Shape{cfg.channels, cfg.size, cfg.size});
  for (std::size_t y = 0; y < cfg.size; ++y) {
    for (std::size_t x = 0; x < cfg.size; ++x) {
      const double u = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
      const auto v = static_cast<float>(0.8 * std::sin(2.0 * std::numbers::pi * cycles * u / n + phase));
      for (std::size_t c = 0; c < cfg.channels; ++c) out[(c * cfg.size + y) * cfg.size + x] = v;
    }
  }
  return out;
}

/// Class-conditional grating patches plus noise, clipped to [-1,1]. Sample
/// order is a seeded shuffle, so labels are interleaved.
inline Dataset synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.classes < 2) throw Error(ErrorKind::config, "synthetic data needs at least 2 classes");
  if (cfg.per_class == 0 || cfg.size == 0 || cfg.channels == 0) {
    throw Error(ErrorKind::config, "synthetic per_class, size and channels must be positive");
  }
  if (!(cfg.sigma >= 0.0) || !(cfg.jitter >= 0.0)) throw Error(ErrorKind::config, "sigma and jitter must be >= 0");
  Rng rng(seed);
  const std::size_t n = cfg.classes * cfg.per_class;
  std::vector<int> order;
  order.reserve(n);
  for (std::size_t c = 0; c < cfg.classes; ++c) order.insert(order.end(), cfg.per_class, static_cast<int>(c));
  rng.shuffle(order);

  Dataset ds;
  ds.classes = cfg.classes;
  ds.images = Tensor(Shape{n, cfg.channels, cfg.size, cfg.size});
  ds.labels = order;
  const std::size_t per = cfg.channels * cfg.size * cfg.size;
  for (std::size_t i = 0; i < n; ++i) {
    const double jitter = cfg.jitter > 0.0 ? rng.uniform(-cfg.jitter, cfg.jitter) : 0.0;
    const Tensor t = synth_template(cfg, static_cast<std::size_t>(order[i]), jitter);
    for (std::size_t j = 0; j < per; ++j) {
      const double v = t[j] + (cfg.sigma > 0.0 ? cfg.sigma * rng.normal() : 0.0);
      ds.images[i * per + j] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  return ds;
}

/// Seeded split: the first round(fraction * N) shuffled samples are held out.
struct Split {
  Dataset train;
  Dataset heldout;
};

inline Split split_holdout(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorKind::config, "held-out fraction must lie in (0,1)");
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  const auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
  if (held == 0 || held >= ds.size()) throw Error(ErrorKind::config, "held-out split leaves an empty side");
  const std::span<const std::size_t> all(idx);
  return {ds.subset(all.subspan(held)), ds.subset(all.first(held))};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of 1 label byte + 3072 pixel bytes
// (R, G, B planes of 32x32, row-major).

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

/// Maps byte 0 to -1 and 255 to +1.
inline float normalize_byte(unsigned char b) { return static_cast<float>(b) / 127.5f - 1.0f; }

inline Dataset parse_cifar10(std::span<const unsigned char> bytes, const std::string& source = "<memory>") {
  const std::size_t records = bytes.size() / kCifarRecord;
  if (bytes.size() % kCifarRecord != 0) {
    throw Error(ErrorKind::format, source + ": short record at byte offset " + std::to_string(records * kCifarRecord) +
                                       " (" + std::to_string(bytes.size() % kCifarRecord) + " of " +
                                       std::to_string(kCifarRecord) + " bytes)");
  }
  if (records == 0) throw Error(ErrorKind::format, source + ": no records");
  Dataset ds;
  ds.classes = 10;
  ds.images = Tensor(Shape{records, 3, kCifarSide, kCifarSide});
  ds.labels.resize(records);
  for (std::size_t r = 0; r < records; ++r) {
    const std::size_t at = r * kCifarRecord;
    const unsigned char label = bytes[at];
    if (label > 9) {
      throw Error(ErrorKind::format, source + ": bad label byte " + std::to_string(label) + " at byte offset " +
                                         std::to_string(at));
    }
    ds.labels[r] = label;
    for (std::size_t j = 0; j < kCifarPixels; ++j) ds.images[r * kCifarPixels + j] = normalize_byte(bytes[at + 1 + j]);
  }
  return ds;
}

inline Dataset concat(const std::vector<Dataset>& parts) {
  if (parts.empty()) throw Error(ErrorKind::range, "nothing to concatenate");
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Dataset out;
  out.classes = parts.front().classes;
  Shape shape = parts.front().images.shape();
  shape[0] = n;
  out.images = Tensor(shape);
  std::size_t pos = 0;
  for (const auto& p : parts) {
    std::copy(p.images.values().begin(), p.images.values().end(), out.images.values().begin() + static_cast<std::ptrdiff_t>(pos));
    pos += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

/// Training batches (data_batch_1..5.bin, whichever exist) or the test batch.
inline Dataset load_cifar10(const std::filesystem::path& dir, bool test = false) {
  std::vector<std::filesystem::path> files;
  if (test) {
    files.push_back(dir / "test_batch.bin");
  } else {
    for (int i = 1; i <= 5; ++i) {
      const auto p = dir / ("data_batch_" + std::to_string(i) + ".bin");
      if (std::filesystem::exists(p)) files.push_back(p);
    }
    if (files.empty()) throw Error(ErrorKind::io, "no data_batch_*.bin files in " + dir.string());
  }
  std::vector<Dataset> parts;
  for (const auto& f : files) {
    const auto bytes = read_file_bytes(f);
    parts.push_back(parse_cifar10(bytes, f.string()));
  }
  return concat(parts);
}

// Datasets cached in the checkpoint container: "images", "labels" (as f32), "classes".
inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  TensorMap m;
  m.emplace("images", ds.images);
  m.emplace("labels", Tensor(Shape{ds.size()}, std::vector<float>(ds.labels.begin(), ds.labels.end())));
  m.emplace("classes", Tensor::scalar(static_cast<float>(ds.classes)));
  save_checkpoint(path, m);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const auto m = load_checkpoint(path);
  const auto need = [&](const char* key) -> const Tensor& {
    const auto it = m.find(key);
    if (it == m.end()) throw Error(ErrorKind::format, path.string() + ": dataset cache lacks '" + key + "'");
    return it->second;
  };
  Dataset ds;
  ds.images = need("images");
  ds.classes = static_cast<std::size_t>(need("classes")[0]);
  for (float v : need("labels").values()) ds.labels.push_back(static_cast<int>(v));
  if (ds.images.rank() != 4 || ds.images.dim(0) != ds.labels.size()) {
    throw Error(ErrorKind::format, path.string() + ": dataset cache images and labels disagree");
  }
  return ds;
}

}  // namespace dwgl
