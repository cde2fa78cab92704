#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dwgl/error.hpp"

namespace dwgl {

/// Summary of one layer's filter norms. A filter counts as activated when
/// its norm is >= the layer mean; variance is the population variance.
struct ActivationStats {
  double median = 0.0;
  double max = 0.0;
  double variance = 0.0;
  std::size_t activated_count = 0;
  double activated_median = 0.0;
  double overall_mean = 0.0;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

inline ActivationStats activation_stats(std::span<const double> norms) {
  if (norms.empty()) throw Error(ErrorKind::range, "activation_stats of an empty list");
  ActivationStats s;
  const double n = static_cast<double>(norms.size());
  s.overall_mean = std::accumulate(norms.begin(), norms.end(), 0.0) / n;
  s.max = *std::max_element(norms.begin(), norms.end());
  double ss = 0.0;
  for (double v : norms) ss += (v - s.overall_mean) * (v - s.overall_mean);
  s.variance = ss / n;
  s.median = detail::median_of({norms.begin(), norms.end()});
  std::vector<double> activated;
  for (double v : norms) {
    if (v >= s.overall_mean) activated.push_back(v);
  }
  s.activated_count = activated.size();
  if (!activated.empty()) s.activated_median = detail::median_of(std::move(activated));
  return s;
}

/// Spearman rank correlation between filter index and norm. Strongly
/// negative means low indices carry the large norms.
inline double trend_score(std::span<const double> norms) {
  if (norms.size() < 3) throw Error(ErrorKind::range, "trend_score needs at least 3 filters");
  const auto r = detail::average_ranks(norms);
  const double n = static_cast<double>(norms.size());
  const double mean = (n + 1.0) / 2.0;
  double cov = 0.0, var_idx = 0.0, var_r = 0.0;
  for (std::size_t k = 0; k < norms.size(); ++k) {
    const double di = static_cast<double>(k + 1) - mean;
    const double dr = r[k] - mean;
    cov += di * dr;
    var_idx += di * di;
    var_r += dr * dr;
  }
  if (var_r == 0.0) return 0.0;
  return cov / std::sqrt(var_idx * var_r);
}

inline nlohmann::json to_json(const ActivationStats& s) {
  return {{"median", s.median},
          {"max", s.max},
          {"variance", s.variance},
          {"variance_kind", "population"},
          {"activated_count", s.activated_count},
          {"activated_median", s.activated_median},
          {"overall_mean", s.overall_mean}};
}

// ---------------------------------------------------------------------------
// Files

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::io, "short write to " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

/// `index,norm` rows, 1-based index.
inline void write_activation_csv(const std::filesystem::path& path, std::span<const double> norms) {
  std::ostringstream os;
  os << "index,norm\n";
  for (std::size_t k = 0; k < norms.size(); ++k) os << k + 1 << ',' << format_number(norms[k]) << '\n';
  write_text(path, os.str());
}

inline std::vector<double> read_activation_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != "index,norm") {
    throw Error(ErrorKind::format, path.string() + ": expected header 'index,norm'");
  }
  std::vector<double> norms;
  for (std::size_t row = 2; std::getline(in, line); ++row) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument(line);
      const auto index = std::stoul(line.substr(0, comma));
      if (index != norms.size() + 1) throw std::invalid_argument(line);
      norms.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw Error(ErrorKind::format, path.string() + ": malformed row " + std::to_string(row));
    }
  }
  return norms;
}

inline std::string xml_escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Index-vs-norm scatter plot as a standalone SVG document.
inline std::string activation_svg(std::span<const double> norms, const std::string& title) {
  constexpr double w = 480, h = 280, margin = 40;
  const double top = norms.empty() ? 1.0 : std::max(*std::max_element(norms.begin(), norms.end()), 1e-12);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << margin << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">" << xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\"" << w - 10 << "\" y2=\"" << h - margin
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\"" << h - margin
     << "\" stroke=\"black\"/>\n";
  const double span_x = w - margin - 20;
  const double span_y = h - 2 * margin;
  for (std::size_t k = 0; k < norms.size(); ++k) {
    const double x = margin + 10 + span_x * (norms.size() > 1 ? static_cast<double>(k) / static_cast<double>(norms.size() - 1) : 0.5);
    const double y = h - margin - span_y * norms[k] / top;
    os << "<circle cx=\"" << format_number(x) << "\" cy=\"" << format_number(y) << "\" r=\"3\" fill=\"steelblue\"/>\n";
  }
  os << "<text x=\"" << margin << "\" y=\"" << h - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">filter index 1.."
     << norms.size() << ", max norm " << format_number(top) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Training history

struct HistoryRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "heldout"
  double loss = 0.0;
  double penalty = 0.0;
  double accuracy = 0.0;

  friend bool operator==(const HistoryRecord&, const HistoryRecord&) = default;
};

inline constexpr const char* kHistoryHeader = "epoch,split,loss,penalty,accuracy";

inline std::string history_row(const HistoryRecord& r) {
  return std::to_string(r.epoch) + ',' + r.split + ',' + format_number(r.loss) + ',' + format_number(r.penalty) + ',' +
         format_number(r.accuracy);
}

/// Appends rows, writing the header when the file is new.
inline void append_history(const std::filesystem::path& path, std::span<const HistoryRecord> records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorKind::io, "cannot append to " + path.string());
  if (fresh) out << kHistoryHeader << '\n';
  for (const auto& r : records) out << history_row(r) << '\n';
}

inline std::vector<HistoryRecord> read_history(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != kHistoryHeader) {
    throw Error(ErrorKind::format, path.string() + ": expected header '" + kHistoryHeader + "'");
  }
  std::vector<HistoryRecord> out;
  for (std::size_t row = 2; std::getline(in, line); ++row) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    try {
      if (cells.size() != 5) throw std::invalid_argument(line);
      out.push_back({std::stoul(cells[0]), cells[1], std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4])});
    } catch (const std::exception&) {
      throw Error(ErrorKind::format, path.string() + ": malformed row " + std::to_string(row));
    }
  }
  return out;
}

}  // namespace dwgl
