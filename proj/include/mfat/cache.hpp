#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "io.hpp"

namespace mfat {

/// Append-only log of likelihood evaluations keyed by (fidelity, theta
/// quantized to 15 decimal digits). One record per line:
///   level,theta_1,...,theta_d,log_likelihood
/// with shortest round-trip numbers. A torn final line from an interrupted
/// write is dropped on load; any other malformed line is an error.
class EvaluationCache {
 public:
  EvaluationCache() = default;

  /// Opens (creating if needed) the log at `path` and loads its records.
  explicit EvaluationCache(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (in) load(in);
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw std::runtime_error("cannot open evaluation cache '" + path_ + "'");
  }

  static std::string key(std::size_t level, std::span<const double> theta) {
    std::string k = std::to_string(level);
    char buf[40];
    for (double v : theta) {
      std::snprintf(buf, sizeof buf, ",%.15e", v);
      k += buf;
    }
    return k;
  }

  std::optional<double> find(std::size_t level, std::span<const double> theta) const {
    const auto it = records_.find(key(level, theta));
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  /// Records a new evaluation; re-inserting a known key is a contract
  /// violation (keys are unique).
  void insert(std::size_t level, std::span<const double> theta, double value) {
    auto [it, fresh] = records_.emplace(key(level, theta), value);
    if (!fresh) throw ContractViolation("evaluation cache: duplicate key " + it->first);
    if (level >= per_level_.size()) per_level_.resize(level + 1, 0);
    ++per_level_[level];
    if (out_.is_open()) {
      std::string line = std::to_string(level);
      for (double v : theta) line += "," + io::format_double(v);
      line += "," + io::format_double(value) + "\n";
      out_ << line;
      out_.flush();
      if (!out_) throw std::runtime_error("evaluation cache write failed");
    }
  }

  std::size_t size() const noexcept { return records_.size(); }

  /// Record counts per fidelity, padded to `levels` entries.
  std::vector<std::size_t> counts(std::size_t levels) const {
    std::vector<std::size_t> c = per_level_;
    c.resize(std::max(levels, c.size()), 0);
    return c;
  }

  const std::string& path() const noexcept { return path_; }

 private:
  void load(std::istream& in) {
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t start = 0, line_no = 0;
    while (start < text.size()) {
      const auto end = text.find('\n', start);
      if (end == std::string::npos) break;  // torn tail
      ++line_no;
      const std::string_view line(text.data() + start, end - start);
      start = end + 1;
      if (line.empty()) continue;
      const auto fields = io::split(line, ',');
      if (fields.size() < 3)
        throw std::runtime_error("evaluation cache '" + path_ + "' line " + std::to_string(line_no) + " malformed");
      std::size_t level = 0;
      std::vector<double> theta;
      double value = 0.0;
      try {
        level = static_cast<std::size_t>(std::stoull(std::string(fields[0])));
        for (std::size_t i = 1; i + 1 < fields.size(); ++i) theta.push_back(io::parse_double(fields[i]));
        value = io::parse_double(fields.back());
      } catch (const std::exception& e) {
        throw std::runtime_error("evaluation cache '" + path_ + "' line " + std::to_string(line_no) + ": " +
                                 e.what());
      }
      auto [it, fresh] = records_.emplace(key(level, theta), value);
      if (!fresh && it->second != value)
        throw std::runtime_error("evaluation cache '" + path_ + "' has conflicting values for " + it->first);
      if (fresh) {
        if (level >= per_level_.size()) per_level_.resize(level + 1, 0);
        ++per_level_[level];
      }
    }
    if (start < text.size()) {
      // Drop the torn tail so later appends start on a fresh line.
      io::write_file(path_, std::string_view(text.data(), start));
    }
  }

  std::string path_;
  std::ofstream out_;
  std::map<std::string, double> records_;
  std::vector<std::size_t> per_level_;
};

}  // namespace mfat
