#pragma once

// Mean and sample standard deviation (n - 1) of metrics across repeated runs.

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "aikd/config.hpp"

namespace aikd::aggregate {

namespace fs = std::filesystem;
using nlohmann::json;

inline json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  return json::parse(is);
}

/// The phase-2 report when present, otherwise phase 1.
inline fs::path metrics_path(const fs::path& run_dir) {
  for (const char* phase : {"phase2", "phase1"})
    if (fs::exists(run_dir / phase / "metrics.json")) return run_dir / phase / "metrics.json";
  throw std::runtime_error(run_dir.string() + " has no metrics.json");
}

/// Config with the fields allowed to differ between repeats removed.
inline json comparable_config(json cfg) {
  cfg.erase("name");
  cfg.erase("seed");
  return cfg;
}

struct Stat {
  double mean = 0;
  double std = 0;  // sample standard deviation; 0 for a single run
};

inline Stat mean_std(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean_std of an empty list");
  Stat s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double sq = 0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(v.size() - 1));
  }
  return s;
}

/// Summary over run directories written by pretrain/distill. Runs whose
/// configs differ in anything but name and seed are rejected.
inline json aggregate_runs(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw std::invalid_argument("aggregate needs at least one run directory");
  json reference;
  std::vector<json> reports;
  for (const auto& dir : run_dirs) {
    const json cfg = read_json(dir / "config.snapshot");
    const json cmp = comparable_config(cfg);
    if (reference.is_null()) {
      reference = cmp;
    } else if (cmp != reference) {
      const std::string a = reference.at("data").value("name", ""), b = cmp.at("data").value("name", "");
      if (a != b) throw config::ConfigError("data.name", "runs use different datasets ('" + a + "' vs '" + b + "')");
      throw config::ConfigError(dir.string(), "configuration differs from " + run_dirs.front().string());
    }
    reports.push_back(read_json(metrics_path(dir)));
  }
  json out = {{"n_runs", run_dirs.size()}, {"std_convention", "sample (n-1)"}, {"runs", json::array()}};
  for (const auto& d : run_dirs) out["runs"].push_back(d.string());
  for (const char* key :
       {"top1_error", "top5_error", "macro_f1", "ece", "ece_after_ts", "calibration_temperature"}) {
    std::vector<double> values;
    for (const auto& r : reports)
      if (r.contains(key) && r.at(key).is_number()) values.push_back(r.at(key).get<double>());
    if (values.size() != reports.size()) continue;
    const Stat s = mean_std(values);
    out["metrics"][key] = {{"mean", s.mean}, {"std", s.std}};
  }
  return out;
}

}  // namespace aikd::aggregate
