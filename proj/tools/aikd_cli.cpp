// aikd: pretrain, distill, eval, aggregate and divergence-demo.
//
// Exit codes: 0 success, 2 invalid configuration or arguments, 3 non-finite
// loss, 4 I/O failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "aikd/aikd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace aikd;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNan = 3;
constexpr int kExitIo = 4;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::string config;
  bool verbose = false;
};

config::RunConfig load_config(const Globals& g) {
  if (g.config.empty()) throw config::ConfigError("--config", "a config file is required");
  auto cfg = config::load(g.config);
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + p.string());
}

int cmd_pretrain(const Globals& g) {
  const auto cfg = load_config(g);
  const auto ds = training::prepare_dataset(cfg);
  training::PhaseOptions opts;
  opts.verbose = g.verbose;
  const auto res = training::pretrain(cfg, ds, fs::path(g.out) / cfg.name, opts);
  std::cout << json{{"checkpoint", res.final_checkpoint.string()}, {"metrics", res.evaluation.report.to_json()}}.dump()
            << '\n';
  return 0;
}

int cmd_distill(const Globals& g, const std::string& ablation, const std::string& superior,
                const std::string& resume) {
  auto cfg = load_config(g);
  if (!ablation.empty()) {
    try {
      cfg.train.ablation = config::ablation_from_string(ablation);
    } catch (const std::invalid_argument& e) {
      throw config::ConfigError("--ablation", e.what());
    }
  }
  std::optional<fs::path> sup;
  if (!superior.empty()) sup = superior;
  if (!sup && training::needs_superior(cfg.train.ablation))
    throw config::ConfigError("--superior", "preset '" + config::to_string(cfg.train.ablation) +
                                                "' needs the phase-1 checkpoint; run `aikd pretrain` first");
  const auto ds = training::prepare_dataset(cfg);
  training::PhaseOptions opts;
  opts.verbose = g.verbose;
  if (!resume.empty()) opts.resume_from = resume;
  const auto res = training::distill(cfg, ds, sup, fs::path(g.out) / cfg.name, opts);
  std::cout << json{{"checkpoint", res.final_checkpoint.string()}, {"metrics", res.evaluation.report.to_json()}}.dump()
            << '\n';
  return 0;
}

int cmd_eval(const Globals& g, const std::string& ckpt_path, bool calibrate) {
  auto cfg = load_config(g);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto spec = cfg.classifier_spec();
  if (!ckpt.meta.contains("spec") || !(models::ClassifierSpec::from_json(ckpt.meta.at("spec")) == spec))
    throw config::ConfigError("model", "checkpoint " + ckpt_path + " was trained with spec " +
                                           ckpt.meta.value("spec", json()).dump() + ", config describes " +
                                           spec.to_json().dump());
  models::Classifier model(spec, 0);
  model.load_from(ckpt, "student.");
  model.freeze();
  const auto ds = training::prepare_dataset(cfg);
  const auto ev = metrics::evaluate(model, ds.val, ds.manifest, cfg.metrics.n_bins, calibrate || cfg.metrics.calibrate);
  const fs::path dir = fs::path(g.out) / cfg.name / "eval";
  fs::create_directories(dir);
  write_file(dir / "metrics.json", ev.report.to_json().dump(2) + "\n");
  std::ofstream csv(dir / "reliability.csv");
  metrics::write_reliability_csv(csv, ev.reliability);
  if (!csv) throw std::runtime_error("cannot write " + (dir / "reliability.csv").string());
  std::cout << ev.report.to_json().dump() << '\n';
  return 0;
}

int cmd_aggregate(const Globals& g, const std::vector<std::string>& runs) {
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const json summary = aggregate::aggregate_runs(dirs);
  fs::create_directories(g.out);
  write_file(fs::path(g.out) / "aggregate.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << '\n';
  return 0;
}

json number_or_inf(double v) { return std::isinf(v) ? json("inf") : json(v); }

int cmd_divergence(double theta, std::size_t grid) {
  divergence::DistanceReport r;
  try {
    r = divergence::parallel_lines_case(theta, grid);
  } catch (const std::invalid_argument& e) {
    throw config::ConfigError("--grid/--theta", e.what());
  }
  std::cout << json{{"theta", theta},
                    {"grid", grid},
                    {"tv", r.tv},
                    {"kl", number_or_inf(r.kl)},
                    {"js", r.js},
                    {"wasserstein", r.wasserstein}}
                   .dump()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial self-distillation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", g.out, "Root directory for run outputs")->capture_default_str();
  app.add_option("--config", g.config, "Run configuration (JSON)");
  app.add_flag("-v,--verbose", g.verbose, "Per-epoch progress on stderr");

  auto* pretrain = app.add_subcommand("pretrain", "Phase 1: train the superior model with cross-entropy");

  auto* distill = app.add_subcommand("distill", "Phase 2: distill a fresh student");
  std::string ablation, superior, resume;
  distill->add_option("--ablation", ablation, "full, no_adv, only_progressive, only_guide or baseline");
  distill->add_option("--superior", superior, "Phase-1 checkpoint");
  distill->add_option("--resume", resume, "Continue from a phase-2 checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  std::string ckpt;
  bool calibrate = false;
  eval->add_option("--ckpt", ckpt, "Checkpoint to evaluate")->required();
  eval->add_flag("--calibrate", calibrate, "Fit a temperature and report ECE after scaling");

  auto* agg = app.add_subcommand("aggregate", "Mean and sample std of metrics across runs");
  std::vector<std::string> runs;
  agg->add_option("runs", runs, "Run directories")->required();

  auto* demo = app.add_subcommand("divergence-demo", "Distances between two parallel lines");
  double theta = 1.0;
  std::size_t grid = 16;
  demo->add_option("--theta", theta, "Horizontal offset of the second line")->capture_default_str();
  demo->add_option("--grid", grid, "Points per line (16..64)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*pretrain) return cmd_pretrain(g);
    if (*distill) return cmd_distill(g, ablation, superior, resume);
    if (*eval) return cmd_eval(g, ckpt, calibrate);
    if (*agg) return cmd_aggregate(g, runs);
    if (*demo) return cmd_divergence(theta, grid);
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const models::SpecMismatchError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const training::NanAbort& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return kExitNan;
  } catch (const CheckpointError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const data::DataError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitConfig;
}
