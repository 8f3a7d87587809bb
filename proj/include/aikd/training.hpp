#pragma once

// Two-phase pipeline: phase 1 trains the superior model with cross-entropy,
// phase 2 distills a fresh student with guide, progressive and adversarial
// terms while a logit-space critic is updated on the same batches.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "aikd/augment.hpp"
#include "aikd/checkpoint.hpp"
#include "aikd/config.hpp"
#include "aikd/data.hpp"
#include "aikd/losses.hpp"
#include "aikd/metrics.hpp"
#include "aikd/models.hpp"
#include "aikd/optim.hpp"
#include "aikd/rng.hpp"

namespace aikd::training {

namespace fs = std::filesystem;
using config::Ablation;
using config::RunConfig;
using config::TrainConfig;
using nlohmann::json;

/// A loss became NaN or infinite; `diagnostic` holds the offending step record.
class NanAbort : public std::runtime_error {
 public:
  NanAbort(const std::string& what, json diag) : std::runtime_error(what), diagnostic(std::move(diag)) {}
  json diagnostic;
};

inline losses::LossWeights apply_ablation(Ablation preset, losses::LossWeights w) {
  switch (preset) {
    case Ablation::kFull: break;
    case Ablation::kNoAdv: w.omega = 0.0; break;
    case Ablation::kOnlyProgressive:
      w.alpha_g = 0.0;
      w.omega = 0.0;
      break;
    case Ablation::kOnlyGuide:
      w.alpha_p = 0.0;
      w.omega = 0.0;
      break;
    case Ablation::kBaseline:
      w.alpha_g = w.alpha_p = w.omega = 0.0;
      break;
  }
  return w;
}

/// Presets that distill from the phase-1 model.
inline bool needs_superior(Ablation preset) {
  return preset == Ablation::kFull || preset == Ablation::kNoAdv || preset == Ablation::kOnlyGuide;
}

inline double lr_at(const TrainConfig& t, int epoch) {
  return optim::MultiStepSchedule(t.lr, t.lr_milestones, t.lr_gamma).at(epoch);
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double ce = 0, lg = 0, lp = 0, la = 0, ld = 0, lr = 0, total = 0;

  json to_json() const {
    return {{"kind", "step"}, {"step", step}, {"epoch", epoch}, {"ce", ce},  {"lg", lg},
            {"lp", lp},       {"la", la},     {"ld", ld},       {"lr", lr},  {"total", total}};
  }
};

/// Everything phase 2 mutates.
struct RunState {
  int epoch = 0;
  long global_step = 0;
  models::ModelTriple triple;
  models::MlpCritic critic;
  optim::Sgd sgd;
  optim::Adam adam;
};

inline RunState make_run_state(const RunConfig& cfg, std::optional<models::Classifier> superior) {
  const auto spec = cfg.classifier_spec();
  const auto& t = cfg.train;
  models::Classifier student(spec, cfg.seed);
  models::Classifier previous(spec, cfg.seed);
  return RunState{0,
                  0,
                  models::ModelTriple(std::move(student), std::move(superior), std::move(previous)),
                  models::MlpCritic(cfg.critic_spec(), cfg.seed),
                  optim::Sgd(t.momentum, t.weight_decay, t.nesterov),
                  optim::Adam(t.critic_lr, t.critic_beta1, t.critic_beta2)};
}

struct StepContext {
  losses::LossWeights weights;  // after the ablation preset
  int critic_steps = 1;
  bool critic_superior_term = false;
  std::uint64_t seed = 0;
  long batch_index = 0;
  double lr = 0.1;
};

namespace detail {

inline bool finite(const StepRecord& r) {
  for (double v : {r.ce, r.lg, r.lp, r.la, r.ld, r.total})
    if (!std::isfinite(v)) return false;
  return true;
}

inline void abort_if_not_finite(const StepRecord& r) {
  if (finite(r)) return;
  json diag = r.to_json();
  diag["kind"] = "abort";
  throw NanAbort("non-finite loss at step " + std::to_string(r.step) + " (epoch " + std::to_string(r.epoch) +
                     "): " + r.to_json().dump(),
                 diag);
}

/// Non-finite logits poison every loss term; report them as a non-finite step.
inline void abort_if_not_finite(const Matrix& logits, StepRecord rec) {
  if (logits.allFinite()) return;
  rec.ce = rec.total = std::numeric_limits<double>::quiet_NaN();
  abort_if_not_finite(rec);
}

inline Matrix logits_of(models::Classifier& m, const Tensor& images) {
  return to_matrix(m.forward(images, nn::Mode::kEval));
}

}  // namespace detail

/// One critic update on a fixed batch of student and superior logits; returns L_D.
inline double critic_step(models::MlpCritic& critic, optim::Adam& adam, const Matrix& student_logits,
                          const Matrix& superior_logits, const losses::LossWeights& w, bool superior_term,
                          std::mt19937_64& eps_rng) {
  const auto b = static_cast<std::size_t>(student_logits.rows());
  critic.zero_grad();
  models::MlpCritic::Tape tape, tape_sup;
  const auto scores = critic.forward_train(student_logits, tape);
  std::vector<double> sup_scores = scores;
  if (superior_term) sup_scores = critic.forward_train(superior_logits, tape_sup);
  std::vector<double> eps(b);
  for (auto& e : eps) e = uniform01(eps_rng);
  const auto gp =
      losses::gradient_penalty(critic, losses::LogitsBatch(superior_logits), losses::LogitsBatch(student_logits), eps);
  const double ld = losses::critic_loss(scores, sup_scores, gp.value, w, superior_term);
  critic.backward_train(tape, std::vector<double>(b, 1.0 / static_cast<double>(b)));
  if (superior_term) critic.backward_train(tape_sup, std::vector<double>(b, -1.0 / static_cast<double>(b)));
  critic.accumulate_penalty_gradient(gp, w.gp_lambda);
  adam.step(critic.state());
  return ld;
}

/// Critic update(s) then one student update on the same augmented batch.
/// The student is forwarded once; its logits feed both the critic and the student objective.
inline StepRecord distill_step(RunState& s, const augment::MixedBatch& batch, const StepContext& ctx) {
  const auto& w = ctx.weights;
  StepRecord rec;
  rec.step = s.global_step;
  rec.epoch = s.epoch;
  rec.lr = ctx.lr;

  const Matrix zs = to_matrix(s.triple.student.forward(batch.images, nn::Mode::kTrain));
  detail::abort_if_not_finite(zs, rec);
  const losses::LogitsBatch student(zs);
  const bool use_superior = w.alpha_g > 0.0 || w.omega > 0.0;
  const bool use_previous = w.alpha_p > 0.0 && s.epoch > 0;
  std::optional<Matrix> zsup, zprev;
  if (use_superior) {
    if (!s.triple.superior) throw std::logic_error("distill_step: weights need a superior model but none is loaded");
    zsup = detail::logits_of(*s.triple.superior, batch.images);
  }
  if (use_previous) zprev = detail::logits_of(s.triple.previous, batch.images);

  // (a) critic
  if (w.omega > 0.0 && zs.rows() >= 2) {
    for (int k = 0; k < ctx.critic_steps; ++k) {
      auto eps_rng = make_rng(ctx.seed, Stream::kGradientPenalty,
                              {static_cast<std::uint64_t>(s.epoch), static_cast<std::uint64_t>(ctx.batch_index),
                               static_cast<std::uint64_t>(k)});
      rec.ld = critic_step(s.critic, s.adam, zs, *zsup, w, ctx.critic_superior_term, eps_rng);
    }
  }

  // (b) student. During the first epoch alpha_p moves onto the hard-label term.
  const double ce_coef = w.alpha_ce() + (use_previous ? 0.0 : w.alpha_p);
  const auto ce = augment::mixed_ce_loss(student, batch);
  rec.ce = ce.value;
  Matrix grad = ce_coef * ce.grad;
  if (w.alpha_g > 0.0) {
    const auto lg = losses::guide_loss(losses::LogitsBatch(*zsup), student, w.tau_g);
    rec.lg = lg.value;
    grad += w.alpha_g * lg.grad;
  }
  if (use_previous) {
    const auto lp = losses::progressive_loss(losses::LogitsBatch(*zprev), student, w.tau_p);
    rec.lp = lp.value;
    grad += w.alpha_p * lp.grad;
  }
  if (w.omega > 0.0) {
    const auto la = losses::adversarial_loss(s.critic.scores(zs));
    rec.la = la.value;
    Matrix dz = s.critic.input_gradients(zs);
    for (Eigen::Index b = 0; b < dz.rows(); ++b) dz.row(b) *= la.grad[static_cast<std::size_t>(b)];
    grad += w.omega * dz;
  }
  rec.total = ce_coef * rec.ce + w.alpha_p * rec.lp + w.alpha_g * rec.lg + w.omega * rec.la;
  detail::abort_if_not_finite(rec);

  s.triple.student.zero_grad();
  s.triple.student.backward(to_tensor(grad));
  s.sgd.step(s.triple.student.state(), ctx.lr);
  ++s.global_step;
  return rec;
}

/// Train or validation data for a run: generated for synthetic sources, loaded otherwise.
inline data::Dataset prepare_dataset(const RunConfig& cfg) {
  data::Dataset ds;
  if (cfg.data.manifest.source == data::SourceKind::kSynthetic) {
    ds = data::generate_synthetic(cfg.data.synthetic);
  } else {
    std::string root = cfg.data.root;
    if (root.empty())
      if (const char* env = std::getenv("AIKD_DATA_ROOT")) root = env;
    if (root.empty()) throw config::ConfigError("data.root", "no dataset root given and AIKD_DATA_ROOT is unset");
    ds = data::load_dataset(cfg.data.manifest, root);
  }
  if (cfg.data.label_noise > 0.0)
    data::inject_label_noise(ds.train, ds.manifest.num_classes, cfg.data.label_noise, cfg.seed);
  return ds;
}

inline std::uint64_t config_digest(const RunConfig& cfg) {
  json j = config::to_json(cfg);
  j.erase("name");
  j["train"].erase("epochs");
  j["train"].erase("ablation");
  const std::string text = j.dump();
  return fnv1a(text.data(), text.size());
}

inline fs::path checkpoint_path(const fs::path& phase_dir, int completed_epochs) {
  return phase_dir / ("ckpt_epoch_" + std::to_string(completed_epochs));
}

/// Fully resolved config document written next to the phase directories.
inline void write_snapshot(const RunConfig& cfg, const fs::path& run_dir) {
  fs::create_directories(run_dir);
  std::ofstream os(run_dir / "config.snapshot");
  os << config::to_json(cfg).dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + (run_dir / "config.snapshot").string());
}

struct PhaseOptions {
  std::optional<fs::path> resume_from;
  int max_epochs_this_call = -1;  // stop early at an epoch boundary; -1 runs to the end
  bool verbose = false;
};

struct PhaseResult {
  fs::path final_checkpoint;
  int completed_epochs = 0;
  metrics::Evaluation evaluation;
  std::vector<StepRecord> steps;  // steps taken during this call
};

namespace detail {

class RunLog {
 public:
  /// Fresh logs truncate; resumed logs keep only records of epochs before `keep_before`.
  RunLog(const fs::path& path, std::optional<int> keep_before) {
    std::vector<std::string> kept;
    if (keep_before) {
      std::ifstream is(path);
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.value("epoch", 1 << 30) < *keep_before) kept.push_back(line);
      }
    }
    os_.open(path, std::ios::trunc);
    if (!os_) throw std::runtime_error("cannot open " + path.string());
    for (const auto& l : kept) os_ << l << '\n';
  }
  void write(const json& j) {
    os_ << j.dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

inline double accuracy_of(const metrics::MetricsReport& r) { return 1.0 - r.top1_error / 100.0; }

inline Checkpoint base_checkpoint(const RunConfig& cfg, const data::Dataset& ds, const std::string& phase, int epoch,
                                  long step, const metrics::MetricsReport& val) {
  Checkpoint ck;
  ck.meta["phase"] = phase;
  ck.meta["epoch"] = epoch;
  ck.meta["global_step"] = step;
  ck.meta["spec"] = cfg.classifier_spec().to_json();
  ck.meta["config_digest"] = std::to_string(config_digest(cfg));
  ck.meta["ablation"] = config::to_string(cfg.train.ablation);
  ck.meta["manifest"] = {{"val_accuracy", accuracy_of(val)}, {"dataset", ds.manifest.to_json()}};
  return ck;
}

inline Checkpoint load_resume(const fs::path& path, const RunConfig& cfg, const std::string& phase) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("phase", "") != phase)
    throw CheckpointError(path.string() + " is not a " + phase + " checkpoint");
  if (ck.meta.value("config_digest", "") != std::to_string(config_digest(cfg)))
    throw CheckpointError(path.string() + " was written with a different configuration");
  return ck;
}

inline void log_progress(bool verbose, const std::string& phase, int epoch, const metrics::MetricsReport& r) {
  if (verbose)
    std::fprintf(stderr, "[%s] epoch %d: val top1 error %.2f%%, ece %.2f\n", phase.c_str(), epoch, r.top1_error,
                 r.ece);
}

}  // namespace detail

/// Phase 1: cross-entropy training of the model later used as the superior.
inline PhaseResult pretrain(const RunConfig& cfg, const data::Dataset& ds, const fs::path& run_dir,
                            const PhaseOptions& opts = {}) {
  if (ds.manifest.num_classes != cfg.num_classes())
    throw models::SpecMismatchError("dataset has " + std::to_string(ds.manifest.num_classes) +
                                    " classes, model expects " + std::to_string(cfg.num_classes()));
  const fs::path dir = run_dir / "phase1";
  fs::create_directories(dir);
  write_snapshot(cfg, run_dir);
  const auto& t = cfg.train;
  models::Classifier model(cfg.classifier_spec(), cfg.seed);
  optim::Sgd sgd(t.momentum, t.weight_decay, t.nesterov);
  int start = 0;
  long step = 0;
  if (opts.resume_from) {
    const Checkpoint ck = detail::load_resume(*opts.resume_from, cfg, "pretrain");
    model.load_from(ck, "student.");
    sgd.load_from(ck, "sgd.", model.state());
    start = ck.meta.at("epoch").get<int>();
    step = ck.meta.at("global_step").get<long>();
  }
  detail::RunLog log(dir / "log.jsonl", opts.resume_from ? std::optional<int>(start) : std::nullopt);

  PhaseResult res;
  res.completed_epochs = start;
  const int stop = opts.max_epochs_this_call < 0 ? t.epochs : std::min(t.epochs, start + opts.max_epochs_this_call);
  for (int epoch = start; epoch < stop; ++epoch) {
    const double lr = lr_at(t, epoch);
    const auto batches = data::epoch_iterator(ds.train.size(), t.batch_size, cfg.seed, static_cast<std::uint64_t>(epoch));
    double ce_sum = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto mb = augment::augment_batch(data::gather(ds.train, batches[bi]), data::gather_labels(ds.train, batches[bi]),
                                             cfg.augment, ds.manifest, cfg.seed, static_cast<std::uint64_t>(epoch), bi);
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.lr = lr;
      const Matrix z = to_matrix(model.forward(mb.images, nn::Mode::kTrain));
      losses::LossGrad ce;
      try {
        detail::abort_if_not_finite(z, rec);
        ce = augment::mixed_ce_loss(losses::LogitsBatch(z), mb);
        rec.ce = rec.total = ce.value;
        detail::abort_if_not_finite(rec);
      } catch (const NanAbort& e) {
        log.write(e.diagnostic);
        throw;
      }
      model.zero_grad();
      model.backward(to_tensor(ce.grad));
      sgd.step(model.state(), lr);
      ++step;
      ce_sum += ce.value;
      log.write(rec.to_json());
      res.steps.push_back(rec);
    }
    const auto ev = metrics::evaluate(model, ds.val, ds.manifest, cfg.metrics.n_bins, false);
    const int done = epoch + 1;
    json er = {{"kind", "epoch"},
               {"epoch", epoch},
               {"global_step", step},
               {"lr", lr},
               {"train_ce", ce_sum / static_cast<double>(batches.size())},
               {"val", ev.report.to_json()},
               {"checksums", {{"student", std::to_string(model.checksum())}}}};
    log.write(er);
    detail::log_progress(opts.verbose, "pretrain", epoch, ev.report);
    if (done % t.checkpoint_every == 0 || done == t.epochs || done == stop) {
      Checkpoint ck = detail::base_checkpoint(cfg, ds, "pretrain", done, step, ev.report);
      model.save_to(ck, "student.");
      sgd.save_to(ck, "sgd.");
      save_checkpoint(ck, checkpoint_path(dir, done));
      res.final_checkpoint = checkpoint_path(dir, done);
    }
    res.completed_epochs = done;
    res.evaluation = ev;
  }
  if (res.completed_epochs == t.epochs) {
    model.freeze();
    res.evaluation = metrics::evaluate(model, ds.val, ds.manifest, cfg.metrics.n_bins, cfg.metrics.calibrate);
    detail::write_json(dir / "metrics.json", res.evaluation.report.to_json());
    res.final_checkpoint = checkpoint_path(dir, t.epochs);
  }
  return res;
}

/// Phase 2: AI-KD distillation of a freshly initialised student.
/// `superior_ckpt` may be empty for presets that do not use the superior model.
inline PhaseResult distill(const RunConfig& cfg, const data::Dataset& ds, const std::optional<fs::path>& superior_ckpt,
                           const fs::path& run_dir, const PhaseOptions& opts = {}) {
  const auto& t = cfg.train;
  const auto spec = cfg.classifier_spec();
  if (ds.manifest.num_classes != cfg.num_classes())
    throw models::SpecMismatchError("dataset has " + std::to_string(ds.manifest.num_classes) +
                                    " classes, model expects " + std::to_string(cfg.num_classes()));
  const losses::LossWeights weights = apply_ablation(t.ablation, t.weights);

  std::optional<models::Classifier> superior;
  if (needs_superior(t.ablation)) {
    if (!superior_ckpt)
      throw config::ConfigError("superior", "preset '" + config::to_string(t.ablation) +
                                                "' needs the phase-1 checkpoint (run pretrain first and pass it)");
    auto loaded = models::load_superior(*superior_ckpt, spec);
    // The recorded held-out accuracy must reproduce on this dataset.
    const auto check = metrics::evaluate(loaded.model, ds.val, ds.manifest, cfg.metrics.n_bins, false);
    const double acc = detail::accuracy_of(check.report);
    if (std::abs(acc - loaded.manifest_accuracy) > 1e-6)
      throw models::SpecMismatchError("superior checkpoint reports val accuracy " +
                                      std::to_string(loaded.manifest_accuracy) + " but scores " + std::to_string(acc) +
                                      " on this dataset");
    superior = std::move(loaded.model);
  }

  const fs::path dir = run_dir / "phase2";
  fs::create_directories(dir);
  write_snapshot(cfg, run_dir);
  RunState s = make_run_state(cfg, std::move(superior));
  if (opts.resume_from) {
    const Checkpoint ck = detail::load_resume(*opts.resume_from, cfg, "distill");
    s.triple.student.load_from(ck, "student.");
    s.triple.previous.load_from(ck, "previous.");
    s.critic.load_from(ck, "critic.");
    s.sgd.load_from(ck, "sgd.", s.triple.student.state());
    s.adam.load_from(ck, "adam.", s.critic.state());
    s.epoch = ck.meta.at("epoch").get<int>();
    s.global_step = ck.meta.at("global_step").get<long>();
  } else {
    models::snapshot_previous(s.triple);
  }
  detail::RunLog log(dir / "log.jsonl", opts.resume_from ? std::optional<int>(s.epoch) : std::nullopt);
  const std::string superior_hash = s.triple.superior ? std::to_string(s.triple.superior->checksum()) : "";

  PhaseResult res;
  res.completed_epochs = s.epoch;
  const int stop = opts.max_epochs_this_call < 0 ? t.epochs : std::min(t.epochs, s.epoch + opts.max_epochs_this_call);
  while (s.epoch < stop) {
    const int epoch = s.epoch;
    StepContext ctx{weights, t.critic_steps, t.critic_superior_term, cfg.seed, 0, lr_at(t, epoch)};
    const std::string previous_hash = std::to_string(s.triple.previous.checksum());
    const auto batches = data::epoch_iterator(ds.train.size(), t.batch_size, cfg.seed, static_cast<std::uint64_t>(epoch));
    double ce_sum = 0, total_sum = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto mb = augment::augment_batch(data::gather(ds.train, batches[bi]), data::gather_labels(ds.train, batches[bi]),
                                             cfg.augment, ds.manifest, cfg.seed, static_cast<std::uint64_t>(epoch), bi);
      ctx.batch_index = static_cast<long>(bi);
      StepRecord rec;
      try {
        rec = distill_step(s, mb, ctx);
      } catch (const NanAbort& e) {
        log.write(e.diagnostic);
        throw;
      }
      ce_sum += rec.ce;
      total_sum += rec.total;
      log.write(rec.to_json());
      res.steps.push_back(rec);
    }
    const auto ev = metrics::evaluate(s.triple.student, ds.val, ds.manifest, cfg.metrics.n_bins, false);
    models::snapshot_previous(s.triple);
    s.epoch = epoch + 1;
    const std::string student_hash = std::to_string(s.triple.student.checksum());
    json er = {{"kind", "epoch"},
               {"epoch", epoch},
               {"global_step", s.global_step},
               {"lr", ctx.lr},
               {"train_ce", ce_sum / static_cast<double>(batches.size())},
               {"train_total", total_sum / static_cast<double>(batches.size())},
               {"val", ev.report.to_json()},
               {"checksums",
                {{"student", student_hash},
                 {"previous_during_epoch", previous_hash},
                 {"superior", superior_hash},
                 {"critic", std::to_string(s.critic.checksum())}}}};
    log.write(er);
    detail::log_progress(opts.verbose, "distill", epoch, ev.report);
    const int done = s.epoch;
    if (done % t.checkpoint_every == 0 || done == t.epochs || done == stop) {
      Checkpoint ck = detail::base_checkpoint(cfg, ds, "distill", done, s.global_step, ev.report);
      ck.meta["superior_checksum"] = superior_hash;
      s.triple.student.save_to(ck, "student.");
      s.triple.previous.save_to(ck, "previous.");
      s.critic.save_to(ck, "critic.");
      s.sgd.save_to(ck, "sgd.");
      s.adam.save_to(ck, "adam.");
      save_checkpoint(ck, checkpoint_path(dir, done));
      res.final_checkpoint = checkpoint_path(dir, done);
    }
    res.completed_epochs = done;
    res.evaluation = ev;
  }
  if (res.completed_epochs == t.epochs) {
    res.evaluation =
        metrics::evaluate(s.triple.student, ds.val, ds.manifest, cfg.metrics.n_bins, cfg.metrics.calibrate);
    detail::write_json(dir / "metrics.json", res.evaluation.report.to_json());
    res.final_checkpoint = checkpoint_path(dir, t.epochs);
  }
  return res;
}

/// Reads every JSON line of a run log.
inline std::vector<json> read_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

}  // namespace aikd::training
