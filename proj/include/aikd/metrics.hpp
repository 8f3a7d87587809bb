#pragma once

// Evaluation metrics: top-k error, macro F1, expected calibration error with
// reliability bins, and temperature-scaling calibration.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aikd/data.hpp"
#include "aikd/losses.hpp"
#include "aikd/models.hpp"

namespace aikd::metrics {

struct PredictionSet {
  Matrix logits;  // (n, C)
  std::vector<int> labels;

  PredictionSet(Matrix l, std::vector<int> y) : logits(std::move(l)), labels(std::move(y)) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size())
      throw std::invalid_argument("prediction set: logits rows differ from label count");
    if (labels.empty()) throw std::invalid_argument("prediction set is empty");
    losses::HardLabels(labels, classes());  // range check
  }

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return static_cast<std::size_t>(logits.cols()); }
};

/// Index of the largest logit; ties go to the lower index.
inline int argmax_row(const Matrix& z, Eigen::Index r) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < z.cols(); ++c)
    if (z(r, c) > z(r, best)) best = c;
  return static_cast<int>(best);
}

/// Percent of samples whose label is not among the k highest logits.
inline double topk_error(const PredictionSet& p, std::size_t k) {
  if (k < 1 || k >= p.classes())
    throw std::invalid_argument("top-k requires 1 <= k < C (k=" + std::to_string(k) + ", C=" +
                                std::to_string(p.classes()) + ")");
  std::size_t misses = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const int y = p.labels[i];
    const double zy = p.logits(r, y);
    // Rank of y: classes strictly above it, plus lower-index classes tied with it.
    std::size_t rank = 0;
    for (Eigen::Index c = 0; c < p.logits.cols(); ++c)
      if (p.logits(r, c) > zy || (p.logits(r, c) == zy && c < y)) ++rank;
    if (rank >= k) ++misses;
  }
  return 100.0 * static_cast<double>(misses) / static_cast<double>(p.size());
}

/// Unweighted mean of per-class F1 over all C classes; F1 is 0 where precision + recall is 0.
inline double macro_f1(const PredictionSet& p) {
  const std::size_t c = p.classes();
  std::vector<double> tp(c, 0), fp(c, 0), fn(c, 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const int pred = argmax_row(p.logits, static_cast<Eigen::Index>(i));
    const int y = p.labels[i];
    if (pred == y) {
      tp[static_cast<std::size_t>(y)] += 1;
    } else {
      fp[static_cast<std::size_t>(pred)] += 1;
      fn[static_cast<std::size_t>(y)] += 1;
    }
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    const double denom = 2 * tp[k] + fp[k] + fn[k];
    if (denom > 0) sum += 2 * tp[k] / denom;
  }
  return sum / static_cast<double>(c);
}

struct ReliabilityBin {
  double lower = 0, upper = 0;
  std::size_t count = 0;
  double mean_confidence = 0, accuracy = 0;
};

struct ReliabilityBins {
  std::vector<ReliabilityBin> bins;
  std::size_t n_bins() const { return bins.size(); }
};

/// Bin index on (0, 1] with equal-width bins; a value on a boundary goes to the lower bin.
inline std::size_t bin_index(double confidence, std::size_t n_bins) {
  const double n = static_cast<double>(n_bins);
  long idx = static_cast<long>(std::ceil(confidence * n)) - 1;
  idx = std::clamp(idx, 0L, static_cast<long>(n_bins) - 1);
  // Guard the ceil against rounding right at a boundary.
  if (idx > 0 && confidence <= static_cast<double>(idx) / n) --idx;
  if (idx + 1 < static_cast<long>(n_bins) && confidence > static_cast<double>(idx + 1) / n) ++idx;
  return static_cast<std::size_t>(idx);
}

struct CalibrationResult {
  double ece = 0;  // percent
  ReliabilityBins reliability;
};

inline CalibrationResult ece_from_confidences(std::span<const double> confidence, std::span<const int> correct,
                                              std::size_t n_bins) {
  if (n_bins < 1) throw std::invalid_argument("n_bins must be at least 1");
  if (confidence.size() != correct.size()) throw std::invalid_argument("ece: size mismatch");
  if (confidence.empty()) throw std::invalid_argument("ece: empty prediction set");
  CalibrationResult out;
  out.reliability.bins.resize(n_bins);
  std::vector<double> conf_sum(n_bins, 0.0), hit_sum(n_bins, 0.0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const std::size_t b = bin_index(confidence[i], n_bins);
    out.reliability.bins[b].count += 1;
    conf_sum[b] += confidence[i];
    hit_sum[b] += correct[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(confidence.size());
  for (std::size_t b = 0; b < n_bins; ++b) {
    auto& bin = out.reliability.bins[b];
    bin.lower = static_cast<double>(b) / static_cast<double>(n_bins);
    bin.upper = static_cast<double>(b + 1) / static_cast<double>(n_bins);
    if (bin.count == 0) continue;
    const double cnt = static_cast<double>(bin.count);
    bin.mean_confidence = conf_sum[b] / cnt;
    bin.accuracy = hit_sum[b] / cnt;
    out.ece += cnt / n * std::abs(bin.accuracy - bin.mean_confidence);
  }
  out.ece *= 100.0;
  return out;
}

/// ECE of max-softmax confidences at temperature tau (1 for the raw model).
inline CalibrationResult ece(const PredictionSet& p, std::size_t n_bins = 15, double tau = 1.0) {
  const auto probs = losses::soften(losses::LogitsBatch(p.logits), tau).probs;
  std::vector<double> conf(p.size());
  std::vector<int> correct(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const int pred = argmax_row(p.logits, r);
    conf[i] = probs(r, pred);
    correct[i] = pred == p.labels[i];
  }
  return ece_from_confidences(conf, correct, n_bins);
}

/// Mean negative log-likelihood of the labels under soften(logits, tau).
inline double nll(const PredictionSet& p, double tau) {
  const Matrix& z = p.logits;
  double sum = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double top = z.row(r).maxCoeff();
    const double lse = std::log((((z.row(r).array() - top) / tau).exp()).sum());
    sum += lse - (z(r, p.labels[static_cast<std::size_t>(r)]) - top) / tau;
  }
  return sum / static_cast<double>(z.rows());
}

/// Golden-section search for the NLL-minimizing temperature on ln tau in [ln 0.05, ln 20].
inline double temperature_scale(const PredictionSet& val, double tolerance = 1e-4) {
  const bool single_class =
      std::all_of(val.labels.begin(), val.labels.end(), [&](int y) { return y == val.labels.front(); });
  if (single_class) throw std::invalid_argument("temperature scaling needs labels from more than one class");
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(0.05), b = std::log(20.0);
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = nll(val, std::exp(c)), fd = nll(val, std::exp(d));
  while (b - a > tolerance) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = nll(val, std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = nll(val, std::exp(d));
    }
  }
  return std::exp((a + b) / 2.0);
}

struct MetricsReport {
  double top1_error = 0;
  double top5_error = 0;
  double macro_f1 = 0;
  double ece = 0;
  std::optional<double> ece_after_ts;
  std::optional<double> calibration_temperature;
  std::size_t n_samples = 0;
  std::size_t n_bins = 15;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"top1_error", top1_error}, {"top5_error", top5_error}, {"macro_f1", macro_f1},
                        {"ece", ece},               {"ece_after_ts", nullptr},  {"calibration_temperature", nullptr},
                        {"n_samples", n_samples},   {"n_bins", n_bins}};
    if (ece_after_ts) j["ece_after_ts"] = *ece_after_ts;
    if (calibration_temperature) j["calibration_temperature"] = *calibration_temperature;
    return j;
  }
};

struct Evaluation {
  MetricsReport report;
  ReliabilityBins reliability;
};

/// All metrics over one prediction set. Top-5 error is 0 when C <= 5.
/// With `calibrate`, the temperature is fit on these predictions and ECE recomputed after scaling.
inline Evaluation evaluate_predictions(const PredictionSet& p, std::size_t n_bins = 15, bool calibrate = false) {
  Evaluation out;
  auto& r = out.report;
  r.n_samples = p.size();
  r.n_bins = n_bins;
  r.top1_error = topk_error(p, 1);
  r.top5_error = p.classes() > 5 ? topk_error(p, 5) : 0.0;
  r.macro_f1 = macro_f1(p);
  auto raw = ece(p, n_bins);
  r.ece = raw.ece;
  out.reliability = std::move(raw.reliability);
  if (calibrate) {
    const double tau = temperature_scale(p);
    r.calibration_temperature = tau;
    r.ece_after_ts = ece(p, n_bins, tau).ece;
  }
  return out;
}

/// Inference-mode logits of `model` over a whole split.
inline PredictionSet predict(models::Classifier& model, const data::SampleSource& split,
                             const data::DatasetManifest& manifest, std::size_t batch_size = 256) {
  if (split.size() == 0) throw std::invalid_argument("cannot evaluate an empty split");
  Matrix logits(static_cast<Eigen::Index>(split.size()), static_cast<Eigen::Index>(model.spec().num_classes));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    idx.resize(std::min(batch_size, split.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor z = model.forward(data::eval_batch(split, idx, manifest), nn::Mode::kEval);
    logits.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(idx.size())) = to_matrix(z);
  }
  return {std::move(logits), split.labels};
}

inline Evaluation evaluate(models::Classifier& model, const data::SampleSource& split,
                           const data::DatasetManifest& manifest, std::size_t n_bins = 15, bool calibrate = false) {
  return evaluate_predictions(predict(model, split, manifest), n_bins, calibrate);
}

inline void write_reliability_csv(std::ostream& os, const ReliabilityBins& r) {
  os << "bin_lower,bin_upper,count,mean_confidence,accuracy\n";
  os.precision(17);
  for (const auto& b : r.bins)
    os << b.lower << ',' << b.upper << ',' << b.count << ',' << b.mean_confidence << ',' << b.accuracy << '\n';
}

}  // namespace aikd::metrics
