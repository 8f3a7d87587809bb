#pragma once

// Loss terms of the self-distillation objective. Every differentiable loss
// returns its value together with the gradient w.r.t. the student-side input.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aikd/matrix.hpp"

namespace aikd::losses {

/// Student probabilities are floored here before the log in KL terms.
inline constexpr double kProbFloor = 1e-12;

class LogitsBatch {
 public:
  explicit LogitsBatch(Matrix values) : values_(std::move(values)) {
    if (values_.rows() < 1) throw std::invalid_argument("logits batch must have at least one row");
    if (values_.cols() < 2) throw std::invalid_argument("logits batch must have at least two classes");
    if (!values_.allFinite()) throw std::invalid_argument("logits contain NaN or Inf");
  }

  const Matrix& values() const { return values_; }
  std::size_t batch() const { return static_cast<std::size_t>(values_.rows()); }
  std::size_t classes() const { return static_cast<std::size_t>(values_.cols()); }

 private:
  Matrix values_;
};

struct SoftDistribution {
  Matrix probs;
  double temperature = 1.0;
};

class HardLabels {
 public:
  HardLabels(std::vector<int> labels, std::size_t num_classes) : labels_(std::move(labels)) {
    for (int y : labels_)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
        throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) +
                                    ")");
  }

  std::size_t size() const { return labels_.size(); }
  int operator[](std::size_t i) const { return labels_[i]; }
  const std::vector<int>& values() const { return labels_; }

 private:
  std::vector<int> labels_;
};

/// Balancing weights, distillation temperatures and the gradient-penalty weight.
struct LossWeights {
  double alpha_g = 0.1;
  double alpha_p = 0.3;
  double omega = 0.1;
  double tau_g = 1.0;
  double tau_p = 1.0;
  double gp_lambda = 10.0;

  double alpha_ce() const { return 1.0 - alpha_p - alpha_g; }

  void validate() const {
    if (!(alpha_g >= 0.0 && alpha_g <= 1.0)) throw std::invalid_argument("alpha_g must lie in [0, 1]");
    if (!(alpha_p >= 0.0 && alpha_p <= 1.0)) throw std::invalid_argument("alpha_p must lie in [0, 1]");
    if (alpha_g + alpha_p > 1.0 + 1e-12) throw std::invalid_argument("alpha_g + alpha_p must not exceed 1");
    if (!(omega >= 0.0)) throw std::invalid_argument("omega must be non-negative");
    if (!(tau_g > 0.0)) throw std::invalid_argument("tau_g must be positive");
    if (!(tau_p > 0.0)) throw std::invalid_argument("tau_p must be positive");
    if (!(gp_lambda >= 0.0)) throw std::invalid_argument("gp_lambda must be non-negative");
  }

  bool operator==(const LossWeights&) const = default;
};

struct LossGrad {
  double value = 0.0;
  Matrix grad;  // d value / d student logits
};

inline SoftDistribution soften(const LogitsBatch& logits, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  const Matrix& z = logits.values();
  SoftDistribution out{Matrix(z.rows(), z.cols()), tau};
  for (Eigen::Index b = 0; b < z.rows(); ++b) {
    const double top = z.row(b).maxCoeff();
    double norm = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const double e = std::exp((z(b, c) - top) / tau);
      out.probs(b, c) = e;
      norm += e;
    }
    out.probs.row(b) /= norm;
  }
  return out;
}

/// Vector-Jacobian product of soften: maps dL/dp to dL/dz.
inline Matrix soften_backward(const SoftDistribution& p, const Matrix& grad_probs) {
  if (grad_probs.rows() != p.probs.rows() || grad_probs.cols() != p.probs.cols())
    throw std::invalid_argument("soften_backward: shape mismatch");
  Matrix out(p.probs.rows(), p.probs.cols());
  for (Eigen::Index b = 0; b < p.probs.rows(); ++b) {
    const double dot = p.probs.row(b).dot(grad_probs.row(b));
    out.row(b) = (p.probs.row(b).array() * (grad_probs.row(b).array() - dot) / p.temperature).matrix();
  }
  return out;
}

inline double cross_entropy(const HardLabels& labels, const SoftDistribution& probs) {
  if (labels.size() != static_cast<std::size_t>(probs.probs.rows()))
    throw std::invalid_argument("cross_entropy: label count differs from batch size");
  if (labels.size() == 0) throw std::invalid_argument("cross_entropy: empty batch");
  double sum = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b)
    sum -= std::log(std::max(probs.probs(static_cast<Eigen::Index>(b), labels[b]), kProbFloor));
  return sum / static_cast<double>(labels.size());
}

/// Cross-entropy at temperature 1 straight from logits.
inline LossGrad cross_entropy_loss(const HardLabels& labels, const LogitsBatch& logits) {
  const SoftDistribution p = soften(logits, 1.0);
  LossGrad out{cross_entropy(labels, p), p.probs};
  for (std::size_t b = 0; b < labels.size(); ++b) out.grad(static_cast<Eigen::Index>(b), labels[b]) -= 1.0;
  out.grad /= static_cast<double>(labels.size());
  return out;
}

/// tau^2 * mean_b KL(teacher_b || student_b); the teacher is a constant.
inline double kd_kl(const SoftDistribution& teacher, const SoftDistribution& student, double tau) {
  if (teacher.temperature != tau || student.temperature != tau)
    throw std::invalid_argument("kd_kl: distributions softened at a different temperature");
  if (teacher.probs.rows() != student.probs.rows() || teacher.probs.cols() != student.probs.cols())
    throw std::invalid_argument("kd_kl: shape mismatch");
  double sum = 0.0;
  for (Eigen::Index b = 0; b < teacher.probs.rows(); ++b)
    for (Eigen::Index c = 0; c < teacher.probs.cols(); ++c) {
      const double t = teacher.probs(b, c);
      if (t <= 0.0) continue;
      sum += t * std::log(t / std::max(student.probs(b, c), kProbFloor));
    }
  return tau * tau * sum / static_cast<double>(teacher.probs.rows());
}

/// kd_kl from logits; d/dz_student = tau * (s - t) / B.
inline LossGrad kd_kl_loss(const LogitsBatch& teacher, const LogitsBatch& student, double tau) {
  if (teacher.batch() != student.batch() || teacher.classes() != student.classes())
    throw std::invalid_argument("distillation logits have mismatched shapes");
  const SoftDistribution t = soften(teacher, tau);
  const SoftDistribution s = soften(student, tau);
  LossGrad out{kd_kl(t, s, tau), (s.probs - t.probs) * (tau / static_cast<double>(student.batch()))};
  return out;
}

inline LossGrad guide_loss(const LogitsBatch& superior, const LogitsBatch& student, double tau_g) {
  return kd_kl_loss(superior, student, tau_g);
}

inline LossGrad progressive_loss(const LogitsBatch& previous, const LogitsBatch& student, double tau_p) {
  return kd_kl_loss(previous, student, tau_p);
}

/// A critic usable in the gradient penalty must expose its input gradient.
template <class C>
concept DifferentiableCritic = requires(const C& c, std::span<const double> x) {
  { c.score(x) } -> std::convertible_to<double>;
  { c.input_gradient(x) } -> std::convertible_to<std::vector<double>>;
};

/// Critics that also expose a Hessian-vector product give the penalty a
/// gradient w.r.t. the student logits.
template <class C>
concept CriticWithHessian = DifferentiableCritic<C> && requires(const C& c, std::span<const double> x) {
  { c.input_hvp(x, x) } -> std::convertible_to<std::vector<double>>;
};

struct PenaltyResult {
  double value = 0.0;
  Matrix interpolates;            // x_hat rows
  Matrix input_gradients;         // grad_x D(x_hat) rows
  std::optional<Matrix> grad_student;  // d value / d student logits
};

/// mean_b (||grad D(x_hat_b)|| - 1)^2 with x_hat_b = eps_b * superior_b + (1 - eps_b) * student_b.
template <DifferentiableCritic Critic>
PenaltyResult gradient_penalty(const Critic& critic, const LogitsBatch& superior, const LogitsBatch& student,
                               std::span<const double> epsilons) {
  if (superior.batch() != student.batch() || superior.classes() != student.classes())
    throw std::invalid_argument("gradient_penalty: logits have mismatched shapes");
  if (epsilons.size() != student.batch()) throw std::invalid_argument("gradient_penalty: one epsilon per example");
  const auto rows = static_cast<Eigen::Index>(student.batch());
  const auto cols = static_cast<Eigen::Index>(student.classes());
  PenaltyResult out;
  out.interpolates.resize(rows, cols);
  out.input_gradients.resize(rows, cols);
  if constexpr (CriticWithHessian<Critic>) out.grad_student = Matrix::Zero(rows, cols);
  double sum = 0.0;
  for (Eigen::Index b = 0; b < rows; ++b) {
    const double eps = epsilons[static_cast<std::size_t>(b)];
    if (!(eps >= 0.0 && eps <= 1.0)) throw std::invalid_argument("gradient_penalty: epsilon outside [0, 1]");
    out.interpolates.row(b) = eps * superior.values().row(b) + (1.0 - eps) * student.values().row(b);
    std::span<const double> xhat(out.interpolates.data() + b * cols, static_cast<std::size_t>(cols));
    const std::vector<double> g = critic.input_gradient(xhat);
    if (g.size() != static_cast<std::size_t>(cols)) throw std::invalid_argument("critic gradient has wrong size");
    double norm2 = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      out.input_gradients(b, c) = g[static_cast<std::size_t>(c)];
      norm2 += g[static_cast<std::size_t>(c)] * g[static_cast<std::size_t>(c)];
    }
    const double norm = std::sqrt(norm2);
    sum += (norm - 1.0) * (norm - 1.0);
    if constexpr (CriticWithHessian<Critic>) {
      if (norm > 0.0) {
        // d/dx (||g|| - 1)^2 = 2 (||g|| - 1) H g / ||g||
        const std::vector<double> hg = critic.input_hvp(xhat, std::span<const double>(g));
        const double k = 2.0 * (norm - 1.0) / norm * (1.0 - eps) / static_cast<double>(rows);
        for (Eigen::Index c = 0; c < cols; ++c) (*out.grad_student)(b, c) = k * hg[static_cast<std::size_t>(c)];
      }
    }
  }
  out.value = sum / static_cast<double>(rows);
  return out;
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("empty score batch");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Critic objective. The superior-score term is dropped by default; the flag
/// restores the two-sided WGAN-GP form.
inline double critic_loss(std::span<const double> scores_student, std::span<const double> scores_superior,
                          double gp, const LossWeights& weights, bool include_superior_term = false) {
  if (weights.gp_lambda < 0.0) throw std::invalid_argument("gp_lambda must be non-negative");
  double loss = mean_of(scores_student) + weights.gp_lambda * gp;
  if (include_superior_term) loss -= mean_of(scores_superior);
  return loss;
}

struct ScoreLoss {
  double value = 0.0;
  std::vector<double> grad;  // d value / d score_b
};

inline ScoreLoss adversarial_loss(std::span<const double> scores_student) {
  if (scores_student.empty()) throw std::invalid_argument("adversarial_loss: empty batch");
  ScoreLoss out;
  out.value = -mean_of(scores_student);
  out.grad.assign(scores_student.size(), -1.0 / static_cast<double>(scores_student.size()));
  return out;
}

inline double total_loss(double ce, double lp, double lg, double la, const LossWeights& weights) {
  weights.validate();
  if (!std::isfinite(ce) || !std::isfinite(lp) || !std::isfinite(lg) || !std::isfinite(la))
    throw std::invalid_argument("total_loss: component loss is not finite");
  return weights.alpha_ce() * ce + weights.alpha_p * lp + weights.alpha_g * lg + weights.omega * la;
}

}  // namespace aikd::losses
