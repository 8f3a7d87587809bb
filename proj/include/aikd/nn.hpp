#pragma once

// Layer-wise network engine: every module caches what it needs during a
// training-mode forward pass and returns the input gradient from backward().

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aikd/matrix.hpp"
#include "aikd/rng.hpp"
#include "aikd/tensor.hpp"

namespace aikd::nn {

using RowMat = aikd::Matrix;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

enum class Mode { kTrain, kEval };

struct Parameter {
  Tensor value;
  Tensor grad;

  explicit Parameter(std::vector<std::size_t> shape) : value(shape), grad(shape) {}
};

/// Named views of every parameter and buffer of a module tree, in a fixed order.
struct ModuleState {
  std::vector<std::pair<std::string, Parameter*>> params;
  std::vector<std::pair<std::string, Tensor*>> buffers;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad) = 0;
  virtual void collect(ModuleState& /*out*/, const std::string& /*prefix*/) {}
};

using ModulePtr = std::unique_ptr<Module>;

inline void require_rank(const Tensor& x, std::size_t rank, const char* who) {
  if (x.rank() != rank)
    throw std::invalid_argument(std::string(who) + ": expected rank " + std::to_string(rank) + " input, got " +
                                x.shape_string());
}

class Conv2d : public Module {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t pad,
         bool bias, std::mt19937_64& rng)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad),
        weight_({out_channels, in_channels * kernel * kernel}) {
    const double std = std::sqrt(2.0 / static_cast<double>(out_channels * kernel * kernel));
    for (auto& w : weight_.value.data) w = std * standard_normal(rng);
    if (bias) bias_ = std::make_unique<Parameter>(std::vector<std::size_t>{out_channels});
  }

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  const Parameter& weight() const { return weight_; }

  Tensor forward(const Tensor& x, Mode mode) override {
    require_rank(x, 4, "Conv2d");
    if (x.dim(1) != in_) throw std::invalid_argument("Conv2d: channel mismatch, got " + x.shape_string());
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (h + 2 * pad_ < k_ || w + 2 * pad_ < k_) throw std::invalid_argument("Conv2d: input smaller than kernel");
    const std::size_t ho = (h + 2 * pad_ - k_) / stride_ + 1, wo = (w + 2 * pad_ - k_) / stride_ + 1;
    Tensor y({n, out_, ho, wo});
    const std::size_t kk = in_ * k_ * k_, spatial = ho * wo;
    RowMat col(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(spatial));
    ConstMatMap wmat(weight_.value.ptr(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(kk));
    for (std::size_t s = 0; s < n; ++s) {
      MatMap out(y.ptr() + s * out_ * spatial, static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(spatial));
      if (pointwise()) {
        ConstMatMap in(x.ptr() + s * in_ * h * w, static_cast<Eigen::Index>(in_), static_cast<Eigen::Index>(h * w));
        out.noalias() = wmat * in;
      } else {
        im2col(x.ptr() + s * in_ * h * w, h, w, ho, wo, col.data());
        out.noalias() = wmat * col;
      }
      if (bias_)
        for (std::size_t c = 0; c < out_; ++c) out.row(static_cast<Eigen::Index>(c)).array() += bias_->value[c];
    }
    if (mode == Mode::kTrain) input_ = x;
    return y;
  }

  Tensor backward(const Tensor& grad) override {
    const Tensor& x = input_;
    if (x.numel() == 0) throw std::logic_error("Conv2d: backward without training forward");
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = grad.dim(2), wo = grad.dim(3);
    const std::size_t kk = in_ * k_ * k_, spatial = ho * wo;
    Tensor dx(x.shape);
    RowMat col(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(spatial));
    RowMat dcol(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(spatial));
    ConstMatMap wmat(weight_.value.ptr(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(kk));
    MatMap dw(weight_.grad.ptr(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(kk));
    for (std::size_t s = 0; s < n; ++s) {
      ConstMatMap g(grad.ptr() + s * out_ * spatial, static_cast<Eigen::Index>(out_),
                    static_cast<Eigen::Index>(spatial));
      if (bias_)
        for (std::size_t c = 0; c < out_; ++c) bias_->grad[c] += g.row(static_cast<Eigen::Index>(c)).sum();
      if (pointwise()) {
        ConstMatMap in(x.ptr() + s * in_ * h * w, static_cast<Eigen::Index>(in_), static_cast<Eigen::Index>(h * w));
        dw.noalias() += g * in.transpose();
        MatMap dxs(dx.ptr() + s * in_ * h * w, static_cast<Eigen::Index>(in_), static_cast<Eigen::Index>(h * w));
        dxs.noalias() = wmat.transpose() * g;
      } else {
        im2col(x.ptr() + s * in_ * h * w, h, w, ho, wo, col.data());
        dw.noalias() += g * col.transpose();
        dcol.noalias() = wmat.transpose() * g;
        col2im(dcol.data(), h, w, ho, wo, dx.ptr() + s * in_ * h * w);
      }
    }
    return dx;
  }

  void collect(ModuleState& out, const std::string& prefix) override {
    out.params.emplace_back(prefix + "weight", &weight_);
    if (bias_) out.params.emplace_back(prefix + "bias", bias_.get());
  }

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  void im2col(const double* img, std::size_t h, std::size_t w, std::size_t ho, std::size_t wo, double* col) const {
    for (std::size_t c = 0; c < in_; ++c)
      for (std::size_t ki = 0; ki < k_; ++ki)
        for (std::size_t kj = 0; kj < k_; ++kj) {
          double* row = col + ((c * k_ + ki) * k_ + kj) * ho * wo;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const long ih = static_cast<long>(oh * stride_ + ki) - static_cast<long>(pad_);
            double* dst = row + oh * wo;
            if (ih < 0 || ih >= static_cast<long>(h)) {
              std::fill(dst, dst + wo, 0.0);
              continue;
            }
            const double* src = img + (c * h + static_cast<std::size_t>(ih)) * w;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const long iw = static_cast<long>(ow * stride_ + kj) - static_cast<long>(pad_);
              dst[ow] = (iw < 0 || iw >= static_cast<long>(w)) ? 0.0 : src[iw];
            }
          }
        }
  }

  void col2im(const double* col, std::size_t h, std::size_t w, std::size_t ho, std::size_t wo, double* img) const {
    for (std::size_t c = 0; c < in_; ++c)
      for (std::size_t ki = 0; ki < k_; ++ki)
        for (std::size_t kj = 0; kj < k_; ++kj) {
          const double* row = col + ((c * k_ + ki) * k_ + kj) * ho * wo;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const long ih = static_cast<long>(oh * stride_ + ki) - static_cast<long>(pad_);
            if (ih < 0 || ih >= static_cast<long>(h)) continue;
            double* dst = img + (c * h + static_cast<std::size_t>(ih)) * w;
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const long iw = static_cast<long>(ow * stride_ + kj) - static_cast<long>(pad_);
              if (iw >= 0 && iw < static_cast<long>(w)) dst[iw] += row[oh * wo + ow];
            }
          }
        }
  }

  std::size_t in_, out_, k_, stride_, pad_;
  Parameter weight_;
  std::unique_ptr<Parameter> bias_;
  Tensor input_;
};

/// Batch normalization over (N, H, W) per channel; rank-2 inputs are treated as H = W = 1.
class BatchNorm : public Module {
 public:
  explicit BatchNorm(std::size_t channels, double eps = 1e-5, double momentum = 0.1)
      : channels_(channels), eps_(eps), momentum_(momentum), gamma_({channels}), beta_({channels}),
        running_mean_({channels}, 0.0), running_var_({channels}, 1.0) {
    std::fill(gamma_.value.data.begin(), gamma_.value.data.end(), 1.0);
  }

  Tensor forward(const Tensor& x, Mode mode) override {
    if (x.rank() != 2 && x.rank() != 4) throw std::invalid_argument("BatchNorm: expected rank 2 or 4");
    if (x.dim(1) != channels_) throw std::invalid_argument("BatchNorm: channel mismatch");
    const std::size_t n = x.dim(0), inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    Tensor y(x.shape);
    if (mode == Mode::kEval) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const double scale = gamma_.value[c] / std::sqrt(running_var_[c] + eps_);
        const double shift = beta_.value[c] - running_mean_[c] * scale;
        for (std::size_t s = 0; s < n; ++s) {
          const std::size_t base = (s * channels_ + c) * inner;
          for (std::size_t i = 0; i < inner; ++i) y[base + i] = x[base + i] * scale + shift;
        }
      }
      return y;
    }
    const double count = static_cast<double>(n * inner);
    if (n * inner < 2) throw std::invalid_argument("BatchNorm: training needs more than one value per channel");
    xhat_ = Tensor(x.shape);
    inv_std_.assign(channels_, 0.0);
    for (std::size_t c = 0; c < channels_; ++c) {
      double mean = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * channels_ + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) mean += x[base + i];
      }
      mean /= count;
      double var = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * channels_ + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) var += (x[base + i] - mean) * (x[base + i] - mean);
      }
      var /= count;
      const double inv_std = 1.0 / std::sqrt(var + eps_);
      inv_std_[c] = inv_std;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * channels_ + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          const double xh = (x[base + i] - mean) * inv_std;
          xhat_[base + i] = xh;
          y[base + i] = gamma_.value[c] * xh + beta_.value[c];
        }
      }
      running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
      running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * var * count / (count - 1.0);
    }
    return y;
  }

  Tensor backward(const Tensor& grad) override {
    if (xhat_.numel() == 0) throw std::logic_error("BatchNorm: backward without training forward");
    const std::size_t n = grad.dim(0), inner = grad.rank() == 4 ? grad.dim(2) * grad.dim(3) : 1;
    const double count = static_cast<double>(n * inner);
    Tensor dx(grad.shape);
    for (std::size_t c = 0; c < channels_; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * channels_ + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          sum_g += grad[base + i];
          sum_gx += grad[base + i] * xhat_[base + i];
        }
      }
      gamma_.grad[c] += sum_gx;
      beta_.grad[c] += sum_g;
      const double k = gamma_.value[c] * inv_std_[c] / count;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * channels_ + c) * inner;
        for (std::size_t i = 0; i < inner; ++i)
          dx[base + i] = k * (count * grad[base + i] - sum_g - xhat_[base + i] * sum_gx);
      }
    }
    return dx;
  }

  void collect(ModuleState& out, const std::string& prefix) override {
    out.params.emplace_back(prefix + "weight", &gamma_);
    out.params.emplace_back(prefix + "bias", &beta_);
    out.buffers.emplace_back(prefix + "running_mean", &running_mean_);
    out.buffers.emplace_back(prefix + "running_var", &running_var_);
  }

 private:
  std::size_t channels_;
  double eps_, momentum_;
  Parameter gamma_, beta_;
  Tensor running_mean_, running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

class ReLU : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    if (mode == Mode::kTrain) output_ = y;
    return y;
  }
  Tensor backward(const Tensor& grad) override {
    Tensor dx(grad.shape);
    for (std::size_t i = 0; i < grad.numel(); ++i) dx[i] = output_[i] > 0.0 ? grad[i] : 0.0;
    return dx;
  }

 private:
  Tensor output_;
};

class MaxPool2d : public Module {
 public:
  MaxPool2d(std::size_t kernel, std::size_t stride, std::size_t pad = 0) : k_(kernel), stride_(stride), pad_(pad) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    require_rank(x, 4, "MaxPool2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h + 2 * pad_ < k_ || w + 2 * pad_ < k_) throw std::invalid_argument("MaxPool2d: input smaller than window");
    const std::size_t ho = (h + 2 * pad_ - k_) / stride_ + 1, wo = (w + 2 * pad_ - k_) / stride_ + 1;
    Tensor y({n, c, ho, wo});
    std::vector<std::size_t> argmax(y.numel());
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      const double* src = x.ptr() + plane * h * w;
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t ki = 0; ki < k_; ++ki) {
            const long ih = static_cast<long>(oh * stride_ + ki) - static_cast<long>(pad_);
            if (ih < 0 || ih >= static_cast<long>(h)) continue;
            for (std::size_t kj = 0; kj < k_; ++kj) {
              const long iw = static_cast<long>(ow * stride_ + kj) - static_cast<long>(pad_);
              if (iw < 0 || iw >= static_cast<long>(w)) continue;
              const std::size_t idx = static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw);
              if (src[idx] > best) {
                best = src[idx];
                best_idx = idx;
              }
            }
          }
          const std::size_t o = plane * ho * wo + oh * wo + ow;
          y[o] = best;
          argmax[o] = plane * h * w + best_idx;
        }
    }
    if (mode == Mode::kTrain) {
      argmax_ = std::move(argmax);
      input_shape_ = x.shape;
    }
    return y;
  }

  Tensor backward(const Tensor& grad) override {
    Tensor dx(input_shape_);
    for (std::size_t o = 0; o < grad.numel(); ++o) dx[argmax_[o]] += grad[o];
    return dx;
  }

 private:
  std::size_t k_, stride_, pad_;
  std::vector<std::size_t> argmax_;
  std::vector<std::size_t> input_shape_;
};

/// Non-overlapping average pooling (kernel = stride).
class AvgPool2d : public Module {
 public:
  explicit AvgPool2d(std::size_t kernel) : k_(kernel) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    require_rank(x, 4, "AvgPool2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = h / k_, wo = w / k_;
    if (ho == 0 || wo == 0) throw std::invalid_argument("AvgPool2d: input smaller than window");
    Tensor y({n, c, ho, wo});
    const double inv = 1.0 / static_cast<double>(k_ * k_);
    for (std::size_t plane = 0; plane < n * c; ++plane)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          double s = 0.0;
          for (std::size_t ki = 0; ki < k_; ++ki)
            for (std::size_t kj = 0; kj < k_; ++kj) s += x[plane * h * w + (oh * k_ + ki) * w + ow * k_ + kj];
          y[plane * ho * wo + oh * wo + ow] = s * inv;
        }
    if (mode == Mode::kTrain) input_shape_ = x.shape;
    return y;
  }

  Tensor backward(const Tensor& grad) override {
    Tensor dx(input_shape_);
    const std::size_t h = input_shape_[2], w = input_shape_[3], ho = grad.dim(2), wo = grad.dim(3);
    const double inv = 1.0 / static_cast<double>(k_ * k_);
    for (std::size_t plane = 0; plane < grad.dim(0) * grad.dim(1); ++plane)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          const double g = grad[plane * ho * wo + oh * wo + ow] * inv;
          for (std::size_t ki = 0; ki < k_; ++ki)
            for (std::size_t kj = 0; kj < k_; ++kj) dx[plane * h * w + (oh * k_ + ki) * w + ow * k_ + kj] += g;
        }
    return dx;
  }

 private:
  std::size_t k_;
  std::vector<std::size_t> input_shape_;
};

/// (N, C, H, W) -> (N, C) spatial mean.
class GlobalAvgPool : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override {
    require_rank(x, 4, "GlobalAvgPool");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor y({n, c});
    for (std::size_t p = 0; p < n * c; ++p) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
      y[p] = s / static_cast<double>(hw);
    }
    if (mode == Mode::kTrain) input_shape_ = x.shape;
    return y;
  }
  Tensor backward(const Tensor& grad) override {
    Tensor dx(input_shape_);
    const std::size_t hw = input_shape_[2] * input_shape_[3];
    for (std::size_t p = 0; p < grad.numel(); ++p) {
      const double g = grad[p] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) dx[p * hw + i] = g;
    }
    return dx;
  }

 private:
  std::vector<std::size_t> input_shape_;
};

class Flatten : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor y = x;
    y.shape = {x.dim(0), x.numel() / x.dim(0)};
    if (mode == Mode::kTrain) input_shape_ = x.shape;
    return y;
  }
  Tensor backward(const Tensor& grad) override {
    Tensor dx = grad;
    dx.shape = input_shape_;
    return dx;
  }

 private:
  std::vector<std::size_t> input_shape_;
};

class Linear : public Module {
 public:
  Linear(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng)
      : in_(in_features), out_(out_features), weight_({out_features, in_features}), bias_({out_features}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    for (auto& w : weight_.value.data) w = bound * (2.0 * uniform01(rng) - 1.0);
    for (auto& b : bias_.value.data) b = bound * (2.0 * uniform01(rng) - 1.0);
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  Tensor forward(const Tensor& x, Mode mode) override {
    require_rank(x, 2, "Linear");
    if (x.dim(1) != in_) throw std::invalid_argument("Linear: feature mismatch, got " + x.shape_string());
    const std::size_t n = x.dim(0);
    Tensor y({n, out_});
    ConstMatMap in(x.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_));
    ConstMatMap w(weight_.value.ptr(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
    MatMap out(y.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out_));
    out.noalias() = in * w.transpose();
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t o = 0; o < out_; ++o) y[s * out_ + o] += bias_.value[o];
    if (mode == Mode::kTrain) input_ = x;
    return y;
  }

  Tensor backward(const Tensor& grad) override {
    const std::size_t n = input_.dim(0);
    ConstMatMap in(input_.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_));
    ConstMatMap g(grad.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out_));
    ConstMatMap w(weight_.value.ptr(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
    MatMap dw(weight_.grad.ptr(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
    dw.noalias() += g.transpose() * in;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += grad[s * out_ + o];
    Tensor dx({n, in_});
    MatMap dxm(dx.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in_));
    dxm.noalias() = g * w;
    return dx;
  }

  void collect(ModuleState& out, const std::string& prefix) override {
    out.params.emplace_back(prefix + "weight", &weight_);
    out.params.emplace_back(prefix + "bias", &bias_);
  }

 private:
  std::size_t in_, out_;
  Parameter weight_, bias_;
  Tensor input_;
};

class Sequential : public Module {
 public:
  Sequential() = default;

  Sequential& add(ModulePtr m) {
    layers_.push_back(std::move(m));
    return *this;
  }
  template <class M, class... Args>
  M& emplace(Args&&... args) {
    auto p = std::make_unique<M>(std::forward<Args>(args)...);
    M& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  Module& at(std::size_t i) { return *layers_.at(i); }

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
  }
  Tensor backward(const Tensor& grad) override {
    Tensor g = grad;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  void collect(ModuleState& out, const std::string& prefix) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(out, prefix + std::to_string(i) + ".");
  }

 private:
  std::vector<ModulePtr> layers_;
};

/// y = act(main(x) + shortcut(x)); an empty shortcut is the identity.
class Residual : public Module {
 public:
  Residual(Sequential main, Sequential shortcut, bool post_relu)
      : main_(std::move(main)), shortcut_(std::move(shortcut)), post_relu_(post_relu) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor y = main_.forward(x, mode);
    if (shortcut_.empty())
      y += x;
    else
      y += shortcut_.forward(x, mode);
    return post_relu_ ? relu_.forward(y, mode) : y;
  }
  Tensor backward(const Tensor& grad) override {
    const Tensor g = post_relu_ ? relu_.backward(grad) : grad;
    Tensor dx = main_.backward(g);
    dx += shortcut_.empty() ? g : shortcut_.backward(g);
    return dx;
  }
  void collect(ModuleState& out, const std::string& prefix) override {
    main_.collect(out, prefix + "main.");
    shortcut_.collect(out, prefix + "shortcut.");
  }

 private:
  Sequential main_, shortcut_;
  bool post_relu_;
  ReLU relu_;
};

/// Pre-activation block: a = pre(x); y = main(a) + (shortcut(a) or x).
class PreActResidual : public Module {
 public:
  PreActResidual(Sequential pre, Sequential main, Sequential shortcut)
      : pre_(std::move(pre)), main_(std::move(main)), shortcut_(std::move(shortcut)) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    const Tensor a = pre_.forward(x, mode);
    Tensor y = main_.forward(a, mode);
    if (shortcut_.empty())
      y += x;
    else
      y += shortcut_.forward(a, mode);
    return y;
  }
  Tensor backward(const Tensor& grad) override {
    Tensor da = main_.backward(grad);
    if (shortcut_.empty()) {
      Tensor dx = pre_.backward(da);
      dx += grad;
      return dx;
    }
    da += shortcut_.backward(grad);
    return pre_.backward(da);
  }
  void collect(ModuleState& out, const std::string& prefix) override {
    pre_.collect(out, prefix + "pre.");
    main_.collect(out, prefix + "main.");
    shortcut_.collect(out, prefix + "shortcut.");
  }

 private:
  Sequential pre_, main_, shortcut_;
};

/// y = concat_channels(x, branch(x)), the DenseNet layer connectivity.
class DenseConcat : public Module {
 public:
  explicit DenseConcat(Sequential branch) : branch_(std::move(branch)) {}

  Tensor forward(const Tensor& x, Mode mode) override {
    require_rank(x, 4, "DenseConcat");
    const Tensor b = branch_.forward(x, mode);
    const std::size_t n = x.dim(0), cx = x.dim(1), cb = b.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor y({n, cx + cb, x.dim(2), x.dim(3)});
    for (std::size_t s = 0; s < n; ++s) {
      std::copy_n(x.ptr() + s * cx * hw, cx * hw, y.ptr() + s * (cx + cb) * hw);
      std::copy_n(b.ptr() + s * cb * hw, cb * hw, y.ptr() + s * (cx + cb) * hw + cx * hw);
    }
    if (mode == Mode::kTrain) in_channels_ = cx;
    return y;
  }
  Tensor backward(const Tensor& grad) override {
    const std::size_t n = grad.dim(0), ct = grad.dim(1), cx = in_channels_, cb = ct - cx;
    const std::size_t hw = grad.dim(2) * grad.dim(3);
    Tensor gx({n, cx, grad.dim(2), grad.dim(3)}), gb({n, cb, grad.dim(2), grad.dim(3)});
    for (std::size_t s = 0; s < n; ++s) {
      std::copy_n(grad.ptr() + s * ct * hw, cx * hw, gx.ptr() + s * cx * hw);
      std::copy_n(grad.ptr() + s * ct * hw + cx * hw, cb * hw, gb.ptr() + s * cb * hw);
    }
    gx += branch_.backward(gb);
    return gx;
  }
  void collect(ModuleState& out, const std::string& prefix) override { branch_.collect(out, prefix + "branch."); }

 private:
  Sequential branch_;
  std::size_t in_channels_ = 0;
};

inline ModuleState state_of(Module& m) {
  ModuleState s;
  m.collect(s, "");
  return s;
}

inline std::size_t parameter_count(Module& m) {
  std::size_t total = 0;
  for (auto& [name, p] : state_of(m).params) total += p->value.numel();
  return total;
}

inline void zero_grad(Module& m) {
  for (auto& [name, p] : state_of(m).params) p->grad.zero();
}

}  // namespace aikd::nn
