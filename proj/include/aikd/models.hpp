#pragma once

// Classifier architectures, the logit-space critic, and the student /
// superior / previous-epoch model triple.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aikd/checkpoint.hpp"
#include "aikd/losses.hpp"
#include "aikd/matrix.hpp"
#include "aikd/nn.hpp"
#include "aikd/rng.hpp"

namespace aikd::models {

enum class Architecture { kResNet18, kResNet50, kPreActResNet18, kPreActResNet50, kDenseNet121, kTinyCnn };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::kResNet18: return "resnet18";
    case Architecture::kResNet50: return "resnet50";
    case Architecture::kPreActResNet18: return "preact_resnet18";
    case Architecture::kPreActResNet50: return "preact_resnet50";
    case Architecture::kDenseNet121: return "densenet121";
    case Architecture::kTinyCnn: return "tiny_cnn";
  }
  return "unknown";
}

inline Architecture architecture_from_string(const std::string& s) {
  for (auto a : {Architecture::kResNet18, Architecture::kResNet50, Architecture::kPreActResNet18,
                 Architecture::kPreActResNet50, Architecture::kDenseNet121, Architecture::kTinyCnn})
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

struct ClassifierSpec {
  Architecture architecture = Architecture::kTinyCnn;
  std::size_t num_classes = 10;
  std::size_t input_resolution = 32;
  std::size_t in_channels = 3;

  // Named architectures run at CIFAR (32), Tiny-ImageNet (64) or ImageNet-style (224) resolution.
  static constexpr std::size_t kCanonicalResolutions[] = {32, 64, 224};

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("num_classes must be at least 2");
    if (in_channels < 1) throw std::invalid_argument("in_channels must be at least 1");
    if (architecture == Architecture::kTinyCnn) {
      if (input_resolution < 8) throw std::invalid_argument("tiny_cnn needs input resolution >= 8");
      return;
    }
    if (std::find(std::begin(kCanonicalResolutions), std::end(kCanonicalResolutions), input_resolution) ==
        std::end(kCanonicalResolutions))
      throw std::invalid_argument(to_string(architecture) + " requires resolution 32, 64 or 224, got " +
                                  std::to_string(input_resolution));
  }

  bool imagenet_stem() const { return input_resolution >= 128; }

  nlohmann::json to_json() const {
    return {{"architecture", to_string(architecture)},
            {"num_classes", num_classes},
            {"input_resolution", input_resolution},
            {"in_channels", in_channels}};
  }
  static ClassifierSpec from_json(const nlohmann::json& j) {
    ClassifierSpec s;
    s.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.input_resolution = j.at("input_resolution").get<std::size_t>();
    s.in_channels = j.value("in_channels", std::size_t{3});
    return s;
  }
  bool operator==(const ClassifierSpec&) const = default;
};

class SpecMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

using nn::Sequential;

inline void conv_bn(Sequential& s, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                    std::size_t pad, std::mt19937_64& rng, bool relu) {
  s.emplace<nn::Conv2d>(in, out, k, stride, pad, false, rng);
  s.emplace<nn::BatchNorm>(out);
  if (relu) s.emplace<nn::ReLU>();
}

inline void bn_relu(Sequential& s, std::size_t c) {
  s.emplace<nn::BatchNorm>(c);
  s.emplace<nn::ReLU>();
}

inline nn::ModulePtr basic_block(std::size_t in, std::size_t planes, std::size_t stride, std::mt19937_64& rng) {
  Sequential main;
  conv_bn(main, in, planes, 3, stride, 1, rng, true);
  conv_bn(main, planes, planes, 3, 1, 1, rng, false);
  Sequential shortcut;
  if (stride != 1 || in != planes) conv_bn(shortcut, in, planes, 1, stride, 0, rng, false);
  return std::make_unique<nn::Residual>(std::move(main), std::move(shortcut), true);
}

inline nn::ModulePtr bottleneck_block(std::size_t in, std::size_t planes, std::size_t stride, std::mt19937_64& rng) {
  Sequential main;
  conv_bn(main, in, planes, 1, 1, 0, rng, true);
  conv_bn(main, planes, planes, 3, stride, 1, rng, true);
  conv_bn(main, planes, planes * 4, 1, 1, 0, rng, false);
  Sequential shortcut;
  if (stride != 1 || in != planes * 4) conv_bn(shortcut, in, planes * 4, 1, stride, 0, rng, false);
  return std::make_unique<nn::Residual>(std::move(main), std::move(shortcut), true);
}

inline nn::ModulePtr preact_block(std::size_t in, std::size_t planes, std::size_t stride, std::mt19937_64& rng) {
  Sequential pre;
  bn_relu(pre, in);
  Sequential main;
  main.emplace<nn::Conv2d>(in, planes, 3, stride, 1, false, rng);
  bn_relu(main, planes);
  main.emplace<nn::Conv2d>(planes, planes, 3, 1, 1, false, rng);
  Sequential shortcut;
  if (stride != 1 || in != planes) shortcut.emplace<nn::Conv2d>(in, planes, 1, stride, 0, false, rng);
  return std::make_unique<nn::PreActResidual>(std::move(pre), std::move(main), std::move(shortcut));
}

inline nn::ModulePtr preact_bottleneck(std::size_t in, std::size_t planes, std::size_t stride,
                                       std::mt19937_64& rng) {
  Sequential pre;
  bn_relu(pre, in);
  Sequential main;
  main.emplace<nn::Conv2d>(in, planes, 1, 1, 0, false, rng);
  bn_relu(main, planes);
  main.emplace<nn::Conv2d>(planes, planes, 3, stride, 1, false, rng);
  bn_relu(main, planes);
  main.emplace<nn::Conv2d>(planes, planes * 4, 1, 1, 0, false, rng);
  Sequential shortcut;
  if (stride != 1 || in != planes * 4) shortcut.emplace<nn::Conv2d>(in, planes * 4, 1, stride, 0, false, rng);
  return std::make_unique<nn::PreActResidual>(std::move(pre), std::move(main), std::move(shortcut));
}

inline void imagenet_stem(Sequential& net, std::size_t in_channels, std::size_t width, std::mt19937_64& rng,
                          bool with_bn) {
  net.emplace<nn::Conv2d>(in_channels, width, 7, 2, 3, false, rng);
  if (with_bn) bn_relu(net, width);
  net.emplace<nn::MaxPool2d>(3, 2, 1);
}

struct Built {
  std::unique_ptr<Sequential> net;
  nn::Linear* head = nullptr;
};

inline Built build_resnet(const ClassifierSpec& spec, bool bottleneck, bool preact, const std::size_t (&blocks)[4],
                          std::mt19937_64& rng) {
  auto net = std::make_unique<Sequential>();
  if (spec.imagenet_stem()) {
    imagenet_stem(*net, spec.in_channels, 64, rng, !preact);
  } else if (preact) {
    net->emplace<nn::Conv2d>(spec.in_channels, 64, 3, 1, 1, false, rng);
  } else {
    conv_bn(*net, spec.in_channels, 64, 3, 1, 1, rng, true);
  }
  const std::size_t expansion = bottleneck ? 4 : 1;
  std::size_t in = 64;
  const std::size_t planes[4] = {64, 128, 256, 512};
  for (std::size_t stage = 0; stage < 4; ++stage) {
    for (std::size_t b = 0; b < blocks[stage]; ++b) {
      const std::size_t stride = (b == 0 && stage > 0) ? 2 : 1;
      if (preact)
        net->add(bottleneck ? preact_bottleneck(in, planes[stage], stride, rng)
                            : preact_block(in, planes[stage], stride, rng));
      else
        net->add(bottleneck ? bottleneck_block(in, planes[stage], stride, rng)
                            : basic_block(in, planes[stage], stride, rng));
      in = planes[stage] * expansion;
    }
  }
  if (preact) bn_relu(*net, in);
  net->emplace<nn::GlobalAvgPool>();
  auto& head = net->emplace<nn::Linear>(in, spec.num_classes, rng);
  return {std::move(net), &head};
}

inline Built build_densenet121(const ClassifierSpec& spec, std::mt19937_64& rng) {
  constexpr std::size_t growth = 32, bn_size = 4;
  constexpr std::size_t blocks[4] = {6, 12, 24, 16};
  auto net = std::make_unique<Sequential>();
  std::size_t channels = 2 * growth;
  if (spec.imagenet_stem())
    imagenet_stem(*net, spec.in_channels, channels, rng, true);
  else
    net->emplace<nn::Conv2d>(spec.in_channels, channels, 3, 1, 1, false, rng);
  for (std::size_t stage = 0; stage < 4; ++stage) {
    for (std::size_t l = 0; l < blocks[stage]; ++l) {
      Sequential branch;
      bn_relu(branch, channels);
      branch.emplace<nn::Conv2d>(channels, bn_size * growth, 1, 1, 0, false, rng);
      bn_relu(branch, bn_size * growth);
      branch.emplace<nn::Conv2d>(bn_size * growth, growth, 3, 1, 1, false, rng);
      net->emplace<nn::DenseConcat>(std::move(branch));
      channels += growth;
    }
    if (stage < 3) {
      bn_relu(*net, channels);
      net->emplace<nn::Conv2d>(channels, channels / 2, 1, 1, 0, false, rng);
      net->emplace<nn::AvgPool2d>(2);
      channels /= 2;
    }
  }
  bn_relu(*net, channels);
  net->emplace<nn::GlobalAvgPool>();
  auto& head = net->emplace<nn::Linear>(channels, spec.num_classes, rng);
  return {std::move(net), &head};
}

// conv(8)-BN-ReLU-pool, conv(16)-BN-ReLU-pool, linear over the flattened map.
inline Built build_tiny_cnn(const ClassifierSpec& spec, std::mt19937_64& rng) {
  auto net = std::make_unique<Sequential>();
  conv_bn(*net, spec.in_channels, 8, 3, 1, 1, rng, true);
  net->emplace<nn::MaxPool2d>(2, 2);
  conv_bn(*net, 8, 16, 3, 1, 1, rng, true);
  net->emplace<nn::MaxPool2d>(2, 2);
  net->emplace<nn::Flatten>();
  const std::size_t side = spec.input_resolution / 4;
  auto& head = net->emplace<nn::Linear>(16 * side * side, spec.num_classes, rng);
  return {std::move(net), &head};
}

}  // namespace detail

/// An image classifier. Frozen classifiers always run in inference mode and
/// refuse backward passes.
class Classifier {
 public:
  Classifier(const ClassifierSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    auto rng = make_rng(seed, Stream::kInit);
    detail::Built built;
    switch (spec_.architecture) {
      case Architecture::kResNet18: built = detail::build_resnet(spec_, false, false, {2, 2, 2, 2}, rng); break;
      case Architecture::kResNet50: built = detail::build_resnet(spec_, true, false, {3, 4, 6, 3}, rng); break;
      case Architecture::kPreActResNet18: built = detail::build_resnet(spec_, false, true, {2, 2, 2, 2}, rng); break;
      case Architecture::kPreActResNet50: built = detail::build_resnet(spec_, true, true, {3, 4, 6, 3}, rng); break;
      case Architecture::kDenseNet121: built = detail::build_densenet121(spec_, rng); break;
      case Architecture::kTinyCnn: built = detail::build_tiny_cnn(spec_, rng); break;
    }
    net_ = std::move(built.net);
    head_ = built.head;
  }

  const ClassifierSpec& spec() const { return spec_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  std::size_t head_width() const { return head_->out_features(); }

  Tensor forward(const Tensor& images, nn::Mode mode) {
    nn::require_rank(images, 4, "Classifier");
    if (images.dim(1) != spec_.in_channels || images.dim(2) != spec_.input_resolution ||
        images.dim(3) != spec_.input_resolution)
      throw std::invalid_argument("classifier expects (N, " + std::to_string(spec_.in_channels) + ", " +
                                  std::to_string(spec_.input_resolution) + ", " +
                                  std::to_string(spec_.input_resolution) + ") input, got " + images.shape_string());
    return net_->forward(images, frozen_ ? nn::Mode::kEval : mode);
  }

  /// Backpropagates d loss / d logits; parameter gradients accumulate.
  void backward(const Tensor& grad_logits) {
    if (frozen_) throw std::logic_error("frozen classifier cannot be trained");
    net_->backward(grad_logits);
  }

  nn::ModuleState state() const { return nn::state_of(*net_); }
  void zero_grad() { nn::zero_grad(*net_); }
  std::size_t parameter_count() const { return nn::parameter_count(*net_); }

  /// Checksum over parameters and buffers.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    const auto s = state();
    for (const auto& [name, p] : s.params) h = hash_tensor(p->value, h);
    for (const auto& [name, b] : s.buffers) h = hash_tensor(*b, h);
    return h;
  }

  void copy_state_from(const Classifier& other) {
    if (!(other.spec_ == spec_)) throw SpecMismatchError("cannot copy state between different classifier specs");
    const auto dst = state(), src = other.state();
    for (std::size_t i = 0; i < dst.params.size(); ++i) dst.params[i].second->value = src.params[i].second->value;
    for (std::size_t i = 0; i < dst.buffers.size(); ++i) *dst.buffers[i].second = *src.buffers[i].second;
  }

  void save_to(Checkpoint& ckpt, const std::string& prefix) const {
    const auto s = state();
    for (const auto& [name, p] : s.params) ckpt.put(prefix + name, p->value);
    for (const auto& [name, b] : s.buffers) ckpt.put(prefix + name, *b);
  }

  void load_from(const Checkpoint& ckpt, const std::string& prefix) {
    const auto s = state();
    auto load = [&](const std::string& name, Tensor& dst) {
      const Tensor& src = ckpt.get(prefix + name);
      if (src.shape != dst.shape)
        throw SpecMismatchError("checkpoint tensor " + prefix + name + " has shape " + src.shape_string() +
                                ", model expects " + dst.shape_string());
      dst = src;
    };
    for (const auto& [name, p] : s.params) load(name, p->value);
    for (const auto& [name, b] : s.buffers) load(name, *b);
  }

 private:
  ClassifierSpec spec_;
  std::unique_ptr<nn::Sequential> net_;
  nn::Linear* head_ = nullptr;
  bool frozen_ = false;
};

inline Classifier build_classifier(const ClassifierSpec& spec, std::uint64_t seed) { return Classifier(spec, seed); }

struct CriticSpec {
  std::size_t input_dim = 10;
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 32;
  double leaky_slope = 0.2;

  void validate() const {
    if (input_dim < 2) throw std::invalid_argument("critic input_dim must be at least 2");
    if (hidden1 < 1 || hidden2 < 1) throw std::invalid_argument("critic hidden sizes must be positive");
    if (!(leaky_slope > 0.0)) throw std::invalid_argument("leaky_slope must be positive");
  }
};

/// Logit-space critic: FC(C->h1) -> BatchNorm1d -> LeakyReLU -> FC(h1->h2) -> FC(h2->1).
class MlpCritic {
 public:
  /// Intermediate values of a batch-statistics forward pass.
  struct Tape {
    Matrix input, xhat, activated, features;
    Eigen::VectorXd inv_std;
    Matrix normalized;
  };

  MlpCritic(const CriticSpec& spec, std::uint64_t seed)
      : spec_(spec), fc1_w_({spec.hidden1, spec.input_dim}), fc1_b_({spec.hidden1}), bn_w_({spec.hidden1}),
        bn_b_({spec.hidden1}), fc2_w_({spec.hidden2, spec.hidden1}), fc2_b_({spec.hidden2}), proj_w_({1, spec.hidden2}),
        proj_b_({1}), running_mean_({spec.hidden1}, 0.0), running_var_({spec.hidden1}, 1.0) {
    spec_.validate();
    auto rng = make_rng(seed, Stream::kCriticInit);
    auto init_linear = [&](nn::Parameter& w, nn::Parameter& b, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : w.value.data) v = bound * (2.0 * uniform01(rng) - 1.0);
      for (auto& v : b.value.data) v = bound * (2.0 * uniform01(rng) - 1.0);
    };
    init_linear(fc1_w_, fc1_b_, spec.input_dim);
    std::fill(bn_w_.value.data.begin(), bn_w_.value.data.end(), 1.0);
    init_linear(fc2_w_, fc2_b_, spec.hidden1);
    init_linear(proj_w_, proj_b_, spec.hidden2);
  }

  const CriticSpec& spec() const { return spec_; }

  std::vector<double> forward_train(const Matrix& x, Tape& tape) {
    check_input(x);
    if (x.rows() < 2) throw std::invalid_argument("critic batch-statistics pass needs at least two rows");
    tape.input = x;
    Matrix h = x * w1().transpose();
    h.rowwise() += b1().transpose();
    const double n = static_cast<double>(x.rows());
    const Eigen::RowVectorXd mean = h.colwise().mean();
    Matrix centered = h.rowwise() - mean;
    const Eigen::RowVectorXd var = centered.array().square().colwise().sum() / n;
    tape.inv_std = (var.array() + kEps).rsqrt().transpose();
    tape.xhat = centered.array().rowwise() * tape.inv_std.transpose().array();
    tape.normalized = (tape.xhat.array().rowwise() * vec(bn_w_).transpose().array()).rowwise() +
                      vec(bn_b_).transpose().array();
    tape.activated = leaky(tape.normalized);
    tape.features = tape.activated * w2().transpose();
    tape.features.rowwise() += b2().transpose();
    for (std::size_t j = 0; j < spec_.hidden1; ++j) {
      running_mean_[j] = (1.0 - kMomentum) * running_mean_[j] + kMomentum * mean(static_cast<Eigen::Index>(j));
      running_var_[j] =
          (1.0 - kMomentum) * running_var_[j] + kMomentum * var(static_cast<Eigen::Index>(j)) * n / (n - 1.0);
    }
    return project(tape.features);
  }

  /// Accumulates parameter gradients of sum_b grad_scores[b] * score_b for a batch-statistics pass.
  void backward_train(const Tape& tape, std::span<const double> grad_scores) {
    const auto rows = tape.input.rows();
    Eigen::Map<const Eigen::VectorXd> ds(grad_scores.data(), rows);
    grad_vec(proj_w_) += tape.features.transpose() * ds;
    proj_b_.grad[0] += ds.sum();
    const Matrix df = ds * w3().transpose();  // (B, h2)
    mat(fc2_w_.grad, spec_.hidden2, spec_.hidden1) += df.transpose() * tape.activated;
    grad_vec(fc2_b_) += df.colwise().sum().transpose();
    Matrix da = df * w2();  // (B, h1)
    for (Eigen::Index i = 0; i < da.size(); ++i)
      if (!(tape.normalized.data()[i] > 0.0)) da.data()[i] *= spec_.leaky_slope;
    grad_vec(bn_w_) += (da.array() * tape.xhat.array()).colwise().sum().transpose().matrix();
    grad_vec(bn_b_) += da.colwise().sum().transpose();
    const Eigen::RowVectorXd sum_g = (da.array().rowwise() * vec(bn_w_).transpose().array()).colwise().sum();
    const Matrix g_hat = da.array().rowwise() * vec(bn_w_).transpose().array();
    const Eigen::RowVectorXd sum_gx = (g_hat.array() * tape.xhat.array()).colwise().sum();
    const double n = static_cast<double>(rows);
    Matrix dh = ((g_hat * n).rowwise() - sum_g - (tape.xhat.array().rowwise() * sum_gx.array()).matrix()).array() / n;
    dh = dh.array().rowwise() * tape.inv_std.transpose().array();
    mat(fc1_w_.grad, spec_.hidden1, spec_.input_dim) += dh.transpose() * tape.input;
    grad_vec(fc1_b_) += dh.colwise().sum().transpose();
  }

  /// Inference-statistics scores.
  std::vector<double> scores(const Matrix& x) const {
    check_input(x);
    Matrix h = x * w1().transpose();
    h.rowwise() += b1().transpose();
    Matrix features = leaky(eval_normalize(h)) * w2().transpose();
    features.rowwise() += b2().transpose();
    return project(features);
  }

  double score(std::span<const double> x) const {
    Matrix row = Eigen::Map<const Eigen::RowVectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    return scores(row).front();
  }

  /// grad_x D(x) in inference mode: W1^T diag(scale * leaky'(a)) W2^T w3.
  std::vector<double> input_gradient(std::span<const double> x) const {
    const Eigen::VectorXd u = hidden_weights(x);
    const Eigen::VectorXd g = w1().transpose() * u;
    return {g.data(), g.data() + g.size()};
  }

  /// The inference-mode critic is piecewise linear, so its Hessian vanishes almost everywhere.
  std::vector<double> input_hvp(std::span<const double> x, std::span<const double> /*v*/) const {
    return std::vector<double>(x.size(), 0.0);
  }

  Matrix input_gradients(const Matrix& x) const {
    check_input(x);
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index b = 0; b < x.rows(); ++b) {
      const auto g = input_gradient(std::span<const double>(x.data() + b * x.cols(), static_cast<std::size_t>(x.cols())));
      for (Eigen::Index c = 0; c < x.cols(); ++c) out(b, c) = g[static_cast<std::size_t>(c)];
    }
    return out;
  }

  /// Adds weight * d(penalty)/d(params) given a penalty evaluated with this critic.
  void accumulate_penalty_gradient(const losses::PenaltyResult& gp, double weight) {
    const auto rows = gp.interpolates.rows();
    const Eigen::VectorXd v = w2().transpose() * w3();  // (h1)
    for (Eigen::Index b = 0; b < rows; ++b) {
      const Eigen::VectorXd g = gp.input_gradients.row(b).transpose();
      const double norm = g.norm();
      if (norm == 0.0) continue;
      const double c = weight * 2.0 * (norm - 1.0) / norm / static_cast<double>(rows);
      const Eigen::VectorXd r = c * g;
      std::span<const double> xhat(gp.interpolates.data() + b * gp.interpolates.cols(),
                                   static_cast<std::size_t>(gp.interpolates.cols()));
      const Eigen::VectorXd slope = activation_slopes(xhat);
      const Eigen::VectorXd inv_sigma = (vec(running_var_).array() + kEps).rsqrt();
      const Eigen::VectorXd scale = vec(bn_w_).array() * inv_sigma.array();
      const Eigen::VectorXd u = scale.array() * slope.array() * v.array();
      mat(fc1_w_.grad, spec_.hidden1, spec_.input_dim) += u * r.transpose();
      const Eigen::VectorXd q = w1() * r;
      grad_vec(bn_w_) += (q.array() * slope.array() * v.array() * inv_sigma.array()).matrix();
      const Eigen::VectorXd t = q.array() * scale.array() * slope.array();
      mat(fc2_w_.grad, spec_.hidden2, spec_.hidden1) += w3() * t.transpose();
      grad_vec_row(proj_w_) += (w2() * t).transpose();
    }
  }

  nn::ModuleState state() {
    nn::ModuleState s;
    s.params = {{"fc1.weight", &fc1_w_}, {"fc1.bias", &fc1_b_},  {"bn.weight", &bn_w_},     {"bn.bias", &bn_b_},
                {"fc2.weight", &fc2_w_}, {"fc2.bias", &fc2_b_}, {"proj.weight", &proj_w_}, {"proj.bias", &proj_b_}};
    s.buffers = {{"bn.running_mean", &running_mean_}, {"bn.running_var", &running_var_}};
    return s;
  }

  void zero_grad() {
    for (auto& [name, p] : state().params) p->grad.zero();
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, p] : state().params) n += p->value.numel();
    return n;
  }

  std::uint64_t checksum() {
    std::uint64_t h = 1469598103934665603ULL;
    auto s = state();
    for (auto& [name, p] : s.params) h = hash_tensor(p->value, h);
    for (auto& [name, b] : s.buffers) h = hash_tensor(*b, h);
    return h;
  }

  void save_to(Checkpoint& ckpt, const std::string& prefix) {
    auto s = state();
    for (auto& [name, p] : s.params) ckpt.put(prefix + name, p->value);
    for (auto& [name, b] : s.buffers) ckpt.put(prefix + name, *b);
  }

  void load_from(const Checkpoint& ckpt, const std::string& prefix) {
    auto s = state();
    auto load = [&](const std::string& name, Tensor& dst) {
      const Tensor& src = ckpt.get(prefix + name);
      if (src.shape != dst.shape) throw SpecMismatchError("critic tensor " + prefix + name + " has wrong shape");
      dst = src;
    };
    for (auto& [name, p] : s.params) load(name, p->value);
    for (auto& [name, b] : s.buffers) load(name, *b);
  }

 private:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  using ConstMap = Eigen::Map<const Matrix>;
  using MutMap = Eigen::Map<Matrix>;

  static Eigen::Map<Eigen::VectorXd> vec(nn::Parameter& p) {
    return {p.value.ptr(), static_cast<Eigen::Index>(p.value.numel())};
  }
  static Eigen::Map<const Eigen::VectorXd> vec(const nn::Parameter& p) {
    return {p.value.ptr(), static_cast<Eigen::Index>(p.value.numel())};
  }
  static Eigen::Map<const Eigen::VectorXd> vec(const Tensor& t) {
    return {t.ptr(), static_cast<Eigen::Index>(t.numel())};
  }
  static Eigen::Map<Eigen::VectorXd> grad_vec(nn::Parameter& p) {
    return {p.grad.ptr(), static_cast<Eigen::Index>(p.grad.numel())};
  }
  static Eigen::Map<Eigen::RowVectorXd> grad_vec_row(nn::Parameter& p) {
    return {p.grad.ptr(), static_cast<Eigen::Index>(p.grad.numel())};
  }
  static MutMap mat(Tensor& t, std::size_t r, std::size_t c) {
    return {t.ptr(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
  }

  ConstMap w1() const {
    return {fc1_w_.value.ptr(), static_cast<Eigen::Index>(spec_.hidden1), static_cast<Eigen::Index>(spec_.input_dim)};
  }
  Eigen::Map<const Eigen::VectorXd> b1() const { return vec(fc1_b_); }
  ConstMap w2() const {
    return {fc2_w_.value.ptr(), static_cast<Eigen::Index>(spec_.hidden2), static_cast<Eigen::Index>(spec_.hidden1)};
  }
  Eigen::Map<const Eigen::VectorXd> b2() const { return vec(fc2_b_); }
  Eigen::Map<const Eigen::VectorXd> w3() const { return vec(proj_w_); }

  void check_input(const Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != spec_.input_dim)
      throw std::invalid_argument("critic expects " + std::to_string(spec_.input_dim) + " inputs, got " +
                                  std::to_string(x.cols()));
  }

  Matrix leaky(const Matrix& a) const {
    return (a.array() > 0.0).select(a, a * spec_.leaky_slope);
  }

  Matrix eval_normalize(const Matrix& h) const {
    Matrix out(h.rows(), h.cols());
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      const auto ju = static_cast<std::size_t>(j);
      const double scale = bn_w_.value[ju] / std::sqrt(running_var_[ju] + kEps);
      out.col(j) = ((h.col(j).array() - running_mean_[ju]) * scale + bn_b_.value[ju]).matrix();
    }
    return out;
  }

  std::vector<double> project(const Matrix& features) const {
    const Eigen::VectorXd s = (features * w3()).array() + proj_b_.value[0];
    return {s.data(), s.data() + s.size()};
  }

  Eigen::VectorXd activation_slopes(std::span<const double> x) const {
    if (x.size() != spec_.input_dim) throw std::invalid_argument("critic input has wrong dimension");
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
    const Eigen::VectorXd h = w1() * xv + b1();
    Eigen::VectorXd slope(h.size());
    for (Eigen::Index j = 0; j < h.size(); ++j) {
      const auto ju = static_cast<std::size_t>(j);
      const double a = (h(j) - running_mean_[ju]) * bn_w_.value[ju] / std::sqrt(running_var_[ju] + kEps) +
                       bn_b_.value[ju];
      slope(j) = a > 0.0 ? 1.0 : spec_.leaky_slope;
    }
    return slope;
  }

  Eigen::VectorXd hidden_weights(std::span<const double> x) const {
    const Eigen::VectorXd slope = activation_slopes(x);
    const Eigen::VectorXd v = w2().transpose() * w3();
    Eigen::VectorXd u(slope.size());
    for (Eigen::Index j = 0; j < u.size(); ++j) {
      const auto ju = static_cast<std::size_t>(j);
      u(j) = bn_w_.value[ju] / std::sqrt(running_var_[ju] + kEps) * slope(j) * v(j);
    }
    return u;
  }

  CriticSpec spec_;
  nn::Parameter fc1_w_, fc1_b_, bn_w_, bn_b_, fc2_w_, fc2_b_, proj_w_, proj_b_;
  Tensor running_mean_, running_var_;
};

static_assert(losses::CriticWithHessian<MlpCritic>);

inline MlpCritic build_critic(const CriticSpec& spec, std::uint64_t seed) { return MlpCritic(spec, seed); }

/// Student S_t, frozen superior S^Sup (absent for presets that do not use it),
/// and the frozen previous-epoch snapshot S_{t-1}.
struct ModelTriple {
  Classifier student;
  std::optional<Classifier> superior;
  Classifier previous;

  ModelTriple(Classifier s, std::optional<Classifier> sup, Classifier prev)
      : student(std::move(s)), superior(std::move(sup)), previous(std::move(prev)) {
    if (superior && !(superior->spec() == student.spec()))
      throw SpecMismatchError("superior and student specs differ");
    if (!(previous.spec() == student.spec())) throw SpecMismatchError("previous and student specs differ");
    previous.freeze();
    if (superior) superior->freeze();
  }
};

/// previous := copy of the student's current parameters and buffers.
inline void snapshot_previous(ModelTriple& triple) { triple.previous.copy_state_from(triple.student); }

struct LoadedSuperior {
  Classifier model;
  double manifest_accuracy = 0.0;  // held-out accuracy recorded when the checkpoint was written
};

inline LoadedSuperior load_superior(const std::filesystem::path& path, const ClassifierSpec& spec) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.meta.contains("spec")) throw CheckpointError("checkpoint has no classifier spec");
  const auto stored = ClassifierSpec::from_json(ckpt.meta.at("spec"));
  if (!(stored == spec))
    throw SpecMismatchError("checkpoint spec " + ckpt.meta.at("spec").dump() + " does not match " +
                            spec.to_json().dump());
  LoadedSuperior out{Classifier(spec, 0), ckpt.meta.value("/manifest/val_accuracy"_json_pointer, 0.0)};
  out.model.load_from(ckpt, "student.");
  out.model.freeze();
  return out;
}

}  // namespace aikd::models
