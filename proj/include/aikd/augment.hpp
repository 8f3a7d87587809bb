#pragma once

// Training-time augmentation: pad + random crop + flip, then optionally one of
// cutout, mixup or cutmix, then per-channel normalization. Operates on
// (N, C, S, S) tensors with pixel values in [0, 1].

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "aikd/data.hpp"
#include "aikd/losses.hpp"
#include "aikd/rng.hpp"
#include "aikd/tensor.hpp"

namespace aikd::augment {

enum class Extra { kNone, kCutout, kMixup, kCutmix };

inline std::string to_string(Extra e) {
  switch (e) {
    case Extra::kNone: return "none";
    case Extra::kCutout: return "cutout";
    case Extra::kMixup: return "mixup";
    case Extra::kCutmix: return "cutmix";
  }
  return "unknown";
}

inline Extra extra_from_string(const std::string& s) {
  for (auto e : {Extra::kNone, Extra::kCutout, Extra::kMixup, Extra::kCutmix})
    if (to_string(e) == s) return e;
  throw std::invalid_argument("unknown augmentation '" + s + "'");
}

struct StandardPolicy {
  bool enabled = true;
  std::size_t pad = 4;
  std::size_t crop = 0;  // 0: crop back to the stored side
  double hflip_prob = 0.5;
};

struct AugmentPolicy {
  StandardPolicy standard;
  Extra extra = Extra::kNone;
  std::size_t cutout_size = 16;
  double mix_alpha = 1.0;

  void validate() const {
    if (!(standard.hflip_prob >= 0.0 && standard.hflip_prob <= 1.0))
      throw std::invalid_argument("hflip_prob must lie in [0, 1]");
    if (extra == Extra::kCutout && cutout_size == 0) throw std::invalid_argument("cutout_size must be positive");
    if (!(mix_alpha > 0.0)) throw std::invalid_argument("mix_alpha must be positive");
  }
};

struct MixedBatch {
  Tensor images;
  std::vector<int> labels_a;
  std::vector<int> labels_b;
  double lam = 1.0;
};

namespace detail {
inline void require_square(const Tensor& x, const char* who) {
  if (x.rank() != 4 || x.dim(2) != x.dim(3))
    throw std::invalid_argument(std::string(who) + ": expected square (N, C, S, S) images, got " + x.shape_string());
}
}  // namespace detail

/// Crop `out_side` pixels at (oy, ox) from image b zero-padded by `pad`, optionally mirrored.
inline void crop_flip_into(const Tensor& x, std::size_t b, std::size_t pad, std::size_t out_side, std::size_t oy,
                           std::size_t ox, bool flip, Tensor& out) {
  const std::size_t c = x.dim(1), s = x.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out_side; ++y)
      for (std::size_t xo = 0; xo < out_side; ++xo) {
        const std::size_t src_x = flip ? out_side - 1 - xo : xo;
        const long py = static_cast<long>(oy + y) - static_cast<long>(pad);
        const long px = static_cast<long>(ox + src_x) - static_cast<long>(pad);
        double v = 0.0;
        if (py >= 0 && px >= 0 && py < static_cast<long>(s) && px < static_cast<long>(s))
          v = x[((b * c + ch) * s + static_cast<std::size_t>(py)) * s + static_cast<std::size_t>(px)];
        out[((b * c + ch) * out_side + y) * out_side + xo] = v;
      }
}

/// Pad + random crop back to the input side + random horizontal flip. When
/// policy.crop is smaller than the side, takes a random crop of that size instead.
inline Tensor standard_augment(const Tensor& images, const StandardPolicy& policy, std::mt19937_64& rng) {
  detail::require_square(images, "standard_augment");
  const std::size_t n = images.dim(0), c = images.dim(1), s = images.dim(2);
  const std::size_t crop = policy.crop == 0 ? s : policy.crop;
  if (crop > s) throw std::invalid_argument("standard_augment: crop larger than image");
  const std::size_t pad = crop == s ? policy.pad : 0;
  const std::size_t range = s + 2 * pad - crop + 1;
  Tensor out({n, c, crop, crop});
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t oy = uniform_index(rng, range), ox = uniform_index(rng, range);
    const bool flip = uniform01(rng) < policy.hflip_prob;
    crop_flip_into(images, b, pad, crop, oy, ox, flip, out);
  }
  return out;
}

/// Zeroes a size x size square centred at (cy, cx) in image b, clipped at the borders.
/// Returns the number of pixel positions zeroed.
inline std::size_t cutout_at(Tensor& images, std::size_t b, std::size_t size, std::size_t cy, std::size_t cx) {
  const std::size_t c = images.dim(1), s = images.dim(2);
  const long half = static_cast<long>(size / 2);
  const long y0 = std::max(0L, static_cast<long>(cy) - half), x0 = std::max(0L, static_cast<long>(cx) - half);
  const long y1 = std::min(static_cast<long>(s), static_cast<long>(cy) - half + static_cast<long>(size));
  const long x1 = std::min(static_cast<long>(s), static_cast<long>(cx) - half + static_cast<long>(size));
  if (y1 <= y0 || x1 <= x0) return 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (long y = y0; y < y1; ++y)
      for (long x = x0; x < x1; ++x)
        images[((b * c + ch) * s + static_cast<std::size_t>(y)) * s + static_cast<std::size_t>(x)] = 0.0;
  return static_cast<std::size_t>((y1 - y0) * (x1 - x0));
}

inline Tensor cutout(const Tensor& images, std::size_t size, std::mt19937_64& rng) {
  detail::require_square(images, "cutout");
  if (size == 0) throw std::invalid_argument("cutout size must be positive");
  if (size > images.dim(2)) throw std::invalid_argument("cutout size exceeds the image side");
  Tensor out = images;
  const std::size_t s = images.dim(2);
  if (size == s) {
    // A full-side mask blanks the image regardless of where it is centred.
    out.zero();
    return out;
  }
  for (std::size_t b = 0; b < images.dim(0); ++b) {
    const std::size_t cy = uniform_index(rng, s), cx = uniform_index(rng, s);
    cutout_at(out, b, size, cy, cx);
  }
  return out;
}

inline MixedBatch pass_through(const Tensor& images, const std::vector<int>& labels) {
  return {images, labels, labels, 1.0};
}

/// images := lam * x + (1 - lam) * x[perm]; labels_b := labels[perm].
inline MixedBatch mixup_with(const Tensor& images, const std::vector<int>& labels, double lam,
                             const std::vector<std::size_t>& perm) {
  const std::size_t n = images.dim(0), sz = images.numel() / n;
  MixedBatch out{Tensor(images.shape), labels, std::vector<int>(n), lam};
  for (std::size_t b = 0; b < n; ++b) {
    out.labels_b[b] = labels[perm[b]];
    for (std::size_t k = 0; k < sz; ++k)
      out.images[b * sz + k] = lam * images[b * sz + k] + (1.0 - lam) * images[perm[b] * sz + k];
  }
  return out;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

inline MixedBatch mixup(const Tensor& images, const std::vector<int>& labels, double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("mixup alpha must be positive");
  if (images.dim(0) != labels.size()) throw std::invalid_argument("mixup: label count differs from batch size");
  if (images.dim(0) < 2) return pass_through(images, labels);
  const double lam = sample_beta(rng, alpha, alpha);
  return mixup_with(images, labels, lam, random_permutation(images.dim(0), rng));
}

struct Box {
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;  // half-open
  std::size_t area() const { return (y1 - y0) * (x1 - x0); }
};

/// Pastes `box` from x[perm] into every image; lam = 1 - area / S^2.
inline MixedBatch cutmix_with(const Tensor& images, const std::vector<int>& labels, const Box& box,
                              const std::vector<std::size_t>& perm) {
  detail::require_square(images, "cutmix");
  const std::size_t n = images.dim(0), c = images.dim(1), s = images.dim(2);
  MixedBatch out{images, labels, std::vector<int>(n), 1.0};
  for (std::size_t b = 0; b < n; ++b) {
    out.labels_b[b] = labels[perm[b]];
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = box.y0; y < box.y1; ++y)
        for (std::size_t x = box.x0; x < box.x1; ++x)
          out.images[((b * c + ch) * s + y) * s + x] = images[((perm[b] * c + ch) * s + y) * s + x];
  }
  out.lam = 1.0 - static_cast<double>(box.area()) / static_cast<double>(s * s);
  return out;
}

inline MixedBatch cutmix(const Tensor& images, const std::vector<int>& labels, double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("cutmix alpha must be positive");
  detail::require_square(images, "cutmix");
  if (images.dim(0) != labels.size()) throw std::invalid_argument("cutmix: label count differs from batch size");
  if (images.dim(0) < 2) return pass_through(images, labels);
  const std::size_t s = images.dim(2);
  const double lam = sample_beta(rng, alpha, alpha);
  const auto cut = static_cast<long>(static_cast<double>(s) * std::sqrt(1.0 - lam));
  const auto cy = static_cast<long>(uniform_index(rng, s)), cx = static_cast<long>(uniform_index(rng, s));
  const long side = static_cast<long>(s);
  Box box;
  box.y0 = static_cast<std::size_t>(std::clamp(cy - cut / 2, 0L, side));
  box.y1 = static_cast<std::size_t>(std::clamp(cy + cut / 2, 0L, side));
  box.x0 = static_cast<std::size_t>(std::clamp(cx - cut / 2, 0L, side));
  box.x1 = static_cast<std::size_t>(std::clamp(cx + cut / 2, 0L, side));
  return cutmix_with(images, labels, box, random_permutation(images.dim(0), rng));
}

/// lam * CE(labels_a) + (1 - lam) * CE(labels_b) on probabilities at temperature 1.
inline double mixed_ce(const losses::SoftDistribution& probs, const MixedBatch& mixed) {
  const auto classes = static_cast<std::size_t>(probs.probs.cols());
  const double a = losses::cross_entropy(losses::HardLabels(mixed.labels_a, classes), probs);
  if (mixed.lam == 1.0) return a;
  const double b = losses::cross_entropy(losses::HardLabels(mixed.labels_b, classes), probs);
  return mixed.lam * a + (1.0 - mixed.lam) * b;
}

/// mixed_ce from logits with its gradient.
inline losses::LossGrad mixed_ce_loss(const losses::LogitsBatch& logits, const MixedBatch& mixed) {
  const auto p = losses::soften(logits, 1.0);
  losses::LossGrad out{mixed_ce(p, mixed), p.probs};
  const double inv_b = 1.0 / static_cast<double>(logits.batch());
  for (std::size_t b = 0; b < logits.batch(); ++b) {
    const auto r = static_cast<Eigen::Index>(b);
    out.grad(r, mixed.labels_a[b]) -= mixed.lam;
    out.grad(r, mixed.labels_b[b]) -= 1.0 - mixed.lam;
  }
  out.grad *= inv_b;
  return out;
}

/// Full training-time pipeline for one batch. A pure function of
/// (pixels, labels, policy, manifest, seed, epoch, batch_index).
inline MixedBatch augment_batch(const Tensor& pixels, const std::vector<int>& labels, const AugmentPolicy& policy,
                                const data::DatasetManifest& manifest, std::uint64_t seed, std::uint64_t epoch,
                                std::uint64_t batch_index) {
  auto rng = make_rng(seed, Stream::kAugment, {epoch, batch_index});
  Tensor x = pixels;
  if (policy.standard.enabled) {
    StandardPolicy sp = policy.standard;
    if (sp.crop == 0 && manifest.resolution < x.dim(2)) sp.crop = manifest.resolution;
    x = standard_augment(x, sp, rng);
  }
  if (x.dim(2) != manifest.resolution) x = data::center_crop(x, manifest.resolution);
  MixedBatch out;
  switch (policy.extra) {
    case Extra::kNone: out = pass_through(x, labels); break;
    case Extra::kCutout: out = pass_through(cutout(x, std::min(policy.cutout_size, x.dim(2)), rng), labels); break;
    case Extra::kMixup: out = mixup(x, labels, policy.mix_alpha, rng); break;
    case Extra::kCutmix: out = cutmix(x, labels, policy.mix_alpha, rng); break;
  }
  data::normalize(out.images, manifest);
  return out;
}

}  // namespace aikd::augment
