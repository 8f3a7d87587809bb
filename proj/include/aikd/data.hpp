#pragma once

// Dataset ingestion: CIFAR binary archives, netpbm image folders and a seeded
// synthetic generator. Samples are held in memory as 8-bit planar CHW images.

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aikd/rng.hpp"
#include "aikd/tensor.hpp"

namespace aikd::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SourceKind { kCifarBinary, kImageFolder, kSynthetic };

inline std::string to_string(SourceKind k) {
  switch (k) {
    case SourceKind::kCifarBinary: return "cifar_binary";
    case SourceKind::kImageFolder: return "image_folder";
    case SourceKind::kSynthetic: return "synthetic";
  }
  return "unknown";
}

inline SourceKind source_from_string(const std::string& s) {
  for (auto k : {SourceKind::kCifarBinary, SourceKind::kImageFolder, SourceKind::kSynthetic})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown dataset source '" + s + "'");
}

struct DatasetManifest {
  std::string name = "synthetic";
  std::size_t num_classes = 10;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  std::size_t resolution = 32;          // model input side
  std::size_t storage_resolution = 0;   // stored side; 0 means equal to resolution
  std::size_t channels = 3;
  std::vector<double> mean = {0.5, 0.5, 0.5};  // per channel, in [0, 1] pixel units
  std::vector<double> std = {0.25, 0.25, 0.25};
  SourceKind source = SourceKind::kSynthetic;

  std::size_t stored_side() const { return storage_resolution == 0 ? resolution : storage_resolution; }

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("num_classes must be at least 2");
    if (train_count == 0 || val_count == 0) throw std::invalid_argument("train_count and val_count must be positive");
    if (resolution == 0) throw std::invalid_argument("resolution must be positive");
    if (stored_side() < resolution) throw std::invalid_argument("storage_resolution must be at least resolution");
    if (mean.size() != channels || std.size() != channels)
      throw std::invalid_argument("mean and std need one entry per channel");
    for (double s : std)
      if (!(s > 0.0)) throw std::invalid_argument("std entries must be positive");
  }

  nlohmann::json to_json() const {
    return {{"name", name},
            {"num_classes", num_classes},
            {"train_count", train_count},
            {"val_count", val_count},
            {"resolution", resolution},
            {"storage_resolution", stored_side()},
            {"channels", channels},
            {"mean", mean},
            {"std", std},
            {"source", to_string(source)}};
  }
};

/// Random-access in-memory samples.
struct SampleSource {
  std::size_t channels = 3;
  std::size_t side = 32;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * side * side; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_size(), image_size()};
  }
  void push(std::span<const std::uint8_t> img, int label) {
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels.push_back(label);
  }
};

struct Dataset {
  DatasetManifest manifest;
  SampleSource train;
  SampleSource val;
};

namespace detail {

inline void check_labels(const SampleSource& s, std::size_t num_classes, const std::string& where) {
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.labels[i] < 0 || static_cast<std::size_t>(s.labels[i]) >= num_classes)
      throw DataError(where + ": sample " + std::to_string(i) + " has label " + std::to_string(s.labels[i]) +
                      " outside [0, " + std::to_string(num_classes) + ")");
}

inline void check_count(const SampleSource& s, std::size_t expected, const std::string& where) {
  if (s.size() != expected)
    throw DataError(where + ": manifest says " + std::to_string(expected) + " samples, found " +
                    std::to_string(s.size()));
}

inline std::vector<char> read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// CIFAR-10 records carry one label byte; CIFAR-100 records carry coarse then fine.
inline void read_cifar(const std::filesystem::path& file, std::size_t label_bytes, std::size_t label_pick,
                       SampleSource& out) {
  const auto bytes = read_file(file);
  const std::size_t record = label_bytes + 3072;
  if (bytes.size() % record != 0)
    throw DataError(file.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                    std::to_string(record));
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data() + off);
    out.push({p + label_bytes, 3072}, p[label_pick]);
  }
}

inline std::size_t skip_ws_and_comments(const std::vector<char>& b, std::size_t i) {
  while (i < b.size()) {
    if (b[i] == '#') {
      while (i < b.size() && b[i] != '\n') ++i;
    } else if (std::isspace(static_cast<unsigned char>(b[i]))) {
      ++i;
    } else {
      break;
    }
  }
  return i;
}

inline std::size_t read_header_int(const std::vector<char>& b, std::size_t& i, const std::string& file) {
  i = skip_ws_and_comments(b, i);
  std::size_t v = 0, digits = 0;
  while (i < b.size() && std::isdigit(static_cast<unsigned char>(b[i]))) {
    v = v * 10 + static_cast<std::size_t>(b[i] - '0');
    ++i;
    ++digits;
  }
  if (digits == 0) throw DataError(file + ": corrupt netpbm header");
  return v;
}

struct RawImage {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> hwc;
};

/// Binary PGM (P5) or PPM (P6), maxval <= 255.
inline RawImage read_netpbm(const std::filesystem::path& path) {
  const auto b = read_file(path);
  const std::string file = path.string();
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '5' && b[1] != '6'))
    throw DataError(file + ": not a binary PGM/PPM image");
  RawImage img;
  img.channels = b[1] == '6' ? 3 : 1;
  std::size_t i = 2;
  img.width = read_header_int(b, i, file);
  img.height = read_header_int(b, i, file);
  const std::size_t maxval = read_header_int(b, i, file);
  if (maxval == 0 || maxval > 255) throw DataError(file + ": only 8-bit netpbm images are supported");
  ++i;  // single whitespace byte before the raster
  const std::size_t n = img.width * img.height * img.channels;
  if (img.width == 0 || img.height == 0 || b.size() < i + n) throw DataError(file + ": truncated image data");
  img.hwc.assign(b.begin() + static_cast<std::ptrdiff_t>(i), b.begin() + static_cast<std::ptrdiff_t>(i + n));
  if (maxval != 255)
    for (auto& v : img.hwc) v = static_cast<std::uint8_t>(std::lround(v * 255.0 / static_cast<double>(maxval)));
  return img;
}

/// Resize the short side to `side` (bilinear), center-crop to side x side, return planar CHW.
inline std::vector<std::uint8_t> to_square_chw(const RawImage& img, std::size_t side, std::size_t channels) {
  const double scale = static_cast<double>(side) / static_cast<double>(std::min(img.width, img.height));
  const double new_w = static_cast<double>(img.width) * scale, new_h = static_cast<double>(img.height) * scale;
  const double off_x = (new_w - static_cast<double>(side)) / 2.0, off_y = (new_h - static_cast<double>(side)) / 2.0;
  std::vector<std::uint8_t> out(channels * side * side);
  auto at = [&](std::size_t y, std::size_t x, std::size_t c) {
    return static_cast<double>(img.hwc[(y * img.width + x) * img.channels + (img.channels == 1 ? 0 : c)]);
  };
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double sy = std::clamp((static_cast<double>(y) + off_y + 0.5) / scale - 0.5, 0.0,
                                   static_cast<double>(img.height - 1));
      const double sx = std::clamp((static_cast<double>(x) + off_x + 0.5) / scale - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < channels; ++c) {
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0, c) + fx * at(y0, x1, c)) +
                         fy * ((1 - fx) * at(y1, x0, c) + fx * at(y1, x1, c));
        out[(c * side + y) * side + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  return out;
}

inline SampleSource read_image_folder_split(const std::filesystem::path& dir, const DatasetManifest& m) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("missing split directory " + dir.string());
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.size() > m.num_classes)
    throw DataError(dir.string() + ": " + std::to_string(classes.size()) + " class directories but num_classes is " +
                    std::to_string(m.num_classes));
  SampleSource out{m.channels, m.stored_side(), {}, {}};
  for (std::size_t label = 0; label < classes.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[label]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push(to_square_chw(read_netpbm(f), out.side, out.channels), static_cast<int>(label));
  }
  return out;
}

}  // namespace detail

/// Class names of an image-folder split, in label order.
inline std::vector<std::string> image_folder_classes(const std::filesystem::path& root, const std::string& split) {
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(root / split))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

/// Loads the train and val splits named by the manifest from `root`.
///
/// cifar_binary: data_batch_{1..5}.bin / test_batch.bin for 10 classes, train.bin / test.bin
/// with coarse+fine label bytes for 100 (fine) or 20 (coarse) classes.
/// image_folder: root/train/<class>/<file> and root/val/<class>/<file>, netpbm images.
inline Dataset load_dataset(const DatasetManifest& manifest, const std::filesystem::path& root) {
  manifest.validate();
  Dataset ds{manifest, {}, {}};
  switch (manifest.source) {
    case SourceKind::kCifarBinary: {
      if (manifest.channels != 3 || manifest.stored_side() != 32)
        throw std::invalid_argument("cifar_binary datasets are 3x32x32");
      ds.train = ds.val = SampleSource{3, 32, {}, {}};
      if (manifest.num_classes == 10) {
        for (int k = 1; k <= 5; ++k)
          detail::read_cifar(root / ("data_batch_" + std::to_string(k) + ".bin"), 1, 0, ds.train);
        detail::read_cifar(root / "test_batch.bin", 1, 0, ds.val);
      } else if (manifest.num_classes == 100 || manifest.num_classes == 20) {
        const std::size_t pick = manifest.num_classes == 100 ? 1 : 0;
        detail::read_cifar(root / "train.bin", 2, pick, ds.train);
        detail::read_cifar(root / "test.bin", 2, pick, ds.val);
      } else {
        throw std::invalid_argument("cifar_binary supports 10, 20 (coarse) or 100 classes");
      }
      break;
    }
    case SourceKind::kImageFolder:
      ds.train = detail::read_image_folder_split(root / "train", manifest);
      ds.val = detail::read_image_folder_split(root / "val", manifest);
      break;
    case SourceKind::kSynthetic:
      throw std::invalid_argument("synthetic datasets are generated, not loaded");
  }
  detail::check_count(ds.train, manifest.train_count, "train split");
  detail::check_count(ds.val, manifest.val_count, "val split");
  detail::check_labels(ds.train, manifest.num_classes, "train split");
  detail::check_labels(ds.val, manifest.num_classes, "val split");
  return ds;
}

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 200;
  std::size_t resolution = 32;
  std::uint64_t seed = 0;
  double class_separation = 3.0;
  double noise = 1.0;

  nlohmann::json to_json() const {
    return {{"num_classes", num_classes}, {"samples_per_class", samples_per_class},
            {"resolution", resolution},   {"seed", seed},
            {"class_separation", class_separation}, {"noise", noise}};
  }
};

/// Per-class blocky templates plus Gaussian pixel noise. The validation split
/// holds samples_per_class / 4 images per class.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("synthetic num_classes must be at least 2");
  if (spec.samples_per_class < 4) throw std::invalid_argument("synthetic samples_per_class must be at least 4");
  if (spec.resolution < 4 || spec.resolution % 4 != 0)
    throw std::invalid_argument("synthetic resolution must be a positive multiple of 4");
  if (!(spec.class_separation >= 0.0)) throw std::invalid_argument("class_separation must be non-negative");
  constexpr std::size_t kChannels = 3, kCells = 4;
  const std::size_t side = spec.resolution, block = side / kCells;

  std::vector<std::vector<double>> templates(spec.num_classes);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    auto rng = make_rng(spec.seed, Stream::kSynthetic, {0, c});
    templates[c].resize(kChannels * kCells * kCells);
    for (auto& v : templates[c]) v = standard_normal(rng);
  }

  auto make_split = [&](std::size_t per_class, std::uint64_t split) {
    SampleSource out{kChannels, side, {}, {}};
    out.pixels.reserve(per_class * spec.num_classes * kChannels * side * side);
    std::vector<std::uint8_t> img(kChannels * side * side);
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < spec.num_classes; ++c) {
        auto rng = make_rng(spec.seed, Stream::kSynthetic, {split, c, i});
        for (std::size_t ch = 0; ch < kChannels; ++ch)
          for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
              const double t = templates[c][(ch * kCells + y / block) * kCells + x / block];
              const double v = 128.0 + 32.0 * (spec.class_separation * t + spec.noise * standard_normal(rng));
              img[(ch * side + y) * side + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        out.push(img, static_cast<int>(c));
      }
    return out;
  };

  Dataset ds;
  ds.train = make_split(spec.samples_per_class, 1);
  ds.val = make_split(spec.samples_per_class / 4, 2);
  DatasetManifest& m = ds.manifest;
  m.name = "synthetic";
  m.num_classes = spec.num_classes;
  m.train_count = ds.train.size();
  m.val_count = ds.val.size();
  m.resolution = side;
  m.storage_resolution = side;
  m.channels = kChannels;
  m.source = SourceKind::kSynthetic;
  // Normalization constants from the training split.
  m.mean.assign(kChannels, 0.0);
  m.std.assign(kChannels, 0.0);
  const std::size_t plane = side * side;
  for (std::size_t ch = 0; ch < kChannels; ++ch) {
    double s = 0, sq = 0;
    for (std::size_t n = 0; n < ds.train.size(); ++n)
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = ds.train.pixels[(n * kChannels + ch) * plane + k] / 255.0;
        s += v;
        sq += v * v;
      }
    const double count = static_cast<double>(ds.train.size() * plane);
    m.mean[ch] = s / count;
    m.std[ch] = std::max(std::sqrt(std::max(sq / count - m.mean[ch] * m.mean[ch], 0.0)), 1e-3);
  }
  return ds;
}

/// Replaces the label of round(fraction * n) randomly chosen samples with a different class.
inline std::size_t inject_label_noise(SampleSource& source, std::size_t num_classes, double fraction,
                                      std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("label noise fraction must lie in [0, 1]");
  std::vector<std::size_t> order(source.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, Stream::kLabelNoise);
  shuffle(order.begin(), order.end(), rng);
  const auto flips = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(source.size())));
  for (std::size_t k = 0; k < flips; ++k) {
    int& y = source.labels[order[k]];
    const auto shift = 1 + uniform_index(rng, num_classes - 1);
    y = static_cast<int>((static_cast<std::size_t>(y) + shift) % num_classes);
  }
  return flips;
}

/// Shuffled index batches for one epoch; the final partial batch is kept.
inline std::vector<std::vector<std::size_t>> epoch_iterator(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                            std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, Stream::kDataOrder, {epoch});
  shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return batches;
}

/// Gathers samples as (N, C, S, S) pixel values scaled to [0, 1].
inline Tensor gather(const SampleSource& source, std::span<const std::size_t> indices) {
  Tensor out({indices.size(), source.channels, source.side, source.side});
  const std::size_t sz = source.image_size();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto img = source.image(indices[b]);
    for (std::size_t k = 0; k < sz; ++k) out[b * sz + k] = img[k] / 255.0;
  }
  return out;
}

inline std::vector<int> gather_labels(const SampleSource& source, std::span<const std::size_t> indices) {
  std::vector<int> out(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) out[b] = source.labels[indices[b]];
  return out;
}

/// (x - mean_c) / std_c per channel, in place.
inline void normalize(Tensor& images, const DatasetManifest& m) {
  const std::size_t n = images.dim(0), c = images.dim(1), plane = images.dim(2) * images.dim(3);
  if (c != m.mean.size()) throw std::invalid_argument("normalize: channel count differs from manifest");
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = images.ptr() + (s * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - m.mean[ch]) / m.std[ch];
    }
}

/// Square center crop to `side`.
inline Tensor center_crop(const Tensor& images, std::size_t side) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (side > h || side > w) throw std::invalid_argument("center_crop: crop larger than image");
  if (side == h && side == w) return images;
  const std::size_t oy = (h - side) / 2, ox = (w - side) / 2;
  Tensor out({n, c, side, side});
  for (std::size_t s = 0; s < n * c; ++s)
    for (std::size_t y = 0; y < side; ++y)
      std::copy_n(images.ptr() + (s * h + oy + y) * w + ox, side, out.ptr() + (s * side + y) * side);
  return out;
}

/// Evaluation-time batch: center crop to the model resolution, then normalize.
inline Tensor eval_batch(const SampleSource& source, std::span<const std::size_t> indices, const DatasetManifest& m) {
  Tensor x = center_crop(gather(source, indices), m.resolution);
  normalize(x, m);
  return x;
}

}  // namespace aikd::data
