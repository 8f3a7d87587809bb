#pragma once

// Run configuration document. Parsing starts from defaults, rejects unknown
// keys and reports failures with the offending key path.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "aikd/augment.hpp"
#include "aikd/data.hpp"
#include "aikd/losses.hpp"
#include "aikd/models.hpp"

namespace aikd::config {

using nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& path, const std::string& what) : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

enum class Ablation { kFull, kNoAdv, kOnlyProgressive, kOnlyGuide, kBaseline };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoAdv: return "no_adv";
    case Ablation::kOnlyProgressive: return "only_progressive";
    case Ablation::kOnlyGuide: return "only_guide";
    case Ablation::kBaseline: return "baseline";
  }
  return "unknown";
}

inline Ablation ablation_from_string(const std::string& s) {
  for (auto a : {Ablation::kFull, Ablation::kNoAdv, Ablation::kOnlyProgressive, Ablation::kOnlyGuide,
                 Ablation::kBaseline})
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown ablation preset '" + s + "'");
}

struct TrainConfig {
  int epochs = 300;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 5e-4;
  std::vector<int> lr_milestones = {150, 225};
  double lr_gamma = 0.1;
  double critic_lr = 1e-4;
  double critic_beta1 = 0.9;
  double critic_beta2 = 0.999;
  int critic_steps = 1;
  bool critic_superior_term = false;
  losses::LossWeights weights;
  Ablation ablation = Ablation::kFull;
  int checkpoint_every = 1;
};

struct DataConfig {
  data::DatasetManifest manifest;
  std::string root;  // empty: AIKD_DATA_ROOT
  data::SyntheticSpec synthetic;
  double label_noise = 0.0;
};

struct MetricsConfig {
  std::size_t n_bins = 15;
  bool calibrate = false;
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  models::Architecture architecture = models::Architecture::kTinyCnn;
  DataConfig data;
  TrainConfig train;
  models::CriticSpec critic;
  augment::AugmentPolicy augment;
  MetricsConfig metrics;

  std::size_t num_classes() const {
    return data.manifest.source == data::SourceKind::kSynthetic ? data.synthetic.num_classes
                                                                : data.manifest.num_classes;
  }
  std::size_t resolution() const {
    return data.manifest.source == data::SourceKind::kSynthetic ? data.synthetic.resolution
                                                                : data.manifest.resolution;
  }
  models::ClassifierSpec classifier_spec() const {
    return {architecture, num_classes(), resolution(), data.manifest.channels};
  }
  models::CriticSpec critic_spec() const {
    models::CriticSpec c = critic;
    c.input_dim = num_classes();
    return c;
  }
};

namespace detail {

/// One JSON object being read: remembers which keys were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  void get(const std::string& key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
      if (!j_.at(key).is_number_integer() || j_.at(key).get<long long>() < 0)
        throw ConfigError(key_path(key), "expected a non-negative integer");
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(key_path(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  template <class T, class Parse>
  void get_enum(const std::string& key, T& out, Parse parse) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(key_path(key), e.what());
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  Section sub(const std::string& key) {
    known_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, key_path(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!known_.count(k)) throw ConfigError(key_path(k), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

template <class T>
void check(bool ok, const std::string& path, const T& message) {
  if (!ok) throw ConfigError(path, message);
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  using detail::check;
  check(!c.name.empty() && c.name.find('/') == std::string::npos, "name", "must be a non-empty plain name");
  const auto& t = c.train;
  check(t.epochs >= 1, "train.epochs", "must be at least 1");
  check(t.batch_size >= 1, "train.batch_size", "must be at least 1");
  check(t.lr >= 0.0, "train.lr", "must be non-negative");
  check(t.momentum >= 0.0 && t.momentum < 1.0, "train.momentum", "must lie in [0, 1)");
  check(t.weight_decay >= 0.0, "train.weight_decay", "must be non-negative");
  for (std::size_t i = 0; i < t.lr_milestones.size(); ++i) {
    check(i == 0 || t.lr_milestones[i] > t.lr_milestones[i - 1], "train.lr_milestones", "must be strictly increasing");
    check(t.lr_milestones[i] >= 0 && t.lr_milestones[i] < t.epochs, "train.lr_milestones",
          "entries must lie in [0, epochs)");
  }
  check(t.lr_gamma > 0.0, "train.lr_gamma", "must be positive");
  check(t.critic_lr >= 0.0, "train.critic_lr", "must be non-negative");
  check(t.critic_beta1 >= 0.0 && t.critic_beta1 < 1.0, "train.critic_beta1", "must lie in [0, 1)");
  check(t.critic_beta2 >= 0.0 && t.critic_beta2 < 1.0, "train.critic_beta2", "must lie in [0, 1)");
  check(t.critic_steps >= 1, "train.critic_steps", "must be at least 1");
  check(t.checkpoint_every >= 1, "train.checkpoint_every", "must be at least 1");
  try {
    t.weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train.weights", e.what());
  }
  const auto& d = c.data;
  check(d.label_noise >= 0.0 && d.label_noise <= 1.0, "data.label_noise", "must lie in [0, 1]");
  if (d.manifest.source == data::SourceKind::kSynthetic) {
    check(d.synthetic.num_classes >= 2, "data.synthetic.num_classes", "must be at least 2");
    check(d.synthetic.samples_per_class >= 4, "data.synthetic.samples_per_class", "must be at least 4");
    check(d.synthetic.resolution >= 4 && d.synthetic.resolution % 4 == 0, "data.synthetic.resolution",
          "must be a positive multiple of 4");
    check(d.synthetic.class_separation >= 0.0, "data.synthetic.class_separation", "must be non-negative");
    check(d.manifest.channels == 3, "data.channels", "synthetic data has 3 channels");
  } else {
    try {
      d.manifest.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("data", e.what());
    }
  }
  try {
    c.classifier_spec().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model", e.what());
  }
  try {
    c.critic_spec().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("critic", e.what());
  }
  try {
    c.augment.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("augment", e.what());
  }
  check(c.metrics.n_bins >= 1, "metrics.n_bins", "must be at least 1");
}

/// Defaults overridden by the document's keys; unknown keys are rejected.
inline RunConfig from_json(const json& doc) {
  RunConfig c;
  detail::Section root(doc, "");
  root.get("name", c.name);
  root.get("seed", c.seed);
  {
    auto m = root.sub("model");
    m.get_enum("architecture", c.architecture, models::architecture_from_string);
    m.finish();
  }
  {
    auto d = root.sub("data");
    auto& man = c.data.manifest;
    d.get_enum("source", man.source, data::source_from_string);
    d.get("name", man.name);
    d.get("root", c.data.root);
    d.get("num_classes", man.num_classes);
    d.get("train_count", man.train_count);
    d.get("val_count", man.val_count);
    d.get("resolution", man.resolution);
    d.get("storage_resolution", man.storage_resolution);
    d.get("channels", man.channels);
    d.get("mean", man.mean);
    d.get("std", man.std);
    d.get("label_noise", c.data.label_noise);
    auto s = d.sub("synthetic");
    s.get("num_classes", c.data.synthetic.num_classes);
    s.get("samples_per_class", c.data.synthetic.samples_per_class);
    s.get("resolution", c.data.synthetic.resolution);
    s.get("seed", c.data.synthetic.seed);
    s.get("class_separation", c.data.synthetic.class_separation);
    s.get("noise", c.data.synthetic.noise);
    s.finish();
    d.finish();
  }
  {
    auto t = root.sub("train");
    auto& tc = c.train;
    t.get("epochs", tc.epochs);
    t.get("batch_size", tc.batch_size);
    t.get("lr", tc.lr);
    t.get("momentum", tc.momentum);
    t.get("nesterov", tc.nesterov);
    t.get("weight_decay", tc.weight_decay);
    t.get("lr_milestones", tc.lr_milestones);
    t.get("lr_gamma", tc.lr_gamma);
    t.get("critic_lr", tc.critic_lr);
    t.get("critic_beta1", tc.critic_beta1);
    t.get("critic_beta2", tc.critic_beta2);
    t.get("critic_steps", tc.critic_steps);
    t.get("critic_superior_term", tc.critic_superior_term);
    t.get("checkpoint_every", tc.checkpoint_every);
    t.get_enum("ablation", tc.ablation, ablation_from_string);
    auto w = t.sub("weights");
    w.get("alpha_g", tc.weights.alpha_g);
    w.get("alpha_p", tc.weights.alpha_p);
    w.get("omega", tc.weights.omega);
    w.get("tau_g", tc.weights.tau_g);
    w.get("tau_p", tc.weights.tau_p);
    w.get("gp_lambda", tc.weights.gp_lambda);
    w.finish();
    t.finish();
  }
  {
    auto k = root.sub("critic");
    k.get("hidden1", c.critic.hidden1);
    k.get("hidden2", c.critic.hidden2);
    k.get("leaky_slope", c.critic.leaky_slope);
    k.finish();
  }
  {
    auto a = root.sub("augment");
    auto st = a.sub("standard");
    st.get("enabled", c.augment.standard.enabled);
    st.get("pad", c.augment.standard.pad);
    st.get("crop", c.augment.standard.crop);
    st.get("hflip_prob", c.augment.standard.hflip_prob);
    st.finish();
    a.get_enum("extra", c.augment.extra, augment::extra_from_string);
    a.get("cutout_size", c.augment.cutout_size);
    a.get("mix_alpha", c.augment.mix_alpha);
    a.finish();
  }
  {
    auto m = root.sub("metrics");
    m.get("n_bins", c.metrics.n_bins);
    m.get("calibrate", c.metrics.calibrate);
    m.finish();
  }
  root.finish();
  validate(c);
  return c;
}

/// The fully resolved document, defaults expanded.
inline json to_json(const RunConfig& c) {
  const auto& man = c.data.manifest;
  const auto& t = c.train;
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"model", {{"architecture", models::to_string(c.architecture)}}},
      {"data",
       {{"source", data::to_string(man.source)},
        {"name", man.name},
        {"root", c.data.root},
        {"num_classes", man.num_classes},
        {"train_count", man.train_count},
        {"val_count", man.val_count},
        {"resolution", man.resolution},
        {"storage_resolution", man.storage_resolution},
        {"channels", man.channels},
        {"mean", man.mean},
        {"std", man.std},
        {"label_noise", c.data.label_noise},
        {"synthetic", c.data.synthetic.to_json()}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"lr", t.lr},
        {"momentum", t.momentum},
        {"nesterov", t.nesterov},
        {"weight_decay", t.weight_decay},
        {"lr_milestones", t.lr_milestones},
        {"lr_gamma", t.lr_gamma},
        {"critic_lr", t.critic_lr},
        {"critic_beta1", t.critic_beta1},
        {"critic_beta2", t.critic_beta2},
        {"critic_steps", t.critic_steps},
        {"critic_superior_term", t.critic_superior_term},
        {"checkpoint_every", t.checkpoint_every},
        {"ablation", to_string(t.ablation)},
        {"weights",
         {{"alpha_g", t.weights.alpha_g},
          {"alpha_p", t.weights.alpha_p},
          {"omega", t.weights.omega},
          {"tau_g", t.weights.tau_g},
          {"tau_p", t.weights.tau_p},
          {"gp_lambda", t.weights.gp_lambda}}}}},
      {"critic", {{"hidden1", c.critic.hidden1}, {"hidden2", c.critic.hidden2}, {"leaky_slope", c.critic.leaky_slope}}},
      {"augment",
       {{"standard",
         {{"enabled", c.augment.standard.enabled},
          {"pad", c.augment.standard.pad},
          {"crop", c.augment.standard.crop},
          {"hflip_prob", c.augment.standard.hflip_prob}}},
        {"extra", augment::to_string(c.augment.extra)},
        {"cutout_size", c.augment.cutout_size},
        {"mix_alpha", c.augment.mix_alpha}}},
      {"metrics", {{"n_bins", c.metrics.n_bins}, {"calibrate", c.metrics.calibrate}}},
  };
}

inline RunConfig load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
  return from_json(doc);
}

}  // namespace aikd::config
