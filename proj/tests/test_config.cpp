#include <gtest/gtest.h>

#include "aikd/config.hpp"

using namespace aikd;
using namespace aikd::config;
using nlohmann::json;

namespace {

std::string error_path(const json& doc) {
  try {
    from_json(doc);
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "<accepted>";
}

}  // namespace

TEST(Config, DefaultsFromEmptyDocument) {
  const auto c = from_json(json::object());
  EXPECT_EQ(c.train.epochs, 300);
  EXPECT_EQ(c.train.lr_milestones, (std::vector<int>{150, 225}));
  EXPECT_DOUBLE_EQ(c.train.weights.alpha_g, 0.1);
  EXPECT_DOUBLE_EQ(c.train.weights.alpha_p, 0.3);
  EXPECT_DOUBLE_EQ(c.train.weights.omega, 0.1);
  EXPECT_DOUBLE_EQ(c.train.critic_lr, 1e-4);
  EXPECT_EQ(c.metrics.n_bins, 15u);
}

TEST(Config, UnknownKeysRejectedWithPath) {
  EXPECT_EQ(error_path({{"bogus", 1}}), "bogus");
  EXPECT_EQ(error_path({{"train", {{"learning_rate", 0.1}}}}), "train.learning_rate");
  EXPECT_EQ(error_path({{"train", {{"weights", {{"alpha", 0.1}}}}}}), "train.weights.alpha");
}

TEST(Config, UnorderedMilestonesNameTheKey) {
  EXPECT_EQ(error_path({{"train", {{"lr_milestones", {225, 150}}}}}), "train.lr_milestones");
  EXPECT_EQ(error_path({{"train", {{"epochs", 10}, {"lr_milestones", {20}}}}}), "train.lr_milestones");
}

TEST(Config, TypeAndRangeErrors) {
  EXPECT_EQ(error_path({{"train", {{"lr", "fast"}}}}), "train.lr");
  EXPECT_EQ(error_path({{"train", {{"batch_size", -4}}}}), "train.batch_size");
  EXPECT_EQ(error_path({{"train", {{"ablation", "most"}}}}), "train.ablation");
  EXPECT_EQ(error_path({{"model", {{"architecture", "vgg"}}}}), "model.architecture");
  EXPECT_EQ(error_path({{"train", {{"weights", {{"alpha_g", 0.8}, {"alpha_p", 0.3}}}}}}), "train.weights");
  EXPECT_EQ(error_path({{"data", {{"label_noise", 1.5}}}}), "data.label_noise");
}

TEST(Config, ResolvedDocumentRoundTrips) {
  const json doc = {{"name", "r"},
                    {"seed", 7},
                    {"train", {{"epochs", 5}, {"lr_milestones", json::array()}, {"ablation", "only_guide"}}},
                    {"augment", {{"extra", "cutmix"}}}};
  const auto c = from_json(doc);
  const json resolved = to_json(c);
  EXPECT_EQ(to_json(from_json(resolved)), resolved);
  EXPECT_EQ(resolved["train"]["ablation"], "only_guide");
  EXPECT_EQ(resolved["augment"]["extra"], "cutmix");
  EXPECT_EQ(resolved["seed"], 7);
  EXPECT_TRUE(resolved["train"].contains("weight_decay"));
}

TEST(Config, ClassCountFollowsSource) {
  auto c = from_json({{"data", {{"synthetic", {{"num_classes", 4}}}}}});
  EXPECT_EQ(c.classifier_spec().num_classes, 4u);
  EXPECT_EQ(c.critic_spec().input_dim, 4u);
  c = from_json({{"data",
                  {{"source", "cifar_binary"}, {"num_classes", 100}, {"train_count", 50000}, {"val_count", 10000}}}});
  EXPECT_EQ(c.classifier_spec().num_classes, 100u);
}
