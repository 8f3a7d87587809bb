#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "aikd/losses.hpp"
#include "aikd/models.hpp"
#include "gradcheck.hpp"

using namespace aikd;
using namespace aikd::models;
using aikd::testing::random_matrix;

namespace {

Tensor random_images(std::size_t n, std::size_t res, std::uint64_t seed) {
  auto rng = make_rng(seed, Stream::kSynthetic);
  Tensor t({n, 3, res, res});
  for (auto& v : t.data) v = standard_normal(rng);
  return t;
}

ClassifierSpec tiny(std::size_t classes = 10, std::size_t res = 16) {
  return {Architecture::kTinyCnn, classes, res, 3};
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "aikd_test_models";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Expected critic size for input dimension C with the default hidden sizes.
std::size_t critic_params(std::size_t c) { return c * 64 + 64 + 2 * 64 + 64 * 32 + 32 + 32 + 1; }

}  // namespace

TEST(Classifier, OutputShapeAndDeterminism) {
  Classifier a(tiny(), 7), b(tiny(), 7), c(tiny(), 8);
  const Tensor x = random_images(3, 16, 1);
  const Tensor ya = a.forward(x, nn::Mode::kEval);
  EXPECT_EQ(ya.shape, (std::vector<std::size_t>{3, 10}));
  EXPECT_EQ(ya.data, b.forward(x, nn::Mode::kEval).data);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
}

TEST(Classifier, RejectsWrongInput) {
  Classifier m(tiny(), 1);
  EXPECT_THROW(m.forward(random_images(2, 32, 1), nn::Mode::kEval), std::invalid_argument);
  EXPECT_THROW(m.forward(Tensor({2, 3, 16}), nn::Mode::kEval), std::invalid_argument);
}

TEST(Classifier, SpecValidation) {
  EXPECT_THROW(Classifier(tiny(1), 0), std::invalid_argument);
  EXPECT_THROW(Classifier(ClassifierSpec{Architecture::kResNet18, 10, 48, 3}, 0), std::invalid_argument);
  EXPECT_THROW(architecture_from_string("vgg16"), std::invalid_argument);
  for (auto a : {Architecture::kResNet18, Architecture::kResNet50, Architecture::kPreActResNet18,
                 Architecture::kPreActResNet50, Architecture::kDenseNet121, Architecture::kTinyCnn})
    EXPECT_EQ(architecture_from_string(to_string(a)), a);
  const ClassifierSpec s{Architecture::kPreActResNet50, 200, 64, 3};
  EXPECT_EQ(ClassifierSpec::from_json(s.to_json()), s);
}

TEST(Classifier, HeadWidthFollowsClassCount) {
  Classifier m(ClassifierSpec{Architecture::kResNet18, 200, 32, 3}, 0);
  EXPECT_EQ(m.head_width(), 200u);
  const Tensor y = m.forward(random_images(1, 32, 2), nn::Mode::kEval);
  EXPECT_EQ(y.shape, (std::vector<std::size_t>{1, 200}));
}

// Reference counts of the torchvision implementations (ImageNet stem, 1000 classes).
TEST(Classifier, ReferenceParameterCounts) {
  EXPECT_EQ(Classifier(ClassifierSpec{Architecture::kResNet18, 1000, 224, 3}, 0).parameter_count(), 11689512u);
  EXPECT_EQ(Classifier(ClassifierSpec{Architecture::kResNet50, 1000, 224, 3}, 0).parameter_count(), 25557032u);
  EXPECT_EQ(Classifier(ClassifierSpec{Architecture::kDenseNet121, 1000, 224, 3}, 0).parameter_count(), 7978856u);
}

TEST(Classifier, CifarVariantsRun) {
  const Tensor x = random_images(2, 32, 3);
  for (auto a : {Architecture::kResNet18, Architecture::kPreActResNet18, Architecture::kPreActResNet50,
                 Architecture::kDenseNet121}) {
    Classifier m(ClassifierSpec{a, 10, 32, 3}, 0);
    const Tensor y = m.forward(x, nn::Mode::kEval);
    EXPECT_EQ(y.shape, (std::vector<std::size_t>{2, 10})) << to_string(a);
    for (double v : y.data) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Classifier, FrozenRefusesBackward) {
  Classifier m(tiny(), 0);
  m.freeze();
  const Tensor y = m.forward(random_images(2, 16, 4), nn::Mode::kTrain);
  EXPECT_THROW(m.backward(y), std::logic_error);
}

TEST(Classifier, BackwardMatchesFiniteDifference) {
  Classifier m(tiny(3, 8), 5);
  const Tensor x = random_images(4, 8, 5);
  const std::vector<int> labels = {0, 1, 2, 1};
  auto loss = [&]() {
    const Tensor z = m.forward(x, nn::Mode::kTrain);
    return losses::cross_entropy_loss(losses::HardLabels(labels, 3), losses::LogitsBatch(to_matrix(z)));
  };
  m.zero_grad();
  const auto lg = loss();
  m.backward(to_tensor(lg.grad));
  auto st = m.state();
  std::mt19937_64 rng(9);
  for (auto& [name, p] : st.params) {
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = rng() % p->value.numel();
      const double orig = p->value[i];
      p->value[i] = orig + 1e-5;
      const double up = loss().value;
      p->value[i] = orig - 1e-5;
      const double down = loss().value;
      p->value[i] = orig;
      const double numeric = (up - down) / 2e-5;
      EXPECT_NEAR(p->grad[i], numeric, 1e-6 + 1e-4 * std::abs(numeric)) << name << "[" << i << "]";
    }
  }
}

TEST(ModelTriple, SnapshotGivesZeroProgressiveLoss) {
  ModelTriple triple(Classifier(tiny(), 1), std::nullopt, Classifier(tiny(), 2));
  EXPECT_TRUE(triple.previous.frozen());
  snapshot_previous(triple);
  const Tensor x = random_images(4, 16, 6);
  const Tensor s = triple.student.forward(x, nn::Mode::kEval);
  const Tensor p = triple.previous.forward(x, nn::Mode::kEval);
  const auto lp = losses::progressive_loss(losses::LogitsBatch(to_matrix(p)), losses::LogitsBatch(to_matrix(s)), 1.0);
  EXPECT_EQ(lp.value, 0.0);
  EXPECT_EQ(triple.student.checksum(), triple.previous.checksum());
}

TEST(ModelTriple, RejectsMismatchedSpecs) {
  EXPECT_THROW(ModelTriple(Classifier(tiny(10), 1), Classifier(tiny(100), 1), Classifier(tiny(10), 1)),
               SpecMismatchError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Classifier m(tiny(), 11);
  m.forward(random_images(4, 16, 7), nn::Mode::kTrain);  // moves BN running stats off their defaults
  Checkpoint ckpt;
  ckpt.meta["spec"] = m.spec().to_json();
  ckpt.meta["manifest"] = {{"val_accuracy", 0.875}};
  m.save_to(ckpt, "student.");
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(ckpt, path);

  auto loaded = load_superior(path, m.spec());
  EXPECT_EQ(loaded.model.checksum(), m.checksum());
  EXPECT_TRUE(loaded.model.frozen());
  EXPECT_DOUBLE_EQ(loaded.manifest_accuracy, 0.875);
  const Tensor x = random_images(2, 16, 8);
  EXPECT_EQ(loaded.model.forward(x, nn::Mode::kEval).data, m.forward(x, nn::Mode::kEval).data);

  EXPECT_THROW(load_superior(path, tiny(100)), SpecMismatchError);
}

TEST(Checkpoint, DetectsCorruption) {
  Checkpoint ckpt;
  ckpt.put("w", Tensor({4}, 1.5));
  const auto path = temp_file("corrupt.ckpt");
  save_checkpoint(ckpt, path);
  EXPECT_EQ(load_checkpoint(path).get("w").data, std::vector<double>(4, 1.5));
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-12, std::ios::end);
    const char junk = 0x7f;
    f.write(&junk, 1);
  }
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  std::filesystem::resize_file(path, 20);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  EXPECT_THROW(load_checkpoint(temp_file("missing.ckpt")), CheckpointError);
}

TEST(Critic, ParameterCount) {
  for (std::size_t c : {10u, 100u}) {
    MlpCritic critic(CriticSpec{c}, 0);
    EXPECT_EQ(critic.parameter_count(), critic_params(c));
  }
}

TEST(Critic, InputGradientMatchesFiniteDifference) {
  MlpCritic critic(CriticSpec{6}, 3);
  std::mt19937_64 rng(4);
  // Give the running statistics non-trivial values.
  MlpCritic::Tape tape;
  critic.forward_train(random_matrix(rng, 8, 6), tape);
  for (int t = 0; t < 20; ++t) {
    const Matrix x = random_matrix(rng, 1, 6);
    auto f = [&](const Matrix& m) { return critic.score(std::span<const double>(m.data(), 6)); };
    const auto g = critic.input_gradient(std::span<const double>(x.data(), 6));
    const Matrix analytic = Eigen::Map<const Matrix>(g.data(), 1, 6);
    EXPECT_LT(aikd::testing::relative_error(analytic, aikd::testing::central_difference(f, x, 1e-6)), 1e-6);
  }
}

TEST(Critic, TrainBackwardMatchesFiniteDifference) {
  MlpCritic critic(CriticSpec{5}, 6);
  std::mt19937_64 rng(7);
  const Matrix x = random_matrix(rng, 6, 5);
  const Matrix w = random_matrix(rng, 6, 1);
  auto f = [&]() {
    MlpCritic::Tape tape;
    const auto s = critic.forward_train(x, tape);
    double v = 0;
    for (std::size_t b = 0; b < s.size(); ++b) v += w(static_cast<Eigen::Index>(b), 0) * s[b];
    return v;
  };
  critic.zero_grad();
  MlpCritic::Tape tape;
  critic.forward_train(x, tape);
  critic.backward_train(tape, std::span<const double>(w.data(), 6));
  for (auto& [name, p] : critic.state().params) {
    for (std::size_t i = 0; i < p->value.numel(); i += 1 + p->value.numel() / 7) {
      const double orig = p->value[i];
      p->value[i] = orig + 1e-6;
      const double up = f();
      p->value[i] = orig - 1e-6;
      const double down = f();
      p->value[i] = orig;
      const double numeric = (up - down) / 2e-6;
      EXPECT_NEAR(p->grad[i], numeric, 1e-6 + 1e-4 * std::abs(numeric)) << name << "[" << i << "]";
    }
  }
}

TEST(Critic, PenaltyGradientMatchesFiniteDifference) {
  MlpCritic critic(CriticSpec{4}, 8);
  std::mt19937_64 rng(9);
  MlpCritic::Tape warm;
  critic.forward_train(random_matrix(rng, 8, 4), warm);
  const Matrix sup = random_matrix(rng, 5, 4), stu = random_matrix(rng, 5, 4);
  const std::vector<double> eps = {0.1, 0.3, 0.5, 0.7, 0.9};
  auto f = [&]() {
    return losses::gradient_penalty(critic, losses::LogitsBatch(sup), losses::LogitsBatch(stu), eps).value;
  };
  critic.zero_grad();
  critic.accumulate_penalty_gradient(
      losses::gradient_penalty(critic, losses::LogitsBatch(sup), losses::LogitsBatch(stu), eps), 1.0);
  for (auto& [name, p] : critic.state().params) {
    for (std::size_t i = 0; i < p->value.numel(); i += 1 + p->value.numel() / 7) {
      const double orig = p->value[i];
      p->value[i] = orig + 1e-6;
      const double up = f();
      p->value[i] = orig - 1e-6;
      const double down = f();
      p->value[i] = orig;
      const double numeric = (up - down) / 2e-6;
      EXPECT_NEAR(p->grad[i], numeric, 1e-6 + 1e-4 * std::abs(numeric)) << name << "[" << i << "]";
    }
  }
}

TEST(Critic, RejectsWrongWidth) {
  MlpCritic critic(CriticSpec{10}, 0);
  EXPECT_THROW(critic.scores(Matrix::Zero(2, 100)), std::invalid_argument);
  MlpCritic::Tape tape;
  EXPECT_THROW(critic.forward_train(Matrix::Zero(1, 10), tape), std::invalid_argument);
}

TEST(Critic, CheckpointRoundTrip) {
  MlpCritic a(CriticSpec{10}, 1), b(CriticSpec{10}, 2);
  Checkpoint ckpt;
  a.save_to(ckpt, "critic.");
  b.load_from(ckpt, "critic.");
  EXPECT_EQ(a.checksum(), b.checksum());
  MlpCritic wide(CriticSpec{100}, 0);
  EXPECT_THROW(wide.load_from(ckpt, "critic."), SpecMismatchError);
}
