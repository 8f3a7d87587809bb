#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "aikd/metrics.hpp"

using namespace aikd;
using namespace aikd::metrics;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(v.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : v) {
    Eigen::Index c = 0;
    for (double x : row) m(r, c++) = x;
    ++r;
  }
  return m;
}

// Top-k by sorting class indices with (logit desc, index asc).
double sorted_topk_error(const Matrix& z, const std::vector<int>& y, std::size_t k) {
  std::size_t miss = 0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    std::vector<int> order(static_cast<std::size_t>(z.cols()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return z(r, a) > z(r, b); });
    miss += std::find(order.begin(), order.begin() + static_cast<long>(k), y[static_cast<std::size_t>(r)]) ==
            order.begin() + static_cast<long>(k);
  }
  return 100.0 * static_cast<double>(miss) / static_cast<double>(z.rows());
}

// Macro F1 from explicit TP/FP/FN counts.
double brute_f1(const std::vector<int>& pred, const std::vector<int>& y, int c) {
  double sum = 0;
  for (int k = 0; k < c; ++k) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      tp += pred[i] == k && y[i] == k;
      fp += pred[i] == k && y[i] != k;
      fn += pred[i] != k && y[i] == k;
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    sum += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  return sum / c;
}

// Labels drawn from softmax(z), so tau = 1 is the NLL optimum in expectation.
PredictionSet self_sampled(std::size_t n, std::size_t c, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 2.0);
  Matrix z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> w(c);
    for (std::size_t k = 0; k < c; ++k) {
      z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = nd(rng);
      w[k] = std::exp(z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
    }
    y[i] = std::discrete_distribution<int>(w.begin(), w.end())(rng);
  }
  return {z * scale, y};
}

}  // namespace

TEST(TopK, PerfectPredictions) {
  const PredictionSet p(rows({{3, 1, 0, 0, 0, 0, 0}, {0, 0, 5, 0, 0, 0, 0}}), {0, 2});
  EXPECT_EQ(topk_error(p, 1), 0.0);
  EXPECT_EQ(topk_error(p, 5), 0.0);
}

TEST(TopK, TiesRankLowerIndexFirst) {
  const PredictionSet p(rows({{1, 1, 1, 1, 1, 1, 1}}), {6});
  EXPECT_EQ(topk_error(p, 1), 100.0);
  EXPECT_EQ(topk_error(p, 5), 100.0);
  const PredictionSet q(rows({{1, 1, 1, 1, 1, 1, 1}}), {0});
  EXPECT_EQ(topk_error(q, 1), 0.0);
}

TEST(TopK, OneLabelAtRankTwo) {
  const PredictionSet p(rows({{5, 1, 0, 0, 0, 0}, {0, 4, 0, 0, 0, 0}, {3, 2, 0, 0, 0, 0}}), {0, 1, 1});
  EXPECT_NEAR(topk_error(p, 1), 100.0 / 3.0, 1e-12);
  EXPECT_EQ(topk_error(p, 5), 0.0);
}

TEST(TopK, MatchesSortingAndIsMonotoneInK) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> small(0, 3);
  for (int t = 0; t < 50; ++t) {
    const int c = 8, n = 12;
    Matrix z(n, c);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < c; ++k) z(i, k) = small(rng);  // plenty of ties
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng() % c);
    }
    const PredictionSet p(z, y);
    double prev = 100.0;
    for (std::size_t k = 1; k < static_cast<std::size_t>(c); ++k) {
      const double e = topk_error(p, k);
      EXPECT_DOUBLE_EQ(e, sorted_topk_error(z, y, k));
      EXPECT_LE(e, prev);
      prev = e;
    }
  }
}

TEST(TopK, KOutOfRange) {
  const PredictionSet p(rows({{1, 0, 0}}), {0});
  EXPECT_THROW(topk_error(p, 0), std::invalid_argument);
  EXPECT_THROW(topk_error(p, 3), std::invalid_argument);
}

TEST(MacroF1, HandCases) {
  EXPECT_DOUBLE_EQ(macro_f1(PredictionSet(rows({{1, 0}, {0, 1}}), {0, 1})), 1.0);
  // Confusion [[2,1],[1,2]].
  const PredictionSet p(rows({{1, 0}, {1, 0}, {0, 1}, {0, 1}, {0, 1}, {1, 0}}), {0, 0, 0, 1, 1, 1});
  EXPECT_NEAR(macro_f1(p), 2.0 / 3.0, 1e-12);
  // Class 2 never predicted nor present: contributes 0 to a 3-way average.
  EXPECT_NEAR(macro_f1(PredictionSet(rows({{1, 0, 0}, {0, 1, 0}}), {0, 1})), 2.0 / 3.0, 1e-12);
}

TEST(MacroF1, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const int c = 2 + static_cast<int>(rng() % 4), n = 5 + static_cast<int>(rng() % 20);
    Matrix z(n, c);
    std::vector<int> y(static_cast<std::size_t>(n)), pred(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < c; ++k) z(i, k) = std::uniform_real_distribution<double>(-1, 1)(rng);
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng() % static_cast<unsigned>(c));
      pred[static_cast<std::size_t>(i)] = argmax_row(z, i);
    }
    EXPECT_NEAR(macro_f1(PredictionSet(z, y)), brute_f1(pred, y, c), 1e-12);
  }
}

TEST(MacroF1, InvariantUnderRelabeling) {
  const Matrix z = rows({{1, 0, 0.5}, {0, 1, 2}, {3, 0, 1}, {0, 2, 1}});
  const std::vector<int> y = {0, 2, 1, 1};
  // Permute columns and labels consistently: class k -> (k + 1) % 3.
  Matrix zp(4, 3);
  for (int k = 0; k < 3; ++k) zp.col((k + 1) % 3) = z.col(k);
  std::vector<int> yp;
  for (int v : y) yp.push_back((v + 1) % 3);
  EXPECT_NEAR(macro_f1(PredictionSet(z, y)), macro_f1(PredictionSet(zp, yp)), 1e-12);
}

TEST(Ece, HandEnumeratedExample) {
  const std::vector<double> conf = {0.9, 0.9, 0.6, 0.6};
  const std::vector<int> correct = {1, 0, 1, 1};
  EXPECT_NEAR(ece_from_confidences(conf, correct, 2).ece, 0.0, 1e-12);
  const auto five = ece_from_confidences(conf, correct, 5);
  EXPECT_NEAR(five.ece, 40.0, 1e-12);
  // 0.6 sits on the 0.6 boundary and must land in (0.4, 0.6].
  EXPECT_EQ(five.reliability.bins[2].count, 2u);
  EXPECT_EQ(five.reliability.bins[4].count, 2u);
}

TEST(Ece, ConfidentAndCorrectIsZero) {
  const std::vector<double> conf = {1.0, 1.0, 1.0};
  const std::vector<int> correct = {1, 1, 1};
  EXPECT_EQ(ece_from_confidences(conf, correct, 15).ece, 0.0);
}

TEST(Ece, BinsPartitionAndCountsSum) {
  const auto p = self_sampled(300, 6, 1.0, 5);
  const auto r = ece(p, 15);
  std::size_t total = 0;
  for (std::size_t b = 0; b < 15; ++b) {
    total += r.reliability.bins[b].count;
    EXPECT_NEAR(r.reliability.bins[b].lower, b / 15.0, 1e-15);
    EXPECT_NEAR(r.reliability.bins[b].upper, (b + 1) / 15.0, 1e-15);
  }
  EXPECT_EQ(total, 300u);
  EXPECT_GE(r.ece, 0.0);
  EXPECT_LE(r.ece, 100.0);
  EXPECT_THROW(ece(p, 0), std::invalid_argument);
}

TEST(Ece, BoundaryGoesToLowerBin) {
  EXPECT_EQ(bin_index(0.2, 5), 0u);
  EXPECT_EQ(bin_index(0.2000001, 5), 1u);
  EXPECT_EQ(bin_index(1.0, 5), 4u);
  EXPECT_EQ(bin_index(1.0 / 15.0, 15), 0u);
}

TEST(TemperatureScaling, SelfSampledLabelsGiveUnitTemperature) {
  const auto p = self_sampled(4000, 10, 1.0, 1);
  EXPECT_NEAR(temperature_scale(p), 1.0, 0.05);
}

TEST(TemperatureScaling, OverConfidentByFiveRecoversFive) {
  const auto p = self_sampled(4000, 10, 5.0, 2);
  const double tau = temperature_scale(p);
  // Grid oracle for the NLL minimiser.
  double best = 0, best_nll = 1e300;
  for (double t = 0.5; t <= 10.0; t += 0.01)
    if (const double v = nll(p, t); v < best_nll) best_nll = v, best = t;
  EXPECT_NEAR(tau, best, 0.02);
  EXPECT_NEAR(tau, 5.0, 0.5);
  EXPECT_LT(ece(p, 15, tau).ece, ece(p, 15).ece);
}

TEST(TemperatureScaling, ArgmaxInvariant) {
  const auto p = self_sampled(500, 7, 3.0, 4);
  const auto before = evaluate_predictions(p, 15, false).report;
  const auto after = evaluate_predictions(p, 15, true).report;
  EXPECT_EQ(before.top1_error, after.top1_error);
  EXPECT_EQ(before.top5_error, after.top5_error);
  ASSERT_TRUE(after.calibration_temperature);
  const Matrix scaled = p.logits / *after.calibration_temperature;
  EXPECT_EQ(topk_error(PredictionSet(scaled, p.labels), 1), before.top1_error);
  for (double tau : {0.1, 0.7, 4.0, 19.0})
    for (Eigen::Index r = 0; r < p.logits.rows(); ++r) {
      const auto probs = losses::soften(losses::LogitsBatch(p.logits.row(r)), tau).probs;
      Eigen::Index a = 0;
      probs.row(0).maxCoeff(&a);
      EXPECT_EQ(static_cast<int>(a), argmax_row(p.logits, r));
    }
}

TEST(TemperatureScaling, SingleClassRejected) {
  EXPECT_THROW(temperature_scale(PredictionSet(rows({{1, 0}, {2, 0}}), {0, 0})), std::invalid_argument);
}

TEST(Report, FieldsAndCsv) {
  const auto p = self_sampled(200, 8, 1.0, 9);
  const auto ev = evaluate_predictions(p, 10, false);
  const auto j = ev.report.to_json();
  for (const char* k : {"top1_error", "top5_error", "macro_f1", "ece", "ece_after_ts", "calibration_temperature",
                        "n_samples", "n_bins"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_TRUE(j["ece_after_ts"].is_null());
  EXPECT_GE(ev.report.top1_error, ev.report.top5_error);
  std::ostringstream os;
  write_reliability_csv(os, ev.reliability);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "bin_lower,bin_upper,count,mean_confidence,accuracy");
  int data_rows = 0;
  while (std::getline(is, line)) data_rows += !line.empty();
  EXPECT_EQ(data_rows, 10);
}

TEST(Report, TopFiveIsZeroForFewClasses) {
  const PredictionSet p(rows({{0, 1, 0}, {1, 0, 0}}), {0, 0});
  EXPECT_EQ(evaluate_predictions(p).report.top5_error, 0.0);
}
