// SPDX-License-Identifier: Apache-2.0
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace fopro;
using namespace fopro::testing;

namespace {

Matrix rows(std::initializer_list<std::initializer_list<double>> values) {
  Matrix m(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(values.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : values) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

void expect_unit_centers(const PrototypeStore& s) {
  for (int k = 0; k < s.num_classes(); ++k) EXPECT_NEAR(s[k].center.norm(), 1.0, 1e-6);
}

}  // namespace

TEST(FewShotInit, SingleShotIsIdentity) {
  const auto s = PrototypeStore::from_fewshots(rows({{1, 0, 0}, {0, 1, 0}}), std::vector<int>{0, 1}, 2, {});
  EXPECT_EQ(s[0].center, Vector::Unit(3, 0));
  EXPECT_EQ(s[1].center, Vector::Unit(3, 1));
}

TEST(FewShotInit, TwoShotsAverageThenNormalize) {
  const auto s = PrototypeStore::from_fewshots(rows({{1, 0}, {0, 1}, {1, 0}}), std::vector<int>{0, 0, 1}, 2, {});
  EXPECT_NEAR(s[0].center[0], 0.70710678118654752, 1e-12);
  EXPECT_NEAR(s[0].center[1], 0.70710678118654752, 1e-12);
}

TEST(FewShotInit, MatchesBruteForceMeanOnRandomInstances) {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const int C = 3, K = 16, dp = 8;
    const Matrix z = random_unit_rows(C * K, dp, rng);
    std::vector<int> labels;
    for (int i = 0; i < C * K; ++i) labels.push_back(i % C);
    const auto s = PrototypeStore::from_fewshots(z, labels, C, {});
    for (int k = 0; k < C; ++k) {
      std::vector<double> sum(dp, 0.0);
      for (int i = 0; i < C * K; ++i)
        if (labels[static_cast<std::size_t>(i)] == k)
          for (int j = 0; j < dp; ++j) sum[static_cast<std::size_t>(j)] += z(i, j);
      double norm = 0.0;
      for (double v : sum) norm += v * v;
      norm = std::sqrt(norm);
      for (int j = 0; j < dp; ++j) EXPECT_NEAR(s[k].center[j], sum[static_cast<std::size_t>(j)] / norm, 1e-7);
    }
    expect_unit_centers(s);
  }
}

TEST(FewShotInit, MissingClassIsAnError) {
  EXPECT_THROW(PrototypeStore::from_fewshots(rows({{1, 0}}), std::vector<int>{0}, 2, {}), Error);
}

TEST(FewShotInit, TemperaturesStartAtTau) {
  PrototypeConfig pc;
  pc.tau = 0.07;
  const auto s = PrototypeStore::from_fewshots(rows({{1, 0}, {0, 1}}), std::vector<int>{0, 1}, 2, pc);
  EXPECT_EQ(s[0].temperature, 0.07);
  EXPECT_EQ(s[1].temperature, 0.07);
}

TEST(ZeroShotInit, OneSampleGivesThatEmbedding) {
  Rng rng(3);
  const Matrix z = random_unit_rows(10, 4, rng);
  std::vector<int> labels = {0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  std::vector<std::vector<std::size_t>> chosen;
  const auto s = PrototypeStore::from_web_sample(z, labels, 2, 1, {}, rng, &chosen);
  for (int k = 0; k < 2; ++k) {
    ASSERT_EQ(chosen[static_cast<std::size_t>(k)].size(), 1u);
    const auto row = static_cast<Eigen::Index>(chosen[static_cast<std::size_t>(k)][0]);
    EXPECT_EQ(labels[static_cast<std::size_t>(row)], k);
    EXPECT_LT((s[k].center - z.row(row).transpose()).norm(), 1e-12);
  }
}

TEST(ZeroShotInit, SmallClassUsesAllSamples) {
  Rng rng(4);
  const Matrix z = random_unit_rows(6, 4, rng);
  std::vector<int> labels = {0, 0, 0, 0, 0, 1};
  std::vector<std::vector<std::size_t>> chosen;
  PrototypeStore::from_web_sample(z, labels, 2, 3, {}, rng, &chosen);
  EXPECT_EQ(chosen[0].size(), 3u);
  EXPECT_EQ(chosen[1].size(), 1u);
}

TEST(Temperature, TwoMemberExample) {
  PrototypeConfig pc;
  pc.alpha = 10.0;
  auto s = PrototypeStore::from_fewshots(rows({{1, 0, 0}, {0, 1, 0}}), std::vector<int>{0, 1}, 2, pc);
  s.refresh_temperatures(rows({{1, 0.2, 0}, {1, 0, 0.4}}), std::vector<int>{0, 0});
  EXPECT_NEAR(s[0].temperature, 0.1207288813145534, 1e-12);
  EXPECT_EQ(s[0].member_count, 2);
  // class 1 had no members and keeps its previous value
  EXPECT_EQ(s[1].temperature, pc.tau);
}

TEST(Temperature, ZeroSpreadClampsToMinimum) {
  PrototypeConfig pc;
  auto s = PrototypeStore::from_fewshots(rows({{1, 0}, {0, 1}}), std::vector<int>{0, 1}, 2, pc);
  s.refresh_temperatures(rows({{1, 0}, {1, 0}, {0, 1}}), std::vector<int>{0, 0, 1});
  EXPECT_EQ(PrototypeStore::concentration_unclamped(0.0, 2, pc.alpha), 0.0);
  EXPECT_EQ(s[0].temperature, pc.phi_min());
  EXPECT_EQ(s[1].temperature, pc.phi_min());
}

TEST(Temperature, MatchesDirectEvaluationOnRandomInstances) {
  Rng rng(5);
  PrototypeConfig pc;
  for (int trial = 0; trial < 25; ++trial) {
    const Matrix c = random_unit_rows(3, 6, rng);
    auto s = PrototypeStore::from_fewshots(c, std::vector<int>{0, 1, 2}, 3, pc);
    const int n = 5 + static_cast<int>(rng.index(20));
    const Matrix z = random_unit_rows(n, 6, rng);
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(i % 4 == 3 ? kOod : static_cast<int>(rng.index(3)));
    s.refresh_temperatures(z, labels);
    for (int k = 0; k < 3; ++k) {
      double dist = 0.0;
      int count = 0;
      for (int i = 0; i < n; ++i)
        if (labels[static_cast<std::size_t>(i)] == k) {
          double d2 = 0.0;
          for (int j = 0; j < 6; ++j) d2 += (z(i, j) - c(k, j)) * (z(i, j) - c(k, j));
          dist += std::sqrt(d2);
          ++count;
        }
      if (count == 0) continue;
      const double phi = std::clamp(dist / (count * std::log(count + pc.alpha)), pc.phi_min(), pc.phi_max());
      EXPECT_NEAR(s[k].temperature, phi, 1e-12);
    }
  }
}

TEST(Temperature, LooserClusterIsLarger) {
  auto s = PrototypeStore::from_fewshots(rows({{1, 0, 0}, {0, 1, 0}}), std::vector<int>{0, 1}, 2, {});
  const Matrix z = nn::l2_normalize_rows(rows({{1, 0.1, 0}, {1, 0, 0.1}, {0.2, 1, 0}, {0, 1, 0.3}}));
  s.refresh_temperatures(z, std::vector<int>{0, 0, 1, 1});
  EXPECT_GT(s[1].temperature, s[0].temperature);
}

TEST(EmaUpdate, HalfMomentumExample) {
  PrototypeConfig pc;
  pc.momentum = 0.5;
  auto s = PrototypeStore::from_fewshots(rows({{1, 0}, {0, 1}}), std::vector<int>{0, 1}, 2, pc);
  s.ema_update(Vector::Unit(2, 1), 0);
  EXPECT_NEAR(s[0].center[0], 0.70710678118654752, 1e-12);
  EXPECT_NEAR(s[0].center[1], 0.70710678118654752, 1e-12);
}

TEST(EmaUpdate, FixedPoint) {
  auto s = PrototypeStore::from_fewshots(rows({{0.6, 0.8}, {0, 1}}), std::vector<int>{0, 1}, 2, {});
  const Vector c = s[0].center;
  s.ema_update(c, 0);
  EXPECT_LT((s[0].center - c).norm(), 1e-15);
}

TEST(EmaUpdate, HundredStepsMatchScalarRecurrence) {
  Rng rng(7);
  PrototypeConfig pc;
  pc.momentum = 0.999;
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix c0 = random_unit_rows(1, 3, rng);
    auto s = PrototypeStore::from_fewshots(c0, std::vector<int>{0}, 1, pc);
    double a = c0(0, 0), b = c0(0, 1), d = c0(0, 2);
    for (int step = 0; step < 100; ++step) {
      const Vector z = random_unit(3, rng);
      s.ema_update(z, 0);
      a = 0.999 * a + 0.001 * z[0];
      b = 0.999 * b + 0.001 * z[1];
      d = 0.999 * d + 0.001 * z[2];
      const double n = std::sqrt(a * a + b * b + d * d);
      a /= n, b /= n, d /= n;
    }
    EXPECT_NEAR(s[0].center[0], a, 1e-7);
    EXPECT_NEAR(s[0].center[1], b, 1e-7);
    EXPECT_NEAR(s[0].center[2], d, 1e-7);
    expect_unit_centers(s);
  }
}

TEST(EmaUpdate, SinglePollutedUpdateIsAnchored) {
  Rng rng(8);
  PrototypeConfig pc;
  pc.momentum = 0.999;
  for (int trial = 0; trial < 200; ++trial) {
    auto s = PrototypeStore::from_fewshots(random_unit_rows(1, 5, rng), std::vector<int>{0}, 1, pc);
    const Vector before = s[0].center;
    s.ema_update(random_unit(5, rng), 0);
    const double angle = std::acos(std::clamp(before.dot(s[0].center), -1.0, 1.0));
    EXPECT_LE(angle, 2.0 * (1.0 - pc.momentum) * 1.5);
  }
}

TEST(EmaUpdate, RejectsOodLabel) {
  auto s = PrototypeStore::from_fewshots(rows({{1, 0}, {0, 1}}), std::vector<int>{0, 1}, 2, {});
  EXPECT_THROW(s.ema_update(Vector::Unit(2, 0), kOod), Error);
}

TEST(Report, HasOneLinePerClass) {
  const auto s = PrototypeStore::from_fewshots(rows({{1, 0}, {0, 1}}), std::vector<int>{0, 1}, 2, {});
  const std::string text = prototype_report(s);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
