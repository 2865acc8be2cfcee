// SPDX-License-Identifier: Apache-2.0
#include "fopro/core.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace fopro;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs |= x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, StateRoundTripResumesStream) {
  Rng a(7);
  for (int i = 0; i < 10; ++i) a.next();
  Rng b;
  b.set_state(a.state());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Rng, UniformAndNormalMoments) {
  Rng rng(1);
  double su = 0, sn = 0, sn2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.01);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(3);
  auto v = iota_indices(50);
  rng.shuffle(v);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, iota_indices(50));
  EXPECT_NE(v, iota_indices(50));
}

TEST(MixSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a)
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(mix_seed(a, b));
  EXPECT_EQ(seen.size(), 400u);
}

TEST(Argmax, LowestIndexWinsTies) {
  const std::vector<double> v = {0.1, 0.4, 0.4, 0.2};
  EXPECT_EQ(argmax(v), 1);
  const std::vector<double> flat = {0.5, 0.5, 0.5};
  EXPECT_EQ(argmax(flat), 0);
  RowVector r(3);
  r << -1.0, 2.0, 2.0;
  EXPECT_EQ(argmax(r), 1);
}
