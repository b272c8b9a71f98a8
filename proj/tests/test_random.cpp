#include <algorithm>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>
#include <gtest/gtest.h>

#include "fellerlab/random.hpp"

using namespace fellerlab;

namespace {

template <typename Cdf>
double ks_statistic(std::vector<double> xs, Cdf F)
{
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = F(xs[i]);
    d = std::max({d, std::abs(f - i / n), std::abs((i + 1) / n - f)});
  }
  return d;
}

// Asymptotic 0.1% critical value of the one-sample KS statistic.
double ks_critical(std::size_t n) { return 1.95 / std::sqrt(static_cast<double>(n)); }

struct Moments {
  double mean = 0, var = 0;
};

template <typename Draw>
Moments moments(std::size_t n, Draw draw)
{
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = draw();
    s += x;
    s2 += x * x;
  }
  const double m = s / n;
  return {m, s2 / n - m * m};
}

}  // namespace

TEST(Philox, KnownAnswerVectors)
{
  using A4 = std::array<std::uint32_t, 4>;
  EXPECT_EQ(philox4x32({0, 0, 0, 0}, {0, 0}), (A4{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (A4{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (A4{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Xoshiro, StreamsAreReproducibleAndDistinct)
{
  Xoshiro256 a(99, 7), b(99, 7), c(99, 8), d(100, 7);
  for (int i = 0; i < 1000; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    EXPECT_NE(x, c());
    EXPECT_NE(x, d());
  }
  Xoshiro256 u(1, 1);
  for (int i = 0; i < 100000; ++i) {
    const double x = u.uniform();
    ASSERT_GT(x, 0.0);
    ASSERT_LT(x, 1.0);
  }
}

TEST(Samplers, NormalKsAndTail)
{
  Xoshiro256 g(1, 0);
  Samplers S;
  const std::size_t n = 400000;
  std::vector<double> xs(n);
  for (auto& x : xs) x = S.normal(g);
  EXPECT_LT(ks_statistic(xs, [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }), ks_critical(n));
  // Beyond the base layer r = 3.654...: P(|Z| > r) = erfc(r / sqrt 2) = 2.58e-4.
  std::size_t far = 0;
  const std::size_t m = 4000000;
  for (std::size_t i = 0; i < m; ++i) far += std::abs(S.normal(g)) > 3.6541528853610088;
  const double p = std::erfc(3.6541528853610088 / std::sqrt(2.0));
  EXPECT_NEAR(far / double(m), p, 5 * std::sqrt(p / m));
}

TEST(Samplers, ExponentialKsAndTail)
{
  Xoshiro256 g(2, 0);
  Samplers S;
  const std::size_t n = 400000;
  std::vector<double> xs(n);
  for (auto& x : xs) x = S.exponential(g);
  EXPECT_LT(ks_statistic(xs, [](double x) { return -std::expm1(-x); }), ks_critical(n));
  std::size_t far = 0;
  const std::size_t m = 4000000;
  for (std::size_t i = 0; i < m; ++i) far += S.exponential(g) > 7.69711747013104972;
  const double p = std::exp(-7.69711747013104972);
  EXPECT_NEAR(far / double(m), p, 5 * std::sqrt(p / m));
}

TEST(Samplers, GammaKs)
{
  Xoshiro256 g(3, 0);
  Samplers S;
  for (double shape : {0.3, 1.0, 2.5, 50.0}) {
    const std::size_t n = 200000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = S.gamma(g, shape);
    EXPECT_LT(ks_statistic(xs, [&](double x) { return boost::math::gamma_p(shape, x); }), ks_critical(n)) << shape;
  }
}

TEST(Samplers, PoissonMoments)
{
  Xoshiro256 g(4, 0);
  Samplers S;
  for (double mean : {0.5, 5.0, 30.0, 2000.0}) {
    const std::size_t n = 400000;
    const auto m = moments(n, [&] { return static_cast<double>(S.poisson(g, mean)); });
    EXPECT_NEAR(m.mean, mean, 5 * std::sqrt(mean / n)) << mean;
    EXPECT_NEAR(m.var, mean, 5 * mean * std::sqrt(2.0 / n) + 5 * std::sqrt(mean / n)) << mean;
  }
}

TEST(Samplers, PoissonPmfSmallMean)
{
  Xoshiro256 g(5, 0);
  Samplers S;
  const double mean = 12.0;
  const std::size_t n = 400000;
  std::vector<std::size_t> counts(40, 0);
  for (std::size_t i = 0; i < n; ++i) ++counts[std::min<std::size_t>(S.poisson(g, mean), 39)];
  for (int k = 4; k <= 22; ++k) {
    const double p = std::exp(-mean + k * std::log(mean) - std::lgamma(k + 1.0));
    EXPECT_NEAR(counts[k] / double(n), p, 5 * std::sqrt(p * (1 - p) / n)) << k;
  }
}

TEST(Samplers, NoncentralChiSquareMoments)
{
  Xoshiro256 g(6, 0);
  Samplers S;
  for (double df : {0.0, 0.5, 1.0, 3.0, 7.3})
    for (double ncp : {0.1, 4.0, 400.0}) {
      const std::size_t n = 200000;
      const auto m = moments(n, [&] { return S.noncentral_chi2(g, df, ncp); });
      const double mean = df + ncp, var = 2 * (df + 2 * ncp);
      EXPECT_NEAR(m.mean, mean, 5 * std::sqrt(var / n)) << df << " " << ncp;
      EXPECT_NEAR(m.var, var, 0.05 * var) << df << " " << ncp;
    }
}

TEST(Samplers, NoncentralChiSquareAtomAtZero)
{
  // With zero degrees of freedom the law has mass exp(-ncp / 2) at 0.
  Xoshiro256 g(7, 0);
  Samplers S;
  const double ncp = 1.5;
  const std::size_t n = 400000;
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < n; ++i) zeros += S.noncentral_chi2(g, 0.0, ncp) == 0.0;
  const double p = std::exp(-ncp / 2);
  EXPECT_NEAR(zeros / double(n), p, 5 * std::sqrt(p * (1 - p) / n));
}

TEST(Samplers, CentralChiSquareKs)
{
  Xoshiro256 g(8, 0);
  Samplers S;
  for (double df : {1.0, 2.0, 3.0, 4.5, 10.0}) {
    const std::size_t n = 200000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = S.central_chi2(g, df);
    EXPECT_LT(ks_statistic(xs, [&](double x) { return boost::math::gamma_p(df / 2, x / 2); }), ks_critical(n)) << df;
  }
}
