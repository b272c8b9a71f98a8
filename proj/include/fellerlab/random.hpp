#ifndef FELLERLAB_RANDOM_HPP
#define FELLERLAB_RANDOM_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>


namespace fellerlab {

// Philox4x32-10 block function (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key)
{
  constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
  constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += W0;
    key[1] += W1;
  }
  return ctr;
}

// xoshiro256++ generator. Each Monte Carlo path owns one, seeded from the
// Philox block at counter (path index, word) under key = global seed.
class Xoshiro256 {
 public:
  using result_type = std::uint64_t;

  Xoshiro256(std::uint64_t seed, std::uint64_t stream)
  {
    const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    for (std::uint32_t half = 0; half < 2; ++half) {
      const auto b = philox4x32({static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), half, 0x5eedu}, key);
      s_[2 * half] = (static_cast<std::uint64_t>(b[0]) << 32) | b[1];
      s_[2 * half + 1] = (static_cast<std::uint64_t>(b[2]) << 32) | b[3];
    }
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()()
  {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform on (0, 1), never exactly 0 or 1.
  double uniform() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<std::uint64_t, 4> s_{};
};

namespace detail {

// 256-layer ziggurat tables (Marsaglia and Tsang 2000): x[1] = r, x[256] = 0,
// x[0] = v / f(r) is the pseudo-width of the base strip.
struct ZigguratTables {
  std::array<double, 257> x;
  std::array<double, 257> f;
};

template <typename F, typename Inv>
ZigguratTables make_ziggurat(double r, double v, F f, Inv inv)
{
  ZigguratTables t{};
  t.x[0] = v / f(r);
  t.x[1] = r;
  for (int i = 1; i < 256; ++i) t.x[i + 1] = i == 255 ? 0.0 : inv(v / t.x[i] + f(t.x[i]));
  for (int i = 0; i < 257; ++i) t.f[i] = f(t.x[i]);
  return t;
}

inline const ZigguratTables& normal_ziggurat()
{
  static const ZigguratTables t = make_ziggurat(
      3.6541528853610088, 0.00492867323399, [](double x) { return std::exp(-0.5 * x * x); },
      [](double y) { return std::sqrt(-2 * std::log(y)); });
  return t;
}

inline const ZigguratTables& exponential_ziggurat()
{
  static const ZigguratTables t = make_ziggurat(
      7.69711747013104972, 0.0039496598225815571993, [](double x) { return std::exp(-x); },
      [](double y) { return -std::log(y); });
  return t;
}

}  // namespace detail

class Samplers {
 public:
  Samplers() : nz_(detail::normal_ziggurat()), ez_(detail::exponential_ziggurat()) {}

  // One 64-bit draw gives the layer (low 8 bits) and a signed 53-bit uniform;
  // about 99% of draws return from the first comparison.
  double normal(Xoshiro256& g)
  {
    const std::uint64_t bits = g();
    const int i = static_cast<int>(bits & 0xFF);
    const double x = ((static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-52 - 1.0) * nz_.x[i];
    if (std::abs(x) < nz_.x[i + 1]) [[likely]]
      return x;
    return normal_slow(g, i, x);
  }

  double exponential(Xoshiro256& g)
  {
    const std::uint64_t bits = g();
    const int i = static_cast<int>(bits & 0xFF);
    const double x = (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53 * ez_.x[i];
    if (x < ez_.x[i + 1]) [[likely]]
      return x;
    return exponential_slow(g, i, x);
  }

  // Marsaglia-Tsang for shape >= 1, boosted for shape < 1. Unit scale.
  double gamma(Xoshiro256& g, double shape)
  {
    if (shape < 1) {
      const double u = g.uniform();
      return gamma(g, shape + 1) * std::pow(u, 1 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1 / std::sqrt(9 * d);
    for (;;) {
      double x, v;
      do {
        x = normal(g);
        v = 1 + c * x;
      } while (v <= 0);
      v = v * v * v;
      const double u = g.uniform();
      const double x2 = x * x;
      if (u < 1 - 0.0331 * x2 * x2) return d * v;
      if (std::log(u) < 0.5 * x2 + d * (1 - v + std::log(v))) return d * v;
    }
  }

  // Poisson: multiplication method below 10, PTRS (Hormann 1993) above.
  std::uint64_t poisson(Xoshiro256& g, double mean)
  {
    if (mean <= 0) return 0;
    if (mean < 10) {
      const double L = std::exp(-mean);
      std::uint64_t k = 0;
      double p = g.uniform();
      while (p > L) {
        ++k;
        p *= g.uniform();
      }
      return k;
    }
    const double slam = std::sqrt(mean);
    const double loglam = std::log(mean);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2);
    for (;;) {
      const double U = g.uniform() - 0.5;
      const double V = g.uniform();
      const double us = 0.5 - std::abs(U);
      const double kd = std::floor((2 * a / us + b) * U + mean + 0.43);
      if (us >= 0.07 && V <= vr) return static_cast<std::uint64_t>(kd);
      if (kd < 0 || (us < 0.013 && V > us)) continue;
      if (std::log(V) + std::log(inv_alpha) - std::log(a / (us * us) + b) <= -mean + kd * loglam - log_factorial(kd))
        return static_cast<std::uint64_t>(kd);
    }
  }

  // Noncentral chi-square with df > 0 degrees of freedom and noncentrality
  // ncp >= 0: for df >= 1 the normal-plus-central split, otherwise the
  // Poisson mixture of central chi-squares.
  double noncentral_chi2(Xoshiro256& g, double df, double ncp)
  {
    if (df >= 1) {
      const double z = normal(g) + std::sqrt(ncp);
      return z * z + central_chi2(g, df - 1);
    }
    const double n = static_cast<double>(poisson(g, 0.5 * ncp));
    const double shape = 0.5 * df + n;
    return shape > 0 ? 2 * gamma(g, shape) : 0.0;
  }

  // Central chi-square; small integer degrees of freedom use sums of squared
  // normals and exponentials.
  double central_chi2(Xoshiro256& g, double df)
  {
    if (df <= 0) return 0.0;
    if (df == 1) {
      const double z = normal(g);
      return z * z;
    }
    if (df == 2) return 2 * exponential(g);
    if (df == 3) {
      const double z = normal(g);
      return z * z + 2 * exponential(g);
    }
    return 2 * gamma(g, 0.5 * df);
  }

  static double log_factorial(double k)
  {
    if (k < 10) return std::lgamma(k + 1);
    const double n = k + 1;
    const double r = 1 / n;
    const double r2 = r * r;
    return (n - 0.5) * std::log(n) - n + 0.91893853320467274178 + r * (1.0 / 12 - r2 * (1.0 / 360 - r2 / 1260));
  }

 private:
  [[gnu::noinline]] double normal_slow(Xoshiro256& g, int i, double x)
  {
    for (;;) {
      if (i == 0) {
        double a, b;
        do {
          a = -std::log(g.uniform()) / nz_.x[1];
          b = -std::log(g.uniform());
        } while (b + b < a * a);
        return x < 0 ? -(nz_.x[1] + a) : nz_.x[1] + a;
      }
      if (nz_.f[i] + g.uniform() * (nz_.f[i + 1] - nz_.f[i]) < std::exp(-0.5 * x * x)) return x;
      const std::uint64_t bits = g();
      i = static_cast<int>(bits & 0xFF);
      x = ((static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-52 - 1.0) * nz_.x[i];
      if (std::abs(x) < nz_.x[i + 1]) return x;
    }
  }

  [[gnu::noinline]] double exponential_slow(Xoshiro256& g, int i, double x)
  {
    for (;;) {
      if (i == 0) return ez_.x[1] - std::log(g.uniform());
      if (ez_.f[i] + g.uniform() * (ez_.f[i + 1] - ez_.f[i]) < std::exp(-x)) return x;
      const std::uint64_t bits = g();
      i = static_cast<int>(bits & 0xFF);
      x = (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53 * ez_.x[i];
      if (x < ez_.x[i + 1]) return x;
    }
  }

  const detail::ZigguratTables& nz_;
  const detail::ZigguratTables& ez_;
};

}  // namespace fellerlab

#endif  // FELLERLAB_RANDOM_HPP
