#ifndef FELLERLAB_STATS_HPP
#define FELLERLAB_STATS_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "laws.hpp"
#include "mc.hpp"

namespace fellerlab {

struct LaplacePoint {
  Vector lambda;
  double value = 1;
  double se = 0;
};

// Weighted empirical Laplace transform sum w_i exp(-(x_i, l)) / sum w_i with
// delete-one jackknife standard errors. Rows of X are samples.
inline std::vector<LaplacePoint> empirical_laplace(const Matrix& X, const Vector& w, const std::vector<Vector>& lambdas)
{
  const Eigen::Index n = X.rows();
  if (n == 0 || w.size() != n) fail(ErrorCode::empty_ensemble, "empirical_laplace needs a nonempty ensemble");
  const double sw = w.sum();
  if (!(sw > 0)) fail(ErrorCode::empty_ensemble, "total weight is zero");
  std::vector<LaplacePoint> out;
  out.reserve(lambdas.size());
  Vector f(n);
  for (const Vector& l : lambdas) {
    if (l.size() != X.cols()) fail(ErrorCode::invalid_argument, "lambda has the wrong length");
    LaplacePoint p;
    p.lambda = l;
    if (l.isZero()) {
      out.push_back(p);
      continue;
    }
    double swf = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      f(i) = std::exp(-X.row(i).dot(l));
      swf += w(i) * f(i);
    }
    p.value = swf / sw;
    if (n > 1) {
      double mean = 0;
      std::vector<double> loo(static_cast<std::size_t>(n));
      std::size_t m = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double rest = sw - w(i);
        loo[m] = rest > 0 ? (swf - w(i) * f(i)) / rest : p.value;
        mean += loo[m++];
      }
      mean /= static_cast<double>(n);
      double acc = 0;
      for (double v : loo) acc += (v - mean) * (v - mean);
      p.se = std::sqrt(acc * static_cast<double>(n - 1) / static_cast<double>(n));
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<LaplacePoint> empirical_laplace(const WeightedEnsemble& ens, double t, const std::vector<Vector>& lambdas)
{
  if (ens.paths.empty()) fail(ErrorCode::empty_ensemble, "ensemble has no paths");
  return empirical_laplace(ens.states_at(t), ens.weight_vector(), lambdas);
}

inline double n_effective(const Vector& w)
{
  const double s = w.sum(), s2 = w.squaredNorm();
  return s2 > 0 ? s * s / s2 : 0.0;
}

inline double gamma_cdf(double shape, double rate, double x)
{
  if (x <= 0) return 0.0;
  return boost::math::gamma_p(shape, rate * x);
}

// CDF of a sum of independent exponentials with rates r1, r2. Written as
// 1 - exp(-r1 x) (1 + r1 x phi((r2 - r1) x)), phi(z) = (1 - e^{-z}) / z, which
// reduces to the Gamma(2, r) CDF when the rates coincide.
inline double two_rate_cdf(double r1, double r2, double x)
{
  if (x <= 0) return 0.0;
  if (r1 > r2) std::swap(r1, r2);
  const double z = (r2 - r1) * x;
  const double phi = z == 0 ? 1.0 : -std::expm1(-z) / z;
  return 1 - std::exp(-r1 * x) * (1 + r1 * x * phi);
}

class ReferenceCdf {
 public:
  explicit ReferenceCdf(const LimitLawDescriptor& law) : law_(law)
  {
    switch (law.form) {
      case LawForm::gamma:
      case LawForm::point_mass_zero:
        return;
      case LawForm::product_of_exponentials: {
        for (double r : law.rates)
          if (std::isfinite(r)) rates_.push_back(r);
        if (rates_.size() > 2) fail(ErrorCode::no_cdf, "more than two finite exponential rates");
        return;
      }
      case LawForm::explosion: fail(ErrorCode::no_cdf, "exploding limit has no CDF on the half-line");
      case LawForm::numeric_laplace: fail(ErrorCode::no_cdf, "numeric Laplace tables have no CDF");
    }
  }

  double operator()(double x) const
  {
    switch (law_.form) {
      case LawForm::gamma: return gamma_cdf(law_.shape, law_.rate, x);
      case LawForm::point_mass_zero: return x >= 0 ? 1.0 : 0.0;
      default: break;
    }
    if (rates_.empty()) return x >= 0 ? 1.0 : 0.0;
    if (rates_.size() == 1) return x <= 0 ? 0.0 : -std::expm1(-rates_[0] * x);
    return two_rate_cdf(rates_[0], rates_[1], x);
  }

  double left(double x) const
  {
    const bool atom_at_zero = law_.form == LawForm::point_mass_zero ||
                              (law_.form == LawForm::product_of_exponentials && rates_.empty());
    if (atom_at_zero && x <= 0) return 0.0;
    return (*this)(x);
  }

 private:
  LimitLawDescriptor law_;
  std::vector<double> rates_;
};

struct GofReport {
  double statistic = 0;
  double n_effective = 0;
  double threshold = 0;
  bool pass = false;
  LimitLawDescriptor reference;
};

namespace detail {

inline std::vector<std::size_t> sorted_order(const std::vector<double>& x)
{
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  return idx;
}

}  // namespace detail

// Sup distance between the weighted empirical CDF of the samples and the
// reference CDF, checked on both sides of every jump.
inline GofReport ks_weighted(const std::vector<double>& samples, const std::vector<double>& weights,
                             const LimitLawDescriptor& reference, double threshold)
{
  if (samples.empty() || samples.size() != weights.size()) fail(ErrorCode::empty_ensemble, "ks_weighted needs samples with weights");
  const ReferenceCdf F(reference);
  const double sw = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sw > 0)) fail(ErrorCode::empty_ensemble, "total weight is zero");
  const auto idx = detail::sorted_order(samples);
  double cum = 0, stat = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    const double x = samples[idx[i]];
    const double before = cum / sw;
    while (i < idx.size() && samples[idx[i]] == x) cum += weights[idx[i++]];
    const double after = cum / sw;
    stat = std::max({stat, std::abs(before - F.left(x)), std::abs(after - F(x))});
  }
  GofReport r;
  r.statistic = stat;
  r.n_effective = n_effective(Eigen::Map<const Vector>(weights.data(), static_cast<Eigen::Index>(weights.size())));
  r.threshold = threshold;
  r.pass = stat <= threshold;
  r.reference = reference;
  return r;
}

// One coordinate of an ensemble at time t, optionally divided by `scale`.
inline GofReport ks_weighted(const WeightedEnsemble& ens, double t, int coordinate, const LimitLawDescriptor& reference,
                             double threshold, double scale = 1.0)
{
  const Matrix X = ens.states_at(t);
  if (coordinate < 0 || coordinate >= X.cols()) fail(ErrorCode::invalid_argument, "coordinate out of range");
  std::vector<double> s(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) s[static_cast<std::size_t>(i)] = X(i, coordinate) / scale;
  return ks_weighted(s, ens.weights, reference, threshold);
}

// Two-sample weighted KS distance.
inline double ks_two_sample(const std::vector<double>& a, const std::vector<double>& wa, const std::vector<double>& b,
                            const std::vector<double>& wb)
{
  if (a.empty() || b.empty()) fail(ErrorCode::empty_ensemble, "ks_two_sample needs two nonempty samples");
  const double sa = std::accumulate(wa.begin(), wa.end(), 0.0);
  const double sb = std::accumulate(wb.begin(), wb.end(), 0.0);
  const auto ia = detail::sorted_order(a), ib = detail::sorted_order(b);
  std::size_t i = 0, j = 0;
  double ca = 0, cb = 0, stat = 0;
  while (i < ia.size() || j < ib.size()) {
    double x;
    if (j >= ib.size() || (i < ia.size() && a[ia[i]] <= b[ib[j]])) x = a[ia[i]];
    else x = b[ib[j]];
    while (i < ia.size() && a[ia[i]] == x) ca += wa[ia[i++]];
    while (j < ib.size() && b[ib[j]] == x) cb += wb[ib[j++]];
    stat = std::max(stat, std::abs(ca / sa - cb / sb));
  }
  return stat;
}

struct TailPoint {
  double t = 0;
  double probability = 0;
  double se = 0;
};

// Weighted estimate of P(x_{t, coordinate} <= M) per ensemble.
inline TailPoint tail_probability(const WeightedEnsemble& ens, double t, int coordinate, double M)
{
  const Matrix X = ens.states_at(t);
  const Vector& w = ens.weight_vector();
  const double sw = w.sum();
  if (!(sw > 0)) fail(ErrorCode::empty_ensemble, "total weight is zero");
  double hit = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    if (X(i, coordinate) <= M) hit += w(i);
  const double p = hit / sw;
  double acc = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double d = (X(i, coordinate) <= M ? 1.0 : 0.0) - p;
    acc += w(i) * w(i) * d * d;
  }
  return {t, p, std::sqrt(acc) / sw};
}

inline std::vector<TailPoint> explosion_monitor(const WeightedEnsemble& ens, const std::vector<double>& times, int coordinate,
                                                double M)
{
  std::vector<TailPoint> out;
  for (double t : times) out.push_back(tail_probability(ens, t, coordinate, M));
  return out;
}

inline std::vector<TailPoint> explosion_monitor(const std::vector<std::pair<double, const WeightedEnsemble*>>& ensembles,
                                                int coordinate, double M)
{
  std::vector<TailPoint> out;
  for (const auto& [t, ens] : ensembles) out.push_back(tail_probability(*ens, t, coordinate, M));
  return out;
}

inline bool strictly_decreasing(const std::vector<TailPoint>& rows)
{
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (!(rows[i].probability < rows[i - 1].probability)) return false;
  return true;
}

}  // namespace fellerlab

#endif  // FELLERLAB_STATS_HPP
