#include <boost/multiprecision/cpp_bin_float.hpp>
#include <gtest/gtest.h>

#include "fellerlab/random.hpp"
#include "fellerlab/stats.hpp"

using namespace fellerlab;

namespace {

using Big = boost::multiprecision::cpp_bin_float_50;

// Regularized lower incomplete gamma by its power series in 50-digit arithmetic:
// P(a, x) = x^a e^{-x} sum_n x^n / Gamma(a + n + 1).
double gamma_p_series(double a, double x)
{
  const Big A(a), X(x);
  Big term = 1 / boost::multiprecision::tgamma(A + 1), sum = term;
  for (int n = 1; n < 2000; ++n) {
    term *= X / (A + n);
    sum += term;
    if (term < sum * Big("1e-45")) break;
  }
  return static_cast<double>(boost::multiprecision::pow(X, A) * boost::multiprecision::exp(-X) * sum);
}

Vector vec(std::initializer_list<double> xs)
{
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

void expect_error(ErrorCode code, const std::function<void()>& f)
{
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

LimitLawDescriptor exponentials(std::vector<double> rates)
{
  auto d = LimitLawDescriptor::simple(LawForm::product_of_exponentials, "test");
  d.rates = std::move(rates);
  return d;
}

}  // namespace

TEST(EmpiricalLaplace, WeightedValueByHand)
{
  Matrix X(3, 1);
  X << 0, 1, 2;
  const auto p = empirical_laplace(X, vec({1, 2, 1}), {vec({1})}).front();
  EXPECT_NEAR(p.value, (1 + 2 * std::exp(-1.0) + std::exp(-2.0)) / 4, 1e-15);

  const auto zero = empirical_laplace(X, vec({1, 2, 1}), {vec({0})}).front();
  EXPECT_EQ(zero.value, 1.0);
  EXPECT_EQ(zero.se, 0.0);
}

TEST(EmpiricalLaplace, JackknifeOfPlainMeanIsStandardError)
{
  // With unit weights the delete-one jackknife reproduces s / sqrt(n) exactly.
  Matrix X(6, 2);
  X << 0.1, 0.0, 0.5, 1.0, 2.0, 0.3, 0.0, 0.0, 1.7, 2.2, 0.9, 0.4;
  const Vector l = vec({0.8, 0.6});
  const auto p = empirical_laplace(X, Vector::Ones(6), {l}).front();
  const Eigen::ArrayXd f = (-(X * l)).array().exp();
  const double m = f.mean();
  const double s = std::sqrt((f - m).square().sum() / 5);
  EXPECT_NEAR(p.value, m, 1e-15);
  EXPECT_NEAR(p.se, s / std::sqrt(6.0), 1e-14);
}

TEST(EmpiricalLaplace, Errors)
{
  expect_error(ErrorCode::empty_ensemble, [] { empirical_laplace(Matrix(0, 1), Vector(0), {vec({1})}); });
  expect_error(ErrorCode::empty_ensemble, [] { empirical_laplace(Matrix::Ones(2, 1), vec({0, 0}), {vec({1})}); });
  expect_error(ErrorCode::invalid_argument, [] { empirical_laplace(Matrix::Ones(2, 1), vec({1, 1}), {vec({1, 1})}); });
}

TEST(GammaCdf, AgreesWithMultiprecisionSeries)
{
  const double shapes[] = {0.25, 0.5, 1.0, 2.0, 3.7};
  const double xs[] = {0.05, 0.7, 2.5, 9.0};
  for (double a : shapes)
    for (double x : xs) {
      const double ref = gamma_p_series(a, x);
      EXPECT_NEAR(gamma_cdf(a, 1.0, x), ref, 1e-12 * ref) << a << " " << x;
    }
  EXPECT_NEAR(gamma_cdf(2.0, 3.0, 0.5), gamma_p_series(2.0, 1.5), 1e-14);
  EXPECT_EQ(gamma_cdf(2.0, 1.0, 0.0), 0.0);
  EXPECT_EQ(gamma_cdf(2.0, 1.0, -1.0), 0.0);
}

TEST(TwoRateCdf, ConvolutionFormulaAndEqualRateLimit)
{
  for (double x : {0.1, 1.0, 4.0}) {
    const double r1 = 1.0, r2 = 2.5;
    const double conv = 1 - (r2 * std::exp(-r1 * x) - r1 * std::exp(-r2 * x)) / (r2 - r1);
    EXPECT_NEAR(two_rate_cdf(r1, r2, x), conv, 1e-14);
    EXPECT_EQ(two_rate_cdf(r1, r2, x), two_rate_cdf(r2, r1, x));
    EXPECT_NEAR(two_rate_cdf(1.5, 1.5, x), gamma_cdf(2.0, 1.5, x), 1e-14);
    EXPECT_NEAR(two_rate_cdf(1.5, 1.5 + 1e-9, x), gamma_cdf(2.0, 1.5, x), 1e-9);
  }
}

TEST(ReferenceCdf, FormsAndErrors)
{
  const ReferenceCdf one(exponentials({2.0, std::numeric_limits<double>::infinity()}));
  EXPECT_NEAR(one(1.0), -std::expm1(-2.0), 1e-15);
  const ReferenceCdf atom(LimitLawDescriptor::simple(LawForm::point_mass_zero, "test"));
  EXPECT_EQ(atom(0.0), 1.0);
  EXPECT_EQ(atom.left(0.0), 0.0);
  expect_error(ErrorCode::no_cdf, [] { ReferenceCdf(LimitLawDescriptor::simple(LawForm::explosion, "test")); });
  expect_error(ErrorCode::no_cdf, [] { ReferenceCdf(LimitLawDescriptor::simple(LawForm::numeric_laplace, "test")); });
  expect_error(ErrorCode::no_cdf, [] { ReferenceCdf(exponentials({1, 2, 3})); });
}

TEST(KsWeighted, ExactSamplesPassAndWrongLawFails)
{
  Xoshiro256 g(9, 0);
  Samplers S;
  const std::size_t n = 50000;
  std::vector<double> x(n), w(n, 1.0);
  for (auto& v : x) v = S.gamma(g, 2.0) / 1.5;
  const double thr = 1.95 / std::sqrt(double(n));
  EXPECT_TRUE(ks_weighted(x, w, LimitLawDescriptor::gamma(2.0, 1.5, "test"), thr).pass);
  EXPECT_TRUE(ks_weighted(x, w, exponentials({1.5, 1.5}), thr).pass);
  EXPECT_FALSE(ks_weighted(x, w, LimitLawDescriptor::gamma(2.0, 1.5 * 1.1, "test"), thr).pass);

  std::vector<double> y(n);
  for (auto& v : y) v = S.exponential(g) / 1.0 + S.exponential(g) / 3.0;
  EXPECT_TRUE(ks_weighted(y, w, exponentials({1.0, 3.0}), thr).pass);
}

TEST(KsWeighted, WeightScaleInvarianceAndDuplication)
{
  const std::vector<double> x{0.2, 0.9, 1.4, 3.0, 0.05};
  const std::vector<double> w{1, 2, 1, 3, 1};
  std::vector<double> w7(w), xd;
  for (auto& v : w7) v *= 7;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int r = 0; r < w[i]; ++r) xd.push_back(x[i]);
  const auto law = LimitLawDescriptor::gamma(1.0, 1.0, "test");
  const double a = ks_weighted(x, w, law, 1).statistic;
  EXPECT_NEAR(a, ks_weighted(x, w7, law, 1).statistic, 1e-15);
  EXPECT_NEAR(a, ks_weighted(xd, std::vector<double>(xd.size(), 1.0), law, 1).statistic, 1e-15);
  EXPECT_NEAR(ks_weighted(x, w, law, 1).n_effective, 64.0 / 16.0, 1e-15);
}

TEST(KsWeighted, PointMassAtZero)
{
  const std::vector<double> zeros(10, 0.0), ones(10, 1.0);
  EXPECT_EQ(ks_weighted(zeros, ones, LimitLawDescriptor::simple(LawForm::point_mass_zero, "test"), 0.0).statistic, 0.0);
  std::vector<double> mixed = zeros;
  mixed[0] = 1.0;
  EXPECT_NEAR(ks_weighted(mixed, ones, LimitLawDescriptor::simple(LawForm::point_mass_zero, "test"), 0.0).statistic, 0.1,
              1e-15);
  expect_error(ErrorCode::empty_ensemble, [] { ks_weighted({}, {}, LimitLawDescriptor::gamma(1, 1, "test"), 0.1); });
}

TEST(KsTwoSample, BasicValues)
{
  const std::vector<double> a{1, 2, 3}, b{4, 5}, one3(3, 1.0), one2(2, 1.0);
  EXPECT_EQ(ks_two_sample(a, one3, a, one3), 0.0);
  EXPECT_EQ(ks_two_sample(a, one3, b, one2), 1.0);
  EXPECT_NEAR(ks_two_sample(a, one3, {2.5}, {1.0}), 2.0 / 3, 1e-15);
}

TEST(TailProbability, MonitorAndMonotonicity)
{
  const auto model = validate_model(Matrix::Constant(1, 1, 0.0), 2.0);
  SimulationOptions o;
  o.dt = 0.5;
  o.threads = 1;
  o.record_times = {1, 2, 4, 8};
  auto ens = simulate(model, vec({1}), 8.0, 2000, 5, o);
  const auto rows = explosion_monitor(ens, {1, 2, 4, 8}, 0, 0.5);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    const Matrix X = ens.states_at(r.t);
    EXPECT_NEAR(r.probability, double((X.array() <= 0.5).count()) / X.rows(), 1e-15);
    EXPECT_GT(r.se, 0.0);
  }
  EXPECT_TRUE(strictly_decreasing({{1, 0.9, 0}, {2, 0.5, 0}, {3, 0.1, 0}}));
  EXPECT_FALSE(strictly_decreasing({{1, 0.9, 0}, {2, 0.9, 0}}));
  EXPECT_NEAR(n_effective(vec({1, 1, 2})), 16.0 / 6.0, 1e-15);
  EXPECT_EQ(n_effective(vec({0, 0})), 0.0);
}
