#include <gtest/gtest.h>

#include "fellerlab/laws.hpp"

using namespace fellerlab;

namespace {

Matrix mat2(double a, double b, double c, double d)
{
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
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

// Subcritical monotype, written out by hand: with q = 1 - e^{mu t} and
// a = c / (2|mu|), u = l e^{mu t} / (1 + a l q) and du/dl = e^{mu t} / (1 + a l q)^2.
struct MonotypeOracle {
  double mu, c;
  double u(double l, double t) const { return l * std::exp(mu * t) / (1 + c / (2 * -mu) * l * -std::expm1(mu * t)); }
  double du(double l, double t) const
  {
    const double d = 1 + c / (2 * -mu) * l * -std::expm1(mu * t);
    return std::exp(mu * t) / (d * d);
  }
  // E*[e^{-l x_t}] = e^{-mu t} du/dl e^{-x0 u}.
  double conditioned(double x0, double l, double t) const { return std::exp(-mu * t) * du(l, t) * std::exp(-x0 * u(l, t)); }
};

}  // namespace

TEST(HTransform, Dispatch)
{
  const auto mono = h_transform(validate_model(Matrix::Constant(1, 1, -0.4), 1.0), vec({2}), ConditioningSpec::whole());
  EXPECT_DOUBLE_EQ(mono.rate, -0.4);
  EXPECT_DOUBLE_EQ(mono.w(0), 1.0);

  const auto cpd = validate_model(cp_matrix(1, 0), 2.0);
  const auto whole = h_transform(cpd, vec({1, 1}), ConditioningSpec::whole());
  EXPECT_EQ(whole.rate, 0.0);
  EXPECT_EQ(whole.w, vec({0.5, 0.5}));
  const auto t1 = h_transform(cpd, vec({1, 1}), ConditioningSpec::type_i(0));
  EXPECT_EQ(t1.rate, -1.0);
  EXPECT_EQ(t1.w, vec({1, 0}));

  const auto dom = validate_model(cp_matrix(1, 2), 2.0);
  EXPECT_EQ(h_transform(dom, vec({0, 1}), ConditioningSpec::whole()).rate, -2.0);
  expect_error(ErrorCode::undefined_conditioning, [&] { h_transform(dom, vec({0, 1}), ConditioningSpec::type_i(0)); });
  expect_error(ErrorCode::undefined_conditioning, [&] { h_transform(cpd, vec({0, 0}), ConditioningSpec::whole()); });
  expect_error(ErrorCode::uncovered_case,
               [] { h_transform(validate_model(mat2(-1, 0.3, 0, -2), 1.0), vec({1, 1}), ConditioningSpec::whole()); });
}

TEST(LaplaceConditioned, MonotypeAgainstHandFormula)
{
  const MonotypeOracle o{-0.8, 1.5};
  const auto model = validate_model(Matrix::Constant(1, 1, o.mu), o.c);
  for (double x0 : {0.3, 2.0})
    for (double l : {0.1, 1.0, 6.0})
      for (double t : {0.2, 3.0, 15.0}) {
        const double got = laplace_conditioned(model, vec({x0}), vec({l}), t, ConditioningSpec::whole());
        EXPECT_NEAR(got, o.conditioned(x0, l, t), 1e-9 * o.conditioned(x0, l, t)) << x0 << " " << l << " " << t;
      }
}

TEST(LaplaceConditioned, ZeroLambdaIsOne)
{
  for (const auto& D : {mat2(-1, .5, .5, -1), cp_matrix(1, 0), cp_matrix(1, 2), cp_matrix(1, 0.5)}) {
    const auto model = validate_model(D, 2.0);
    for (const auto& cond : {ConditioningSpec::whole(), ConditioningSpec::type_i(0)})
      EXPECT_NEAR(laplace_conditioned(model, vec({1, 1}), vec({0, 0}), 2.0, cond), 1.0, 1e-12);
    // Finite theta divides two solver outputs, so only solver accuracy applies.
    EXPECT_NEAR(laplace_conditioned(model, vec({1, 1}), vec({0, 0}), 2.0, ConditioningSpec::whole(3.0)), 1.0, 1e-9);
  }
}

TEST(LaplaceConditioned, UnconditionedMonotype)
{
  const MonotypeOracle o{-1.0, 2.0};
  const auto model = validate_model(Matrix::Constant(1, 1, -1.0), 2.0);
  EXPECT_NEAR(laplace_unconditioned(model, vec({1.5}), vec({0.7}), 2.0), std::exp(-1.5 * o.u(0.7, 2.0)), 1e-10);
  // Extinction by t: exp(-x0 u_t^inf), u_t^inf = e^{-t} / (1 - e^{-t}) for mu = -1, c = 2.
  const double q = extinction_probability(model, vec({1.5}), 2.0).value;
  EXPECT_NEAR(q, std::exp(-1.5 * std::exp(-2.0) / -std::expm1(-2.0)), 1e-6);
}

TEST(LongtimeLaw, DispatchTable)
{
  const auto sub = longtime_law(validate_model(Matrix::Constant(1, 1, -1.0), 2.0), ConditioningSpec::whole());
  EXPECT_EQ(sub.form, LawForm::gamma);
  EXPECT_EQ(sub.shape, 2.0);
  EXPECT_EQ(sub.rate, 1.0);
  EXPECT_EQ(longtime_law(validate_model(Matrix::Zero(1, 1), 2.0), ConditioningSpec::whole()).form, LawForm::explosion);

  const auto cpd = validate_model(cp_matrix(1, 0), 2.0);
  EXPECT_EQ(longtime_law(cpd, ConditioningSpec::whole(), 0).form, LawForm::point_mass_zero);
  EXPECT_EQ(longtime_law(cpd, ConditioningSpec::whole(), 1).form, LawForm::explosion);
  EXPECT_EQ(longtime_law(cpd, ConditioningSpec::type_i(0), 0).form, LawForm::gamma);
  EXPECT_EQ(longtime_law(cpd, ConditioningSpec::type_i(0), 1).form, LawForm::explosion);

  const auto weak = validate_model(cp_matrix(1, 0.5), 2.0);
  const auto w2 = longtime_law(weak, ConditioningSpec::whole(), 1);
  EXPECT_EQ(w2.form, LawForm::gamma);
  EXPECT_EQ(w2.rate, 0.5);

  const auto dom = validate_model(cp_matrix(1, 2), 2.0);
  EXPECT_EQ(longtime_law(dom, ConditioningSpec::type_i(1), 0).rate, 1.0);
  EXPECT_EQ(longtime_law(dom, ConditioningSpec::whole(), 1, vec({0, 1})).rate, 2.0);
  expect_error(ErrorCode::invalid_argument, [&] { longtime_law(dom, ConditioningSpec::whole()); });
  expect_error(ErrorCode::uncovered_case, [&] { longtime_law(dom, ConditioningSpec::whole(2.0), 0); });
}

TEST(LongtimeLaw, GammaMatchesConditionedTransformAtLongTimes)
{
  const auto model = validate_model(cp_matrix(1, 0.5), 2.0);
  const Vector x0 = vec({1, 1});
  const auto law = longtime_law(model, ConditioningSpec::whole(), 1, x0);
  for (double l : {0.2, 1.0, 3.0})
    EXPECT_NEAR(law.laplace(l), laplace_conditioned(model, x0, vec({0, l}), 80.0, ConditioningSpec::whole()), 1e-8);
}

TEST(LongtimeLaw, IrreducibleTableIsLaplaceTransformShaped)
{
  const auto model = validate_model(mat2(-1, .5, .5, -1), 1.0);
  const auto law = longtime_law(model, ConditioningSpec::whole(), 0);
  ASSERT_EQ(law.form, LawForm::numeric_laplace);
  const auto& v = law.table.values;
  ASSERT_GT(v.size(), 10u);
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (law.table.lambdas[i](0) > law.table.lambdas[i - 1](0)) {
      EXPECT_LE(v[i], v[i - 1]);
    }
    EXPECT_GE(v[i], 0.0);
    EXPECT_LE(v[i], 1.0);
  }
}

TEST(FiniteTheta, MonotypeRatesAgainstConditionedTransform)
{
  const auto model = validate_model(Matrix::Constant(1, 1, -1.0), 2.0);
  for (double theta : {0.3, std::log(2.0), 2.0}) {
    const auto law = finite_theta_limit_law_monotype(-1.0, 2.0, theta);
    ASSERT_EQ(law.form, LawForm::product_of_exponentials);
    EXPECT_NEAR(law.rates[1], 1.0 / -std::expm1(-theta), 1e-12);
    for (double l : {0.5, 1.0, 4.0})
      EXPECT_NEAR(law.laplace(l), laplace_conditioned(model, vec({1}), vec({l}), 30.0, ConditioningSpec::whole(theta)), 1e-9);
  }
  const auto ln2 = finite_theta_limit_law_monotype(-1.0, 2.0, std::log(2.0));
  EXPECT_NEAR(ln2.rates[0], 1.0, 1e-14);
  EXPECT_NEAR(ln2.rates[1], 2.0, 1e-12);
}

TEST(IteratedLimits, MonotypeIsOneQuarterAtOne)
{
  const auto model = validate_model(Matrix::Constant(1, 1, -1.0), 2.0);
  for (double l : {0.5, 1.0, 3.0}) {
    const double exact = 1 / ((1 + l) * (1 + l));
    EXPECT_NEAR(iterated_limit_t_then_theta(model, vec({l})), exact, 1e-8);
    EXPECT_NEAR(iterated_limit_theta_then_t(model, vec({l})), exact, 1e-8);
  }
}

TEST(IteratedLimits, IrreducibleCommute)
{
  const auto model = validate_model(mat2(-1, 0.5, 0.5, -1), 1.0);
  for (const Vector& l : {vec({1, 0}), vec({0, 1}), vec({1, 1}), vec({2, 0.5})}) {
    const double a = iterated_limit_t_then_theta(model, l);
    const double b = iterated_limit_theta_then_t(model, l);
    EXPECT_NEAR(a, b, 1e-6);
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, 1.0);
  }
}

TEST(Stable, LimitAndCumulant)
{
  EXPECT_EQ(stable_limit_laplace(-1, 1, 0.5, 1), 0.125);
  // lim e^{-mu t} d/dl u_t = stable_limit_laplace; the derivative by central differences.
  for (double beta : {0.3, 0.5, 0.9})
    for (double l : {0.2, 1.0, 4.0}) {
      const double mu = -0.7, c = 1.2, t = 30 / (beta * -mu), h = 1e-5 * l;
      const double d = (stable_cumulant(mu, c, beta, l + h, t) - stable_cumulant(mu, c, beta, l - h, t)) / (2 * h);
      EXPECT_NEAR(std::exp(-mu * t) * d, stable_limit_laplace(mu, c, beta, l), 1e-7);
    }
  // Monotone in lambda and decreasing in t.
  EXPECT_LT(stable_cumulant(-0.5, 1, 0.5, 1.0, 2.0), stable_cumulant(-0.5, 1, 0.5, 2.0, 2.0));
  EXPECT_LT(stable_cumulant(0.0, 1, 0.5, 1.0, 3.0), stable_cumulant(0.0, 1, 0.5, 1.0, 2.0));
  expect_error(ErrorCode::invalid_argument, [] { stable_limit_laplace(0, 1, 0.5, 1); });
  expect_error(ErrorCode::invalid_argument, [] { stable_cumulant(-1, 1, 1.0, 1, 1); });
}
