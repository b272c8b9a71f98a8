#include <random>

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "fellerlab/families.hpp"
#include "fellerlab/spectral.hpp"

using namespace fellerlab;

namespace {

Matrix mat2(double a, double b, double c, double d)
{
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

Vector vec2(double a, double b)
{
  Vector v(2);
  v << a, b;
  return v;
}

// Random Metzler matrix shifted so that its Perron root is exactly `mu`.
Matrix random_metzler(std::mt19937_64& rng, int k, double mu, bool irreducible)
{
  std::uniform_real_distribution<double> U(0.0, 1.0);
  Matrix A(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) A(i, j) = i == j ? -2 * U(rng) : (irreducible || j > i ? U(rng) : 0.0);
  const auto ev = detail::eigenvalues(A);
  const double top = ev(detail::argmax_real(ev)).real();
  return A - (top - mu) * Matrix::Identity(k, k);
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

}  // namespace

TEST(Perron, CriticalCpMatrix)
{
  const auto sp = perron(validate_model(mat2(-1, 1, 0, 0), 2.0));
  EXPECT_EQ(sp.mu, 0.0);
  EXPECT_NEAR(sp.xi(0), 0.5, 1e-12);
  EXPECT_NEAR(sp.xi(1), 0.5, 1e-12);
  EXPECT_NEAR(sp.eta(0), 0.0, 1e-12);
  EXPECT_NEAR(sp.eta(1), 2.0, 1e-12);
  EXPECT_FALSE(sp.irreducible);
}

TEST(Perron, WeakSecondType)
{
  // alpha = 1, beta = 1/2: xi = (alpha; alpha - beta) / (2 alpha - beta), eta = (0; (2 alpha - beta) / (alpha - beta)).
  const auto sp = perron(validate_model(mat2(-1, 1, 0, -0.5), 2.0));
  EXPECT_NEAR(sp.mu, -0.5, 1e-12);
  EXPECT_NEAR((sp.xi - vec2(2.0 / 3, 1.0 / 3)).cwiseAbs().maxCoeff(), 0, 1e-12);
  EXPECT_NEAR((sp.eta - vec2(0, 3)).cwiseAbs().maxCoeff(), 0, 1e-12);
}

TEST(Perron, DominantFirstType)
{
  const auto sp = perron(validate_model(mat2(-2, 2, 0, -3), 2.0));
  EXPECT_NEAR(sp.mu, -2.0, 1e-12);
  EXPECT_NEAR((sp.xi - vec2(1, 0)).cwiseAbs().maxCoeff(), 0, 1e-12);
  EXPECT_NEAR(sp.xi.dot(sp.eta), 1.0, 1e-12);
}

TEST(Perron, SymmetricIrreducible)
{
  const auto model = validate_model(mat2(-1, 0.5, 0.5, -1), 1.0);
  const auto sp = perron(model);
  EXPECT_NEAR(sp.mu, -0.5, 1e-14);
  EXPECT_NEAR(sp.gamma, 1.0, 1e-12);
  EXPECT_TRUE(sp.irreducible);
  EXPECT_NEAR((sp.eta - vec2(1, 1)).cwiseAbs().maxCoeff(), 0, 1e-12);
}

TEST(Perron, Monotype)
{
  const auto sp = perron(validate_model(Matrix::Constant(1, 1, -0.3), 1.0));
  EXPECT_DOUBLE_EQ(sp.mu, -0.3);
  EXPECT_DOUBLE_EQ(sp.xi(0), 1.0);
  EXPECT_DOUBLE_EQ(sp.eta(0), 1.0);
}

TEST(Perron, RandomMetzlerProperties)
{
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + trial % 4;
    const bool irr = trial % 2 == 0;
    const double mu = trial % 3 == 0 ? 0.0 : -0.1 - 0.01 * trial;
    const Matrix D = random_metzler(rng, k, mu, irr);
    const auto model = validate_model(D, 1.0);
    const auto sp = perron(model);
    EXPECT_LE((D * sp.xi - sp.mu * sp.xi).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((D.transpose() * sp.eta - sp.mu * sp.eta).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(sp.xi.sum(), 1.0, 1e-12);
    EXPECT_NEAR(sp.xi.dot(sp.eta), 1.0, 1e-12);
    EXPECT_GE(sp.xi.minCoeff(), 0.0);
    EXPECT_GE(sp.eta.minCoeff(), 0.0);
    if (irr) {
      EXPECT_TRUE(sp.irreducible);
      EXPECT_GT(sp.xi.minCoeff(), 0.0);
      EXPECT_GT(sp.eta.minCoeff(), 0.0);
    }
    // P is a projector onto the Perron direction.
    EXPECT_LE((*sp.P * *sp.P - *sp.P).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(ValidateModel, RejectsBadInput)
{
  expect_error(ErrorCode::not_metzler, [] { validate_model(mat2(-1, -0.1, 0, -1), 1.0); });
  expect_error(ErrorCode::supercritical, [] { validate_model(mat2(0.1, 1, 1, 0.1), 1.0); });
  expect_error(ErrorCode::non_positive_variance, [] { validate_model(mat2(-1, 0, 0, -1), 0.0); });
  expect_error(ErrorCode::invalid_argument, [] { validate_model(Matrix(2, 3), 1.0); });
  expect_error(ErrorCode::degenerate_perron, [] { perron(validate_model(mat2(-1, 0, 0, -1), 1.0)); });
}

TEST(ValidateModel, SnapsNearCriticalToZero)
{
  const auto m = validate_model(mat2(-1, 1, 1, -1 + 1e-15), 1.0);
  EXPECT_EQ(m.criticality(), Criticality::critical);
  EXPECT_EQ(m.mu(), 0.0);
}

TEST(MatrixExp, AgreesWithPadeAndEigen)
{
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + trial % 3;
    const Matrix D = random_metzler(rng, k, -0.2 * (trial % 4), true);
    for (double t : {0.0, 0.1, 1.0, 5.0}) {
      const Matrix A = matrix_exp(D, t);
      const Matrix pade = (D * t).exp();
      const double scale = A.cwiseAbs().maxCoeff();
      EXPECT_LE((A - pade).cwiseAbs().maxCoeff(), 1e-12 * scale) << "t=" << t;
      EXPECT_LE((A - matrix_exp_eigen(D, t)).cwiseAbs().maxCoeff(), 1e-9 * scale) << "t=" << t;
    }
  }
}

TEST(MatrixExp, EntrywiseRelativeAccuracyAgainstLongDouble)
{
  // Tiny off-diagonal entries are where Pade on the unshifted matrix loses digits.
  const Matrix D = mat2(-30, 1e-6, 1e-6, -1);
  using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  for (double t : {0.5, 2.0, 10.0}) {
    const Matrix A = matrix_exp(D, t);
    const LMatrix L = matrix_exp<long double>(D.cast<long double>(), static_cast<long double>(t));
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        const double ref = static_cast<double>(L(i, j));
        EXPECT_LE(std::abs(A(i, j) - ref), 1e-13 * std::abs(ref)) << i << j << " t=" << t;
      }
  }
}

TEST(MatrixExp, NonnegativeAndSemigroup)
{
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix D = random_metzler(rng, 3, -0.1 * (trial % 5), trial % 2 == 0);
    const Matrix A = matrix_exp(D, 0.7), B = matrix_exp(D, 1.9), C = matrix_exp(D, 2.6);
    EXPECT_GE(A.minCoeff(), 0.0);
    EXPECT_LE((A * B - C).cwiseAbs().maxCoeff(), 1e-13 * std::max(1.0, C.cwiseAbs().maxCoeff()));
    EXPECT_LE((matrix_exp(D, 0.0) - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(RankOne, BoundHoldsAfterBurnIn)
{
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix D = random_metzler(rng, 3, -0.3, true);
    const auto sp = perron(validate_model(D, 1.0));
    for (double t : {1.0, 3.0, 10.0, 25.0}) {
      const auto ro = rank_one_asymptote(D, sp, t);
      if (t < ro.burn_in) continue;
      const double gap = inf_norm(matrix_exp(D, t) - ro.value);
      EXPECT_LE(gap, ro.constant * std::exp((sp.mu - sp.gamma / 2) * t) * (1 + 1e-9)) << "t=" << t;
    }
  }
}

TEST(Families, Classification)
{
  EXPECT_EQ(classify(validate_model(Matrix::Constant(1, 1, -1), 2)).family, Family::monotype);
  EXPECT_EQ(classify(validate_model(mat2(-1, .5, .5, -1), 1)).family, Family::irreducible);
  const auto cpd = classify(validate_model(cp_matrix(1, 0), 2));
  EXPECT_EQ(cpd.family, Family::cp_d);
  EXPECT_EQ(cpd.alpha, 1.0);
  const auto plus = classify(validate_model(cp_matrix(1, 2), 2));
  EXPECT_EQ(plus.family, Family::cp_d_plus);
  EXPECT_EQ(plus.beta, 2.0);
  EXPECT_EQ(classify(validate_model(mat2(-1, 0.3, 0, -2), 2)).family, Family::other);
}
