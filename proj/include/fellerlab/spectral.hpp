#ifndef FELLERLAB_SPECTRAL_HPP
#define FELLERLAB_SPECTRAL_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"

namespace fellerlab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Criticality { critical, subcritical };

inline const char* to_string(Criticality c)
{
  return c == Criticality::critical ? "critical" : "subcritical";
}

struct SpectralTolerances {
  double eig_tol = 1e-10;
  double exp_tol = 1e-12;
};

inline double max_abs_entry(const Matrix& m)
{
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

inline double spectral_scale(const Matrix& D)
{
  return std::max(1.0, max_abs_entry(D));
}

// Validated (D, c) pair. Only validate_model builds one, so every instance is
// Metzler with c > 0 and mu <= 0.
class ModelParams {
 public:
  int k() const { return static_cast<int>(D_.rows()); }
  const Matrix& D() const { return D_; }
  double c() const { return c_; }
  double mu() const { return mu_; }
  Criticality criticality() const { return kind_; }

 private:
  ModelParams(Matrix D, double c, double mu, Criticality kind)
      : D_(std::move(D)), c_(c), mu_(mu), kind_(kind)
  {
  }

  Matrix D_;
  double c_ = 0;
  double mu_ = 0;
  Criticality kind_ = Criticality::critical;

  friend ModelParams validate_model(const Matrix& D, double c, const SpectralTolerances& tol);
};

namespace detail {

inline Eigen::VectorXcd eigenvalues(const Matrix& D)
{
  if (D.rows() == 1) {
    Eigen::VectorXcd ev(1);
    ev(0) = D(0, 0);
    return ev;
  }
  Eigen::EigenSolver<Matrix> es(D, false);
  if (es.info() != Eigen::Success) fail(ErrorCode::solver_failure, "eigenvalue iteration did not converge");
  return es.eigenvalues();
}

inline int argmax_real(const Eigen::VectorXcd& ev)
{
  int best = 0;
  for (int i = 1; i < ev.size(); ++i)
    if (ev(i).real() > ev(best).real()) best = i;
  return best;
}

// Unit vector spanning the (numerical) kernel of A.
inline Vector kernel_vector(const Matrix& A)
{
  Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeFullV);
  return svd.matrixV().col(A.cols() - 1);
}

inline void fix_sign(Vector& v)
{
  Eigen::Index i = 0;
  v.cwiseAbs().maxCoeff(&i);
  if (v(i) < 0) v = -v;
}

inline void clamp_tiny_negatives(Vector& v, double tol, const char* name)
{
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (v(i) < 0) {
      if (v(i) < -tol) fail(ErrorCode::degenerate_perron, std::string(name) + " has a negative entry");
      v(i) = 0;
    }
  }
}

}  // namespace detail

inline ModelParams validate_model(const Matrix& D, double c, const SpectralTolerances& tol = {})
{
  if (D.rows() == 0 || D.rows() != D.cols()) fail(ErrorCode::invalid_argument, "D must be a non-empty square matrix");
  if (!D.allFinite()) fail(ErrorCode::invalid_argument, "D has non-finite entries");
  if (!std::isfinite(c)) fail(ErrorCode::invalid_argument, "c is not finite");
  for (Eigen::Index i = 0; i < D.rows(); ++i)
    for (Eigen::Index j = 0; j < D.cols(); ++j)
      if (i != j && D(i, j) < 0)
        fail(ErrorCode::not_metzler, "off-diagonal entry D(" + std::to_string(i) + "," + std::to_string(j) + ") < 0");
  if (c <= 0) fail(ErrorCode::non_positive_variance, "branching variance c must be positive");

  const auto ev = detail::eigenvalues(D);
  double mu = ev(detail::argmax_real(ev)).real();
  const double snap = tol.eig_tol * spectral_scale(D);
  if (mu > snap) fail(ErrorCode::supercritical, "Perron root " + std::to_string(mu) + " > 0");
  Criticality kind = Criticality::subcritical;
  if (std::abs(mu) <= snap) {
    mu = 0.0;
    kind = Criticality::critical;
  }
  return ModelParams(D, c, mu, kind);
}

// Strong connectivity of the graph with an edge i -> j whenever D(i,j) > 0.
inline bool is_irreducible(const Matrix& D)
{
  const Eigen::Index k = D.rows();
  if (k == 1) return true;
  auto reaches_all = [&](bool transpose) {
    std::vector<char> seen(k, 0);
    std::vector<Eigen::Index> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      for (Eigen::Index j = 0; j < k; ++j) {
        const double d = transpose ? D(j, i) : D(i, j);
        if (j != i && d > 0 && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
    return std::all_of(seen.begin(), seen.end(), [](char s) { return s != 0; });
  };
  return reaches_all(false) && reaches_all(true);
}

struct SpectralData {
  double mu = 0;
  Vector xi;
  Vector eta;
  std::optional<Matrix> P;
  double gamma = 0;
  bool irreducible = false;
};

inline SpectralData perron(const ModelParams& model, const SpectralTolerances& tol = {})
{
  const Matrix& D = model.D();
  const int k = model.k();
  const double scale = spectral_scale(D);
  SpectralData out;
  out.irreducible = is_irreducible(D);

  const auto ev = detail::eigenvalues(D);
  const int top = detail::argmax_real(ev);
  const double mu = ev(top).real();
  if (std::abs(ev(top).imag()) > tol.eig_tol * scale)
    fail(ErrorCode::degenerate_perron, "eigenvalue with maximal real part is not real");
  double next = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < ev.size(); ++i) {
    if (i == top) continue;
    if (std::abs(ev(i) - ev(top)) <= tol.eig_tol * scale)
      fail(ErrorCode::degenerate_perron, "Perron eigenvalue is not simple");
    next = std::max(next, ev(i).real());
  }
  out.mu = model.mu();
  out.gamma = k == 1 ? std::numeric_limits<double>::infinity() : std::max(0.0, mu - next);

  const Matrix A = D - mu * Matrix::Identity(k, k);
  Vector xi = detail::kernel_vector(A);
  Vector eta = detail::kernel_vector(A.transpose());
  detail::fix_sign(xi);
  detail::fix_sign(eta);
  const double entry_tol = 1e-10;
  detail::clamp_tiny_negatives(xi, entry_tol, "xi");
  detail::clamp_tiny_negatives(eta, entry_tol, "eta");
  xi /= xi.sum();
  const double overlap = xi.dot(eta);
  if (overlap <= entry_tol) fail(ErrorCode::degenerate_perron, "(xi, eta) vanishes");
  eta /= overlap;

  out.xi = xi;
  out.eta = eta;
  out.P = xi * eta.transpose();
  return out;
}

namespace detail {

// e^{A} for an entrywise nonnegative A: every Taylor term and every squaring
// product is nonnegative, so there is no cancellation and each entry keeps
// its relative accuracy.
template <typename M>
M exp_nonnegative(const M& A)
{
  using Scalar = typename M::Scalar;
  const Eigen::Index k = A.rows();
  const Scalar norm = A.cwiseAbs().rowwise().sum().maxCoeff();
  int squarings = 0;
  if (norm > Scalar(0.5)) squarings = static_cast<int>(std::ceil(std::log2(static_cast<double>(norm) / 0.5)));
  const M B = A / std::ldexp(Scalar(1), squarings);

  M sum = M::Identity(k, k);
  M term = M::Identity(k, k);
  const Scalar eps = std::numeric_limits<Scalar>::epsilon();
  for (int n = 1; n < 60; ++n) {
    term = (term * B) / Scalar(n);
    sum += term;
    bool converged = true;
    for (Eigen::Index i = 0; i < k && converged; ++i)
      for (Eigen::Index j = 0; j < k; ++j)
        if (term(i, j) > eps * sum(i, j) / 4) {
          converged = false;
          break;
        }
    if (converged) break;
  }
  for (int s = 0; s < squarings; ++s) sum = (sum * sum).eval();
  return sum;
}

}  // namespace detail

// e^{Dt} for a Metzler D, computed as e^{-st} e^{(D+sI)t} with D+sI >= 0.
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> matrix_exp(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& D, Scalar t)
{
  using M = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (t < 0) fail(ErrorCode::invalid_argument, "matrix_exp needs t >= 0");
  const Eigen::Index k = D.rows();
  if (t == 0) return M::Identity(k, k);
  Scalar s = 0;
  for (Eigen::Index i = 0; i < k; ++i) s = std::max(s, -D(i, i));
  M shifted = D;
  for (Eigen::Index i = 0; i < k; ++i) shifted(i, i) += s;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j)
      if (shifted(i, j) < 0) shifted(i, j) = 0;
  M E = detail::exp_nonnegative<M>(shifted * t);
  return E * std::exp(-s * t);
}

inline Matrix matrix_exp(const Matrix& D, double t) { return matrix_exp<double>(D, t); }

// Second route through the eigendecomposition, for well-conditioned
// diagonalizable D; used to cross-check matrix_exp.
inline Matrix matrix_exp_eigen(const Matrix& D, double t)
{
  Eigen::EigenSolver<Matrix> es(D, true);
  const Eigen::MatrixXcd V = es.eigenvectors();
  const Eigen::VectorXcd lam = es.eigenvalues();
  Eigen::VectorXcd e(lam.size());
  for (Eigen::Index i = 0; i < lam.size(); ++i) e(i) = std::exp(lam(i) * t);
  const Eigen::MatrixXcd R = V * e.asDiagonal() * V.inverse();
  return R.real();
}

struct RankOneAsymptote {
  Matrix value;       // e^{mu t} P
  double constant;    // C in ||e^{Dt} - e^{mu t} P|| <= C e^{(mu - gamma/2) t}
  double burn_in;     // the bound holds for t >= burn_in
};

inline double inf_norm(const Matrix& m) { return m.cwiseAbs().rowwise().sum().maxCoeff(); }

inline RankOneAsymptote rank_one_asymptote(const Matrix& D, const SpectralData& spec, double t)
{
  if (!spec.P) fail(ErrorCode::degenerate_perron, "projector P is not available");
  const Matrix& P = *spec.P;
  const Eigen::Index k = P.rows();
  RankOneAsymptote out{std::exp(spec.mu * t) * P, 0.0, 0.0};
  if (!std::isfinite(spec.gamma)) return out;

  const double initial = inf_norm(Matrix::Identity(k, k) - P);
  out.constant = std::max(2.0 * initial, 1e-300);
  if (spec.gamma <= 0) {
    out.burn_in = std::numeric_limits<double>::infinity();
    return out;
  }
  const Matrix shifted = D - spec.mu * Matrix::Identity(k, k);
  const double h = 0.25 / spec.gamma;
  const int n = 800;
  double burn = 0;
  for (int i = 0; i <= n; ++i) {
    const double s = i * h;
    const double r = inf_norm(matrix_exp(shifted, s) - P) * std::exp(0.5 * spec.gamma * s);
    if (r > out.constant) burn = s + h;
  }
  out.burn_in = burn;
  return out;
}

}  // namespace fellerlab

#endif  // FELLERLAB_SPECTRAL_HPP
