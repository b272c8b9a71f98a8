#ifndef FELLERLAB_LAWS_HPP
#define FELLERLAB_LAWS_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cumulant.hpp"
#include "families.hpp"
#include "spectral.hpp"

namespace fellerlab {

enum class ConditionKind { whole_population, type_survival };

struct ConditioningSpec {
  ConditionKind kind = ConditionKind::whole_population;
  int type = 0;  // zero-based, used when kind == type_survival
  double theta = std::numeric_limits<double>::infinity();

  static ConditioningSpec whole(double theta = std::numeric_limits<double>::infinity())
  {
    return {ConditionKind::whole_population, 0, theta};
  }

  static ConditioningSpec type_i(int i, double theta = std::numeric_limits<double>::infinity())
  {
    return {ConditionKind::type_survival, i, theta};
  }

  bool remote() const { return std::isinf(theta); }

  std::vector<bool> mask(int k) const
  {
    if (kind == ConditionKind::whole_population) return std::vector<bool>(k, true);
    std::vector<bool> m(k, false);
    m[type] = true;
    return m;
  }

  void check(int k) const
  {
    if (!(theta > 0)) fail(ErrorCode::invalid_argument, "conditioning horizon theta must be > 0");
    if (kind == ConditionKind::type_survival && (type < 0 || type >= k))
      fail(ErrorCode::invalid_argument, "conditioning type out of range");
  }

  std::string label() const
  {
    std::string s = kind == ConditionKind::whole_population ? "whole" : "type" + std::to_string(type + 1);
    return s;
  }
};

// Density of the remote-survival law on F_t: e^{-rate t} (x_t, w) / (x_0, w).
struct HTransform {
  Vector w;
  double rate = 0;
  std::string provenance;
};

inline HTransform h_transform(const ModelParams& model, const Vector& x0, const ConditioningSpec& cond)
{
  const int k = model.k();
  cond.check(k);
  if (x0.size() != k) fail(ErrorCode::invalid_argument, "x0 has the wrong length");
  if ((x0.array() < 0).any() || !x0.allFinite()) fail(ErrorCode::invalid_argument, "x0 must be finite and >= 0");
  if ((x0.array() == 0).all()) fail(ErrorCode::undefined_conditioning, "null initial mass never survives");

  const FamilyInfo fam = classify(model);
  HTransform h;
  const bool type1 = cond.kind == ConditionKind::type_survival && cond.type == 0;
  auto e = [](int i) {
    Vector v = Vector::Zero(2);
    v(i) = 1;
    return v;
  };
  switch (fam.family) {
    case Family::monotype:
    case Family::irreducible: {
      const SpectralData sp = perron(model);
      h = {sp.xi, sp.mu, fam.family == Family::monotype ? "monotype-remote-survival" : "irreducible-remote-survival"};
      break;
    }
    case Family::cp_d:
      if (type1)
        h = {e(0), -fam.alpha, "cp-d-type1-survival"};
      else
        h = {Vector::Constant(2, 0.5), 0.0, "cp-d-whole-or-type2-survival"};
      break;
    case Family::cp_d_plus:
      if (fam.beta < fam.alpha) {
        if (type1) {
          h = {e(0), -fam.alpha, "cp-d-plus-weak-second-type1-survival"};
        } else {
          Vector xi(2);
          xi << fam.alpha, fam.alpha - fam.beta;
          xi /= 2 * fam.alpha - fam.beta;
          h = {xi, -fam.beta, "cp-d-plus-weak-second-whole-or-type2-survival"};
        }
      } else if (x0(0) > 0) {
        h = {e(0), -fam.alpha, "cp-d-plus-dominant-first-any-survival"};
      } else {
        if (type1) fail(ErrorCode::undefined_conditioning, "type-1 survival is not defined when the first type starts empty");
        h = {e(1), -fam.beta, "cp-d-plus-dominant-first-empty-first-type"};
      }
      break;
    case Family::other:
      fail(ErrorCode::uncovered_case, "no conditioning dispatch for this mutation matrix");
  }
  if (x0.dot(h.w) <= 0)
    fail(ErrorCode::undefined_conditioning, "initial mass has no component on the conditioned types");
  return h;
}

inline double laplace_unconditioned(const ModelParams& model, const Vector& x0, const Vector& lambda, double t,
                                    const SolverConfig& cfg = {})
{
  if (x0.size() != model.k() || (x0.array() < 0).any()) fail(ErrorCode::invalid_argument, "x0 must be >= 0 with length k");
  if (t < 0) fail(ErrorCode::invalid_argument, "t must be >= 0");
  if (x0.isZero()) return 1.0;
  const auto tr = solve_u(model, LambdaSpec::finite(lambda), {t}, cfg);
  return std::exp(-x0.dot(tr.u.back()));
}

struct ExtinctionProbability {
  double value = 1;
  bool degenerate = false;  // null initial mass
};

inline ExtinctionProbability extinction_probability(const ModelParams& model, const Vector& x0, double t,
                                                    const SolverConfig& cfg = {})
{
  if (!(t > 0)) fail(ErrorCode::invalid_argument, "extinction probability needs t > 0");
  if (x0.size() != model.k() || (x0.array() < 0).any()) fail(ErrorCode::invalid_argument, "x0 must be >= 0 with length k");
  if (x0.isZero()) return {1.0, true};
  const Vector u = u_at_infinite_lambda(model, t, std::vector<bool>(model.k(), true), Vector::Zero(model.k()), cfg);
  return {std::exp(-x0.dot(u)), false};
}

namespace detail {

// e^{-rate t} v_t^lambda (v_0 = w) and u_t^lambda at a single time.
inline std::pair<Vector, Vector> scaled_v_at(const ModelParams& model, const Vector& lambda, const Vector& w, double rate,
                                             double t, const SolverConfig& cfg)
{
  const int k = model.k();
  const double su = model.mu();
  const std::vector<Block> blocks{{BlockKind::linear, rate, true}};
  const Vector atol = stack({Vector::Constant(k, cfg.ode.atol), atol_like(w, cfg.ode.atol)});
  auto r = flow(model, su, blocks, stack({lambda, w}), atol, 0.0, {t}, cfg.ode);
  const Vector& y = r.scaled.back();
  return {y.tail(k), y.head(k) * std::exp(su * r.tau.back())};
}

}  // namespace detail

inline double laplace_conditioned(const ModelParams& model, const Vector& x0, const Vector& lambda, double t,
                                  const ConditioningSpec& cond, const SolverConfig& cfg = {})
{
  LambdaSpec::finite(lambda);
  if (t < 0) fail(ErrorCode::invalid_argument, "t must be >= 0");
  const int k = model.k();
  // The dispatch validates x0 and the conditioning in both regimes.
  const HTransform h = h_transform(model, x0, cond);
  if (cond.remote()) {
    const auto [vs, u] = detail::scaled_v_at(model, lambda, h.w, h.rate, t, cfg);
    return x0.dot(vs) / x0.dot(h.w) * std::exp(-x0.dot(u));
  }
  const Vector delta = u_at_infinite_lambda(model, cond.theta, cond.mask(k), Vector::Zero(k), cfg);
  const auto diff = solve_difference(model, lambda, delta, {t}, cfg);
  const double num = std::exp(-x0.dot(diff.u.back())) * -std::expm1(-x0.dot(diff.w.back()));
  const auto tail = solve_u(model, LambdaSpec::finite(delta), {t}, cfg);
  const double den = -std::expm1(-x0.dot(tail.u.back()));
  if (!(den > 0)) fail(ErrorCode::zero_denominator, "survival probability underflows");
  return num / den;
}

// ---------------------------------------------------------------------------
// Limit laws

enum class LawForm { gamma, product_of_exponentials, point_mass_zero, explosion, numeric_laplace };

inline const char* to_string(LawForm f)
{
  switch (f) {
    case LawForm::gamma: return "gamma";
    case LawForm::product_of_exponentials: return "product_of_exponentials";
    case LawForm::point_mass_zero: return "point_mass_zero";
    case LawForm::explosion: return "explosion";
    case LawForm::numeric_laplace: return "numeric_laplace";
  }
  return "unknown";
}

struct LaplaceTable {
  std::vector<Vector> lambdas;
  std::vector<double> values;
  double horizon = 0;  // largest stabilization horizon used
};

struct LimitLawDescriptor {
  LawForm form = LawForm::point_mass_zero;
  double shape = 0;
  double rate = 0;
  std::vector<double> rates;
  LaplaceTable table;
  std::string provenance;
  bool degenerate = false;

  static LimitLawDescriptor gamma(double shape, double rate, std::string prov)
  {
    if (!(shape > 0) || !(rate > 0)) fail(ErrorCode::invalid_argument, "gamma shape and rate must be > 0");
    LimitLawDescriptor d;
    d.form = LawForm::gamma;
    d.shape = shape;
    d.rate = rate;
    d.provenance = std::move(prov);
    return d;
  }

  static LimitLawDescriptor simple(LawForm form, std::string prov)
  {
    LimitLawDescriptor d;
    d.form = form;
    d.provenance = std::move(prov);
    return d;
  }

  // Laplace transform at a scalar argument for one-dimensional laws.
  double laplace(double lambda) const
  {
    switch (form) {
      case LawForm::gamma: return std::pow(1 + lambda / rate, -shape);
      case LawForm::product_of_exponentials: {
        double v = 1;
        for (double r : rates) v *= std::isinf(r) ? 1.0 : r / (r + lambda);
        return v;
      }
      case LawForm::point_mass_zero: return 1.0;
      case LawForm::explosion: return lambda == 0 ? 1.0 : 0.0;
      case LawForm::numeric_laplace: fail(ErrorCode::invalid_argument, "numeric tables are evaluated on their grid only");
    }
    return 0;
  }
};

namespace detail {

inline std::vector<double> log_grid(double lo, double hi, int n)
{
  std::vector<double> g(n);
  for (int i = 0; i < n; ++i) g[i] = lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
  return g;
}

inline LaplaceTable limit_table(const ModelParams& model, const HTransform& h, const Vector& x0,
                                const std::vector<int>& coords, const SolverConfig& cfg)
{
  LaplaceTable tab;
  const int k = model.k();
  tab.lambdas.push_back(Vector::Zero(k));
  tab.values.push_back(1.0);
  for (int i : coords) {
    for (double s : log_grid(1e-3, 1e3, 64)) {
      Vector lam = Vector::Zero(k);
      lam(i) = s;
      const auto r = tilde_v_infinity_report(model, lam, h.w, h.rate, cfg);
      tab.lambdas.push_back(lam);
      tab.values.push_back(x0.dot(r.value) / x0.dot(h.w));
      tab.horizon = std::max(tab.horizon, r.horizon);
    }
  }
  return tab;
}

}  // namespace detail

// Long-time law of x_t (or of its type-i marginal) under the conditioned law.
inline LimitLawDescriptor longtime_law(const ModelParams& model, const ConditioningSpec& cond,
                                       std::optional<int> which_type = std::nullopt,
                                       std::optional<Vector> x0_opt = std::nullopt, const SolverConfig& cfg = {})
{
  const int k = model.k();
  cond.check(k);
  if (!cond.remote()) fail(ErrorCode::uncovered_case, "long-time laws are tabulated for remote survival only");
  if (which_type && (*which_type < 0 || *which_type >= k)) fail(ErrorCode::invalid_argument, "which_type out of range");
  const Vector x0 = x0_opt ? *x0_opt : Vector::Ones(k);
  const FamilyInfo fam = classify(model);
  const double c = model.c();
  using L = LimitLawDescriptor;

  switch (fam.family) {
    case Family::monotype:
      if (model.mu() == 0) return L::simple(LawForm::explosion, "critical-monotype-explosion");
      return L::gamma(2, 2 * std::abs(model.mu()) / c, "subcritical-monotype-size-biased-yaglom");
    case Family::irreducible: {
      if (model.mu() == 0) return L::simple(LawForm::explosion, "critical-irreducible-explosion");
      const HTransform h = h_transform(model, x0, cond);
      L d = L::simple(LawForm::numeric_laplace, "irreducible-subcritical-limit-laplace-table");
      std::vector<int> coords;
      if (which_type)
        coords.push_back(*which_type);
      else
        for (int i = 0; i < k; ++i) coords.push_back(i);
      d.table = detail::limit_table(model, h, x0, coords, cfg);
      return d;
    }
    case Family::cp_d:
    case Family::cp_d_plus: {
      if (!which_type) fail(ErrorCode::invalid_argument, "decomposable models need which_type");
      const int i = *which_type;
      const bool type1 = cond.kind == ConditionKind::type_survival && cond.type == 0;
      const double a = fam.alpha, b = fam.beta;
      if (fam.family == Family::cp_d || b < a) {
        if (type1) {
          if (x0(0) <= 0) fail(ErrorCode::undefined_conditioning, "type-1 survival needs initial type-1 mass");
          if (i == 0) return L::gamma(2, 2 * a / c, "decomposable-type1-survival-first-type");
          return L::simple(LawForm::explosion, "decomposable-type1-survival-second-type-explodes");
        }
        if (i == 0) return L::simple(LawForm::point_mass_zero, "decomposable-first-type-vanishes");
        if (fam.family == Family::cp_d) return L::simple(LawForm::explosion, "critical-second-type-explodes");
        return L::gamma(2, 2 * b / c, "weak-second-type-size-biased-yaglom");
      }
      // alpha <= beta
      if (x0(0) > 0) {
        if (i == 0) return L::gamma(2, 2 * a / c, "dominant-first-type-size-biased-yaglom");
        const HTransform h = h_transform(model, x0, cond);
        L d = L::simple(LawForm::numeric_laplace, "dominant-first-type-second-marginal-table");
        d.table = detail::limit_table(model, h, x0, {1}, cfg);
        return d;
      }
      if (type1) fail(ErrorCode::undefined_conditioning, "type-1 survival is not defined when the first type starts empty");
      if (i == 0) return L::simple(LawForm::point_mass_zero, "first-type-absent");
      return L::gamma(2, 2 * b / c, "second-type-alone-size-biased-yaglom");
    }
    case Family::other: break;
  }
  fail(ErrorCode::uncovered_case, "no long-time law for this mutation matrix");
}

// Limit law of x_t given survival at t + theta, monotype subcritical.
inline LimitLawDescriptor finite_theta_limit_law_monotype(double mu, double c, double theta)
{
  if (!(mu < 0) || !(c > 0) || !(theta > 0)) fail(ErrorCode::invalid_argument, "needs mu < 0, c > 0, theta > 0");
  const double r = 2 * std::abs(mu) / c;
  const double survive = -std::expm1(mu * theta);
  LimitLawDescriptor d;
  d.form = LawForm::product_of_exponentials;
  d.rates = {r, r / survive};
  d.degenerate = !(survive > 1e-12);
  d.provenance = "monotype-finite-horizon-survival";
  return d;
}

// ---------------------------------------------------------------------------
// Iterated limits

inline double iterated_limit_t_then_theta(const ModelParams& model, const Vector& lambda,
                                          const ConditioningSpec& cond = ConditioningSpec::whole(),
                                          std::optional<Vector> x0_opt = std::nullopt, const SolverConfig& cfg = {})
{
  LambdaSpec::finite(lambda);
  if (lambda.isZero()) return 1.0;
  const int k = model.k();
  const Vector x0 = x0_opt ? *x0_opt : Vector::Ones(k);
  const FamilyInfo fam = classify(model);
  if (model.mu() == 0 && (fam.family == Family::monotype || fam.family == Family::irreducible))
    fail(ErrorCode::critical_model, "critical models have no normalized long-time limit");
  const HTransform h = h_transform(model, x0, cond);
  if (fam.family == Family::cp_d && h.rate == 0) fail(ErrorCode::uncovered_case, "second type explodes");
  const Vector vt = tilde_v_infinity(model, lambda, h.w, h.rate, cfg);
  if (fam.family == Family::monotype || fam.family == Family::irreducible) return vt.sum();
  return x0.dot(vt) / x0.dot(h.w);
}

namespace detail {

// lim_t e^{-rate t} (w_t) for the difference system started at (lambda, delta).
inline Vector tilde_difference(const ModelParams& model, const Vector& lambda, const Vector& delta, double rate,
                               const SolverConfig& cfg)
{
  const int k = model.k();
  const double su = model.mu();
  const std::vector<Block> blocks{{BlockKind::difference, rate, true}};
  const Vector atol = stack({Vector::Constant(k, cfg.ode.atol), atol_like(delta, cfg.ode.atol)});
  return stabilize(model, su, blocks, stack({lambda, delta}), atol, initial_horizon(rate), cfg,
                   [k](const Vector& y, double) { return Vector(y.tail(k)); }, "difference limit")
      .value;
}

// lim_t (x0, u^{lambda+delta}_t - u^lambda_t) / (x0, u^delta_t).
inline double ratio_limit(const ModelParams& model, const Vector& x0, const Vector& lambda, const Vector& delta,
                          double rate, const SolverConfig& cfg)
{
  const int k = model.k();
  const double su = model.mu();
  const std::vector<Block> blocks{{BlockKind::difference, rate, true}, {BlockKind::riccati, rate, true}};
  const Vector a = atol_like(delta, cfg.ode.atol);
  const Vector atol = stack({Vector::Constant(k, cfg.ode.atol), a, a});
  auto pick = [&](const Vector& y, double) {
    const double den = x0.dot(y.segment(2 * k, k));
    return Vector::Constant(1, den > 0 ? x0.dot(y.segment(k, k)) / den : 0.0);
  };
  return stabilize(model, su, blocks, stack({lambda, delta, delta}), atol, initial_horizon(rate), cfg, pick,
                   "conditioned ratio")
      .value(0);
}

}  // namespace detail

inline double iterated_limit_theta_then_t(const ModelParams& model, const Vector& lambda,
                                          const ConditioningSpec& cond = ConditioningSpec::whole(),
                                          std::optional<Vector> x0_opt = std::nullopt, const SolverConfig& cfg = {})
{
  LambdaSpec::finite(lambda);
  if (lambda.isZero()) return 1.0;
  const int k = model.k();
  const double mu = model.mu();
  const FamilyInfo fam = classify(model);
  const Vector x0 = x0_opt ? *x0_opt : Vector::Ones(k);
  const bool generic = fam.family == Family::monotype || fam.family == Family::irreducible;
  if (mu == 0 && generic) fail(ErrorCode::critical_model, "critical models have no normalized long-time limit");
  const HTransform h = h_transform(model, x0, cond);
  if (fam.family == Family::cp_d && h.rate == 0) fail(ErrorCode::uncovered_case, "second type explodes");

  double denom = 0;
  if (generic) denom = tilde_u_infinity(model, LambdaSpec::all_infinite(k), cfg).sum();

  const std::vector<bool> mask = cond.mask(k);
  double theta = detail::initial_horizon(h.rate);
  std::optional<double> prev;
  double change = 0;
  for (int d = 0; d <= cfg.max_doublings; ++d, theta *= 2) {
    const Vector delta = u_at_infinite_lambda(model, theta, mask, Vector::Zero(k), cfg);
    double cur;
    if (generic)
      cur = std::exp(-mu * theta) * detail::tilde_difference(model, lambda, delta, mu, cfg).sum() / denom;
    else
      cur = detail::ratio_limit(model, x0, lambda, delta, h.rate, cfg);
    if (prev) {
      change = std::abs(cur - *prev) / std::max(std::abs(cur), 1e-300);
      if (change < cfg.stabilization_tol) return cur;
    }
    prev = cur;
  }
  fail(ErrorCode::not_stabilized, "theta limit did not stabilize (relative change " + std::to_string(change) + ")");
}

// ---------------------------------------------------------------------------
// Stable branching mechanism du/dt = mu u - c u^{1+beta}

inline double stable_cumulant(double mu, double c, double beta, double lambda, double t)
{
  if (!(mu <= 0) || !(c > 0) || !(beta > 0 && beta < 1) || !(lambda >= 0) || !(t >= 0))
    fail(ErrorCode::invalid_argument, "stable_cumulant needs mu <= 0, c > 0, beta in (0,1), lambda >= 0, t >= 0");
  if (lambda == 0) return 0;
  const double lb = std::pow(lambda, beta);
  if (mu == 0) return lambda / std::pow(1 + beta * c * lb * t, 1 / beta);
  return lambda * std::exp(mu * t) / std::pow(1 + c * lb / std::abs(mu) * (-std::expm1(beta * mu * t)), 1 / beta);
}

inline double stable_limit_laplace(double mu, double c, double beta, double lambda)
{
  if (!(mu < 0) || !(c > 0) || !(beta > 0 && beta < 1) || !(lambda >= 0))
    fail(ErrorCode::invalid_argument, "stable_limit_laplace needs mu < 0, c > 0, beta in (0,1), lambda >= 0");
  return std::pow(1 + c / std::abs(mu) * std::pow(lambda, beta), -(1 + 1 / beta));
}

}  // namespace fellerlab

#endif  // FELLERLAB_LAWS_HPP
