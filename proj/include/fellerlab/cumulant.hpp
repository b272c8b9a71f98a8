#ifndef FELLERLAB_CUMULANT_HPP
#define FELLERLAB_CUMULANT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "families.hpp"
#include "ode.hpp"
#include "spectral.hpp"

namespace fellerlab {

// Laplace argument with per-coordinate "infinite" flags. Infinite entries
// stand for the monotone limit of the cumulant as that coordinate grows.
struct LambdaSpec {
  Vector values;
  std::vector<bool> infinite;

  static LambdaSpec finite(const Vector& v)
  {
    LambdaSpec s{v, std::vector<bool>(static_cast<std::size_t>(v.size()), false)};
    s.check();
    return s;
  }

  static LambdaSpec with_infinite(const Vector& finite_part, const std::vector<bool>& mask)
  {
    if (mask.size() != static_cast<std::size_t>(finite_part.size()))
      fail(ErrorCode::invalid_argument, "mask and finite part differ in length");
    LambdaSpec s{finite_part, mask};
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) s.values(static_cast<Eigen::Index>(i)) = 0;
    s.check();
    return s;
  }

  static LambdaSpec all_infinite(int k) { return with_infinite(Vector::Zero(k), std::vector<bool>(k, true)); }

  int k() const { return static_cast<int>(values.size()); }

  bool has_infinite() const { return std::find(infinite.begin(), infinite.end(), true) != infinite.end(); }

  bool is_zero() const { return !has_infinite() && (values.array() == 0).all(); }

  void check() const
  {
    for (Eigen::Index i = 0; i < values.size(); ++i)
      if (!std::isfinite(values(i)) || values(i) < 0)
        fail(ErrorCode::invalid_argument, "lambda entries must be finite and >= 0 (use the infinite mask for +inf)");
  }
};

struct SolverConfig {
  OdeOptions ode{};
  std::vector<double> ladder{1e2, 1e4, 1e6, 1e8};
  double ladder_tol = 1e-6;
  double stabilization_tol = 1e-8;
  int max_doublings = 6;
  double collinearity_tol = 1e-6;
};

struct CumulantTrajectory {
  std::vector<double> times;
  std::vector<Vector> u;
  std::vector<Vector> v;
  LambdaSpec initial_lambda;
  std::optional<Vector> initial_v;
  OdeStats solver_stats;

  void write_csv(std::ostream& os) const
  {
    const int k = initial_lambda.k();
    os << "t";
    for (int i = 1; i <= k; ++i) os << ",u_" << i;
    if (!v.empty())
      for (int i = 1; i <= k; ++i) os << ",v_" << i;
    os << '\n';
    char buf[64];
    auto put = [&](double x) {
      std::snprintf(buf, sizeof buf, "%.17g", x);
      os << buf;
    };
    for (std::size_t j = 0; j < times.size(); ++j) {
      put(times[j]);
      for (int i = 0; i < k; ++i) {
        os << ',';
        put(u[j](i));
      }
      if (!v.empty())
        for (int i = 0; i < k; ++i) {
          os << ',';
          put(v[j](i));
        }
      os << '\n';
    }
  }
};

enum class BlockKind { linear, difference, riccati };

namespace detail {

struct Block {
  BlockKind kind;
  double rate;      // scaled variable is e^{-rate tau} times the original
  bool nonnegative;
};

// State layout: [u | block_1 | block_2 | ...], each of length k. Every block is
// stored scaled by its own exponential rate so that slowly decaying solutions
// keep O(1) magnitudes over long horizons.
struct CumulantRhs {
  Matrix D;
  double c;
  double su;
  std::vector<Block> blocks;

  void operator()(double tau, const Vector& y, Vector& dy) const
  {
    const Eigen::Index k = D.rows();
    dy.resize(y.size());
    const double gu = std::exp(su * tau);
    const auto u = y.head(k);
    dy.head(k) = D * u - su * u - 0.5 * c * gu * u.cwiseProduct(u);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto z = y.segment(k * (b + 1), k);
      auto dz = dy.segment(k * (b + 1), k);
      const double s = blocks[b].rate;
      switch (blocks[b].kind) {
        case BlockKind::linear:
          dz = D * z - s * z - c * gu * u.cwiseProduct(z);
          break;
        case BlockKind::difference:
          dz = D * z - s * z - 0.5 * c * (std::exp(s * tau) * z.cwiseProduct(z) + 2.0 * gu * u.cwiseProduct(z));
          break;
        case BlockKind::riccati:
          dz = D * z - s * z - 0.5 * c * std::exp(s * tau) * z.cwiseProduct(z);
          break;
      }
    }
  }
};

struct FlowResult {
  std::vector<Vector> scaled;  // per output time
  std::vector<double> tau;     // output time minus t0
  OdeStats stats;
};

// Integrates the block system from unscaled state y0 at t0 and reports the
// scaled state at each requested time (all >= t0, nondecreasing).
inline FlowResult flow(const ModelParams& m, double su, const std::vector<Block>& blocks, const Vector& y0,
                       const Vector& atol, double t0, const std::vector<double>& times, const OdeOptions& opt)
{
  const int k = m.k();
  CumulantRhs rhs{m.D(), m.c(), su, blocks};
  std::vector<char> nonneg(static_cast<std::size_t>(y0.size()), 1);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (int i = 0; i < k; ++i) nonneg[k * (b + 1) + i] = blocks[b].nonnegative ? 1 : 0;

  DormandPrince<CumulantRhs> solver(rhs, opt, atol);
  auto post = [&](Vector& y, const Vector& tol) {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (!std::isfinite(y(i))) return false;
      if (nonneg[i] && y(i) < 0) {
        if (y(i) < -10.0 * tol(i)) return false;
        y(i) = 0;
      }
    }
    return true;
  };

  FlowResult out;
  Vector y = y0;
  double tau = 0;
  for (double t : times) {
    const double target = t - t0;
    if (target < tau - 1e-15 * std::max(1.0, std::abs(t)))
      fail(ErrorCode::invalid_argument, "time grid must be nondecreasing and start at or after the initial time");
    if (target > tau) solver.advance(tau, y, target, post);
    out.scaled.push_back(y);
    out.tau.push_back(std::max(tau, target));
  }
  out.stats = solver.stats();
  return out;
}

inline void check_grid(const std::vector<double>& times)
{
  if (times.empty()) fail(ErrorCode::invalid_argument, "empty time grid");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i]) || times[i] < 0) fail(ErrorCode::invalid_argument, "times must be finite and >= 0");
    if (i > 0 && times[i] < times[i - 1]) fail(ErrorCode::invalid_argument, "times must be nondecreasing");
  }
}

inline double rel_change(const Vector& a, const Vector& b)
{
  const double scale = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  if (scale == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline Vector atol_like(const Vector& ref, double atol)
{
  const double m = ref.size() ? ref.cwiseAbs().maxCoeff() : 0.0;
  const double a = m > 0 ? atol * std::min(1.0, m) : atol;
  return Vector::Constant(ref.size(), std::max(a, 1e-300));
}

inline Vector stack(const std::vector<Vector>& parts)
{
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  Vector out(n);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.segment(off, p.size()) = p;
    off += p.size();
  }
  return out;
}

}  // namespace detail

struct InfiniteLambdaResult {
  Vector value;
  std::vector<Vector> ladder_values;
  std::vector<Vector> extrapolated;
  double rel_change = 0;
};

namespace detail {

inline Vector u_at(const ModelParams& m, const Vector& lambda, double t, const SolverConfig& cfg, OdeStats* stats = nullptr)
{
  const double su = m.mu();
  Vector atol = Vector::Constant(m.k(), cfg.ode.atol);
  auto r = flow(m, su, {}, lambda, atol, 0.0, {t}, cfg.ode);
  if (stats) *stats = r.stats;
  return r.scaled.back() * std::exp(su * r.tau.back());
}

inline void check_bracket_infinite(const ModelParams& m, double t, const Vector& u)
{
  if (!is_irreducible(m.D()) || m.k() < 1) return;
  SpectralData sp;
  try {
    sp = perron(m);
  } catch (const Error&) {
    return;
  }
  const double mu = m.mu();
  const double f = mu == 0 ? 1.0 / t : std::abs(mu) * std::exp(mu * t) / (-std::expm1(mu * t));
  const double lo = 2 * f / (m.c() * sp.xi.maxCoeff());
  const double hi = 2 * f / (m.c() * sp.xi.minCoeff());
  for (int i = 0; i < m.k(); ++i) {
    const double slack = 1e-7 * u(i);
    if (u(i) < lo * sp.xi(i) - slack || u(i) > hi * sp.xi(i) + slack)
      fail(ErrorCode::not_stabilized, "infinite-lambda limit falls outside the a priori bracket");
  }
}

}  // namespace detail

// Coordinates that read an infinite coordinate through D (d_ij > 0) receive
// a source of order 1/t near t = 0, whose integral diverges; their monotone
// limit is then the blow-up solution as well. Running the ladder on the
// closed set keeps the ladder error of order 1/L instead of 1/log L.
inline std::vector<bool> infinite_closure(const Matrix& D, std::vector<bool> mask)
{
  const auto k = static_cast<Eigen::Index>(mask.size());
  bool changed = true;
  while (changed) {
    changed = false;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (mask[i]) continue;
      for (Eigen::Index j = 0; j < k; ++j)
        if (j != i && mask[j] && D(i, j) > 0) {
          mask[i] = true;
          changed = true;
          break;
        }
    }
  }
  return mask;
}

inline InfiniteLambdaResult u_at_infinite_lambda_report(const ModelParams& model, double t, const std::vector<bool>& mask,
                                                        const Vector& finite_part, const SolverConfig& cfg = {})
{
  if (!(t > 0) || !std::isfinite(t)) fail(ErrorCode::invalid_argument, "u_at_infinite_lambda needs t > 0");
  if (mask.size() != static_cast<std::size_t>(model.k()) || finite_part.size() != model.k())
    fail(ErrorCode::invalid_argument, "mask/finite_part size mismatch");
  if (cfg.ladder.size() < 3) fail(ErrorCode::invalid_argument, "ladder needs at least three rungs");
  const std::vector<bool> closed = infinite_closure(model.D(), mask);
  Vector dir = Vector::Zero(model.k());
  for (int i = 0; i < model.k(); ++i) dir(i) = closed[i] ? 1.0 : 0.0;
  Vector base = finite_part;
  for (int i = 0; i < model.k(); ++i)
    if (closed[i]) base(i) = 0;

  InfiniteLambdaResult out;
  for (double L : cfg.ladder) out.ladder_values.push_back(detail::u_at(model, base + L * dir, t, cfg));
  if (dir.isZero()) {
    out.value = out.ladder_values.back();
    return out;
  }
  for (std::size_t j = 1; j < cfg.ladder.size(); ++j) {
    const double q = cfg.ladder[j] / cfg.ladder[j - 1];
    out.extrapolated.push_back(out.ladder_values[j] + (out.ladder_values[j] - out.ladder_values[j - 1]) / (q - 1.0));
  }
  const auto n = out.extrapolated.size();
  out.value = out.extrapolated[n - 1];
  out.rel_change = detail::rel_change(out.extrapolated[n - 1], out.extrapolated[n - 2]);
  if (!(out.rel_change <= cfg.ladder_tol))
    fail(ErrorCode::not_stabilized, "lambda ladder did not stabilize at t=" + std::to_string(t) +
                                        " (relative change " + std::to_string(out.rel_change) + ")");
  if (std::all_of(mask.begin(), mask.end(), [](bool b) { return b; })) detail::check_bracket_infinite(model, t, out.value);
  return out;
}

inline Vector u_at_infinite_lambda(const ModelParams& model, double t, const std::vector<bool>& mask,
                                   const Vector& finite_part, const SolverConfig& cfg = {})
{
  return u_at_infinite_lambda_report(model, t, mask, finite_part, cfg).value;
}

inline CumulantTrajectory solve_u(const ModelParams& model, const LambdaSpec& lambda, const std::vector<double>& times,
                                  const SolverConfig& cfg = {})
{
  detail::check_grid(times);
  if (lambda.k() != model.k()) fail(ErrorCode::invalid_argument, "lambda has the wrong length");
  CumulantTrajectory tr;
  tr.times = times;
  tr.initial_lambda = lambda;
  Vector y0 = lambda.values;
  double t0 = 0;
  if (lambda.has_infinite()) {
    if (times.front() <= 0) fail(ErrorCode::infinite_lambda_at_zero, "infinite lambda needs a grid starting after 0");
    t0 = times.front();
    y0 = u_at_infinite_lambda(model, t0, lambda.infinite, lambda.values, cfg);
  }
  const double su = model.mu();
  auto r = detail::flow(model, su, {}, y0, Vector::Constant(model.k(), cfg.ode.atol), t0, times, cfg.ode);
  for (std::size_t j = 0; j < times.size(); ++j) tr.u.push_back(r.scaled[j] * std::exp(su * r.tau[j]));
  tr.solver_stats = r.stats;
  return tr;
}

namespace detail {

inline CumulantTrajectory solve_linearized(const ModelParams& model, const LambdaSpec& lambda, const Vector& v0,
                                           const std::vector<double>& times, bool nonnegative, const SolverConfig& cfg)
{
  check_grid(times);
  if (lambda.k() != model.k() || v0.size() != model.k()) fail(ErrorCode::invalid_argument, "size mismatch");
  if (lambda.has_infinite())
    fail(ErrorCode::infinite_lambda_at_zero, "the linearized system starts at t=0 and needs finite lambda");
  CumulantTrajectory tr;
  tr.times = times;
  tr.initial_lambda = lambda;
  tr.initial_v = v0;
  const double su = model.mu();
  const std::vector<Block> blocks{{BlockKind::linear, su, nonnegative}};
  const Vector atol = stack({Vector::Constant(model.k(), cfg.ode.atol), atol_like(v0, cfg.ode.atol)});
  auto r = flow(model, su, blocks, stack({lambda.values, v0}), atol, 0.0, times, cfg.ode);
  const int k = model.k();
  for (std::size_t j = 0; j < times.size(); ++j) {
    const double g = std::exp(su * r.tau[j]);
    tr.u.push_back(r.scaled[j].head(k) * g);
    tr.v.push_back(r.scaled[j].tail(k) * g);
  }
  tr.solver_stats = r.stats;
  return tr;
}

}  // namespace detail

inline CumulantTrajectory solve_v(const ModelParams& model, const LambdaSpec& lambda, const Vector& v0,
                                  const std::vector<double>& times, const SolverConfig& cfg = {})
{
  if ((v0.array() < 0).any()) fail(ErrorCode::invalid_argument, "v0 must be >= 0");
  return detail::solve_linearized(model, lambda, v0, times, true, cfg);
}

inline CumulantTrajectory grad_u(const ModelParams& model, const LambdaSpec& lambda, const Vector& direction,
                                 const std::vector<double>& times, const SolverConfig& cfg = {})
{
  return detail::solve_linearized(model, lambda, direction, times, false, cfg);
}

// u^lambda together with w = u^{lambda+delta} - u^lambda, integrated as a
// difference so that small delta keeps full relative accuracy.
struct DifferenceTrajectory {
  std::vector<double> times;
  std::vector<Vector> u;
  std::vector<Vector> w;
  OdeStats solver_stats;
};

inline DifferenceTrajectory solve_difference(const ModelParams& model, const Vector& lambda, const Vector& delta,
                                             const std::vector<double>& times, const SolverConfig& cfg = {})
{
  detail::check_grid(times);
  LambdaSpec::finite(lambda);
  LambdaSpec::finite(delta);
  const double su = model.mu();
  const std::vector<detail::Block> blocks{{BlockKind::difference, su, true}};
  const Vector atol = detail::stack({Vector::Constant(model.k(), cfg.ode.atol), detail::atol_like(delta, cfg.ode.atol)});
  auto r = detail::flow(model, su, blocks, detail::stack({lambda, delta}), atol, 0.0, times, cfg.ode);
  DifferenceTrajectory out;
  out.times = times;
  const int k = model.k();
  for (std::size_t j = 0; j < times.size(); ++j) {
    const double g = std::exp(su * r.tau[j]);
    out.u.push_back(r.scaled[j].head(k) * g);
    out.w.push_back(r.scaled[j].tail(k) * g);
  }
  out.solver_stats = r.stats;
  return out;
}

struct StabilizedLimit {
  Vector value;
  double horizon = 0;
  double rel_change = 0;
};

namespace detail {

// Doubles the horizon from T0 until the scaled block selected by `pick`
// changes by less than the configured tolerance.
template <typename Pick>
StabilizedLimit stabilize(const ModelParams& m, double su, const std::vector<Block>& blocks, const Vector& y0,
                          const Vector& atol, double T0, const SolverConfig& cfg, Pick pick, const char* what)
{
  std::vector<double> grid;
  double T = T0;
  for (int d = 0; d <= cfg.max_doublings; ++d, T *= 2) grid.push_back(T);
  // The integration runs once; each grid point is a horizon candidate.
  CumulantRhs rhs{m.D(), m.c(), su, blocks};
  DormandPrince<CumulantRhs> solver(rhs, cfg.ode, atol);
  std::vector<char> nonneg(static_cast<std::size_t>(y0.size()), 1);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (int i = 0; i < m.k(); ++i) nonneg[m.k() * (b + 1) + i] = blocks[b].nonnegative ? 1 : 0;
  auto post = [&](Vector& y, const Vector& tol) {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (!std::isfinite(y(i))) return false;
      if (nonneg[i] && y(i) < 0) {
        if (y(i) < -10.0 * tol(i)) return false;
        y(i) = 0;
      }
    }
    return true;
  };
  Vector y = y0;
  double tau = 0;
  std::optional<Vector> prev;
  StabilizedLimit out;
  for (double h : grid) {
    solver.advance(tau, y, h, post);
    Vector cur = pick(y, tau);
    if (prev) {
      out.rel_change = rel_change(cur, *prev);
      out.value = cur;
      out.horizon = h;
      if (out.rel_change < cfg.stabilization_tol) return out;
    }
    prev = cur;
  }
  fail(ErrorCode::not_stabilized, std::string(what) + " did not stabilize (relative change " +
                                      std::to_string(out.rel_change) + " at horizon " + std::to_string(out.horizon) + ")");
}

inline double initial_horizon(double rate)
{
  return rate == 0 ? 10.0 : 10.0 / std::abs(rate);
}

inline void require_long_time_guarantee(const ModelParams& model)
{
  if (model.mu() == 0) fail(ErrorCode::critical_model, "long-time normalized limit needs mu < 0");
  const auto fam = classify(model).family;
  if (fam == Family::other) fail(ErrorCode::uncovered_case, "long-time limits need an irreducible or CP-D+ model");
}

}  // namespace detail

// lim e^{-mu t} u_t^lambda. Infinite lambda entries are handled through the
// flow property from u at t = 1.
inline StabilizedLimit tilde_u_infinity_report(const ModelParams& model, const LambdaSpec& lambda, const SolverConfig& cfg = {})
{
  detail::require_long_time_guarantee(model);
  if (lambda.k() != model.k()) fail(ErrorCode::invalid_argument, "lambda has the wrong length");
  if (lambda.is_zero()) return {Vector::Zero(model.k()), 0.0, 0.0};
  const double mu = model.mu();
  Vector y0 = lambda.values;
  double t0 = 0;
  if (lambda.has_infinite()) {
    t0 = 1.0;
    y0 = u_at_infinite_lambda(model, t0, lambda.infinite, lambda.values, cfg);
  }
  auto res = detail::stabilize(model, mu, {}, y0, Vector::Constant(model.k(), cfg.ode.atol), detail::initial_horizon(mu),
                               cfg, [](const Vector& y, double) { return Vector(y); }, "tilde u");
  res.value *= std::exp(-mu * t0);
  if (is_irreducible(model.D()) && model.k() > 1) {
    const SpectralData sp = perron(model);
    const double s = res.value.sum();
    if (s > 0 && (res.value / s - sp.xi).cwiseAbs().maxCoeff() > cfg.collinearity_tol)
      fail(ErrorCode::not_stabilized, "tilde u is not collinear with xi");
  }
  return res;
}

inline Vector tilde_u_infinity(const ModelParams& model, const LambdaSpec& lambda, const SolverConfig& cfg = {})
{
  return tilde_u_infinity_report(model, lambda, cfg).value;
}

// lim e^{-rate t} v_t^lambda with v_0 = v0.
inline StabilizedLimit tilde_v_infinity_report(const ModelParams& model, const Vector& lambda, const Vector& v0, double rate,
                                               const SolverConfig& cfg = {})
{
  LambdaSpec::finite(lambda);
  const double su = model.mu() < 0 ? model.mu() : 0.0;
  const std::vector<detail::Block> blocks{{BlockKind::linear, rate, true}};
  const Vector atol = detail::stack({Vector::Constant(model.k(), cfg.ode.atol), detail::atol_like(v0, cfg.ode.atol)});
  const int k = model.k();
  return detail::stabilize(model, su, blocks, detail::stack({lambda, v0}), atol,
                           detail::initial_horizon(rate != 0 ? rate : su), cfg,
                           [k](const Vector& y, double) { return Vector(y.tail(k)); }, "tilde v");
}

inline Vector tilde_v_infinity(const ModelParams& model, const Vector& lambda, const Vector& v0, double rate,
                               const SolverConfig& cfg = {})
{
  return tilde_v_infinity_report(model, lambda, v0, rate, cfg).value;
}

struct BracketReport {
  std::vector<double> times;
  std::vector<Vector> u;
  std::vector<Vector> lower;             // B_t bound times xi
  std::vector<Vector> upper;             // C_t bound times xi
  std::vector<Vector> lower_iv;          // prefactor times e^{Dt} lambda
  std::vector<Vector> comparison_upper;  // e^{Dt} lambda
  std::vector<bool> satisfied;
  bool all_satisfied() const { return std::all_of(satisfied.begin(), satisfied.end(), [](bool b) { return b; }); }
};

inline BracketReport bracket_bounds(const ModelParams& model, const LambdaSpec& lambda, const std::vector<double>& times,
                                    const SolverConfig& cfg = {})
{
  if (!is_irreducible(model.D())) fail(ErrorCode::reducible_model, "bracket bounds need an irreducible D");
  if (lambda.has_infinite()) fail(ErrorCode::invalid_argument, "bracket bounds need finite lambda");
  const SpectralData sp = perron(model);
  const double mu = model.mu(), c = model.c();
  const double xlo = sp.xi.minCoeff(), xhi = sp.xi.maxCoeff();
  const Vector& lam = lambda.values;
  const double C0 = (lam.array() / sp.xi.array()).maxCoeff();
  const double B0 = (lam.array() / sp.xi.array()).minCoeff();

  auto decay = [&](double x0, double xs, double t) {
    if (x0 == 0) return 0.0;
    if (mu == 0) return x0 / (1 + 0.5 * c * xs * x0 * t);
    return x0 * std::exp(mu * t) / (1 + c * xs / (2 * std::abs(mu)) * x0 * (-std::expm1(mu * t)));
  };

  BracketReport rep;
  rep.times = times;
  const auto tr = solve_u(model, lambda, times, cfg);
  rep.u = tr.u;
  const double prefactor_exp = -xhi / xlo;
  for (std::size_t j = 0; j < times.size(); ++j) {
    const double t = times[j];
    double Ct = decay(C0, xlo, t);
    if (t > 0) {
      const double f = mu == 0 ? 1.0 / t : std::abs(mu) * std::exp(mu * t) / (-std::expm1(mu * t));
      Ct = std::min(Ct, 2 * f / (c * xlo));
    }
    const double Bt = decay(B0, xhi, t);
    const Vector E = matrix_exp(model.D(), t) * lam;
    const double growth = mu == 0 ? 1 + 0.5 * c * xlo * C0 * t : 1 + c * xlo / (2 * std::abs(mu)) * C0 * (-std::expm1(mu * t));
    const Vector lo_iv = std::pow(growth, prefactor_exp) * E;
    rep.upper.push_back(Ct * sp.xi);
    rep.lower.push_back(Bt * sp.xi);
    rep.lower_iv.push_back(lo_iv);
    rep.comparison_upper.push_back(E);
    bool ok = true;
    const Vector& u = rep.u[j];
    for (int i = 0; i < model.k(); ++i) {
      const double slack = 1e-8 * std::max(std::abs(u(i)), 1e-300) + 10 * cfg.ode.atol * std::exp(mu * t);
      if (u(i) > Ct * sp.xi(i) + slack) ok = false;
      if (u(i) < Bt * sp.xi(i) - slack) ok = false;
      if (u(i) < lo_iv(i) - slack) ok = false;
      if (u(i) > E(i) + slack) ok = false;
    }
    rep.satisfied.push_back(ok);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Closed forms

enum class ClosedFamily { monotype, cp_d, cp_d_plus };

struct ClosedFormModel {
  ClosedFamily id = ClosedFamily::monotype;
  double mu = 0;     // monotype
  double alpha = 0;  // CP-D, CP-D+
  double beta = 0;   // CP-D+
  double c = 1;
};

inline ClosedFormModel closed_form_model(const ModelParams& model)
{
  const FamilyInfo info = classify(model);
  switch (info.family) {
    case Family::monotype: return {ClosedFamily::monotype, model.mu(), 0, 0, model.c()};
    case Family::cp_d: return {ClosedFamily::cp_d, 0, info.alpha, 0, model.c()};
    case Family::cp_d_plus: return {ClosedFamily::cp_d_plus, 0, info.alpha, info.beta, model.c()};
    default: fail(ErrorCode::no_closed_form, std::string("no closed form for family ") + to_string(info.family));
  }
}

namespace detail {

// Monotype cumulant with Perron root m <= 0; lambda may be +inf.
inline double monotype_u(double m, double c, double lambda, double t)
{
  if (std::isinf(lambda)) {
    if (t <= 0) fail(ErrorCode::infinite_lambda_at_zero, "infinite lambda at t=0");
    if (m == 0) return 2.0 / (c * t);
    return 2 * std::abs(m) / c * std::exp(m * t) / (-std::expm1(m * t));
  }
  if (m == 0) return lambda / (1 + 0.5 * c * lambda * t);
  return lambda * std::exp(m * t) / (1 + c / (2 * std::abs(m)) * lambda * (-std::expm1(m * t)));
}

// d/d lambda of monotype_u.
inline double monotype_v(double m, double c, double lambda, double t)
{
  if (m == 0) {
    const double d = 1 + 0.5 * c * lambda * t;
    return 1.0 / (d * d);
  }
  const double d = 1 + c / (2 * std::abs(m)) * lambda * (-std::expm1(m * t));
  return std::exp(m * t) / (d * d);
}

// int_0^t e^{r s} ds
inline double exp_integral(double r, double t)
{
  if (r == 0) return t;
  return std::expm1(r * t) / r;
}

}  // namespace detail

inline double closed_form_u_coordinate(const ClosedFormModel& m, const LambdaSpec& lambda, double t, int i)
{
  auto val = [&](int j) { return lambda.infinite[j] ? std::numeric_limits<double>::infinity() : lambda.values(j); };
  if (t < 0) fail(ErrorCode::invalid_argument, "t must be >= 0");
  if (m.id == ClosedFamily::monotype) {
    if (lambda.k() != 1 || i != 0) fail(ErrorCode::invalid_argument, "monotype has one coordinate");
    return detail::monotype_u(m.mu, m.c, val(0), t);
  }
  if (lambda.k() != 2 || i < 0 || i > 1) fail(ErrorCode::invalid_argument, "CP families have two coordinates");
  const double beta = m.id == ClosedFamily::cp_d ? 0.0 : m.beta;
  if (i == 1) return detail::monotype_u(-beta, m.c, val(1), t);
  if (lambda.infinite[1] || lambda.values(1) != 0)
    fail(ErrorCode::no_closed_form, "first coordinate has a closed form only when lambda_2 = 0");
  return detail::monotype_u(-m.alpha, m.c, val(0), t);
}

inline Vector closed_form_u(const ClosedFormModel& m, const LambdaSpec& lambda, double t)
{
  Vector out(lambda.k());
  for (int i = 0; i < lambda.k(); ++i) out(i) = closed_form_u_coordinate(m, lambda, t, i);
  return out;
}

enum class VInit { xi, e1, e2 };

inline Vector closed_form_xi(const ClosedFormModel& m)
{
  if (m.id == ClosedFamily::monotype) return Vector::Ones(1);
  Vector xi(2);
  if (m.id == ClosedFamily::cp_d) {
    xi << 0.5, 0.5;
  } else if (m.beta < m.alpha) {
    xi << m.alpha, m.alpha - m.beta;
    xi /= 2 * m.alpha - m.beta;
  } else {
    xi << 1.0, 0.0;
  }
  return xi;
}

// v with v_0 = e1 and v_0 = e2 at lambda = (lambda_1; 0), both coordinates.
namespace detail {

inline Vector cp_v_e1(const ClosedFormModel& m, double l1, double t)
{
  Vector v(2);
  v << monotype_v(-m.alpha, m.c, l1, t), 0.0;
  return v;
}

inline Vector cp_v_e2(const ClosedFormModel& m, double l1, double t)
{
  const double alpha = m.alpha;
  const double beta = m.id == ClosedFamily::cp_d ? 0.0 : m.beta;
  const double a = m.c * l1 / (2 * alpha);
  const double vhat = monotype_v(-alpha, m.c, l1, t);
  const double bracket = (1 + a) * (1 + a) * exp_integral(alpha - beta, t) - 2 * a * (1 + a) * exp_integral(-beta, t) +
                         a * a * exp_integral(-alpha - beta, t);
  Vector v(2);
  v << alpha * vhat * bracket, std::exp(-beta * t);
  return v;
}

}  // namespace detail

inline Vector closed_form_v(const ClosedFormModel& m, const LambdaSpec& lambda, VInit v0, double t)
{
  if (t < 0) fail(ErrorCode::invalid_argument, "t must be >= 0");
  if (lambda.has_infinite()) fail(ErrorCode::no_closed_form, "closed-form v needs finite lambda");
  if (m.id == ClosedFamily::monotype) {
    if (v0 == VInit::e2) fail(ErrorCode::invalid_argument, "monotype has no second coordinate");
    return Vector::Constant(1, detail::monotype_v(m.mu, m.c, lambda.values(0), t));
  }
  const double l1 = lambda.values(0), l2 = lambda.values(1);
  if (l2 != 0) fail(ErrorCode::no_closed_form, "closed-form v needs lambda_2 = 0 (see closed_form_v2_e2)");
  switch (v0) {
    case VInit::e1: return detail::cp_v_e1(m, l1, t);
    case VInit::e2: return detail::cp_v_e2(m, l1, t);
    case VInit::xi: {
      const Vector xi = closed_form_xi(m);
      return xi(0) * detail::cp_v_e1(m, l1, t) + xi(1) * detail::cp_v_e2(m, l1, t);
    }
  }
  return Vector();
}

// Second coordinate of v for v_0 = e2 with arbitrary lambda_2 (it decouples).
inline double closed_form_v2_e2(const ClosedFormModel& m, double lambda2, double t)
{
  if (m.id == ClosedFamily::monotype) fail(ErrorCode::invalid_argument, "monotype has no second coordinate");
  const double beta = m.id == ClosedFamily::cp_d ? 0.0 : m.beta;
  return detail::monotype_v(-beta, m.c, lambda2, t);
}

// exp(-alpha t - c int_0^t u_{s,1} ds) evaluated with adaptive Gauss-Kronrod
// over the explicit first coordinate at lambda_2 = 0.
inline double hat_v1_by_quadrature(const ClosedFormModel& m, double lambda1, double t)
{
  if (m.id == ClosedFamily::monotype) fail(ErrorCode::invalid_argument, "needs a CP family");
  if (t == 0) return 1.0;
  auto u1 = [&](double s) { return detail::monotype_u(-m.alpha, m.c, lambda1, s); };
  double err = 0;
  const double I = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(u1, 0.0, t, 15, 1e-11, &err);
  return std::exp(-m.alpha * t - m.c * I);
}

// ---------------------------------------------------------------------------
// Constant C(lambda_2, y) = lim y_t e^{alpha t} for the first coordinate of
// CP-D+ with alpha < beta (or the t-linear rate when alpha = beta).

enum class ZMode { limit, linear_rate };

struct ZConstantResult {
  double value = 0;
  double rel_change = 0;
  double horizon = 0;
  ZMode mode = ZMode::limit;
};

namespace detail {

struct ZRhs {
  double alpha, beta, c, lambda2;
  void operator()(double t, const Vector& z, Vector& dz) const
  {
    dz.resize(1);
    const double denom = 1 + c / (2 * beta) * lambda2 * (-std::expm1(-beta * t));
    dz(0) = -0.5 * c * std::exp(-alpha * t) * z(0) * z(0) + alpha * lambda2 * std::exp(-(beta - alpha) * t) / denom;
  }
};

inline ZConstantResult z_finite(double alpha, double beta, double c, double lambda2, double y0, const SolverConfig& cfg)
{
  ZRhs rhs{alpha, beta, c, lambda2};
  OdeOptions opt = cfg.ode;
  DormandPrince<ZRhs> solver(rhs, opt, Vector::Constant(1, opt.atol));
  auto post = [](Vector& z, const Vector& tol) {
    if (!std::isfinite(z(0))) return false;
    if (z(0) < 0) {
      if (z(0) < -10 * tol(0)) return false;
      z(0) = 0;
    }
    return true;
  };
  Vector z = Vector::Constant(1, y0);
  double t = 0;
  const bool linear = alpha == beta;
  ZConstantResult out;
  out.mode = linear ? ZMode::linear_rate : ZMode::limit;
  double T = 10.0 / alpha;
  std::optional<double> prev;
  for (int d = 0; d <= cfg.max_doublings + 4; ++d, T *= 2) {
    solver.advance(t, z, T, post);
    double cur = z(0);
    if (linear) {
      Vector dz(1);
      rhs(t, z, dz);
      cur = dz(0);
    }
    if (prev) {
      out.rel_change = std::abs(cur - *prev) / std::max(std::abs(cur), 1e-300);
      out.value = cur;
      out.horizon = T;
      if (out.rel_change < cfg.stabilization_tol) return out;
    }
    prev = cur;
  }
  fail(ErrorCode::not_stabilized, "z constant did not stabilize (relative change " + std::to_string(out.rel_change) + ")");
}

}  // namespace detail

inline ZConstantResult z_constant(double alpha, double beta, double c, double lambda2, double y0 = 0.0,
                                  const SolverConfig& cfg = {})
{
  if (!(alpha > 0) || !(beta > 0) || !(c > 0)) fail(ErrorCode::invalid_argument, "alpha, beta, c must be positive");
  if (alpha > beta) fail(ErrorCode::invalid_argument, "z_constant needs alpha <= beta");
  if (!(lambda2 >= 0) || !(y0 >= 0)) fail(ErrorCode::invalid_argument, "lambda2 and y0 must be >= 0");
  if (!std::isinf(lambda2)) return detail::z_finite(alpha, beta, c, lambda2, y0, cfg);

  std::vector<ZConstantResult> rungs;
  // The first coordinate reads the second, so lambda_2 = inf forces the
  // blow-up solution in y as well; both start on the same ladder.
  for (double L : cfg.ladder) rungs.push_back(detail::z_finite(alpha, beta, c, L, L, cfg));
  std::vector<double> ext;
  for (std::size_t j = 1; j < rungs.size(); ++j) {
    const double q = cfg.ladder[j] / cfg.ladder[j - 1];
    ext.push_back(rungs[j].value + (rungs[j].value - rungs[j - 1].value) / (q - 1));
  }
  ZConstantResult out = rungs.back();
  out.value = ext.back();
  const double ladder_change = std::abs(ext.back() - ext[ext.size() - 2]) / std::abs(ext.back());
  out.rel_change = std::max(out.rel_change, ladder_change);
  if (!(ladder_change <= cfg.ladder_tol)) fail(ErrorCode::not_stabilized, "lambda_2 ladder did not stabilize");
  return out;
}

}  // namespace fellerlab

#endif  // FELLERLAB_CUMULANT_HPP
