#ifndef FELLERLAB_ACCEPTANCE_HPP
#define FELLERLAB_ACCEPTANCE_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cumulant.hpp"
#include "families.hpp"
#include "laws.hpp"
#include "mc.hpp"
#include "spectral.hpp"
#include "stats.hpp"

namespace fellerlab::acceptance {

struct Options {
  std::uint64_t seed = 0x5eed2024ULL;
  unsigned threads = 0;
  double gamma_rate_factor = 1.0;  // negative control for A3 when != 1
};

struct Result {
  std::string id;
  std::string title;
  bool pass = false;
  double seconds = 0;
  double budget = 0;
  std::string detail;
};

class Checks {
 public:
  void require(bool ok, const std::string& what)
  {
    ++count_;
    if (!ok && first_failure_.empty()) first_failure_ = what;
  }
  void note(const std::string& s)
  {
    if (!notes_.empty()) notes_ += "; ";
    notes_ += s;
  }
  bool ok() const { return first_failure_.empty(); }
  int count() const { return count_; }
  const std::string& first_failure() const { return first_failure_; }
  const std::string& notes() const { return notes_; }

 private:
  int count_ = 0;
  std::string first_failure_;
  std::string notes_;
};

struct Criterion {
  std::string id;
  std::string title;
  double budget;  // seconds
  std::function<void(const Options&, Checks&)> body;
};

namespace detail {

inline std::string fmt(double x)
{
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

inline Vector vec(std::initializer_list<double> xs)
{
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

inline Matrix mat2(double a, double b, double c, double d)
{
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

inline std::vector<double> grid(double lo, double hi, int n)
{
  std::vector<double> g(n);
  for (int i = 0; i < n; ++i) g[i] = lo + (hi - lo) * i / (n - 1);
  return g;
}

// Largest relative deviation between ODE and closed form; tracks the worst case.
struct Worst {
  double rel = 0;
  std::string where;
  void update(double ode, double exact, const std::string& at)
  {
    const double r = exact == 0 ? (ode == 0 ? 0.0 : INFINITY) : std::abs(ode - exact) / std::abs(exact);
    if (r > rel) {
      rel = r;
      where = at;
    }
  }
};

inline SolverConfig tight_config()
{
  SolverConfig cfg;
  cfg.ode.rtol = 1e-12;
  cfg.ode.atol = 1e-30;
  return cfg;
}

inline void a1(const Options&, Checks& ck)
{
  const std::vector<double> lambdas{0.0, 0.05, 0.3, 1.0, 2.5, 7.0, 20.0, 80.0};
  const auto times = grid(0, 20, 81);
  const SolverConfig cfg = tight_config();
  Worst worst;

  for (double mu : {0.0, -1.0}) {
    const auto model = validate_model(Matrix::Constant(1, 1, mu), 2.0);
    const auto cf = closed_form_model(model);
    for (double l : lambdas) {
      const auto lam = LambdaSpec::finite(vec({l}));
      const auto tu = solve_u(model, lam, times, cfg);
      const auto tv = solve_v(model, lam, Vector::Ones(1), times, cfg);
      for (std::size_t j = 0; j < times.size(); ++j) {
        const std::string at = "monotype mu=" + fmt(mu) + " l=" + fmt(l) + " t=" + fmt(times[j]);
        worst.update(tu.u[j](0), closed_form_u(cf, lam, times[j])(0), at + " u");
        worst.update(tv.v[j](0), closed_form_v(cf, lam, VInit::xi, times[j])(0), at + " v");
      }
    }
  }

  for (double beta : {0.0, 0.5, 2.0}) {
    const auto model = validate_model(cp_matrix(1.0, beta), 2.0);
    const auto cf = closed_form_model(model);
    const Vector xi = closed_form_xi(cf);
    for (double l : lambdas) {
      const auto lam = LambdaSpec::finite(vec({l, 0.0}));
      const auto tu = solve_u(model, lam, times, cfg);
      const auto v_xi = solve_v(model, lam, xi, times, cfg);
      const auto v_e1 = solve_v(model, lam, vec({1, 0}), times, cfg);
      const auto v_e2 = solve_v(model, lam, vec({0, 1}), times, cfg);
      for (std::size_t j = 0; j < times.size(); ++j) {
        const double t = times[j];
        const std::string at = "CP beta=" + fmt(beta) + " l=(" + fmt(l) + ",0) t=" + fmt(t);
        const Vector u = closed_form_u(cf, lam, t);
        const Vector vx = closed_form_v(cf, lam, VInit::xi, t);
        const Vector v1 = closed_form_v(cf, lam, VInit::e1, t);
        const Vector v2 = closed_form_v(cf, lam, VInit::e2, t);
        for (int i = 0; i < 2; ++i) {
          const std::string c = "[" + std::to_string(i + 1) + "]";
          worst.update(tu.u[j](i), u(i), at + " u" + c);
          worst.update(v_xi.v[j](i), vx(i), at + " v_xi" + c);
          worst.update(v_e1.v[j](i), v1(i), at + " v_e1" + c);
          worst.update(v_e2.v[j](i), v2(i), at + " v_e2" + c);
        }
      }
      // Second coordinate with lambda_2 > 0 decouples and stays closed-form.
      const auto lam2 = LambdaSpec::finite(vec({0.7, l}));
      const auto tu2 = solve_u(model, lam2, times, cfg);
      const auto tv2 = solve_v(model, lam2, vec({0, 1}), times, cfg);
      for (std::size_t j = 0; j < times.size(); ++j) {
        const std::string at = "CP beta=" + fmt(beta) + " l=(0.7," + fmt(l) + ") t=" + fmt(times[j]);
        worst.update(tu2.u[j](1), closed_form_u_coordinate(cf, lam2, times[j], 1), at + " u[2]");
        worst.update(tv2.v[j](1), closed_form_v2_e2(cf, l, times[j]), at + " v_e2[2]");
      }
    }
  }
  ck.note("max relative error " + fmt(worst.rel) + (worst.where.empty() ? "" : " at " + worst.where));
  ck.require(worst.rel <= 1e-8, "closed form mismatch " + fmt(worst.rel) + " at " + worst.where);
}

inline void a2(const Options&, Checks& ck)
{
  struct Case {
    Matrix D;
    double mu;
    Vector xi, eta;
  };
  const std::vector<Case> cases{
      {mat2(-1, 1, 0, 0), 0.0, vec({0.5, 0.5}), vec({0.0, 2.0})},
      {mat2(-1, 1, 0, -0.5), -0.5, vec({2.0 / 3, 1.0 / 3}), vec({0.0, 3.0})},
      {mat2(-2, 2, 0, -3), -2.0, vec({1.0, 0.0}), vec({1.0, 2.0})},
  };
  double worst = 0;
  for (const auto& cs : cases) {
    const auto sp = perron(validate_model(cs.D, 2.0));
    worst = std::max({worst, std::abs(sp.mu - cs.mu), (sp.xi - cs.xi).cwiseAbs().maxCoeff(),
                      (sp.eta - cs.eta).cwiseAbs().maxCoeff()});
  }
  ck.note("max deviation " + fmt(worst));
  ck.require(worst <= 1e-12, "spectral data off by " + fmt(worst));
}

inline void a3(const Options& opt, Checks& ck)
{
  const auto model = validate_model(Matrix::Constant(1, 1, -1.0), 2.0);
  ConditionedOptions co;
  co.sim.dt = 1e-3;
  co.sim.threads = opt.threads;
  const auto ens = sample_conditioned(model, Vector::Ones(1), 12.0, ConditioningSpec::whole(), 100000, opt.seed ^ 0xA3, co);
  const auto ref = LimitLawDescriptor::gamma(2, 1.0 * opt.gamma_rate_factor, "subcritical-monotype-size-biased-yaglom");
  const auto rep = ks_weighted(ens, 12.0, 0, ref, 0.02);
  ck.note("KS " + fmt(rep.statistic) + " (n_eff " + fmt(rep.n_effective) + ", reference rate " + fmt(ref.rate) + ")");
  ck.require(rep.pass, "KS " + fmt(rep.statistic) + " exceeds 0.02");
}

inline void a4(const Options& opt, Checks& ck)
{
  SimulationOptions so;
  so.dt = 0.01;
  so.record_times = {1, 5, 10};
  so.threads = opt.threads;
  struct Case {
    std::string name;
    Matrix D;
    double c;
    Vector x0;
    std::size_t n;
  };
  const std::vector<Case> cases{{"monotype", Matrix::Constant(1, 1, -1.0), 2.0, Vector::Ones(1), 1000000},
                                {"irreducible", mat2(-1, 0.5, 0.5, -1), 1.0, vec({1, 1}), 100000}};
  std::uint64_t salt = 0xA4;
  for (const auto& cs : cases) {
    const auto model = validate_model(cs.D, cs.c);
    const auto h = h_transform(model, cs.x0, ConditioningSpec::whole());
    const auto ens = simulate(model, cs.x0, 10.0, cs.n, opt.seed ^ salt++, so);
    for (double t : {1.0, 5.0, 10.0}) {
      const auto m = mean_hweight(ens, t, h);
      ck.note(cs.name + " t=" + fmt(t) + ": " + fmt(m.estimate) + " +- " + fmt(m.se));
      ck.require(std::abs(m.estimate - 1) <= 3 * m.se, cs.name + " weight mean at t=" + fmt(t) + " is " + fmt(m.estimate) +
                                                          " (SE " + fmt(m.se) + ")");
    }
  }
}

inline void a5(const Options&, Checks& ck)
{
  const auto model = validate_model(mat2(-1, 0.5, 0.5, -1), 1.0);
  double worst = 0;
  for (const Vector& l : {vec({1, 0}), vec({0, 1}), vec({1, 1}), vec({2, 0.5})}) {
    const double a = iterated_limit_t_then_theta(model, l);
    const double b = iterated_limit_theta_then_t(model, l);
    worst = std::max(worst, std::abs(a - b));
  }
  ck.note("irreducible max |difference| " + fmt(worst));
  ck.require(worst <= 1e-3, "irreducible iterated limits differ by " + fmt(worst));
  const auto mono = validate_model(Matrix::Constant(1, 1, -1.0), 2.0);
  const double a = iterated_limit_t_then_theta(mono, vec({1}));
  const double b = iterated_limit_theta_then_t(mono, vec({1}));
  ck.note("monotype " + fmt(a) + " / " + fmt(b));
  ck.require(std::abs(a - 0.25) <= 1e-6 && std::abs(b - 0.25) <= 1e-6 && std::abs(a - b) <= 1e-6,
             "monotype iterated limits " + fmt(a) + ", " + fmt(b) + " vs 1/4");
}

inline void a6(const Options& opt, Checks& ck)
{
  const auto model = validate_model(Matrix::Zero(1, 1), 2.0);
  ConditionedOptions co;
  // The critical monotype step is exact in law for any dt, so dt only sets the record grid.
  co.sim.dt = 10;
  co.sim.record_times = {10, 100, 1000};
  co.sim.threads = opt.threads;
  const auto ens = sample_conditioned(model, Vector::Ones(1), 1000, ConditioningSpec::whole(), 100000, opt.seed ^ 0xA6, co);
  const auto mon = explosion_monitor(ens, {10, 100, 1000}, 0, 10.0);
  std::string seq;
  for (const auto& r : mon) seq += (seq.empty() ? "" : ", ") + fmt(r.probability);
  ck.note("P(x_t <= 10) = " + seq);
  ck.require(strictly_decreasing(mon), "tail probabilities not strictly decreasing: " + seq);
  const auto rep = ks_weighted(ens, 1000, 0, LimitLawDescriptor::gamma(2, 1, "critical-monotype-rescaled"), 0.03, 1000.0);
  ck.note("KS(x_t/t) " + fmt(rep.statistic));
  ck.require(rep.pass, "KS of x_t/t " + fmt(rep.statistic) + " exceeds 0.03");
}

inline void a7(const Options& opt, Checks& ck)
{
  const std::size_t n = 50000;
  ConditionedOptions co;
  co.sim.dt = 0.01;
  co.sim.threads = opt.threads;
  const Vector x0 = vec({1, 1});
  const auto gamma1 = LimitLawDescriptor::gamma(2, 1, "gamma(2, 2 alpha / c)");

  {
    const auto cpd = validate_model(cp_matrix(1, 0), 2.0);
    co.sim.record_times = {2, 4, 8, 12};
    const auto hat = sample_conditioned(cpd, x0, 12, ConditioningSpec::type_i(0), n, opt.seed ^ 0xA71, co);
    const auto r1 = ks_weighted(hat, 8, 0, gamma1, 0.03);
    ck.note("CP-D type-1 KS " + fmt(r1.statistic));
    ck.require(r1.pass, "CP-D type-1 KS " + fmt(r1.statistic));

    const auto star = sample_conditioned(cpd, x0, 12, ConditioningSpec::whole(), n, opt.seed ^ 0xA72, co);
    const double alive = 1 - tail_probability(star, 12, 0, 0.1).probability;
    ck.note("CP-D P*(x_12,1 > 0.1) " + fmt(alive));
    ck.require(alive < 0.05, "CP-D type 1 not vanishing: " + fmt(alive));
    const auto mon = explosion_monitor(star, {2, 4, 8, 12}, 1, 10.0);
    ck.require(strictly_decreasing(mon), "CP-D type-2 explosion monitor not decreasing");
    co.sim.record_times.clear();
  }
  {
    const auto m = validate_model(cp_matrix(1, 0.5), 2.0);
    const auto ens = sample_conditioned(m, x0, 30, ConditioningSpec::whole(), n, opt.seed ^ 0xA73, co);
    const auto r = ks_weighted(ens, 30, 1, LimitLawDescriptor::gamma(2, 0.5, "gamma(2, 2 beta / c)"), 0.03);
    ck.note("CP-D+ beta<alpha type-2 KS " + fmt(r.statistic));
    ck.require(r.pass, "CP-D+ beta<alpha type-2 KS " + fmt(r.statistic));
  }
  {
    const auto m = validate_model(cp_matrix(1, 2), 2.0);
    const auto ens = sample_conditioned(m, x0, 12, ConditioningSpec::type_i(0), n, opt.seed ^ 0xA74, co);
    const auto r = ks_weighted(ens, 12, 0, gamma1, 0.03);
    ck.note("CP-D+ alpha<beta type-1 KS " + fmt(r.statistic));
    ck.require(r.pass, "CP-D+ alpha<beta type-1 KS " + fmt(r.statistic));

    double worst = 0;
    for (double theta : {double(INFINITY), 30.0})
      for (const Vector& start : {vec({1, 1}), vec({0.3, 2})})
        for (const Vector& l : {vec({1, 0}), vec({0, 1}), vec({0.5, 2})})
          for (double t : {0.5, 2.0, 6.0}) {
            const double a = laplace_conditioned(m, start, l, t, ConditioningSpec::whole(theta));
            const double b = laplace_conditioned(m, start, l, t, ConditioningSpec::type_i(0, theta));
            const double c = laplace_conditioned(m, start, l, t, ConditioningSpec::type_i(1, theta));
            worst = std::max({worst, std::abs(a - b), std::abs(a - c)});
          }
    ck.note("three conditionings max difference " + fmt(worst));
    ck.require(worst <= 1e-8, "conditionings differ by " + fmt(worst));
  }
}

inline void a8(const Options& opt, Checks& ck)
{
  std::mt19937_64 rng(opt.seed ^ 0xA8);
  std::uniform_real_distribution<double> U(0.0, 5.0);
  const std::vector<std::pair<Matrix, double>> models{
      {mat2(-1, 0.5, 0.5, -1), 1.0}, {mat2(-1, 1, 1, -1), 2.0}, {mat2(-2, 1.5, 0.3, -0.4), 1.5}};
  const auto times = grid(0, 20, 101);
  int bad = 0;
  for (const auto& [D, c] : models) {
    const auto model = validate_model(D, c);
    for (int r = 0; r < 20; ++r) {
      const auto rep = bracket_bounds(model, LambdaSpec::finite(vec({U(rng), U(rng)})), times);
      if (!rep.all_satisfied()) ++bad;
    }
  }
  ck.note(std::to_string(bad) + " of 60 brackets violated");
  ck.require(bad == 0, std::to_string(bad) + " bracket reports unsatisfied");
}

inline void a9(const Options&, Checks& ck)
{
  SolverConfig cfg;
  cfg.ode.rtol = 1e-13;
  cfg.ode.atol = 1e-15;
  const auto times = grid(0, 10, 21);
  const double h = 1e-4;
  double fd_worst = 0, xi_worst = 0;
  const std::vector<std::pair<Matrix, double>> models{
      {Matrix::Constant(1, 1, -1.0), 2.0}, {mat2(-1, 0.5, 0.5, -1), 1.0}, {cp_matrix(1, 0.5), 2.0}};
  for (const auto& [D, c] : models) {
    const auto model = validate_model(D, c);
    const int k = model.k();
    const Vector lam = Vector::LinSpaced(k, 1.0, 2.0);
    for (int dir = 0; dir < k; ++dir) {
      const Vector e = Vector::Unit(k, dir);
      const auto g = grad_u(model, LambdaSpec::finite(lam), e, times, cfg);
      const auto up = solve_u(model, LambdaSpec::finite(lam + h * e), times, cfg);
      const auto dn = solve_u(model, LambdaSpec::finite(lam - h * e), times, cfg);
      for (std::size_t j = 0; j < times.size(); ++j)
        fd_worst = std::max(fd_worst, ((up.u[j] - dn.u[j]) / (2 * h) - g.v[j]).cwiseAbs().maxCoeff());
    }
    const Vector xi = perron(model).xi;
    const auto gx = grad_u(model, LambdaSpec::finite(lam), xi, times, cfg);
    const auto vx = solve_v(model, LambdaSpec::finite(lam), xi, times, cfg);
    for (std::size_t j = 0; j < times.size(); ++j)
      xi_worst = std::max(xi_worst, (gx.v[j] - vx.v[j]).cwiseAbs().maxCoeff());
  }
  ck.note("finite differences " + fmt(fd_worst) + ", grad_xi vs v " + fmt(xi_worst));
  ck.require(fd_worst <= 1e-6, "grad_u vs finite differences " + fmt(fd_worst));
  ck.require(xi_worst <= 1e-12, "grad along xi differs from v by " + fmt(xi_worst));
}

inline void a10(const Options&, Checks& ck)
{
  std::vector<double> vals;
  std::string seq;
  for (double l2 : {1.0, 10.0, 100.0, double(INFINITY)}) {
    const auto z = z_constant(1, 2, 2, l2);
    vals.push_back(z.value);
    seq += (seq.empty() ? "" : ", ") + fmt(z.value);
    ck.require(z.rel_change < 1e-6, "z not stabilized at lambda2=" + fmt(l2));
    ck.require(z.value > 0, "z not positive at lambda2=" + fmt(l2));
  }
  const double lo = *std::min_element(vals.begin(), vals.end());
  const double hi = *std::max_element(vals.begin(), vals.end());
  ck.note("C = " + seq);
  ck.require(hi <= 10 * lo, "z band wider than a factor 10");
}

inline void a11(const Options&, Checks& ck)
{
  const double v = stable_limit_laplace(-1, 1, 0.5, 1);
  ck.require(v == 0.125, "stable_limit_laplace(1,1,1/2,1) = " + fmt(v));
  double worst = 0;
  for (double mu : {0.0, -1.0, -0.3})
    for (double beta : {0.25, 0.5, 0.8})
      for (double l : {0.2, 1.0, 5.0}) {
        const double c = 1.3;
        auto rhs = [&](double, const Vector& u, Vector& du) {
          du.resize(1);
          du(0) = mu * u(0) - c * std::pow(std::max(u(0), 0.0), 1 + beta);
        };
        OdeOptions o;
        o.rtol = 1e-13;
        o.atol = 1e-300;
        DormandPrince<decltype(rhs)> dp(rhs, o, Vector::Constant(1, 1e-300));
        Vector u = Vector::Constant(1, l);
        double t = 0;
        for (double te : {0.5, 1.0, 3.0, 8.0}) {
          dp.advance(t, u, te, [](Vector&, const Vector&) { return true; });
          worst = std::max(worst, std::abs(u(0) - stable_cumulant(mu, c, beta, l, te)) / stable_cumulant(mu, c, beta, l, te));
        }
      }
  ck.note("limit " + fmt(v) + ", ODE relative error " + fmt(worst));
  ck.require(worst <= 1e-8, "stable cumulant vs ODE " + fmt(worst));
}

}  // namespace detail

inline const std::vector<Criterion>& criteria()
{
  static const std::vector<Criterion> all{
      {"A1", "closed forms vs ODE", 10, detail::a1},
      {"A2", "spectral exactness", 1, detail::a2},
      {"A3", "gamma limit of the conditioned monotype", 60, detail::a3},
      {"A4", "h-transform weight martingale", 60, detail::a4},
      {"A5", "exchange of limits", 30, detail::a5},
      {"A6", "critical explosion and x_t/t law", 300, detail::a6},
      {"A7", "decomposable suite", 300, detail::a7},
      {"A8", "cumulant bracket", 10, detail::a8},
      {"A9", "gradient identity", 10, detail::a9},
      {"A10", "z constant bounds", 10, detail::a10},
      {"A11", "stable branching", 5, detail::a11},
  };
  return all;
}

inline Result run(const Criterion& c, const Options& opt)
{
  Result r{c.id, c.title, false, 0, c.budget, ""};
  Checks ck;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    c.body(opt, ck);
  } catch (const std::exception& e) {
    ck.require(false, std::string("exception: ") + e.what());
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ck.require(r.seconds <= c.budget, "runtime " + detail::fmt(r.seconds) + " s over budget " + detail::fmt(c.budget) + " s");
  r.pass = ck.ok();
  r.detail = ck.ok() ? ck.notes() : ck.first_failure();
  return r;
}

}  // namespace fellerlab::acceptance

#endif  // FELLERLAB_ACCEPTANCE_HPP
