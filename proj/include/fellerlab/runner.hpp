#ifndef FELLERLAB_RUNNER_HPP
#define FELLERLAB_RUNNER_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "cumulant.hpp"
#include "families.hpp"
#include "io.hpp"
#include "laws.hpp"
#include "mc.hpp"
#include "spectral.hpp"
#include "stats.hpp"
#include "version.hpp"

namespace fellerlab::cli {

namespace fs = std::filesystem;
using io::json;

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2 };

struct RunOptions {
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  bool force = false;
  std::string subcommand = "run";
};

struct CheckRecord {
  std::string name;
  std::string provenance;
  bool pass = false;
  std::string detail;
};

struct RunSummary {
  int exit_code = exit_ok;
  fs::path out_dir;
  std::vector<CheckRecord> checks;
  std::string message;
};

// Experiments each subcommand accepts; "run" accepts every experiment.
inline const std::map<std::string, std::vector<std::string>>& subcommand_experiments()
{
  static const std::map<std::string, std::vector<std::string>> m{
      {"spectral", {"spectral"}},
      {"cumulant", {"cumulant-table", "closed-form-check"}},
      {"laws", {"limit-law"}},
      {"simulate", {"simulate", "martingale-check", "explosion"}},
      {"condition", {"conditioned-sample", "decomposable-suite"}},
      {"interchange", {"interchange"}},
  };
  return m;
}

namespace detail {

inline std::string fmt(double x)
{
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

class Context {
 public:
  Context(const ExperimentConfig& cfg, std::uint64_t seed, unsigned threads, fs::path dir)
      : cfg(cfg), seed(seed), threads(threads), dir(std::move(dir))
  {
  }

  const ExperimentConfig& cfg;
  std::uint64_t seed;
  unsigned threads;
  fs::path dir;
  json result = json::object();
  std::vector<CheckRecord> checks;
  std::vector<std::string> files;

  void check(bool ok, const std::string& name, const std::string& provenance, const std::string& detail)
  {
    checks.push_back({name, provenance, ok, detail});
  }

  std::ofstream open(const std::string& name)
  {
    files.push_back(name);
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) fail(ErrorCode::config_error, "cannot write " + (dir / name).string());
    return os;
  }

  void ensemble(const WeightedEnsemble& ens, const std::string& stem)
  {
    io::write_ensemble_binary(ens, dir / stem);
    files.push_back(stem + ".bin");
    files.push_back(stem + ".json");
  }
};

// --- parameter helpers ------------------------------------------------------

inline double positive(const ExperimentConfig& cfg, const std::string& key, double fallback)
{
  const double v = cfg.extended_real(key, fallback);
  if (!(v > 0)) fail(ErrorCode::config_error, "'" + key + "' must be > 0");
  return v;
}

inline std::size_t positive_count(const ExperimentConfig& cfg, const std::string& key, std::size_t fallback)
{
  const std::size_t n = cfg.count(key, fallback);
  if (n == 0) fail(ErrorCode::config_error, "'" + key + "' must be > 0");
  return n;
}

inline Vector start_state(const ExperimentConfig& cfg, const ModelParams& model)
{
  const Vector x0 = cfg.has("x0") ? cfg.vector("x0") : Vector::Ones(model.k());
  if (x0.size() != model.k()) fail(ErrorCode::config_error, "x0 must have length k = " + std::to_string(model.k()));
  if (!x0.allFinite() || (x0.array() < 0).any()) fail(ErrorCode::config_error, "x0 must be finite and >= 0");
  return x0;
}

inline ConditioningSpec parse_conditioning(const std::string& label, double theta, int k)
{
  if (label == "whole") return ConditioningSpec::whole(theta);
  if (label.rfind("type", 0) == 0 && label.size() > 4) {
    int i = 0;
    try {
      i = std::stoi(label.substr(4));
    } catch (const std::exception&) {
      fail(ErrorCode::config_error, "bad conditioning label '" + label + "'");
    }
    if (i < 1 || i > k) fail(ErrorCode::config_error, "conditioning type out of range in '" + label + "'");
    return ConditioningSpec::type_i(i - 1, theta);
  }
  fail(ErrorCode::config_error, "conditioning must be \"whole\" or \"typeN\", got '" + label + "'");
}

inline ConditioningSpec conditioning(const ExperimentConfig& cfg, int k)
{
  const double theta = cfg.extended_real("conditioning.theta", INFINITY);
  if (!(theta > 0)) fail(ErrorCode::config_error, "conditioning.theta must be > 0");
  return parse_conditioning(cfg.string("conditioning.on", "whole"), theta, k);
}

inline SolverConfig solver(const ExperimentConfig& cfg, double rtol = 1e-10, double atol = 1e-12)
{
  SolverConfig s;
  s.ode.rtol = positive(cfg, "solver.rtol", rtol);
  s.ode.atol = positive(cfg, "solver.atol", atol);
  return s;
}

inline LambdaSpec lambda_spec(const Vector& v)
{
  std::vector<bool> mask(static_cast<std::size_t>(v.size()));
  bool any = false;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isnan(v(i)) || v(i) < 0) fail(ErrorCode::config_error, "lambda entries must be >= 0 or inf");
    mask[static_cast<std::size_t>(i)] = std::isinf(v(i));
    any = any || std::isinf(v(i));
  }
  return any ? LambdaSpec::with_infinite(v, mask) : LambdaSpec::finite(v);
}

inline std::vector<Vector> lambdas(const ExperimentConfig& cfg, int k, bool allow_infinite)
{
  auto ls = cfg.vectors("lambdas");
  for (const Vector& l : ls) {
    if (l.size() != k) fail(ErrorCode::config_error, "every lambda must have length k = " + std::to_string(k));
    if (!allow_infinite && !l.allFinite()) fail(ErrorCode::config_error, "this experiment needs finite lambdas");
    lambda_spec(l);
  }
  return ls;
}

inline ConditionedOptions mc_options(const Context& ctx, double default_dt)
{
  ConditionedOptions o;
  o.sim.dt = positive(ctx.cfg, "mc.dt", default_dt);
  o.sim.threads = ctx.threads;
  o.min_accepted = ctx.cfg.count("mc.min_accepted", o.min_accepted);
  const std::string method = ctx.cfg.string("mc.method", "immigration");
  if (method == "immigration") o.method = ConditionedMethod::immigration;
  else if (method == "reweight") o.method = ConditionedMethod::reweight;
  else fail(ErrorCode::config_error, "mc.method must be \"immigration\" or \"reweight\"");
  return o;
}

inline int coordinate(const ExperimentConfig& cfg, const std::string& key, int k)
{
  const auto i = cfg.integer(key, 1);
  if (i < 1 || i > k) fail(ErrorCode::config_error, "'" + key + "' must be a type in 1.." + std::to_string(k));
  return static_cast<int>(i - 1);
}

inline json lambda_json(const Vector& l) { return io::vector(l); }

// Infinite lambda has no value at t = 0, so such rows start at the first positive time.
inline std::vector<double> grid_for(const LambdaSpec& lam, const std::vector<double>& times)
{
  if (!lam.has_infinite()) return times;
  std::vector<double> out;
  for (double t : times)
    if (t > 0) out.push_back(t);
  if (out.empty()) fail(ErrorCode::config_error, "infinite lambda needs a positive time");
  return out;
}

// --- experiments ------------------------------------------------------------

inline void run_spectral(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  SpectralTolerances tol;
  tol.eig_tol = ctx.cfg.real("spectral.eig_tol", tol.eig_tol);
  tol.exp_tol = ctx.cfg.real("spectral.exp_tol", tol.exp_tol);
  const SpectralData sp = perron(model, tol);
  ctx.result["model"] = io::to_json(model);
  ctx.result["spectral"] = io::to_json(sp);

  const Matrix& D = model.D();
  const double scale = std::max(1.0, max_abs_entry(D));
  const double right = (D * sp.xi - sp.mu * sp.xi).lpNorm<Eigen::Infinity>();
  const double left = (D.transpose() * sp.eta - sp.mu * sp.eta).lpNorm<Eigen::Infinity>();
  ctx.check(right <= 1e-10 * scale, "right-eigenvector", "Perron right eigenvector of D", "residual " + fmt(right));
  ctx.check(left <= 1e-10 * scale, "left-eigenvector", "Perron left eigenvector of D", "residual " + fmt(left));
  ctx.check(std::abs(sp.xi.sum() - 1) <= 1e-12, "xi-normalization", "(xi, 1) = 1", "sum " + io::format(sp.xi.sum()));
  ctx.check(std::abs(sp.xi.dot(sp.eta) - 1) <= 1e-12, "eta-normalization", "(xi, eta) = 1",
            "pairing " + io::format(sp.xi.dot(sp.eta)));

  if (ctx.cfg.has("exp_times")) {
    auto os = ctx.open("matrix_exp.csv");
    os << "t,i,j,series,eigen,rank_one\n";
    json rows = json::array();
    double worst = 0;
    for (double t : ctx.cfg.reals("exp_times")) {
      if (!(t >= 0) || !std::isfinite(t)) fail(ErrorCode::config_error, "exp_times must be finite and >= 0");
      const Matrix A = matrix_exp(D, t);
      const Matrix B = matrix_exp_eigen(D, t);
      const Matrix R = sp.P ? Matrix(std::exp(sp.mu * t) * *sp.P) : Matrix(Matrix::Constant(D.rows(), D.cols(), NAN));
      worst = std::max(worst, (A - B).lpNorm<Eigen::Infinity>() / std::max(1e-300, A.lpNorm<Eigen::Infinity>()));
      for (Eigen::Index i = 0; i < D.rows(); ++i)
        for (Eigen::Index j = 0; j < D.cols(); ++j)
          os << io::format(t) << ',' << i + 1 << ',' << j + 1 << ',' << io::format(A(i, j)) << ',' << io::format(B(i, j))
             << ',' << io::format(R(i, j)) << '\n';
      json row{{"t", t}, {"exp", io::matrix(A)}};
      if (sp.irreducible) {
        const auto ro = rank_one_asymptote(D, sp, t);
        const double gap = inf_norm(A - ro.value);
        row["rank_one_gap"] = io::number(gap);
        row["rank_one_bound"] = io::number(ro.constant * std::exp((sp.mu - sp.gamma / 2) * t));
        row["burn_in"] = io::number(ro.burn_in);
        if (t >= ro.burn_in)
          ctx.check(gap <= ro.constant * std::exp((sp.mu - sp.gamma / 2) * t) * (1 + 1e-9), "rank-one-bound@" + io::format(t),
                    "rank-one convergence of e^{Dt} at rate gamma/2", "gap " + fmt(gap));
      }
      rows.push_back(row);
    }
    ctx.result["matrix_exp"] = rows;
    ctx.check(worst <= 1e-9, "matrix-exp-two-routes", "shifted Taylor series vs eigendecomposition",
              "max relative difference " + fmt(worst));
  }
}

inline void run_cumulant_table(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  const int k = model.k();
  const auto all_times = ctx.cfg.grid("times");
  const SolverConfig scfg = solver(ctx.cfg);
  const auto ls = lambdas(ctx.cfg, k, true);
  std::optional<Vector> v0;
  if (ctx.cfg.has("v0")) {
    v0 = ctx.cfg.vector("v0");
    if (v0->size() != k) fail(ErrorCode::config_error, "v0 must have length k");
  }

  json rows = json::array();
  double worst_flow = 0, worst_cmp = 0;
  bool nonneg = true;
  for (std::size_t n = 0; n < ls.size(); ++n) {
    const LambdaSpec lam = lambda_spec(ls[n]);
    const auto times = grid_for(lam, all_times);
    CumulantTrajectory tr = (v0 && !lam.has_infinite()) ? solve_v(model, lam, *v0, times, scfg) : solve_u(model, lam, times, scfg);
    const std::string name = "cumulant_" + std::to_string(n + 1) + ".csv";
    auto os = ctx.open(name);
    tr.write_csv(os);

    for (std::size_t j = 0; j < times.size(); ++j)
      if (times[j] > 0 && (!tr.u[j].allFinite() || (tr.u[j].array() < 0).any())) nonneg = false;

    if (!lam.has_infinite())
      for (std::size_t j = 0; j < times.size(); ++j) {
        const Vector lin = matrix_exp(model.D(), times[j]) * lam.values;
        for (int i = 0; i < k; ++i) worst_cmp = std::max(worst_cmp, tr.u[j](i) - lin(i) - 1e-9 * std::abs(lin(i)));
      }

    // u_{t} = u_{t - s}(u_s) with s the middle of the grid.
    const std::size_t mid = times.size() / 2;
    if (times.size() >= 3 && times[mid] > 0) {
      std::vector<double> rest;
      for (std::size_t j = mid; j < times.size(); ++j) rest.push_back(times[j] - times[mid]);
      const auto again = solve_u(model, LambdaSpec::finite(tr.u[mid]), rest, scfg);
      for (std::size_t j = mid; j < times.size(); ++j) {
        const Vector& a = tr.u[j];
        const Vector& b = again.u[j - mid];
        worst_flow = std::max(worst_flow, (a - b).lpNorm<Eigen::Infinity>() / std::max(1e-300, a.lpNorm<Eigen::Infinity>()));
      }
    }
    rows.push_back({{"lambda", lambda_json(ls[n])},
                    {"file", name},
                    {"u_final", io::vector(tr.u.back())},
                    {"accepted_steps", tr.solver_stats.accepted},
                    {"rejected_steps", tr.solver_stats.rejected}});
  }
  ctx.result["model"] = io::to_json(model);
  ctx.result["times"] = all_times;
  ctx.result["rows"] = rows;
  ctx.check(nonneg, "nonnegativity", "cumulant stays in the nonnegative orthant", nonneg ? "ok" : "negative or non-finite entry");
  ctx.check(worst_cmp <= 0, "linear-comparison", "u_t <= e^{Dt} lambda", "largest excess " + fmt(worst_cmp));
  const double flow_tol = ctx.cfg.real("tolerance.flow", 1e-7);
  ctx.check(worst_flow <= flow_tol, "semigroup-flow", "cumulant semigroup flow property",
            "max relative difference " + fmt(worst_flow));
}

inline void run_closed_form_check(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  ClosedFormModel cf;
  try {
    cf = closed_form_model(model);
  } catch (const Error& e) {
    fail(ErrorCode::config_error, std::string("closed-form-check needs a monotype or CP model: ") + e.what());
  }
  const int k = model.k();
  const auto all_times = ctx.cfg.grid("times");
  const SolverConfig scfg = solver(ctx.cfg, 1e-12, 1e-30);
  const double tol = ctx.cfg.real("tolerance.rel", 1e-8);
  const auto ls = lambdas(ctx.cfg, k, true);

  auto os = ctx.open("closed_form.csv");
  os << "lambda_index,t,quantity,coordinate,ode,closed_form,rel_error\n";
  double worst = 0;
  std::string where;
  auto compare = [&](std::size_t n, double t, const char* what, int i, double ode, double exact) {
    const double r = exact == 0 ? (ode == 0 ? 0.0 : INFINITY) : std::abs(ode - exact) / std::abs(exact);
    os << n + 1 << ',' << io::format(t) << ',' << what << ',' << i + 1 << ',' << io::format(ode) << ',' << io::format(exact)
       << ',' << io::format(r) << '\n';
    if (r > worst) {
      worst = r;
      where = std::string(what) + "[" + std::to_string(i + 1) + "] lambda #" + std::to_string(n + 1) + " t=" + fmt(t);
    }
  };

  for (std::size_t n = 0; n < ls.size(); ++n) {
    const LambdaSpec lam = lambda_spec(ls[n]);
    const auto times = grid_for(lam, all_times);
    const auto tu = solve_u(model, lam, times, scfg);
    for (std::size_t j = 0; j < times.size(); ++j) {
      for (int i = 0; i < k; ++i) {
        double exact;
        try {
          exact = closed_form_u_coordinate(cf, lam, times[j], i);
        } catch (const Error& e) {
          if (e.code() == ErrorCode::no_closed_form) continue;
          throw;
        }
        compare(n, times[j], "u", i, tu.u[j](i), exact);
      }
    }
    if (lam.has_infinite()) continue;
    if (k == 1 || lam.values(1) == 0) {
      std::vector<std::pair<const char*, VInit>> inits{{"v_xi", VInit::xi}};
      if (k == 2) {
        inits.push_back({"v_e1", VInit::e1});
        inits.push_back({"v_e2", VInit::e2});
      }
      for (const auto& [label, init] : inits) {
        Vector start = Vector::Zero(k);
        if (init == VInit::xi) start = closed_form_xi(cf);
        else start(init == VInit::e1 ? 0 : 1) = 1;
        const auto tv = solve_v(model, lam, start, times, scfg);
        for (std::size_t j = 0; j < times.size(); ++j) {
          const Vector exact = closed_form_v(cf, lam, init, times[j]);
          for (int i = 0; i < k; ++i) compare(n, times[j], label, i, tv.v[j](i), exact(i));
        }
      }
    } else {
      Vector e2 = Vector::Zero(2);
      e2(1) = 1;
      const auto tv = solve_v(model, lam, e2, times, scfg);
      for (std::size_t j = 0; j < times.size(); ++j)
        compare(n, times[j], "v_e2", 1, tv.v[j](1), closed_form_v2_e2(cf, lam.values(1), times[j]));
    }
  }
  ctx.result["model"] = io::to_json(model);
  ctx.result["family"] = to_string(classify(model).family);
  ctx.result["max_rel_error"] = io::number(worst);
  ctx.result["worst_at"] = where;
  ctx.check(worst <= tol, "closed-form-agreement", "explicit cumulants of the monotype and CP families",
            "max relative error " + fmt(worst) + (where.empty() ? "" : " at " + where));
}

inline void run_limit_law(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  const int k = model.k();
  const Vector x0 = start_state(ctx.cfg, model);
  const ConditioningSpec cond = conditioning(ctx.cfg, k);
  std::optional<int> which;
  if (ctx.cfg.has("which_type")) which = coordinate(ctx.cfg, "which_type", k);
  const SolverConfig scfg = solver(ctx.cfg);

  LimitLawDescriptor law;
  if (cond.remote()) {
    law = longtime_law(model, cond, which, x0, scfg);
  } else {
    if (k != 1) fail(ErrorCode::config_error, "finite theta limit laws are tabulated for the monotype only");
    law = finite_theta_limit_law_monotype(model.mu(), model.c(), cond.theta);
  }
  ctx.result["model"] = io::to_json(model);
  ctx.result["conditioning"] = {{"on", cond.label()}, {"theta", io::number(cond.theta)}};
  ctx.result["law"] = io::to_json(law);

  // Optional comparison with the conditioned Laplace transform at a finite time.
  if (ctx.cfg.has("check.t") && (law.form == LawForm::gamma || law.form == LawForm::product_of_exponentials)) {
    const double t = positive(ctx.cfg, "check.t", 30);
    const double tol = ctx.cfg.real("check.tolerance", 1e-6);
    const int i = which.value_or(0);
    auto os = ctx.open("laplace.csv");
    os << "lambda,limit,conditioned_at_t\n";
    double worst = 0;
    for (double l : ctx.cfg.reals("check.lambdas", {0.1, 0.5, 1, 2, 5})) {
      Vector lam = Vector::Zero(k);
      lam(i) = l;
      const double a = law.laplace(l);
      const double b = laplace_conditioned(model, x0, lam, t, cond, scfg);
      os << io::format(l) << ',' << io::format(a) << ',' << io::format(b) << '\n';
      worst = std::max(worst, std::abs(a - b));
    }
    ctx.check(worst <= tol, "limit-vs-conditioned-laplace", law.provenance,
              "max |limit - conditioned transform at t=" + fmt(t) + "| = " + fmt(worst));
  }
  if (law.form == LawForm::numeric_laplace) {
    auto os = ctx.open("limit_table.csv");
    for (int i = 1; i <= k; ++i) os << "lambda_" << i << ',';
    os << "value\n";
    bool monotone = true;
    for (std::size_t n = 0; n < law.table.values.size(); ++n) {
      for (int i = 0; i < k; ++i) os << io::format(law.table.lambdas[n](i)) << ',';
      os << io::format(law.table.values[n]) << '\n';
      if (!(law.table.values[n] >= 0 && law.table.values[n] <= 1 + 1e-12)) monotone = false;
    }
    ctx.check(monotone, "table-in-unit-interval", law.provenance, monotone ? "ok" : "value outside [0, 1]");
  }
}

inline void run_interchange(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  const int k = model.k();
  const Vector x0 = start_state(ctx.cfg, model);
  ConditioningSpec cond = conditioning(ctx.cfg, k);
  const SolverConfig scfg = solver(ctx.cfg);
  const double tol = ctx.cfg.real("tolerance.abs", 1e-3);
  const auto ls = lambdas(ctx.cfg, k, false);

  auto os = ctx.open("interchange.csv");
  for (int i = 1; i <= k; ++i) os << "lambda_" << i << ',';
  os << "t_then_theta,theta_then_t,abs_difference\n";
  json a = json::array(), b = json::array();
  double worst = 0;
  for (const Vector& l : ls) {
    const double x = iterated_limit_t_then_theta(model, l, cond, x0, scfg);
    const double y = iterated_limit_theta_then_t(model, l, cond, x0, scfg);
    for (int i = 0; i < k; ++i) os << io::format(l(i)) << ',';
    os << io::format(x) << ',' << io::format(y) << ',' << io::format(std::abs(x - y)) << '\n';
    a.push_back(io::number(x));
    b.push_back(io::number(y));
    worst = std::max(worst, std::abs(x - y));
  }
  ctx.result["model"] = io::to_json(model);
  ctx.result["conditioning"] = cond.label();
  ctx.result["t_then_theta"] = a;
  ctx.result["theta_then_t"] = b;
  ctx.result["max_abs_difference"] = io::number(worst);
  ctx.check(worst <= tol, "limits-commute", "exchange of the t and theta limits", "max difference " + fmt(worst));
}

// Empirical Laplace transform against an exact one, within z standard errors
// plus a fixed allowance for discretization bias.
inline void laplace_check(Context& ctx, const std::vector<LaplacePoint>& emp, const std::vector<double>& exact,
                          const std::string& file, const std::string& name, const std::string& provenance)
{
  const double z = ctx.cfg.real("tolerance.z", 4);
  const double bias = ctx.cfg.real("tolerance.bias", 2e-3);
  auto os = ctx.open(file);
  const Eigen::Index k = emp.front().lambda.size();
  for (Eigen::Index i = 1; i <= k; ++i) os << "lambda_" << i << ',';
  os << "empirical,se,exact\n";
  double worst = 0;
  bool ok = true;
  for (std::size_t n = 0; n < emp.size(); ++n) {
    for (Eigen::Index i = 0; i < k; ++i) os << io::format(emp[n].lambda(i)) << ',';
    os << io::format(emp[n].value) << ',' << io::format(emp[n].se) << ',' << io::format(exact[n]) << '\n';
    const double d = std::abs(emp[n].value - exact[n]);
    if (d > z * emp[n].se + bias) ok = false;
    worst = std::max(worst, d / std::max(emp[n].se, 1e-300));
  }
  ctx.check(ok, name, provenance, "largest deviation " + fmt(worst) + " standard errors");
}

inline void run_simulate(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  const int k = model.k();
  const Vector x0 = start_state(ctx.cfg, model);
  const double t = positive(ctx.cfg, "t", 1);
  const std::size_t n = positive_count(ctx.cfg, "mc.n_paths", 10000);
  const ConditionedOptions co = mc_options(ctx, 1e-3);
  SimulationOptions so = co.sim;
  if (ctx.cfg.has("record_times")) so.record_times = ctx.cfg.reals("record_times");
  const WeightedEnsemble ens = simulate(model, x0, t, n, ctx.seed, so);
  ctx.ensemble(ens, "ensemble");
  if (ctx.cfg.boolean("output.csv", false)) {
    auto os = ctx.open("paths.csv");
    io::write_ensemble_csv(ens, os);
  }

  const Matrix X = ens.states_at(t);
  const Vector mean = X.colwise().mean().transpose();
  const Vector expected = matrix_exp(model.D().transpose(), t) * x0;
  const Vector sd = ((X.rowwise() - mean.transpose()).array().square().colwise().sum() / std::max(1.0, double(n) - 1)).sqrt();
  const double z = ctx.cfg.real("tolerance.z", 4);
  double worst = 0;
  for (int i = 0; i < k; ++i)
    worst = std::max(worst, std::abs(mean(i) - expected(i)) / std::max(sd(i) / std::sqrt(double(n)), 1e-300));
  ctx.check(worst <= z, "mean-mass", "E x_t = e^{D^T t} x_0", "largest deviation " + fmt(worst) + " standard errors");

  std::size_t extinct = 0;
  for (const auto& p : ens.paths) extinct += p.absorbed_at.has_value();
  const double q = laplace_unconditioned(model, x0, Vector::Constant(k, 1e6), t, solver(ctx.cfg));
  ctx.result["model"] = io::to_json(model);
  ctx.result["t"] = t;
  ctx.result["n_paths"] = n;
  ctx.result["mean"] = io::vector(mean);
  ctx.result["mean_exact"] = io::vector(expected);
  ctx.result["extinct_fraction"] = io::number(double(extinct) / double(n));
  ctx.result["extinction_probability_approx"] = io::number(q);

  if (ctx.cfg.has("lambdas")) {
    const auto ls = lambdas(ctx.cfg, k, false);
    const auto emp = empirical_laplace(X, ens.weight_vector(), ls);
    std::vector<double> exact;
    for (const Vector& l : ls) exact.push_back(laplace_unconditioned(model, x0, l, t, solver(ctx.cfg)));
    laplace_check(ctx, emp, exact, "laplace.csv", "laplace-transform", "E exp(-(x_t, lambda)) = exp(-(x_0, u_t))");
  }
}

inline void run_martingale_check(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  const int k = model.k();
  const Vector x0 = start_state(ctx.cfg, model);
  const ConditioningSpec cond = conditioning(ctx.cfg, k);
  if (!cond.remote()) fail(ErrorCode::config_error, "martingale-check needs conditioning.theta = inf");
  const auto times = ctx.cfg.reals("times");
  if (times.empty()) fail(ErrorCode::config_error, "times must be nonempty");
  const double t_end = *std::max_element(times.begin(), times.end());
  const std::size_t n = positive_count(ctx.cfg, "mc.n_paths", 100000);
  ConditionedOptions co = mc_options(ctx, 1e-2);
  co.sim.record_times = times;
  const HTransform h = h_transform(model, x0, cond);
  const WeightedEnsemble ens = simulate(model, x0, t_end, n, ctx.seed, co.sim);
  const double z = ctx.cfg.real("tolerance.z", 3);

  auto os = ctx.open("hweight.csv");
  os << "t,mean,se\n";
  json rows = json::array();
  for (double t : times) {
    const MeanEstimate m = mean_hweight(ens, t, h);
    os << io::format(t) << ',' << io::format(m.estimate) << ',' << io::format(m.se) << '\n';
    rows.push_back({{"t", t}, {"mean", io::number(m.estimate)}, {"se", io::number(m.se)}});
    ctx.check(std::abs(m.estimate - 1) <= z * m.se, "hweight-mean@" + io::format(t), "h-transform density is a mean-one martingale",
              "mean " + fmt(m.estimate) + " +- " + fmt(m.se));
  }
  ctx.result["model"] = io::to_json(model);
  ctx.result["h_transform"] = io::to_json(h);
  ctx.result["hweight"] = rows;

  if (ctx.cfg.has("generator.lambdas")) {
    std::vector<Vector> ls;
    for (const Vector& l : ctx.cfg.vectors("generator.lambdas")) {
      if (l.size() != k || !l.allFinite() || (l.array() < 0).any())
        fail(ErrorCode::config_error, "generator.lambdas must be finite nonnegative k-vectors");
      ls.push_back(l);
    }
    ConditionedOptions go = mc_options(ctx, 1e-3);
    const double tg = positive(ctx.cfg, "generator.t", 1);
    const std::size_t ng = positive_count(ctx.cfg, "generator.n_paths", 20000);
    const auto pts = martingale_residual_streaming(model, x0, tg, cond, ls, ng, ctx.seed ^ 0x9e3779b97f4a7c15ULL, go);
    auto gs = ctx.open("generator.csv");
    for (int i = 1; i <= k; ++i) gs << "lambda_" << i << ',';
    gs << "residual,se\n";
    json g = json::array();
    for (const auto& p : pts) {
      for (int i = 0; i < k; ++i) gs << io::format(p.lambda(i)) << ',';
      gs << io::format(p.residual.estimate) << ',' << io::format(p.residual.se) << '\n';
      g.push_back({{"lambda", io::vector(p.lambda)}, {"residual", io::number(p.residual.estimate)}, {"se", io::number(p.residual.se)}});
      ctx.check(std::abs(p.residual.estimate) <= z * p.residual.se + ctx.cfg.real("tolerance.bias", 2e-3),
                "generator-residual", "Dynkin martingale of the conditioned generator",
                "residual " + fmt(p.residual.estimate) + " +- " + fmt(p.residual.se));
    }
    ctx.result["generator"] = g;
  }
}

inline std::optional<LimitLawDescriptor> cdf_law(const LimitLawDescriptor& law)
{
  if (law.form == LawForm::gamma || law.form == LawForm::product_of_exponentials) return law;
  return std::nullopt;
}

inline void run_conditioned_sample(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  const int k = model.k();
  const Vector x0 = start_state(ctx.cfg, model);
  const ConditioningSpec cond = conditioning(ctx.cfg, k);
  const double t = positive(ctx.cfg, "t", 1);
  const std::size_t n = positive_count(ctx.cfg, "mc.n_paths", 10000);
  ConditionedOptions co = mc_options(ctx, 1e-3);
  if (ctx.cfg.has("record_times")) co.sim.record_times = ctx.cfg.reals("record_times");
  const WeightedEnsemble ens = sample_conditioned(model, x0, t, cond, n, ctx.seed, co);
  ctx.ensemble(ens, "ensemble");

  ctx.result["model"] = io::to_json(model);
  ctx.result["conditioning"] = {{"on", cond.label()}, {"theta", io::number(cond.theta)}};
  ctx.result["scheme"] = to_string(ens.scheme);
  ctx.result["n_paths"] = ens.paths.size();
  ctx.result["n_simulated"] = ens.n_simulated;
  ctx.result["acceptance_rate"] = io::number(ens.acceptance_rate);
  ctx.result["n_effective"] = io::number(n_effective(ens.weight_vector()));

  if (ctx.cfg.has("lambdas")) {
    const auto ls = lambdas(ctx.cfg, k, false);
    const auto emp = empirical_laplace(ens, t, ls);
    std::vector<double> exact;
    for (const Vector& l : ls) exact.push_back(laplace_conditioned(model, x0, l, t, cond, solver(ctx.cfg)));
    laplace_check(ctx, emp, exact, "laplace.csv", "conditioned-laplace", "Laplace transform of the conditioned law at time t");
  }

  if (ctx.cfg.has("ks.threshold")) {
    const int i = coordinate(ctx.cfg, "ks.type", k);
    LimitLawDescriptor ref;
    if (cond.remote()) ref = longtime_law(model, cond, i, x0, solver(ctx.cfg));
    else if (k == 1) ref = finite_theta_limit_law_monotype(model.mu(), model.c(), cond.theta);
    else fail(ErrorCode::config_error, "finite theta reference laws exist for the monotype only");
    if (!cdf_law(ref)) fail(ErrorCode::config_error, std::string("the limit law is ") + to_string(ref.form) + ", which has no CDF");
    const GofReport rep = ks_weighted(ens, t, i, ref, ctx.cfg.real("ks.threshold"), ctx.cfg.real("ks.scale", 1));
    ctx.result["ks"] = io::to_json(rep);
    ctx.check(rep.pass, "ks-limit-law", ref.provenance, "KS " + fmt(rep.statistic) + " vs threshold " + fmt(rep.threshold));
  }
}

inline void run_explosion(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  const int k = model.k();
  if (model.criticality() != Criticality::critical) fail(ErrorCode::config_error, "explosion needs a critical model");
  const Vector x0 = start_state(ctx.cfg, model);
  const ConditioningSpec cond = conditioning(ctx.cfg, k);
  auto times = ctx.cfg.reals("times");
  if (times.size() < 2) fail(ErrorCode::config_error, "times needs at least two entries");
  std::sort(times.begin(), times.end());
  const double M = positive(ctx.cfg, "M", 10);
  const int i = coordinate(ctx.cfg, "type", k);
  const std::size_t n = positive_count(ctx.cfg, "mc.n_paths", 10000);
  ConditionedOptions co = mc_options(ctx, 1e-2);
  co.sim.record_times = times;
  const WeightedEnsemble ens = sample_conditioned(model, x0, times.back(), cond, n, ctx.seed, co);
  const auto mon = explosion_monitor(ens, times, i, M);
  auto os = ctx.open("tail.csv");
  io::write_tail_csv(mon, os);
  json rows = json::array();
  for (const auto& r : mon) rows.push_back({{"t", r.t}, {"probability", io::number(r.probability)}, {"se", io::number(r.se)}});
  ctx.result["model"] = io::to_json(model);
  ctx.result["M"] = M;
  ctx.result["tail"] = rows;
  ctx.check(strictly_decreasing(mon), "tail-decreasing", "conditioned critical mass leaves every compact set",
            "P(x_t <= M) at the last time " + fmt(mon.back().probability));

  if (ctx.cfg.has("ks.threshold")) {
    const double rate = positive(ctx.cfg, "ks.rate", 2.0 / model.c());
    const auto ref = LimitLawDescriptor::gamma(2, rate, "x_t / t under the conditioned critical law");
    const GofReport rep = ks_weighted(ens, times.back(), i, ref, ctx.cfg.real("ks.threshold"), times.back());
    ctx.result["ks"] = io::to_json(rep);
    ctx.check(rep.pass, "ks-rescaled", ref.provenance, "KS " + fmt(rep.statistic));
  }
}

inline void run_decomposable_suite(Context& ctx)
{
  const ModelParams model = ctx.cfg.model();
  const FamilyInfo fam = classify(model);
  if (fam.family != Family::cp_d && fam.family != Family::cp_d_plus)
    fail(ErrorCode::config_error, "decomposable-suite needs D = [[-alpha, alpha], [0, -beta]]");
  const Vector x0 = start_state(ctx.cfg, model);
  const double t = positive(ctx.cfg, "t", 10);
  const std::size_t n = positive_count(ctx.cfg, "mc.n_paths", 20000);
  ConditionedOptions co = mc_options(ctx, 1e-2);
  std::vector<double> monitor = ctx.cfg.reals("monitor_times", {t / 4, t / 2, t});
  std::sort(monitor.begin(), monitor.end());
  co.sim.record_times = monitor;
  const double ks_threshold = ctx.cfg.real("ks.threshold", 0.03);
  const double vanish = ctx.cfg.real("vanish.threshold", 0.05);
  const double eps = ctx.cfg.real("vanish.level", 0.1);
  const double M = positive(ctx.cfg, "M", 10);
  std::vector<std::string> labels;
  if (ctx.cfg.has("conditionings")) {
    for (const auto& node : *ctx.cfg.table()["conditionings"].as_array()) {
      const auto s = node.value<std::string>();
      if (!s) fail(ErrorCode::config_error, "conditionings must be strings");
      labels.push_back(*s);
    }
  } else {
    labels = {"whole", "type1", "type2"};
  }

  json rows = json::array();
  std::uint64_t salt = 0;
  for (const auto& label : labels) {
    const ConditioningSpec cond = parse_conditioning(label, INFINITY, 2);
    const WeightedEnsemble ens = sample_conditioned(model, x0, t, cond, n, ctx.seed + (++salt), co);
    ctx.ensemble(ens, "ensemble_" + label);
    json row{{"conditioning", label}, {"n_paths", ens.paths.size()}};
    for (int i = 0; i < 2; ++i) {
      const LimitLawDescriptor law = longtime_law(model, cond, i, x0, solver(ctx.cfg));
      const std::string name = label + "-type" + std::to_string(i + 1);
      json entry{{"law", io::to_json(law)}};
      if (law.form == LawForm::gamma) {
        const GofReport rep = ks_weighted(ens, t, i, law, ks_threshold);
        entry["ks"] = io::number(rep.statistic);
        ctx.check(rep.pass, name + "-ks", law.provenance, "KS " + fmt(rep.statistic));
      } else if (law.form == LawForm::point_mass_zero) {
        const double alive = 1 - tail_probability(ens, t, i, eps).probability;
        entry["p_above_level"] = io::number(alive);
        ctx.check(alive < vanish, name + "-vanishes", law.provenance, "P(x > " + fmt(eps) + ") = " + fmt(alive));
      } else if (law.form == LawForm::explosion) {
        const auto mon = explosion_monitor(ens, monitor, i, M);
        json tail = json::array();
        for (const auto& r : mon) tail.push_back(io::number(r.probability));
        entry["p_below_M"] = tail;
        ctx.check(strictly_decreasing(mon), name + "-explodes", law.provenance, "P(x <= M) at t " + fmt(mon.back().probability));
      }
      row["type" + std::to_string(i + 1)] = entry;
    }
    rows.push_back(row);
  }
  ctx.result["model"] = io::to_json(model);
  ctx.result["family"] = to_string(fam.family);
  ctx.result["t"] = t;
  ctx.result["suite"] = rows;

  // With the first type dominant and present, all three conditionings agree.
  if (fam.family == Family::cp_d_plus && fam.alpha < fam.beta && x0(0) > 0) {
    double worst = 0;
    for (double theta : ctx.cfg.reals("coincidence.thetas", {double(INFINITY)}))
      for (const Vector& l : ctx.cfg.vectors("coincidence.lambdas"))
        for (double s : ctx.cfg.reals("coincidence.times", {0.5, 2, 6})) {
          const double a = laplace_conditioned(model, x0, l, s, ConditioningSpec::whole(theta), solver(ctx.cfg));
          const double b = laplace_conditioned(model, x0, l, s, ConditioningSpec::type_i(0, theta), solver(ctx.cfg));
          const double c = laplace_conditioned(model, x0, l, s, ConditioningSpec::type_i(1, theta), solver(ctx.cfg));
          worst = std::max({worst, std::abs(a - b), std::abs(a - c)});
        }
    ctx.result["coincidence_max_difference"] = io::number(worst);
    ctx.check(worst <= ctx.cfg.real("coincidence.tolerance", 1e-8), "conditionings-coincide",
              "conditioning on the last type's survival", "max difference " + fmt(worst));
  }
}

using Experiment = std::function<void(Context&)>;

inline const std::map<std::string, Experiment>& experiments()
{
  static const std::map<std::string, Experiment> m{
      {"spectral", run_spectral},
      {"cumulant-table", run_cumulant_table},
      {"closed-form-check", run_closed_form_check},
      {"limit-law", run_limit_law},
      {"interchange", run_interchange},
      {"simulate", run_simulate},
      {"conditioned-sample", run_conditioned_sample},
      {"martingale-check", run_martingale_check},
      {"explosion", run_explosion},
      {"decomposable-suite", run_decomposable_suite},
  };
  return m;
}

// --- [expect] ---------------------------------------------------------------

inline void leaf_paths(const toml::table& t, const std::string& prefix, std::vector<std::pair<std::string, const toml::node*>>& out)
{
  for (const auto& [key, node] : t) {
    const std::string path = prefix.empty() ? std::string(key.str()) : prefix + "." + std::string(key.str());
    if (const auto* sub = node.as_table()) leaf_paths(*sub, path, out);
    else out.emplace_back(path, &node);
  }
}

inline std::vector<double> expected_values(const toml::node& node, const std::string& path)
{
  std::vector<double> v;
  auto one = [&](const toml::node& x) {
    if (auto s = x.value<std::string>(); s && (*s == "inf" || *s == "-inf")) return *s == "inf" ? double(INFINITY) : double(-INFINITY);
    const auto d = x.value<double>();
    if (!d) fail(ErrorCode::config_error, "expect." + path + " must be numeric");
    return *d;
  };
  if (const auto* a = node.as_array()) {
    for (const auto& x : *a) {
      if (const auto* inner = x.as_array())
        for (const auto& y : *inner) v.push_back(one(y));
      else
        v.push_back(one(x));
    }
  } else {
    v.push_back(one(node));
  }
  return v;
}

inline void flatten(const json& j, std::vector<double>& out)
{
  if (j.is_array()) {
    for (const auto& x : j) flatten(x, out);
  } else if (j.is_number()) {
    out.push_back(j.get<double>());
  } else if (j.is_string() && (j == "inf" || j == "-inf" || j == "nan")) {
    const std::string s = j.get<std::string>();
    out.push_back(s == "inf" ? INFINITY : s == "-inf" ? -INFINITY : NAN);
  } else {
    fail(ErrorCode::config_error, "expectation refers to a non-numeric result entry");
  }
}

// Every [expect] leaf names a result.json entry by dotted path. The values
// must agree within expect.tolerance (absolute, default 1e-8).
inline void check_expectations(Context& ctx)
{
  const auto* expect = ctx.cfg.table()["expect"].as_table();
  if (!expect) return;
  const double tol = ctx.cfg.real("expect.tolerance", 1e-8);
  std::vector<std::pair<std::string, const toml::node*>> leaves;
  leaf_paths(*expect, "", leaves);
  for (const auto& [path, node] : leaves) {
    if (path == "tolerance") continue;
    std::string ptr;
    for (std::size_t a = 0; a <= path.size();) {
      const auto b = std::min(path.find('.', a), path.size());
      ptr += "/" + path.substr(a, b - a);
      a = b + 1;
    }
    const json::json_pointer jp(ptr);
    if (!ctx.result.contains(jp)) fail(ErrorCode::config_error, "expect." + path + " does not name a result entry");
    std::vector<double> got;
    flatten(ctx.result.at(jp), got);
    const std::vector<double> want = expected_values(*node, path);
    bool ok = got.size() == want.size();
    double worst = 0;
    for (std::size_t i = 0; ok && i < got.size(); ++i) {
      const double d = (got[i] == want[i]) ? 0.0 : std::abs(got[i] - want[i]);
      worst = std::max(worst, d);
      if (!(d <= tol)) ok = false;
    }
    ctx.check(ok, "expect:" + path, "configured reference value",
              got.size() == want.size() ? "max deviation " + fmt(worst) : "length mismatch");
  }
}

// --- manifest ---------------------------------------------------------------

inline std::string toml_string(const std::string& s)
{
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

inline std::string file_sha256(const fs::path& p)
{
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return sha256_hex(ss.str());
}

inline std::string utc_timestamp()
{
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Everything above [volatile] is a function of the config and the seed.
inline void write_manifest(const Context& ctx, bool passed, double wall_seconds)
{
  std::ostringstream os;
  os << "experiment = " << toml_string(ctx.cfg.experiment()) << '\n';
  os << "config = " << toml_string(fs::path(ctx.cfg.origin()).filename().string()) << '\n';
  os << "config_sha256 = " << toml_string(ctx.cfg.hash()) << '\n';
  os << "seed = " << ctx.seed << '\n';
  os << "library_version = " << toml_string(library_version) << '\n';
  os << "checks_passed = " << (passed ? "true" : "false") << '\n';
  os << "\n[files]\n";
  for (const auto& f : ctx.files) os << toml_string(f) << " = " << toml_string(file_sha256(ctx.dir / f)) << '\n';
  os << "\n[volatile]\n";
  os << "timestamp = " << toml_string(utc_timestamp()) << '\n';
  char wall[32];
  std::snprintf(wall, sizeof wall, "%.3f", wall_seconds);
  os << "wall_seconds = " << wall << '\n';
  os << "threads = " << fellerlab::detail::resolve_threads(ctx.threads) << '\n';
  io::write_text(ctx.dir / "manifest.toml", os.str());
}

inline fs::path prepare_output(const fs::path& dir, bool force)
{
  if (fs::exists(dir)) {
    if (!force) fail(ErrorCode::config_error, "output directory " + dir.string() + " exists (use --force to replace it)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

}  // namespace detail

// Runs one experiment and writes its artifacts. Configuration problems raise
// ConfigError; failed assertions are reported through the exit code.
inline RunSummary run_config(const ExperimentConfig& cfg, const RunOptions& opt)
{
  const auto t0 = std::chrono::steady_clock::now();
  if (opt.subcommand != "run") {
    const auto it = subcommand_experiments().find(opt.subcommand);
    if (it == subcommand_experiments().end()) fail(ErrorCode::config_error, "unknown subcommand " + opt.subcommand);
    if (std::find(it->second.begin(), it->second.end(), cfg.experiment()) == it->second.end())
      fail(ErrorCode::config_error, "experiment '" + cfg.experiment() + "' does not belong to subcommand " + opt.subcommand);
  }
  const std::uint64_t seed = opt.seed ? *opt.seed : static_cast<std::uint64_t>(cfg.integer("seed", 1));
  const auto threads = opt.threads ? *opt.threads : static_cast<unsigned>(cfg.count("threads", 0));
  const fs::path out = opt.out ? *opt.out : fs::path(cfg.string("output.dir", "runs/" + cfg.experiment()));
  cfg.model();

  detail::Context ctx(cfg, seed, threads, detail::prepare_output(out, opt.force));
  io::write_text(ctx.dir / "config.toml", cfg.text());
  ctx.files.push_back("config.toml");

  RunSummary s;
  s.out_dir = ctx.dir;
  try {
    detail::experiments().at(cfg.experiment())(ctx);
    detail::check_expectations(ctx);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::config_error) throw;
    ctx.check(false, "runtime", to_string(e.code()), e.what());
  }

  ctx.result = json{{"experiment", cfg.experiment()}, {"seed", seed}, {"result", ctx.result}};
  io::write_json(ctx.dir / "result.json", ctx.result);
  ctx.files.push_back("result.json");

  json checks = json::array();
  bool passed = true;
  for (const auto& c : ctx.checks) {
    checks.push_back({{"name", c.name}, {"provenance", c.provenance}, {"pass", c.pass}, {"detail", c.detail}});
    if (!c.pass && passed) {
      passed = false;
      s.message = "assertion failed: " + c.name + " [" + c.provenance + "]: " + c.detail;
    }
  }
  io::write_json(ctx.dir / "checks.json", checks);
  ctx.files.push_back("checks.json");
  std::sort(ctx.files.begin(), ctx.files.end());

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail::write_manifest(ctx, passed, wall);
  s.checks = ctx.checks;
  s.exit_code = passed ? exit_ok : exit_failure;
  return s;
}

}  // namespace fellerlab::cli

#endif  // FELLERLAB_RUNNER_HPP
