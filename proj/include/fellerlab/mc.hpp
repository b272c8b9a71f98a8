#ifndef FELLERLAB_MC_HPP
#define FELLERLAB_MC_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "laws.hpp"
#include "random.hpp"
#include "spectral.hpp"

namespace fellerlab {

enum class Scheme { unconditioned, h_transform, immigration, rejection };

inline const char* to_string(Scheme s)
{
  switch (s) {
    case Scheme::unconditioned: return "unconditioned";
    case Scheme::h_transform: return "h_transform";
    case Scheme::immigration: return "immigration";
    case Scheme::rejection: return "rejection";
  }
  return "unknown";
}

class FellerPath {
 public:
  FellerPath() = default;
  FellerPath(std::shared_ptr<const std::vector<double>> grid, int k)
      : grid_(std::move(grid)), k_(k), states_(grid_->size() * static_cast<std::size_t>(k), 0.0)
  {
  }

  const std::vector<double>& times() const { return *grid_; }
  std::size_t size() const { return grid_->size(); }
  int k() const { return k_; }

  Eigen::Map<const Vector> state(std::size_t j) const { return Eigen::Map<const Vector>(states_.data() + j * k_, k_); }
  Eigen::Map<Vector> state(std::size_t j) { return Eigen::Map<Vector>(states_.data() + j * k_, k_); }

  // Index of the recorded time closest to t; throws when t is not on the grid.
  std::size_t index_of(double t) const
  {
    const auto& g = *grid_;
    auto it = std::lower_bound(g.begin(), g.end(), t - 1e-9 * std::max(1.0, std::abs(t)));
    if (it == g.end() || std::abs(*it - t) > 1e-9 * std::max(1.0, std::abs(t)))
      fail(ErrorCode::invalid_argument, "time " + std::to_string(t) + " is not on the recorded grid");
    return static_cast<std::size_t>(it - g.begin());
  }

  Eigen::Map<const Vector> state_at(double t) const { return state(index_of(t)); }

  std::optional<double> absorbed_at;

 private:
  std::shared_ptr<const std::vector<double>> grid_;
  int k_ = 0;
  std::vector<double> states_;
};

struct WeightedEnsemble {
  WeightedEnsemble(const ModelParams& m) : model(m) {}

  std::vector<FellerPath> paths;
  std::vector<double> weights;
  std::uint64_t seed = 0;
  Scheme scheme = Scheme::unconditioned;
  double theta = std::numeric_limits<double>::infinity();
  double dt = 0;
  ModelParams model;
  Vector x0;
  std::optional<HTransform> h;
  std::optional<ConditioningSpec> conditioning;
  std::size_t n_simulated = 0;
  double acceptance_rate = 1.0;

  std::size_t size() const { return paths.size(); }

  // n x k matrix of states at time t.
  Matrix states_at(double t) const
  {
    if (paths.empty()) fail(ErrorCode::empty_ensemble, "ensemble has no paths");
    const std::size_t j = paths.front().index_of(t);
    Matrix X(static_cast<Eigen::Index>(paths.size()), model.k());
    for (std::size_t p = 0; p < paths.size(); ++p) X.row(static_cast<Eigen::Index>(p)) = paths[p].state(j).transpose();
    return X;
  }

  Vector weight_vector() const { return Eigen::Map<const Vector>(weights.data(), static_cast<Eigen::Index>(weights.size())); }
};

struct SimulationOptions {
  double dt = 1e-3;
  std::vector<double> record_times;  // empty: record only 0 and t_end
  bool record_every_step = false;
  unsigned threads = 0;              // 0: hardware concurrency
};

namespace detail {

struct StepPlan {
  std::size_t n_steps = 0;
  double h = 0;
  std::shared_ptr<const std::vector<double>> grid;
  std::vector<std::size_t> record_step;  // step index of each grid entry
};

inline StepPlan plan_steps(double t_end, const SimulationOptions& opt)
{
  if (!(opt.dt > 0) || !std::isfinite(opt.dt)) fail(ErrorCode::invalid_step, "dt must be > 0");
  if (!(t_end >= 0) || !std::isfinite(t_end)) fail(ErrorCode::invalid_argument, "t_end must be finite and >= 0");
  StepPlan plan;
  plan.n_steps = t_end == 0 ? 0 : std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(t_end / opt.dt)));
  plan.h = plan.n_steps ? t_end / static_cast<double>(plan.n_steps) : 0.0;
  std::vector<std::size_t> steps;
  if (opt.record_every_step) {
    for (std::size_t s = 0; s <= plan.n_steps; ++s) steps.push_back(s);
  } else {
    steps.push_back(0);
    for (double t : opt.record_times) {
      if (t < 0 || t > t_end * (1 + 1e-12)) fail(ErrorCode::invalid_argument, "record time outside [0, t_end]");
      const double s = plan.h > 0 ? t / plan.h : 0.0;
      const auto si = static_cast<std::size_t>(std::llround(s));
      if (std::abs(s - static_cast<double>(si)) > 1e-6) fail(ErrorCode::invalid_argument, "record time is not a multiple of dt");
      steps.push_back(si);
    }
    steps.push_back(plan.n_steps);
    std::sort(steps.begin(), steps.end());
    steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  }
  auto grid = std::make_shared<std::vector<double>>();
  for (std::size_t s : steps) grid->push_back(s == plan.n_steps ? t_end : static_cast<double>(s) * plan.h);
  plan.grid = grid;
  plan.record_step = steps;
  return plan;
}

// One Strang step for every path: half drift, exact critical branching with
// optional h-transform immigration, half drift.
class Stepper {
 public:
  Stepper(const ModelParams& m, double h, const Vector* w)
      : k_(m.k()), c_(m.c()), h_(h), half_(matrix_exp(Matrix(m.D().transpose()), 0.5 * h)), w_(w)
  {
    scale_ = 0.25 * c_ * h_;
    inv_scale_ = 1.0 / scale_;
    half_scalar_ = half_(0, 0);
  }

  // Returns true if the state is identically zero afterwards.
  bool step_scalar(double& x, Xoshiro256& g, Samplers& s) const
  {
    x *= half_scalar_;
    const double df = w_ ? 4.0 : 0.0;
    if (x <= 0 && df == 0) {
      x = 0;
      return true;
    }
    x = scale_ * s.noncentral_chi2(g, df, x * inv_scale_);
    x *= half_scalar_;
    return x <= 0 && df == 0;
  }

  bool step(Vector& x, Vector& tmp, Xoshiro256& g, Samplers& s) const
  {
    tmp.noalias() = half_ * x;
    double wx = 0;
    if (w_) wx = tmp.dot(*w_);
    bool zero = true;
    for (int i = 0; i < k_; ++i) {
      const double df = (w_ && wx > 0) ? 4.0 * tmp(i) * (*w_)(i) / wx : 0.0;
      if (tmp(i) <= 0 && df <= 0) {
        tmp(i) = 0;
        continue;
      }
      tmp(i) = scale_ * s.noncentral_chi2(g, df, tmp(i) * inv_scale_);
      if (tmp(i) > 0) zero = false;
    }
    x.noalias() = half_ * tmp;
    return zero && !w_;
  }

 private:
  int k_;
  double c_, h_;
  Matrix half_;
  const Vector* w_;
  double scale_ = 0, inv_scale_ = 0, half_scalar_ = 1;
};

inline unsigned resolve_threads(unsigned requested)
{
  if (requested) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

template <typename Body>
void parallel_for(std::size_t n, unsigned threads, Body body)
{
  threads = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), std::max<std::size_t>(1, n)));
  if (threads <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([=] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

inline void check_start(const ModelParams& model, const Vector& x0)
{
  if (x0.size() != model.k() || (x0.array() < 0).any() || !x0.allFinite())
    fail(ErrorCode::invalid_argument, "x0 must be finite, >= 0 and of length k");
}

// Simulates n_paths paths and calls visit(p, s, x) with a pointer to the k
// masses after step s (s = 0 is the start), stopping after the step at which
// path p is absorbed. Paths are split across threads in contiguous chunks and
// visit must only touch per-path state.
template <typename Visit>
void for_each_path(const ModelParams& model, const Vector& x0, const StepPlan& plan, std::size_t n_paths,
                   std::uint64_t seed, unsigned threads, const Vector* w, Visit&& visit)
{
  check_start(model, x0);
  const int k = model.k();
  const Stepper stepper(model, plan.h, w);
  parallel_for(n_paths, resolve_threads(threads), [&](std::size_t lo, std::size_t hi) {
    Samplers samplers;
    Vector x(k), tmp(k);
    for (std::size_t p = lo; p < hi; ++p) {
      Xoshiro256 g(seed, p);
      x = x0;
      visit(p, std::size_t{0}, x.data());
      bool absorbed = x.isZero() && !w;
      for (std::size_t s = 1; s <= plan.n_steps && !absorbed; ++s) {
        absorbed = k == 1 ? stepper.step_scalar(x(0), g, samplers) : stepper.step(x, tmp, g, samplers);
        visit(p, s, x.data());
      }
    }
  });
}

inline std::vector<FellerPath> run_paths(const ModelParams& model, const Vector& x0, double t_end, std::size_t n_paths,
                                         std::uint64_t seed, const SimulationOptions& opt, const Vector* w)
{
  check_start(model, x0);
  const StepPlan plan = plan_steps(t_end, opt);
  const int k = model.k();
  std::vector<FellerPath> paths(n_paths);
  std::vector<std::size_t> next(n_paths, 0);
  for (auto& path : paths) path = FellerPath(plan.grid, k);
  for_each_path(model, x0, plan, n_paths, seed, opt.threads, w, [&](std::size_t p, std::size_t s, const double* x) {
    FellerPath& path = paths[p];
    std::size_t& j = next[p];
    while (j < plan.record_step.size() && plan.record_step[j] == s) path.state(j++) = Eigen::Map<const Vector>(x, k);
    // Records after absorption stay zero.
    if (s > 0 && !w && std::all_of(x, x + k, [](double v) { return v == 0; }))
      path.absorbed_at = s == plan.n_steps ? t_end : static_cast<double>(s) * plan.h;
  });
  return paths;
}

}  // namespace detail

inline WeightedEnsemble simulate(const ModelParams& model, const Vector& x0, double t_end, std::size_t n_paths,
                                 std::uint64_t seed, const SimulationOptions& opt = {})
{
  WeightedEnsemble ens(model);
  ens.paths = detail::run_paths(model, x0, t_end, n_paths, seed, opt, nullptr);
  ens.weights.assign(n_paths, 1.0);
  ens.seed = seed;
  ens.scheme = Scheme::unconditioned;
  ens.dt = detail::plan_steps(t_end, opt).h;
  ens.x0 = x0;
  ens.n_simulated = n_paths;
  return ens;
}

inline double hweight(const FellerPath& path, double t, const HTransform& h)
{
  const double den = path.state(0).dot(h.w);
  if (!(den > 0)) fail(ErrorCode::zero_denominator, "(x0, w) = 0");
  return std::exp(-h.rate * t) * path.state_at(t).dot(h.w) / den;
}

enum class ConditionedMethod { immigration, reweight };

struct ConditionedOptions {
  SimulationOptions sim{};
  ConditionedMethod method = ConditionedMethod::immigration;
  std::size_t min_accepted = 100;
};

// Paths under the conditioned law at time t. Remote survival uses either the
// immigration representation of the h-transformed dynamics (unit weights) or
// h-transform weights on unconditioned paths; finite theta keeps the
// unconditioned paths whose conditioned types are alive at t + theta.
inline WeightedEnsemble sample_conditioned(const ModelParams& model, const Vector& x0, double t,
                                           const ConditioningSpec& cond, std::size_t n_paths, std::uint64_t seed,
                                           const ConditionedOptions& opt = {})
{
  const HTransform h = h_transform(model, x0, cond);
  WeightedEnsemble ens(model);
  ens.seed = seed;
  ens.x0 = x0;
  ens.h = h;
  ens.conditioning = cond;
  ens.theta = cond.theta;
  ens.n_simulated = n_paths;
  SimulationOptions sim = opt.sim;

  if (cond.remote()) {
    ens.dt = detail::plan_steps(t, sim).h;
    if (opt.method == ConditionedMethod::immigration) {
      ens.scheme = Scheme::immigration;
      ens.paths = detail::run_paths(model, x0, t, n_paths, seed, sim, &h.w);
      ens.weights.assign(n_paths, 1.0);
      return ens;
    }
    ens.scheme = Scheme::h_transform;
    auto all = detail::run_paths(model, x0, t, n_paths, seed, sim, nullptr);
    for (auto& p : all) {
      const double wt = hweight(p, t, h);
      if (wt > 0) {
        ens.weights.push_back(wt);
        ens.paths.push_back(std::move(p));
      }
    }
    return ens;
  }

  ens.scheme = Scheme::rejection;
  const double horizon = t + cond.theta;
  sim.record_times.push_back(t);
  ens.dt = detail::plan_steps(horizon, sim).h;
  auto all = detail::run_paths(model, x0, horizon, n_paths, seed, sim, nullptr);
  const std::vector<bool> mask = cond.mask(model.k());
  for (auto& p : all) {
    const auto end = p.state(p.size() - 1);
    bool alive = false;
    for (int i = 0; i < model.k(); ++i)
      if (mask[i] && end(i) > 0) alive = true;
    if (alive) {
      ens.paths.push_back(std::move(p));
      ens.weights.push_back(1.0);
    }
  }
  ens.acceptance_rate = n_paths ? static_cast<double>(ens.paths.size()) / static_cast<double>(n_paths) : 0.0;
  if (ens.paths.size() < opt.min_accepted)
    fail(ErrorCode::too_few_survivors, std::to_string(ens.paths.size()) + " accepted paths out of " + std::to_string(n_paths));
  return ens;
}

struct MeanEstimate {
  double estimate = 0;
  double se = 0;
  std::size_t n = 0;
};

// Plain sample mean of hweight over all simulated paths of an unconditioned
// ensemble (extinct paths contribute 0).
inline MeanEstimate mean_hweight(const WeightedEnsemble& ens, double t, const HTransform& h)
{
  if (ens.paths.empty()) fail(ErrorCode::empty_ensemble, "ensemble has no paths");
  double s = 0, s2 = 0;
  for (const auto& p : ens.paths) {
    const double w = hweight(p, t, h);
    s += w;
    s2 += w * w;
  }
  const double n = static_cast<double>(ens.paths.size());
  const double mean = s / n;
  const double var = std::max(0.0, s2 / n - mean * mean) * n / std::max(1.0, n - 1);
  return {mean, std::sqrt(var / n), ens.paths.size()};
}

// Weighted estimate of E*[ e^{-(x_t,l)} - e^{-(x_0,l)} + int_0^t G(x_s) ds ]
// with G(x) = ((x, D l) + c (x, l*w)/(x, w) - c/2 (x, l*l)) e^{-(x,l)}, by the
// trapezoid rule on the recorded grid up to t.
inline MeanEstimate martingale_residual(const ModelParams& model, const HTransform& h, const Vector& lambda,
                                        const WeightedEnsemble& ens, double t)
{
  if (ens.paths.empty()) fail(ErrorCode::empty_ensemble, "ensemble has no paths");
  if (lambda.isZero()) return {0.0, 0.0, ens.paths.size()};
  const Vector Dl = model.D() * lambda;
  const Vector lw = lambda.cwiseProduct(h.w);
  const Vector l2 = lambda.cwiseProduct(lambda);
  const double c = model.c();
  auto G = [&](const Eigen::Map<const Vector>& x) {
    const double xw = x.dot(h.w);
    const double drift = x.dot(Dl) + (xw > 0 ? c * x.dot(lw) / xw : 0.0) - 0.5 * c * x.dot(l2);
    return drift * std::exp(-x.dot(lambda));
  };
  const std::size_t jt = ens.paths.front().index_of(t);
  const auto& grid = ens.paths.front().times();
  double sw = 0, swf = 0;
  std::vector<double> F(ens.paths.size());
  for (std::size_t p = 0; p < ens.paths.size(); ++p) {
    const double wt = ens.weights[p];
    if (wt <= 0) continue;
    const FellerPath& path = ens.paths[p];
    double integral = 0;
    double g_prev = G(path.state(0));
    for (std::size_t j = 1; j <= jt; ++j) {
      const double g = G(path.state(j));
      integral += 0.5 * (grid[j] - grid[j - 1]) * (g + g_prev);
      g_prev = g;
    }
    F[p] = std::exp(-path.state(jt).dot(lambda)) - std::exp(-path.state(0).dot(lambda)) + integral;
    sw += wt;
    swf += wt * F[p];
  }
  if (!(sw > 0)) fail(ErrorCode::empty_ensemble, "no positive weights");
  const double mean = swf / sw;
  double acc = 0;
  for (std::size_t p = 0; p < ens.paths.size(); ++p) {
    const double wt = ens.weights[p];
    if (wt <= 0) continue;
    acc += wt * wt * (F[p] - mean) * (F[p] - mean);
  }
  return {mean, std::sqrt(acc) / sw, ens.paths.size()};
}

struct MartingalePoint {
  Vector lambda;
  MeanEstimate residual;
};

// Same estimator as martingale_residual, accumulated while simulating so that
// the trapezoid rule runs on every step without storing paths. With the
// reweight method, paths carry hweight at t; with immigration, unit weights.
inline std::vector<MartingalePoint> martingale_residual_streaming(const ModelParams& model, const Vector& x0, double t,
                                                                  const ConditioningSpec& cond,
                                                                  const std::vector<Vector>& lambdas, std::size_t n_paths,
                                                                  std::uint64_t seed, const ConditionedOptions& opt = {})
{
  if (!cond.remote()) fail(ErrorCode::invalid_argument, "the martingale check needs remote survival");
  if (n_paths == 0) fail(ErrorCode::empty_ensemble, "n_paths must be > 0");
  const HTransform h = h_transform(model, x0, cond);
  const detail::StepPlan plan = detail::plan_steps(t, opt.sim);
  const int k = model.k();
  const std::size_t nl = lambdas.size();
  std::vector<Vector> Dl, lw, l2;
  for (const Vector& l : lambdas) {
    if (l.size() != k) fail(ErrorCode::invalid_argument, "lambda has the wrong length");
    Dl.push_back(model.D() * l);
    lw.push_back(l.cwiseProduct(h.w));
    l2.push_back(l.cwiseProduct(l));
  }
  const double c = model.c();
  const double x0w = x0.dot(h.w);
  const bool immigration = opt.method == ConditionedMethod::immigration;

  // Per path: weight, then for each lambda the running integral, last G, and
  // the boundary terms.
  std::vector<double> weight(n_paths, 0.0), F(n_paths * nl, 0.0), g_prev(n_paths * nl, 0.0);
  std::vector<std::size_t> last_step(n_paths, 0);
  std::vector<double> last_xw(n_paths, 0.0);
  std::vector<double> last_exp(n_paths * nl, 1.0);

  auto G = [&](const Eigen::Map<const Vector>& x, std::size_t j, double& e) {
    const double xw = x.dot(h.w);
    e = std::exp(-x.dot(lambdas[j]));
    const double drift = x.dot(Dl[j]) + (xw > 0 ? c * x.dot(lw[j]) / xw : 0.0) - 0.5 * c * x.dot(l2[j]);
    return drift * e;
  };

  detail::for_each_path(model, x0, plan, n_paths, seed, opt.sim.threads, immigration ? &h.w : nullptr,
                        [&](std::size_t p, std::size_t s, const double* xp) {
                          const Eigen::Map<const Vector> x(xp, k);
                          for (std::size_t j = 0; j < nl; ++j) {
                            double e;
                            const double g = G(x, j, e);
                            if (s == 0) {
                              F[p * nl + j] = -e;
                            } else {
                              F[p * nl + j] += 0.5 * plan.h * (g + g_prev[p * nl + j]);
                            }
                            g_prev[p * nl + j] = g;
                            last_exp[p * nl + j] = e;
                          }
                          last_step[p] = s;
                          last_xw[p] = x.dot(h.w);
                        });

  for (std::size_t p = 0; p < n_paths; ++p) {
    const bool reached_end = last_step[p] == plan.n_steps;
    if (immigration) weight[p] = 1.0;
    else weight[p] = reached_end ? std::exp(-h.rate * t) * last_xw[p] / x0w : 0.0;
  }

  std::vector<MartingalePoint> out;
  double sw = 0;
  for (double w : weight) sw += w;
  if (!(sw > 0)) fail(ErrorCode::empty_ensemble, "no path survived to t");
  for (std::size_t j = 0; j < nl; ++j) {
    double swf = 0;
    for (std::size_t p = 0; p < n_paths; ++p)
      if (weight[p] > 0) swf += weight[p] * (F[p * nl + j] + last_exp[p * nl + j]);
    const double mean = swf / sw;
    double acc = 0;
    for (std::size_t p = 0; p < n_paths; ++p)
      if (weight[p] > 0) {
        const double d = F[p * nl + j] + last_exp[p * nl + j] - mean;
        acc += weight[p] * weight[p] * d * d;
      }
    out.push_back({lambdas[j], {lambdas[j].isZero() ? 0.0 : mean, lambdas[j].isZero() ? 0.0 : std::sqrt(acc) / sw, n_paths}});
  }
  return out;
}

}  // namespace fellerlab

#endif  // FELLERLAB_MC_HPP
