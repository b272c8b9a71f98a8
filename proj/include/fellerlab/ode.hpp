#ifndef FELLERLAB_ODE_HPP
#define FELLERLAB_ODE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include <Eigen/Dense>

#include "error.hpp"

namespace fellerlab {

struct OdeOptions {
  double rtol = 1e-10;
  double atol = 1e-12;
  double min_step = 1e-15;  // relative to max(1, |t|)
  std::size_t max_steps = 10'000'000;
};

struct OdeStats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t evaluations = 0;
  double max_error_ratio = 0;  // largest accepted local error / tolerance
};

// Dormand-Prince 5(4) with first-same-as-last reuse and a per-component
// absolute tolerance. Rhs is callable as rhs(t, y, dy).
template <typename Rhs>
class DormandPrince {
 public:
  using Vec = Eigen::VectorXd;

  DormandPrince(Rhs rhs, OdeOptions opt, Vec atol) : rhs_(std::move(rhs)), opt_(opt), atol_(std::move(atol)) {}

  const OdeStats& stats() const { return stats_; }

  // Advances (t, y) to t_end. post(y_new, tol) may repair the proposed state
  // and returns false to abort the integration.
  template <typename Post>
  void advance(double& t, Vec& y, double t_end, Post&& post)
  {
    if (t_end <= t) return;
    const Eigen::Index n = y.size();
    if (!have_k1_ || k1_.size() != n || t != t_k1_) {
      k1_.resize(n);
      eval(t, y, k1_);
      have_k1_ = true;
      t_k1_ = t;
    }
    if (h_ <= 0) h_ = initial_step(t, y, t_end);
    Vec k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), ytmp(n), ynew(n), err(n);

    while (t < t_end) {
      if (stats_.accepted + stats_.rejected > opt_.max_steps)
        fail(ErrorCode::solver_failure, "step budget exhausted at t=" + std::to_string(t));
      double h = std::min(h_, t_end - t);
      const bool last = h >= t_end - t;
      if (h < opt_.min_step * std::max(1.0, std::abs(t)))
        fail(ErrorCode::solver_failure, "step size underflow at t=" + std::to_string(t));

      ytmp = y + h * (a21 * k1_);
      eval(t + c2 * h, ytmp, k2);
      ytmp = y + h * (a31 * k1_ + a32 * k2);
      eval(t + c3 * h, ytmp, k3);
      ytmp = y + h * (a41 * k1_ + a42 * k2 + a43 * k3);
      eval(t + c4 * h, ytmp, k4);
      ytmp = y + h * (a51 * k1_ + a52 * k2 + a53 * k3 + a54 * k4);
      eval(t + c5 * h, ytmp, k5);
      ytmp = y + h * (a61 * k1_ + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
      eval(t + h, ytmp, k6);
      ynew = y + h * (a71 * k1_ + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
      const double t_new = last ? t_end : t + h;
      eval(t_new, ynew, k7);
      err = h * (e1 * k1_ + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

      double ratio = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double sc = atol_(i) + opt_.rtol * std::max(std::abs(y(i)), std::abs(ynew(i)));
        const double r = err(i) / sc;
        ratio += r * r;
      }
      ratio = std::sqrt(ratio / static_cast<double>(n));
      if (!std::isfinite(ratio)) ratio = 1e10;

      if (ratio <= 1.0) {
        Vec tol_vec = atol_ + opt_.rtol * ynew.cwiseAbs();
        if (!post(ynew, tol_vec)) fail(ErrorCode::solver_failure, "state left the admissible set at t=" + std::to_string(t_new));
        ++stats_.accepted;
        stats_.max_error_ratio = std::max(stats_.max_error_ratio, ratio);
        t = t_new;
        y = ynew;
        eval(t, y, k1_);
        t_k1_ = t;
        const double factor = ratio == 0 ? 5.0 : std::clamp(0.9 * std::pow(ratio, -0.2), 0.2, 5.0);
        if (!last || factor < 1.0) h_ = h * factor;
      } else {
        ++stats_.rejected;
        h_ = h * std::max(0.2, 0.9 * std::pow(ratio, -0.2));
      }
    }
  }

  void advance(double& t, Vec& y, double t_end)
  {
    advance(t, y, t_end, [](Vec&, const Vec&) { return true; });
  }

 private:
  void eval(double t, const Vec& y, Vec& dy)
  {
    rhs_(t, y, dy);
    ++stats_.evaluations;
  }

  double initial_step(double t, const Vec& y, double t_end)
  {
    const Eigen::Index n = y.size();
    double d0 = 0, d1 = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sc = atol_(i) + opt_.rtol * std::abs(y(i));
      d0 += (y(i) / sc) * (y(i) / sc);
      d1 += (k1_(i) / sc) * (k1_(i) / sc);
    }
    d0 = std::sqrt(d0 / n);
    d1 = std::sqrt(d1 / n);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, t_end - t);
    Vec y1 = y + h0 * k1_;
    Vec f1(n);
    eval(t + h0, y1, f1);
    double d2 = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sc = atol_(i) + opt_.rtol * std::abs(y(i));
      const double r = (f1(i) - k1_(i)) / sc;
      d2 += r * r;
    }
    d2 = std::sqrt(d2 / n) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    return std::max(std::min(100 * h0, h1), 1e3 * opt_.min_step * std::max(1.0, std::abs(t)));
  }

  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                          a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;

  Rhs rhs_;
  OdeOptions opt_;
  Vec atol_;
  Vec k1_;
  bool have_k1_ = false;
  double t_k1_ = 0;
  double h_ = 0;
  OdeStats stats_;
};

}  // namespace fellerlab

#endif  // FELLERLAB_ODE_HPP
