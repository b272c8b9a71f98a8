#ifndef FELLERLAB_FAMILIES_HPP
#define FELLERLAB_FAMILIES_HPP

#include <cmath>
#include <string>

#include "spectral.hpp"

namespace fellerlab {

// Closed-form families:
//   monotype    D = [mu]
//   cp_d        D = [[-alpha, alpha], [0, 0]]
//   cp_d_plus   D = [[-alpha, alpha], [0, -beta]], beta > 0
enum class Family { monotype, irreducible, cp_d, cp_d_plus, other };

inline const char* to_string(Family f)
{
  switch (f) {
    case Family::monotype: return "monotype";
    case Family::irreducible: return "irreducible";
    case Family::cp_d: return "CP-D";
    case Family::cp_d_plus: return "CP-D+";
    case Family::other: return "other";
  }
  return "other";
}

struct FamilyInfo {
  Family family = Family::other;
  double mu = 0;
  double alpha = 0;
  double beta = 0;
  double c = 0;
};

inline FamilyInfo classify(const ModelParams& model)
{
  FamilyInfo info;
  info.c = model.c();
  info.mu = model.mu();
  const Matrix& D = model.D();
  if (model.k() == 1) {
    info.family = Family::monotype;
    return info;
  }
  if (is_irreducible(D)) {
    info.family = Family::irreducible;
    return info;
  }
  if (model.k() == 2 && D(1, 0) == 0) {
    const double alpha = D(0, 1);
    const double tol = 1e-14 * std::max(1.0, alpha);
    if (alpha > 0 && std::abs(D(0, 0) + alpha) <= tol && D(1, 1) <= 0) {
      info.alpha = alpha;
      info.beta = -D(1, 1);
      info.family = info.beta == 0 ? Family::cp_d : Family::cp_d_plus;
      return info;
    }
  }
  return info;
}

inline Matrix cp_matrix(double alpha, double beta)
{
  Matrix D(2, 2);
  D << -alpha, alpha, 0.0, -beta;
  return D;
}

}  // namespace fellerlab

#endif  // FELLERLAB_FAMILIES_HPP
