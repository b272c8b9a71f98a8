// Runs every acceptance criterion once and prints one PASS/FAIL line each.
// Tolerances, sample sizes and time budgets live in fellerlab/acceptance.hpp.
#include <cstdio>

#include "fellerlab/acceptance.hpp"

int main()
{
  namespace acc = fellerlab::acceptance;
  const acc::Options opt;
  int failed = 0;
  double total = 0;
  for (const auto& c : acc::criteria()) {
    const auto r = acc::run(c, opt);
    total += r.seconds;
    failed += !r.pass;
    std::printf("%s %-4s %-42s %8.2f s / %4.0f s  %s\n", r.pass ? "PASS" : "FAIL", r.id.c_str(), r.title.c_str(), r.seconds,
                r.budget, r.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu criteria, %d failed, %.1f s total\n", acc::criteria().size(), failed, total);
  return failed ? 1 : 0;
}
