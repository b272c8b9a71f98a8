#ifndef FELLERLAB_ERROR_HPP
#define FELLERLAB_ERROR_HPP

#include <stdexcept>
#include <string>

namespace fellerlab {

enum class ErrorCode {
  not_metzler,
  supercritical,
  non_positive_variance,
  degenerate_perron,
  invalid_argument,
  infinite_lambda_at_zero,
  solver_failure,
  not_stabilized,
  critical_model,
  reducible_model,
  no_closed_form,
  undefined_conditioning,
  uncovered_case,
  invalid_step,
  zero_denominator,
  too_few_survivors,
  empty_ensemble,
  no_cdf,
  config_error,
};

inline const char* to_string(ErrorCode code)
{
  switch (code) {
    case ErrorCode::not_metzler: return "NotMetzler";
    case ErrorCode::supercritical: return "Supercritical";
    case ErrorCode::non_positive_variance: return "NonPositiveVariance";
    case ErrorCode::degenerate_perron: return "DegeneratePerron";
    case ErrorCode::invalid_argument: return "InvalidArgument";
    case ErrorCode::infinite_lambda_at_zero: return "InfiniteLambdaAtZero";
    case ErrorCode::solver_failure: return "SolverFailure";
    case ErrorCode::not_stabilized: return "NotStabilized";
    case ErrorCode::critical_model: return "CriticalModel";
    case ErrorCode::reducible_model: return "ReducibleModel";
    case ErrorCode::no_closed_form: return "NoClosedForm";
    case ErrorCode::undefined_conditioning: return "UndefinedConditioning";
    case ErrorCode::uncovered_case: return "UncoveredCase";
    case ErrorCode::invalid_step: return "InvalidStep";
    case ErrorCode::zero_denominator: return "ZeroDenominator";
    case ErrorCode::too_few_survivors: return "TooFewSurvivors";
    case ErrorCode::empty_ensemble: return "EmptyEnsemble";
    case ErrorCode::no_cdf: return "NoCdf";
    case ErrorCode::config_error: return "ConfigError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code)
  {
  }

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what)
{
  throw Error(code, what);
}

}  // namespace fellerlab

#endif  // FELLERLAB_ERROR_HPP
