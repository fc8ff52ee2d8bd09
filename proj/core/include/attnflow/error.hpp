#pragma once

#include <stdexcept>
#include <string>

namespace attnflow {

enum class Errc {
  NotSymmetric,
  NotPsd,
  NotSpd,
  IllConditioned,
  DimensionMismatch,
  MissingKernel,
  NotConverged,
  UnsupportedVariant,
  SingularA,
  SingularSigma,
  EmptyMask,
  SizeMismatch,
  TooLarge,
  MarginalMismatch,
  OutOfDomain,
  Overflow,
  CommutationViolated,
  ConfigError,
  StepFailure,
  InvalidArgument,
};

const char* errc_name(Errc c) noexcept;

/// Library-wide exception carrying a machine-checkable error code.
class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace attnflow
