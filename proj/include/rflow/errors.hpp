#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rflow {

/// Base for every failure raised by the library. `stage()` names the
/// computation that failed so orchestration code can record it.
class Error : public std::runtime_error {
 public:
  Error(std::string stage, const std::string& what)
      : std::runtime_error(what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Input violates a precondition (non-SPD metric, broken constraint, ...).
class RejectedInput : public Error {
 public:
  using Error::Error;
};

/// A time step produced an invalid state; the caller should shrink dt.
class StepRejected : public Error {
 public:
  StepRejected(const std::string& what, double t, double dt)
      : Error("step", what), t_(t), dt_(dt) {}
  double time() const noexcept { return t_; }
  double dt() const noexcept { return dt_; }

 private:
  double t_;
  double dt_;
};

/// Iterative method ran out of iterations. Carries the last residual and,
/// when the method has one, the last iterate flattened to a vector.
class NonConvergence : public Error {
 public:
  NonConvergence(std::string stage, const std::string& what, double residual, std::vector<double> last = {})
      : Error(std::move(stage), what), residual_(residual), last_(std::move(last)) {}
  double residual() const noexcept { return residual_; }
  const std::vector<double>& last_iterate() const noexcept { return last_; }

 private:
  double residual_;
  std::vector<double> last_;
};

/// Gauge diffeomorphism stopped being injective on the grid proxy.
class GaugeBreakdown : public Error {
 public:
  GaugeBreakdown(const std::string& what, double t)
      : Error("gauge", what), t_(t) {}
  double time() const noexcept { return t_; }

 private:
  double t_;
};

class InsufficientData : public Error {
 public:
  using Error::Error;
};

class SolverFailure : public Error {
 public:
  using Error::Error;
};

/// Configuration text is malformed or out of range.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : Error("config", field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace rflow
