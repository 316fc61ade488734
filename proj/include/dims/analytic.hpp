#pragma once

#include "dims/dynamics.hpp"

#include <memory>
#include <string>
#include <vector>

namespace dims {

// L(theta) = (1/2) theta^T A theta with A symmetric positive definite.
class QuadraticBowl final : public LossField {
 public:
  explicit QuadraticBowl(Matrix a);
  Index dim() const override { return a_.rows(); }
  double value(const Vector& theta) const override;
  double value_and_grad(const Vector& theta, Vector& grad) const override;
  void hvp(const Vector& theta, const Vector& v, Vector& out) const override;
  const Matrix& matrix() const { return a_; }

 private:
  Matrix a_;
};

// L(theta) = (||theta||^2 - radius^2)^2; the minimum set is the sphere.
class SphereResidual final : public LossField {
 public:
  SphereResidual(Index dim, double radius);
  Index dim() const override { return dim_; }
  double value(const Vector& theta) const override;
  double value_and_grad(const Vector& theta, Vector& grad) const override;
  void hvp(const Vector& theta, const Vector& v, Vector& out) const override;
  double radius() const { return radius_; }

 private:
  Index dim_;
  double radius_;
};

// Scaled two-dimensional Rastrigin surface; many separated local basins.
class Rastrigin2D final : public LossField {
 public:
  explicit Rastrigin2D(double scale);
  Index dim() const override { return 2; }
  double value(const Vector& theta) const override;
  double value_and_grad(const Vector& theta, Vector& grad) const override;
  void hvp(const Vector& theta, const Vector& v, Vector& out) const override;

 private:
  double scale_;
};

// Factory keyed by name: "bowl" (diagonal spectrum log-spaced from 1 to
// `param`), "sphere" (radius = param), "rastrigin" (scale = param).
std::unique_ptr<LossField> surface_field(const std::string& kind, Index dim,
                                         double param);

struct SweepConfig {
  int seeds = 20;
  std::vector<double> eta0_grid = {0.1, 0.5, 2.0};
  double kappa = 1.0;
  double t_end = 1e4;
  double kinetic_eps = 1e-4;
  double grad_tol = 0.0;
  double position_sigma = 1.0;
  double speed_sigma = 1.0;
  bool start_on_minimum = false;  // spheres: project the start onto the shell
  std::uint64_t base_seed = 0;
  SolverConfig solver;
  double audit_tol = 1e-2;
  double stationarity_tol = 1e-3;
};

struct TheoremRunRecord {
  int seed = 0;
  double eta0 = 0.0;
  std::string terminated_by;
  double h0 = 0.0;
  double final_kinetic = 0.0;
  double final_grad_norm = 0.0;
  int monotonicity_violations = 0;
  double audit_residual = 0.0;
  double t_epsilon = -1.0;
  double time_bound = 0.0;
  double length = 0.0;
  double length_bound = 0.0;
  bool monotone_ok = false;
  bool audit_ok = false;
  bool stationarity_ok = false;    // checked only for kinetic-event stops
  bool stationarity_checked = false;
  bool time_bound_ok = false;
  bool time_bound_checked = false;
  bool length_ok = false;
  bool length_checked = false;
  std::string error;
};

struct SuiteReport {
  std::vector<TheoremRunRecord> runs;
  // all_ok() gates on every counter except stationarity_failures, which is
  // diagnostic: finite-epsilon stops approximate the asymptotic limit.
  int monotone_failures = 0;
  int audit_failures = 0;
  int stationarity_failures = 0;
  int time_bound_failures = 0;
  int length_failures = 0;
  int run_errors = 0;
  bool all_ok() const;
  std::string to_json() const;
};

// Integrates the dissipative dynamics over a seed grid and checks the energy
// decay law, audit residual, terminal stationarity, the convergence-time
// bound, and the path-length bound. Check failures are recorded as data, not
// thrown.
SuiteReport run_theorem_suite(const LossField& field, double loss_min,
                              const SweepConfig& sweep);

}  // namespace dims
