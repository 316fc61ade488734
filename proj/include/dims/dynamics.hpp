#pragma once

#include "dims/geometry.hpp"

#include <limits>
#include <string>
#include <vector>

namespace dims {

enum class FrictionMode { None, Constant, SpeedDependent };

FrictionMode friction_from_string(const std::string& name);
std::string to_string(FrictionMode mode);

struct DynamicsParams {
  double kappa = 1.0;
  FrictionMode friction = FrictionMode::SpeedDependent;
  // eta_c for Constant friction, eta_0 for SpeedDependent friction.
  double eta = 0.1;
  // Potential reference level. NaN means the best loss seen along the run.
  double loss_ref = std::numeric_limits<double>::quiet_NaN();
  void validate() const;
};

struct DynamicsState {
  double t = 0.0;
  Vector position;
  Vector velocity;
};

struct SolverConfig {
  double atol = 1e-6;
  double rtol = 1e-7;
  double initial_step = 0.0;  // <= 0 selects the step automatically
  long max_steps = 1000000;
  // > 0 stores interpolated states on a fixed time grid; 0 stores every
  // accepted step. Initial and terminal states are always stored.
  double dense_stride = 0.0;
  // When false only per-point scalars are kept, not position/velocity states.
  bool store_states = true;
};

struct StopCriteria {
  double t_end = 10.0;
  double kinetic_eps = 1e-8;  // 0 disables the early-stop event
  double grad_tol = 1e-4;     // extra stationarity gate on the event; 0 = off
};

enum class Termination { TimeLimit, KineticEps, MaxSteps };
std::string to_string(Termination t);

struct Trajectory {
  // Scalars per stored point, aligned with `times`.
  std::vector<double> times;
  std::vector<double> losses;
  std::vector<double> grad_norms;
  std::vector<EnergyRecord> energy;

  // Full states per stored point; empty when store_states is false.
  std::vector<Vector> positions;
  std::vector<Vector> velocities;

  DynamicsState initial;
  DynamicsState last;

  Termination terminated_by = Termination::TimeLimit;
  double loss_ref = 0.0;
  // First time the kinetic energy crossed below kinetic_eps, or -1.
  double t_epsilon = -1.0;
  long steps = 0;
  long rhs_evals = 0;

  Index size() const { return static_cast<Index>(times.size()); }
};

// eta as a function of the instantaneous kinetic energy:
// None -> 0, Constant -> eta_c, SpeedDependent -> eta_0 * sqrt(2 T).
double dissipation_coefficient(const DynamicsParams& params, double kinetic);

struct AccelerationInfo {
  double loss = 0.0;
  Vector grad;
  double kinetic = 0.0;
  double eta = 0.0;
};

// Geodesic acceleration with gravity and friction:
//   a = -(v^T H v + kappa) * grad / (1 + ||grad||^2) - eta * v.
// Costs exactly one gradient and one Hessian-vector product.
Vector acceleration(const LossField& field, const DynamicsState& state,
                    const DynamicsParams& params,
                    AccelerationInfo* info = nullptr);

// Adaptive Dormand-Prince 5(4) integration of the second-order system with
// dense output, kinetic-energy stop event (sign check plus bisection to time
// tolerance 1e-6), and a proportional-integral step controller.
Trajectory integrate(const LossField& field, const DynamicsState& initial,
                     const DynamicsParams& params, const SolverConfig& solver,
                     const StopCriteria& stop);

struct AuditReport {
  // max over interior stored points of |dH/dt + 2 eta T| / H(t0)
  double max_residual = 0.0;
  // count of increases of H beyond 10 * atol between adjacent stored points
  int monotonicity_violations = 0;
};

AuditReport energy_audit(const Trajectory& traj, const SolverConfig& solver);

// Upper bound H(t0) / (2 eta_0 eps^{3/2}) on the time past t0 at which the
// kinetic energy first drops below eps under speed-dependent friction.
double convergence_time_bound(double h0, double eta0, double eps);

struct ArcLengthReport {
  double length = 0.0;
  double lower_bound = 0.0;
};

// Metric path length integral sqrt(2 T) dt over the stored grid (trapezoid)
// against the dissipative lower bound (T0 + kappa dLoss) / (sqrt(2) eta_0 H0).
// Requires a run that terminated through the kinetic-energy event.
ArcLengthReport arc_length_and_bound(const Trajectory& traj, double kappa,
                                     double eta0);

// Dense reference acceleration from the general geodesic equation: Christoffel
// symbols assembled from metric partial derivatives with explicit matrix
// inversion. O(K^3) and gated to small dimensions; exists to cross-check
// `acceleration` through an independent route.
Vector christoffel_reference_acceleration(const LossField& field,
                                          const DynamicsState& state,
                                          const DynamicsParams& params,
                                          Index max_dim = 10);

}  // namespace dims
