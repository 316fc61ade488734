#pragma once

#include "dims/dynamics.hpp"
#include "dims/model.hpp"

#include <string>
#include <vector>

namespace dims {

enum class HessianKind { Full, Diagonal, LowRank };

HessianKind hessian_kind_from_string(const std::string& name);
std::string to_string(HessianKind kind);

// Curvature of the data-fit term at an anchor point, damped into a positive
// definite matrix by a shift delta_d = max(prior_precision, 1e-4 - lambda_min
// clipped at zero). Feeding the likelihood-only curvature plus the prior
// precision as damping reproduces the Gaussian posterior precision.
struct HessianApprox {
  HessianKind kind = HessianKind::Full;
  Vector anchor;
  double damping = 0.0;
  bool lanczos_converged = true;

  // Full: damped dense matrix with its eigendecomposition.
  Matrix dense;
  Matrix eigvecs;
  Vector eigvals;  // Full: damped spectrum; LowRank: undamped Ritz values

  // Diagonal: damped diagonal entries.
  Vector diag;

  Index dim() const { return anchor.size(); }
  Index rank() const;
  // log det of the damped approximation.
  double log_det() const;
  // Inverse-covariance square root applied to a standard normal draw:
  // returns a sample of N(0, approx^{-1}).
  Vector inverse_sqrt_apply(const Vector& eps) const;
};

struct HessianOptions {
  HessianKind kind = HessianKind::Full;
  int rank = 10;
  double prior_precision = 0.0;
  Index dense_budget = 2048;
  int lanczos_iters = 0;  // 0 picks a budget from the rank
  std::uint64_t seed = 0;
};

HessianApprox fit_hessian(const LossField& field, const Vector& anchor,
                          const HessianOptions& opts);

// Log-spaced grid with 13 points per decade triple [1e-3, 1e3].
std::vector<double> default_hyper_grid();

struct HyperGrid {
  std::vector<double> prior_precisions;
  std::vector<double> noise_vars;  // ignored for classification
};

struct TunedHypers {
  double prior_precision = 1.0;
  double noise_var = 1.0;
  double evidence = 0.0;
  Matrix evidence_table;  // rows: prior grid, cols: noise grid (1 column for
                          // classification); -inf marks invalid points
};

// Laplace evidence grid search:
//   log p(D) ~ -L(theta*) + (K/2) log delta - (1/2) log det H(delta, sigma^2)
// with the log-determinant taken from the chosen curvature approximation.
// The curvature of the data term is factored once and rescaled across the
// grid. Ties prefer the larger prior precision.
TunedHypers tune_hypers(const MLPConfig& cfg, const LossSpec& spec,
                        const Dataset& data, const Vector& theta_star,
                        const HyperGrid& grid,
                        HessianKind kind = HessianKind::Full, int rank = 10,
                        Index dense_budget = 2048);

struct VelocityDistribution {
  HessianApprox approx;
  std::uint64_t base_seed = 0;
};

// Draw sample_index's velocity from N(0, approx^{-1}); bitwise reproducible
// for a fixed (base_seed, sample_index).
Vector sample_velocity(const VelocityDistribution& dist, int sample_index);

// Map an ambient Gaussian draw onto the metric's unit ball: v = G^{-1/2} eps.
// Leaves the draw unchanged at stationary points and preserves g_norm(v) =
// ||eps||.
Vector precondition_velocity(const MetricPoint& point, const Vector& eps);
Vector precondition_velocity(const LossField& field, const Vector& theta,
                             const Vector& eps);

// Weight-space Laplace sample: anchor + velocity.
Vector sample_la(const Vector& anchor, const Vector& velocity);

// First-order prediction f(anchor) + J(anchor) (theta - anchor).
Matrix predict_linearized(const MLPConfig& cfg, const Vector& anchor,
                          const Matrix& X, const Vector& theta);

struct SampleRunResult {
  Vector theta;
  double final_loss = 0.0;
  Termination terminated_by = Termination::TimeLimit;
  bool converged = false;  // stopped through the kinetic-energy event
  double wall_time = 0.0;
  long steps = 0;
  long rhs_evals = 0;
  // Scalar records of the run; states included only when the solver config
  // asked for them.
  Trajectory trajectory;
};

// Free geodesic transport: kappa = 0, no friction, unit time horizon.
SampleRunResult sample_rla(const LossField& field, const Vector& anchor,
                           const Vector& velocity, const SolverConfig& solver,
                           double t1 = 1.0);

// Dissipative descent: kappa = 1, speed-dependent friction eta0, stopped at
// min(t1, kinetic-energy event). A run that exhausts t1 still returns its
// final state with converged = false.
SampleRunResult sample_dims(const LossField& field, const Vector& anchor,
                            const Vector& velocity, double eta0, double t1,
                            const SolverConfig& solver,
                            const StopCriteria& stop_template);

}  // namespace dims
