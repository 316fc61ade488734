#include "dims/dynamics.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>

namespace dims {

namespace {

// Dormand-Prince 5(4) tableau (FSAL: stage 7 equals the next step's stage 1).
constexpr double kC2 = 1.0 / 5.0, kC3 = 3.0 / 10.0, kC4 = 4.0 / 5.0,
                 kC5 = 8.0 / 9.0;
constexpr double kA21 = 1.0 / 5.0;
constexpr double kA31 = 3.0 / 40.0, kA32 = 9.0 / 40.0;
constexpr double kA41 = 44.0 / 45.0, kA42 = -56.0 / 15.0, kA43 = 32.0 / 9.0;
constexpr double kA51 = 19372.0 / 6561.0, kA52 = -25360.0 / 2187.0,
                 kA53 = 64448.0 / 6561.0, kA54 = -212.0 / 729.0;
constexpr double kA61 = 9017.0 / 3168.0, kA62 = -355.0 / 33.0,
                 kA63 = 46732.0 / 5247.0, kA64 = 49.0 / 176.0,
                 kA65 = -5103.0 / 18656.0;
constexpr double kB1 = 35.0 / 384.0, kB3 = 500.0 / 1113.0, kB4 = 125.0 / 192.0,
                 kB5 = -2187.0 / 6784.0, kB6 = 11.0 / 84.0;
// Difference between the 5th and embedded 4th order weights.
constexpr double kE1 = 71.0 / 57600.0, kE3 = -71.0 / 16695.0,
                 kE4 = 71.0 / 1920.0, kE5 = -17253.0 / 339200.0,
                 kE6 = 22.0 / 525.0, kE7 = -1.0 / 40.0;
// Quartic dense-output weights.
constexpr double kD1 = -12715105075.0 / 11282082432.0;
constexpr double kD3 = 87487479700.0 / 32700410799.0;
constexpr double kD4 = -10690763975.0 / 1880347072.0;
constexpr double kD5 = 701980252875.0 / 199316789632.0;
constexpr double kD6 = -1453857185.0 / 822651844.0;
constexpr double kD7 = 69997945.0 / 29380423.0;

constexpr double kSafety = 0.9;
constexpr double kAlpha = 0.7 / 5.0;
constexpr double kBeta = 0.4 / 5.0;
constexpr double kMinFactor = 0.2;
constexpr double kMaxFactor = 5.0;
constexpr double kEventTimeTol = 1e-6;
constexpr double kUnderflowScale = 1e-14;

}  // namespace

FrictionMode friction_from_string(const std::string& name) {
  if (name == "none") return FrictionMode::None;
  if (name == "constant") return FrictionMode::Constant;
  if (name == "speed_dependent") return FrictionMode::SpeedDependent;
  throw SchemaMismatch("unknown friction mode: " + name);
}

std::string to_string(FrictionMode mode) {
  switch (mode) {
    case FrictionMode::None: return "none";
    case FrictionMode::Constant: return "constant";
    case FrictionMode::SpeedDependent: return "speed_dependent";
  }
  return "none";
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::TimeLimit: return "time_limit";
    case Termination::KineticEps: return "kinetic_eps";
    case Termination::MaxSteps: return "max_steps";
  }
  return "time_limit";
}

void DynamicsParams::validate() const {
  if (kappa < 0.0) {
    throw SchemaMismatch("kappa must be non-negative");
  }
  if (friction != FrictionMode::None && eta < 0.0) {
    throw SchemaMismatch("friction coefficient must be non-negative");
  }
}

double dissipation_coefficient(const DynamicsParams& params, double kinetic) {
  switch (params.friction) {
    case FrictionMode::None: return 0.0;
    case FrictionMode::Constant: return params.eta;
    case FrictionMode::SpeedDependent:
      return params.eta * std::sqrt(std::max(0.0, 2.0 * kinetic));
  }
  return 0.0;
}

Vector acceleration(const LossField& field, const DynamicsState& state,
                    const DynamicsParams& params, AccelerationInfo* info) {
  params.validate();
  const Index k = state.position.size();
  require_dim(state.velocity.size(), k, "acceleration: velocity");
  require_dim(field.dim(), k, "acceleration: field");
  require_finite(state.position, "acceleration: position");
  require_finite(state.velocity, "acceleration: velocity");

  Vector grad(k);
  Vector hv(k);
  const double loss = field.grad_hvp(state.position, state.velocity, grad, hv);
  const double gsq = grad.squaredNorm();
  const double gv = grad.dot(state.velocity);
  const double kinetic = 0.5 * (state.velocity.squaredNorm() + gv * gv);
  const double eta = dissipation_coefficient(params, kinetic);
  const double curvature = state.velocity.dot(hv);

  Vector accel = (-(curvature + params.kappa) / (1.0 + gsq)) * grad;
  if (eta != 0.0) {
    accel -= eta * state.velocity;
  }
  if (info != nullptr) {
    info->loss = loss;
    info->grad = std::move(grad);
    info->kinetic = kinetic;
    info->eta = eta;
  }
  return accel;
}

namespace {

struct StoredScalars {
  double t = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double kinetic = 0.0;
  double eta = 0.0;
};

}  // namespace

Trajectory integrate(const LossField& field, const DynamicsState& initial,
                     const DynamicsParams& params, const SolverConfig& solver,
                     const StopCriteria& stop) {
  params.validate();
  const Index k = initial.position.size();
  require_dim(initial.velocity.size(), k, "integrate: velocity");
  require_dim(field.dim(), k, "integrate: field");
  require_finite(initial.position, "integrate: position");
  require_finite(initial.velocity, "integrate: velocity");
  if (!(stop.t_end > initial.t)) {
    throw Error("integrate: t_end must exceed the initial time");
  }
  if (solver.atol <= 0.0 || solver.rtol < 0.0) {
    throw SchemaMismatch("integrate: tolerances must be positive");
  }
  if (stop.kinetic_eps < 0.0 || stop.grad_tol < 0.0) {
    throw SchemaMismatch("integrate: stop thresholds must be non-negative");
  }

  const Index n = 2 * k;
  const double t0 = initial.t;
  const double t_end = stop.t_end;
  const double span = t_end - t0;

  Vector y(n);
  y.head(k) = initial.position;
  y.tail(k) = initial.velocity;

  // Scratch reused across all evaluations.
  Vector pos(k), vel(k), grad(k), hv(k), igrad(k);
  long rhs_evals = 0;

  // Scalars describing the most recent right-hand-side evaluation.
  double cache_loss = 0.0, cache_gnorm = 0.0, cache_kinetic = 0.0,
         cache_eta = 0.0;

  auto rhs = [&](const Vector& state, Vector& dy) -> bool {
    pos = state.head(k);
    vel = state.tail(k);
    const double loss = field.grad_hvp(pos, vel, grad, hv);
    ++rhs_evals;
    const double gsq = grad.squaredNorm();
    const double gv = grad.dot(vel);
    const double kinetic = 0.5 * (vel.squaredNorm() + gv * gv);
    const double eta = dissipation_coefficient(params, kinetic);
    const double curvature = vel.dot(hv);
    dy.head(k) = vel;
    dy.tail(k) = (-(curvature + params.kappa) / (1.0 + gsq)) * grad;
    if (eta != 0.0) {
      dy.tail(k) -= eta * vel;
    }
    cache_loss = loss;
    cache_gnorm = std::sqrt(gsq);
    cache_kinetic = kinetic;
    cache_eta = eta;
    return std::isfinite(loss) && dy.allFinite();
  };

  // Scalars at an arbitrary state, via one gradient evaluation.
  auto probe = [&](const Vector& state, StoredScalars& out) {
    pos = state.head(k);
    vel = state.tail(k);
    const double loss = field.value_and_grad(pos, igrad);
    if (!std::isfinite(loss) || !igrad.allFinite()) {
      throw NonFiniteEvaluation("loss surface became non-finite", pos);
    }
    const double gv = igrad.dot(vel);
    out.loss = loss;
    out.grad_norm = igrad.norm();
    out.kinetic = 0.5 * (vel.squaredNorm() + gv * gv);
    out.eta = dissipation_coefficient(params, out.kinetic);
  };

  Trajectory traj;
  traj.initial = initial;

  std::vector<StoredScalars> recs;
  auto store = [&](double t, const Vector& state, const StoredScalars& s) {
    StoredScalars rec = s;
    rec.t = t;
    recs.push_back(rec);
    if (solver.store_states) {
      traj.positions.emplace_back(state.head(k));
      traj.velocities.emplace_back(state.tail(k));
    }
  };

  Vector k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n);
  Vector ytmp(n), ynew(n), yerr(n);
  Vector r1(n), r2(n), r3(n), r4(n), r5(n);

  if (!rhs(y, k1)) {
    throw NonFiniteEvaluation("dynamics are not finite at the initial state",
                              initial.position);
  }

  StoredScalars init_scalars{t0, cache_loss, cache_gnorm, cache_kinetic,
                             cache_eta};
  store(t0, y, init_scalars);

  // Immediate stop when the start already sits below the kinetic threshold.
  const bool gate_off = stop.grad_tol <= 0.0;
  if (stop.kinetic_eps > 0.0 && cache_kinetic < stop.kinetic_eps &&
      (gate_off || cache_gnorm <= stop.grad_tol)) {
    traj.terminated_by = Termination::KineticEps;
    traj.t_epsilon = t0;
    traj.last = initial;
    traj.steps = 0;
    traj.rhs_evals = rhs_evals;
    traj.loss_ref = std::isfinite(params.loss_ref) ? params.loss_ref
                                                   : init_scalars.loss;
    traj.times = {t0};
    traj.losses = {init_scalars.loss};
    traj.grad_norms = {init_scalars.grad_norm};
    EnergyRecord rec;
    rec.t = t0;
    rec.kinetic = init_scalars.kinetic;
    rec.potential = std::max(
        0.0, params.kappa * (init_scalars.loss - traj.loss_ref));
    rec.total = rec.kinetic + rec.potential;
    rec.eta = init_scalars.eta;
    rec.grad_norm = init_scalars.grad_norm;
    traj.energy = {rec};
    return traj;
  }

  // Automatic initial step: compare state and derivative scales, then refine
  // with a second derivative estimate (Hairer's starting-step heuristic).
  double h = solver.initial_step;
  if (h <= 0.0) {
    double d0 = 0.0, din = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double sc = solver.atol + solver.rtol * std::abs(y[i]);
      d0 += (y[i] / sc) * (y[i] / sc);
      din += (k1[i] / sc) * (k1[i] / sc);
    }
    d0 = std::sqrt(d0 / static_cast<double>(n));
    din = std::sqrt(din / static_cast<double>(n));
    double h0 = (d0 < 1e-5 || din < 1e-5) ? 1e-6 : 0.01 * d0 / din;
    h0 = std::min(h0, span);
    ytmp = y + h0 * k1;
    double d2 = 0.0;
    if (rhs(ytmp, k2)) {
      for (Index i = 0; i < n; ++i) {
        const double sc = solver.atol + solver.rtol * std::abs(y[i]);
        const double diff = (k2[i] - k1[i]) / sc;
        d2 += diff * diff;
      }
      d2 = std::sqrt(d2 / static_cast<double>(n)) / h0;
    }
    const double dmax = std::max(din, d2);
    const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3)
                                    : std::pow(0.01 / dmax, 0.2);
    h = std::min({100.0 * h0, h1, span});
  }
  h = std::min(h, span);

  double t = t0;
  double err_prev = 1.0;
  long attempts = 0;
  double next_emit = solver.dense_stride > 0.0 ? t0 + solver.dense_stride : 0.0;
  double kinetic_at_t = init_scalars.kinetic;
  bool done = false;

  StoredScalars scal;

  while (!done) {
    if (attempts >= solver.max_steps) {
      traj.terminated_by = Termination::MaxSteps;
      break;
    }
    if (h < kUnderflowScale * std::max(std::abs(t_end), 1.0)) {
      throw StepUnderflow("integrate: step size underflow at t = " +
                          std::to_string(t));
    }
    bool last_step = false;
    if (t + h >= t_end) {
      h = t_end - t;
      last_step = true;
    }
    ++attempts;

    bool finite = true;
    ytmp = y + (h * kA21) * k1;
    finite = rhs(ytmp, k2);
    if (finite) {
      ytmp = y + h * (kA31 * k1 + kA32 * k2);
      finite = rhs(ytmp, k3);
    }
    if (finite) {
      ytmp = y + h * (kA41 * k1 + kA42 * k2 + kA43 * k3);
      finite = rhs(ytmp, k4);
    }
    if (finite) {
      ytmp = y + h * (kA51 * k1 + kA52 * k2 + kA53 * k3 + kA54 * k4);
      finite = rhs(ytmp, k5);
    }
    if (finite) {
      ytmp = y + h * (kA61 * k1 + kA62 * k2 + kA63 * k3 + kA64 * k4 +
                      kA65 * k5);
      finite = rhs(ytmp, k6);
    }
    if (finite) {
      ynew = y + h * (kB1 * k1 + kB3 * k3 + kB4 * k4 + kB5 * k5 + kB6 * k6);
      finite = rhs(ynew, k7) && ynew.allFinite();
    }

    if (!finite) {
      h *= kMinFactor;
      continue;
    }

    yerr = h * (kE1 * k1 + kE3 * k3 + kE4 * k4 + kE5 * k5 + kE6 * k6 +
                kE7 * k7);
    double err = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double sc = solver.atol +
                        solver.rtol * std::max(std::abs(y[i]),
                                               std::abs(ynew[i]));
      const double e = yerr[i] / sc;
      err += e * e;
    }
    err = std::sqrt(err / static_cast<double>(n));

    if (!std::isfinite(err) || err > 1.0) {
      const double factor = std::isfinite(err)
                                ? std::max(kMinFactor,
                                           kSafety * std::pow(err, -0.2))
                                : kMinFactor;
      h *= std::min(1.0, factor);
      continue;
    }

    // Accepted. Cached scalars describe the stage-7 evaluation at ynew.
    const StoredScalars new_scalars{t + h, cache_loss, cache_gnorm,
                                    cache_kinetic, cache_eta};
    const double t_new = last_step ? t_end : t + h;
    ++traj.steps;

    // Dense-output interpolant over [t, t+h].
    r1 = y;
    r2 = ynew - y;
    r3 = h * k1 - r2;
    r4 = r2 - h * k7 - r3;
    r5 = h * (kD1 * k1 + kD3 * k3 + kD4 * k4 + kD5 * k5 + kD6 * k6 +
              kD7 * k7);
    auto interp = [&](double tau, Vector& out) {
      const double s = (tau - t) / h;
      const double s1 = 1.0 - s;
      out = r1 + s * (r2 + s1 * (r3 + s * (r4 + s1 * r5)));
    };

    // Kinetic-energy stop event.
    double stop_time = -1.0;
    bool stop_here = false;
    if (stop.kinetic_eps > 0.0 && new_scalars.kinetic < stop.kinetic_eps) {
      double event_t = t_new;
      Vector event_y = ynew;
      StoredScalars event_scalars = new_scalars;
      if (kinetic_at_t >= stop.kinetic_eps) {
        double lo = t;
        double hi = t_new;
        while (hi - lo > kEventTimeTol) {
          const double mid = 0.5 * (lo + hi);
          interp(mid, ytmp);
          probe(ytmp, scal);
          if (scal.kinetic < stop.kinetic_eps) {
            hi = mid;
          } else {
            lo = mid;
          }
        }
        event_t = hi;
        interp(event_t, event_y);
        probe(event_y, event_scalars);
        event_scalars.t = event_t;
      }
      if (traj.t_epsilon < 0.0) {
        traj.t_epsilon = event_t;
      }
      if (gate_off || event_scalars.grad_norm <= stop.grad_tol) {
        stop_here = true;
        stop_time = event_t;
        // Emit grid points that precede the event, then the event state.
        if (solver.dense_stride > 0.0) {
          while (next_emit < stop_time) {
            interp(next_emit, ytmp);
            probe(ytmp, scal);
            store(next_emit, ytmp, scal);
            next_emit += solver.dense_stride;
          }
        }
        store(stop_time, event_y, event_scalars);
        traj.last.t = stop_time;
        traj.last.position = event_y.head(k);
        traj.last.velocity = event_y.tail(k);
        traj.terminated_by = Termination::KineticEps;
        done = true;
      }
    }

    if (!done) {
      if (solver.dense_stride > 0.0) {
        while (next_emit <= t_new && next_emit < t_end) {
          if (next_emit > t) {
            interp(next_emit, ytmp);
            probe(ytmp, scal);
            store(next_emit, ytmp, scal);
          }
          next_emit += solver.dense_stride;
        }
        if (last_step && (recs.empty() || recs.back().t < t_new)) {
          store(t_new, ynew, new_scalars);
        }
      } else {
        store(t_new, ynew, new_scalars);
      }
      t = t_new;
      y.swap(ynew);
      k1.swap(k7);
      kinetic_at_t = new_scalars.kinetic;

      if (last_step) {
        traj.terminated_by = Termination::TimeLimit;
        traj.last.t = t;
        traj.last.position = y.head(k);
        traj.last.velocity = y.tail(k);
        done = true;
      } else {
        const double err_clamped = std::max(err, 1e-10);
        double factor = kSafety * std::pow(err_clamped, -kAlpha) *
                        std::pow(err_prev, kBeta);
        factor = std::clamp(factor, kMinFactor, kMaxFactor);
        h *= factor;
        err_prev = err_clamped;
      }
    }
  }

  if (traj.terminated_by == Termination::MaxSteps) {
    traj.last.t = t;
    traj.last.position = y.head(k);
    traj.last.velocity = y.tail(k);
    if (recs.empty() || recs.back().t < t) {
      StoredScalars s;
      probe(y, s);
      store(t, y, s);
    }
  }

  // Potential reference: explicit when given, else the best loss seen.
  double loss_ref = params.loss_ref;
  if (!std::isfinite(loss_ref)) {
    loss_ref = recs.front().loss;
    for (const auto& r : recs) {
      loss_ref = std::min(loss_ref, r.loss);
    }
  }
  traj.loss_ref = loss_ref;

  traj.times.reserve(recs.size());
  traj.losses.reserve(recs.size());
  traj.grad_norms.reserve(recs.size());
  traj.energy.reserve(recs.size());
  for (const auto& r : recs) {
    traj.times.push_back(r.t);
    traj.losses.push_back(r.loss);
    traj.grad_norms.push_back(r.grad_norm);
    EnergyRecord rec;
    rec.t = r.t;
    rec.kinetic = r.kinetic;
    rec.potential = std::max(0.0, params.kappa * (r.loss - loss_ref));
    rec.total = rec.kinetic + rec.potential;
    rec.eta = r.eta;
    rec.grad_norm = r.grad_norm;
    traj.energy.push_back(rec);
  }
  traj.rhs_evals = rhs_evals;
  return traj;
}

AuditReport energy_audit(const Trajectory& traj, const SolverConfig& solver) {
  AuditReport report;
  const std::size_t m = traj.energy.size();
  if (m < 3) {
    return report;
  }
  const double h0 = std::max(traj.energy.front().total, 1e-12);
  for (std::size_t i = 1; i + 1 < m; ++i) {
    const auto& prev = traj.energy[i - 1];
    const auto& cur = traj.energy[i];
    const auto& next = traj.energy[i + 1];
    const double dt = next.t - prev.t;
    if (dt <= 0.0) {
      continue;
    }
    const double dh = (next.total - prev.total) / dt;
    const double residual = std::abs(dh + 2.0 * cur.eta * cur.kinetic) / h0;
    report.max_residual = std::max(report.max_residual, residual);
  }
  const double slack = 10.0 * solver.atol;
  for (std::size_t i = 1; i < m; ++i) {
    if (traj.energy[i].total > traj.energy[i - 1].total + slack) {
      ++report.monotonicity_violations;
    }
  }
  return report;
}

double convergence_time_bound(double h0, double eta0, double eps) {
  if (h0 < 0.0) {
    throw SchemaMismatch("convergence_time_bound: energy must be non-negative");
  }
  if (eta0 <= 0.0 || eps <= 0.0) {
    throw SchemaMismatch(
        "convergence_time_bound: eta0 and eps must be positive");
  }
  if (h0 == 0.0) {
    return 0.0;
  }
  return h0 / (2.0 * eta0 * std::pow(eps, 1.5));
}

ArcLengthReport arc_length_and_bound(const Trajectory& traj, double kappa,
                                     double eta0) {
  if (traj.terminated_by != Termination::KineticEps) {
    throw NotConverged(
        "arc_length_and_bound: run did not stop on the kinetic-energy event");
  }
  if (eta0 <= 0.0) {
    throw SchemaMismatch("arc_length_and_bound: eta0 must be positive");
  }
  const std::size_t m = traj.energy.size();
  if (m < 2) {
    throw EmptyInput("arc_length_and_bound: trajectory too short");
  }
  ArcLengthReport report;
  for (std::size_t i = 1; i < m; ++i) {
    const double dt = traj.energy[i].t - traj.energy[i - 1].t;
    const double speed_prev = std::sqrt(2.0 * traj.energy[i - 1].kinetic);
    const double speed_cur = std::sqrt(2.0 * traj.energy[i].kinetic);
    report.length += 0.5 * (speed_prev + speed_cur) * dt;
  }
  const double t0_kinetic = traj.energy.front().kinetic;
  const double h0 = std::max(traj.energy.front().total, 1e-300);
  const double dloss = traj.losses.front() - traj.losses.back();
  report.lower_bound =
      (t0_kinetic + kappa * dloss) / (std::sqrt(2.0) * eta0 * h0);
  return report;
}

Vector christoffel_reference_acceleration(const LossField& field,
                                          const DynamicsState& state,
                                          const DynamicsParams& params,
                                          Index max_dim) {
  params.validate();
  const Index k = state.position.size();
  if (k > max_dim) {
    throw BudgetExceeded(
        "christoffel_reference_acceleration: dimension " + std::to_string(k) +
        " exceeds budget " + std::to_string(max_dim));
  }
  require_dim(state.velocity.size(), k, "christoffel_reference: velocity");

  auto [loss, g] = value_and_grad(field, state.position);
  (void)loss;
  const Matrix hess = dense_hessian(field, state.position, max_dim);
  const Vector& v = state.velocity;

  const Matrix metric = Matrix::Identity(k, k) + g * g.transpose();
  const Matrix metric_inv = metric.llt().solve(Matrix::Identity(k, k));

  // dG[m](i, j) = d G_ij / d theta_m, from dG = dg g^T + g dg^T.
  std::vector<Matrix> dG(static_cast<std::size_t>(k));
  for (Index m = 0; m < k; ++m) {
    dG[static_cast<std::size_t>(m)] =
        hess.col(m) * g.transpose() + g * hess.col(m).transpose();
  }

  // Gamma^l_ij = (1/2) G^{lm} (d_i G_mj + d_j G_mi - d_m G_ij), contracted
  // against v_i v_j term by term.
  Vector geodesic = Vector::Zero(k);
  for (Index l = 0; l < k; ++l) {
    double acc = 0.0;
    for (Index i = 0; i < k; ++i) {
      for (Index j = 0; j < k; ++j) {
        double gamma = 0.0;
        for (Index m = 0; m < k; ++m) {
          gamma += metric_inv(l, m) *
                   (dG[static_cast<std::size_t>(i)](m, j) +
                    dG[static_cast<std::size_t>(j)](m, i) -
                    dG[static_cast<std::size_t>(m)](i, j));
        }
        acc += 0.5 * gamma * v[i] * v[j];
      }
    }
    geodesic[l] = -acc;
  }

  const double kinetic = 0.5 * v.dot(metric * v);
  const double eta = dissipation_coefficient(params, kinetic);
  Vector accel = geodesic - params.kappa * (metric_inv * g);
  if (eta != 0.0) {
    accel -= eta * v;
  }
  return accel;
}

}  // namespace dims
