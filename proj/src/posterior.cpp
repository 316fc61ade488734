#include "dims/posterior.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace dims {

namespace {

constexpr double kEigenFloor = 1e-4;
constexpr double kInf = std::numeric_limits<double>::infinity();

double damping_shift(double lambda_min, double prior_precision) {
  const double needed = std::max(0.0, kEigenFloor - lambda_min);
  return std::max(prior_precision, needed);
}

struct LanczosResult {
  Vector ritz_values;  // descending, size r
  Matrix ritz_vectors;
  double smallest_ritz = 0.0;
  bool converged = true;
};

// Lanczos with full reorthogonalization on the matrix-free operator
// v -> hvp(anchor, v). Returns the r largest Ritz pairs.
LanczosResult lanczos_top(const LossField& field, const Vector& anchor, int r,
                          int iters, std::uint64_t seed) {
  const Index k = anchor.size();
  const int m = std::min<Index>(k, iters);
  Matrix basis(k, m);
  Vector alpha(m);
  Vector beta(m);  // beta[j] links q_j to q_{j+1}
  auto rng = make_rng(derive_seed(seed, 0x4c414e43));
  Vector q = standard_normal(rng, k);
  q /= q.norm();
  basis.col(0) = q;

  int used = 0;
  double last_beta = 0.0;
  bool breakdown = false;
  Vector w(k);
  for (int j = 0; j < m; ++j) {
    field.hvp(anchor, basis.col(j), w);
    require_finite(w, "curvature product");
    alpha[j] = basis.col(j).dot(w);
    w -= alpha[j] * basis.col(j);
    if (j > 0) {
      w -= beta[j - 1] * basis.col(j - 1);
    }
    // Two Gram-Schmidt sweeps keep the basis orthonormal in floating point.
    for (int sweep = 0; sweep < 2; ++sweep) {
      w -= basis.leftCols(j + 1) * (basis.leftCols(j + 1).transpose() * w);
    }
    used = j + 1;
    const double norm_w = w.norm();
    const double scale = std::abs(alpha[j]) + norm_w + 1e-300;
    if (j + 1 == m || norm_w <= 1e-12 * scale) {
      last_beta = norm_w;
      breakdown = norm_w <= 1e-12 * scale;
      break;
    }
    beta[j] = norm_w;
    basis.col(j + 1) = w / norm_w;
  }

  Matrix tri = Matrix::Zero(used, used);
  for (int j = 0; j < used; ++j) {
    tri(j, j) = alpha[j];
    if (j + 1 < used) {
      tri(j, j + 1) = beta[j];
      tri(j + 1, j) = beta[j];
    }
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(tri);
  if (eig.info() != Eigen::Success) {
    throw Error("tridiagonal eigendecomposition failed");
  }
  const Vector& vals = eig.eigenvalues();  // ascending
  const Matrix& vecs = eig.eigenvectors();

  const int keep = std::min(r, used);
  LanczosResult res;
  res.ritz_values.resize(keep);
  res.ritz_vectors.resize(k, keep);
  res.smallest_ritz = vals[0];
  const double val_scale = std::max(std::abs(vals[0]), std::abs(vals[used - 1]));
  for (int i = 0; i < keep; ++i) {
    const int src = used - 1 - i;  // largest first
    res.ritz_values[i] = vals[src];
    res.ritz_vectors.col(i).noalias() =
        basis.leftCols(used) * vecs.col(src);
    // Residual bound |beta_m s_{m,i}| for the Ritz pair.
    const double resid = std::abs(last_beta * vecs(used - 1, src));
    if (!breakdown && resid > 1e-6 * std::max(val_scale, 1.0)) {
      res.converged = false;
    }
  }
  if (used < std::min<Index>(k, r) && !breakdown) {
    res.converged = false;
  }
  return res;
}

}  // namespace

HessianKind hessian_kind_from_string(const std::string& name) {
  if (name == "full") return HessianKind::Full;
  if (name == "diagonal") return HessianKind::Diagonal;
  if (name == "low_rank" || name == "lowrank") return HessianKind::LowRank;
  throw SchemaMismatch("unknown hessian kind: " + name);
}

std::string to_string(HessianKind kind) {
  switch (kind) {
    case HessianKind::Full: return "full";
    case HessianKind::Diagonal: return "diagonal";
    case HessianKind::LowRank: return "low_rank";
  }
  throw Error("invalid hessian kind");
}

Index HessianApprox::rank() const {
  switch (kind) {
    case HessianKind::Full: return dim();
    case HessianKind::Diagonal: return dim();
    case HessianKind::LowRank: return eigvals.size();
  }
  throw Error("invalid hessian kind");
}

double HessianApprox::log_det() const {
  switch (kind) {
    case HessianKind::Full: {
      double acc = 0.0;
      for (Index i = 0; i < eigvals.size(); ++i) {
        if (eigvals[i] <= 0.0) {
          throw Error("damped spectrum is not positive definite");
        }
        acc += std::log(eigvals[i]);
      }
      return acc;
    }
    case HessianKind::Diagonal: {
      double acc = 0.0;
      for (Index i = 0; i < diag.size(); ++i) {
        if (diag[i] <= 0.0) {
          throw Error("damped diagonal is not positive");
        }
        acc += std::log(diag[i]);
      }
      return acc;
    }
    case HessianKind::LowRank: {
      if (damping <= 0.0) {
        throw Error("low-rank approximation requires positive damping");
      }
      double acc =
          static_cast<double>(dim() - eigvals.size()) * std::log(damping);
      for (Index i = 0; i < eigvals.size(); ++i) {
        const double shifted = eigvals[i] + damping;
        if (shifted <= 0.0) {
          throw Error("damped Ritz spectrum is not positive");
        }
        acc += std::log(shifted);
      }
      return acc;
    }
  }
  throw Error("invalid hessian kind");
}

Vector HessianApprox::inverse_sqrt_apply(const Vector& eps) const {
  require_dim(eps.size(), dim(), "gaussian draw");
  switch (kind) {
    case HessianKind::Full: {
      Vector proj = eigvecs.transpose() * eps;
      for (Index i = 0; i < proj.size(); ++i) {
        if (eigvals[i] <= 0.0) {
          throw Error("damped spectrum is not positive definite");
        }
        proj[i] /= std::sqrt(eigvals[i]);
      }
      return eigvecs * proj;
    }
    case HessianKind::Diagonal: {
      Vector out(eps.size());
      for (Index i = 0; i < eps.size(); ++i) {
        if (diag[i] <= 0.0) {
          throw Error("damped diagonal is not positive");
        }
        out[i] = eps[i] / std::sqrt(diag[i]);
      }
      return out;
    }
    case HessianKind::LowRank: {
      if (damping <= 0.0) {
        throw Error("low-rank approximation requires positive damping");
      }
      const double tail = 1.0 / std::sqrt(damping);
      Vector proj = eigvecs.transpose() * eps;
      for (Index i = 0; i < proj.size(); ++i) {
        const double shifted = eigvals[i] + damping;
        if (shifted <= 0.0) {
          throw Error("damped Ritz spectrum is not positive");
        }
        proj[i] *= 1.0 / std::sqrt(shifted) - tail;
      }
      return tail * eps + eigvecs * proj;
    }
  }
  throw Error("invalid hessian kind");
}

HessianApprox fit_hessian(const LossField& field, const Vector& anchor,
                          const HessianOptions& opts) {
  require_dim(anchor.size(), field.dim(), "anchor");
  require_finite(anchor, "anchor");
  if (opts.prior_precision < 0.0) {
    throw Error("prior precision must be non-negative");
  }
  const Index k = anchor.size();

  HessianApprox out;
  out.kind = opts.kind;
  out.anchor = anchor;

  switch (opts.kind) {
    case HessianKind::Full: {
      Matrix h = dense_hessian(field, anchor, opts.dense_budget);
      Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
      if (eig.info() != Eigen::Success) {
        throw Error("eigendecomposition failed");
      }
      const double lambda_min = eig.eigenvalues()[0];
      out.damping = damping_shift(lambda_min, opts.prior_precision);
      out.dense = h + out.damping * Matrix::Identity(k, k);
      out.eigvecs = eig.eigenvectors();
      out.eigvals = eig.eigenvalues().array() + out.damping;
      break;
    }
    case HessianKind::Diagonal: {
      Vector d(k);
      Vector basis = Vector::Zero(k);
      Vector col(k);
      for (Index i = 0; i < k; ++i) {
        basis[i] = 1.0;
        field.hvp(anchor, basis, col);
        basis[i] = 0.0;
        d[i] = col[i];
      }
      require_finite(d, "curvature diagonal");
      out.damping = damping_shift(d.minCoeff(), opts.prior_precision);
      out.diag = d.array() + out.damping;
      break;
    }
    case HessianKind::LowRank: {
      if (opts.rank < 1) {
        throw Error("low-rank approximation needs rank >= 1");
      }
      const int r = static_cast<int>(std::min<Index>(opts.rank, k));
      const int iters =
          opts.lanczos_iters > 0
              ? opts.lanczos_iters
              : static_cast<int>(std::min<Index>(k, std::max(2 * r + 20, 40)));
      LanczosResult lan = lanczos_top(field, anchor, r, iters, opts.seed);
      // Directions outside the captured subspace may be flat; assume the
      // worst curvature seen (or zero) when sizing the shift.
      const double lambda_min = std::min(0.0, lan.smallest_ritz);
      out.damping = damping_shift(lambda_min, opts.prior_precision);
      out.eigvals = lan.ritz_values;
      out.eigvecs = lan.ritz_vectors;
      out.lanczos_converged = lan.converged;
      break;
    }
  }
  return out;
}

std::vector<double> default_hyper_grid() {
  std::vector<double> grid(13);
  for (int i = 0; i < 13; ++i) {
    grid[static_cast<std::size_t>(i)] =
        std::pow(10.0, -3.0 + 0.5 * static_cast<double>(i));
  }
  return grid;
}

namespace {

// Spectrum summary of the data-term curvature, reusable across the grid.
struct CurvatureSpectrum {
  HessianKind kind = HessianKind::Full;
  Vector values;  // eigenvalues, diagonal entries, or Ritz values
  Index dim = 0;

  // log det(Q / sigma2 + delta_d I) where delta_d applies the same
  // eigenvalue-floor shift the fitted approximation would use, so indefinite
  // spectra stay usable across the grid. Missing low-rank directions count as
  // flat. Returns -inf only for non-finite spectra.
  double log_det(double delta, double sigma2) const {
    double lambda_min = 0.0;
    if (values.size() > 0) {
      lambda_min = values.minCoeff() / sigma2;
    }
    if (kind == HessianKind::LowRank) {
      lambda_min = std::min(lambda_min, 0.0);
    }
    const double shift = damping_shift(lambda_min, delta);
    double acc = 0.0;
    if (kind == HessianKind::LowRank) {
      acc += static_cast<double>(dim - values.size()) * std::log(shift);
    }
    for (Index i = 0; i < values.size(); ++i) {
      const double shifted = values[i] / sigma2 + shift;
      if (!(shifted > 0.0) || !std::isfinite(shifted)) {
        return -kInf;
      }
      acc += std::log(shifted);
    }
    return acc;
  }
};

CurvatureSpectrum curvature_spectrum(const LossField& field,
                                     const Vector& anchor, HessianKind kind,
                                     int rank, Index dense_budget) {
  CurvatureSpectrum spec;
  spec.kind = kind;
  spec.dim = field.dim();
  switch (kind) {
    case HessianKind::Full: {
      Matrix h = dense_hessian(field, anchor, dense_budget);
      Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
      if (eig.info() != Eigen::Success) {
        throw Error("eigendecomposition failed");
      }
      spec.values = eig.eigenvalues();
      break;
    }
    case HessianKind::Diagonal: {
      const Index k = field.dim();
      spec.values.resize(k);
      Vector basis = Vector::Zero(k);
      Vector col(k);
      for (Index i = 0; i < k; ++i) {
        basis[i] = 1.0;
        field.hvp(anchor, basis, col);
        basis[i] = 0.0;
        spec.values[i] = col[i];
      }
      break;
    }
    case HessianKind::LowRank: {
      const int r = static_cast<int>(std::min<Index>(rank, field.dim()));
      const int iters = static_cast<int>(
          std::min<Index>(field.dim(), std::max(2 * r + 20, 40)));
      LanczosResult lan = lanczos_top(field, anchor, r, iters, /*seed=*/0);
      spec.values = lan.ritz_values;
      break;
    }
  }
  return spec;
}

}  // namespace

TunedHypers tune_hypers(const MLPConfig& cfg, const LossSpec& spec,
                        const Dataset& data, const Vector& theta_star,
                        const HyperGrid& grid, HessianKind kind, int rank,
                        Index dense_budget) {
  cfg.validate();
  spec.validate();
  data.validate(spec.kind);
  require_dim(theta_star.size(), cfg.param_count(), "theta");
  if (grid.prior_precisions.empty()) {
    throw EmptyInput("prior precision grid is empty");
  }
  const bool regression = spec.kind == Likelihood::GaussianRegression;
  std::vector<double> noise_grid =
      regression ? grid.noise_vars : std::vector<double>{1.0};
  if (noise_grid.empty()) {
    throw EmptyInput("noise variance grid is empty");
  }
  for (double d : grid.prior_precisions) {
    if (!(d > 0.0)) throw Error("prior precisions must be positive");
  }
  for (double s : noise_grid) {
    if (!(s > 0.0)) throw Error("noise variances must be positive");
  }

  // Data-term curvature at unit noise variance; the grid rescales it.
  LossSpec base = spec;
  base.noise_var = 1.0;
  MlpLossField data_field(cfg, base, data, /*include_prior=*/false);
  CurvatureSpectrum curv =
      curvature_spectrum(data_field, theta_star, kind, rank, dense_budget);

  const double n = static_cast<double>(data.size());
  const double k = static_cast<double>(cfg.param_count());
  const double theta_sq = theta_star.squaredNorm();
  constexpr double kLog2Pi = 1.8378770664093454836;

  // Base data fit: squared error sum for regression, summed cross entropy
  // (noise-free constant terms included) for classification.
  double sse = 0.0;
  double ce = 0.0;
  if (regression) {
    Matrix out = mlp_forward(cfg, theta_star, data.X);
    sse = (out.col(0) - data.y).squaredNorm();
  } else {
    ce = data_field.value(theta_star);
  }

  TunedHypers best;
  best.evidence = -kInf;
  best.evidence_table.resize(
      static_cast<Index>(grid.prior_precisions.size()),
      static_cast<Index>(noise_grid.size()));

  for (std::size_t j = 0; j < noise_grid.size(); ++j) {
    const double sigma2 = noise_grid[j];
    const double data_loss =
        regression ? sse / (2.0 * sigma2) + 0.5 * n * (kLog2Pi + std::log(sigma2))
                   : ce;
    for (std::size_t i = 0; i < grid.prior_precisions.size(); ++i) {
      const double delta = grid.prior_precisions[i];
      const double logdet = curv.log_det(delta, sigma2);
      double ev = -kInf;
      if (std::isfinite(logdet)) {
        const double joint = data_loss + 0.5 * delta * theta_sq;
        ev = -joint + 0.5 * k * std::log(delta) - 0.5 * logdet;
      }
      best.evidence_table(static_cast<Index>(i), static_cast<Index>(j)) = ev;
      const bool better =
          ev > best.evidence ||
          (ev == best.evidence && delta > best.prior_precision);
      if (better) {
        best.evidence = ev;
        best.prior_precision = delta;
        best.noise_var = sigma2;
      }
    }
  }
  if (!std::isfinite(best.evidence)) {
    throw NotConverged("evidence is undefined over the whole grid");
  }
  return best;
}

Vector sample_velocity(const VelocityDistribution& dist, int sample_index) {
  if (sample_index < 0) {
    throw Error("sample index must be non-negative");
  }
  auto rng = make_rng(
      derive_seed(dist.base_seed, static_cast<std::uint64_t>(sample_index)));
  Vector eps = standard_normal(rng, dist.approx.dim());
  return dist.approx.inverse_sqrt_apply(eps);
}

Vector precondition_velocity(const MetricPoint& point, const Vector& eps) {
  return metric_sqrt_inverse_apply(point, eps);
}

Vector precondition_velocity(const LossField& field, const Vector& theta,
                             const Vector& eps) {
  return metric_sqrt_inverse_apply(metric_point(field, theta), eps);
}

Vector sample_la(const Vector& anchor, const Vector& velocity) {
  require_dim(velocity.size(), anchor.size(), "velocity");
  return anchor + velocity;
}

Matrix predict_linearized(const MLPConfig& cfg, const Vector& anchor,
                          const Matrix& X, const Vector& theta) {
  require_dim(theta.size(), anchor.size(), "theta");
  Vector tangent = theta - anchor;
  Matrix out = mlp_forward(cfg, anchor, X);
  out += network_jvp(cfg, anchor, X, tangent);
  return out;
}

namespace {

SampleRunResult run_dynamics(const LossField& field, const Vector& anchor,
                             const Vector& velocity,
                             const DynamicsParams& params,
                             const SolverConfig& solver,
                             const StopCriteria& stop) {
  DynamicsState init;
  init.t = 0.0;
  init.position = anchor;
  init.velocity = velocity;

  const auto start = std::chrono::steady_clock::now();
  Trajectory traj = integrate(field, init, params, solver, stop);
  const auto end = std::chrono::steady_clock::now();

  SampleRunResult res;
  res.theta = traj.last.position;
  res.final_loss = traj.losses.back();
  res.terminated_by = traj.terminated_by;
  res.converged = traj.terminated_by == Termination::KineticEps;
  res.wall_time = std::chrono::duration<double>(end - start).count();
  res.steps = traj.steps;
  res.rhs_evals = traj.rhs_evals;
  res.trajectory = std::move(traj);
  return res;
}

}  // namespace

SampleRunResult sample_rla(const LossField& field, const Vector& anchor,
                           const Vector& velocity, const SolverConfig& solver,
                           double t1) {
  if (!(t1 > 0.0)) {
    throw Error("transport horizon must be positive");
  }
  DynamicsParams params;
  params.kappa = 0.0;
  params.friction = FrictionMode::None;
  params.eta = 0.0;
  params.loss_ref = 0.0;

  StopCriteria stop;
  stop.t_end = t1;
  stop.kinetic_eps = 0.0;  // free transport never stops early
  stop.grad_tol = 0.0;
  return run_dynamics(field, anchor, velocity, params, solver, stop);
}

SampleRunResult sample_dims(const LossField& field, const Vector& anchor,
                            const Vector& velocity, double eta0, double t1,
                            const SolverConfig& solver,
                            const StopCriteria& stop_template) {
  if (!(eta0 > 0.0)) {
    throw Error("friction scale must be positive");
  }
  if (!(t1 > 0.0)) {
    throw Error("time horizon must be positive");
  }
  DynamicsParams params;
  params.kappa = 1.0;
  params.friction = FrictionMode::SpeedDependent;
  params.eta = eta0;

  StopCriteria stop = stop_template;
  stop.t_end = t1;
  return run_dynamics(field, anchor, velocity, params, solver, stop);
}

}  // namespace dims
