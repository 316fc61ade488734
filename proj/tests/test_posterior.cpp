// Curvature approximations against dense references, the evidence grid
// against the conjugate closed form, and the sampler primitives.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dims/analytic.hpp"
#include "dims/posterior.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

using namespace dims;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Matrix spd(Index k, double lo, double hi) {
  Matrix a = Matrix::Zero(k, k);
  for (Index i = 0; i < k; ++i) {
    a(i, i) = lo + (hi - lo) * static_cast<double>(i) /
                       std::max<Index>(1, k - 1);
  }
  return a;
}

// Feature matrix of a parameter-linear model, column j = f(X; e_j).
Matrix design_matrix(const MLPConfig& cfg, const Matrix& X) {
  const Index k = cfg.param_count();
  Matrix phi(X.rows(), k);
  Vector basis = Vector::Zero(k);
  for (Index j = 0; j < k; ++j) {
    basis[j] = 1.0;
    phi.col(j) = mlp_forward(cfg, basis, X).col(0);
    basis[j] = 0.0;
  }
  return phi;
}

}  // namespace

TEST_CASE("full curvature: damping shift, determinant, and inverse root") {
  Matrix a(3, 3);
  a.setZero();
  a.diagonal() << 2.0, 3.0, 5.0;
  QuadraticBowl bowl(a);

  HessianOptions opts;
  opts.kind = HessianKind::Full;
  opts.prior_precision = 0.5;
  Vector anchor = Vector::Zero(3);
  HessianApprox h = fit_hessian(bowl, anchor, opts);

  // Smallest eigenvalue 2 clears the floor, so the shift is the prior alone.
  CHECK(h.damping == doctest::Approx(0.5));
  CHECK(h.rank() == 3);
  Matrix expect = a + 0.5 * Matrix::Identity(3, 3);
  CHECK((h.dense - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(h.log_det() == doctest::Approx(std::log(2.5) + std::log(3.5) +
                                       std::log(5.5))
                           .epsilon(1e-12));

  auto rng = make_rng(7);
  for (int rep = 0; rep < 5; ++rep) {
    Vector eps = standard_normal(rng, 3);
    Vector v = h.inverse_sqrt_apply(eps);
    // v = M^{-1/2} eps, so the M-quadratic form restores ||eps||^2.
    CHECK(v.dot(expect * v) ==
          doctest::Approx(eps.squaredNorm()).epsilon(1e-12));
  }
}

TEST_CASE("indefinite curvature is floored to a positive spectrum") {
  // Near (0.5, 0.5) the oscillatory surface has strongly negative curvature.
  Rastrigin2D r(1.0);
  Vector anchor(2);
  anchor << 0.5, 0.5;

  HessianOptions opts;
  opts.kind = HessianKind::Full;
  opts.prior_precision = 0.0;
  HessianApprox h = fit_hessian(r, anchor, opts);

  Matrix dense = dense_hessian(r, anchor);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(dense);
  const double lambda_min = eig.eigenvalues()[0];
  REQUIRE(lambda_min < 0.0);
  CHECK(h.damping == doctest::Approx(1e-4 - lambda_min).epsilon(1e-12));
  CHECK(h.eigvals.minCoeff() >= 1e-4 * (1.0 - 1e-9));
  CHECK(std::isfinite(h.log_det()));
}

TEST_CASE("diagonal curvature keeps only the diagonal") {
  Matrix a(2, 2);
  a << 2.0, 1.0, 1.0, 3.0;
  QuadraticBowl bowl(a);

  HessianOptions opts;
  opts.kind = HessianKind::Diagonal;
  opts.prior_precision = 0.1;
  HessianApprox h = fit_hessian(bowl, Vector::Zero(2), opts);

  CHECK(h.damping == doctest::Approx(0.1));
  CHECK(h.diag[0] == doctest::Approx(2.1));
  CHECK(h.diag[1] == doctest::Approx(3.1));
  CHECK(h.log_det() ==
        doctest::Approx(std::log(2.1) + std::log(3.1)).epsilon(1e-12));

  Vector eps(2);
  eps << 1.0, -2.0;
  Vector v = h.inverse_sqrt_apply(eps);
  CHECK(v[0] == doctest::Approx(1.0 / std::sqrt(2.1)));
  CHECK(v[1] == doctest::Approx(-2.0 / std::sqrt(3.1)));
}

TEST_CASE("low-rank curvature at full rank matches the dense route") {
  Matrix a = spd(6, 1.0, 9.0);
  QuadraticBowl bowl(a);
  Vector anchor = Vector::Zero(6);

  HessianOptions full_opts;
  full_opts.kind = HessianKind::Full;
  full_opts.prior_precision = 0.5;
  HessianApprox full = fit_hessian(bowl, anchor, full_opts);

  HessianOptions lr_opts;
  lr_opts.kind = HessianKind::LowRank;
  lr_opts.rank = 6;
  lr_opts.prior_precision = 0.5;
  HessianApprox lr = fit_hessian(bowl, anchor, lr_opts);

  CHECK(lr.lanczos_converged);
  CHECK(lr.rank() == 6);
  CHECK(lr.log_det() == doctest::Approx(full.log_det()).epsilon(1e-9));

  auto rng = make_rng(13);
  Vector eps = standard_normal(rng, 6);
  Vector vf = full.inverse_sqrt_apply(eps);
  Vector vl = lr.inverse_sqrt_apply(eps);
  // Both draws have the same covariance; per-coordinate they may differ by
  // basis rotation, so compare through the quadratic form.
  Matrix m = a + 0.5 * Matrix::Identity(6, 6);
  CHECK(vf.dot(m * vf) == doctest::Approx(eps.squaredNorm()).epsilon(1e-9));
  CHECK(vl.dot(m * vl) == doctest::Approx(eps.squaredNorm()).epsilon(1e-9));
}

TEST_CASE("truncated rank treats unseen directions as flat") {
  Matrix a(4, 4);
  a.setZero();
  a.diagonal() << 100.0, 50.0, 1e-3, 1e-3;
  QuadraticBowl bowl(a);

  HessianOptions opts;
  opts.kind = HessianKind::LowRank;
  opts.rank = 2;
  opts.prior_precision = 0.5;
  HessianApprox h = fit_hessian(bowl, Vector::Zero(4), opts);

  REQUIRE(h.rank() == 2);
  CHECK(h.damping == doctest::Approx(0.5));
  CHECK(h.eigvals[0] == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(h.eigvals[1] == doctest::Approx(50.0).epsilon(1e-9));
  CHECK(h.log_det() == doctest::Approx(2.0 * std::log(0.5) +
                                       std::log(100.5) + std::log(50.5))
                           .epsilon(1e-9));

  // The implied matrix is V diag(ritz) V^T + damping I.
  Matrix implied = h.eigvecs * h.eigvals.asDiagonal() *
                       h.eigvecs.transpose() +
                   h.damping * Matrix::Identity(4, 4);
  auto rng = make_rng(17);
  Vector eps = standard_normal(rng, 4);
  Vector v = h.inverse_sqrt_apply(eps);
  CHECK(v.dot(implied * v) ==
        doctest::Approx(eps.squaredNorm()).epsilon(1e-9));
}

TEST_CASE("evidence at the exact optimum matches the conjugate closed form") {
  // Parameter-linear network: the Gaussian integral is exact, so the grid
  // evidence must reproduce the analytic marginal likelihood.
  MLPConfig cfg;
  cfg.input_dim = 2;
  cfg.hidden = {};
  cfg.output_dim = 1;
  const Index k = cfg.param_count();
  REQUIRE(k == 3);

  const int n = 20;
  auto rng = make_rng(41);
  Dataset data;
  data.X = Matrix(n, 2);
  data.y = Vector(n);
  for (int i = 0; i < n; ++i) {
    Vector x = standard_normal(rng, 2);
    data.X.row(i) = x.transpose();
    data.y[i] = 0.7 * x[0] - 0.3 * x[1] + 0.2 + 0.3 * standard_normal(rng, 1)[0];
  }

  const double delta = 0.7;
  const double sigma2 = 0.09;
  Matrix phi = design_matrix(cfg, data.X);

  // Exact optimum of the regularized objective via the normal equations.
  Matrix prec = phi.transpose() * phi / sigma2 +
                delta * Matrix::Identity(k, k);
  Vector theta_star = prec.ldlt().solve(phi.transpose() * data.y / sigma2);

  LossSpec spec;
  spec.kind = Likelihood::GaussianRegression;
  spec.noise_var = sigma2;
  spec.prior_precision = delta;

  HyperGrid grid;
  grid.prior_precisions = {delta};
  grid.noise_vars = {sigma2};
  TunedHypers tuned = tune_hypers(cfg, spec, data, theta_star, grid);

  // Marginal likelihood of y under prior theta ~ N(0, I/delta):
  // y ~ N(0, sigma2 I + phi phi^T / delta).
  Matrix cov = sigma2 * Matrix::Identity(n, n) +
               phi * phi.transpose() / delta;
  Eigen::LLT<Matrix> llt(cov);
  REQUIRE(llt.info() == Eigen::Success);
  double log_det_cov =
      2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
  Vector alpha = llt.solve(data.y);
  const double oracle = -0.5 * (n * kLog2Pi + log_det_cov +
                                data.y.dot(alpha));

  CHECK(tuned.evidence == doctest::Approx(oracle).epsilon(1e-8));
  CHECK(tuned.prior_precision == delta);
  CHECK(tuned.noise_var == sigma2);
  CHECK(tuned.evidence_table.rows() == 1);
  CHECK(tuned.evidence_table.cols() == 1);
}

TEST_CASE("grid search reports the argmax and classification drops noise") {
  MLPConfig cfg;
  cfg.input_dim = 2;
  cfg.hidden = {};
  cfg.output_dim = 2;
  const Index k = cfg.param_count();

  auto rng = make_rng(43);
  const int n = 24;
  Dataset data;
  data.X = Matrix(n, 2);
  data.y = Vector(n);
  data.num_classes = 2;
  for (int i = 0; i < n; ++i) {
    const int cls = i % 2;
    Vector x = standard_normal(rng, 2);
    data.X.row(i) = x.transpose() + Vector::Constant(2, cls ? 1.0 : -1.0).transpose();
    data.y[i] = cls;
  }

  LossSpec spec;
  spec.kind = Likelihood::Categorical;
  spec.prior_precision = 1.0;

  auto rng2 = make_rng(44);
  Vector theta = 0.3 * standard_normal(rng2, k);

  HyperGrid grid;
  grid.prior_precisions = {0.1, 1.0, 10.0};
  grid.noise_vars = {0.5, 1.0};  // ignored for classification
  TunedHypers tuned = tune_hypers(cfg, spec, data, theta, grid);

  CHECK(tuned.evidence_table.rows() == 3);
  CHECK(tuned.evidence_table.cols() == 1);
  CHECK(tuned.noise_var == 1.0);
  CHECK(tuned.evidence == tuned.evidence_table.maxCoeff());
  bool found = false;
  for (Index i = 0; i < 3; ++i) {
    if (grid.prior_precisions[static_cast<std::size_t>(i)] ==
            tuned.prior_precision &&
        tuned.evidence_table(i, 0) == tuned.evidence) {
      found = true;
    }
  }
  CHECK(found);

  HyperGrid empty;
  CHECK_THROWS_AS((void)tune_hypers(cfg, spec, data, theta, empty),
                  EmptyInput);
  HyperGrid bad;
  bad.prior_precisions = {-1.0};
  CHECK_THROWS_AS((void)tune_hypers(cfg, spec, data, theta, bad), Error);
}

TEST_CASE("velocity draws are reproducible with the declared covariance") {
  Matrix a(2, 2);
  a.setZero();
  a.diagonal() << 4.0, 9.0;
  QuadraticBowl bowl(a);

  HessianOptions opts;
  opts.kind = HessianKind::Full;
  opts.prior_precision = 0.0;
  VelocityDistribution dist;
  dist.approx = fit_hessian(bowl, Vector::Zero(2), opts);
  dist.base_seed = 99;

  Vector v7 = sample_velocity(dist, 7);
  CHECK((sample_velocity(dist, 7) - v7).norm() == 0.0);
  CHECK((sample_velocity(dist, 8) - v7).norm() > 1e-8);
  CHECK_THROWS_AS((void)sample_velocity(dist, -1), Error);

  // Monte Carlo covariance approaches diag(1/4, 1/9).
  const int s = 20000;
  Matrix acc = Matrix::Zero(2, 2);
  for (int i = 0; i < s; ++i) {
    Vector v = sample_velocity(dist, i);
    acc += v * v.transpose();
  }
  acc /= static_cast<double>(s);
  CHECK(acc(0, 0) == doctest::Approx(0.25).epsilon(0.05));
  CHECK(acc(1, 1) == doctest::Approx(1.0 / 9.0).epsilon(0.05));
  CHECK(std::abs(acc(0, 1)) < 0.01);
}

TEST_CASE("metric preconditioning preserves the velocity norm it targets") {
  Matrix a = spd(4, 1.0, 6.0);
  QuadraticBowl bowl(a);
  auto rng = make_rng(55);
  for (int rep = 0; rep < 10; ++rep) {
    Vector theta = standard_normal(rng, 4);
    Vector eps = standard_normal(rng, 4);
    Vector v = precondition_velocity(bowl, theta, eps);
    MetricPoint p = metric_point(bowl, theta);
    CHECK(g_norm(p, v) == doctest::Approx(eps.norm()).epsilon(1e-10));
  }

  // At a stationary point the metric is the identity.
  Vector eps = standard_normal(rng, 4);
  Vector same = precondition_velocity(bowl, Vector::Zero(4), eps);
  CHECK((same - eps).norm() < 1e-14);
}

TEST_CASE("weight-space sample is the anchor shifted by the velocity") {
  Vector anchor(3);
  anchor << 1.0, 2.0, 3.0;
  Vector v(3);
  v << 0.1, -0.2, 0.3;
  Vector s = sample_la(anchor, v);
  CHECK(s[0] == doctest::Approx(1.1));
  CHECK(s[1] == doctest::Approx(1.8));
  CHECK(s[2] == doctest::Approx(3.3));
  CHECK_THROWS_AS((void)sample_la(anchor, Vector::Zero(2)),
                  DimensionMismatch);
}

TEST_CASE("linearized prediction is exact for parameter-linear networks") {
  MLPConfig cfg;
  cfg.input_dim = 2;
  cfg.hidden = {};
  cfg.output_dim = 1;
  auto rng = make_rng(61);
  Vector anchor = standard_normal(rng, cfg.param_count());
  Vector theta = standard_normal(rng, cfg.param_count());
  Matrix x(5, 2);
  for (int i = 0; i < 5; ++i) {
    x.row(i) = standard_normal(rng, 2).transpose();
  }
  Matrix lin = predict_linearized(cfg, anchor, x, theta);
  Matrix exact = mlp_forward(cfg, theta, x);
  CHECK((lin - exact).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("linearized prediction has second-order error on curved networks") {
  MLPConfig cfg;
  cfg.input_dim = 1;
  cfg.hidden = {8};
  cfg.output_dim = 1;
  cfg.activation = Activation::Gelu;
  auto rng = make_rng(62);
  Vector anchor = standard_normal(rng, cfg.param_count());
  Vector dir = standard_normal(rng, cfg.param_count());
  dir /= dir.norm();
  Matrix x(6, 1);
  for (int i = 0; i < 6; ++i) {
    x(i, 0) = -1.0 + 0.4 * i;
  }

  CHECK((predict_linearized(cfg, anchor, x, anchor) -
         mlp_forward(cfg, anchor, x))
            .cwiseAbs()
            .maxCoeff() < 1e-13);

  auto err = [&](double t) {
    Vector theta = anchor + t * dir;
    return (predict_linearized(cfg, anchor, x, theta) -
            mlp_forward(cfg, theta, x))
        .cwiseAbs()
        .maxCoeff();
  };
  const double e1 = err(1e-1);
  const double e2 = err(1e-2);
  CHECK(e2 < e1);
  // Quadratic shrink: a decade in step is about two decades in error.
  CHECK(e1 / e2 > 20.0);
  CHECK(e1 / e2 < 500.0);
}

TEST_CASE("free transport conserves speed and honors the horizon") {
  Matrix a = spd(4, 1.0, 5.0);
  QuadraticBowl bowl(a);
  auto rng = make_rng(71);
  Vector anchor = 0.5 * standard_normal(rng, 4);
  Vector velocity = standard_normal(rng, 4);

  SolverConfig solver;
  solver.atol = 1e-9;
  solver.rtol = 1e-10;
  SampleRunResult res = sample_rla(bowl, anchor, velocity, solver, 1.0);
  CHECK(res.terminated_by == Termination::TimeLimit);
  CHECK_FALSE(res.converged);
  CHECK(res.trajectory.last.t == doctest::Approx(1.0).epsilon(1e-12));

  const double t0 = res.trajectory.energy.front().kinetic;
  const double t1 = res.trajectory.energy.back().kinetic;
  CHECK(std::abs(t1 - t0) / t0 < 1e-6);
  CHECK(res.final_loss == doctest::Approx(bowl.value(res.theta)).epsilon(1e-12));

  CHECK_THROWS_AS((void)sample_rla(bowl, anchor, velocity, solver, 0.0),
                  Error);
}

TEST_CASE("dissipative sampling descends back to the basin floor") {
  Matrix a = spd(4, 1.0, 2.0);
  QuadraticBowl bowl(a);
  Vector anchor = Vector::Zero(4);
  auto rng = make_rng(73);
  Vector velocity = standard_normal(rng, 4);

  SolverConfig solver;
  StopCriteria stop;
  stop.kinetic_eps = 1e-4;
  stop.grad_tol = 0.05;
  SampleRunResult res =
      sample_dims(bowl, anchor, velocity, /*eta0=*/0.5, /*t1=*/1e4, solver,
                  stop);
  CHECK(res.converged);
  CHECK(res.terminated_by == Termination::KineticEps);
  // Stationarity gate bounds the terminal potential by ||g||^2 / (2 lambda).
  CHECK(res.final_loss < 2e-3);
  CHECK(res.theta.norm() < 0.1);

  // Exhausting the horizon still returns a state, flagged as unconverged.
  SampleRunResult cut =
      sample_dims(bowl, anchor, velocity, 0.5, 0.25, solver, stop);
  CHECK_FALSE(cut.converged);
  CHECK(cut.terminated_by == Termination::TimeLimit);
  CHECK(cut.theta.size() == 4);

  CHECK_THROWS_AS(
      (void)sample_dims(bowl, anchor, velocity, 0.0, 1.0, solver, stop),
      Error);
  CHECK_THROWS_AS(
      (void)sample_dims(bowl, anchor, velocity, 0.5, 0.0, solver, stop),
      Error);
}

TEST_CASE("curvature kind names round-trip") {
  CHECK(hessian_kind_from_string("full") == HessianKind::Full);
  CHECK(hessian_kind_from_string("diagonal") == HessianKind::Diagonal);
  CHECK(hessian_kind_from_string("low_rank") == HessianKind::LowRank);
  CHECK(hessian_kind_from_string("lowrank") == HessianKind::LowRank);
  CHECK(to_string(HessianKind::Full) == "full");
  CHECK(to_string(HessianKind::Diagonal) == "diagonal");
  CHECK(to_string(HessianKind::LowRank) == "low_rank");
  CHECK_THROWS_AS((void)hessian_kind_from_string("kfac"), SchemaMismatch);
}
