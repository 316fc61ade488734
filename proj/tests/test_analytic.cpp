// Closed-form surfaces: hand-computed values, finite-difference cross-checks
// of gradients and Hessian products, the factory, and a small end-to-end run
// of the decay/bound verification sweep.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dims/analytic.hpp"

#include <json.hpp>

#include <cmath>

using namespace dims;

namespace {

Vector fd_gradient(const LossField& f, const Vector& theta, double h = 1e-6) {
  Vector g(theta.size());
  Vector p = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    const double step = h * std::max(1.0, std::abs(theta[i]));
    p[i] = theta[i] + step;
    const double up = f.value(p);
    p[i] = theta[i] - step;
    const double dn = f.value(p);
    p[i] = theta[i];
    g[i] = (up - dn) / (2.0 * step);
  }
  return g;
}

Vector fd_hvp(const LossField& f, const Vector& theta, const Vector& v,
              double h = 1e-5) {
  Vector gp(theta.size());
  Vector gm(theta.size());
  f.value_and_grad(theta + h * v, gp);
  f.value_and_grad(theta - h * v, gm);
  return (gp - gm) / (2.0 * h);
}

void check_field_derivatives(const LossField& f, std::uint64_t seed,
                             double scale, double grad_tol, double hvp_tol) {
  auto rng = make_rng(seed);
  for (int rep = 0; rep < 5; ++rep) {
    Vector theta = scale * standard_normal(rng, f.dim());
    Vector v = standard_normal(rng, f.dim());

    Vector grad(f.dim());
    const double value = f.value_and_grad(theta, grad);
    CHECK(value == doctest::Approx(f.value(theta)).epsilon(1e-14));
    Vector g_fd = fd_gradient(f, theta);
    CHECK((grad - g_fd).norm() <= grad_tol * std::max(1.0, g_fd.norm()));

    Vector hv(f.dim());
    f.hvp(theta, v, hv);
    Vector hv_fd = fd_hvp(f, theta, v);
    CHECK((hv - hv_fd).norm() <= hvp_tol * std::max(1.0, hv_fd.norm()));
  }
}

}  // namespace

TEST_CASE("quadratic bowl value, gradient, and curvature") {
  Matrix a(2, 2);
  a << 2.0, 1.0, 1.0, 3.0;
  QuadraticBowl bowl(a);

  Vector theta(2);
  theta << 1.0, 2.0;
  CHECK(bowl.value(theta) == doctest::Approx(9.0).epsilon(1e-15));

  Vector grad(2);
  CHECK(bowl.value_and_grad(theta, grad) == doctest::Approx(9.0));
  CHECK(grad[0] == doctest::Approx(4.0));
  CHECK(grad[1] == doctest::Approx(7.0));

  Vector v(2);
  v << 1.0, -1.0;
  Vector hv(2);
  bowl.hvp(theta, v, hv);
  CHECK(hv[0] == doctest::Approx(1.0));
  CHECK(hv[1] == doctest::Approx(-2.0));

  check_field_derivatives(bowl, 11, 2.0, 1e-7, 1e-7);

  CHECK_THROWS_AS(QuadraticBowl{Matrix::Ones(2, 3)}, DimensionMismatch);
  Matrix skew(2, 2);
  skew << 1.0, 2.0, -2.0, 1.0;
  CHECK_THROWS_AS(QuadraticBowl{skew}, SchemaMismatch);
  Matrix indef(2, 2);
  indef << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(QuadraticBowl{indef}, SchemaMismatch);
}

TEST_CASE("sphere residual vanishes exactly on the shell") {
  SphereResidual sphere(3, 2.0);

  Vector on(3);
  on << 2.0, 0.0, 0.0;
  CHECK(sphere.value(on) == 0.0);
  Vector grad(3);
  CHECK(sphere.value_and_grad(on, grad) == 0.0);
  CHECK(grad.norm() == 0.0);

  Vector off(2);
  SphereResidual unit(2, 1.0);
  off << 1.0, 2.0;
  // s = 4, value = 16, grad = 4 s theta.
  CHECK(unit.value(off) == doctest::Approx(16.0));
  Vector g2(2);
  unit.value_and_grad(off, g2);
  CHECK(g2[0] == doctest::Approx(16.0));
  CHECK(g2[1] == doctest::Approx(32.0));
  Vector v(2);
  v << 1.0, 0.0;
  Vector hv(2);
  unit.hvp(off, v, hv);
  CHECK(hv[0] == doctest::Approx(24.0));
  CHECK(hv[1] == doctest::Approx(16.0));

  check_field_derivatives(sphere, 12, 1.5, 1e-7, 1e-6);

  CHECK_THROWS_AS(SphereResidual(0, 1.0), SchemaMismatch);
  CHECK_THROWS_AS(SphereResidual(3, -1.0), SchemaMismatch);
}

TEST_CASE("rastrigin surface: global minimum and oscillatory derivatives") {
  Rastrigin2D r(0.1);
  Vector zero = Vector::Zero(2);
  CHECK(r.value(zero) == doctest::Approx(0.0).epsilon(1e-14));
  Vector grad(2);
  r.value_and_grad(zero, grad);
  CHECK(grad.norm() < 1e-14);

  Vector theta(2);
  theta << 0.5, 0.0;
  // 20 + 0.25 - 10 cos(pi) - 10 cos(0) = 20.25, scaled by 0.1.
  CHECK(r.value(theta) == doctest::Approx(2.025).epsilon(1e-12));
  r.value_and_grad(theta, grad);
  CHECK(grad[0] == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(std::abs(grad[1]) < 1e-12);

  // The oscillatory term vanishes at integer points, leaving the quadratic
  // pull toward the origin.
  Vector lattice(2);
  lattice << 1.0, -2.0;
  r.value_and_grad(lattice, grad);
  CHECK(grad[0] == doctest::Approx(0.2).epsilon(1e-9));
  CHECK(grad[1] == doctest::Approx(-0.4).epsilon(1e-9));

  check_field_derivatives(r, 13, 1.0, 1e-6, 1e-5);

  Vector bad(3);
  CHECK_THROWS_AS((void)r.value(bad), DimensionMismatch);
  CHECK_THROWS_AS(Rastrigin2D(0.0), SchemaMismatch);
}

TEST_CASE("surface factory builds the named families") {
  auto bowl = surface_field("bowl", 4, 10.0);
  REQUIRE(bowl->dim() == 4);
  // Diagonal spectrum log-spaced from 1 to the conditioning parameter.
  Vector e0 = Vector::Zero(4);
  e0[0] = 1.0;
  Vector e3 = Vector::Zero(4);
  e3[3] = 1.0;
  CHECK(bowl->value(e0) == doctest::Approx(0.5));
  CHECK(bowl->value(e3) == doctest::Approx(5.0));

  auto sphere = surface_field("sphere", 3, 2.0);
  Vector shell = Vector::Zero(3);
  shell[1] = 2.0;
  CHECK(sphere->value(shell) == 0.0);

  auto rast = surface_field("rastrigin", 2, 0.5);
  CHECK(rast->dim() == 2);
  CHECK(rast->value(Vector::Zero(2)) == doctest::Approx(0.0));

  // Non-positive parameter falls back to 1.
  auto unit_bowl = surface_field("bowl", 2, -1.0);
  Vector e1 = Vector::Zero(2);
  e1[1] = 1.0;
  CHECK(unit_bowl->value(e1) == doctest::Approx(0.5));

  CHECK_THROWS_AS((void)surface_field("saddle", 2, 1.0), SchemaMismatch);
}

TEST_CASE("decay verification sweep passes on a conditioned bowl") {
  auto field = surface_field("bowl", 5, 10.0);

  SweepConfig sweep;
  sweep.seeds = 3;
  sweep.eta0_grid = {0.5};
  sweep.position_sigma = 0.1;
  sweep.speed_sigma = 0.1;
  sweep.solver.dense_stride = 0.01;
  sweep.solver.atol = 1e-9;
  sweep.solver.rtol = 1e-10;
  sweep.solver.store_states = false;

  SuiteReport report = run_theorem_suite(*field, 0.0, sweep);
  REQUIRE(report.runs.size() == 3);
  CHECK(report.all_ok());
  CHECK(report.monotone_failures == 0);
  CHECK(report.audit_failures == 0);
  CHECK(report.time_bound_failures == 0);
  CHECK(report.length_failures == 0);
  CHECK(report.run_errors == 0);
  for (const auto& rec : report.runs) {
    CHECK(rec.terminated_by == "kinetic_eps");
    CHECK(rec.time_bound_checked);
    CHECK(rec.t_epsilon <= rec.time_bound);
    CHECK(rec.length_checked);
    CHECK(rec.length >= rec.length_bound);
    CHECK(rec.audit_residual < 1e-2);
  }

  auto parsed = nlohmann::json::parse(report.to_json());
  CHECK(parsed["all_ok"].get<bool>());
  CHECK(parsed["runs"].size() == 3);
}

TEST_CASE("sweep on the shell family starts on the minimum set") {
  auto field = surface_field("sphere", 3, 1.0);

  SweepConfig sweep;
  sweep.seeds = 2;
  sweep.eta0_grid = {0.5};
  sweep.position_sigma = 1.0;
  sweep.speed_sigma = 0.5;
  sweep.start_on_minimum = true;
  sweep.solver.dense_stride = 0.01;
  sweep.solver.atol = 1e-9;
  sweep.solver.rtol = 1e-10;
  sweep.solver.store_states = false;

  SuiteReport report = run_theorem_suite(*field, 0.0, sweep);
  REQUIRE(report.runs.size() == 2);
  CHECK(report.all_ok());
  for (const auto& rec : report.runs) {
    CHECK(rec.terminated_by == "kinetic_eps");
    // Starting on the shell keeps the initial potential at zero, so the
    // initial energy is purely kinetic.
    CHECK(rec.h0 > 0.0);
  }
}

TEST_CASE("report gate ignores the diagnostic stationarity counter") {
  SuiteReport report;
  report.stationarity_failures = 7;
  CHECK(report.all_ok());
  report.audit_failures = 1;
  CHECK_FALSE(report.all_ok());
  report.audit_failures = 0;
  report.monotone_failures = 1;
  CHECK_FALSE(report.all_ok());
  report.monotone_failures = 0;
  report.time_bound_failures = 1;
  CHECK_FALSE(report.all_ok());
  report.time_bound_failures = 0;
  report.length_failures = 1;
  CHECK_FALSE(report.all_ok());
  report.length_failures = 0;
  report.run_errors = 1;
  CHECK_FALSE(report.all_ok());
}
