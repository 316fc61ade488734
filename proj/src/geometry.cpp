#include "dims/geometry.hpp"

#include <cmath>

namespace dims {

MetricPoint metric_point(const LossField& field, const Vector& theta) {
  auto [loss, grad] = value_and_grad(field, theta);
  return metric_point(theta, loss, std::move(grad));
}

MetricPoint metric_point(const Vector& theta, double loss, Vector grad) {
  require_dim(grad.size(), theta.size(), "metric_point: grad");
  require_finite(loss, "metric_point: loss");
  require_finite(grad, "metric_point: grad");
  MetricPoint p;
  p.theta = theta;
  p.loss = loss;
  p.grad_sq = grad.squaredNorm();
  p.grad = std::move(grad);
  return p;
}

Vector metric_apply(const MetricPoint& p, const Vector& v) {
  require_dim(v.size(), p.grad.size(), "metric_apply: v");
  return v + p.grad * p.grad.dot(v);
}

Vector metric_inverse_apply(const MetricPoint& p, const Vector& v) {
  require_dim(v.size(), p.grad.size(), "metric_inverse_apply: v");
  return v - p.grad * (p.grad.dot(v) / (1.0 + p.grad_sq));
}

Vector metric_sqrt_inverse_apply(const MetricPoint& p, const Vector& v) {
  require_dim(v.size(), p.grad.size(), "metric_sqrt_inverse_apply: v");
  const double u = 1.0 + p.grad_sq;
  return v - p.grad * (p.grad.dot(v) / (u + std::sqrt(u)));
}

Vector riemannian_grad(const MetricPoint& p) {
  return p.grad / (1.0 + p.grad_sq);
}

double g_norm(const MetricPoint& p, const Vector& v) {
  require_dim(v.size(), p.grad.size(), "g_norm: v");
  const double gv = p.grad.dot(v);
  return std::sqrt(v.squaredNorm() + gv * gv);
}

double gradient_g_norm(const MetricPoint& p) {
  return std::sqrt(p.grad_sq + p.grad_sq * p.grad_sq);
}

double kinetic_energy(const MetricPoint& p, const Vector& velocity) {
  const double gv = p.grad.dot(velocity);
  return 0.5 * (velocity.squaredNorm() + gv * gv);
}

EnergyRecord energies(const MetricPoint& p, const Vector& velocity,
                      double kappa, double loss_ref, double eta, double t) {
  require_dim(velocity.size(), p.grad.size(), "energies: velocity");
  EnergyRecord rec;
  rec.t = t;
  rec.kinetic = kinetic_energy(p, velocity);
  rec.potential = std::max(0.0, kappa * (p.loss - loss_ref));
  rec.total = rec.kinetic + rec.potential;
  rec.eta = eta;
  rec.grad_norm = std::sqrt(p.grad_sq);
  return rec;
}

}  // namespace dims
