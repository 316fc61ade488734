#pragma once

#include "dims/diff.hpp"

namespace dims {

// One evaluated point of the loss surface. The metric G = I + grad grad^T is
// never materialized; every operator uses the rank-one structure in O(K).
struct MetricPoint {
  Vector theta;
  double loss = 0.0;
  Vector grad;
  double grad_sq = 0.0;  // ||grad||^2
};

MetricPoint metric_point(const LossField& field, const Vector& theta);
MetricPoint metric_point(const Vector& theta, double loss, Vector grad);

// G v = v + g (g . v)
Vector metric_apply(const MetricPoint& p, const Vector& v);

// G^{-1} v = v - g (g . v) / (1 + ||g||^2)  (Sherman-Morrison)
Vector metric_inverse_apply(const MetricPoint& p, const Vector& v);

// G^{-1/2} v = v - g (g . v) / (1 + ||g||^2 + sqrt(1 + ||g||^2))
Vector metric_sqrt_inverse_apply(const MetricPoint& p, const Vector& v);

// grad_G = G^{-1} grad = grad / (1 + ||g||^2)
Vector riemannian_grad(const MetricPoint& p);

// sqrt(v^T G v) = sqrt(||v||^2 + (g . v)^2)
double g_norm(const MetricPoint& p, const Vector& v);

// Metric norm of the gradient itself: sqrt(||g||^2 + ||g||^4) collapses to a
// scalar function of ||g||^2.
double gradient_g_norm(const MetricPoint& p);

struct EnergyRecord {
  double t = 0.0;
  double kinetic = 0.0;
  double potential = 0.0;
  double total = 0.0;
  double eta = 0.0;
  double grad_norm = 0.0;
};

// Kinetic energy (1/2) v^T G v, potential kappa * (loss - loss_ref) clipped at
// zero, and their sum. loss_ref must not exceed the current loss by more than
// solver noise; the clip absorbs that noise.
EnergyRecord energies(const MetricPoint& p, const Vector& velocity,
                      double kappa, double loss_ref, double eta, double t);

double kinetic_energy(const MetricPoint& p, const Vector& velocity);

}  // namespace dims
