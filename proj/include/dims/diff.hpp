#pragma once

#include "dims/common.hpp"

#include <utility>

namespace dims {

// A twice-differentiable scalar field over a flat parameter vector.
// Implementations must be immutable after construction and safe to call
// from multiple threads; every evaluation owns its scratch storage.
class LossField {
 public:
  virtual ~LossField() = default;

  virtual Index dim() const = 0;
  virtual double value(const Vector& theta) const = 0;
  virtual double value_and_grad(const Vector& theta, Vector& grad) const = 0;
  virtual void hvp(const Vector& theta, const Vector& v, Vector& out) const = 0;

  // Fused gradient + Hessian-vector product at one point. Overrides may share
  // the forward pass; the default falls back to two separate evaluations.
  virtual double grad_hvp(const Vector& theta, const Vector& v, Vector& grad,
                          Vector& hv) const {
    const double loss = value_and_grad(theta, grad);
    hvp(theta, v, hv);
    return loss;
  }
};

inline std::pair<double, Vector> value_and_grad(const LossField& f,
                                                const Vector& theta) {
  require_dim(theta.size(), f.dim(), "value_and_grad: theta");
  require_finite(theta, "value_and_grad: theta");
  Vector grad(f.dim());
  const double loss = f.value_and_grad(theta, grad);
  if (!std::isfinite(loss) || !grad.allFinite()) {
    throw NonFiniteEvaluation("loss or gradient is not finite", theta);
  }
  return {loss, std::move(grad)};
}

inline Vector hvp(const LossField& f, const Vector& theta, const Vector& v) {
  require_dim(theta.size(), f.dim(), "hvp: theta");
  require_dim(v.size(), f.dim(), "hvp: v");
  require_finite(theta, "hvp: theta");
  require_finite(v, "hvp: v");
  Vector out(f.dim());
  f.hvp(theta, v, out);
  if (!out.allFinite()) {
    throw NonFiniteEvaluation("Hessian-vector product is not finite", theta);
  }
  return out;
}

// Dense Hessian assembled column-by-column from Hessian-vector products and
// symmetrized. Intended for small parameter counts; guarded by max_dim.
inline Matrix dense_hessian(const LossField& f, const Vector& theta,
                            Index max_dim = 2048) {
  const Index k = f.dim();
  if (k > max_dim) {
    throw BudgetExceeded("dense_hessian: dimension " + std::to_string(k) +
                         " exceeds budget " + std::to_string(max_dim));
  }
  require_dim(theta.size(), k, "dense_hessian: theta");
  Matrix h(k, k);
  Vector e = Vector::Zero(k);
  Vector col(k);
  for (Index j = 0; j < k; ++j) {
    e[j] = 1.0;
    f.hvp(theta, e, col);
    h.col(j) = col;
    e[j] = 0.0;
  }
  if (!h.allFinite()) {
    throw NonFiniteEvaluation("dense Hessian is not finite", theta);
  }
  h = 0.5 * (h + h.transpose()).eval();
  return h;
}

}  // namespace dims
