#pragma once

#include "dims/diff.hpp"
#include "dims/mlp.hpp"

#include <string>
#include <vector>

namespace dims {

enum class Likelihood { GaussianRegression, Categorical };

Likelihood likelihood_from_string(const std::string& name);
std::string to_string(Likelihood k);

struct LossSpec {
  Likelihood kind = Likelihood::GaussianRegression;
  double noise_var = 1.0;        // sigma^2, Gaussian head only
  double prior_precision = 1.0;  // delta
  double label_smoothing = 0.0;  // categorical head only
  void validate() const;
};

struct Dataset {
  Matrix X;         // N x D features
  Vector y;         // targets; class indices stored as doubles
  int num_classes = 0;  // 0 for regression

  Index size() const { return X.rows(); }
  void validate(Likelihood kind) const;
};

// Negative log joint density: data likelihood summed over all points plus the
// Gaussian prior quadratic (delta/2)||theta||^2. The prior normalizing
// constant is omitted; the evidence approximation accounts for it separately.
class MlpLossField final : public LossField {
 public:
  MlpLossField(MLPConfig cfg, LossSpec spec, Dataset data,
               bool include_prior = true);

  Index dim() const override { return cfg_.param_count(); }
  double value(const Vector& theta) const override;
  double value_and_grad(const Vector& theta, Vector& grad) const override;
  void hvp(const Vector& theta, const Vector& v, Vector& out) const override;
  double grad_hvp(const Vector& theta, const Vector& v, Vector& grad,
                  Vector& hv) const override;

  const MLPConfig& config() const { return cfg_; }
  const LossSpec& spec() const { return spec_; }
  const Dataset& data() const { return data_; }

 private:
  MLPConfig cfg_;
  LossSpec spec_;
  Dataset data_;
  bool include_prior_;
};

std::pair<double, Vector> neg_log_joint(const MLPConfig& cfg,
                                        const LossSpec& spec,
                                        const Vector& theta,
                                        const Dataset& data);

// Mean per-point negative log likelihood of a batch, with gradient.
// Dropout masks, when supplied, participate in both value and gradient.
double likelihood_mean_loss(const MLPConfig& cfg, const LossSpec& spec,
                            const Vector& theta, const Matrix& X,
                            const Vector& y, const std::vector<Matrix>& masks,
                            Vector* grad);

struct TrainOpts {
  int epochs = 2000;
  int batch_size = 0;  // 0 = full batch
  double lr = 1e-3;
  double weight_decay = 1e-2;
  int refine_steps = 5000;
  double refine_tol = 1e-3;
  std::uint64_t seed = 0;
};

struct AdamOpts {
  int steps = 1000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_tol = 0.0;  // stop early when the gradient norm drops below
};

// Adam descent on an arbitrary field; returns the final iterate.
Vector adam_minimize(const LossField& field, Vector theta, const AdamOpts& opts);

// Two-phase MAP fit: AdamW on the mean likelihood with train-mode dropout,
// then full-batch Adam refinement of the deterministic negative log joint
// until its gradient norm reaches refine_tol or the step budget runs out.
Vector train_map(const MLPConfig& cfg, const LossSpec& spec,
                 const Dataset& data, const TrainOpts& opts);

}  // namespace dims
