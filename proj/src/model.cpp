#include "dims/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dims {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Shared forward/reverse kernel. Computes the data term of the loss over one
// batch, optionally its parameter gradient, and optionally the tangent of the
// gradient (Hessian-vector product) along `tangent`. The prior quadratic is
// added when prior_precision > 0; mean_reduction rescales the data term by
// 1/N and excludes the prior.
double loss_pass(const MLPConfig& cfg, const LossSpec& spec,
                 const Vector& theta, const Matrix& X, const Vector& y,
                 int num_classes, const std::vector<Matrix>& masks,
                 bool mean_reduction, double prior_precision, Vector* grad,
                 const Vector* tangent, Vector* hv) {
  const Index n = X.rows();
  if (n == 0) {
    throw EmptyInput("loss evaluation over an empty batch");
  }
  const int layers = cfg.num_layers();
  const bool second_order = tangent != nullptr && hv != nullptr;

  MlpPass pass;
  mlp_forward_pass(cfg, theta, X, masks, second_order, pass);
  const Matrix& out = pass.z.back();

  ParamView p(cfg, theta);

  // Tangent forward sweep.
  std::vector<Matrix> rz;
  std::vector<Matrix> ra;
  if (second_order) {
    ParamView t(cfg, *tangent);
    rz.resize(static_cast<std::size_t>(layers));
    ra.resize(static_cast<std::size_t>(layers - 1));
    for (int l = 0; l < layers; ++l) {
      auto& r = rz[static_cast<std::size_t>(l)];
      if (l == 0) {
        r.noalias() = X * t.W[0];
      } else {
        const Matrix& input = pass.a[static_cast<std::size_t>(l) - 1];
        r.noalias() = ra[static_cast<std::size_t>(l) - 1] *
                      p.W[static_cast<std::size_t>(l)];
        r.noalias() += input * t.W[static_cast<std::size_t>(l)];
      }
      r.rowwise() += t.b[static_cast<std::size_t>(l)].transpose();
      if (l < layers - 1) {
        ra[static_cast<std::size_t>(l)] =
            pass.d1[static_cast<std::size_t>(l)].array() * r.array();
      }
    }
  }

  // Loss head: value, output adjoint, and its tangent.
  double loss = 0.0;
  Matrix delta;
  Matrix rdelta;
  if (spec.kind == Likelihood::GaussianRegression) {
    Vector residual = out.col(0) - y;
    const double inv_var = 1.0 / spec.noise_var;
    loss = 0.5 * inv_var * residual.squaredNorm() +
           0.5 * static_cast<double>(n) * (kLog2Pi + std::log(spec.noise_var));
    delta = (residual * inv_var).matrix();
    if (second_order) {
      rdelta = rz.back() * inv_var;
    }
  } else {
    const int c = num_classes;
    Vector rowmax = out.rowwise().maxCoeff();
    Matrix shifted = out.colwise() - rowmax;
    Matrix expz = shifted.array().exp();
    Vector z_sum = expz.rowwise().sum();
    Matrix probs = expz.array().colwise() / z_sum.array();
    Matrix logp = shifted.array().colwise() - z_sum.array().log();

    const double s = spec.label_smoothing;
    const double off = s / static_cast<double>(c);
    for (Index i = 0; i < n; ++i) {
      const auto label = static_cast<Index>(y[i]);
      if (s == 0.0) {
        loss -= logp(i, label);
      } else {
        loss -= off * logp.row(i).sum() + (1.0 - s) * logp(i, label);
      }
    }
    delta = probs;
    delta.array() -= off;
    for (Index i = 0; i < n; ++i) {
      delta(i, static_cast<Index>(y[i])) -= 1.0 - s;
    }
    if (second_order) {
      const Matrix& rout = rz.back();
      Vector dot = (probs.array() * rout.array()).rowwise().sum();
      rdelta = probs.array() * (rout.colwise() - dot).array();
    }
  }

  if (mean_reduction) {
    const double inv_n = 1.0 / static_cast<double>(n);
    loss *= inv_n;
    delta *= inv_n;
    if (second_order) {
      rdelta *= inv_n;
    }
  }

  if (prior_precision > 0.0) {
    loss += 0.5 * prior_precision * theta.squaredNorm();
  }

  if (grad == nullptr && !second_order) {
    return loss;
  }

  // Reverse sweep; layer adjoints are kept for the tangent reverse sweep.
  std::vector<Matrix> deltas(static_cast<std::size_t>(layers));
  deltas.back() = std::move(delta);
  for (int l = layers - 1; l > 0; --l) {
    Matrix back = deltas[static_cast<std::size_t>(l)] *
                  p.W[static_cast<std::size_t>(l)].transpose();
    if (!masks.empty()) {
      back.array() *= masks[static_cast<std::size_t>(l) - 1].array();
    }
    deltas[static_cast<std::size_t>(l) - 1] =
        back.array() * pass.d1[static_cast<std::size_t>(l) - 1].array();
  }

  if (grad != nullptr) {
    grad->resize(theta.size());
    ParamViewMut g(cfg, *grad);
    for (int l = 0; l < layers; ++l) {
      const Matrix& input =
          l == 0 ? X : pass.a[static_cast<std::size_t>(l) - 1];
      g.W[static_cast<std::size_t>(l)].noalias() =
          input.transpose() * deltas[static_cast<std::size_t>(l)];
      g.b[static_cast<std::size_t>(l)] =
          deltas[static_cast<std::size_t>(l)].colwise().sum();
    }
    if (prior_precision > 0.0) {
      *grad += prior_precision * theta;
    }
  }

  if (second_order) {
    ParamView t(cfg, *tangent);
    hv->resize(theta.size());
    ParamViewMut h(cfg, *hv);
    Matrix rd = std::move(rdelta);
    for (int l = layers - 1; l >= 0; --l) {
      const Matrix& input =
          l == 0 ? X : pass.a[static_cast<std::size_t>(l) - 1];
      auto& hW = h.W[static_cast<std::size_t>(l)];
      hW.noalias() = input.transpose() * rd;
      if (l > 0) {
        hW.noalias() += ra[static_cast<std::size_t>(l) - 1].transpose() *
                        deltas[static_cast<std::size_t>(l)];
      }
      h.b[static_cast<std::size_t>(l)] = rd.colwise().sum();
      if (l > 0) {
        Matrix back = deltas[static_cast<std::size_t>(l)] *
                      p.W[static_cast<std::size_t>(l)].transpose();
        Matrix rback = rd * p.W[static_cast<std::size_t>(l)].transpose();
        rback.noalias() += deltas[static_cast<std::size_t>(l)] *
                           t.W[static_cast<std::size_t>(l)].transpose();
        const auto& d1 = pass.d1[static_cast<std::size_t>(l) - 1];
        const auto& d2 = pass.d2[static_cast<std::size_t>(l) - 1];
        rd = rback.array() * d1.array() +
             back.array() * d2.array() *
                 rz[static_cast<std::size_t>(l) - 1].array();
      }
    }
    if (prior_precision > 0.0) {
      *hv += prior_precision * (*tangent);
    }
  }

  return loss;
}

}  // namespace

Likelihood likelihood_from_string(const std::string& name) {
  if (name == "gaussian" || name == "regression") {
    return Likelihood::GaussianRegression;
  }
  if (name == "categorical" || name == "classification") {
    return Likelihood::Categorical;
  }
  throw SchemaMismatch("unknown likelihood: " + name);
}

std::string to_string(Likelihood k) {
  return k == Likelihood::GaussianRegression ? "gaussian" : "categorical";
}

void LossSpec::validate() const {
  if (kind == Likelihood::GaussianRegression && noise_var <= 0.0) {
    throw SchemaMismatch("noise variance must be positive");
  }
  if (prior_precision < 0.0) {
    throw SchemaMismatch("prior precision must be non-negative");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw SchemaMismatch("label smoothing must lie in [0, 1)");
  }
}

void Dataset::validate(Likelihood kind) const {
  if (X.rows() == 0) {
    throw EmptyInput("dataset has no rows");
  }
  require_dim(y.size(), X.rows(), "Dataset: y");
  if (!X.allFinite() || !y.allFinite()) {
    throw NonFiniteEvaluation("dataset contains non-finite values");
  }
  if (kind == Likelihood::Categorical) {
    if (num_classes < 2) {
      throw SchemaMismatch("classification needs at least two classes");
    }
    for (Index i = 0; i < y.size(); ++i) {
      const double label = y[i];
      if (label != std::floor(label) || label < 0.0 ||
          label >= static_cast<double>(num_classes)) {
        throw SchemaMismatch("class labels must be integers in [0, C)");
      }
    }
  }
}

MlpLossField::MlpLossField(MLPConfig cfg, LossSpec spec, Dataset data,
                           bool include_prior)
    : cfg_(std::move(cfg)),
      spec_(spec),
      data_(std::move(data)),
      include_prior_(include_prior) {
  cfg_.validate();
  spec_.validate();
  data_.validate(spec_.kind);
  require_dim(data_.X.cols(), cfg_.input_dim, "MlpLossField: features");
  if (spec_.kind == Likelihood::Categorical) {
    require_dim(cfg_.output_dim, data_.num_classes, "MlpLossField: outputs");
  } else {
    require_dim(cfg_.output_dim, 1, "MlpLossField: outputs");
  }
}

double MlpLossField::value(const Vector& theta) const {
  return loss_pass(cfg_, spec_, theta, data_.X, data_.y, data_.num_classes, {},
                   false, include_prior_ ? spec_.prior_precision : 0.0,
                   nullptr, nullptr, nullptr);
}

double MlpLossField::value_and_grad(const Vector& theta, Vector& grad) const {
  return loss_pass(cfg_, spec_, theta, data_.X, data_.y, data_.num_classes, {},
                   false, include_prior_ ? spec_.prior_precision : 0.0, &grad,
                   nullptr, nullptr);
}

void MlpLossField::hvp(const Vector& theta, const Vector& v,
                       Vector& out) const {
  loss_pass(cfg_, spec_, theta, data_.X, data_.y, data_.num_classes, {}, false,
            include_prior_ ? spec_.prior_precision : 0.0, nullptr, &v, &out);
}

double MlpLossField::grad_hvp(const Vector& theta, const Vector& v,
                              Vector& grad, Vector& hv) const {
  return loss_pass(cfg_, spec_, theta, data_.X, data_.y, data_.num_classes, {},
                   false, include_prior_ ? spec_.prior_precision : 0.0, &grad,
                   &v, &hv);
}

std::pair<double, Vector> neg_log_joint(const MLPConfig& cfg,
                                        const LossSpec& spec,
                                        const Vector& theta,
                                        const Dataset& data) {
  MlpLossField field(cfg, spec, data, true);
  return value_and_grad(field, theta);
}

double likelihood_mean_loss(const MLPConfig& cfg, const LossSpec& spec,
                            const Vector& theta, const Matrix& X,
                            const Vector& y, const std::vector<Matrix>& masks,
                            Vector* grad) {
  LossSpec no_class_check = spec;
  return loss_pass(cfg, no_class_check, theta, X, y, cfg.output_dim, masks,
                   true, 0.0, grad, nullptr, nullptr);
}

Vector adam_minimize(const LossField& field, Vector theta,
                     const AdamOpts& opts) {
  require_dim(theta.size(), field.dim(), "adam_minimize: theta");
  Vector m = Vector::Zero(theta.size());
  Vector v = Vector::Zero(theta.size());
  Vector grad(theta.size());
  for (int step = 1; step <= opts.steps; ++step) {
    const double loss = field.value_and_grad(theta, grad);
    if (!std::isfinite(loss) || !grad.allFinite()) {
      throw NonFiniteEvaluation("loss became non-finite during descent",
                                theta);
    }
    if (opts.grad_tol > 0.0 && grad.norm() <= opts.grad_tol) {
      break;
    }
    m = opts.beta1 * m + (1.0 - opts.beta1) * grad;
    v = opts.beta2 * v.array().matrix() +
        (1.0 - opts.beta2) * grad.array().square().matrix();
    const double bc1 = 1.0 - std::pow(opts.beta1, step);
    const double bc2 = 1.0 - std::pow(opts.beta2, step);
    theta.array() -= opts.lr * (m.array() / bc1) /
                     ((v.array() / bc2).sqrt() + opts.eps);
  }
  return theta;
}

Vector train_map(const MLPConfig& cfg, const LossSpec& spec,
                 const Dataset& data, const TrainOpts& opts) {
  cfg.validate();
  spec.validate();
  data.validate(spec.kind);

  Vector theta = init_params(cfg, derive_seed(opts.seed, 1));
  Vector m = Vector::Zero(theta.size());
  Vector v = Vector::Zero(theta.size());
  Vector grad(theta.size());

  const Index n = data.size();
  const Index batch = opts.batch_size <= 0
                          ? n
                          : std::min<Index>(opts.batch_size, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  long step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    if (batch < n) {
      auto rng = make_rng(derive_seed(opts.seed, 0x10000u + epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (Index start = 0; start < n; start += batch) {
      const Index rows = std::min(batch, n - start);
      Matrix xb;
      Vector yb;
      const Matrix* xp = &data.X;
      const Vector* yp = &data.y;
      if (batch < n) {
        xb.resize(rows, data.X.cols());
        yb.resize(rows);
        for (Index r = 0; r < rows; ++r) {
          xb.row(r) = data.X.row(order[static_cast<std::size_t>(start + r)]);
          yb[r] = data.y[order[static_cast<std::size_t>(start + r)]];
        }
        xp = &xb;
        yp = &yb;
      }
      const auto masks =
          dropout_masks(cfg, rows, derive_seed(opts.seed, 0x20000u + step));
      const double loss =
          likelihood_mean_loss(cfg, spec, theta, *xp, *yp, masks, &grad);
      if (!std::isfinite(loss) || !grad.allFinite()) {
        throw TrainingDiverged("training loss became non-finite", epoch);
      }
      ++step;
      m = 0.9 * m + 0.1 * grad;
      v = 0.999 * v.array().matrix() + 0.001 * grad.array().square().matrix();
      const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(step));
      theta.array() -= opts.lr * (m.array() / bc1) /
                       ((v.array() / bc2).sqrt() + 1e-8);
      if (opts.weight_decay > 0.0) {
        theta -= (opts.lr * opts.weight_decay) * theta;
      }
    }
  }

  if (opts.refine_steps > 0) {
    MlpLossField joint(cfg, spec, data, true);
    AdamOpts refine;
    refine.steps = opts.refine_steps;
    refine.lr = opts.lr;
    refine.grad_tol = opts.refine_tol;
    try {
      theta = adam_minimize(joint, std::move(theta), refine);
    } catch (const NonFiniteEvaluation&) {
      throw TrainingDiverged("refinement loss became non-finite", opts.epochs);
    }
  }
  return theta;
}

}  // namespace dims
