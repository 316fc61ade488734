// Likelihood heads, the joint objective, training, and the forward-mode
// network primitives, checked against hand computations and central
// finite differences.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dims/diff.hpp"
#include "dims/model.hpp"

#include <cmath>

using namespace dims;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// Linear softmax model: no hidden layers, parameters laid out as the
// column-major weight block followed by the bias.
MLPConfig linear_config(int in, int out) {
  MLPConfig cfg;
  cfg.input_dim = in;
  cfg.hidden = {};
  cfg.output_dim = out;
  return cfg;
}

Dataset one_point_classification() {
  Dataset data;
  data.X = Matrix(1, 2);
  data.X << 1.0, 2.0;
  data.y = Vector(1);
  data.y << 1.0;
  data.num_classes = 2;
  return data;
}

}  // namespace

TEST_CASE("categorical joint with label smoothing matches a hand softmax") {
  MLPConfig cfg = linear_config(2, 2);
  // W = [[0.3, -0.1], [0.2, 0.4]] column-major, b = (0.1, -0.2).
  Vector theta(6);
  theta << 0.3, 0.2, -0.1, 0.4, 0.1, -0.2;

  LossSpec spec;
  spec.kind = Likelihood::Categorical;
  spec.prior_precision = 0.0;
  spec.label_smoothing = 0.1;

  Dataset data = one_point_classification();
  // Logits z = x W + b = (0.8, 0.5).
  const double z0 = 0.8, z1 = 0.5;
  const double lse = std::log(std::exp(z0) + std::exp(z1));
  const double expected = -(0.05 * (z0 - lse) + 0.95 * (z1 - lse));

  auto [loss, grad] = neg_log_joint(cfg, spec, theta, data);
  CHECK(loss == doctest::Approx(expected).epsilon(1e-12));
  CHECK(grad.size() == 6);

  // Zero smoothing reduces to the plain cross-entropy of the label.
  spec.label_smoothing = 0.0;
  auto [plain, g2] = neg_log_joint(cfg, spec, theta, data);
  CHECK(plain == doctest::Approx(-(z1 - lse)).epsilon(1e-12));

  // The prior adds exactly the quadratic.
  spec.prior_precision = 2.0;
  auto [with_prior, g3] = neg_log_joint(cfg, spec, theta, data);
  CHECK(with_prior ==
        doctest::Approx(plain + theta.squaredNorm()).epsilon(1e-12));
  CHECK((g3 - g2 - 2.0 * theta).norm() < 1e-12);
}

TEST_CASE("Gaussian joint matches the closed form on a linear model") {
  MLPConfig cfg = linear_config(1, 1);
  Vector theta(2);
  theta << 0.5, -0.25;  // w = 0.5, b = -0.25

  LossSpec spec;
  spec.kind = Likelihood::GaussianRegression;
  spec.noise_var = 0.3;
  spec.prior_precision = 0.4;

  Dataset data;
  data.X = Matrix(2, 1);
  data.X << 1.0, -2.0;
  data.y = Vector(2);
  data.y << 0.5, 1.0;

  // Predictions 0.25 and -1.25; residuals -0.25 and -2.25.
  const double sse = 0.25 * 0.25 + 2.25 * 2.25;
  const double expected = 0.5 * sse / 0.3 +
                          0.5 * 2.0 * (kLog2Pi + std::log(0.3)) +
                          0.5 * 0.4 * theta.squaredNorm();
  auto [loss, grad] = neg_log_joint(cfg, spec, theta, data);
  CHECK(loss == doctest::Approx(expected).epsilon(1e-12));

  // Gradient against central differences through the public field.
  MlpLossField field(cfg, spec, data);
  Vector probe = theta;
  for (Index i = 0; i < 2; ++i) {
    const double h = 1e-6;
    probe[i] = theta[i] + h;
    const double up = field.value(probe);
    probe[i] = theta[i] - h;
    const double down = field.value(probe);
    probe[i] = theta[i];
    CHECK(grad[i] == doctest::Approx((up - down) / (2.0 * h)).epsilon(1e-6));
  }
}

TEST_CASE("joint gradient and HVP FD-match on a deep categorical net") {
  MLPConfig cfg;
  cfg.input_dim = 2;
  cfg.hidden = {6, 5};
  cfg.output_dim = 3;
  cfg.activation = Activation::Silu;

  LossSpec spec;
  spec.kind = Likelihood::Categorical;
  spec.prior_precision = 0.5;
  spec.label_smoothing = 0.05;

  auto rng = make_rng(42);
  Dataset data;
  data.X = Matrix(15, 2);
  data.y = Vector(15);
  data.num_classes = 3;
  for (int i = 0; i < 15; ++i) {
    data.X.row(i) = standard_normal(rng, 2).transpose();
    data.y[i] = static_cast<double>(i % 3);
  }
  MlpLossField field(cfg, spec, data);
  Vector theta = 0.5 * standard_normal(rng, field.dim());

  auto [loss, grad] = value_and_grad(field, theta);
  Vector fd(field.dim());
  Vector probe = theta;
  const double h = 1e-5;
  for (Index i = 0; i < field.dim(); ++i) {
    probe[i] = theta[i] + h;
    const double up = field.value(probe);
    probe[i] = theta[i] - h;
    const double down = field.value(probe);
    probe[i] = theta[i];
    fd[i] = (up - down) / (2.0 * h);
  }
  CHECK((grad - fd).norm() / std::max(1.0, fd.norm()) < 1e-6);

  // HVP against differentiated gradients.
  Vector v = standard_normal(rng, field.dim());
  Vector hv = hvp(field, theta, v);
  Vector gp(field.dim()), gm(field.dim());
  field.value_and_grad(theta + h * v, gp);
  field.value_and_grad(theta - h * v, gm);
  Vector fd_hv = (gp - gm) / (2.0 * h);
  CHECK((hv - fd_hv).norm() / std::max(1.0, fd_hv.norm()) < 1e-5);
}

TEST_CASE("dropout masks are inverted-scale Bernoulli and reproducible") {
  MLPConfig cfg;
  cfg.input_dim = 1;
  cfg.hidden = {32, 32};
  cfg.output_dim = 1;
  cfg.dropout = 0.25;

  auto masks = dropout_masks(cfg, 50, 7);
  REQUIRE(masks.size() == 2);
  const double keep = 1.0 / 0.75;
  long zeros = 0, keeps = 0;
  for (const Matrix& m : masks) {
    CHECK(m.rows() == 50);
    CHECK(m.cols() == 32);
    for (Index i = 0; i < m.size(); ++i) {
      const double x = m.data()[i];
      const bool is_zero = x == 0.0;
      const bool is_keep = x == doctest::Approx(keep).epsilon(1e-15);
      CHECK((is_zero || is_keep));
      zeros += is_zero ? 1 : 0;
      keeps += is_keep ? 1 : 0;
    }
  }
  // Empirical drop rate close to p.
  const double rate = static_cast<double>(zeros) / (zeros + keeps);
  CHECK(rate == doctest::Approx(0.25).epsilon(0.2));

  auto again = dropout_masks(cfg, 50, 7);
  CHECK((again[0] - masks[0]).norm() == 0.0);
  auto other = dropout_masks(cfg, 50, 8);
  CHECK((other[0] - masks[0]).norm() != 0.0);
}

TEST_CASE("masked mean likelihood gradient FD-matches with masks held fixed") {
  MLPConfig cfg;
  cfg.input_dim = 2;
  cfg.hidden = {8};
  cfg.output_dim = 1;
  cfg.activation = Activation::Gelu;
  cfg.dropout = 0.3;

  LossSpec spec;
  spec.kind = Likelihood::GaussianRegression;
  spec.noise_var = 0.5;

  auto rng = make_rng(5);
  Matrix X(10, 2);
  Vector y(10);
  for (int i = 0; i < 10; ++i) {
    X.row(i) = standard_normal(rng, 2).transpose();
    y[i] = X(i, 0) - X(i, 1);
  }
  auto masks = dropout_masks(cfg, 10, 99);
  Vector theta = 0.5 * standard_normal(rng, cfg.param_count());

  Vector grad;
  const double base = likelihood_mean_loss(cfg, spec, theta, X, y, masks, &grad);
  CHECK(std::isfinite(base));
  const double h = 1e-6;
  for (Index i : {Index{0}, Index{5}, theta.size() - 1}) {
    Vector probe = theta;
    probe[i] += h;
    const double up = likelihood_mean_loss(cfg, spec, probe, X, y, masks, nullptr);
    probe[i] = theta[i] - h;
    const double down =
        likelihood_mean_loss(cfg, spec, probe, X, y, masks, nullptr);
    CHECK(grad[i] == doctest::Approx((up - down) / (2.0 * h)).epsilon(1e-4));
  }
}

TEST_CASE("network JVP matches directional finite differences") {
  MLPConfig cfg;
  cfg.input_dim = 2;
  cfg.hidden = {7};
  cfg.output_dim = 2;
  cfg.activation = Activation::Tanh;

  auto rng = make_rng(17);
  Matrix X(6, 2);
  for (int i = 0; i < 6; ++i) {
    X.row(i) = standard_normal(rng, 2).transpose();
  }
  Vector theta = standard_normal(rng, cfg.param_count());
  Vector v = standard_normal(rng, cfg.param_count());

  Matrix jvp = network_jvp(cfg, theta, X, v);
  const double h = 1e-6;
  Matrix up = mlp_forward(cfg, theta + h * v, X);
  Matrix down = mlp_forward(cfg, theta - h * v, X);
  Matrix fd = (up - down) / (2.0 * h);
  CHECK((jvp - fd).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("train_map reaches a near-stationary point that beats the mean") {
  MLPConfig cfg;
  cfg.input_dim = 1;
  cfg.hidden = {12};
  cfg.output_dim = 1;
  cfg.activation = Activation::Gelu;
  cfg.dropout = 0.1;

  LossSpec spec;
  spec.kind = Likelihood::GaussianRegression;
  spec.noise_var = 0.05;
  spec.prior_precision = 0.5;

  Dataset data;
  data.X = Matrix(40, 1);
  data.y = Vector(40);
  auto rng = make_rng(3);
  for (int i = 0; i < 40; ++i) {
    const double x = -2.0 + 4.0 * i / 39.0;
    data.X(i, 0) = x;
    data.y[i] = std::sin(2.0 * x) +
                0.05 * std::normal_distribution<double>()(rng);
  }

  TrainOpts opts;
  opts.epochs = 1500;
  opts.lr = 5e-3;
  opts.weight_decay = 0.0;
  opts.refine_steps = 20000;
  opts.refine_tol = 1e-3;
  opts.seed = 0;

  Vector theta = train_map(cfg, spec, data, opts);
  MlpLossField field(cfg, spec, data);
  auto [loss, grad] = value_and_grad(field, theta);
  CHECK(grad.norm() < 0.05);

  // Deterministic-mode train MSE beats predicting the mean.
  Matrix pred = mlp_forward(cfg, theta, data.X);
  const double mse = (pred.col(0) - data.y).squaredNorm() / 40.0;
  const double var =
      (data.y.array() - data.y.mean()).square().sum() / 40.0;
  CHECK(mse < var);

  // Same options, same data: bitwise identical fit.
  Vector theta2 = train_map(cfg, spec, data, opts);
  CHECK((theta - theta2).norm() == 0.0);
}

TEST_CASE("loss spec and dataset validation reject malformed inputs") {
  LossSpec spec;
  spec.noise_var = 0.0;
  CHECK_THROWS_AS(spec.validate(), SchemaMismatch);
  spec.noise_var = 1.0;
  spec.label_smoothing = 1.0;
  CHECK_THROWS_AS(spec.validate(), SchemaMismatch);

  Dataset data;
  data.X = Matrix(3, 2);
  data.X.setZero();
  data.y = Vector(2);
  data.y.setZero();
  CHECK_THROWS_AS(data.validate(Likelihood::GaussianRegression),
                  DimensionMismatch);

  Dataset cls = one_point_classification();
  cls.y[0] = 5.0;  // outside num_classes
  CHECK_THROWS(cls.validate(Likelihood::Categorical));
}
