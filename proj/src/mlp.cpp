#include "dims/mlp.hpp"

#include <cmath>

namespace dims {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "gelu") return Activation::Gelu;
  if (name == "silu") return Activation::Silu;
  throw SchemaMismatch("unknown activation: " + name);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Gelu: return "gelu";
    case Activation::Silu: return "silu";
  }
  return "tanh";
}

int MLPConfig::layer_in(int l) const {
  return l == 0 ? input_dim : hidden[static_cast<std::size_t>(l) - 1];
}

int MLPConfig::layer_out(int l) const {
  return l == num_layers() - 1 ? output_dim
                               : hidden[static_cast<std::size_t>(l)];
}

Index MLPConfig::param_count() const {
  Index count = 0;
  for (int l = 0; l < num_layers(); ++l) {
    count += static_cast<Index>(layer_in(l) + 1) * layer_out(l);
  }
  return count;
}

void MLPConfig::validate() const {
  if (input_dim <= 0 || output_dim <= 0) {
    throw SchemaMismatch("network dimensions must be positive");
  }
  for (int h : hidden) {
    if (h <= 0) {
      throw SchemaMismatch("hidden widths must be positive");
    }
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw SchemaMismatch("dropout must lie in [0, 1)");
  }
}

ParamView::ParamView(const MLPConfig& cfg, const Vector& theta) {
  require_dim(theta.size(), cfg.param_count(), "ParamView: theta");
  const double* p = theta.data();
  W.reserve(static_cast<std::size_t>(cfg.num_layers()));
  b.reserve(static_cast<std::size_t>(cfg.num_layers()));
  for (int l = 0; l < cfg.num_layers(); ++l) {
    const int in = cfg.layer_in(l);
    const int out = cfg.layer_out(l);
    W.emplace_back(p, in, out);
    p += static_cast<std::ptrdiff_t>(in) * out;
    b.emplace_back(p, out);
    p += out;
  }
}

ParamViewMut::ParamViewMut(const MLPConfig& cfg, Vector& theta) {
  require_dim(theta.size(), cfg.param_count(), "ParamViewMut: theta");
  double* p = theta.data();
  W.reserve(static_cast<std::size_t>(cfg.num_layers()));
  b.reserve(static_cast<std::size_t>(cfg.num_layers()));
  for (int l = 0; l < cfg.num_layers(); ++l) {
    const int in = cfg.layer_in(l);
    const int out = cfg.layer_out(l);
    W.emplace_back(p, in, out);
    p += static_cast<std::ptrdiff_t>(in) * out;
    b.emplace_back(p, out);
    p += out;
  }
}

void activation_eval(Activation a, const Matrix& z, Matrix& value, Matrix* d1,
                     Matrix* d2) {
  switch (a) {
    case Activation::Tanh: {
      value = z.array().tanh();
      if (d1 != nullptr) {
        *d1 = 1.0 - value.array().square();
      }
      if (d2 != nullptr) {
        *d2 = -2.0 * value.array() * (1.0 - value.array().square());
      }
      break;
    }
    case Activation::Gelu: {
      // Exact form x * Phi(x) with the Gaussian cdf, not the tanh surrogate.
      Matrix phi = (kInvSqrt2Pi * (-0.5 * z.array().square()).exp()).matrix();
      Matrix cdf = z.unaryExpr(
          [](double x) { return 0.5 * std::erfc(-x * kInvSqrt2); });
      value = z.array() * cdf.array();
      if (d1 != nullptr) {
        *d1 = cdf.array() + z.array() * phi.array();
      }
      if (d2 != nullptr) {
        *d2 = phi.array() * (2.0 - z.array().square());
      }
      break;
    }
    case Activation::Silu: {
      Matrix s = (1.0 / (1.0 + (-z.array()).exp())).matrix();
      value = z.array() * s.array();
      Matrix sp = (s.array() * (1.0 - s.array())).matrix();
      if (d1 != nullptr) {
        *d1 = s.array() + z.array() * sp.array();
      }
      if (d2 != nullptr) {
        *d2 = sp.array() * (2.0 + z.array() * (1.0 - 2.0 * s.array()));
      }
      break;
    }
  }
}

std::vector<Matrix> dropout_masks(const MLPConfig& cfg, Index rows,
                                  std::uint64_t seed) {
  std::vector<Matrix> masks;
  if (cfg.dropout <= 0.0) {
    return masks;
  }
  auto rng = make_rng(seed);
  std::bernoulli_distribution keep(1.0 - cfg.dropout);
  const double scale = 1.0 / (1.0 - cfg.dropout);
  masks.reserve(cfg.hidden.size());
  for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
    Matrix m(rows, cfg.hidden[l]);
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) {
        m(i, j) = keep(rng) ? scale : 0.0;
      }
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

void mlp_forward_pass(const MLPConfig& cfg, const Vector& theta,
                      const Matrix& X, const std::vector<Matrix>& masks,
                      bool need_d2, MlpPass& pass) {
  require_dim(X.cols(), cfg.input_dim, "mlp_forward_pass: X");
  const int layers = cfg.num_layers();
  ParamView p(cfg, theta);

  pass.z.resize(static_cast<std::size_t>(layers));
  pass.a.resize(static_cast<std::size_t>(layers > 0 ? layers - 1 : 0));
  pass.d1.resize(pass.a.size());
  pass.d2.resize(need_d2 ? pass.a.size() : 0);

  const Matrix* input = &X;
  for (int l = 0; l < layers; ++l) {
    auto& z = pass.z[static_cast<std::size_t>(l)];
    z.noalias() = (*input) * p.W[static_cast<std::size_t>(l)];
    z.rowwise() += p.b[static_cast<std::size_t>(l)].transpose();
    if (l == layers - 1) {
      break;
    }
    auto& a = pass.a[static_cast<std::size_t>(l)];
    auto& d1 = pass.d1[static_cast<std::size_t>(l)];
    Matrix* d2 = need_d2 ? &pass.d2[static_cast<std::size_t>(l)] : nullptr;
    activation_eval(cfg.activation, z, a, &d1, d2);
    if (!masks.empty()) {
      a.array() *= masks[static_cast<std::size_t>(l)].array();
    }
    input = &a;
  }
}

Matrix mlp_forward(const MLPConfig& cfg, const Vector& theta, const Matrix& X) {
  MlpPass pass;
  mlp_forward_pass(cfg, theta, X, {}, false, pass);
  return pass.z.back();
}

Matrix network_jvp(const MLPConfig& cfg, const Vector& theta, const Matrix& X,
                   const Vector& tangent) {
  require_dim(tangent.size(), cfg.param_count(), "network_jvp: tangent");
  MlpPass pass;
  mlp_forward_pass(cfg, theta, X, {}, false, pass);
  ParamView p(cfg, theta);
  ParamView t(cfg, tangent);

  const int layers = cfg.num_layers();
  Matrix rz;
  Matrix ra;
  for (int l = 0; l < layers; ++l) {
    const Matrix& input = l == 0 ? X : pass.a[static_cast<std::size_t>(l) - 1];
    if (l == 0) {
      rz.noalias() = X * t.W[0];
    } else {
      rz.noalias() = ra * p.W[static_cast<std::size_t>(l)];
      rz.noalias() += input * t.W[static_cast<std::size_t>(l)];
    }
    rz.rowwise() += t.b[static_cast<std::size_t>(l)].transpose();
    if (l < layers - 1) {
      ra = pass.d1[static_cast<std::size_t>(l)].array() * rz.array();
    }
  }
  return rz;
}

Vector init_params(const MLPConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Vector theta(cfg.param_count());
  ParamViewMut p(cfg, theta);
  auto rng = make_rng(seed);
  for (int l = 0; l < cfg.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.layer_in(l)));
    std::uniform_real_distribution<double> uniform(-bound, bound);
    auto& W = p.W[static_cast<std::size_t>(l)];
    for (Index i = 0; i < W.rows(); ++i) {
      for (Index j = 0; j < W.cols(); ++j) {
        W(i, j) = uniform(rng);
      }
    }
    auto& b = p.b[static_cast<std::size_t>(l)];
    for (Index j = 0; j < b.size(); ++j) {
      b[j] = uniform(rng);
    }
  }
  return theta;
}

}  // namespace dims
