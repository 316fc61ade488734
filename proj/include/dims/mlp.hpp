#pragma once

#include "dims/common.hpp"

#include <string>
#include <vector>

namespace dims {

enum class Activation { Tanh, Gelu, Silu };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

struct MLPConfig {
  int input_dim = 1;
  std::vector<int> hidden;
  int output_dim = 1;
  Activation activation = Activation::Tanh;
  double dropout = 0.0;

  int num_layers() const { return static_cast<int>(hidden.size()) + 1; }
  int layer_in(int l) const;
  int layer_out(int l) const;
  Index param_count() const;
  void validate() const;
};

// Flat parameter layout: per layer, the column-major weight block (in x out)
// followed by the bias (out). Checkpoints and samplers rely on this order.
struct ParamView {
  explicit ParamView(const MLPConfig& cfg, const Vector& theta);
  std::vector<Eigen::Map<const Matrix>> W;
  std::vector<Eigen::Map<const Vector>> b;
};

struct ParamViewMut {
  explicit ParamViewMut(const MLPConfig& cfg, Vector& theta);
  std::vector<Eigen::Map<Matrix>> W;
  std::vector<Eigen::Map<Vector>> b;
};

// Activation value and first/second derivatives, elementwise over z.
// d1 and d2 may be null when not needed.
void activation_eval(Activation a, const Matrix& z, Matrix& value, Matrix* d1,
                     Matrix* d2);

// Per-layer forward caches. z[l] holds pre-activations of layer l; a[l], d1[l]
// and d2[l] cover the hidden layers only (the output layer is linear).
struct MlpPass {
  std::vector<Matrix> z;
  std::vector<Matrix> a;
  std::vector<Matrix> d1;
  std::vector<Matrix> d2;
};

// Inverted-dropout masks for hidden activations: entries are 0 or 1/(1-p).
std::vector<Matrix> dropout_masks(const MLPConfig& cfg, Index rows,
                                  std::uint64_t seed);

// Forward pass over a batch; masks empty means deterministic evaluation.
// Returns the output pre-activations (N x output_dim) in pass.z.back().
void mlp_forward_pass(const MLPConfig& cfg, const Vector& theta,
                      const Matrix& X, const std::vector<Matrix>& masks,
                      bool need_d2, MlpPass& pass);

// Deterministic batch forward: N x output_dim network outputs.
Matrix mlp_forward(const MLPConfig& cfg, const Vector& theta, const Matrix& X);

// Jacobian-vector product of the network outputs with respect to the
// parameters: returns d/ds f(theta + s * tangent)(X) at s = 0.
Matrix network_jvp(const MLPConfig& cfg, const Vector& theta, const Matrix& X,
                   const Vector& tangent);

// Fan-in scaled uniform initialization.
Vector init_params(const MLPConfig& cfg, std::uint64_t seed);

}  // namespace dims
