#pragma once

#include "dims/model.hpp"

#include <vector>

namespace dims {

struct PredictiveEnsemble {
  Likelihood kind = Likelihood::GaussianRegression;
  int members = 0;
  Matrix mean_probs;  // classification: N x C averaged class probabilities
  Vector mean;        // regression: per-point predictive mean
  Vector std_dev;     // regression: per-point predictive std (population)
};

// Pool raw member outputs: logits go through a row-wise softmax before
// averaging; regression outputs reduce to mean and population std.
PredictiveEnsemble ensemble_from_outputs(const std::vector<Matrix>& outputs,
                                         Likelihood kind);

// Forward every parameter sample through the network and pool the outputs.
PredictiveEnsemble ensemble_predict(const MLPConfig& cfg, Likelihood kind,
                                    const std::vector<Vector>& thetas,
                                    const Matrix& X);

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  long count = 0;
  double confidence = 0.0;  // mean max-probability inside the bin
  double accuracy = 0.0;
};

struct CalibrationReport {
  double accuracy = 0.0;
  double nll = 0.0;    // mean negative log probability of the label
  double brier = 0.0;  // squared error vs one-hot, mean over rows and classes
  double ece = 0.0;
  double mce = 0.0;
  long n = 0;
  std::vector<CalibrationBin> bins;
};

// Classification metrics over averaged class probabilities. Confidence is
// binned into `num_bins` equal-width intervals; ECE weights the per-bin
// |accuracy - confidence| gap by bin mass, MCE takes the worst gap.
CalibrationReport calibration_report(const Matrix& probs, const Vector& labels,
                                     int num_bins = 10);

struct RegressionReport {
  double rmse = 0.0;
  double nll = 0.0;  // Gaussian predictive with variance std^2 + noise_var
  double mean_std = 0.0;
};

RegressionReport regression_report(const PredictiveEnsemble& ens,
                                   const Vector& y, double noise_var);

// Shannon entropy of each probability row, in nats.
Vector predictive_entropy(const Matrix& probs);

// Probability that a random out-of-distribution score exceeds a random
// in-distribution score, ties counted half (rank statistic).
double auroc_ood(const std::vector<double>& id_scores,
                 const std::vector<double>& ood_scores);

}  // namespace dims
