#include "dims/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dims {

namespace {

constexpr double kProbFloor = 1e-300;

Matrix softmax_rows(const Matrix& logits) {
  Vector rowmax = logits.rowwise().maxCoeff();
  Matrix expz = (logits.colwise() - rowmax).array().exp();
  Vector denom = expz.rowwise().sum();
  return expz.array().colwise() / denom.array();
}

}  // namespace

PredictiveEnsemble ensemble_from_outputs(const std::vector<Matrix>& outputs,
                                         Likelihood kind) {
  if (outputs.empty()) {
    throw EmptyInput("ensemble has no members");
  }
  const Index n = outputs.front().rows();
  const Index c = outputs.front().cols();
  for (const Matrix& m : outputs) {
    require_dim(m.rows(), n, "member rows");
    require_dim(m.cols(), c, "member cols");
  }

  PredictiveEnsemble ens;
  ens.kind = kind;
  ens.members = static_cast<int>(outputs.size());
  const double inv_m = 1.0 / static_cast<double>(outputs.size());

  if (kind == Likelihood::Categorical) {
    if (c < 2) {
      throw DimensionMismatch("classification needs at least two columns");
    }
    ens.mean_probs = Matrix::Zero(n, c);
    for (const Matrix& m : outputs) {
      ens.mean_probs += softmax_rows(m);
    }
    ens.mean_probs *= inv_m;
  } else {
    if (c != 1) {
      throw DimensionMismatch("regression outputs must have one column");
    }
    Vector sum = Vector::Zero(n);
    for (const Matrix& m : outputs) {
      sum += m.col(0);
    }
    ens.mean = sum * inv_m;
    Vector sq = Vector::Zero(n);
    for (const Matrix& m : outputs) {
      sq.array() += (m.col(0) - ens.mean).array().square();
    }
    ens.std_dev = (sq * inv_m).cwiseMax(0.0).cwiseSqrt();
  }
  return ens;
}

PredictiveEnsemble ensemble_predict(const MLPConfig& cfg, Likelihood kind,
                                    const std::vector<Vector>& thetas,
                                    const Matrix& X) {
  if (thetas.empty()) {
    throw EmptyInput("no parameter samples");
  }
  std::vector<Matrix> outputs;
  outputs.reserve(thetas.size());
  for (const Vector& theta : thetas) {
    outputs.push_back(mlp_forward(cfg, theta, X));
  }
  return ensemble_from_outputs(outputs, kind);
}

CalibrationReport calibration_report(const Matrix& probs, const Vector& labels,
                                     int num_bins) {
  const Index n = probs.rows();
  const Index c = probs.cols();
  if (n == 0) {
    throw EmptyInput("no predictions");
  }
  require_dim(labels.size(), n, "labels");
  if (c < 2) {
    throw DimensionMismatch("need at least two classes");
  }
  if (num_bins < 1) {
    throw Error("need at least one bin");
  }

  CalibrationReport rep;
  rep.n = n;
  rep.bins.resize(static_cast<std::size_t>(num_bins));
  for (int b = 0; b < num_bins; ++b) {
    auto& bin = rep.bins[static_cast<std::size_t>(b)];
    bin.lo = static_cast<double>(b) / num_bins;
    bin.hi = static_cast<double>(b + 1) / num_bins;
  }
  std::vector<double> bin_conf(static_cast<std::size_t>(num_bins), 0.0);
  std::vector<double> bin_acc(static_cast<std::size_t>(num_bins), 0.0);

  double nll = 0.0;
  double brier = 0.0;
  long correct = 0;
  for (Index i = 0; i < n; ++i) {
    const double raw = labels[i];
    const auto label = static_cast<Index>(raw);
    if (raw != std::floor(raw) || label < 0 || label >= c) {
      throw SchemaMismatch("label out of range at row " + std::to_string(i));
    }
    Index pred = 0;
    const double conf = probs.row(i).maxCoeff(&pred);
    if (!(conf >= 0.0) || !std::isfinite(conf)) {
      throw NonFiniteEvaluation("non-finite probability row");
    }
    const bool hit = pred == label;
    correct += hit ? 1 : 0;
    nll -= std::log(std::max(probs(i, label), kProbFloor));
    for (Index j = 0; j < c; ++j) {
      const double target = j == label ? 1.0 : 0.0;
      const double diff = probs(i, j) - target;
      brier += diff * diff;
    }
    int b = static_cast<int>(conf * num_bins);
    b = std::clamp(b, 0, num_bins - 1);
    auto& bin = rep.bins[static_cast<std::size_t>(b)];
    bin.count += 1;
    bin_conf[static_cast<std::size_t>(b)] += conf;
    bin_acc[static_cast<std::size_t>(b)] += hit ? 1.0 : 0.0;
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  rep.accuracy = static_cast<double>(correct) * inv_n;
  rep.nll = nll * inv_n;
  // Squared error averaged over classes as well as rows, matching the scale
  // of the binary scalar form (p - y)^2.
  rep.brier = brier * inv_n / static_cast<double>(c);
  for (int b = 0; b < num_bins; ++b) {
    auto& bin = rep.bins[static_cast<std::size_t>(b)];
    if (bin.count == 0) {
      continue;
    }
    bin.confidence = bin_conf[static_cast<std::size_t>(b)] / bin.count;
    bin.accuracy = bin_acc[static_cast<std::size_t>(b)] / bin.count;
    const double gap = std::abs(bin.accuracy - bin.confidence);
    rep.ece += gap * bin.count * inv_n;
    rep.mce = std::max(rep.mce, gap);
  }
  return rep;
}

RegressionReport regression_report(const PredictiveEnsemble& ens,
                                   const Vector& y, double noise_var) {
  if (ens.kind != Likelihood::GaussianRegression) {
    throw Error("regression report needs a regression ensemble");
  }
  const Index n = ens.mean.size();
  if (n == 0) {
    throw EmptyInput("no predictions");
  }
  require_dim(y.size(), n, "targets");
  if (!(noise_var >= 0.0)) {
    throw Error("noise variance must be non-negative");
  }

  RegressionReport rep;
  constexpr double kLog2Pi = 1.8378770664093454836;
  double sse = 0.0;
  double nll = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double diff = ens.mean[i] - y[i];
    sse += diff * diff;
    const double var =
        std::max(ens.std_dev[i] * ens.std_dev[i] + noise_var, 1e-300);
    nll += 0.5 * (kLog2Pi + std::log(var)) + diff * diff / (2.0 * var);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  rep.rmse = std::sqrt(sse * inv_n);
  rep.nll = nll * inv_n;
  rep.mean_std = ens.std_dev.mean();
  return rep;
}

Vector predictive_entropy(const Matrix& probs) {
  const Index n = probs.rows();
  Vector out(n);
  for (Index i = 0; i < n; ++i) {
    double h = 0.0;
    for (Index j = 0; j < probs.cols(); ++j) {
      const double p = probs(i, j);
      if (p > 0.0) {
        h -= p * std::log(p);
      }
    }
    out[i] = h;
  }
  return out;
}

double auroc_ood(const std::vector<double>& id_scores,
                 const std::vector<double>& ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw EmptyInput("both score sets must be non-empty");
  }
  struct Entry {
    double score;
    bool ood;
  };
  std::vector<Entry> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) {
    require_finite(s, "score");
    all.push_back({s, false});
  }
  for (double s : ood_scores) {
    require_finite(s, "score");
    all.push_back({s, true});
  }
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // Average ranks over tie groups, then the Mann-Whitney statistic.
  double rank_sum_ood = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) {
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t t = i; t < j; ++t) {
      if (all[t].ood) {
        rank_sum_ood += avg_rank;
      }
    }
    i = j;
  }
  const double n_ood = static_cast<double>(ood_scores.size());
  const double n_id = static_cast<double>(id_scores.size());
  const double u = rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0;
  return u / (n_ood * n_id);
}

}  // namespace dims
