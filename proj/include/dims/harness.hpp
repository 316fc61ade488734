#pragma once

#include "dims/metrics.hpp"
#include "dims/posterior.hpp"

#include "json.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dims {

// ---------------------------------------------------------------------------
// Formatting and hashing
// ---------------------------------------------------------------------------

// Shortest decimal string that parses back to exactly the same double.
std::string format_double(double x);

std::uint64_t fnv1a64(std::string_view text);
std::string hex64(std::uint64_t value);

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

enum class SplitTag : int { None = -1, Train = 0, Test = 1, Ood = 2 };

// Closed interval on one feature; matching rows become out-of-distribution.
struct OodRule {
  int feature = 0;
  double lo = 0.0;
  double hi = 0.0;
};

struct DatasetSchema {
  Likelihood task = Likelihood::GaussianRegression;
  std::optional<OodRule> ood;
};

struct TaggedDataset {
  Matrix X;
  Vector y;
  int num_classes = 0;  // 0 for regression
  std::vector<SplitTag> tags;
  std::vector<std::string> feature_names;
  bool has_split_column = false;

  Index size() const { return X.rows(); }
};

// CSV with a header row: feature columns, one `target` column, and an
// optional `split` column holding train/test/ood. When the schema carries an
// interval rule it tags rows that the file left untagged. Classification
// targets must be contiguous integers from 0.
TaggedDataset load_dataset(const std::string& path,
                           const DatasetSchema& schema);

struct SplitPolicy {
  double test_fraction = 0.2;  // used only when no row carries a tag
  bool standardize = false;    // feature standardization on train statistics
};

struct SplitDataset {
  Dataset train;
  Dataset test;
  Dataset ood;
  Vector feature_mean;
  Vector feature_scale;
  bool standardized = false;
};

// Tagged rows keep their assignment (untagged rows default to train); fully
// untagged data gets a seeded random test_fraction holdout.
SplitDataset make_splits(const TaggedDataset& tagged, const SplitPolicy& policy,
                         std::uint64_t seed);

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct SamplerSpec {
  std::string kind;  // map | la | linla | rla | dims
  int num_samples = 30;
  double eta0 = 0.5;
  double t1 = 50.0;  // rla defaults to 1.0 at parse time
};

struct ExperimentConfig {
  // dataset
  std::string dataset_path;
  Likelihood task = Likelihood::GaussianRegression;
  std::optional<OodRule> ood;
  double test_fraction = 0.2;
  bool standardize = false;

  // model / loss
  MLPConfig model;  // input and output dims are inferred from the data
  LossSpec loss;

  // pipeline stages
  TrainOpts train;
  bool tune = true;
  HessianKind hessian_kind = HessianKind::Full;
  int hessian_rank = 10;
  Index hessian_subset = 0;  // rows of train data used for curvature; 0 = all
  std::vector<SamplerSpec> samplers;
  SolverConfig solver;
  StopCriteria stop;
  std::vector<std::uint64_t> seeds;
  bool export_trajectories = false;

  // excluded from the canonical hash
  std::string output_dir;
  int workers = 1;
};

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

// Fully-defaulted, key-sorted view of the semantically meaningful fields
// (output_dir and workers excluded).
nlohmann::json canonical_config(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u64 length, then little-endian doubles.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Vector& theta);
Vector load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Trajectory CSV: t,T,V,H,eta,grad_norm plus theta_0..theta_{K-1} columns
// when states are stored and K <= 64. Bit-stable round trip.
// ---------------------------------------------------------------------------

void export_trajectory(const Trajectory& traj, const std::string& path);

struct TrajectoryTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

TrajectoryTable import_trajectory(const std::string& path);

// ---------------------------------------------------------------------------
// Experiment execution
// ---------------------------------------------------------------------------

struct SampleDiagnostics {
  double final_loss = 0.0;
  std::string terminated_by;  // empty for closed-form samplers
  long steps = 0;
  double wall_time = 0.0;
};

struct CellResult {
  std::string sampler;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  std::map<std::string, double> metrics;
  std::vector<SampleDiagnostics> samples;
  // Raw score vectors kept so alternative separation metrics can be
  // recomputed offline.
  std::vector<double> id_scores;
  std::vector<double> ood_scores;
};

struct ResultsRecord {
  std::string config_hash;
  std::vector<CellResult> cells;
};

// include_wall_time=false gives the determinism-comparable view.
nlohmann::json results_to_json(const ResultsRecord& record,
                               bool include_wall_time = true);

// Shared per-seed pipeline state: split data, fitted anchor, tuned loss
// hyperparameters, the training-set joint field, and the curvature fit.
struct PreparedSeed {
  SplitDataset split;
  MLPConfig model;
  LossSpec loss;  // carries tuned hyperparameters when tuning ran
  Vector theta;
  std::shared_ptr<MlpLossField> joint;
  MetricPoint anchor;
  HessianApprox hessian;  // default-constructed when with_hessian is false
};

// Runs split -> train -> (tune + re-polish) -> curvature fit for one seed.
// with_tune=false skips tuning even when the config enables it.
PreparedSeed prepare_seed(const ExperimentConfig& cfg,
                          const TaggedDataset& raw, std::uint64_t seed,
                          bool with_tune = true, bool with_hessian = true);

// Ensemble the parameter samples over the seed's splits and fill a cell with
// the task metrics and score vectors. sampler_kind "linla" predicts through
// the anchor linearization; every other kind forwards the samples directly.
CellResult evaluate_samples(const PreparedSeed& ctx,
                            const std::string& sampler_kind,
                            const std::vector<Vector>& thetas);

// Full pipeline per seed: train (or reuse), tune, curvature fit, samplers,
// evaluation. Each (sampler, seed) cell is isolated: its failure is recorded
// and the remaining cells still run. Artifacts are written under output_dir
// when one is configured.
ResultsRecord run_experiment(const ExperimentConfig& cfg);

}  // namespace dims
