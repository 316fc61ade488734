// Command-line front end: train/tune/fit-hessian/sample/evaluate subcommands
// over a JSON experiment config, plus analytic surface verification.
// Exit codes: 0 success, 2 config or input error, 3 runtime failure.

#include "dims/analytic.hpp"
#include "dims/harness.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace {

using nlohmann::json;

struct GlobalOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int workers = 0;
  std::string out_dir;
  bool out_set = false;
};

dims::ExperimentConfig load_with_overrides(const GlobalOpts& g) {
  if (g.config_path.empty()) {
    throw dims::SchemaMismatch("this command needs --config PATH");
  }
  dims::ExperimentConfig cfg = dims::load_config(g.config_path);
  if (g.seed_set) {
    cfg.seeds = {g.seed};
  }
  if (g.workers > 0) {
    cfg.workers = g.workers;
  }
  if (g.out_set) {
    cfg.output_dir = g.out_dir;
  }
  return cfg;
}

dims::TaggedDataset load_raw(const dims::ExperimentConfig& cfg) {
  dims::DatasetSchema schema;
  schema.task = cfg.task;
  schema.ood = cfg.ood;
  return dims::load_dataset(cfg.dataset_path, schema);
}

json hessian_summary(const dims::HessianApprox& h) {
  json j;
  j["kind"] = dims::to_string(h.kind);
  j["dim"] = h.dim();
  j["damping"] = h.damping;
  j["log_det"] = h.log_det();
  switch (h.kind) {
    case dims::HessianKind::Full: {
      const int K = static_cast<int>(h.eigvals.size());
      const int top = std::min(K, 10);
      std::vector<double> vals;
      for (int i = 0; i < top; ++i) {
        vals.push_back(h.eigvals[K - 1 - i]);
      }
      j["top_eigenvalues"] = vals;
      j["min_eigenvalue"] = h.eigvals[0];
      break;
    }
    case dims::HessianKind::LowRank: {
      const int top = std::min<int>(static_cast<int>(h.eigvals.size()), 10);
      j["top_eigenvalues"] = std::vector<double>(
          h.eigvals.data(), h.eigvals.data() + top);
      j["rank"] = h.rank();
      j["lanczos_converged"] = h.lanczos_converged;
      break;
    }
    case dims::HessianKind::Diagonal:
      j["diag_max"] = h.diag.maxCoeff();
      j["diag_min"] = h.diag.minCoeff();
      break;
  }
  return j;
}

int report_results(const dims::ResultsRecord& rec, bool as_json) {
  if (as_json) {
    std::cout << dims::results_to_json(rec).dump(2) << '\n';
  } else {
    std::cout << "config " << rec.config_hash << '\n';
    for (const dims::CellResult& cell : rec.cells) {
      std::cout << cell.sampler << " seed=" << cell.seed;
      if (!cell.ok) {
        std::cout << " FAILED: " << cell.error << '\n';
        continue;
      }
      for (const auto& [k, v] : cell.metrics) {
        std::cout << ' ' << k << '=' << dims::format_double(v);
      }
      std::cout << '\n';
    }
  }
  for (const dims::CellResult& cell : rec.cells) {
    if (!cell.ok) return 3;
  }
  return 0;
}

int cmd_run(const GlobalOpts& g, bool as_json) {
  dims::ExperimentConfig cfg = load_with_overrides(g);
  return report_results(dims::run_experiment(cfg), as_json);
}

int cmd_sample(const GlobalOpts& g, const std::string& sampler, bool as_json) {
  dims::ExperimentConfig cfg = load_with_overrides(g);
  if (!sampler.empty()) {
    std::vector<dims::SamplerSpec> keep;
    for (const dims::SamplerSpec& s : cfg.samplers) {
      if (s.kind == sampler) keep.push_back(s);
    }
    if (keep.empty()) {
      throw dims::SchemaMismatch("config has no sampler of kind '" + sampler +
                                 "'");
    }
    cfg.samplers = std::move(keep);
  }
  return report_results(dims::run_experiment(cfg), as_json);
}

int cmd_train(const GlobalOpts& g) {
  dims::ExperimentConfig cfg = load_with_overrides(g);
  dims::TaggedDataset raw = load_raw(cfg);
  json out = json::array();
  for (std::uint64_t seed : cfg.seeds) {
    dims::PreparedSeed prep = dims::prepare_seed(cfg, raw, seed,
                                                 /*with_tune=*/false,
                                                 /*with_hessian=*/false);
    json row;
    row["seed"] = seed;
    row["dim"] = prep.theta.size();
    row["joint_loss"] = prep.anchor.loss;
    row["grad_norm"] = std::sqrt(prep.anchor.grad_sq);
    if (!cfg.output_dir.empty()) {
      std::filesystem::create_directories(cfg.output_dir);
      const std::string path =
          cfg.output_dir + "/theta_seed" + std::to_string(seed) + ".bin";
      dims::save_checkpoint(path, prep.theta);
      row["checkpoint"] = path;
    }
    out.push_back(std::move(row));
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_tune(const GlobalOpts& g) {
  dims::ExperimentConfig cfg = load_with_overrides(g);
  dims::TaggedDataset raw = load_raw(cfg);
  json out = json::array();
  for (std::uint64_t seed : cfg.seeds) {
    dims::PreparedSeed prep = dims::prepare_seed(cfg, raw, seed,
                                                 /*with_tune=*/false,
                                                 /*with_hessian=*/false);
    dims::HyperGrid grid;
    grid.prior_precisions = dims::default_hyper_grid();
    grid.noise_vars = dims::default_hyper_grid();
    dims::TunedHypers tuned =
        dims::tune_hypers(prep.model, prep.loss, prep.split.train, prep.theta,
                          grid, cfg.hessian_kind, cfg.hessian_rank);
    json row;
    row["seed"] = seed;
    row["prior_precision"] = tuned.prior_precision;
    if (cfg.task == dims::Likelihood::GaussianRegression) {
      row["noise_var"] = tuned.noise_var;
    }
    row["log_evidence"] = tuned.evidence;
    out.push_back(std::move(row));
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_fit_hessian(const GlobalOpts& g) {
  dims::ExperimentConfig cfg = load_with_overrides(g);
  dims::TaggedDataset raw = load_raw(cfg);
  json out = json::array();
  for (std::uint64_t seed : cfg.seeds) {
    dims::PreparedSeed prep = dims::prepare_seed(cfg, raw, seed);
    json row = hessian_summary(prep.hessian);
    row["seed"] = seed;
    row["prior_precision"] = prep.loss.prior_precision;
    out.push_back(std::move(row));
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_evaluate(const GlobalOpts& g, const std::string& samples_path) {
  dims::ExperimentConfig cfg = load_with_overrides(g);
  std::ifstream in(samples_path, std::ios::binary);
  if (!in) {
    throw dims::ParseError("cannot open " + samples_path);
  }
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw dims::ParseError(std::string("invalid sample set JSON: ") +
                           e.what());
  }
  if (!j.is_object() || !j.contains("sampler") || !j.contains("seed") ||
      !j.contains("samples") || !j["samples"].is_array()) {
    throw dims::SchemaMismatch(
        "sample set needs 'sampler', 'seed', and a 'samples' array");
  }
  const std::string sampler = j["sampler"].get<std::string>();
  const std::uint64_t seed = j["seed"].get<std::uint64_t>();
  std::vector<dims::Vector> thetas;
  for (const json& e : j["samples"]) {
    if (!e.contains("theta") || !e["theta"].is_array()) {
      throw dims::SchemaMismatch("each sample needs a 'theta' array");
    }
    const auto vals = e["theta"].get<std::vector<double>>();
    thetas.push_back(Eigen::Map<const dims::Vector>(
        vals.data(), static_cast<dims::Index>(vals.size())));
  }
  if (thetas.empty()) {
    throw dims::EmptyInput("sample set holds no samples");
  }

  dims::TaggedDataset raw = load_raw(cfg);
  dims::PreparedSeed prep = dims::prepare_seed(cfg, raw, seed, cfg.tune,
                                               /*with_hessian=*/false);
  for (const dims::Vector& th : thetas) {
    if (th.size() != prep.theta.size()) {
      throw dims::DimensionMismatch(
          "sample dimension does not match the configured model");
    }
  }
  dims::CellResult cell = dims::evaluate_samples(prep, sampler, thetas);
  json out;
  out["sampler"] = sampler;
  out["seed"] = seed;
  out["num_samples"] = thetas.size();
  out["metrics"] = json::object();
  for (const auto& [k, v] : cell.metrics) {
    out["metrics"][k] = v;
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

struct AnalyticOpts {
  std::string surface = "bowl";
  long dim = 10;
  double param = 0.0;
  bool param_set = false;
  int runs = 20;
  std::vector<double> eta0;
  double kappa = 1.0;
  double t_end = 1e4;
  double kinetic_eps = 1e-4;
  double position_sigma = 1.0;
  double speed_sigma = 1.0;
  bool start_on_minimum = false;
  std::uint64_t base_seed = 0;
  double audit_tol = 1e-2;
  double stationarity_tol = 1e-3;
  double stride = 0.01;
  double atol = 1e-6;
  double rtol = 1e-7;
};

int cmd_analytic_verify(const AnalyticOpts& a, bool as_json) {
  double param = a.param;
  if (!a.param_set) {
    param = a.surface == "bowl" ? 10.0 : 1.0;
  }
  std::unique_ptr<dims::LossField> field =
      dims::surface_field(a.surface, a.dim, param);

  dims::SweepConfig sweep;
  sweep.seeds = a.runs;
  if (!a.eta0.empty()) {
    sweep.eta0_grid = a.eta0;
  }
  sweep.kappa = a.kappa;
  sweep.t_end = a.t_end;
  sweep.kinetic_eps = a.kinetic_eps;
  sweep.position_sigma = a.position_sigma;
  sweep.speed_sigma = a.speed_sigma;
  sweep.start_on_minimum = a.start_on_minimum;
  sweep.base_seed = a.base_seed;
  sweep.audit_tol = a.audit_tol;
  sweep.stationarity_tol = a.stationarity_tol;
  sweep.solver.dense_stride = a.stride;
  sweep.solver.atol = a.atol;
  sweep.solver.rtol = a.rtol;

  dims::SuiteReport report = dims::run_theorem_suite(*field, 0.0, sweep);
  if (as_json) {
    std::cout << report.to_json() << '\n';
  } else {
    std::cout << "surface=" << a.surface << " dim=" << field->dim()
              << " param=" << dims::format_double(param) << " runs "
              << report.runs.size() << '\n'
              << "monotone_failures=" << report.monotone_failures << '\n'
              << "audit_failures=" << report.audit_failures << '\n'
              << "stationarity_failures=" << report.stationarity_failures
              << '\n'
              << "time_bound_failures=" << report.time_bound_failures << '\n'
              << "length_failures=" << report.length_failures << '\n'
              << "run_errors=" << report.run_errors << '\n'
              << (report.all_ok() ? "ALL OK" : "CHECK FAILURES") << '\n';
  }
  return report.all_ok() ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dissipative minima sampling on MLP loss surfaces"};
  app.require_subcommand(1);

  GlobalOpts g;
  CLI::Option* seed_opt =
      app.add_option("--seed", g.seed, "override the config seed list");
  app.add_option("--config", g.config_path, "experiment config JSON");
  app.add_option("--workers", g.workers, "override worker thread count")
      ->check(CLI::PositiveNumber);
  CLI::Option* out_opt =
      app.add_option("--out", g.out_dir, "override the output directory");

  bool as_json = false;
  app.add_flag("--json", as_json, "print machine-readable JSON");

  CLI::App* sub_run =
      app.add_subcommand("run", "full experiment: all samplers and seeds");
  CLI::App* sub_train =
      app.add_subcommand("train", "fit anchors only; write checkpoints");
  CLI::App* sub_tune =
      app.add_subcommand("tune", "grid-search prior precision and noise");
  CLI::App* sub_fit =
      app.add_subcommand("fit-hessian", "fit and summarize the curvature");
  CLI::App* sub_sample =
      app.add_subcommand("sample", "run one sampler from the config");
  CLI::App* sub_eval =
      app.add_subcommand("evaluate", "recompute metrics from saved samples");
  CLI::App* sub_verify =
      app.add_subcommand("analytic-verify",
                         "energy and convergence checks on a test surface");
  for (CLI::App* sub :
       {sub_run, sub_train, sub_tune, sub_fit, sub_sample, sub_eval,
        sub_verify}) {
    sub->fallthrough();
  }

  std::string sampler_kind;
  sub_sample->add_option("--sampler", sampler_kind,
                         "sampler kind to run (default: all configured)");

  std::string samples_path;
  sub_eval->add_option("--samples", samples_path, "sample set JSON file")
      ->required();

  AnalyticOpts a;
  sub_verify->add_option("--surface", a.surface, "bowl, sphere, or rastrigin")
      ->check(CLI::IsMember({"bowl", "sphere", "rastrigin"}));
  sub_verify->add_option("--dim", a.dim, "surface dimension")
      ->check(CLI::PositiveNumber);
  CLI::Option* param_opt = sub_verify->add_option(
      "--param", a.param,
      "surface parameter: bowl condition number, sphere radius, "
      "rastrigin scale");
  sub_verify->add_option("--runs", a.runs, "seeds per friction setting")
      ->check(CLI::PositiveNumber);
  sub_verify->add_option("--eta0", a.eta0,
                         "friction coefficients (default 0.1 0.5 2.0)");
  sub_verify->add_option("--kappa", a.kappa, "potential weight");
  sub_verify->add_option("--t-end", a.t_end, "integration horizon");
  sub_verify->add_option("--kinetic-eps", a.kinetic_eps,
                         "kinetic stopping threshold");
  sub_verify->add_option("--position-sigma", a.position_sigma,
                         "start position spread");
  sub_verify->add_option("--speed-sigma", a.speed_sigma,
                         "start velocity spread");
  sub_verify->add_flag("--start-on-minimum", a.start_on_minimum,
                       "project starts onto the minimum set");
  sub_verify->add_option("--base-seed", a.base_seed, "seed stream base");
  sub_verify->add_option("--audit-tol", a.audit_tol,
                         "energy audit residual tolerance");
  sub_verify->add_option("--stationarity-tol", a.stationarity_tol,
                         "terminal gradient tolerance");
  sub_verify->add_option("--stride", a.stride,
                         "energy record stride for the audit");
  sub_verify->add_option("--atol", a.atol, "integrator absolute tolerance");
  sub_verify->add_option("--rtol", a.rtol, "integrator relative tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  g.seed_set = seed_opt->count() > 0;
  g.out_set = out_opt->count() > 0;
  a.param_set = param_opt->count() > 0;

  try {
    if (*sub_run) return cmd_run(g, as_json);
    if (*sub_train) return cmd_train(g);
    if (*sub_tune) return cmd_tune(g);
    if (*sub_fit) return cmd_fit_hessian(g);
    if (*sub_sample) return cmd_sample(g, sampler_kind, as_json);
    if (*sub_eval) return cmd_evaluate(g, samples_path);
    if (*sub_verify) return cmd_analytic_verify(a, as_json);
  } catch (const dims::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const dims::SchemaMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const dims::EmptyInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
