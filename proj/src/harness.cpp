#include "dims/harness.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace dims {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Seed stream ids so the pipeline stages draw independent randomness.
constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kVelocityStream = 2;
constexpr std::uint64_t kLanczosStream = 3;
constexpr std::uint64_t kSplitStream = 4;
constexpr std::uint64_t kSubsetStream = 5;

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r'))
    --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(trim(std::string_view(line).substr(start)));
      break;
    }
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

double parse_double_field(const std::string& field, int line_no) {
  if (field.empty()) {
    throw ParseError("empty numeric field", line_no);
  }
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ParseError("cannot parse number '" + field + "'", line_no);
  }
  if (!std::isfinite(value)) {
    throw ParseError("non-finite value '" + field + "'", line_no);
  }
  return value;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ParseError("cannot open " + path);
  }
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

// ---------------------------------------------------------------------------
// Formatting and hashing
// ---------------------------------------------------------------------------

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

TaggedDataset load_dataset(const std::string& path,
                           const DatasetSchema& schema) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.empty() || (lines.size() == 1 && trim(lines[0]).empty())) {
    throw ParseError("empty file: " + path);
  }

  const std::vector<std::string> header = split_fields(lines[0]);
  Index target_col = -1;
  Index split_col = -1;
  std::vector<Index> feature_cols;
  std::vector<std::string> feature_names;
  for (Index c = 0; c < static_cast<Index>(header.size()); ++c) {
    const std::string& name = header[static_cast<std::size_t>(c)];
    if (name == "target") {
      if (target_col >= 0) throw SchemaMismatch("duplicate column: target");
      target_col = c;
    } else if (name == "split") {
      if (split_col >= 0) throw SchemaMismatch("duplicate column: split");
      split_col = c;
    } else {
      if (name.empty()) throw SchemaMismatch("unnamed column in header");
      if (std::find(feature_names.begin(), feature_names.end(), name) !=
          feature_names.end()) {
        throw SchemaMismatch("duplicate column: " + name);
      }
      feature_cols.push_back(c);
      feature_names.push_back(name);
    }
  }
  if (target_col < 0) {
    std::string cols;
    for (const auto& h : header) cols += (cols.empty() ? "" : ", ") + h;
    throw SchemaMismatch("missing column 'target'; found: " + cols);
  }
  if (feature_cols.empty()) {
    throw SchemaMismatch("no feature columns");
  }

  std::vector<std::vector<double>> rows;
  std::vector<SplitTag> tags;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const int line_no = static_cast<int>(li) + 1;
    if (trim(lines[li]).empty()) {
      if (li + 1 == lines.size()) continue;  // trailing newline
      throw ParseError("blank line", line_no);
    }
    const std::vector<std::string> fields = split_fields(lines[li]);
    if (fields.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) +
                           " fields, got " + std::to_string(fields.size()),
                       line_no);
    }
    std::vector<double> row;
    row.reserve(feature_cols.size() + 1);
    for (Index c : feature_cols) {
      row.push_back(
          parse_double_field(fields[static_cast<std::size_t>(c)], line_no));
    }
    row.push_back(
        parse_double_field(fields[static_cast<std::size_t>(target_col)],
                           line_no));
    SplitTag tag = SplitTag::None;
    if (split_col >= 0) {
      const std::string& v = fields[static_cast<std::size_t>(split_col)];
      if (v == "train") {
        tag = SplitTag::Train;
      } else if (v == "test") {
        tag = SplitTag::Test;
      } else if (v == "ood") {
        tag = SplitTag::Ood;
      } else {
        throw ParseError("split value must be train/test/ood, got '" + v + "'",
                         line_no);
      }
    }
    rows.push_back(std::move(row));
    tags.push_back(tag);
  }
  if (rows.empty()) {
    throw EmptyInput("no data rows in " + path);
  }

  TaggedDataset out;
  const Index n = static_cast<Index>(rows.size());
  const Index d = static_cast<Index>(feature_cols.size());
  out.X.resize(n, d);
  out.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    for (Index j = 0; j < d; ++j) {
      out.X(i, j) = row[static_cast<std::size_t>(j)];
    }
    out.y[i] = row[static_cast<std::size_t>(d)];
  }
  out.tags = std::move(tags);
  out.feature_names = std::move(feature_names);
  out.has_split_column = split_col >= 0;

  if (schema.task == Likelihood::Categorical) {
    int max_label = -1;
    for (Index i = 0; i < n; ++i) {
      const double v = out.y[i];
      if (v != std::floor(v) || v < 0.0) {
        throw SchemaMismatch("classification target must be a non-negative "
                             "integer, got " +
                             format_double(v));
      }
      max_label = std::max(max_label, static_cast<int>(v));
    }
    out.num_classes = max_label + 1;
    if (out.num_classes < 2) {
      throw SchemaMismatch("need at least two classes");
    }
    std::vector<bool> seen(static_cast<std::size_t>(out.num_classes), false);
    for (Index i = 0; i < n; ++i) {
      seen[static_cast<std::size_t>(out.y[i])] = true;
    }
    for (int c = 0; c < out.num_classes; ++c) {
      if (!seen[static_cast<std::size_t>(c)]) {
        throw SchemaMismatch("class labels are not contiguous: class " +
                             std::to_string(c) + " is absent");
      }
    }
  }

  if (schema.ood.has_value()) {
    const OodRule& rule = *schema.ood;
    if (rule.feature < 0 || rule.feature >= d) {
      throw SchemaMismatch("ood feature index " +
                           std::to_string(rule.feature) + " out of range");
    }
    if (!(rule.lo <= rule.hi)) {
      throw SchemaMismatch("ood interval is empty");
    }
    for (Index i = 0; i < n; ++i) {
      if (out.tags[static_cast<std::size_t>(i)] != SplitTag::None) continue;
      const double v = out.X(i, rule.feature);
      if (v >= rule.lo && v <= rule.hi) {
        out.tags[static_cast<std::size_t>(i)] = SplitTag::Ood;
      }
    }
  }
  return out;
}

namespace {

Dataset take_rows(const TaggedDataset& tagged, const std::vector<Index>& idx) {
  Dataset out;
  out.num_classes = tagged.num_classes;
  out.X.resize(static_cast<Index>(idx.size()), tagged.X.cols());
  out.y.resize(static_cast<Index>(idx.size()));
  for (Index i = 0; i < static_cast<Index>(idx.size()); ++i) {
    out.X.row(i) = tagged.X.row(idx[static_cast<std::size_t>(i)]);
    out.y[i] = tagged.y[idx[static_cast<std::size_t>(i)]];
  }
  return out;
}

void apply_standardization(Dataset& data, const Vector& mean,
                           const Vector& scale) {
  if (data.X.rows() == 0) return;
  data.X.rowwise() -= mean.transpose();
  data.X.array().rowwise() /= scale.transpose().array();
}

}  // namespace

SplitDataset make_splits(const TaggedDataset& tagged, const SplitPolicy& policy,
                         std::uint64_t seed) {
  const Index n = tagged.size();
  if (n == 0) {
    throw EmptyInput("dataset has no rows");
  }
  std::vector<Index> train_idx;
  std::vector<Index> test_idx;
  std::vector<Index> ood_idx;

  const bool any_tag =
      std::any_of(tagged.tags.begin(), tagged.tags.end(),
                  [](SplitTag t) { return t != SplitTag::None; });
  if (any_tag) {
    for (Index i = 0; i < n; ++i) {
      switch (tagged.tags[static_cast<std::size_t>(i)]) {
        case SplitTag::Test: test_idx.push_back(i); break;
        case SplitTag::Ood: ood_idx.push_back(i); break;
        default: train_idx.push_back(i); break;
      }
    }
  } else {
    if (!(policy.test_fraction >= 0.0 && policy.test_fraction < 1.0)) {
      throw Error("test fraction must be in [0, 1)");
    }
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    auto rng = make_rng(derive_seed(seed, kSplitStream));
    std::shuffle(perm.begin(), perm.end(), rng);
    Index n_test = static_cast<Index>(
        std::llround(policy.test_fraction * static_cast<double>(n)));
    n_test = std::min(n_test, n - 1);
    for (Index i = 0; i < n; ++i) {
      if (i < n_test) {
        test_idx.push_back(perm[static_cast<std::size_t>(i)]);
      } else {
        train_idx.push_back(perm[static_cast<std::size_t>(i)]);
      }
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
  }
  if (train_idx.empty()) {
    throw EmptyInput("split leaves no training rows");
  }

  SplitDataset out;
  out.train = take_rows(tagged, train_idx);
  out.test = take_rows(tagged, test_idx);
  out.ood = take_rows(tagged, ood_idx);

  const Index d = tagged.X.cols();
  out.feature_mean = Vector::Zero(d);
  out.feature_scale = Vector::Ones(d);
  if (policy.standardize) {
    out.feature_mean = out.train.X.colwise().mean();
    for (Index j = 0; j < d; ++j) {
      const double var =
          (out.train.X.col(j).array() - out.feature_mean[j]).square().mean();
      out.feature_scale[j] = std::sqrt(var) > 1e-12 ? std::sqrt(var) : 1.0;
    }
    apply_standardization(out.train, out.feature_mean, out.feature_scale);
    apply_standardization(out.test, out.feature_mean, out.feature_scale);
    apply_standardization(out.ood, out.feature_mean, out.feature_scale);
    out.standardized = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const char* where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw SchemaMismatch(std::string("unknown key '") + item.key() +
                           "' in " + where);
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaMismatch(std::string("bad value for '") + key +
                         "': " + e.what());
  }
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) {
    throw SchemaMismatch("config root must be an object");
  }
  check_keys(j,
             {"dataset", "model", "loss", "train", "tune", "hessian",
              "samplers", "solver", "stop", "seeds", "export_trajectories",
              "output_dir", "workers"},
             "config");
  ExperimentConfig cfg;

  if (!j.contains("dataset") || !j.at("dataset").is_object()) {
    throw SchemaMismatch("config needs a 'dataset' object");
  }
  {
    const json& d = j.at("dataset");
    check_keys(d,
               {"path", "task", "standardize", "test_fraction",
                "ood_interval"},
               "dataset");
    cfg.dataset_path = get_or<std::string>(d, "path", "");
    if (cfg.dataset_path.empty()) {
      throw SchemaMismatch("dataset.path is required");
    }
    const std::string task = get_or<std::string>(d, "task", "regression");
    if (task == "regression") {
      cfg.task = Likelihood::GaussianRegression;
    } else if (task == "classification") {
      cfg.task = Likelihood::Categorical;
    } else {
      throw SchemaMismatch("dataset.task must be regression/classification");
    }
    cfg.standardize = get_or<bool>(d, "standardize", false);
    cfg.test_fraction = get_or<double>(d, "test_fraction", 0.2);
    if (d.contains("ood_interval") && !d.at("ood_interval").is_null()) {
      const json& o = d.at("ood_interval");
      check_keys(o, {"feature", "lo", "hi"}, "dataset.ood_interval");
      OodRule rule;
      rule.feature = get_or<int>(o, "feature", 0);
      rule.lo = get_or<double>(o, "lo", 0.0);
      rule.hi = get_or<double>(o, "hi", 0.0);
      cfg.ood = rule;
    }
  }

  {
    const json& m = j.contains("model") ? j.at("model") : json::object();
    check_keys(m, {"hidden", "activation", "dropout"}, "model");
    cfg.model.hidden = get_or<std::vector<int>>(m, "hidden", {16, 16});
    cfg.model.activation = activation_from_string(
        get_or<std::string>(m, "activation", "tanh"));
    cfg.model.dropout = get_or<double>(m, "dropout", 0.0);
  }

  {
    const json& l = j.contains("loss") ? j.at("loss") : json::object();
    check_keys(l, {"noise_var", "prior_precision", "label_smoothing"}, "loss");
    cfg.loss.kind = cfg.task;
    cfg.loss.noise_var = get_or<double>(l, "noise_var", 1.0);
    cfg.loss.prior_precision = get_or<double>(l, "prior_precision", 1.0);
    cfg.loss.label_smoothing = get_or<double>(l, "label_smoothing", 0.0);
  }

  {
    const json& t = j.contains("train") ? j.at("train") : json::object();
    check_keys(t,
               {"epochs", "batch_size", "lr", "weight_decay", "refine_steps",
                "refine_tol"},
               "train");
    cfg.train.epochs = get_or<int>(t, "epochs", 2000);
    cfg.train.batch_size = get_or<int>(t, "batch_size", 0);
    cfg.train.lr = get_or<double>(t, "lr", 1e-3);
    cfg.train.weight_decay = get_or<double>(t, "weight_decay", 1e-2);
    cfg.train.refine_steps = get_or<int>(t, "refine_steps", 5000);
    cfg.train.refine_tol = get_or<double>(t, "refine_tol", 1e-3);
  }

  {
    const json& t = j.contains("tune") ? j.at("tune") : json::object();
    check_keys(t, {"enabled"}, "tune");
    cfg.tune = get_or<bool>(t, "enabled", true);
  }

  {
    const json& h = j.contains("hessian") ? j.at("hessian") : json::object();
    check_keys(h, {"kind", "rank", "subset"}, "hessian");
    cfg.hessian_kind =
        hessian_kind_from_string(get_or<std::string>(h, "kind", "full"));
    cfg.hessian_rank = get_or<int>(h, "rank", 10);
    cfg.hessian_subset = get_or<Index>(h, "subset", 0);
    if (cfg.hessian_subset < 0) {
      throw SchemaMismatch("hessian.subset must be >= 0");
    }
  }

  {
    json samplers = json::array({json{{"kind", "map"}}});
    if (j.contains("samplers")) {
      samplers = j.at("samplers");
      if (!samplers.is_array()) {
        throw SchemaMismatch("samplers must be an array");
      }
    }
    for (const json& s : samplers) {
      check_keys(s, {"kind", "num_samples", "eta0", "t1"}, "samplers[]");
      SamplerSpec spec;
      spec.kind = get_or<std::string>(s, "kind", "");
      if (spec.kind != "map" && spec.kind != "la" && spec.kind != "linla" &&
          spec.kind != "rla" && spec.kind != "dims") {
        throw SchemaMismatch("sampler kind must be map/la/linla/rla/dims, "
                             "got '" +
                             spec.kind + "'");
      }
      spec.num_samples =
          spec.kind == "map" ? 1 : get_or<int>(s, "num_samples", 30);
      spec.eta0 = get_or<double>(s, "eta0", 0.5);
      spec.t1 = get_or<double>(s, "t1", spec.kind == "rla" ? 1.0 : 50.0);
      if (spec.num_samples < 1) {
        throw SchemaMismatch("num_samples must be >= 1");
      }
      if (spec.kind == "dims" && !(spec.eta0 > 0.0)) {
        throw SchemaMismatch("dims needs eta0 > 0");
      }
      if ((spec.kind == "dims" || spec.kind == "rla") && !(spec.t1 > 0.0)) {
        throw SchemaMismatch("t1 must be > 0");
      }
      cfg.samplers.push_back(spec);
    }
  }

  {
    const json& s = j.contains("solver") ? j.at("solver") : json::object();
    check_keys(s, {"atol", "rtol", "initial_step", "max_steps"}, "solver");
    cfg.solver.atol = get_or<double>(s, "atol", 1e-6);
    cfg.solver.rtol = get_or<double>(s, "rtol", 1e-7);
    cfg.solver.initial_step = get_or<double>(s, "initial_step", 0.0);
    cfg.solver.max_steps = get_or<long>(s, "max_steps", 1000000);
  }

  {
    const json& s = j.contains("stop") ? j.at("stop") : json::object();
    check_keys(s, {"kinetic_eps", "grad_tol"}, "stop");
    cfg.stop.kinetic_eps = get_or<double>(s, "kinetic_eps", 1e-8);
    cfg.stop.grad_tol = get_or<double>(s, "grad_tol", 1e-4);
  }

  cfg.seeds = get_or<std::vector<std::uint64_t>>(j, "seeds", {0});
  cfg.export_trajectories = get_or<bool>(j, "export_trajectories", false);
  cfg.output_dir = get_or<std::string>(j, "output_dir", "");
  cfg.workers = get_or<int>(j, "workers", 1);
  if (cfg.workers < 1) {
    throw SchemaMismatch("workers must be >= 1");
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError("cannot open " + path);
  }
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid config JSON: ") + e.what());
  }
  return parse_config(j);
}

json canonical_config(const ExperimentConfig& cfg) {
  json j;
  j["dataset"]["path"] = cfg.dataset_path;
  j["dataset"]["task"] =
      cfg.task == Likelihood::GaussianRegression ? "regression"
                                                 : "classification";
  j["dataset"]["standardize"] = cfg.standardize;
  j["dataset"]["test_fraction"] = cfg.test_fraction;
  if (cfg.ood.has_value()) {
    j["dataset"]["ood_interval"] = {{"feature", cfg.ood->feature},
                                    {"lo", cfg.ood->lo},
                                    {"hi", cfg.ood->hi}};
  } else {
    j["dataset"]["ood_interval"] = nullptr;
  }
  j["model"] = {{"hidden", cfg.model.hidden},
                {"activation", to_string(cfg.model.activation)},
                {"dropout", cfg.model.dropout}};
  j["loss"] = {{"noise_var", cfg.loss.noise_var},
               {"prior_precision", cfg.loss.prior_precision},
               {"label_smoothing", cfg.loss.label_smoothing}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"lr", cfg.train.lr},
                {"weight_decay", cfg.train.weight_decay},
                {"refine_steps", cfg.train.refine_steps},
                {"refine_tol", cfg.train.refine_tol}};
  j["tune"] = {{"enabled", cfg.tune}};
  j["hessian"] = {{"kind", to_string(cfg.hessian_kind)},
                  {"rank", cfg.hessian_rank},
                  {"subset", cfg.hessian_subset}};
  j["samplers"] = json::array();
  for (const SamplerSpec& s : cfg.samplers) {
    json e = {{"kind", s.kind}};
    if (s.kind != "map") {
      e["num_samples"] = s.num_samples;
    }
    if (s.kind == "rla" || s.kind == "dims") {
      e["t1"] = s.t1;
    }
    if (s.kind == "dims") {
      e["eta0"] = s.eta0;
    }
    j["samplers"].push_back(e);
  }
  j["solver"] = {{"atol", cfg.solver.atol},
                 {"rtol", cfg.solver.rtol},
                 {"initial_step", cfg.solver.initial_step},
                 {"max_steps", cfg.solver.max_steps}};
  j["stop"] = {{"kinetic_eps", cfg.stop.kinetic_eps},
               {"grad_tol", cfg.stop.grad_tol}};
  j["seeds"] = cfg.seeds;
  return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
  return hex64(fnv1a64(canonical_config(cfg).dump()));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[8] = {'D', 'I', 'M', 'S', 'P', 'A', 'R', '1'};
static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");
}  // namespace

void save_checkpoint(const std::string& path, const Vector& theta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path);
  }
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t n = static_cast<std::uint64_t>(theta.size());
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(theta.data()),
            static_cast<std::streamsize>(sizeof(double) * theta.size()));
  if (!out) {
    throw Error("short write to " + path);
  }
}

Vector load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ParseError("cannot open " + path);
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw ParseError("bad checkpoint magic in " + path);
  }
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n > (1ULL << 32)) {
    throw ParseError("bad checkpoint length in " + path);
  }
  Vector theta(static_cast<Index>(n));
  in.read(reinterpret_cast<char*>(theta.data()),
          static_cast<std::streamsize>(sizeof(double) * n));
  if (!in) {
    throw ParseError("truncated checkpoint " + path);
  }
  char extra = 0;
  if (in.read(&extra, 1)) {
    throw ParseError("trailing bytes in checkpoint " + path);
  }
  return theta;
}

// ---------------------------------------------------------------------------
// Trajectory CSV
// ---------------------------------------------------------------------------

void export_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path);
  }
  const bool with_theta =
      !traj.positions.empty() && traj.positions.front().size() <= 64;
  const Index k = with_theta ? traj.positions.front().size() : 0;

  std::string line = "t,T,V,H,eta,grad_norm";
  for (Index i = 0; i < k; ++i) {
    line += ",theta_" + std::to_string(i);
  }
  out << line << '\n';
  for (Index p = 0; p < traj.size(); ++p) {
    const EnergyRecord& e = traj.energy[static_cast<std::size_t>(p)];
    line = format_double(e.t);
    line += ',';
    line += format_double(e.kinetic);
    line += ',';
    line += format_double(e.potential);
    line += ',';
    line += format_double(e.total);
    line += ',';
    line += format_double(e.eta);
    line += ',';
    line += format_double(e.grad_norm);
    for (Index i = 0; i < k; ++i) {
      line += ',';
      line += format_double(traj.positions[static_cast<std::size_t>(p)][i]);
    }
    out << line << '\n';
  }
  if (!out) {
    throw Error("short write to " + path);
  }
}

TrajectoryTable import_trajectory(const std::string& path) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.empty()) {
    throw ParseError("empty file: " + path);
  }
  TrajectoryTable table;
  table.columns = split_fields(lines[0]);
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (trim(lines[li]).empty() && li + 1 == lines.size()) continue;
    const int line_no = static_cast<int>(li) + 1;
    const std::vector<std::string> fields = split_fields(lines[li]);
    if (fields.size() != table.columns.size()) {
      throw ParseError("expected " + std::to_string(table.columns.size()) +
                           " fields, got " + std::to_string(fields.size()),
                       line_no);
    }
    std::vector<double> row;
    row.reserve(fields.size());
    for (const std::string& f : fields) {
      row.push_back(parse_double_field(f, line_no));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Experiment execution
// ---------------------------------------------------------------------------

PreparedSeed prepare_seed(const ExperimentConfig& cfg, const TaggedDataset& raw,
                          std::uint64_t seed, bool with_tune,
                          bool with_hessian) {
  PreparedSeed ctx;
  SplitPolicy policy;
  policy.test_fraction = cfg.test_fraction;
  policy.standardize = cfg.standardize;
  ctx.split = make_splits(raw, policy, seed);

  ctx.model = cfg.model;
  ctx.model.input_dim = static_cast<int>(ctx.split.train.X.cols());
  ctx.model.output_dim =
      cfg.task == Likelihood::GaussianRegression ? 1 : raw.num_classes;
  ctx.model.validate();

  ctx.loss = cfg.loss;
  ctx.loss.kind = cfg.task;
  ctx.loss.validate();
  ctx.split.train.validate(cfg.task);

  TrainOpts topts = cfg.train;
  topts.seed = derive_seed(seed, kTrainStream);
  ctx.theta = train_map(ctx.model, ctx.loss, ctx.split.train, topts);

  if (cfg.tune && with_tune) {
    HyperGrid grid;
    grid.prior_precisions = default_hyper_grid();
    grid.noise_vars = default_hyper_grid();
    TunedHypers tuned =
        tune_hypers(ctx.model, ctx.loss, ctx.split.train, ctx.theta, grid,
                    cfg.hessian_kind, cfg.hessian_rank);
    ctx.loss.prior_precision = tuned.prior_precision;
    if (cfg.task == Likelihood::GaussianRegression) {
      ctx.loss.noise_var = tuned.noise_var;
    }
    // Re-polish the anchor so it is stationary under the tuned joint.
    MlpLossField tuned_joint(ctx.model, ctx.loss, ctx.split.train, true);
    AdamOpts refine;
    refine.steps = cfg.train.refine_steps;
    refine.lr = cfg.train.lr;
    refine.grad_tol = cfg.train.refine_tol;
    ctx.theta = adam_minimize(tuned_joint, ctx.theta, refine);
  }

  ctx.joint = std::make_shared<MlpLossField>(ctx.model, ctx.loss,
                                             ctx.split.train, true);

  if (with_hessian) {
    // Curvature of the data term only; the tuned prior precision arrives as
    // damping, which reconstructs the posterior precision.
    Dataset curvature_data = ctx.split.train;
    if (cfg.hessian_subset > 0 &&
        cfg.hessian_subset < ctx.split.train.size()) {
      std::vector<Index> perm(
          static_cast<std::size_t>(ctx.split.train.size()));
      std::iota(perm.begin(), perm.end(), Index{0});
      auto rng = make_rng(derive_seed(seed, kSubsetStream));
      std::shuffle(perm.begin(), perm.end(), rng);
      perm.resize(static_cast<std::size_t>(cfg.hessian_subset));
      std::sort(perm.begin(), perm.end());
      Dataset sub;
      sub.num_classes = ctx.split.train.num_classes;
      sub.X.resize(static_cast<Index>(perm.size()), ctx.split.train.X.cols());
      sub.y.resize(static_cast<Index>(perm.size()));
      for (Index i = 0; i < static_cast<Index>(perm.size()); ++i) {
        sub.X.row(i) =
            ctx.split.train.X.row(perm[static_cast<std::size_t>(i)]);
        sub.y[i] = ctx.split.train.y[perm[static_cast<std::size_t>(i)]];
      }
      curvature_data = std::move(sub);
    }
    MlpLossField data_field(ctx.model, ctx.loss, curvature_data,
                            /*include_prior=*/false);
    HessianOptions hopts;
    hopts.kind = cfg.hessian_kind;
    hopts.rank = cfg.hessian_rank;
    hopts.prior_precision = ctx.loss.prior_precision;
    hopts.seed = derive_seed(seed, kLanczosStream);
    ctx.hessian = fit_hessian(data_field, ctx.theta, hopts);
  }

  ctx.anchor = metric_point(*ctx.joint, ctx.theta);
  return ctx;
}

namespace {

std::string cell_file_tag(const std::string& sampler, std::uint64_t seed) {
  return sampler + "_seed" + std::to_string(seed);
}

void add_classification_metrics(CellResult& cell,
                                const PredictiveEnsemble& primary,
                                const Dataset& primary_set,
                                const PredictiveEnsemble* ood) {
  CalibrationReport rep =
      calibration_report(primary.mean_probs, primary_set.y);
  cell.metrics["accuracy"] = rep.accuracy;
  cell.metrics["nll"] = rep.nll;
  cell.metrics["brier"] = rep.brier;
  cell.metrics["ece"] = rep.ece;
  cell.metrics["mce"] = rep.mce;
  if (ood != nullptr) {
    Vector id_h = predictive_entropy(primary.mean_probs);
    Vector ood_h = predictive_entropy(ood->mean_probs);
    cell.id_scores.assign(id_h.data(), id_h.data() + id_h.size());
    cell.ood_scores.assign(ood_h.data(), ood_h.data() + ood_h.size());
    cell.metrics["auroc"] = auroc_ood(cell.id_scores, cell.ood_scores);
  }
}

void add_regression_metrics(CellResult& cell, const PreparedSeed& ctx,
                            const PredictiveEnsemble& train_ens,
                            const PredictiveEnsemble* test_ens,
                            const PredictiveEnsemble* ood_ens) {
  const double noise = ctx.loss.noise_var;
  RegressionReport train_rep =
      regression_report(train_ens, ctx.split.train.y, noise);
  cell.metrics["train_rmse"] = train_rep.rmse;
  cell.metrics["train_nll"] = train_rep.nll;
  cell.metrics["train_mean_std"] = train_rep.mean_std;
  if (test_ens != nullptr) {
    RegressionReport rep =
        regression_report(*test_ens, ctx.split.test.y, noise);
    cell.metrics["rmse"] = rep.rmse;
    cell.metrics["nll"] = rep.nll;
    cell.metrics["mean_std"] = rep.mean_std;
  }
  if (ood_ens != nullptr) {
    cell.metrics["ood_mean_std"] = ood_ens->std_dev.mean();
    if (train_rep.mean_std > 0.0) {
      cell.metrics["ood_std_ratio"] =
          cell.metrics["ood_mean_std"] / train_rep.mean_std;
    }
    cell.id_scores.assign(train_ens.std_dev.data(),
                          train_ens.std_dev.data() + train_ens.std_dev.size());
    cell.ood_scores.assign(ood_ens->std_dev.data(),
                           ood_ens->std_dev.data() + ood_ens->std_dev.size());
    cell.metrics["auroc"] = auroc_ood(cell.id_scores, cell.ood_scores);
  }
}

}  // namespace

CellResult evaluate_samples(const PreparedSeed& ctx,
                            const std::string& sampler_kind,
                            const std::vector<Vector>& thetas) {
  if (thetas.empty()) {
    throw EmptyInput("evaluate_samples needs at least one parameter sample");
  }
  CellResult cell;
  cell.sampler = sampler_kind;
  cell.metrics["anchor_joint_loss"] = ctx.anchor.loss;
  const bool linearized = sampler_kind == "linla";

  const auto predict = [&](const Matrix& X) {
    if (!linearized) {
      return ensemble_predict(ctx.model, ctx.loss.kind, thetas, X);
    }
    std::vector<Matrix> outputs;
    outputs.reserve(thetas.size());
    for (const Vector& th : thetas) {
      outputs.push_back(predict_linearized(ctx.model, ctx.theta, X, th));
    }
    return ensemble_from_outputs(outputs, ctx.loss.kind);
  };

  if (ctx.loss.kind == Likelihood::Categorical) {
    const bool has_test = ctx.split.test.size() > 0;
    const Dataset& primary_set = has_test ? ctx.split.test : ctx.split.train;
    PredictiveEnsemble primary = predict(primary_set.X);
    std::optional<PredictiveEnsemble> ood;
    if (ctx.split.ood.size() > 0) {
      ood = predict(ctx.split.ood.X);
    }
    add_classification_metrics(cell, primary, primary_set,
                               ood ? &*ood : nullptr);
  } else {
    PredictiveEnsemble train_ens = predict(ctx.split.train.X);
    std::optional<PredictiveEnsemble> test_ens;
    std::optional<PredictiveEnsemble> ood_ens;
    if (ctx.split.test.size() > 0) {
      test_ens = predict(ctx.split.test.X);
    }
    if (ctx.split.ood.size() > 0) {
      ood_ens = predict(ctx.split.ood.X);
    }
    add_regression_metrics(cell, ctx, train_ens,
                           test_ens ? &*test_ens : nullptr,
                           ood_ens ? &*ood_ens : nullptr);
  }
  return cell;
}

namespace {

void save_sample_set(const ExperimentConfig& cfg, const CellResult& cell,
                     const std::vector<Vector>& thetas) {
  if (cfg.output_dir.empty()) return;
  json j;
  j["sampler"] = cell.sampler;
  j["seed"] = cell.seed;
  j["samples"] = json::array();
  for (std::size_t s = 0; s < thetas.size(); ++s) {
    json e;
    e["seed_index"] = s;
    e["theta"] = std::vector<double>(
        thetas[s].data(), thetas[s].data() + thetas[s].size());
    e["final_loss"] = cell.samples[s].final_loss;
    e["terminated_by"] = cell.samples[s].terminated_by;
    e["wall_time"] = cell.samples[s].wall_time;
    j["samples"].push_back(std::move(e));
  }
  const std::string path = cfg.output_dir + "/samples_" +
                           cell_file_tag(cell.sampler, cell.seed) + ".json";
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path);
  }
  out << j.dump(2) << '\n';
}

void run_cell(const ExperimentConfig& cfg, const PreparedSeed& ctx,
              const SamplerSpec& spec, CellResult& cell) {
  const int s_count = spec.kind == "map" ? 1 : spec.num_samples;

  VelocityDistribution dist;
  dist.approx = ctx.hessian;
  dist.base_seed = derive_seed(cell.seed, kVelocityStream);

  std::vector<Vector> thetas(static_cast<std::size_t>(s_count));
  cell.samples.resize(static_cast<std::size_t>(s_count));

  if (spec.kind == "map") {
    thetas[0] = ctx.theta;
    cell.samples[0].final_loss = ctx.anchor.loss;
  } else if (spec.kind == "la" || spec.kind == "linla") {
    for (int s = 0; s < s_count; ++s) {
      thetas[static_cast<std::size_t>(s)] =
          sample_la(ctx.theta, sample_velocity(dist, s));
      cell.samples[static_cast<std::size_t>(s)].final_loss =
          ctx.joint->value(thetas[static_cast<std::size_t>(s)]);
    }
  } else {
    long converged = 0;
    double steps_total = 0.0;
    std::vector<SampleRunResult> runs(static_cast<std::size_t>(s_count));
    parallel_for(static_cast<std::size_t>(s_count), cfg.workers,
                 [&](std::size_t s) {
                   Vector v = precondition_velocity(
                       ctx.anchor,
                       sample_velocity(dist, static_cast<int>(s)));
                   SolverConfig sol = cfg.solver;
                   sol.store_states = false;
                   sol.dense_stride = 0.0;
                   const bool exporting = cfg.export_trajectories &&
                                          !cfg.output_dir.empty() && s == 0;
                   if (exporting) {
                     sol.store_states = ctx.theta.size() <= 64;
                     sol.dense_stride = spec.t1 / 256.0;
                   }
                   SampleRunResult run =
                       spec.kind == "rla"
                           ? sample_rla(*ctx.joint, ctx.theta, v, sol, spec.t1)
                           : sample_dims(*ctx.joint, ctx.theta, v, spec.eta0,
                                         spec.t1, sol, cfg.stop);
                   if (exporting) {
                     export_trajectory(
                         run.trajectory,
                         cfg.output_dir + "/traj_" +
                             cell_file_tag(spec.kind, cell.seed) + ".csv");
                   }
                   run.trajectory = Trajectory{};
                   runs[s] = std::move(run);
                 });
    for (int s = 0; s < s_count; ++s) {
      SampleRunResult& run = runs[static_cast<std::size_t>(s)];
      thetas[static_cast<std::size_t>(s)] = std::move(run.theta);
      auto& diag = cell.samples[static_cast<std::size_t>(s)];
      diag.final_loss = run.final_loss;
      diag.terminated_by = to_string(run.terminated_by);
      diag.steps = run.steps;
      diag.wall_time = run.wall_time;
      converged += run.converged ? 1 : 0;
      steps_total += static_cast<double>(run.steps);
    }
    cell.metrics["converged_fraction"] =
        static_cast<double>(converged) / static_cast<double>(s_count);
    cell.metrics["mean_steps"] = steps_total / static_cast<double>(s_count);
  }

  CellResult ev = evaluate_samples(ctx, spec.kind, thetas);
  for (const auto& [k, v] : ev.metrics) {
    cell.metrics[k] = v;
  }
  cell.id_scores = std::move(ev.id_scores);
  cell.ood_scores = std::move(ev.ood_scores);

  save_sample_set(cfg, cell, thetas);
}

}  // namespace

json results_to_json(const ResultsRecord& record, bool include_wall_time) {
  json j;
  j["config_hash"] = record.config_hash;
  j["cells"] = json::array();
  for (const CellResult& cell : record.cells) {
    json c;
    c["sampler"] = cell.sampler;
    c["seed"] = cell.seed;
    c["ok"] = cell.ok;
    c["error"] = cell.error;
    c["metrics"] = json::object();
    for (const auto& [k, v] : cell.metrics) {
      c["metrics"][k] = v;
    }
    c["samples"] = json::array();
    for (const SampleDiagnostics& d : cell.samples) {
      json e;
      e["final_loss"] = d.final_loss;
      e["terminated_by"] = d.terminated_by;
      e["steps"] = d.steps;
      if (include_wall_time) {
        e["wall_time"] = d.wall_time;
      }
      c["samples"].push_back(std::move(e));
    }
    c["id_scores"] = cell.id_scores;
    c["ood_scores"] = cell.ood_scores;
    j["cells"].push_back(std::move(c));
  }
  return j;
}

ResultsRecord run_experiment(const ExperimentConfig& cfg) {
  ResultsRecord record;
  record.config_hash = config_hash(cfg);
  if (!cfg.output_dir.empty()) {
    fs::create_directories(cfg.output_dir);
  }

  DatasetSchema schema;
  schema.task = cfg.task;
  schema.ood = cfg.ood;
  const TaggedDataset raw = load_dataset(cfg.dataset_path, schema);

  for (std::uint64_t seed : cfg.seeds) {
    PreparedSeed ctx;
    std::string seed_error;
    try {
      ctx = prepare_seed(cfg, raw, seed, true, true);
      if (!cfg.output_dir.empty()) {
        save_checkpoint(
            cfg.output_dir + "/theta_seed" + std::to_string(seed) + ".bin",
            ctx.theta);
      }
    } catch (const std::exception& e) {
      seed_error = e.what();
    }
    for (const SamplerSpec& spec : cfg.samplers) {
      CellResult cell;
      cell.sampler = spec.kind;
      cell.seed = seed;
      if (!seed_error.empty()) {
        cell.ok = false;
        cell.error = "seed preparation failed: " + seed_error;
        record.cells.push_back(std::move(cell));
        continue;
      }
      try {
        run_cell(cfg, ctx, spec, cell);
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      record.cells.push_back(std::move(cell));
    }
  }

  if (!cfg.output_dir.empty()) {
    const std::string path = cfg.output_dir + "/results.json";
    std::ofstream out(path, std::ios::binary);
    if (!out) {
      throw Error("cannot write " + path);
    }
    out << results_to_json(record, true).dump(2) << '\n';
  }
  return record;
}

}  // namespace dims
