// Generates the benchmark CSV files with fixed seeds: a 1-d regression set
// with a held-out input gap, a two-cluster 2-d classification set with a
// train/test split column, and three synthetic multivariate classification
// sets for the sampler comparison grid.

#include "dims/common.hpp"
#include "dims/harness.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace {

using dims::format_double;

struct Row {
  std::vector<double> x;
  double y = 0.0;
  std::string split;  // empty when the file has no split column
};

void write_csv(const std::string& path, const std::vector<std::string>& cols,
               const std::vector<Row>& rows, bool with_split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw dims::Error("cannot write " + path);
  }
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (c > 0) out << ',';
    out << cols[c];
  }
  out << ",target";
  if (with_split) out << ",split";
  out << '\n';
  for (const Row& r : rows) {
    for (std::size_t c = 0; c < r.x.size(); ++c) {
      if (c > 0) out << ',';
      out << format_double(r.x[c]);
    }
    out << ',' << format_double(r.y);
    if (with_split) out << ',' << r.split;
    out << '\n';
  }
  std::cout << path << ": " << rows.size() << " rows\n";
}

std::vector<std::string> feature_names(int d) {
  std::vector<std::string> names;
  for (int i = 0; i < d; ++i) {
    names.push_back("x" + std::to_string(i));
  }
  return names;
}

// 1-d regression: y = 0.7 sin(2x) + 0.3x + noise. Inputs avoid a margin
// around [1.5, 3] except for exactly 52 rows placed inside it, so an
// interval rule on that band tags a fixed out-of-distribution set.
void gen_gap_regression(const std::string& path, std::uint64_t seed) {
  auto rng = dims::make_rng(seed);
  std::uniform_real_distribution<double> wide(-3.0, 6.0);
  std::uniform_real_distribution<double> gap(1.55, 2.95);
  std::normal_distribution<double> noise(0.0, 0.2);

  std::vector<Row> rows;
  while (rows.size() < 148) {
    const double x = wide(rng);
    if (x >= 1.45 && x <= 3.05) continue;
    rows.push_back({{x}, 0.0, ""});
  }
  for (int i = 0; i < 52; ++i) {
    rows.push_back({{gap(rng)}, 0.0, ""});
  }
  for (Row& r : rows) {
    const double x = r.x[0];
    r.y = 0.7 * std::sin(2.0 * x) + 0.3 * x + noise(rng);
  }
  std::sort(rows.begin(), rows.end(),
            [](const Row& a, const Row& b) { return a.x[0] < b.x[0]; });
  write_csv(path, {"x"}, rows, false);
}

// Two interleaved crescent clusters with Gaussian jitter; 265 train rows and
// a large test block marked by a split column.
void gen_crescents(const std::string& path, std::uint64_t seed,
                   double sigma) {
  auto rng = dims::make_rng(seed);
  std::uniform_real_distribution<double> angle(0.0, M_PI);
  std::normal_distribution<double> jitter(0.0, sigma);
  std::bernoulli_distribution coin(0.5);

  const int n_train = 265;
  const int n_test = 2000;
  std::vector<Row> rows;
  for (int i = 0; i < n_train + n_test; ++i) {
    const int c = coin(rng) ? 1 : 0;
    const double t = angle(rng);
    double x0, x1;
    if (c == 0) {
      x0 = std::cos(t);
      x1 = std::sin(t);
    } else {
      x0 = 1.0 - std::cos(t);
      x1 = 0.5 - std::sin(t);
    }
    x0 += jitter(rng);
    x1 += jitter(rng);
    rows.push_back(
        {{x0, x1}, static_cast<double>(c), i < n_train ? "train" : "test"});
  }
  write_csv(path, feature_names(2), rows, true);
}

// Three-class waveform mixtures: each class blends two of three triangular
// bump templates with a uniform weight, plus unit Gaussian noise.
void gen_waveform(const std::string& path, std::uint64_t seed, int n) {
  auto rng = dims::make_rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const auto bump = [](int i, int center) {
    return std::max(6.0 - std::abs(i - center), 0.0);
  };
  std::vector<Row> rows;
  for (int i = 0; i < n; ++i) {
    const int c = i % 3;
    const double u = unif(rng);
    Row r;
    r.y = static_cast<double>(c);
    for (int j = 1; j <= 21; ++j) {
      double a, b;
      if (c == 0) {
        a = bump(j, 11);
        b = bump(j, 15);
      } else if (c == 1) {
        a = bump(j, 11);
        b = bump(j, 7);
      } else {
        a = bump(j, 15);
        b = bump(j, 7);
      }
      r.x.push_back(u * a + (1.0 - u) * b + noise(rng));
    }
    rows.push_back(std::move(r));
  }
  std::shuffle(rows.begin(), rows.end(), rng);
  write_csv(path, feature_names(21), rows, false);
}

// Binary: class 0 is a wide isotropic Gaussian, class 1 a unit Gaussian
// shifted along the all-ones direction.
void gen_ringnorm(const std::string& path, std::uint64_t seed, int n) {
  auto rng = dims::make_rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int d = 20;
  const double shift = 2.0 / std::sqrt(static_cast<double>(d));

  std::vector<Row> rows;
  for (int i = 0; i < n; ++i) {
    const int c = i % 2;
    Row r;
    r.y = static_cast<double>(c);
    for (int j = 0; j < d; ++j) {
      r.x.push_back(c == 0 ? 2.0 * noise(rng) : noise(rng) + shift);
    }
    rows.push_back(std::move(r));
  }
  std::shuffle(rows.begin(), rows.end(), rng);
  write_csv(path, feature_names(d), rows, false);
}

// Binary: two unit Gaussians at +/- shift along the all-ones direction.
void gen_twonorm(const std::string& path, std::uint64_t seed, int n) {
  auto rng = dims::make_rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int d = 20;
  const double shift = 2.0 / std::sqrt(static_cast<double>(d));

  std::vector<Row> rows;
  for (int i = 0; i < n; ++i) {
    const int c = i % 2;
    Row r;
    r.y = static_cast<double>(c);
    const double m = c == 0 ? shift : -shift;
    for (int j = 0; j < d; ++j) {
      r.x.push_back(noise(rng) + m);
    }
    rows.push_back(std::move(r));
  }
  std::shuffle(rows.begin(), rows.end(), rng);
  write_csv(path, feature_names(d), rows, false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate the benchmark CSV files"};
  std::string out_dir = "data";
  std::string only;
  double crescent_noise = 0.33;
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--only", only,
                 "generate a single set: snelson, banana, waveform, "
                 "ringnorm, twonorm")
      ->check(CLI::IsMember(
          {"snelson", "banana", "waveform", "ringnorm", "twonorm"}));
  app.add_option("--banana-noise", crescent_noise,
                 "jitter std for the crescent set");
  CLI11_PARSE(app, argc, argv);

  try {
    std::filesystem::create_directories(out_dir);
    const auto want = [&](const char* name) {
      return only.empty() || only == name;
    };
    if (want("snelson")) {
      gen_gap_regression(out_dir + "/snelson.csv", 101);
    }
    if (want("banana")) {
      gen_crescents(out_dir + "/banana.csv", 202, crescent_noise);
    }
    if (want("waveform")) {
      gen_waveform(out_dir + "/waveform.csv", 303, 300);
    }
    if (want("ringnorm")) {
      gen_ringnorm(out_dir + "/ringnorm.csv", 404, 300);
    }
    if (want("twonorm")) {
      gen_twonorm(out_dir + "/twonorm.csv", 505, 300);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
