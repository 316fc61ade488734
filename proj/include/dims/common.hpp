#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace dims {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Error types
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct DimensionMismatch : Error {
  using Error::Error;
};

// Carries the offending point so callers can log where evaluation blew up.
struct NonFiniteEvaluation : Error {
  explicit NonFiniteEvaluation(const std::string& what) : Error(what) {}
  NonFiniteEvaluation(const std::string& what, Vector where)
      : Error(what), point(std::move(where)) {}
  Vector point;
};

struct BudgetExceeded : Error {
  using Error::Error;
};

struct TrainingDiverged : Error {
  TrainingDiverged(const std::string& what, int epoch_index)
      : Error(what + " at epoch " + std::to_string(epoch_index)),
        epoch(epoch_index) {}
  int epoch = -1;
};

struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error(what) {}
  ParseError(const std::string& what, int line_number)
      : Error(what + " (line " + std::to_string(line_number) + ")"),
        line(line_number) {}
  int line = -1;
};

struct SchemaMismatch : Error {
  using Error::Error;
};

struct EmptyInput : Error {
  using Error::Error;
};

struct NotConverged : Error {
  using Error::Error;
};

struct StepUnderflow : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Argument guards
// ---------------------------------------------------------------------------

void require_finite(double x, const char* what);
void require_finite(const Vector& v, const char* what);
void require_dim(Index got, Index want, const char* what);

// ---------------------------------------------------------------------------
// Seeding and random draws
// ---------------------------------------------------------------------------

// SplitMix64 step; used to derive independent streams from one base seed.
std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);
std::mt19937_64 make_rng(std::uint64_t seed);
Vector standard_normal(std::mt19937_64& rng, Index n);

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

// Runs fn(0..n-1) on up to `workers` threads; workers <= 1 runs inline.
// The first exception thrown by any task is rethrown after all tasks finish.
void parallel_for(std::size_t n, int workers,
                  const std::function<void(std::size_t)>& fn);
int default_workers();

}  // namespace dims
