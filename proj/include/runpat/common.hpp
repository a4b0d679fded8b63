#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace runpat {

// Error taxonomy shared across the library. Codes map onto CLI exit classes:
// usage errors exit 2, data errors 3, numerical errors 4.
enum class Err {
  // dataset / io
  MissingFile,
  SchemaMismatch,
  InvariantViolation,
  InconsistentSubjectMeta,
  EmptyResult,
  NotARotation,
  // gait
  NoEventsFound,
  DegenerateSignal,
  TooShort,
  NoPhases,
  InsufficientEvents,
  // features
  RateTooLow,
  UnknownFeature,
  // training
  SingleClassTraining,
  NumericalFailure,
  Divergence,
  ShapeMismatch,
  MissingBranchInput,
  GraphNotRecorded,
  // eval
  TooFewSubjects,
  UndefinedMetric,
  // explain
  TooManyFeaturesForExact,
  NoPositiveCases,
  LayerNotFound,
  // cli
  UsageError,
};

const char* err_name(Err e);

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg);
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] void fail(Err code, const std::string& msg);

std::uint64_t fnv1a(std::string_view s);
std::uint64_t splitmix64(std::uint64_t x);

// Child seeds are derived from (root, label) so that adding one consumer never
// shifts the random stream of another.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);
std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index);

// Deterministic random stream. All draws are implemented explicitly (no
// std::*_distribution) so sequences are identical across standard libraries.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t next_u64();
  // uniform in [0,1)
  double uniform01();
  double uniform(double lo, double hi);
  // unbiased integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n);
  // standard normal via Box-Muller; one value per call, spare cached
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  RngStream child(std::string_view label) const { return RngStream(derive_seed(state_, label)); }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Runs fn(i) for i in [0,n) on up to n_threads workers; fn must write results
// through disjoint indices so the outcome is thread-count independent.
void parallel_for(std::size_t n, int n_threads, const std::function<void(std::size_t)>& fn);

}  // namespace runpat
