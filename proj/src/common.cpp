#include "runpat/common.hpp"

#include <cmath>
#include <thread>

namespace runpat {

const char* err_name(Err e) {
  switch (e) {
    case Err::MissingFile: return "MissingFile";
    case Err::SchemaMismatch: return "SchemaMismatch";
    case Err::InvariantViolation: return "InvariantViolation";
    case Err::InconsistentSubjectMeta: return "InconsistentSubjectMeta";
    case Err::EmptyResult: return "EmptyResult";
    case Err::NotARotation: return "NotARotation";
    case Err::NoEventsFound: return "NoEventsFound";
    case Err::DegenerateSignal: return "DegenerateSignal";
    case Err::TooShort: return "TooShort";
    case Err::NoPhases: return "NoPhases";
    case Err::InsufficientEvents: return "InsufficientEvents";
    case Err::RateTooLow: return "RateTooLow";
    case Err::UnknownFeature: return "UnknownFeature";
    case Err::SingleClassTraining: return "SingleClassTraining";
    case Err::NumericalFailure: return "NumericalFailure";
    case Err::Divergence: return "Divergence";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::MissingBranchInput: return "MissingBranchInput";
    case Err::GraphNotRecorded: return "GraphNotRecorded";
    case Err::TooFewSubjects: return "TooFewSubjects";
    case Err::UndefinedMetric: return "UndefinedMetric";
    case Err::TooManyFeaturesForExact: return "TooManyFeaturesForExact";
    case Err::NoPositiveCases: return "NoPositiveCases";
    case Err::LayerNotFound: return "LayerNotFound";
    case Err::UsageError: return "UsageError";
  }
  return "Unknown";
}

Error::Error(Err code, const std::string& msg)
    : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}

void fail(Err code, const std::string& msg) { throw Error(code, msg); }

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
  return splitmix64(root ^ fnv1a(label));
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index) {
  return splitmix64(derive_seed(root, label) + 0x632be59bd9b4e019ull * (index + 1));
}

std::uint64_t RngStream::next_u64() {
  state_ = splitmix64(state_ + 0x9e3779b97f4a7c15ull);
  return state_;
}

double RngStream::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

std::uint64_t RngStream::uniform_int(std::uint64_t n) {
  if (n == 0) return 0;
  // rejection sampling keeps the draw unbiased
  std::uint64_t limit = ~0ull - (~0ull % n);
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double RngStream::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1, u2;
  do {
    u1 = uniform01();
  } while (u1 <= 0.0);
  u2 = uniform01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

void parallel_for(std::size_t n, int n_threads, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  std::size_t workers = static_cast<std::size_t>(n_threads > 0 ? n_threads : 1);
  if (workers > n) workers = n;
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  // static block partition keeps indices disjoint and results order-free
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    std::size_t lo = w * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace runpat
