// Copyright 2026 The Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace moespec {

using Vec = std::vector<double>;
using ExpertId = std::size_t;
using TokenId = std::uint32_t;

/// Raised when a caller violates a documented precondition.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an input is well-formed but numerically degenerate
/// (e.g. normalizing by a zero sum).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Dense row-major matrix.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vec values;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<const double> row(std::size_t r) const {
    return {values.data() + r * cols, cols};
  }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }

  bool operator==(const Mat&) const = default;
};

// y = A x. Accumulates each row left to right so results are reproducible.
Vec matvec(const Mat& a, std::span<const double> x);
// Row-by-row dot() with no SIMD dispatch; matvec() must match it bit for bit.
Vec matvec_reference(const Mat& a, std::span<const double> x);
/// sum_i (a_i - b_i)^2 in four interleaved partial sums.
double squared_distance(std::span<const double> a, std::span<const double> b);
double squared_distance_reference(std::span<const double> a, std::span<const double> b);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);

// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

// x / sqrt(mean(x^2) + eps); scale-only RMS normalization.
Vec rms_norm(std::span<const double> x, double eps = 1e-6);

inline double silu(double x);

/// Numerically stable softmax (max-subtracted). Throws UsageError on empty input.
Vec softmax(std::span<const double> logits);

/// Indices of the k largest scores, ordered by descending score; equal scores
/// resolve to the lower index first.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

/// Index of the maximum; lowest index wins ties.
std::size_t argmax(std::span<const double> scores);

/// Counter-based generator: output n of stream s under seed k is
/// mix(mix(k ^ mix(s)) + n * golden). Every (seed, stream, counter) triple maps
/// to one fixed 64-bit value, so substreams can be consumed in any order or on
/// any thread without changing results.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller; consumes two counters per call.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  /// Independent generator for sub-task `index`; does not advance this one.
  Rng substream(std::uint64_t index) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

// Gaussian matrix with entries ~ N(0, scale^2).
Mat random_normal(std::size_t rows, std::size_t cols, double scale, Rng& rng);

}  // namespace moespec

inline double moespec::silu(double x) { return x / (1.0 + std::exp(-x)); }
