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

#include "moespec/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moespec {

namespace {

double squared_distance_reference_raw(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const double d0 = a[i] - b[i], d1 = a[i + 1] - b[i + 1];
    const double d2 = a[i + 2] - b[i + 2], d3 = a[i + 3] - b[i + 3];
    s0 += d0 * d0;
    s1 += d1 * d1;
    s2 += d2 * d2;
    s3 += d3 * d3;
  }
  for (; i < n; ++i) s0 += (a[i] - b[i]) * (a[i] - b[i]);
  return (s0 + s1) + (s2 + s3);
}

void matvec_portable(const double* a, std::size_t rows, std::size_t cols, const double* x,
                     double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    y[r] = dot(std::span<const double>(a + r * cols, cols), std::span<const double>(x, cols));
  }
}

#if defined(__GNUC__) && defined(__x86_64__)
// Lane j of each accumulator holds the partial sum over indices = j (mod 4),
// exactly as in dot(), so both paths agree bit for bit.
using v4d = double __attribute__((vector_size(32)));
using v4d_unaligned = double __attribute__((vector_size(32), aligned(8)));

__attribute__((target("avx"))) void matvec_avx(const double* a, std::size_t rows,
                                               std::size_t cols, const double* x, double* y) {
  std::size_t r = 0;
  for (; r + 2 <= rows; r += 2) {
    const double* a0 = a + r * cols;
    const double* a1 = a0 + cols;
    v4d p = {0.0, 0.0, 0.0, 0.0};
    v4d q = {0.0, 0.0, 0.0, 0.0};
    std::size_t i = 0;
    for (; i + 4 <= cols; i += 4) {
      const v4d xv = *reinterpret_cast<const v4d_unaligned*>(x + i);
      p += *reinterpret_cast<const v4d_unaligned*>(a0 + i) * xv;
      q += *reinterpret_cast<const v4d_unaligned*>(a1 + i) * xv;
    }
    double p0 = p[0], q0 = q[0];
    for (; i < cols; ++i) {
      p0 += a0[i] * x[i];
      q0 += a1[i] * x[i];
    }
    y[r] = (p0 + p[1]) + (p[2] + p[3]);
    y[r + 1] = (q0 + q[1]) + (q[2] + q[3]);
  }
  if (r < rows) matvec_portable(a + r * cols, rows - r, cols, x, y + r);
}

__attribute__((target("avx"))) double squared_distance_avx(const double* a, const double* b,
                                                            std::size_t n) {
  v4d acc = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const v4d d = *reinterpret_cast<const v4d_unaligned*>(a + i) -
                  *reinterpret_cast<const v4d_unaligned*>(b + i);
    acc += d * d;
  }
  double s0 = acc[0];
  for (; i < n; ++i) s0 += (a[i] - b[i]) * (a[i] - b[i]);
  return (s0 + acc[1]) + (acc[2] + acc[3]);
}

using MatvecFn = void (*)(const double*, std::size_t, std::size_t, const double*, double*);
using DistanceFn = double (*)(const double*, const double*, std::size_t);
const bool kHasAvx = __builtin_cpu_supports("avx");
const MatvecFn kMatvec = kHasAvx ? matvec_avx : matvec_portable;
const DistanceFn kSquaredDistance = kHasAvx ? squared_distance_avx : squared_distance_reference_raw;
#else
constexpr auto kMatvec = matvec_portable;
constexpr auto kSquaredDistance = squared_distance_reference_raw;
#endif

}  // namespace

Vec matvec(const Mat& a, std::span<const double> x) {
  if (x.size() != a.cols) {
    throw UsageError("matvec: vector length " + std::to_string(x.size()) +
                     " does not match matrix columns " + std::to_string(a.cols));
  }
  Vec y(a.rows, 0.0);
  kMatvec(a.values.data(), a.rows, a.cols, x.data(), y.data());
  return y;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw UsageError("squared_distance: length mismatch");
  return kSquaredDistance(a.data(), b.data(), a.size());
}

double squared_distance_reference(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw UsageError("squared_distance: length mismatch");
  return squared_distance_reference_raw(a.data(), b.data(), a.size());
}

Vec matvec_reference(const Mat& a, std::span<const double> x) {
  if (x.size() != a.cols) throw UsageError("matvec: dimension mismatch");
  Vec y(a.rows, 0.0);
  matvec_portable(a.values.data(), a.rows, a.cols, x.data(), y.data());
  return y;
}

// Four interleaved partial sums, combined pairwise.
double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  const double* x = a.data();
  const double* y = b.data();
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) s0 += x[i] * y[i];
  return (s0 + s1) + (s2 + s3);
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vec rms_norm(std::span<const double> x, double eps) {
  double ms = squared_norm(x) / static_cast<double>(x.size());
  double inv = 1.0 / std::sqrt(ms + eps);
  Vec out(x.begin(), x.end());
  for (double& v : out) v *= inv;
  return out;
}

Vec softmax(std::span<const double> logits) {
  if (logits.empty()) throw UsageError("softmax: empty input");
  double mx = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  if (k > scores.size()) {
    throw UsageError("top_k_indices: k=" + std::to_string(k) + " exceeds length " +
                     std::to_string(scores.size()));
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  return idx;
}

std::size_t argmax(std::span<const double> scores) {
  if (scores.empty()) throw UsageError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(mix64(seed ^ mix64(stream + kGolden))) {}

std::uint64_t Rng::next_u64() {
  std::uint64_t n = counter_++;
  return mix64(key_ + (n + 1) * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // u1 in (0, 1] keeps log finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw UsageError("uniform_index: n must be positive");
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

Rng Rng::substream(std::uint64_t index) const {
  return Rng(seed_, mix64(stream_ * kGolden + index + 1));
}

Mat random_normal(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  Mat m(rows, cols);
  for (double& v : m.values) v = scale * rng.normal();
  return m;
}

}  // namespace moespec
