// Test-side reference implementations, written independently of the library
// (plain loops over plain vectors) so the two can disagree.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

/// Plain triple-loop matrix product, row-major flat inputs.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = acc;
    }
  }
  return c;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::vector<double> softmax(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

/// Single-head attention on explicit matrices: rows of q attend over rows
/// of k/v. Returns the (Lq x dv) output.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v) {
  const std::size_t lq = q.size(), lk = k.size(), dk = q[0].size(), dv = v[0].size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Mat out(lq, std::vector<double>(dv, 0.0));
  for (std::size_t i = 0; i < lq; ++i) {
    std::vector<double> scores(lk, 0.0);
    for (std::size_t j = 0; j < lk; ++j) {
      for (std::size_t d = 0; d < dk; ++d) scores[j] += q[i][d] * k[j][d];
      scores[j] *= scale;
    }
    const std::vector<double> a = softmax(scores);
    for (std::size_t j = 0; j < lk; ++j) {
      for (std::size_t d = 0; d < dv; ++d) out[i][d] += a[j] * v[j][d];
    }
  }
  return out;
}

/// h_t = relu(W_tr h_{t-1} + W_up e_t) over the rows of e; returns h_T.
/// Weight layout matches the library: w_tr is (S x S) as (in, out), w_up is
/// (E x S), both applied as row-vector times matrix.
inline std::vector<double> ssm(const Mat& e, const std::vector<double>& w_tr,
                               const std::vector<double>& w_up, std::size_t state) {
  const std::size_t embed = e[0].size();
  std::vector<double> h(state, 0.0);
  for (const std::vector<double>& e_t : e) {
    std::vector<double> next(state, 0.0);
    for (std::size_t j = 0; j < state; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < state; ++i) acc += h[i] * w_tr[i * state + j];
      for (std::size_t i = 0; i < embed; ++i) acc += e_t[i] * w_up[i * state + j];
      next[j] = acc > 0.0 ? acc : 0.0;
    }
    h = next;
  }
  return h;
}

struct MetricValues {
  double oa, aa, kappa;
};

/// Brute-force OA/AA/kappa straight from the definitions.
inline MetricValues metrics(const std::vector<std::uint64_t>& confusion, std::size_t k) {
  double total = 0, trace = 0;
  for (std::size_t i = 0; i < k; ++i) {
    trace += static_cast<double>(confusion[i * k + i]);
    for (std::size_t j = 0; j < k; ++j) total += static_cast<double>(confusion[i * k + j]);
  }
  MetricValues m{};
  m.oa = trace / total;

  double recall_sum = 0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < k; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < k; ++j) row += static_cast<double>(confusion[i * k + j]);
    if (row > 0) {
      recall_sum += static_cast<double>(confusion[i * k + i]) / row;
      ++present;
    }
  }
  m.aa = present ? recall_sum / static_cast<double>(present) : 0.0;

  double pe = 0;
  for (std::size_t i = 0; i < k; ++i) {
    double row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += static_cast<double>(confusion[i * k + j]);
      col += static_cast<double>(confusion[j * k + i]);
    }
    pe += (row / total) * (col / total);
  }
  m.kappa = 1.0 - pe < 1e-15 ? 1.0 : (m.oa - pe) / (1.0 - pe);
  return m;
}

/// Mirror padding as a period-2n triangular wave, an independent derivation
/// of the reflect-until-inside rule.
inline std::size_t mirror(long long i, std::size_t n) {
  const long long period = 2 * static_cast<long long>(n);
  long long r = i % period;
  if (r < 0) r += period;
  return static_cast<std::size_t>(r < static_cast<long long>(n) ? r : period - 1 - r);
}

}  // namespace oracle
