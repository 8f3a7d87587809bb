#pragma once

// Test-only dense simplex (two-phase, Bland's rule) for the transportation LP
// min sum c_ij f_ij  s.t.  sum_j f_ij = a_i, sum_i f_ij = b_j, f >= 0.
// Independent of the library's min-cost-flow and sorted-CDF routes.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace aikd::testing {

inline double simplex_min(std::vector<std::vector<double>> A, std::vector<double> b, const std::vector<double>& c) {
  const std::size_t m = A.size(), n = c.size();
  for (std::size_t i = 0; i < m; ++i)
    if (b[i] < 0) {
      for (double& v : A[i]) v = -v;
      b[i] = -b[i];
    }
  // Tableau columns: n originals, m artificials, rhs.
  const std::size_t cols = n + m + 1;
  std::vector<std::vector<double>> T(m + 1, std::vector<double>(cols, 0.0));
  std::vector<std::size_t> basis(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) T[i][j] = A[i][j];
    T[i][n + i] = 1.0;
    T[i][cols - 1] = b[i];
    basis[i] = n + i;
  }
  constexpr double eps = 1e-12;

  auto pivot = [&](std::size_t r, std::size_t col) {
    const double p = T[r][col];
    for (double& v : T[r]) v /= p;
    for (std::size_t i = 0; i <= m; ++i) {
      if (i == r) continue;
      const double f = T[i][col];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < cols; ++j) T[i][j] -= f * T[r][j];
    }
    basis[r] = col;
  };

  auto run = [&](const std::vector<double>& cost, std::size_t allowed) {
    // Objective row holds reduced costs: cost_j - c_B B^-1 A_j.
    std::vector<double>& z = T[m];
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t j = 0; j < cols - 1; ++j) z[j] = cost[j];
    for (std::size_t i = 0; i < m; ++i) {
      const double cb = cost[basis[i]];
      if (cb == 0.0) continue;
      for (std::size_t j = 0; j < cols; ++j) z[j] -= cb * T[i][j];
    }
    for (int guard = 0; guard < 100000; ++guard) {
      std::size_t enter = cols;
      for (std::size_t j = 0; j < allowed; ++j)
        if (z[j] < -eps) {
          enter = j;
          break;
        }
      if (enter == cols) return;
      std::size_t leave = m;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i)
        if (T[i][enter] > eps) {
          const double ratio = T[i][cols - 1] / T[i][enter];
          if (ratio < best - eps || (std::abs(ratio - best) <= eps && leave < m && basis[i] < basis[leave])) {
            best = ratio;
            leave = i;
          }
        }
      if (leave == m) throw std::runtime_error("LP unbounded");
      pivot(leave, enter);
    }
    throw std::runtime_error("simplex iteration limit");
  };

  std::vector<double> phase1(cols - 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) phase1[n + i] = 1.0;
  run(phase1, n + m);
  // Drive remaining artificials out of the basis where possible.
  for (std::size_t i = 0; i < m; ++i)
    if (basis[i] >= n)
      for (std::size_t j = 0; j < n; ++j)
        if (std::abs(T[i][j]) > 1e-9) {
          pivot(i, j);
          break;
        }
  std::vector<double> phase2(cols - 1, 0.0);
  for (std::size_t j = 0; j < n; ++j) phase2[j] = c[j];
  run(phase2, n);
  double value = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    if (basis[i] < n) value += c[basis[i]] * T[i][cols - 1];
  return value;
}

/// Exact W1 between (xs, a) and (ys, b) for the given ground-cost function.
template <class Cost>
double transport_lp(std::size_t n, std::size_t m, const std::vector<double>& a, const std::vector<double>& b,
                    Cost cost) {
  std::vector<std::vector<double>> A;
  std::vector<double> rhs, c(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(n * m, 0.0);
    for (std::size_t j = 0; j < m; ++j) row[i * m + j] = 1.0;
    A.push_back(row);
    rhs.push_back(a[i]);
  }
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> row(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) row[i * m + j] = 1.0;
    A.push_back(row);
    rhs.push_back(b[j]);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) c[i * m + j] = cost(i, j);
  return simplex_min(A, rhs, c);
}

}  // namespace aikd::testing
