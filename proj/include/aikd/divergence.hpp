#pragma once

// Distances between finite discrete distributions: total variation, KL,
// Jensen-Shannon and Wasserstein-1, plus the parallel-lines construction
// where only the Wasserstein distance stays informative.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aikd::divergence {

using Point = std::vector<double>;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

class DiscreteDistribution {
 public:
  DiscreteDistribution(std::vector<Point> support, std::vector<double> mass)
      : support_(std::move(support)), mass_(std::move(mass)) {
    if (support_.empty()) throw std::invalid_argument("distribution has empty support");
    if (support_.size() != mass_.size())
      throw std::invalid_argument("support and mass lengths differ");
    const std::size_t dim = support_.front().size();
    if (dim == 0) throw std::invalid_argument("support points must have dimension >= 1");
    double total = 0.0;
    for (std::size_t i = 0; i < mass_.size(); ++i) {
      if (support_[i].size() != dim) throw std::invalid_argument("support points differ in dimension");
      if (!(mass_[i] >= 0.0) || !std::isfinite(mass_[i]))
        throw std::invalid_argument("mass must be finite and non-negative");
      total += mass_[i];
    }
    if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("masses must sum to 1");
    for (std::size_t i = 0; i < support_.size(); ++i)
      for (std::size_t j = i + 1; j < support_.size(); ++j)
        if (support_[i] == support_[j]) throw std::invalid_argument("support points must be distinct");
  }

  static DiscreteDistribution on_line(const std::vector<double>& xs, std::vector<double> mass) {
    std::vector<Point> pts;
    pts.reserve(xs.size());
    for (double x : xs) pts.push_back(Point{x});
    return DiscreteDistribution(std::move(pts), std::move(mass));
  }

  std::size_t size() const { return support_.size(); }
  std::size_t dimension() const { return support_.front().size(); }
  const std::vector<Point>& support() const { return support_; }
  const std::vector<double>& mass() const { return mass_; }

 private:
  std::vector<Point> support_;
  std::vector<double> mass_;
};

struct DistanceReport {
  double tv = 0.0;
  double kl = 0.0;  // may be kInfinity
  double js = 0.0;
  double wasserstein = 0.0;
};

namespace detail {

// Masses of p and q over the union of their supports, aligned index by index.
struct Aligned {
  std::vector<double> p;
  std::vector<double> q;
};

inline Aligned align(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  if (p.dimension() != q.dimension()) throw std::invalid_argument("distributions live in different spaces");
  std::vector<Point> merged = p.support();
  Aligned out;
  out.p = p.mass();
  out.q.assign(merged.size(), 0.0);
  for (std::size_t j = 0; j < q.size(); ++j) {
    auto it = std::find(merged.begin(), merged.end(), q.support()[j]);
    if (it == merged.end()) {
      merged.push_back(q.support()[j]);
      out.p.push_back(0.0);
      out.q.push_back(q.mass()[j]);
    } else {
      out.q[static_cast<std::size_t>(it - merged.begin())] = q.mass()[j];
    }
  }
  return out;
}

inline double kl_aligned(const std::vector<double>& p, const std::vector<double>& q) {
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return kInfinity;
    sum += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(sum, 0.0);
}

inline double euclidean(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

inline double total_variation(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  const auto a = detail::align(p, q);
  double l1 = 0.0;
  for (std::size_t i = 0; i < a.p.size(); ++i) l1 += std::abs(a.p[i] - a.q[i]);
  return std::min(0.5 * l1, 1.0);
}

inline double kl_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  const auto a = detail::align(p, q);
  return detail::kl_aligned(a.p, a.q);
}

/// Unhalved Jensen-Shannon: KL(p||m) + KL(q||m) with m the even mixture.
/// Twice the conventional value, so disjoint supports give 2 ln 2.
inline double js_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  const auto a = detail::align(p, q);
  std::vector<double> m(a.p.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (a.p[i] + a.q[i]);
  return detail::kl_aligned(a.p, m) + detail::kl_aligned(a.q, m);
}

/// Exact optimal-transport cost under the Euclidean ground metric, solved as a
/// min-cost flow (successive shortest paths). Works in any dimension.
inline double transport_cost(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  if (p.dimension() != q.dimension()) throw std::invalid_argument("distributions live in different spaces");
  const std::size_t n = p.size(), m = q.size();
  if (n > 64 || m > 64) throw std::invalid_argument("exact transport limited to 64 support points");

  // Nodes: 0..n-1 sources, n..n+m-1 sinks. flow[i][j] is the amount shipped i -> j.
  std::vector<std::vector<double>> cost(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) cost[i][j] = detail::euclidean(p.support()[i], q.support()[j]);
  std::vector<std::vector<double>> flow(n, std::vector<double>(m, 0.0));
  std::vector<double> supply = p.mass(), demand = q.mass();
  constexpr double kEps = 1e-15;

  const std::size_t nodes = n + m;
  for (std::size_t iter = 0; iter < 100000; ++iter) {
    double remaining = std::accumulate(supply.begin(), supply.end(), 0.0);
    bool has_supply = std::any_of(supply.begin(), supply.end(), [](double s) { return s > kEps; });
    bool has_demand = std::any_of(demand.begin(), demand.end(), [](double d) { return d > kEps; });
    if (remaining <= kEps || !has_supply || !has_demand) break;

    // Bellman-Ford from a virtual root connected to every source with supply.
    std::vector<double> dist(nodes, kInfinity);
    std::vector<long> parent(nodes, -1);
    for (std::size_t i = 0; i < n; ++i)
      if (supply[i] > kEps) dist[i] = 0.0;
    for (std::size_t round = 0; round < nodes; ++round) {
      bool changed = false;
      for (std::size_t i = 0; i < n; ++i) {
        if (dist[i] == kInfinity) continue;
        for (std::size_t j = 0; j < m; ++j) {
          const double d = dist[i] + cost[i][j];
          if (d < dist[n + j] - 1e-15) {
            dist[n + j] = d;
            parent[n + j] = static_cast<long>(i);
            changed = true;
          }
        }
      }
      for (std::size_t j = 0; j < m; ++j) {
        if (dist[n + j] == kInfinity) continue;
        for (std::size_t i = 0; i < n; ++i) {
          if (flow[i][j] <= kEps) continue;
          const double d = dist[n + j] - cost[i][j];
          if (d < dist[i] - 1e-15) {
            dist[i] = d;
            parent[i] = static_cast<long>(n + j);
            changed = true;
          }
        }
      }
      if (!changed) break;
    }

    std::size_t best = nodes;
    for (std::size_t j = 0; j < m; ++j)
      if (demand[j] > kEps && dist[n + j] < kInfinity && (best == nodes || dist[n + j] < dist[best]))
        best = n + j;
    if (best == nodes) break;

    // Bottleneck along the path.
    double amount = demand[best - n];
    std::size_t v = best;
    while (parent[v] != -1) {
      const auto u = static_cast<std::size_t>(parent[v]);
      if (u >= n) amount = std::min(amount, flow[v][u - n]);  // reverse edge sink u -> source v
      v = u;
    }
    amount = std::min(amount, supply[v]);
    if (amount <= kEps) break;

    v = best;
    while (parent[v] != -1) {
      const auto u = static_cast<std::size_t>(parent[v]);
      if (u < n)
        flow[u][v - n] += amount;
      else
        flow[v][u - n] -= amount;
      v = u;
    }
    supply[v] -= amount;
    demand[best - n] -= amount;
  }

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) total += flow[i][j] * cost[i][j];
  return total;
}

/// Wasserstein-1. One-dimensional supports integrate |F_p - F_q| exactly;
/// higher dimensions fall back to exact transport.
inline double wasserstein(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  if (p.dimension() != q.dimension()) throw std::invalid_argument("distributions live in different spaces");
  if (p.dimension() > 1) return transport_cost(p, q);

  std::vector<std::pair<double, double>> events;  // (x, mass_p - mass_q)
  events.reserve(p.size() + q.size());
  for (std::size_t i = 0; i < p.size(); ++i) events.emplace_back(p.support()[i][0], p.mass()[i]);
  for (std::size_t j = 0; j < q.size(); ++j) events.emplace_back(q.support()[j][0], -q.mass()[j]);
  std::sort(events.begin(), events.end());
  double cdf_diff = 0.0, total = 0.0;
  for (std::size_t k = 0; k + 1 < events.size(); ++k) {
    cdf_diff += events[k].second;
    total += std::abs(cdf_diff) * (events[k + 1].first - events[k].first);
  }
  return total;
}

/// P_0 uniform on {(0, z)}, P_theta uniform on {(theta, z)}, z on a K-point grid in [0, 1].
inline DistanceReport parallel_lines_case(double theta, std::size_t grid = 16) {
  if (grid < 16 || grid > 64) throw std::invalid_argument("parallel-lines grid must have 16..64 points");
  if (!std::isfinite(theta)) throw std::invalid_argument("theta must be finite");
  std::vector<Point> line0, line_theta;
  for (std::size_t k = 0; k < grid; ++k) {
    const double z = static_cast<double>(k) / static_cast<double>(grid - 1);
    line0.push_back({0.0, z});
    line_theta.push_back({theta, z});
  }
  const std::vector<double> mass(grid, 1.0 / static_cast<double>(grid));
  // Uniform masses on K points do not always sum to 1 within 1e-12 after
  // rounding, so the last mass absorbs the residue.
  std::vector<double> fixed = mass;
  fixed.back() = 1.0 - std::accumulate(mass.begin(), mass.end() - 1, 0.0);
  const DiscreteDistribution p0(std::move(line0), fixed);
  const DiscreteDistribution pt(std::move(line_theta), fixed);

  DistanceReport r;
  r.tv = total_variation(p0, pt);
  r.kl = kl_divergence(p0, pt);
  r.js = js_divergence(p0, pt);
  r.wasserstein = transport_cost(p0, pt);
  return r;
}

}  // namespace aikd::divergence
