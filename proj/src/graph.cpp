#include "flowkrig/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <unordered_set>

namespace flowkrig {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

std::optional<std::size_t> SensorNetwork::index_of(const std::string& id) const {
  const auto it = std::find(sensor_ids.begin(), sensor_ids.end(), id);
  if (it == sensor_ids.end()) return std::nullopt;
  return static_cast<std::size_t>(it - sensor_ids.begin());
}

void SensorNetwork::validate() const {
  const std::size_t n = sensor_ids.size();
  if (positions_m.size() != n || directions.size() != n || lanes.size() != n) {
    throw GraphError("sensor attribute arrays differ in length");
  }
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < n; ++i) {
    if (!seen.insert(sensor_ids[i]).second) throw GraphError("duplicate sensor id '" + sensor_ids[i] + "'");
    if (lanes[i] < 1) throw GraphError("sensor '" + sensor_ids[i] + "' has lane count < 1");
  }
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const Edge& e = edges[k];
    if (e.from >= n || e.to >= n) throw GraphError("edge " + std::to_string(k) + " references a missing sensor");
    if (!(e.distance_m > 0.0) || !std::isfinite(e.distance_m)) {
      throw GraphError("edge " + std::to_string(k) + " has non-positive distance");
    }
    if (directions[e.from] != directions[e.to]) {
      throw GraphError("edge " + sensor_ids[e.from] + " -> " + sensor_ids[e.to] +
                       " joins different driving directions");
    }
  }
}

void SensorNetwork::derive_upstream_neighbors() {
  upstream_neighbor.assign(sensor_ids.size(), std::nullopt);
  std::vector<double> best(sensor_ids.size(), kInf);
  for (const Edge& e : edges) {
    if (e.from == e.to) continue;
    if (e.distance_m < best[e.to]) {
      best[e.to] = e.distance_m;
      upstream_neighbor[e.to] = e.from;
    }
  }
}

Matrix travel_distances(const SensorNetwork& net) {
  const std::size_t n = net.size();
  std::vector<std::vector<std::pair<std::size_t, double>>> out(n);
  for (const Edge& e : net.edges) out[e.from].emplace_back(e.to, e.distance_m);

  Matrix dist(n, n, kInf);
  using Item = std::pair<double, std::size_t>;
  for (std::size_t s = 0; s < n; ++s) {
    auto row = dist.row(s);
    row[s] = 0.0;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    pq.emplace(0.0, s);
    while (!pq.empty()) {
      const auto [d, u] = pq.top();
      pq.pop();
      if (d > row[u]) continue;
      for (const auto& [v, w] : out[u]) {
        if (d + w < row[v]) {
          row[v] = d + w;
          pq.emplace(row[v], v);
        }
      }
    }
  }
  return dist;
}

KernelParams default_kernel_params(const Matrix& dist) {
  std::vector<double> finite;
  for (std::size_t i = 0; i < dist.rows; ++i)
    for (std::size_t j = 0; j < dist.cols; ++j)
      if (i != j && std::isfinite(dist(i, j))) finite.push_back(dist(i, j));
  if (finite.empty()) throw GraphError("no finite pairwise distances to derive kernel parameters from");

  const double mean = std::accumulate(finite.begin(), finite.end(), 0.0) / static_cast<double>(finite.size());
  double var = 0.0;
  for (double d : finite) var += (d - mean) * (d - mean);
  var /= static_cast<double>(finite.size());

  std::sort(finite.begin(), finite.end());
  // Linear interpolation between closest ranks.
  const double pos = 0.8 * static_cast<double>(finite.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, finite.size() - 1);
  const double p80 = finite[lo] + (pos - static_cast<double>(lo)) * (finite[hi] - finite[lo]);

  KernelParams kp{std::sqrt(var), p80};
  // A single distinct distance has zero spread; fall back to its value.
  if (!(kp.delta > 0.0)) kp.delta = finite.back();
  return kp;
}

Matrix build_gaussian_adjacency(const Matrix& dist, double delta, double epsilon) {
  if (!(delta > 0.0) || !(epsilon > 0.0)) throw GraphError("kernel delta and epsilon must be positive");
  Matrix a(dist.rows, dist.cols);
  for (std::size_t i = 0; i < dist.data.size(); ++i) {
    const double d = dist.data[i];
    if (std::isfinite(d) && d <= epsilon) {
      const double r = d / delta;
      a.data[i] = std::exp(-r * r);
    }
  }
  return a;
}

Matrix build_gaussian_adjacency(const SensorNetwork& net, double delta, double epsilon) {
  return build_gaussian_adjacency(travel_distances(net), delta, epsilon);
}

Matrix filter_same_direction(const Matrix& a, std::span<const std::string> directions) {
  if (directions.size() != a.rows || a.rows != a.cols) {
    throw GraphError("filter_same_direction: direction labels do not match adjacency size");
  }
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      if (directions[i] != directions[j]) out(i, j) = 0.0;
  return out;
}

namespace {

Matrix row_normalize(const Matrix& a) {
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows; ++i) {
    auto row = out.row(i);
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    if (s == 0.0) continue;
    for (double& v : row) v /= s;
  }
  return out;
}

}  // namespace

std::pair<Matrix, Matrix> transition_matrices(const Matrix& a) {
  for (double v : a.data) {
    if (v < 0.0) throw GraphError("transition_matrices: negative weight");
  }
  return {row_normalize(a), row_normalize(transpose(a))};
}

Matrix strip_self_loops(const Matrix& m) {
  if (m.rows != m.cols) throw GraphError("strip_self_loops: matrix not square");
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows; ++i) out(i, i) = 0.0;
  return out;
}

Matrix graph_laplacian(const Matrix& a) {
  if (a.rows != a.cols) throw GraphError("graph_laplacian: matrix not square");
  Matrix l(a.rows, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) {
      s += a(i, j);
      l(i, j) = -a(i, j);
    }
    l(i, i) += s;
  }
  return l;
}

double dirichlet_energy(const Matrix& a, const Matrix& x) {
  if (a.rows != x.rows || a.cols != x.rows) throw GraphError("dirichlet_energy: size mismatch");
  double total = 0.0;
  for (std::size_t j = 0; j < a.rows; ++j)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double w = a(j, k);
      if (w == 0.0) continue;
      double d2 = 0.0;
      for (std::size_t t = 0; t < x.cols; ++t) {
        const double d = x(j, t) - x(k, t);
        d2 += d * d;
      }
      total += w * d2;
    }
  return total;
}

double laplacian_trace_form(const Matrix& l, const Matrix& x) {
  const Matrix lx = matmul(l, x);
  double tr = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t t = 0; t < x.cols; ++t) tr += x(i, t) * lx(i, t);
  return tr;
}

AdjacencySet build_adjacency_set(const SensorNetwork& net, const KernelParams& kp,
                                 std::span<const std::size_t> nodes) {
  std::vector<std::size_t> all;
  if (nodes.empty()) {
    all.resize(net.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    nodes = all;
  }
  const Matrix dist = submatrix(travel_distances(net), nodes);
  std::vector<std::string> dirs;
  for (std::size_t i : nodes) dirs.push_back(net.directions.at(i));

  AdjacencySet s;
  s.a = build_gaussian_adjacency(dist, kp.delta, kp.epsilon);
  s.a_tilde = filter_same_direction(s.a, dirs);
  std::tie(s.a_f, s.a_b) = transition_matrices(s.a_tilde);
  std::tie(s.a_f0, s.a_b0) = transition_matrices(strip_self_loops(s.a_tilde));
  return s;
}

Matrix undirected_neighbor_weights(const Matrix& a_tilde) {
  Matrix w(a_tilde.rows, a_tilde.cols);
  for (std::size_t i = 0; i < a_tilde.rows; ++i)
    for (std::size_t j = 0; j < a_tilde.cols; ++j)
      if (i != j) w(i, j) = std::max(a_tilde(i, j), a_tilde(j, i));
  return w;
}

Matrix permute_nodes(const Matrix& m, std::span<const std::size_t> perm) { return submatrix(m, perm); }

}  // namespace flowkrig
