#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowkrig/series.hpp"

namespace flowkrig {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Directed link following traffic movement between two sensors.
struct Edge {
  std::size_t from = 0;
  std::size_t to = 0;
  double distance_m = 0.0;
};

/// Directed sensor graph: ids, geometry, driving directions and lane counts.
struct SensorNetwork {
  std::vector<std::string> sensor_ids;
  std::vector<double> positions_m;
  std::vector<std::string> directions;
  std::vector<int> lanes;
  std::vector<Edge> edges;
  /// Nearest upstream sensor (shortest incoming edge), when one exists.
  std::vector<std::optional<std::size_t>> upstream_neighbor;

  std::size_t size() const { return sensor_ids.size(); }
  std::optional<std::size_t> index_of(const std::string& id) const;

  /// Throws GraphError on duplicate ids, dangling edges, bad lanes or
  /// distances, or edges joining different driving directions.
  void validate() const;
  /// Fills upstream_neighbor from the edge list.
  void derive_upstream_neighbors();
};

/// Gaussian-kernel bandwidth and cutoff (meters).
struct KernelParams {
  double delta = 0.0;
  double epsilon = 0.0;
};

/// All adjacency structures the model consumes.
struct AdjacencySet {
  Matrix a;        // Gaussian kernel weights
  Matrix a_tilde;  // same-direction filtered
  Matrix a_f;      // row-normalized a_tilde
  Matrix a_b;      // row-normalized a_tilde^T
  Matrix a_f0;     // as a_f, diagonal stripped before normalizing
  Matrix a_b0;

  std::size_t size() const { return a.rows; }
};

/// Shortest directed travel distance over the edge list; +inf if unreachable.
Matrix travel_distances(const SensorNetwork& net);

/// delta = standard deviation and epsilon = 80th percentile of the finite
/// off-diagonal distances.
KernelParams default_kernel_params(const Matrix& dist);

Matrix build_gaussian_adjacency(const Matrix& dist, double delta, double epsilon);
Matrix build_gaussian_adjacency(const SensorNetwork& net, double delta, double epsilon);

Matrix filter_same_direction(const Matrix& a, std::span<const std::string> directions);

/// (rownormalize(a), rownormalize(a^T)). Zero rows stay zero.
std::pair<Matrix, Matrix> transition_matrices(const Matrix& a);

Matrix strip_self_loops(const Matrix& m);

/// Diag(rowsum(a)) - a.
Matrix graph_laplacian(const Matrix& a);

/// sum_{j,j'} a_jj' ||x_j - x_j'||^2 for an N x T signal matrix.
double dirichlet_energy(const Matrix& a, const Matrix& x);

/// Tr(X^T L X) for an N x T signal matrix.
double laplacian_trace_form(const Matrix& l, const Matrix& x);

/// Builds every adjacency variant over `nodes` (all sensors when empty).
/// Distances are always taken over the full network.
AdjacencySet build_adjacency_set(const SensorNetwork& net, const KernelParams& kp,
                                 std::span<const std::size_t> nodes = {});

/// Symmetric neighbor weights w_ij = max(a_ij, a_ji) with a zero diagonal,
/// covering both inflow and outflow neighbors.
Matrix undirected_neighbor_weights(const Matrix& a_tilde);

/// P M P^T for the permutation mapping old index perm[i] to new index i.
Matrix permute_nodes(const Matrix& m, std::span<const std::size_t> perm);

}  // namespace flowkrig
