#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unshuffle/dataset.hpp"

namespace unshuffle {

// Disjoint index sets covering [0, n), one per environment.
struct EnvironmentPartition {
  std::vector<std::vector<std::size_t>> env_indices;
  std::string strategy;
  std::uint64_t seed = 0;

  int num_envs() const { return static_cast<int>(env_indices.size()); }
  // Throws unless the sets are nonempty, pairwise disjoint, and cover [0, n).
  void validate(std::size_t n) const;
};

// {"strategy":..., "seed":..., "envs":[[indices]...]}
std::string partition_to_json(const EnvironmentPartition& part);
EnvironmentPartition partition_from_json(const std::string& text);

// One dataset per environment, rows in index order.
std::vector<Dataset> apply_partition(const Dataset& data, const EnvironmentPartition& part);

// Per-example environment id, for Rand-index comparisons.
std::vector<int> partition_labels(const EnvironmentPartition& part);

struct BowVocabulary {
  std::vector<std::string> tokens;  // lexicographic
  std::vector<int> counts;          // number of examples containing the token
  int min_count = 10;
};

// Binary n x V matrix; entry (i, j) = 1 iff token j occurs in example i.
// Tokens occurring in fewer than min_count examples are dropped.
std::pair<BowVocabulary, Eigen::MatrixXd> bow_vectorize(
    const std::vector<std::vector<std::string>>& token_lists, int min_count = 10);

struct ClusterAssignment {
  std::vector<int> assignments;  // in [0, K]; id K = overflow for all-zero rows
  Eigen::MatrixXd centroids;     // K x V, unit rows
  int num_clusters = 0;          // K, or K + 1 when the overflow cluster is used
  std::vector<double> objective_trace;  // sum of assigned cosines, per iteration
};

// Spherical k-means on unit-normalized rows: assign to max-cosine centroid
// (ties to the lowest id), recompute centroids as normalized means, reseed
// empty clusters to the point with the lowest cosine to its own centroid.
// Stops when no assignment changes or after max_iters. Deterministic per seed.
ClusterAssignment kmeans_cosine(const Eigen::MatrixXd& vectors, int K, std::uint64_t seed,
                                int max_iters = 100);

// Shuffled clusters dealt into E bins whose sizes differ by at most one;
// clusters overflowing a bin are split, the remainder flowing onward.
struct ClusterEnvAssignment {
  // splits[c] lists the (env, count) pieces of cluster c in deal order.
  std::vector<std::vector<std::pair<int, std::size_t>>> splits;
  std::vector<std::size_t> env_sizes;
};
ClusterEnvAssignment assign_clusters_to_envs(const std::vector<std::size_t>& cluster_sizes,
                                             int E, std::uint64_t seed);

// Groups by a string metadata key ("group" or "dataset_id"), then deals the
// groups into E environments. Split groups are divided by index-order prefix.
EnvironmentPartition partition_by_metadata(const Dataset& data, const std::string& key,
                                           int E, std::uint64_t seed);

// bow_vectorize -> kmeans_cosine(K) -> deal clusters into E < K environments.
EnvironmentPartition partition_by_clustering(const Dataset& data, int K, int E,
                                             std::uint64_t seed, int min_count = 10);

// Uniform shuffle dealt round-robin; sizes differ by at most one.
EnvironmentPartition partition_random(const Dataset& data, int E, std::uint64_t seed);

// E full-size variants: environment e holds alternative form e-1 when present,
// else the original features; environment 0 is the input itself.
std::vector<Dataset> partition_by_forms(const Dataset& data, int E);

// Concatenates the inputs; environment e = the rows of dataset e.
std::pair<Dataset, EnvironmentPartition> partition_by_dataset_id(
    const std::vector<Dataset>& datasets);

// Fraction of example pairs co-grouped or co-separated in both labelings.
double rand_index(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace unshuffle
