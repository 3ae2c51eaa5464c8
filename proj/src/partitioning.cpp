#include "unshuffle/partitioning.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "unshuffle/rng.hpp"

namespace unshuffle {

using nlohmann::json;

void EnvironmentPartition::validate(std::size_t n) const {
  if (env_indices.empty()) throw std::runtime_error("partition: no environments");
  std::vector<char> seen(n, 0);
  std::size_t total = 0;
  for (std::size_t e = 0; e < env_indices.size(); ++e) {
    if (env_indices[e].empty()) {
      throw std::runtime_error("partition: environment " + std::to_string(e) + " is empty");
    }
    for (std::size_t idx : env_indices[e]) {
      if (idx >= n) {
        throw std::runtime_error("partition: index " + std::to_string(idx) +
                                 " out of range for n=" + std::to_string(n));
      }
      if (seen[idx]) {
        throw std::runtime_error("partition: index " + std::to_string(idx) +
                                 " appears in two environments");
      }
      seen[idx] = 1;
      ++total;
    }
  }
  if (total != n) {
    throw std::runtime_error("partition: covers " + std::to_string(total) + " of " +
                             std::to_string(n) + " examples");
  }
}

std::string partition_to_json(const EnvironmentPartition& part) {
  json j;
  j["strategy"] = part.strategy;
  j["seed"] = part.seed;
  json envs = json::array();
  for (const auto& env : part.env_indices) envs.push_back(env);
  j["envs"] = envs;
  return j.dump(2);
}

EnvironmentPartition partition_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("partition: invalid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("envs") || !j["envs"].is_array()) {
    throw std::runtime_error("partition: document must carry an \"envs\" array");
  }
  EnvironmentPartition part;
  part.strategy = j.value("strategy", std::string{});
  part.seed = j.value("seed", std::uint64_t{0});
  for (const auto& env : j["envs"]) {
    if (!env.is_array()) throw std::runtime_error("partition: \"envs\" entries must be arrays");
    std::vector<std::size_t> indices;
    for (const auto& v : env) {
      if (!v.is_number_unsigned() && !v.is_number_integer()) {
        throw std::runtime_error("partition: indices must be non-negative integers");
      }
      const auto raw = v.get<long long>();
      if (raw < 0) throw std::runtime_error("partition: indices must be non-negative integers");
      indices.push_back(static_cast<std::size_t>(raw));
    }
    part.env_indices.push_back(std::move(indices));
  }
  return part;
}

std::vector<Dataset> apply_partition(const Dataset& data, const EnvironmentPartition& part) {
  part.validate(data.size());
  std::vector<Dataset> envs(part.env_indices.size());
  for (std::size_t e = 0; e < part.env_indices.size(); ++e) {
    envs[e].examples.reserve(part.env_indices[e].size());
    for (std::size_t idx : part.env_indices[e]) envs[e].examples.push_back(data.examples[idx]);
  }
  return envs;
}

std::vector<int> partition_labels(const EnvironmentPartition& part) {
  std::size_t n = 0;
  for (const auto& env : part.env_indices) n += env.size();
  std::vector<int> labels(n, -1);
  for (std::size_t e = 0; e < part.env_indices.size(); ++e) {
    for (std::size_t idx : part.env_indices[e]) {
      if (idx >= n) throw std::runtime_error("partition_labels: index out of range");
      labels[idx] = static_cast<int>(e);
    }
  }
  return labels;
}

std::pair<BowVocabulary, Eigen::MatrixXd> bow_vectorize(
    const std::vector<std::vector<std::string>>& token_lists, int min_count) {
  if (token_lists.empty()) throw std::invalid_argument("bow_vectorize: no examples");
  std::map<std::string, int> doc_counts;
  for (const auto& tokens : token_lists) {
    std::vector<std::string> uniq(tokens.begin(), tokens.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (const auto& t : uniq) ++doc_counts[t];
  }
  BowVocabulary vocab;
  vocab.min_count = min_count;
  std::map<std::string, Eigen::Index> column;
  for (const auto& [token, count] : doc_counts) {
    if (count >= min_count) {
      column[token] = static_cast<Eigen::Index>(vocab.tokens.size());
      vocab.tokens.push_back(token);
      vocab.counts.push_back(count);
    }
  }
  if (vocab.tokens.empty()) {
    throw std::runtime_error("bow_vectorize: empty vocabulary after min_count filtering");
  }
  Eigen::MatrixXd mat = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(token_lists.size()),
                                              static_cast<Eigen::Index>(vocab.tokens.size()));
  for (std::size_t i = 0; i < token_lists.size(); ++i) {
    for (const auto& t : token_lists[i]) {
      auto it = column.find(t);
      if (it != column.end()) mat(static_cast<Eigen::Index>(i), it->second) = 1.0;
    }
  }
  return {std::move(vocab), std::move(mat)};
}

ClusterAssignment kmeans_cosine(const Eigen::MatrixXd& vectors, int K, std::uint64_t seed,
                                int max_iters) {
  const Eigen::Index n = vectors.rows();
  if (K < 2) throw std::invalid_argument("kmeans_cosine: K must be >= 2");
  if (K > n) throw std::invalid_argument("kmeans_cosine: K exceeds the number of points");
  if (max_iters < 1) throw std::invalid_argument("kmeans_cosine: max_iters must be >= 1");

  Eigen::MatrixXd unit = vectors;
  std::vector<std::size_t> nonzero;
  bool has_zero = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = unit.row(i).norm();
    if (norm > 0.0) {
      unit.row(i) /= norm;
      nonzero.push_back(static_cast<std::size_t>(i));
    } else {
      has_zero = true;
    }
  }
  if (static_cast<Eigen::Index>(nonzero.size()) < K) {
    throw std::invalid_argument("kmeans_cosine: K exceeds the number of nonzero points");
  }

  Rng rng(seed);
  std::vector<std::size_t> order = nonzero;
  rng.shuffle(order);
  Eigen::MatrixXd centroids(K, vectors.cols());
  for (int k = 0; k < K; ++k) centroids.row(k) = unit.row(static_cast<Eigen::Index>(order[static_cast<std::size_t>(k)]));

  ClusterAssignment out;
  out.assignments.assign(static_cast<std::size_t>(n), K);  // zero rows stay at K
  out.num_clusters = K + (has_zero ? 1 : 0);

  for (int iter = 0; iter < max_iters; ++iter) {
    // Assignment step: max cosine, ties to the lowest centroid id.
    bool changed = false;
    double objective = 0.0;
    Eigen::MatrixXd sims = unit * centroids.transpose();
    for (std::size_t i : nonzero) {
      const Eigen::Index row = static_cast<Eigen::Index>(i);
      int best = 0;
      for (int k = 1; k < K; ++k) {
        if (sims(row, k) > sims(row, best)) best = k;
      }
      objective += sims(row, best);
      if (out.assignments[i] != best) {
        out.assignments[i] = best;
        changed = true;
      }
    }
    out.objective_trace.push_back(objective);
    if (!changed) break;

    // Update step: normalized means; empty clusters reseed to the worst-fit point.
    std::vector<std::size_t> counts(static_cast<std::size_t>(K), 0);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(K, vectors.cols());
    for (std::size_t i : nonzero) {
      sums.row(out.assignments[i]) += unit.row(static_cast<Eigen::Index>(i));
      ++counts[static_cast<std::size_t>(out.assignments[i])];
    }
    std::vector<char> reseeded(nonzero.size(), 0);
    for (int k = 0; k < K; ++k) {
      if (counts[static_cast<std::size_t>(k)] == 0) {
        double worst = 2.0;
        std::size_t pick = nonzero.size();
        for (std::size_t j = 0; j < nonzero.size(); ++j) {
          if (reseeded[j]) continue;
          const Eigen::Index row = static_cast<Eigen::Index>(nonzero[j]);
          const double sim = sims(row, out.assignments[nonzero[j]]);
          if (sim < worst) {
            worst = sim;
            pick = j;
          }
        }
        if (pick == nonzero.size()) continue;
        reseeded[pick] = 1;
        centroids.row(k) = unit.row(static_cast<Eigen::Index>(nonzero[pick]));
      } else if (sums.row(k).norm() > 0.0) {
        centroids.row(k) = sums.row(k) / sums.row(k).norm();
      }
      // A nonempty cluster whose unit vectors sum to zero keeps its centroid.
    }
  }
  out.centroids = std::move(centroids);
  return out;
}

ClusterEnvAssignment assign_clusters_to_envs(const std::vector<std::size_t>& cluster_sizes,
                                             int E, std::uint64_t seed) {
  std::size_t n = 0;
  for (std::size_t s : cluster_sizes) n += s;
  if (E < 1) throw std::invalid_argument("assign_clusters_to_envs: E must be >= 1");
  if (static_cast<std::size_t>(E) > n) {
    throw std::invalid_argument("assign_clusters_to_envs: E exceeds the number of examples");
  }

  // Bin capacities: the first n mod E bins take the ceiling, the rest the floor.
  std::vector<std::size_t> capacity(static_cast<std::size_t>(E), n / static_cast<std::size_t>(E));
  for (std::size_t b = 0; b < n % static_cast<std::size_t>(E); ++b) ++capacity[b];

  std::vector<std::size_t> order(cluster_sizes.size());
  for (std::size_t c = 0; c < order.size(); ++c) order[c] = c;
  Rng rng(seed);
  rng.shuffle(order);

  ClusterEnvAssignment out;
  out.splits.resize(cluster_sizes.size());
  out.env_sizes.assign(static_cast<std::size_t>(E), 0);
  std::size_t bin = 0;
  for (std::size_t c : order) {
    std::size_t remaining = cluster_sizes[c];
    while (remaining > 0) {
      while (out.env_sizes[bin] == capacity[bin]) ++bin;
      const std::size_t take = std::min(remaining, capacity[bin] - out.env_sizes[bin]);
      out.splits[c].emplace_back(static_cast<int>(bin), take);
      out.env_sizes[bin] += take;
      remaining -= take;
    }
  }
  return out;
}

namespace {

// Deals each cluster's member indices (ascending) into environments by the
// split prefixes, then sorts each environment for a canonical form.
EnvironmentPartition deal_clusters(const std::vector<std::vector<std::size_t>>& members,
                                   int E, std::uint64_t seed, const std::string& strategy,
                                   std::size_t n) {
  std::vector<std::size_t> sizes(members.size());
  for (std::size_t c = 0; c < members.size(); ++c) sizes[c] = members[c].size();
  const ClusterEnvAssignment assignment = assign_clusters_to_envs(sizes, E, seed);

  EnvironmentPartition part;
  part.strategy = strategy;
  part.seed = seed;
  part.env_indices.resize(static_cast<std::size_t>(E));
  for (std::size_t c = 0; c < members.size(); ++c) {
    std::size_t cursor = 0;
    for (const auto& [env, count] : assignment.splits[c]) {
      for (std::size_t i = 0; i < count; ++i) {
        part.env_indices[static_cast<std::size_t>(env)].push_back(members[c][cursor++]);
      }
    }
  }
  for (auto& env : part.env_indices) std::sort(env.begin(), env.end());
  part.validate(n);
  return part;
}

}  // namespace

EnvironmentPartition partition_by_metadata(const Dataset& data, const std::string& key,
                                           int E, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("partition_by_metadata: empty dataset");
  if (key != "group" && key != "dataset_id") {
    throw std::invalid_argument("partition_by_metadata: unknown metadata key '" + key + "'");
  }
  std::map<std::string, std::vector<std::size_t>> groups;
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& meta = data.examples[i].meta;
    const auto& value = key == "group" ? meta.group : meta.dataset_id;
    if (!value) {
      missing.push_back(i);
    } else {
      groups[*value].push_back(i);
    }
  }
  if (!missing.empty()) {
    std::string msg = "partition_by_metadata: examples missing key '" + key + "':";
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) {
      msg += " " + std::to_string(missing[i]);
    }
    if (missing.size() > 10) msg += " ...";
    throw std::runtime_error(msg);
  }
  std::vector<std::vector<std::size_t>> members;
  members.reserve(groups.size());
  for (auto& [value, indices] : groups) members.push_back(std::move(indices));
  return deal_clusters(members, E, seed, "metadata:" + key, data.size());
}

EnvironmentPartition partition_by_clustering(const Dataset& data, int K, int E,
                                             std::uint64_t seed, int min_count) {
  if (data.empty()) throw std::invalid_argument("partition_by_clustering: empty dataset");
  if (E >= K) throw std::invalid_argument("partition_by_clustering: requires E < K");
  std::vector<std::vector<std::string>> token_lists;
  token_lists.reserve(data.size());
  for (const auto& ex : data.examples) token_lists.push_back(ex.meta.tokens);
  const auto [vocab, mat] = bow_vectorize(token_lists, min_count);

  Rng rng(seed);
  const std::uint64_t kmeans_seed = rng.next_seed();
  const std::uint64_t deal_seed = rng.next_seed();
  const ClusterAssignment clusters = kmeans_cosine(mat, K, kmeans_seed);

  std::vector<std::vector<std::size_t>> members(
      static_cast<std::size_t>(clusters.num_clusters));
  for (std::size_t i = 0; i < clusters.assignments.size(); ++i) {
    members[static_cast<std::size_t>(clusters.assignments[i])].push_back(i);
  }
  EnvironmentPartition part = deal_clusters(members, E, deal_seed, "clustering", data.size());
  part.seed = seed;
  return part;
}

EnvironmentPartition partition_random(const Dataset& data, int E, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("partition_random: empty dataset");
  if (E < 1) throw std::invalid_argument("partition_random: E must be >= 1");
  if (static_cast<std::size_t>(E) > data.size()) {
    throw std::invalid_argument("partition_random: E exceeds the number of examples");
  }
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  EnvironmentPartition part;
  part.strategy = "random";
  part.seed = seed;
  part.env_indices.resize(static_cast<std::size_t>(E));
  for (std::size_t i = 0; i < order.size(); ++i) {
    part.env_indices[i % static_cast<std::size_t>(E)].push_back(order[i]);
  }
  for (auto& env : part.env_indices) std::sort(env.begin(), env.end());
  part.validate(data.size());
  return part;
}

std::vector<Dataset> partition_by_forms(const Dataset& data, int E) {
  if (data.empty()) throw std::invalid_argument("partition_by_forms: empty dataset");
  if (E < 2) throw std::invalid_argument("partition_by_forms: E must be >= 2");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.examples[i].meta.forms.size() > static_cast<std::size_t>(E - 1)) {
      throw std::invalid_argument(
          "partition_by_forms: example " + std::to_string(i) + " has " +
          std::to_string(data.examples[i].meta.forms.size()) + " forms, more than E-1=" +
          std::to_string(E - 1));
    }
  }
  std::vector<Dataset> envs(static_cast<std::size_t>(E));
  envs[0] = data;
  for (int e = 1; e < E; ++e) {
    Dataset env = data;
    for (auto& ex : env.examples) {
      const std::size_t f = static_cast<std::size_t>(e - 1);
      if (f < ex.meta.forms.size()) ex.x = ex.meta.forms[f];
    }
    envs[static_cast<std::size_t>(e)] = std::move(env);
  }
  return envs;
}

std::pair<Dataset, EnvironmentPartition> partition_by_dataset_id(
    const std::vector<Dataset>& datasets) {
  if (datasets.size() < 2) {
    throw std::invalid_argument("partition_by_dataset_id: requires at least two datasets");
  }
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    if (datasets[d].empty()) {
      throw std::invalid_argument("partition_by_dataset_id: dataset " + std::to_string(d) +
                                  " is empty");
    }
  }
  const Eigen::Index dim = datasets.front().dim();
  const bool multihot = datasets.front().examples.front().multihot;
  const int classes = datasets.front().num_classes();
  for (std::size_t d = 1; d < datasets.size(); ++d) {
    if (datasets[d].dim() != dim || datasets[d].examples.front().multihot != multihot ||
        datasets[d].num_classes() != classes) {
      throw std::invalid_argument("partition_by_dataset_id: schema mismatch between dataset 0 and " +
                                  std::to_string(d));
    }
  }
  Dataset merged;
  EnvironmentPartition part;
  part.strategy = "dataset_id";
  part.env_indices.resize(datasets.size());
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    for (const auto& ex : datasets[d].examples) {
      part.env_indices[d].push_back(merged.examples.size());
      merged.examples.push_back(ex);
    }
  }
  part.validate(merged.size());
  return {std::move(merged), std::move(part)};
}

double rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("rand_index: labelings differ in size");
  const std::size_t n = a.size();
  if (n < 2) throw std::invalid_argument("rand_index: needs at least two examples");

  std::map<int, std::size_t> count_a, count_b;
  std::map<std::pair<int, int>, std::size_t> joint;
  for (std::size_t i = 0; i < n; ++i) {
    ++count_a[a[i]];
    ++count_b[b[i]];
    ++joint[{a[i], b[i]}];
  }
  auto pairs = [](std::size_t m) { return static_cast<double>(m) * (m - 1) / 2.0; };
  double same_a = 0.0, same_b = 0.0, same_both = 0.0;
  for (const auto& [label, count] : count_a) same_a += pairs(count);
  for (const auto& [label, count] : count_b) same_b += pairs(count);
  for (const auto& [labels, count] : joint) same_both += pairs(count);
  const double total = pairs(n);
  const double disagree = same_a + same_b - 2.0 * same_both;
  return (total - disagree) / total;
}

}  // namespace unshuffle
