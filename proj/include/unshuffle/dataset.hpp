#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

namespace unshuffle {

struct ExampleMeta {
  std::optional<std::string> group;
  std::optional<std::string> dataset_id;
  std::vector<Eigen::VectorXd> forms;  // alternative feature vectors, same dim
  std::vector<std::string> tokens;
};

struct Example {
  Eigen::VectorXd x;
  // Either a class index or a multi-hot target row; exactly one is active.
  int y = 0;
  Eigen::VectorXd y_multihot;
  bool multihot = false;
  ExampleMeta meta;

  // Class index used for accuracy; multi-hot rows resolve to their argmax
  // (ties to the lowest index).
  int label_index() const;
};

struct Dataset {
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  Eigen::Index dim() const { return examples.empty() ? 0 : examples.front().x.size(); }

  // Largest class index + 1 (or multi-hot width). Throws on empty.
  int num_classes() const;

  // Throws if any example's dimension (or form dimension) disagrees.
  void validate() const;
};

// Highest class count across several datasets (envs + val + test).
int num_classes(const std::vector<const Dataset*>& sets);

struct Batch {
  Eigen::MatrixXd x;        // n x d
  Eigen::MatrixXd targets;  // n x C, one-hot or multi-hot
  std::vector<int> labels;  // class index per row (argmax for multi-hot)
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices,
                 int num_classes);
Batch make_batch(const Dataset& data, int num_classes);

// JSON Lines I/O: {"x":[...], "y":..., "meta":{...}} per line, all meta fields
// optional. Round-trips finite doubles bit-exactly. Errors carry line numbers.
Dataset read_dataset(const std::string& path);
void write_dataset(const Dataset& data, const std::string& path);

}  // namespace unshuffle
