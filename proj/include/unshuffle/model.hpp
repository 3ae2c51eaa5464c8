#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unshuffle/dataset.hpp"

namespace unshuffle {

enum class Activation { kRelu, kTanh };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

struct FeatureExtractorParams {
  // layers[i].first is [out x in], layers[i].second is [out].
  std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> layers;
  Activation activation = Activation::kRelu;
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int feature_dim = 0;
};

struct HeadParams {
  Eigen::MatrixXd weights;  // num_classes x feature_dim
  Eigen::VectorXd bias;     // num_classes
  int env_id = 0;
};

struct ModelParams {
  FeatureExtractorParams extractor;
  std::vector<HeadParams> heads;  // length E >= 1
  std::optional<HeadParams> merged;

  int num_envs() const { return static_cast<int>(heads.size()); }
  int num_classes() const { return static_cast<int>(heads.front().weights.rows()); }
};

// Selects which classifier the forward pass applies.
struct HeadSelector {
  static HeadSelector env(int e) { return HeadSelector{e}; }
  static HeadSelector merged() { return HeadSelector{-1}; }
  bool is_merged() const { return index < 0; }
  int index = -1;
};

// Weights uniform in [-sqrt(6/(fan_in+fan_out)), +], biases zero, all heads
// identical so the initial head variance is exactly zero. Deterministic.
ModelParams init_params(int input_dim, const std::vector<int>& hidden_dims,
                        int feature_dim, int num_classes, int num_envs,
                        std::uint64_t seed);

// Per-class logistic probabilities, shape n x C; entries strictly in (0,1).
Eigen::MatrixXd forward(const ModelParams& params, const HeadSelector& head,
                        const Eigen::MatrixXd& x);

// Extractor output f_theta(x), shape n x feature_dim.
Eigen::MatrixXd forward_features(const ModelParams& params, const Eigen::MatrixXd& x);

// Mean over n and C of the binary cross-entropy with logs clamped at 1e-7.
double loss_bce(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& targets);

struct ModelGrads {
  std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> layers;
  Eigen::MatrixXd head_weights;
  Eigen::VectorXd head_bias;
  int env = 0;
};

// Analytic gradients of loss_bce(forward(params, env, x), targets) w.r.t. the
// extractor and head `env`; other heads have zero gradient and are omitted.
ModelGrads grad_model(const ModelParams& params, int env, const Batch& batch);

// Forward pass with cached activations, for training-time reuse.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> pre;   // pre-activation per layer
  std::vector<Eigen::MatrixXd> post;  // post-activation per layer; post.back() = features
  Eigen::MatrixXd probs;
};
ForwardCache forward_cached(const ModelParams& params, int env, const Eigen::MatrixXd& x);

// Backprop from an arbitrary d(loss)/d(logits) matrix; shared by the BCE and
// penalty paths. Fills gradients for the extractor and head `env`.
ModelGrads backprop(const ModelParams& params, int env, const Eigen::MatrixXd& x,
                    const ForwardCache& cache, const Eigen::MatrixXd& dlogits);

// Versioned JSON document, arrays row-major.
std::string model_to_json(const ModelParams& params);
ModelParams model_from_json(const std::string& text);
void save_model(const ModelParams& params, const std::string& path);
ModelParams load_model(const std::string& path);

}  // namespace unshuffle
