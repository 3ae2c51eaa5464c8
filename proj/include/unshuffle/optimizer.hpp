#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unshuffle/dataset.hpp"
#include "unshuffle/model.hpp"
#include "unshuffle/regularizers.hpp"

namespace unshuffle {

enum class MergeMode { kMean, kMedian };
enum class Objective { kEq2, kErm, kIrmv1 };

MergeMode merge_mode_from_string(const std::string& name);
std::string to_string(MergeMode m);
Objective objective_from_string(const std::string& name);
std::string to_string(Objective o);

struct TrainConfig {
  double lambda = 0.0;
  VarianceMode variance_mode = VarianceMode::kRelative;
  RelDenominator rel_denominator = RelDenominator::kL1;
  bool alternating = false;
  int warmup_epochs = 2;  // joint-update epochs before alternation starts
  int batch_size = 64;
  int max_epochs = 60;
  int patience = 8;
  double adadelta_rho = 0.95;
  double adadelta_eps = 1e-6;
  std::uint64_t seed = 0;
  MergeMode merge_mode = MergeMode::kMean;
  Objective objective = Objective::kEq2;
  // Model architecture; the training entry point owns model construction.
  std::vector<int> hidden_dims = {16};
  int feature_dim = 8;
  Activation activation = Activation::kRelu;
  std::optional<int> num_classes;  // inferred from the data when unset

  void validate() const;
};

// AdaDelta accumulators E[g^2] and E[dx^2], mirroring ModelParams shapes.
struct AdaDeltaState {
  struct Pair {
    Eigen::MatrixXd eg2_w, edx2_w;
    Eigen::VectorXd eg2_b, edx2_b;
  };
  std::vector<Pair> layers;
  std::vector<Pair> heads;
  double rho = 0.95;
  double eps = 1e-6;
};

AdaDeltaState make_adadelta_state(const ModelParams& params, double rho, double eps);

// One AdaDelta update on a single tensor; accumulators updated in place.
// Non-finite gradients abort with the tensor's name.
void adadelta_step(Eigen::MatrixXd& eg2, Eigen::MatrixXd& edx2, Eigen::MatrixXd& value,
                   const Eigen::MatrixXd& grad, double rho, double eps,
                   const std::string& tensor_name);
void adadelta_step(Eigen::VectorXd& eg2, Eigen::VectorXd& edx2, Eigen::VectorXd& value,
                   const Eigen::VectorXd& grad, double rho, double eps,
                   const std::string& tensor_name);

// Sets params.merged to the elementwise mean (or median) of the heads.
void merge_heads(ModelParams& params, MergeMode mode);

struct EpochStats {
  int epoch = 0;
  std::vector<double> env_losses;  // mean data loss per environment
  double variance = 0.0;           // configured variance of current heads
  double val_acc = 0.0;            // merged-model validation accuracy
};

struct RunReport {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_val_acc = 0.0;
  int epochs_run = 0;
  // Head variances of the returned (best-epoch) params and of the params at
  // the end of training; zero when E = 1.
  double variance_abs_best = 0.0;
  double variance_rel_best = 0.0;
  double variance_abs_end = 0.0;
  double variance_rel_end = 0.0;
  double final_val_acc = 0.0;
  TrainConfig config;
  int num_envs = 1;
};

struct TrainResult {
  ModelParams params;  // best-epoch params with merged head set
  RunReport report;
};

// Trains under the summed per-environment loss plus lambda times the head
// variance (omitted when E = 1), with AdaDelta, optional alternating updates
// after warm-up, and early stopping on merged-model validation accuracy.
TrainResult train(const TrainConfig& config, const std::vector<Dataset>& envs,
                  const Dataset& val);

std::string report_to_json(const RunReport& report);
// CSV trace: epoch, one loss column per environment, variance, val_acc.
std::string report_trace_csv(const RunReport& report);

}  // namespace unshuffle
