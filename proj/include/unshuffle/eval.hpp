#pragma once

#include <Eigen/Dense>
#include <vector>

#include "unshuffle/dataset.hpp"
#include "unshuffle/model.hpp"

namespace unshuffle {

// Row-wise argmax with ties broken toward the lowest class index.
std::vector<int> predict_labels(const Eigen::MatrixXd& probs);

// Percentage in [0,100] of examples whose argmax probability matches the
// label. Errors on an empty dataset.
double accuracy(const ModelParams& params, const HeadSelector& head, const Dataset& data);

// Elementwise arithmetic mean of per-model post-logistic outputs.
Eigen::MatrixXd ensemble_predict(const std::vector<const ModelParams*>& models,
                                 const HeadSelector& head, const Eigen::MatrixXd& x);

double ensemble_accuracy(const std::vector<const ModelParams*>& models,
                         const HeadSelector& head, const Dataset& data);

}  // namespace unshuffle
