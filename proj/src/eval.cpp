#include "unshuffle/eval.hpp"

#include <stdexcept>

namespace unshuffle {

std::vector<int> predict_labels(const Eigen::MatrixXd& probs) {
  std::vector<int> labels(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c) {
      if (probs(i, c) > probs(i, best)) best = c;
    }
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return labels;
}

namespace {

double accuracy_from_probs(const Eigen::MatrixXd& probs, const std::vector<int>& truth) {
  const std::vector<int> pred = predict_labels(probs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == truth[i]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace

double accuracy(const ModelParams& params, const HeadSelector& head, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  const Batch batch = make_batch(data, params.num_classes());
  return accuracy_from_probs(forward(params, head, batch.x), batch.labels);
}

Eigen::MatrixXd ensemble_predict(const std::vector<const ModelParams*>& models,
                                 const HeadSelector& head, const Eigen::MatrixXd& x) {
  if (models.empty()) throw std::invalid_argument("ensemble_predict: no models");
  for (const ModelParams* m : models) {
    if (m->extractor.input_dim != models.front()->extractor.input_dim) {
      throw std::invalid_argument("ensemble_predict: model input dimensions differ");
    }
  }
  Eigen::MatrixXd mean = forward(*models.front(), head, x);
  for (std::size_t m = 1; m < models.size(); ++m) {
    const Eigen::MatrixXd probs = forward(*models[m], head, x);
    if (probs.rows() != mean.rows() || probs.cols() != mean.cols()) {
      throw std::invalid_argument("ensemble_predict: model output shapes differ");
    }
    mean += probs;
  }
  mean /= static_cast<double>(models.size());
  return mean;
}

double ensemble_accuracy(const std::vector<const ModelParams*>& models,
                         const HeadSelector& head, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("ensemble_accuracy: empty dataset");
  if (models.empty()) throw std::invalid_argument("ensemble_accuracy: no models");
  const Batch batch = make_batch(data, models.front()->num_classes());
  return accuracy_from_probs(ensemble_predict(models, head, batch.x), batch.labels);
}

}  // namespace unshuffle
