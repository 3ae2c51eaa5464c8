#include "unshuffle/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "unshuffle/eval.hpp"
#include "unshuffle/rng.hpp"

namespace unshuffle {

using nlohmann::json;

MergeMode merge_mode_from_string(const std::string& name) {
  if (name == "mean") return MergeMode::kMean;
  if (name == "median") return MergeMode::kMedian;
  throw std::invalid_argument("unknown merge mode: " + name);
}

std::string to_string(MergeMode m) { return m == MergeMode::kMean ? "mean" : "median"; }

Objective objective_from_string(const std::string& name) {
  if (name == "eq2") return Objective::kEq2;
  if (name == "erm") return Objective::kErm;
  if (name == "irmv1") return Objective::kIrmv1;
  throw std::invalid_argument("unknown objective: " + name);
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::kEq2: return "eq2";
    case Objective::kErm: return "erm";
    default: return "irmv1";
  }
}

void TrainConfig::validate() const {
  if (lambda < 0.0) throw std::invalid_argument("train: lambda must be >= 0");
  if (warmup_epochs < 0) throw std::invalid_argument("train: warmup_epochs must be >= 0");
  if (warmup_epochs > max_epochs) {
    throw std::invalid_argument("train: warmup_epochs must be <= max_epochs");
  }
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
  if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
  if (adadelta_rho <= 0.0 || adadelta_rho >= 1.0) {
    throw std::invalid_argument("train: adadelta_rho must lie in (0,1)");
  }
  if (adadelta_eps <= 0.0) throw std::invalid_argument("train: adadelta_eps must be > 0");
  if (feature_dim < 1) throw std::invalid_argument("train: feature_dim must be >= 1");
  for (int h : hidden_dims) {
    if (h < 1) throw std::invalid_argument("train: hidden dims must be >= 1");
  }
}

AdaDeltaState make_adadelta_state(const ModelParams& params, double rho, double eps) {
  AdaDeltaState s;
  s.rho = rho;
  s.eps = eps;
  for (const auto& [w, b] : params.extractor.layers) {
    AdaDeltaState::Pair p;
    p.eg2_w = Eigen::MatrixXd::Zero(w.rows(), w.cols());
    p.edx2_w = p.eg2_w;
    p.eg2_b = Eigen::VectorXd::Zero(b.size());
    p.edx2_b = p.eg2_b;
    s.layers.push_back(std::move(p));
  }
  for (const auto& h : params.heads) {
    AdaDeltaState::Pair p;
    p.eg2_w = Eigen::MatrixXd::Zero(h.weights.rows(), h.weights.cols());
    p.edx2_w = p.eg2_w;
    p.eg2_b = Eigen::VectorXd::Zero(h.bias.size());
    p.edx2_b = p.eg2_b;
    s.heads.push_back(std::move(p));
  }
  return s;
}

namespace {

template <typename T>
void adadelta_tensor(T& eg2, T& edx2, T& value, const T& grad, double rho, double eps,
                     const std::string& name) {
  if (!grad.allFinite()) {
    throw std::runtime_error("adadelta: non-finite gradient in tensor " + name);
  }
  eg2 = rho * eg2.array() + (1.0 - rho) * grad.array().square();
  const T dx =
      (-(edx2.array() + eps).sqrt() / (eg2.array() + eps).sqrt() * grad.array()).matrix();
  edx2 = rho * edx2.array() + (1.0 - rho) * dx.array().square();
  value += dx;
}

}  // namespace

void adadelta_step(Eigen::MatrixXd& eg2, Eigen::MatrixXd& edx2, Eigen::MatrixXd& value,
                   const Eigen::MatrixXd& grad, double rho, double eps,
                   const std::string& tensor_name) {
  adadelta_tensor(eg2, edx2, value, grad, rho, eps, tensor_name);
}

void adadelta_step(Eigen::VectorXd& eg2, Eigen::VectorXd& edx2, Eigen::VectorXd& value,
                   const Eigen::VectorXd& grad, double rho, double eps,
                   const std::string& tensor_name) {
  adadelta_tensor(eg2, edx2, value, grad, rho, eps, tensor_name);
}

void merge_heads(ModelParams& params, MergeMode mode) {
  if (params.heads.empty()) throw std::runtime_error("merge_heads: no heads");
  HeadParams merged = params.heads.front();
  merged.env_id = -1;
  if (mode == MergeMode::kMean) {
    for (std::size_t e = 1; e < params.heads.size(); ++e) {
      merged.weights += params.heads[e].weights;
      merged.bias += params.heads[e].bias;
    }
    merged.weights /= static_cast<double>(params.heads.size());
    merged.bias /= static_cast<double>(params.heads.size());
  } else {
    const auto E = params.heads.size();
    std::vector<double> vals(E);
    auto median = [&vals]() {
      std::sort(vals.begin(), vals.end());
      const std::size_t n = vals.size();
      return n % 2 == 1 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
    };
    for (Eigen::Index r = 0; r < merged.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < merged.weights.cols(); ++c) {
        for (std::size_t e = 0; e < E; ++e) vals[e] = params.heads[e].weights(r, c);
        merged.weights(r, c) = median();
      }
    }
    for (Eigen::Index i = 0; i < merged.bias.size(); ++i) {
      for (std::size_t e = 0; e < E; ++e) vals[e] = params.heads[e].bias[i];
      merged.bias[i] = median();
    }
  }
  params.merged = std::move(merged);
}

namespace {

// Cycling mini-batch source over one environment; a batch never straddles a
// reshuffle, so draws are fully determined by the stream's own seed.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next(std::size_t batch) {
    if (cursor_ + batch > order_.size()) {
      rng_.shuffle(order_);
      cursor_ = 0;
    }
    std::vector<std::size_t> idx(order_.begin() + static_cast<long>(cursor_),
                                 order_.begin() + static_cast<long>(cursor_ + batch));
    cursor_ += batch;
    return idx;
  }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct FullGrads {
  std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> layers;
  std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> heads;
};

FullGrads zero_grads(const ModelParams& params) {
  FullGrads g;
  for (const auto& [w, b] : params.extractor.layers) {
    g.layers.emplace_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()),
                          Eigen::VectorXd::Zero(b.size()));
  }
  for (const auto& h : params.heads) {
    g.heads.emplace_back(Eigen::MatrixXd::Zero(h.weights.rows(), h.weights.cols()),
                         Eigen::VectorXd::Zero(h.bias.size()));
  }
  return g;
}

void add_model_grads(FullGrads& acc, const ModelGrads& g) {
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    acc.layers[i].first += g.layers[i].first;
    acc.layers[i].second += g.layers[i].second;
  }
  acc.heads[static_cast<std::size_t>(g.env)].first += g.head_weights;
  acc.heads[static_cast<std::size_t>(g.env)].second += g.head_bias;
}

// Adds lambda * d(variance)/d(heads) onto the head gradients.
void add_variance_grads(FullGrads& acc, const ModelParams& params,
                        const TrainConfig& config) {
  const HeadStack stack = head_stack(params);
  const auto grads = grad_variance(stack, config.variance_mode, config.rel_denominator);
  for (std::size_t e = 0; e < grads.size(); ++e) {
    const HeadParams& h = params.heads[e];
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < h.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < h.weights.cols(); ++c) {
        acc.heads[e].first(r, c) += config.lambda * grads[e][k++];
      }
    }
    for (Eigen::Index i = 0; i < h.bias.size(); ++i) {
      acc.heads[e].second[i] += config.lambda * grads[e][k++];
    }
  }
}

// IRMv1: adds lambda * d(sum_e g_e^2)/d(params) via a second backward pass per
// environment with logit-delta 2 g_e [sigma'(z) z + (p - y)] / (n C).
double add_irmv1_grads(FullGrads& acc, const ModelParams& params,
                       const std::vector<Batch>& batches, double lambda) {
  double penalty = 0.0;
  for (std::size_t e = 0; e < batches.size(); ++e) {
    const Batch& batch = batches[e];
    ForwardCache cache = forward_cached(params, static_cast<int>(e), batch.x);
    const HeadParams& head = params.heads[e];
    const Eigen::MatrixXd z =
        (cache.post.back() * head.weights.transpose()).rowwise() + head.bias.transpose();
    const double scale = 1.0 / static_cast<double>(z.rows() * z.cols());
    const Eigen::MatrixXd diff = cache.probs - batch.targets;
    const double g = diff.cwiseProduct(z).sum() * scale;
    penalty += g * g;
    const Eigen::MatrixXd sigma_prime =
        cache.probs.array() * (1.0 - cache.probs.array());
    const Eigen::MatrixXd dlogits =
        (2.0 * lambda * g * scale) * (sigma_prime.cwiseProduct(z) + diff);
    add_model_grads(acc, backprop(params, static_cast<int>(e), batch.x, cache, dlogits));
  }
  return penalty;
}

void apply_update(ModelParams& params, AdaDeltaState& state, const FullGrads& grads,
                  bool update_extractor, bool update_heads) {
  if (update_extractor) {
    for (std::size_t i = 0; i < params.extractor.layers.size(); ++i) {
      auto& [w, b] = params.extractor.layers[i];
      adadelta_step(state.layers[i].eg2_w, state.layers[i].edx2_w, w,
                    grads.layers[i].first, state.rho, state.eps,
                    "extractor.layers[" + std::to_string(i) + "].weights");
      adadelta_step(state.layers[i].eg2_b, state.layers[i].edx2_b, b,
                    grads.layers[i].second, state.rho, state.eps,
                    "extractor.layers[" + std::to_string(i) + "].bias");
    }
  }
  if (update_heads) {
    for (std::size_t e = 0; e < params.heads.size(); ++e) {
      adadelta_step(state.heads[e].eg2_w, state.heads[e].edx2_w, params.heads[e].weights,
                    grads.heads[e].first, state.rho, state.eps,
                    "heads[" + std::to_string(e) + "].weights");
      adadelta_step(state.heads[e].eg2_b, state.heads[e].edx2_b, params.heads[e].bias,
                    grads.heads[e].second, state.rho, state.eps,
                    "heads[" + std::to_string(e) + "].bias");
    }
  }
}

double current_variance(const ModelParams& params, const TrainConfig& config) {
  if (params.num_envs() < 2) return 0.0;
  const HeadStack stack = head_stack(params);
  return config.variance_mode == VarianceMode::kAbsolute
             ? variance_abs(stack)
             : variance_rel(stack, config.rel_denominator);
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<Dataset>& envs,
                  const Dataset& val) {
  config.validate();
  if (envs.empty()) throw std::invalid_argument("train: no environments");
  for (std::size_t e = 0; e < envs.size(); ++e) {
    if (envs[e].empty()) {
      throw std::invalid_argument("train: environment " + std::to_string(e) + " is empty");
    }
  }
  if (val.empty()) throw std::invalid_argument("train: empty validation set");
  const int E = static_cast<int>(envs.size());
  if (config.objective == Objective::kErm && E != 1) {
    throw std::invalid_argument("train: objective=erm requires a single environment");
  }
  const auto input_dim = envs.front().dim();
  for (const auto& env : envs) {
    if (env.dim() != input_dim) throw std::invalid_argument("train: environment dimensions differ");
  }
  if (val.dim() != input_dim) throw std::invalid_argument("train: validation dimension differs");

  int C;
  if (config.num_classes) {
    C = *config.num_classes;
  } else {
    std::vector<const Dataset*> sets;
    for (const auto& env : envs) sets.push_back(&env);
    sets.push_back(&val);
    C = num_classes(sets);
  }

  Rng root(config.seed);
  const std::uint64_t init_seed = root.next_seed();
  ModelParams params = init_params(static_cast<int>(input_dim), config.hidden_dims,
                                   config.feature_dim, C, E, init_seed);
  params.extractor.activation = config.activation;
  AdaDeltaState state = make_adadelta_state(params, config.adadelta_rho, config.adadelta_eps);

  // One shared stream seed: environments holding identical data then draw
  // identical batches, so their heads stay exactly equal under lambda = 0.
  const std::uint64_t stream_seed = root.next_seed();
  std::vector<BatchStream> streams;
  streams.reserve(envs.size());
  std::size_t min_env = envs.front().size();
  for (const auto& env : envs) min_env = std::min(min_env, env.size());
  for (const auto& env : envs) streams.emplace_back(env.size(), stream_seed);

  const std::size_t batch = std::min<std::size_t>(config.batch_size, min_env);
  const int steps_per_epoch =
      static_cast<int>(std::max<std::size_t>(1, min_env / batch));

  RunReport report;
  report.config = config;
  report.num_envs = E;

  ModelParams best_params = params;
  double best_val = -1.0;
  int best_epoch = -1;
  long long alternating_step = 0;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::vector<double> loss_sums(static_cast<std::size_t>(E), 0.0);
    for (int step = 0; step < steps_per_epoch; ++step) {
      const bool alternate = config.alternating && epoch >= config.warmup_epochs;
      bool update_extractor = true;
      bool update_heads = true;
      if (alternate) {
        update_extractor = alternating_step % 2 == 0;
        update_heads = !update_extractor;
        ++alternating_step;
      }

      FullGrads grads = zero_grads(params);
      std::vector<Batch> batches;
      batches.reserve(envs.size());
      double objective_value = 0.0;
      for (int e = 0; e < E; ++e) {
        batches.push_back(make_batch(envs[static_cast<std::size_t>(e)],
                                     streams[static_cast<std::size_t>(e)].next(batch), C));
        const Batch& b = batches.back();
        ForwardCache cache = forward_cached(params, e, b.x);
        const double loss = loss_bce(cache.probs, b.targets);
        loss_sums[static_cast<std::size_t>(e)] += loss;
        objective_value += loss;
        const double scale =
            1.0 / static_cast<double>(cache.probs.rows() * cache.probs.cols());
        const Eigen::MatrixXd dlogits = (cache.probs - b.targets) * scale;
        add_model_grads(grads, backprop(params, e, b.x, cache, dlogits));
      }

      if (config.objective == Objective::kEq2 && E >= 2 && config.lambda > 0.0 &&
          update_heads) {
        objective_value += config.lambda * current_variance(params, config);
        add_variance_grads(grads, params, config);
      } else if (config.objective == Objective::kIrmv1 && config.lambda > 0.0) {
        // Heads stay equal: every head receives the identical summed update.
        FullGrads penalty_grads = zero_grads(params);
        const double penalty =
            add_irmv1_grads(penalty_grads, params, batches, config.lambda);
        objective_value += config.lambda * penalty;
        Eigen::MatrixXd head_w = Eigen::MatrixXd::Zero(params.heads[0].weights.rows(),
                                                       params.heads[0].weights.cols());
        Eigen::VectorXd head_b = Eigen::VectorXd::Zero(params.heads[0].bias.size());
        for (std::size_t e = 0; e < penalty_grads.heads.size(); ++e) {
          head_w += penalty_grads.heads[e].first + grads.heads[e].first;
          head_b += penalty_grads.heads[e].second + grads.heads[e].second;
        }
        for (std::size_t i = 0; i < grads.layers.size(); ++i) {
          grads.layers[i].first += penalty_grads.layers[i].first;
          grads.layers[i].second += penalty_grads.layers[i].second;
        }
        for (std::size_t e = 0; e < grads.heads.size(); ++e) {
          grads.heads[e].first = head_w;
          grads.heads[e].second = head_b;
        }
      } else if (config.objective == Objective::kIrmv1) {
        // lambda = 0: still share the data gradient so heads remain equal.
        Eigen::MatrixXd head_w = Eigen::MatrixXd::Zero(params.heads[0].weights.rows(),
                                                       params.heads[0].weights.cols());
        Eigen::VectorXd head_b = Eigen::VectorXd::Zero(params.heads[0].bias.size());
        for (std::size_t e = 0; e < grads.heads.size(); ++e) {
          head_w += grads.heads[e].first;
          head_b += grads.heads[e].second;
        }
        for (std::size_t e = 0; e < grads.heads.size(); ++e) {
          grads.heads[e].first = head_w;
          grads.heads[e].second = head_b;
        }
      }

      if (!std::isfinite(objective_value)) {
        throw std::runtime_error("train: non-finite objective at epoch " +
                                 std::to_string(epoch));
      }
      apply_update(params, state, grads, update_extractor, update_heads);
    }

    merge_heads(params, config.merge_mode);
    EpochStats stats;
    stats.epoch = epoch;
    for (double s : loss_sums) stats.env_losses.push_back(s / steps_per_epoch);
    stats.variance = current_variance(params, config);
    stats.val_acc = accuracy(params, HeadSelector::merged(), val);
    report.epochs.push_back(stats);

    if (stats.val_acc > best_val) {
      best_val = stats.val_acc;
      best_epoch = epoch;
      best_params = params;
    } else if (epoch - best_epoch >= config.patience) {
      break;
    }
  }

  report.epochs_run = static_cast<int>(report.epochs.size());
  report.best_epoch = best_epoch;
  report.best_val_acc = best_val;
  if (E >= 2) {
    const HeadStack end_stack = head_stack(params);
    report.variance_abs_end = variance_abs(end_stack);
    report.variance_rel_end = variance_rel(end_stack, config.rel_denominator);
  }

  params = std::move(best_params);
  merge_heads(params, config.merge_mode);
  if (E >= 2) {
    const HeadStack best_stack = head_stack(params);
    report.variance_abs_best = variance_abs(best_stack);
    report.variance_rel_best = variance_rel(best_stack, config.rel_denominator);
  }
  report.final_val_acc = accuracy(params, HeadSelector::merged(), val);
  return TrainResult{std::move(params), std::move(report)};
}

namespace {

json config_to_json(const TrainConfig& c) {
  json j;
  j["lambda"] = c.lambda;
  j["variance_mode"] = to_string(c.variance_mode);
  j["rel_denominator"] = c.rel_denominator == RelDenominator::kL1 ? "l1" : "l2";
  j["alternating"] = c.alternating;
  j["warmup_epochs"] = c.warmup_epochs;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["adadelta_rho"] = c.adadelta_rho;
  j["adadelta_eps"] = c.adadelta_eps;
  j["seed"] = c.seed;
  j["merge_mode"] = to_string(c.merge_mode);
  j["objective"] = to_string(c.objective);
  j["hidden_dims"] = c.hidden_dims;
  j["feature_dim"] = c.feature_dim;
  j["activation"] = to_string(c.activation);
  if (c.num_classes) j["num_classes"] = *c.num_classes;
  return j;
}

}  // namespace

std::string report_to_json(const RunReport& report) {
  json j;
  j["version"] = 1;
  j["config"] = config_to_json(report.config);
  j["num_envs"] = report.num_envs;
  j["best_epoch"] = report.best_epoch;
  j["best_val_acc"] = report.best_val_acc;
  j["epochs_run"] = report.epochs_run;
  j["final"] = json{{"val_acc", report.final_val_acc},
                    {"variance_abs_best", report.variance_abs_best},
                    {"variance_rel_best", report.variance_rel_best},
                    {"variance_abs_end", report.variance_abs_end},
                    {"variance_rel_end", report.variance_rel_end}};
  json epochs = json::array();
  for (const auto& e : report.epochs) {
    epochs.push_back(json{{"epoch", e.epoch},
                          {"env_losses", e.env_losses},
                          {"variance", e.variance},
                          {"val_acc", e.val_acc}});
  }
  j["epochs"] = epochs;
  return j.dump(2);
}

std::string report_trace_csv(const RunReport& report) {
  std::string out = "epoch";
  for (int e = 0; e < report.num_envs; ++e) out += ",loss_env" + std::to_string(e);
  out += ",variance,val_acc\n";
  for (const auto& row : report.epochs) {
    out += std::to_string(row.epoch);
    for (double l : row.env_losses) out += "," + json(l).dump();
    out += "," + json(row.variance).dump();
    out += "," + json(row.val_acc).dump();
    out += "\n";
  }
  return out;
}

}  // namespace unshuffle
