#include "unshuffle/regularizers.hpp"

#include <cmath>
#include <stdexcept>

namespace unshuffle {

namespace {
constexpr double kNormEps = 1e-12;
}

VarianceMode variance_mode_from_string(const std::string& name) {
  if (name == "absolute") return VarianceMode::kAbsolute;
  if (name == "relative") return VarianceMode::kRelative;
  throw std::invalid_argument("unknown variance mode: " + name);
}

std::string to_string(VarianceMode m) {
  return m == VarianceMode::kAbsolute ? "absolute" : "relative";
}

HeadStack head_stack(const ModelParams& params) {
  HeadStack stack;
  stack.reserve(params.heads.size());
  for (const auto& h : params.heads) {
    Eigen::VectorXd v(h.weights.size() + h.bias.size());
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < h.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < h.weights.cols(); ++c) v[k++] = h.weights(r, c);
    }
    for (Eigen::Index i = 0; i < h.bias.size(); ++i) v[k++] = h.bias[i];
    stack.push_back(std::move(v));
  }
  return stack;
}

void set_head_from_vector(ModelParams& params, int e, const Eigen::VectorXd& v) {
  HeadParams& h = params.heads.at(static_cast<std::size_t>(e));
  if (v.size() != h.weights.size() + h.bias.size()) {
    throw std::runtime_error("set_head_from_vector: size mismatch");
  }
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < h.weights.rows(); ++r) {
    for (Eigen::Index c = 0; c < h.weights.cols(); ++c) h.weights(r, c) = v[k++];
  }
  for (Eigen::Index i = 0; i < h.bias.size(); ++i) h.bias[i] = v[k++];
}

namespace {

void check_stack(const HeadStack& stack, int min_envs) {
  if (static_cast<int>(stack.size()) < min_envs) {
    throw std::invalid_argument("head stack needs at least " + std::to_string(min_envs) +
                                " environments, got " + std::to_string(stack.size()));
  }
  for (std::size_t e = 1; e < stack.size(); ++e) {
    if (stack[e].size() != stack[0].size()) {
      throw std::invalid_argument("head stack vectors differ in length");
    }
  }
}

double denom_norm(const Eigen::VectorXd& v, RelDenominator den) {
  return den == RelDenominator::kL1 ? v.lpNorm<1>() : v.norm();
}

}  // namespace

Eigen::VectorXd mean_head(const HeadStack& stack) {
  check_stack(stack, 1);
  Eigen::VectorXd m = Eigen::VectorXd::Zero(stack[0].size());
  for (const auto& v : stack) m += v;
  return m / static_cast<double>(stack.size());
}

double variance_abs(const HeadStack& stack) {
  check_stack(stack, 2);
  const Eigen::VectorXd m = mean_head(stack);
  double total = 0.0;
  for (const auto& v : stack) total += (v - m).squaredNorm();
  return total / static_cast<double>(stack.size());
}

double variance_rel(const HeadStack& stack, RelDenominator den) {
  check_stack(stack, 2);
  const Eigen::VectorXd m = mean_head(stack);
  double total = 0.0;
  for (std::size_t e = 0; e < stack.size(); ++e) {
    const double n = denom_norm(stack[e], den);
    if (n <= kNormEps) {
      throw std::runtime_error("variance_rel: head " + std::to_string(e) +
                               " has norm <= 1e-12");
    }
    const double ratio = (stack[e] - m).norm() / n;
    total += ratio * ratio;
  }
  return total / static_cast<double>(stack.size());
}

std::vector<Eigen::VectorXd> grad_variance(const HeadStack& stack, VarianceMode mode,
                                           RelDenominator den) {
  check_stack(stack, 2);
  const auto E = static_cast<double>(stack.size());
  const Eigen::VectorXd m = mean_head(stack);
  std::vector<Eigen::VectorXd> grads(stack.size());

  if (mode == VarianceMode::kAbsolute) {
    // d/dv_k (1/E) sum_e ||v_e - m||^2 = (2/E)(v_k - m); the mean-dependence
    // terms cancel because sum_e (v_e - m) = 0.
    for (std::size_t k = 0; k < stack.size(); ++k) {
      grads[k] = (2.0 / E) * (stack[k] - m);
    }
    return grads;
  }

  // Relative mode: V = (1/E) sum_e D_e / N_e^2 with D_e = ||v_e - m||^2 and
  // N_e the denominator norm of v_e.
  std::vector<double> norms(stack.size());
  std::vector<Eigen::VectorXd> devs(stack.size());
  Eigen::VectorXd dev_over_n2 = Eigen::VectorXd::Zero(m.size());
  for (std::size_t e = 0; e < stack.size(); ++e) {
    norms[e] = denom_norm(stack[e], den);
    if (norms[e] <= kNormEps) {
      throw std::runtime_error("grad_variance: head " + std::to_string(e) +
                               " has norm <= 1e-12");
    }
    devs[e] = stack[e] - m;
    dev_over_n2 += devs[e] / (norms[e] * norms[e]);
  }
  for (std::size_t k = 0; k < stack.size(); ++k) {
    const double n = norms[k];
    // Deviation term: direct v_k plus the mean's -1/E contribution to every e.
    Eigen::VectorXd g = (2.0 / E) * (devs[k] / (n * n) - dev_over_n2 / E);
    // Norm term: -(2/E) (D_k / N_k^3) * dN_k/dv_k.
    const double dk = devs[k].squaredNorm();
    if (den == RelDenominator::kL1) {
      Eigen::VectorXd sign(stack[k].size());
      for (Eigen::Index i = 0; i < sign.size(); ++i) {
        sign[i] = stack[k][i] > 0.0 ? 1.0 : (stack[k][i] < 0.0 ? -1.0 : 0.0);
      }
      g -= (2.0 / E) * (dk / (n * n * n)) * sign;
    } else {
      g -= (2.0 / E) * (dk / (n * n * n)) * (stack[k] / n);
    }
    grads[k] = std::move(g);
  }
  return grads;
}

namespace {

void check_heads_equal(const ModelParams& params) {
  for (std::size_t e = 1; e < params.heads.size(); ++e) {
    if (params.heads[e].weights != params.heads[0].weights ||
        params.heads[e].bias != params.heads[0].bias) {
      throw std::runtime_error("irmv1: heads must be equal (shared-head baseline)");
    }
  }
}

}  // namespace

std::vector<double> irmv1_risk_gradients(const ModelParams& params,
                                         const std::vector<Batch>& env_batches) {
  check_heads_equal(params);
  std::vector<double> gs;
  gs.reserve(env_batches.size());
  for (std::size_t e = 0; e < env_batches.size(); ++e) {
    const Batch& batch = env_batches[e];
    const Eigen::MatrixXd f = forward_features(params, batch.x);
    const HeadParams& head = params.heads[0];
    const Eigen::MatrixXd z =
        (f * head.weights.transpose()).rowwise() + head.bias.transpose();
    const Eigen::MatrixXd p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    // d/ds mean BCE(sigma(s z), y) at s=1 equals mean over n, C of (p - y) z.
    const double g = ((p - batch.targets).cwiseProduct(z)).sum() /
                     static_cast<double>(z.rows() * z.cols());
    gs.push_back(g);
  }
  return gs;
}

double irmv1_penalty(const ModelParams& params, const std::vector<Batch>& env_batches) {
  double total = 0.0;
  for (double g : irmv1_risk_gradients(params, env_batches)) total += g * g;
  return total;
}

}  // namespace unshuffle
