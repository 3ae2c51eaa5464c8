#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "unshuffle/dataset.hpp"
#include "unshuffle/model.hpp"

namespace unshuffle {

// Flat per-environment classifier vectors: weights (row-major) then bias.
using HeadStack = std::vector<Eigen::VectorXd>;

enum class VarianceMode { kAbsolute, kRelative };
enum class RelDenominator { kL1, kL2 };

VarianceMode variance_mode_from_string(const std::string& name);
std::string to_string(VarianceMode m);

HeadStack head_stack(const ModelParams& params);

// Writes a flat head vector back into head `e` of params.
void set_head_from_vector(ModelParams& params, int e, const Eigen::VectorXd& v);

Eigen::VectorXd mean_head(const HeadStack& stack);

// (1/E) sum_e ||v_e - mean||^2. Requires E >= 2.
double variance_abs(const HeadStack& stack);

// (1/E) sum_e (||v_e - mean||_2 / ||v_e||_den)^2 with den = L1 by default.
// A head whose denominator norm is <= 1e-12 is an error naming the head.
double variance_rel(const HeadStack& stack, RelDenominator den = RelDenominator::kL1);

// Exact gradients of the selected variance w.r.t. every head vector,
// including the mean's dependence on each head.
std::vector<Eigen::VectorXd> grad_variance(const HeadStack& stack, VarianceMode mode,
                                           RelDenominator den = RelDenominator::kL1);

// Sum over environments of the squared gradient of the environment risk with
// respect to a scalar multiplier on the shared head, at multiplier 1.
// Requires all heads equal (shared-head baseline contract).
double irmv1_penalty(const ModelParams& params, const std::vector<Batch>& env_batches);

// Training-side helper: per-environment scalar risk gradients dL_e/ds, so the
// penalty's parameter gradient can be assembled with a second backward pass.
std::vector<double> irmv1_risk_gradients(const ModelParams& params,
                                         const std::vector<Batch>& env_batches);

}  // namespace unshuffle
