#pragma once

#include <cstdint>
#include <vector>

#include "unshuffle/dataset.hpp"

namespace unshuffle {

// Two-block Gaussian benchmark: a stable block whose class separation is the
// same everywhere, and a spurious block whose sign agrees with the label with
// a per-environment probability that drops at test time.
struct SpuriousSpec {
  int d_stable = 5;
  int d_spur = 5;
  double mu_stable = 1.0;
  double mu_spur = 1.0;
  double sigma = 1.0;
  std::vector<double> env_agreement;  // p_e per training environment, E >= 2
  double test_agreement = 0.1;
  int n_per_env = 2000;
  int n_val = 1000;
  int n_test = 5000;

  void validate() const;
  int dim() const { return d_stable + d_spur; }
};

struct SpuriousData {
  std::vector<Dataset> envs;
  Dataset val;  // pooled training mixture
  Dataset ood_test;
};

// y ~ Bernoulli(0.5); stable coords (2y-1) mu_stable + N(0, sigma^2); spurious
// coords s (2y-1) mu_spur + N(0, sigma^2) with s = +1 w.p. the split's
// agreement. meta: group = "spur+"/"spur-", dataset_id = "env<e>"/"val"/"test".
SpuriousData gen_spurious(const SpuriousSpec& spec, std::uint64_t seed);

// Token-bag benchmark: G groups with private style vocabularies, one content
// token carrying the label, style tokens drawn from the label's half of the
// group vocabulary with probability style_label_purity (spurious), and a
// group-dependent label prior. A fraction of examples carry alternative forms
// that keep the content token but resample the style tokens label-free.
struct TokenGroupsConfig {
  int n = 1000;
  int num_groups = 6;
  int style_vocab_per_group = 24;
  int style_tokens_per_example = 4;
  double style_label_purity = 0.85;
  double content_noise = 0.12;     // probability the content token flips
  double group_label_skew = 0.05;  // label prior 0.5 +/- skew by group parity
  double fraction_with_forms = 0.174;
  int max_forms = 3;  // form counts uniform in {1..max_forms}

  void validate() const;
  // Multi-hot layout: [content0, content1, g0 styles..., g1 styles...].
  int vocab_size() const { return 2 + num_groups * style_vocab_per_group; }
};

Dataset gen_token_groups(const TokenGroupsConfig& config, std::uint64_t seed);

// Label-free rewrite of every example: keeps the label and content token,
// resamples the style tokens from a uniformly chosen group's vocabulary, and
// drops forms. Turns the style signal uninformative while content survives.
Dataset resample_group_style(const Dataset& data, const TokenGroupsConfig& config,
                             std::uint64_t seed);

}  // namespace unshuffle
