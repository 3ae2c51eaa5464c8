#include "unshuffle/datagen.hpp"

#include <stdexcept>
#include <string>

#include "unshuffle/rng.hpp"

namespace unshuffle {

void SpuriousSpec::validate() const {
  if (d_stable < 1) throw std::invalid_argument("spurious spec: d_stable must be >= 1");
  if (d_spur < 1) throw std::invalid_argument("spurious spec: d_spur must be >= 1");
  if (mu_stable <= 0.0) throw std::invalid_argument("spurious spec: mu_stable must be > 0");
  if (mu_spur <= 0.0) throw std::invalid_argument("spurious spec: mu_spur must be > 0");
  if (sigma <= 0.0) throw std::invalid_argument("spurious spec: sigma must be > 0");
  if (env_agreement.size() < 2) {
    throw std::invalid_argument("spurious spec: env_agreement needs at least two environments");
  }
  for (double p : env_agreement) {
    if (p < 0.0 || p > 1.0) {
      throw std::invalid_argument("spurious spec: env_agreement entries must lie in [0,1]");
    }
  }
  if (test_agreement < 0.0 || test_agreement > 1.0) {
    throw std::invalid_argument("spurious spec: test_agreement must lie in [0,1]");
  }
  if (n_per_env < 1) throw std::invalid_argument("spurious spec: n_per_env must be >= 1");
  if (n_val < 1) throw std::invalid_argument("spurious spec: n_val must be >= 1");
  if (n_test < 1) throw std::invalid_argument("spurious spec: n_test must be >= 1");
}

namespace {

Example draw_spurious_example(const SpuriousSpec& spec, double agreement,
                              const std::string& dataset_id, Rng& rng) {
  Example ex;
  ex.y = rng.bernoulli(0.5) ? 1 : 0;
  const double t = ex.y == 1 ? 1.0 : -1.0;
  ex.x.resize(spec.dim());
  for (int i = 0; i < spec.d_stable; ++i) {
    ex.x[i] = t * spec.mu_stable + spec.sigma * rng.normal();
  }
  const double s = rng.bernoulli(agreement) ? 1.0 : -1.0;
  for (int i = 0; i < spec.d_spur; ++i) {
    ex.x[spec.d_stable + i] = s * t * spec.mu_spur + spec.sigma * rng.normal();
  }
  ex.meta.group = s > 0.0 ? "spur+" : "spur-";
  ex.meta.dataset_id = dataset_id;
  return ex;
}

}  // namespace

SpuriousData gen_spurious(const SpuriousSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng root(seed);
  std::vector<std::uint64_t> env_seeds;
  for (std::size_t e = 0; e < spec.env_agreement.size(); ++e) {
    env_seeds.push_back(root.next_seed());
  }
  const std::uint64_t val_seed = root.next_seed();
  const std::uint64_t test_seed = root.next_seed();

  SpuriousData out;
  for (std::size_t e = 0; e < spec.env_agreement.size(); ++e) {
    Rng rng(env_seeds[e]);
    Dataset env;
    env.examples.reserve(static_cast<std::size_t>(spec.n_per_env));
    const std::string id = "env" + std::to_string(e);
    for (int i = 0; i < spec.n_per_env; ++i) {
      env.examples.push_back(draw_spurious_example(spec, spec.env_agreement[e], id, rng));
    }
    out.envs.push_back(std::move(env));
  }
  {
    Rng rng(val_seed);
    out.val.examples.reserve(static_cast<std::size_t>(spec.n_val));
    for (int i = 0; i < spec.n_val; ++i) {
      const auto e = rng.below(spec.env_agreement.size());
      out.val.examples.push_back(
          draw_spurious_example(spec, spec.env_agreement[e], "val", rng));
    }
  }
  {
    Rng rng(test_seed);
    out.ood_test.examples.reserve(static_cast<std::size_t>(spec.n_test));
    for (int i = 0; i < spec.n_test; ++i) {
      out.ood_test.examples.push_back(
          draw_spurious_example(spec, spec.test_agreement, "test", rng));
    }
  }
  return out;
}

void TokenGroupsConfig::validate() const {
  if (n < 1) throw std::invalid_argument("token config: n must be >= 1");
  if (num_groups < 2) throw std::invalid_argument("token config: num_groups must be >= 2");
  if (style_vocab_per_group < 2) {
    throw std::invalid_argument("token config: style_vocab_per_group must be >= 2");
  }
  if (style_tokens_per_example < 1) {
    throw std::invalid_argument("token config: style_tokens_per_example must be >= 1");
  }
  if (style_label_purity < 0.5 || style_label_purity > 1.0) {
    throw std::invalid_argument("token config: style_label_purity must lie in [0.5,1]");
  }
  if (content_noise < 0.0 || content_noise >= 0.5) {
    throw std::invalid_argument("token config: content_noise must lie in [0,0.5)");
  }
  if (group_label_skew < 0.0 || group_label_skew >= 0.5) {
    throw std::invalid_argument("token config: group_label_skew must lie in [0,0.5)");
  }
  if (fraction_with_forms < 0.0 || fraction_with_forms > 1.0) {
    throw std::invalid_argument("token config: fraction_with_forms must lie in [0,1]");
  }
  if (max_forms < 1) throw std::invalid_argument("token config: max_forms must be >= 1");
}

namespace {

std::string style_token_name(int group, int j) {
  return "g" + std::to_string(group) + "_s" + std::to_string(j);
}

int style_token_index(const TokenGroupsConfig& config, int group, int j) {
  return 2 + group * config.style_vocab_per_group + j;
}

// Uniform label-free style bag from a uniformly chosen group.
std::vector<std::pair<int, int>> draw_label_free_style(const TokenGroupsConfig& config,
                                                       Rng& rng) {
  const int group = static_cast<int>(rng.below(static_cast<std::size_t>(config.num_groups)));
  std::vector<std::pair<int, int>> tokens;
  for (int k = 0; k < config.style_tokens_per_example; ++k) {
    tokens.emplace_back(
        group, static_cast<int>(rng.below(static_cast<std::size_t>(config.style_vocab_per_group))));
  }
  return tokens;
}

}  // namespace

Dataset gen_token_groups(const TokenGroupsConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Dataset data;
  data.examples.reserve(static_cast<std::size_t>(config.n));
  const int half = config.style_vocab_per_group / 2;
  for (int i = 0; i < config.n; ++i) {
    Example ex;
    const int group = static_cast<int>(rng.below(static_cast<std::size_t>(config.num_groups)));
    const double p1 = 0.5 + (group % 2 == 0 ? config.group_label_skew : -config.group_label_skew);
    ex.y = rng.bernoulli(p1) ? 1 : 0;
    const int content = rng.bernoulli(config.content_noise) ? 1 - ex.y : ex.y;

    ex.x = Eigen::VectorXd::Zero(config.vocab_size());
    ex.x[content] = 1.0;
    ex.meta.tokens.push_back("content" + std::to_string(content));
    for (int k = 0; k < config.style_tokens_per_example; ++k) {
      const int label_half = rng.bernoulli(config.style_label_purity) ? ex.y : 1 - ex.y;
      const int lo = label_half == 0 ? 0 : half;
      const int hi = label_half == 0 ? half : config.style_vocab_per_group;
      const int j = lo + static_cast<int>(rng.below(static_cast<std::size_t>(hi - lo)));
      ex.x[style_token_index(config, group, j)] = 1.0;
      ex.meta.tokens.push_back(style_token_name(group, j));
    }
    ex.meta.group = "g" + std::to_string(group);

    if (rng.bernoulli(config.fraction_with_forms)) {
      const int n_forms = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(config.max_forms)));
      for (int f = 0; f < n_forms; ++f) {
        Eigen::VectorXd form = Eigen::VectorXd::Zero(config.vocab_size());
        form[content] = 1.0;
        for (const auto& [g, j] : draw_label_free_style(config, rng)) {
          form[style_token_index(config, g, j)] = 1.0;
        }
        ex.meta.forms.push_back(std::move(form));
      }
    }
    data.examples.push_back(std::move(ex));
  }
  return data;
}

Dataset resample_group_style(const Dataset& data, const TokenGroupsConfig& config,
                             std::uint64_t seed) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("resample_group_style: empty dataset");
  if (data.dim() != config.vocab_size()) {
    throw std::invalid_argument("resample_group_style: dataset dimension does not match config");
  }
  Rng rng(seed);
  Dataset out;
  out.examples.reserve(data.size());
  for (const auto& src : data.examples) {
    Example ex;
    ex.y = src.y;
    ex.y_multihot = src.y_multihot;
    ex.multihot = src.multihot;
    ex.meta.group = src.meta.group;
    ex.meta.dataset_id = src.meta.dataset_id;

    ex.x = Eigen::VectorXd::Zero(config.vocab_size());
    for (int c = 0; c < 2; ++c) {
      if (src.x[c] != 0.0) {
        ex.x[c] = 1.0;
        ex.meta.tokens.push_back("content" + std::to_string(c));
      }
    }
    for (const auto& [g, j] : draw_label_free_style(config, rng)) {
      ex.x[style_token_index(config, g, j)] = 1.0;
      ex.meta.tokens.push_back(style_token_name(g, j));
    }
    out.examples.push_back(std::move(ex));
  }
  return out;
}

}  // namespace unshuffle
