#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "unshuffle/datagen.hpp"
#include "unshuffle/partitioning.hpp"

using namespace unshuffle;

namespace {

SpuriousSpec default_spec() {
  SpuriousSpec spec;
  spec.env_agreement = {0.9, 0.8};
  return spec;
}

double label_one_rate(const Dataset& d) {
  int ones = 0;
  for (const auto& ex : d.examples) ones += ex.y;
  return static_cast<double>(ones) / static_cast<double>(d.size());
}

double agreement_rate(const Dataset& d) {
  int agree = 0;
  for (const auto& ex : d.examples) {
    if (*ex.meta.group == "spur+") ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(d.size());
}

// Mean over all stable coordinates of examples with the given label.
std::pair<double, int> stable_mean(const Dataset& d, const SpuriousSpec& spec, int y) {
  double sum = 0.0;
  int count = 0;
  for (const auto& ex : d.examples) {
    if (ex.y != y) continue;
    for (int i = 0; i < spec.d_stable; ++i) {
      sum += ex.x[i];
      ++count;
    }
  }
  return {sum / count, count};
}

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "unshuffle_datagen_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool same_example(const Example& a, const Example& b) {
  if (a.x != b.x || a.y != b.y || a.multihot != b.multihot) return false;
  if (a.meta.group != b.meta.group || a.meta.dataset_id != b.meta.dataset_id) return false;
  if (a.meta.forms.size() != b.meta.forms.size()) return false;
  for (std::size_t f = 0; f < a.meta.forms.size(); ++f) {
    if (a.meta.forms[f] != b.meta.forms[f]) return false;
  }
  return a.meta.tokens == b.meta.tokens;
}

}  // namespace

TEST_CASE("spurious spec validation") {
  CHECK_NOTHROW(default_spec().validate());
  SpuriousSpec s = default_spec();
  s.d_stable = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = default_spec();
  s.mu_spur = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = default_spec();
  s.sigma = -1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = default_spec();
  s.env_agreement = {0.9};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = default_spec();
  s.env_agreement = {0.9, 1.2};
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = default_spec();
  s.test_agreement = -0.1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = default_spec();
  s.n_val = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("gen_spurious shapes, ids, and determinism") {
  SpuriousSpec spec = default_spec();
  spec.n_per_env = 50;
  spec.n_val = 30;
  spec.n_test = 40;
  SpuriousData a = gen_spurious(spec, 7);
  SpuriousData b = gen_spurious(spec, 7);
  SpuriousData c = gen_spurious(spec, 8);

  CHECK(a.envs.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(a.envs[e].size() == 50);
    CHECK(a.envs[e].dim() == spec.dim());
    for (const auto& ex : a.envs[e].examples) {
      CHECK(*ex.meta.dataset_id == "env" + std::to_string(e));
    }
  }
  CHECK(a.val.size() == 30);
  CHECK(*a.val.examples[0].meta.dataset_id == "val");
  CHECK(a.ood_test.size() == 40);
  CHECK(*a.ood_test.examples[0].meta.dataset_id == "test");

  for (std::size_t e = 0; e < 2; ++e) {
    for (std::size_t i = 0; i < 50; ++i) {
      CHECK(same_example(a.envs[e].examples[i], b.envs[e].examples[i]));
    }
  }
  bool any_diff = false;
  for (std::size_t i = 0; i < 50; ++i) {
    if (!same_example(a.envs[0].examples[i], c.envs[0].examples[i])) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("gen_spurious split statistics stay within sampling bounds") {
  SpuriousSpec spec = default_spec();
  spec.n_per_env = 5000;
  spec.n_val = 5000;
  spec.n_test = 5000;
  SpuriousData data = gen_spurious(spec, 17);

  const double n = 5000.0;
  for (const Dataset* d : {&data.envs[0], &data.envs[1], &data.val, &data.ood_test}) {
    CHECK(std::abs(label_one_rate(*d) - 0.5) <= 3.0 / (2.0 * std::sqrt(n)));
  }

  // Per-environment agreement within 3-sigma binomial bounds; the empirical
  // spurious-sign/label correlation is 2p-1 within +/-0.03.
  for (std::size_t e = 0; e < 2; ++e) {
    const double p = spec.env_agreement[e];
    const double rate = agreement_rate(data.envs[e]);
    CHECK(std::abs(rate - p) <= 3.0 * std::sqrt(p * (1.0 - p) / n));
    CHECK(std::abs((2.0 * rate - 1.0) - (2.0 * p - 1.0)) <= 0.03);
  }
  const double t = agreement_rate(data.ood_test);
  CHECK(std::abs(t - spec.test_agreement) <=
        3.0 * std::sqrt(spec.test_agreement * (1.0 - spec.test_agreement) / n));
}

TEST_CASE("stable block law is shared between train and OOD splits") {
  SpuriousSpec spec = default_spec();
  spec.n_per_env = 5000;
  spec.n_test = 5000;
  SpuriousData data = gen_spurious(spec, 13);

  for (int y : {0, 1}) {
    const auto [m_env, n_env] = stable_mean(data.envs[0], spec, y);
    const auto [m_test, n_test] = stable_mean(data.ood_test, spec, y);
    const double expected = (y == 1 ? 1.0 : -1.0) * spec.mu_stable;
    const double bound = 4.0 * spec.sigma * std::sqrt(1.0 / n_env + 1.0 / n_test);
    CHECK(std::abs(m_env - m_test) <= bound);
    CHECK(std::abs(m_env - expected) <= 4.0 * spec.sigma / std::sqrt(static_cast<double>(n_env)));
  }
}

TEST_CASE("stable-only Bayes rule hits the closed-form OOD accuracy") {
  SpuriousSpec spec = default_spec();  // d_stable=5, mu=1, sigma=1
  spec.n_test = 20000;
  SpuriousData data = gen_spurious(spec, 17);

  int correct = 0;
  for (const auto& ex : data.ood_test.examples) {
    double score = 0.0;
    for (int i = 0; i < spec.d_stable; ++i) score += ex.x[i];
    const int pred = score > 0.0 ? 1 : 0;
    if (pred == ex.y) ++correct;
  }
  const double acc = static_cast<double>(correct) / 20000.0;
  const double bayes = phi(std::sqrt(5.0));  // ~0.9873
  CHECK(bayes == doctest::Approx(0.98733).epsilon(1e-3));
  CHECK(std::abs(acc - bayes) <= 0.004);
}

TEST_CASE("full agreement removes the distribution shift") {
  SpuriousSpec spec = default_spec();
  spec.env_agreement = {1.0, 1.0};
  spec.test_agreement = 1.0;
  spec.n_per_env = 100;
  spec.n_val = 50;
  spec.n_test = 100;
  SpuriousData data = gen_spurious(spec, 19);
  for (const Dataset* d : {&data.envs[0], &data.envs[1], &data.val, &data.ood_test}) {
    for (const auto& ex : d->examples) CHECK(*ex.meta.group == "spur+");
  }
}

TEST_CASE("token config validation") {
  CHECK_NOTHROW(TokenGroupsConfig{}.validate());
  TokenGroupsConfig c;
  c.n = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TokenGroupsConfig{};
  c.num_groups = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TokenGroupsConfig{};
  c.style_label_purity = 0.4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TokenGroupsConfig{};
  c.content_noise = 0.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TokenGroupsConfig{};
  c.fraction_with_forms = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TokenGroupsConfig{};
  c.max_forms = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("gen_token_groups structure and determinism") {
  TokenGroupsConfig config;
  config.n = 500;
  Dataset a = gen_token_groups(config, 23);
  Dataset b = gen_token_groups(config, 23);
  CHECK(a.size() == 500);
  CHECK(a.dim() == config.vocab_size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same_example(a.examples[i], b.examples[i]));
  }

  for (const auto& ex : a.examples) {
    CHECK((ex.y == 0 || ex.y == 1));
    REQUIRE(ex.meta.group.has_value());
    const int g = std::stoi(ex.meta.group->substr(1));
    CHECK(g >= 0);
    CHECK(g < config.num_groups);

    // Exactly one content bit, style bits confined to the group's block.
    CHECK(ex.x[0] + ex.x[1] == 1.0);
    int style_bits = 0;
    for (int j = 2; j < config.vocab_size(); ++j) {
      if (ex.x[j] == 0.0) continue;
      ++style_bits;
      const int block = (j - 2) / config.style_vocab_per_group;
      CHECK(block == g);
    }
    CHECK(style_bits >= 1);
    CHECK(style_bits <= config.style_tokens_per_example);
    CHECK(static_cast<int>(ex.meta.tokens.size()) == 1 + config.style_tokens_per_example);
  }
}

TEST_CASE("forms keep the content token, appear at the configured rate") {
  TokenGroupsConfig config;
  config.n = 10000;
  config.fraction_with_forms = 0.174;
  Dataset data = gen_token_groups(config, 29);

  int with_forms = 0;
  for (const auto& ex : data.examples) {
    if (ex.meta.forms.empty()) continue;
    ++with_forms;
    CHECK(ex.meta.forms.size() >= 1);
    CHECK(ex.meta.forms.size() <= static_cast<std::size_t>(config.max_forms));
    const int content = ex.x[0] == 1.0 ? 0 : 1;
    for (const auto& form : ex.meta.forms) {
      CHECK(form.size() == ex.x.size());
      CHECK(form[content] == 1.0);
      CHECK(form[1 - content] == 0.0);
      double style_sum = 0.0;
      for (int j = 2; j < config.vocab_size(); ++j) style_sum += form[j];
      CHECK(style_sum >= 1.0);
      CHECK(style_sum <= config.style_tokens_per_example);
    }
  }
  CHECK(with_forms >= 1740 - 80);
  CHECK(with_forms <= 1740 + 80);
}

TEST_CASE("resample_group_style keeps labels and content, drops forms") {
  TokenGroupsConfig config;
  config.n = 400;
  config.fraction_with_forms = 0.5;
  Dataset data = gen_token_groups(config, 31);
  Dataset resampled = resample_group_style(data, config, 37);
  Dataset again = resample_group_style(data, config, 37);

  CHECK(resampled.size() == data.size());
  bool any_style_change = false;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Example& src = data.examples[i];
    const Example& dst = resampled.examples[i];
    CHECK(dst.y == src.y);
    CHECK(dst.meta.group == src.meta.group);
    CHECK(dst.x[0] == src.x[0]);
    CHECK(dst.x[1] == src.x[1]);
    CHECK(dst.meta.forms.empty());
    if (dst.x != src.x) any_style_change = true;
    CHECK(same_example(dst, again.examples[i]));
  }
  CHECK(any_style_change);

  Dataset wrong = data;
  for (auto& ex : wrong.examples) ex.x = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(static_cast<void>(resample_group_style(wrong, config, 1)),
                  std::invalid_argument);
}

TEST_CASE("clustering the token benchmark recovers the groups") {
  // Long style bags at moderate purity keep each group's two label halves
  // overlapping, so the group signature dominates the shared content tokens.
  TokenGroupsConfig config;
  config.n = 2000;
  config.style_tokens_per_example = 8;
  config.style_label_purity = 0.7;
  Dataset data = gen_token_groups(config, 41);

  std::vector<std::vector<std::string>> token_lists;
  std::vector<int> group_labels;
  for (const auto& ex : data.examples) {
    token_lists.push_back(ex.meta.tokens);
    group_labels.push_back(std::stoi(ex.meta.group->substr(1)));
  }
  const auto [vocab, mat] = bow_vectorize(token_lists, 10);
  // Lloyd iterations only reach a local optimum per start; keep the best of a
  // few restarts before asking for group recovery.
  ClusterAssignment best = kmeans_cosine(mat, config.num_groups, 1);
  for (unsigned seed = 2; seed <= 8; ++seed) {
    ClusterAssignment c = kmeans_cosine(mat, config.num_groups, seed);
    if (c.objective_trace.back() > best.objective_trace.back()) best = std::move(c);
  }
  CHECK(rand_index(best.assignments, group_labels) > 0.8);
}

TEST_CASE("dataset file round-trip is byte-identical") {
  SpuriousSpec spec = default_spec();
  spec.n_per_env = 25;
  spec.n_val = 5;
  spec.n_test = 5;
  SpuriousData gen = gen_spurious(spec, 43);

  TokenGroupsConfig config;
  config.n = 40;
  config.fraction_with_forms = 0.6;
  Dataset tokens = gen_token_groups(config, 47);

  // One multi-hot example exercises the array label path.
  Example mh;
  mh.x = Eigen::VectorXd::Zero(config.vocab_size());
  mh.x[0] = 1.0;
  mh.y_multihot = Eigen::VectorXd::Zero(2);
  mh.y_multihot[1] = 0.25;
  mh.multihot = true;
  tokens.examples.push_back(mh);

  for (const Dataset* d : {&gen.envs[0], &tokens}) {
    const auto p1 = temp_file("roundtrip1.jsonl");
    const auto p2 = temp_file("roundtrip2.jsonl");
    write_dataset(*d, p1.string());
    Dataset back = read_dataset(p1.string());
    write_dataset(back, p2.string());

    std::ifstream f1(p1), f2(p2);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());

    REQUIRE(back.size() == d->size());
    for (std::size_t i = 0; i < d->size(); ++i) {
      CHECK(same_example(back.examples[i], d->examples[i]));
      if (d->examples[i].multihot) CHECK(back.examples[i].y_multihot == d->examples[i].y_multihot);
    }
  }
}

TEST_CASE("read_dataset rejects malformed files with line numbers") {
  const auto bad_json = temp_file("bad_json.jsonl");
  {
    std::ofstream out(bad_json);
    out << R"({"x":[1.0],"y":0})" << "\n";
    out << "{oops\n";
  }
  try {
    static_cast<void>(read_dataset(bad_json.string()));
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  const auto bad_dim = temp_file("bad_dim.jsonl");
  {
    std::ofstream out(bad_dim);
    out << R"({"x":[1.0,2.0,3.0,4.0],"y":0})" << "\n";
    out << R"({"x":[1.0,2.0,3.0],"y":1})" << "\n";
  }
  try {
    static_cast<void>(read_dataset(bad_dim.string()));
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  const auto empty = temp_file("empty.jsonl");
  { std::ofstream out(empty); }
  try {
    static_cast<void>(read_dataset(empty.string()));
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("empty dataset") != std::string::npos);
  }

  CHECK_THROWS_AS(static_cast<void>(read_dataset((temp_file("missing.jsonl")).string() + ".nope")),
                  std::runtime_error);
}
