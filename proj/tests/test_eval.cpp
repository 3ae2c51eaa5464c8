#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "unshuffle/datagen.hpp"
#include "unshuffle/eval.hpp"
#include "unshuffle/optimizer.hpp"
#include "unshuffle/rng.hpp"
#include "unshuffle/sweep.hpp"

using namespace unshuffle;

namespace {

ModelParams zeroed_model(int input_dim, int feature_dim, int num_classes) {
  ModelParams p = init_params(input_dim, {}, feature_dim, num_classes, 1, 0);
  for (auto& [w, b] : p.extractor.layers) {
    w.setZero();
    b.setZero();
  }
  for (auto& h : p.heads) {
    h.weights.setZero();
    h.bias.setZero();
  }
  return p;
}

Dataset labeled_dataset(const std::vector<int>& labels, double x_value = 1.0) {
  Dataset d;
  for (int y : labels) {
    Example ex;
    ex.x = Eigen::VectorXd::Constant(1, x_value);
    ex.y = y;
    d.examples.push_back(std::move(ex));
  }
  return d;
}

Dataset pool(const std::vector<Dataset>& envs) {
  Dataset out;
  for (const auto& env : envs) {
    out.examples.insert(out.examples.end(), env.examples.begin(), env.examples.end());
  }
  return out;
}

SweepSpec small_sweep_spec() {
  SweepSpec spec;
  spec.axis = SweepAxis::kLambda;
  spec.grid = {0.0, 1.0};
  spec.repeats = 2;
  spec.base.hidden_dims = {4};
  spec.base.feature_dim = 2;
  spec.base.batch_size = 32;
  spec.base.max_epochs = 4;
  spec.base.seed = 100;
  return spec;
}

SpuriousData small_data(std::uint64_t seed) {
  SpuriousSpec spec;
  spec.d_stable = 2;
  spec.d_spur = 2;
  spec.env_agreement = {0.9, 0.8};
  spec.n_per_env = 120;
  spec.n_val = 60;
  spec.n_test = 60;
  return gen_spurious(spec, seed);
}

}  // namespace

TEST_CASE("predict_labels takes the argmax with ties to the lowest class") {
  Eigen::MatrixXd probs(3, 3);
  probs << 0.3, 0.3, 0.1,
           0.2, 0.5, 0.7,
           0.4, 0.9, 0.9;
  CHECK(predict_labels(probs) == std::vector<int>{0, 2, 1});

  // Argmax is invariant under a strictly monotone transform.
  Eigen::MatrixXd squared = probs.array().square().matrix();
  CHECK(predict_labels(squared) == predict_labels(probs));
}

TEST_CASE("a constant majority-class predictor scores the majority rate") {
  ModelParams p = zeroed_model(1, 2, 2);
  p.heads[0].bias << 1.0, -1.0;  // always predicts class 0
  std::vector<int> labels(100, 0);
  for (int i = 70; i < 100; ++i) labels[static_cast<std::size_t>(i)] = 1;
  CHECK(accuracy(p, HeadSelector::env(0), labeled_dataset(labels)) == 70.0);
}

TEST_CASE("a separable rule scores 100") {
  ModelParams p = zeroed_model(1, 2, 2);
  // features = (relu(x), relu(-x)); class1 reads the positive part
  p.extractor.layers[0].first << 1.0, -1.0;
  p.heads[0].weights << 0.0, 1.0,
                        1.0, 0.0;
  Dataset d;
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    Example ex;
    const double x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.5 + rng.u01());
    ex.x = Eigen::VectorXd::Constant(1, x);
    ex.y = x > 0.0 ? 1 : 0;
    d.examples.push_back(std::move(ex));
  }
  CHECK(accuracy(p, HeadSelector::env(0), d) == 100.0);
}

TEST_CASE("an uninformative model on balanced random labels sits near 50") {
  ModelParams p = zeroed_model(1, 2, 2);
  Rng rng(7);
  std::vector<int> labels;
  for (int i = 0; i < 10000; ++i) labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
  const double acc = accuracy(p, HeadSelector::env(0), labeled_dataset(labels));
  CHECK(acc > 48.0);
  CHECK(acc < 52.0);
}

TEST_CASE("accuracy rejects an empty dataset") {
  ModelParams p = zeroed_model(1, 2, 2);
  CHECK_THROWS_AS(static_cast<void>(accuracy(p, HeadSelector::env(0), Dataset{})),
                  std::invalid_argument);
}

TEST_CASE("ensemble of identical models equals the single model") {
  ModelParams p = init_params(3, {4}, 2, 2, 1, 5);
  Rng rng(6);
  Eigen::MatrixXd x(7, 3);
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < 3; ++j) x(i, j) = 2.0 * rng.u01() - 1.0;
  }
  const Eigen::MatrixXd single = forward(p, HeadSelector::env(0), x);
  const Eigen::MatrixXd one = ensemble_predict({&p}, HeadSelector::env(0), x);
  const Eigen::MatrixXd three = ensemble_predict({&p, &p, &p}, HeadSelector::env(0), x);
  CHECK(one == single);
  CHECK((three - single).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("ensemble averages post-logistic outputs") {
  ModelParams a = zeroed_model(1, 2, 1);
  ModelParams b = zeroed_model(1, 2, 1);
  a.heads[0].bias << std::log(0.2 / 0.8);  // sigma = 0.2
  b.heads[0].bias << std::log(0.8 / 0.2);  // sigma = 0.8
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, 1);
  const Eigen::MatrixXd avg = ensemble_predict({&a, &b}, HeadSelector::env(0), x);
  CHECK(avg(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("ensemble rejects incompatible shapes and empty lists") {
  ModelParams a = zeroed_model(1, 2, 2);
  ModelParams b = zeroed_model(2, 2, 2);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, 1);
  CHECK_THROWS_AS(static_cast<void>(ensemble_predict({&a, &b}, HeadSelector::env(0), x)),
                  std::invalid_argument);
  CHECK_THROWS_AS(static_cast<void>(ensemble_predict({}, HeadSelector::env(0), x)),
                  std::invalid_argument);

  ModelParams c = zeroed_model(1, 2, 3);
  CHECK_THROWS_AS(static_cast<void>(ensemble_predict({&a, &c}, HeadSelector::env(0), x)),
                  std::invalid_argument);
}

TEST_CASE("ensemble_accuracy agrees with accuracy for a single model") {
  SpuriousData data = small_data(11);
  TrainConfig cfg;
  cfg.hidden_dims = {4};
  cfg.feature_dim = 2;
  cfg.max_epochs = 3;
  cfg.seed = 1;
  TrainResult r = train(cfg, data.envs, data.val);
  CHECK(ensemble_accuracy({&r.params}, HeadSelector::merged(), data.ood_test) ==
        accuracy(r.params, HeadSelector::merged(), data.ood_test));
}

TEST_CASE("sweep spec validation") {
  SweepSpec spec = small_sweep_spec();
  CHECK_NOTHROW(spec.validate());
  spec.grid = {};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = small_sweep_spec();
  spec.grid = {1.0, 1.0};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = small_sweep_spec();
  spec.grid = {-1.0, 0.0};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = small_sweep_spec();
  spec.axis = SweepAxis::kE;
  spec.grid = {1.5, 2.0};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = small_sweep_spec();
  spec.repeats = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("sweep emits one row per grid point and reruns byte-identically") {
  SpuriousData data = small_data(21);
  SweepSpec spec = small_sweep_spec();

  ComparisonReport a = sweep(spec, data.envs, data.val, data.ood_test);
  ComparisonReport b = sweep(spec, data.envs, data.val, data.ood_test);
  CHECK(a.rows.size() == 2);
  for (const auto& row : a.rows) {
    CHECK_FALSE(row.failed);
    CHECK(row.runs == 2);
    CHECK(row.mean_val_acc >= 0.0);
    CHECK(row.mean_val_acc <= 100.0);
    CHECK(row.mean_ood_acc >= 0.0);
    CHECK(row.mean_ood_acc <= 100.0);
  }
  CHECK(sweep_csv(a) == sweep_csv(b));
  CHECK(comparison_to_json(a) == comparison_to_json(b));

  // Appending a grid point leaves earlier rows untouched.
  SweepSpec wider = spec;
  wider.grid = {0.0, 1.0, 10.0};
  ComparisonReport c = sweep(wider, data.envs, data.val, data.ood_test);
  CHECK(sweep_csv_row(c.rows[0], c.repeats) == sweep_csv_row(a.rows[0], a.repeats));
  CHECK(sweep_csv_row(c.rows[1], c.repeats) == sweep_csv_row(a.rows[1], a.repeats));
}

TEST_CASE("sweep results are independent of the thread cap") {
  SpuriousData data = small_data(23);
  SweepSpec spec = small_sweep_spec();
  ComparisonReport serial = sweep(spec, data.envs, data.val, data.ood_test);
  setenv("UNSHUFFLE_THREADS", "3", 1);
  ComparisonReport parallel = sweep(spec, data.envs, data.val, data.ood_test);
  unsetenv("UNSHUFFLE_THREADS");
  CHECK(sweep_csv(parallel) == sweep_csv(serial));
}

TEST_CASE("an E=1 grid point reproduces a standalone ERM run exactly") {
  SpuriousData data = small_data(25);
  const Dataset pooled = pool(data.envs);

  SweepSpec spec = small_sweep_spec();
  spec.axis = SweepAxis::kE;
  spec.grid = {1.0, 2.0};
  spec.repeats = 1;
  ComparisonReport report = sweep(spec, data.envs, data.val, data.ood_test);

  TrainConfig erm = spec.base;
  erm.objective = Objective::kErm;
  erm.seed = spec.base.seed;  // point 0, repeat 0
  TrainResult r = train(erm, {pooled}, data.val);

  CHECK(report.rows[0].mean_val_acc == r.report.final_val_acc);
  CHECK(report.rows[0].mean_ood_acc == accuracy(r.params, HeadSelector::merged(), data.ood_test));
  CHECK(report.rows[0].mean_final_variance == 0.0);
}

TEST_CASE("repeats=1 leaves the std cells empty") {
  SpuriousData data = small_data(27);
  SweepSpec spec = small_sweep_spec();
  spec.repeats = 1;
  spec.grid = {1.0};
  ComparisonReport report = sweep(spec, data.envs, data.val, data.ood_test);
  const std::string row = sweep_csv_row(report.rows[0], report.repeats);
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : row) {
    if (ch == ',' || ch == '\n') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  REQUIRE(fields.size() == 6);
  CHECK(fields[2].empty());
  CHECK(fields[4].empty());
  CHECK(!fields[1].empty());
  CHECK(!fields[3].empty());
  CHECK(!fields[5].empty());
}

TEST_CASE("a failing grid point is reported and the sweep continues") {
  TokenGroupsConfig config;
  config.n = 40;
  Dataset tokens = gen_token_groups(config, 31);
  Dataset val = tokens;
  Dataset ood = tokens;

  SweepSpec spec;
  spec.axis = SweepAxis::kK;
  spec.grid = {3.0, 50.0};  // K=50 exceeds the 40 points
  spec.repeats = 1;
  spec.num_envs = 2;
  spec.min_count = 1;
  spec.base.hidden_dims = {4};
  spec.base.feature_dim = 2;
  spec.base.max_epochs = 2;
  spec.base.seed = 5;

  ComparisonReport report = sweep(spec, {tokens}, val, ood);
  REQUIRE(report.rows.size() == 2);
  CHECK_FALSE(report.rows[0].failed);
  CHECK(report.rows[1].failed);
  CHECK(!report.rows[1].error.empty());
  const std::string row = sweep_csv_row(report.rows[1], report.repeats);
  CHECK(row == "50.0,,,,,\n");
}

TEST_CASE("on_row fires in grid order as points complete") {
  SpuriousData data = small_data(33);
  SweepSpec spec = small_sweep_spec();
  spec.repeats = 1;
  spec.grid = {0.0, 1.0, 2.0};
  std::vector<double> seen;
  static_cast<void>(sweep(spec, data.envs, data.val, data.ood_test,
                          [&](const ComparisonRow& row) { seen.push_back(row.axis_value); }));
  CHECK(seen == std::vector<double>{0.0, 1.0, 2.0});
}
