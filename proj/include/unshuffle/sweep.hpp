#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "unshuffle/dataset.hpp"
#include "unshuffle/optimizer.hpp"

namespace unshuffle {

// lambda: train the given environments at each penalty weight.
// E: repartition the pooled data into E random environments per point.
// K: cluster the pooled data's tokens into K clusters dealt into num_envs.
enum class SweepAxis { kLambda, kE, kK };

SweepAxis sweep_axis_from_string(const std::string& name);
std::string to_string(SweepAxis a);

struct SweepSpec {
  SweepAxis axis = SweepAxis::kLambda;
  std::vector<double> grid;  // nonempty, strictly increasing; E/K values integral
  int repeats = 1;           // seeds per grid point
  TrainConfig base;          // base.seed is the sweep's base seed
  int num_envs = 2;          // environment count used by the K axis
  int min_count = 10;        // BoW threshold used by the K axis

  void validate() const;
};

struct ComparisonRow {
  std::string name;
  double axis_value = 0.0;
  int runs = 0;        // successful runs aggregated below
  bool failed = false;  // true when any run of the point aborted
  std::string error;
  double mean_val_acc = 0.0;
  double std_val_acc = 0.0;
  double mean_ood_acc = 0.0;
  double std_ood_acc = 0.0;
  double mean_final_variance = 0.0;  // configured-mode head variance at the end of training
};

struct ComparisonReport {
  std::vector<ComparisonRow> rows;
  int repeats = 1;
};

// Runs repeats x |grid| trainings with seeds base.seed + point*1000 + repeat,
// in grid order; rows for aborted points are kept, marked failed. on_row fires
// in grid order as points complete. UNSHUFFLE_THREADS caps parallelism
// (default 1); results are independent of the thread count.
ComparisonReport sweep(const SweepSpec& spec, const std::vector<Dataset>& envs,
                       const Dataset& val, const Dataset& ood,
                       const std::function<void(const ComparisonRow&)>& on_row = {});

// axis_value,mean_val_acc,std_val_acc,mean_ood_acc,std_ood_acc,mean_final_variance
// with empty stat cells for failed points and empty std cells when repeats = 1.
std::string sweep_csv_header();
std::string sweep_csv_row(const ComparisonRow& row, int repeats);
std::string sweep_csv(const ComparisonReport& report);

std::string comparison_to_json(const ComparisonReport& report);

}  // namespace unshuffle
