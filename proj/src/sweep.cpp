#include "unshuffle/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "unshuffle/eval.hpp"
#include "unshuffle/partitioning.hpp"

namespace unshuffle {

using nlohmann::json;

SweepAxis sweep_axis_from_string(const std::string& name) {
  if (name == "lambda") return SweepAxis::kLambda;
  if (name == "E") return SweepAxis::kE;
  if (name == "K") return SweepAxis::kK;
  throw std::invalid_argument("unknown sweep axis: " + name);
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::kLambda: return "lambda";
    case SweepAxis::kE: return "E";
    default: return "K";
  }
}

void SweepSpec::validate() const {
  if (grid.empty()) throw std::invalid_argument("sweep: grid must be nonempty");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (grid[i] <= grid[i - 1]) {
      throw std::invalid_argument("sweep: grid must be strictly increasing");
    }
  }
  if (repeats < 1) throw std::invalid_argument("sweep: repeats must be >= 1");
  if (axis != SweepAxis::kLambda) {
    for (double v : grid) {
      if (v < 1.0 || v != std::floor(v)) {
        throw std::invalid_argument("sweep: " + to_string(axis) +
                                    " grid values must be positive integers");
      }
    }
  } else {
    for (double v : grid) {
      if (v < 0.0) throw std::invalid_argument("sweep: lambda grid values must be >= 0");
    }
  }
  if (num_envs < 1) throw std::invalid_argument("sweep: num_envs must be >= 1");
  if (min_count < 1) throw std::invalid_argument("sweep: min_count must be >= 1");
  base.validate();
}

namespace {

int thread_cap() {
  const char* raw = std::getenv("UNSHUFFLE_THREADS");
  if (raw == nullptr) return 1;
  const int v = std::atoi(raw);
  return v < 1 ? 1 : v;
}

struct RunOutcome {
  double val_acc = 0.0;
  double ood_acc = 0.0;
  double final_variance = 0.0;
};

RunOutcome run_point_once(const SweepSpec& spec, const std::vector<Dataset>& envs,
                          const Dataset& pooled, const Dataset& val, const Dataset& ood,
                          double axis_value, std::uint64_t run_seed) {
  TrainConfig config = spec.base;
  config.seed = run_seed;

  std::vector<Dataset> run_envs;
  const std::vector<Dataset>* source = &envs;
  if (spec.axis == SweepAxis::kLambda) {
    config.lambda = axis_value;
  } else if (spec.axis == SweepAxis::kE) {
    const int E = static_cast<int>(axis_value);
    run_envs = apply_partition(pooled, partition_random(pooled, E, run_seed));
    source = &run_envs;
  } else {
    const int K = static_cast<int>(axis_value);
    run_envs = apply_partition(
        pooled, partition_by_clustering(pooled, K, spec.num_envs, run_seed, spec.min_count));
    source = &run_envs;
  }

  const TrainResult result = train(config, *source, val);
  RunOutcome out;
  out.val_acc = result.report.final_val_acc;
  out.ood_acc = accuracy(result.params, HeadSelector::merged(), ood);
  out.final_variance = config.variance_mode == VarianceMode::kAbsolute
                           ? result.report.variance_abs_end
                           : result.report.variance_rel_end;
  return out;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace

ComparisonReport sweep(const SweepSpec& spec, const std::vector<Dataset>& envs,
                       const Dataset& val, const Dataset& ood,
                       const std::function<void(const ComparisonRow&)>& on_row) {
  spec.validate();
  if (envs.empty()) throw std::invalid_argument("sweep: no environments");

  Dataset pooled;
  if (spec.axis != SweepAxis::kLambda) {
    for (const auto& env : envs) {
      pooled.examples.insert(pooled.examples.end(), env.examples.begin(), env.examples.end());
    }
  }

  ComparisonReport report;
  report.repeats = spec.repeats;
  report.rows.resize(spec.grid.size());

  auto run_point = [&](std::size_t point) {
    ComparisonRow row;
    row.axis_value = spec.grid[point];
    row.name = to_string(spec.axis) + "=" + json(spec.grid[point]).dump();
    std::vector<double> val_accs, ood_accs, variances;
    try {
      for (int r = 0; r < spec.repeats; ++r) {
        const std::uint64_t run_seed =
            spec.base.seed + static_cast<std::uint64_t>(point) * 1000 +
            static_cast<std::uint64_t>(r);
        const RunOutcome outcome =
            run_point_once(spec, envs, pooled, val, ood, spec.grid[point], run_seed);
        val_accs.push_back(outcome.val_acc);
        ood_accs.push_back(outcome.ood_acc);
        variances.push_back(outcome.final_variance);
      }
      row.runs = spec.repeats;
      row.mean_val_acc = mean_of(val_accs);
      row.std_val_acc = sample_std(val_accs);
      row.mean_ood_acc = mean_of(ood_accs);
      row.std_ood_acc = sample_std(ood_accs);
      row.mean_final_variance = mean_of(variances);
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      row.runs = static_cast<int>(val_accs.size());
    }
    report.rows[point] = std::move(row);
  };

  const std::size_t threads =
      std::min<std::size_t>(static_cast<std::size_t>(thread_cap()), spec.grid.size());
  if (threads <= 1) {
    for (std::size_t point = 0; point < spec.grid.size(); ++point) {
      run_point(point);
      if (on_row) on_row(report.rows[point]);
    }
  } else {
    for (std::size_t start = 0; start < spec.grid.size(); start += threads) {
      const std::size_t end = std::min(start + threads, spec.grid.size());
      std::vector<std::thread> pool;
      for (std::size_t point = start; point < end; ++point) {
        pool.emplace_back(run_point, point);
      }
      for (auto& t : pool) t.join();
      if (on_row) {
        for (std::size_t point = start; point < end; ++point) on_row(report.rows[point]);
      }
    }
  }
  return report;
}

std::string sweep_csv_header() {
  return "axis_value,mean_val_acc,std_val_acc,mean_ood_acc,std_ood_acc,mean_final_variance\n";
}

std::string sweep_csv_row(const ComparisonRow& row, int repeats) {
  std::string out = json(row.axis_value).dump();
  if (row.failed) {
    out += ",,,,,\n";
    return out;
  }
  const bool with_std = repeats >= 2;
  out += "," + json(row.mean_val_acc).dump();
  out += "," + (with_std ? json(row.std_val_acc).dump() : std::string{});
  out += "," + json(row.mean_ood_acc).dump();
  out += "," + (with_std ? json(row.std_ood_acc).dump() : std::string{});
  out += "," + json(row.mean_final_variance).dump();
  out += "\n";
  return out;
}

std::string sweep_csv(const ComparisonReport& report) {
  std::string out = sweep_csv_header();
  for (const auto& row : report.rows) out += sweep_csv_row(row, report.repeats);
  return out;
}

std::string comparison_to_json(const ComparisonReport& report) {
  json rows = json::array();
  for (const auto& row : report.rows) {
    json j;
    j["name"] = row.name;
    j["axis_value"] = row.axis_value;
    j["runs"] = row.runs;
    j["failed"] = row.failed;
    if (row.failed) {
      j["error"] = row.error;
    } else {
      j["mean_val_acc"] = row.mean_val_acc;
      j["mean_ood_acc"] = row.mean_ood_acc;
      j["mean_final_variance"] = row.mean_final_variance;
      if (report.repeats >= 2) {
        j["std_val_acc"] = row.std_val_acc;
        j["std_ood_acc"] = row.std_ood_acc;
      }
    }
    rows.push_back(j);
  }
  json doc;
  doc["repeats"] = report.repeats;
  doc["rows"] = rows;
  return doc.dump(2);
}

}  // namespace unshuffle
