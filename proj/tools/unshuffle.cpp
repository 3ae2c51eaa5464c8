#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unshuffle/datagen.hpp"
#include "unshuffle/dataset.hpp"
#include "unshuffle/errors.hpp"
#include "unshuffle/eval.hpp"
#include "unshuffle/model.hpp"
#include "unshuffle/optimizer.hpp"
#include "unshuffle/partitioning.hpp"
#include "unshuffle/sweep.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unshuffle;

namespace {

json load_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config: file not found: " + path);
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: document must be a JSON object");
  return doc;
}

void check_keys(const json& obj, const std::string& where,
                const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items()) {
    if (allowed.find(key) == allowed.end()) {
      throw ConfigError("config: unknown key '" + where + "." + key + "'");
    }
  }
}

const json& require_section(const json& doc, const std::string& name) {
  if (!doc.contains(name)) throw ConfigError("config: missing section '" + name + "'");
  if (!doc[name].is_object()) {
    throw ConfigError("config: section '" + name + "' must be an object");
  }
  return doc[name];
}

double get_num(const json& o, const std::string& where, const std::string& key,
               std::optional<double> def = std::nullopt) {
  if (!o.contains(key)) {
    if (def) return *def;
    throw ConfigError("config: missing field '" + where + "." + key + "'");
  }
  if (!o[key].is_number()) {
    throw ConfigError("config: field '" + where + "." + key + "' must be a number");
  }
  return o[key].get<double>();
}

int get_int(const json& o, const std::string& where, const std::string& key,
            std::optional<int> def = std::nullopt) {
  if (!o.contains(key)) {
    if (def) return *def;
    throw ConfigError("config: missing field '" + where + "." + key + "'");
  }
  if (!o[key].is_number_integer() && !o[key].is_number_unsigned()) {
    throw ConfigError("config: field '" + where + "." + key + "' must be an integer");
  }
  return o[key].get<int>();
}

std::uint64_t get_seed(const json& o, const std::string& where, const std::string& key,
                       std::optional<std::uint64_t> def = std::nullopt) {
  if (!o.contains(key)) {
    if (def) return *def;
    throw ConfigError("config: missing field '" + where + "." + key + "'");
  }
  if (!(o[key].is_number_unsigned() ||
        (o[key].is_number_integer() && o[key].get<long long>() >= 0))) {
    throw ConfigError("config: field '" + where + "." + key +
                      "' must be a non-negative integer");
  }
  return o[key].get<std::uint64_t>();
}

bool get_bool(const json& o, const std::string& where, const std::string& key,
              std::optional<bool> def = std::nullopt) {
  if (!o.contains(key)) {
    if (def) return *def;
    throw ConfigError("config: missing field '" + where + "." + key + "'");
  }
  if (!o[key].is_boolean()) {
    throw ConfigError("config: field '" + where + "." + key + "' must be a boolean");
  }
  return o[key].get<bool>();
}

std::string get_string(const json& o, const std::string& where, const std::string& key,
                       std::optional<std::string> def = std::nullopt) {
  if (!o.contains(key)) {
    if (def) return *def;
    throw ConfigError("config: missing field '" + where + "." + key + "'");
  }
  if (!o[key].is_string()) {
    throw ConfigError("config: field '" + where + "." + key + "' must be a string");
  }
  return o[key].get<std::string>();
}

std::vector<double> get_num_array(const json& o, const std::string& where,
                                  const std::string& key) {
  if (!o.contains(key)) throw ConfigError("config: missing field '" + where + "." + key + "'");
  if (!o[key].is_array()) {
    throw ConfigError("config: field '" + where + "." + key + "' must be an array of numbers");
  }
  std::vector<double> out;
  for (const auto& v : o[key]) {
    if (!v.is_number()) {
      throw ConfigError("config: field '" + where + "." + key + "' must be an array of numbers");
    }
    out.push_back(v.get<double>());
  }
  return out;
}

std::vector<std::string> get_string_array(const json& o, const std::string& where,
                                          const std::string& key) {
  if (!o.contains(key)) throw ConfigError("config: missing field '" + where + "." + key + "'");
  if (!o[key].is_array()) {
    throw ConfigError("config: field '" + where + "." + key + "' must be an array of strings");
  }
  std::vector<std::string> out;
  for (const auto& v : o[key]) {
    if (!v.is_string()) {
      throw ConfigError("config: field '" + where + "." + key + "' must be an array of strings");
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

void require_path_exists(const std::string& path, const std::string& field) {
  if (!fs::exists(path)) {
    throw ConfigError("config: path in '" + field + "' does not exist: " + path);
  }
}

// Section parsers -----------------------------------------------------------

SpuriousSpec parse_spurious_spec(const json& o) {
  const std::string where = "data.spec";
  check_keys(o, where,
             {"d_stable", "d_spur", "mu_stable", "mu_spur", "sigma", "env_agreement",
              "test_agreement", "n_per_env", "n_val", "n_test"});
  SpuriousSpec spec;
  spec.d_stable = get_int(o, where, "d_stable", spec.d_stable);
  spec.d_spur = get_int(o, where, "d_spur", spec.d_spur);
  spec.mu_stable = get_num(o, where, "mu_stable", spec.mu_stable);
  spec.mu_spur = get_num(o, where, "mu_spur", spec.mu_spur);
  spec.sigma = get_num(o, where, "sigma", spec.sigma);
  spec.env_agreement = get_num_array(o, where, "env_agreement");
  spec.test_agreement = get_num(o, where, "test_agreement", spec.test_agreement);
  spec.n_per_env = get_int(o, where, "n_per_env", spec.n_per_env);
  spec.n_val = get_int(o, where, "n_val", spec.n_val);
  spec.n_test = get_int(o, where, "n_test", spec.n_test);
  spec.validate();
  return spec;
}

TokenGroupsConfig parse_token_config(const json& o) {
  const std::string where = "data.spec";
  check_keys(o, where,
             {"n", "num_groups", "style_vocab_per_group", "style_tokens_per_example",
              "style_label_purity", "content_noise", "group_label_skew",
              "fraction_with_forms", "max_forms"});
  TokenGroupsConfig config;
  config.n = get_int(o, where, "n", config.n);
  config.num_groups = get_int(o, where, "num_groups", config.num_groups);
  config.style_vocab_per_group =
      get_int(o, where, "style_vocab_per_group", config.style_vocab_per_group);
  config.style_tokens_per_example =
      get_int(o, where, "style_tokens_per_example", config.style_tokens_per_example);
  config.style_label_purity = get_num(o, where, "style_label_purity", config.style_label_purity);
  config.content_noise = get_num(o, where, "content_noise", config.content_noise);
  config.group_label_skew = get_num(o, where, "group_label_skew", config.group_label_skew);
  config.fraction_with_forms =
      get_num(o, where, "fraction_with_forms", config.fraction_with_forms);
  config.max_forms = get_int(o, where, "max_forms", config.max_forms);
  config.validate();
  return config;
}

TrainConfig parse_train_section(const json& o) {
  const std::string where = "train";
  check_keys(o, where,
             {"lambda", "variance_mode", "rel_denominator", "alternating", "warmup_epochs",
              "batch_size", "max_epochs", "patience", "adadelta_rho", "adadelta_eps",
              "seed", "merge_mode", "objective", "hidden_dims", "feature_dim",
              "activation", "num_classes"});
  TrainConfig c;
  c.lambda = get_num(o, where, "lambda", c.lambda);
  auto parse_enum = [&where](const std::string& key, auto parser, auto fallback,
                             const json& obj) {
    if (!obj.contains(key)) return fallback;
    const std::string raw = obj[key].is_string() ? obj[key].get<std::string>() : std::string{};
    try {
      return parser(raw);
    } catch (const std::invalid_argument&) {
      throw ConfigError("config: field '" + where + "." + key + "' has invalid value '" +
                        raw + "'");
    }
  };
  c.variance_mode = parse_enum("variance_mode", variance_mode_from_string, c.variance_mode, o);
  if (o.contains("rel_denominator")) {
    const std::string raw = get_string(o, where, "rel_denominator");
    if (raw == "l1") {
      c.rel_denominator = RelDenominator::kL1;
    } else if (raw == "l2") {
      c.rel_denominator = RelDenominator::kL2;
    } else {
      throw ConfigError("config: field 'train.rel_denominator' must be \"l1\" or \"l2\"");
    }
  }
  c.alternating = get_bool(o, where, "alternating", c.alternating);
  c.warmup_epochs = get_int(o, where, "warmup_epochs", c.warmup_epochs);
  c.batch_size = get_int(o, where, "batch_size", c.batch_size);
  c.max_epochs = get_int(o, where, "max_epochs", c.max_epochs);
  c.patience = get_int(o, where, "patience", c.patience);
  c.adadelta_rho = get_num(o, where, "adadelta_rho", c.adadelta_rho);
  c.adadelta_eps = get_num(o, where, "adadelta_eps", c.adadelta_eps);
  c.seed = get_seed(o, where, "seed", c.seed);
  c.merge_mode = parse_enum("merge_mode", merge_mode_from_string, c.merge_mode, o);
  c.objective = parse_enum("objective", objective_from_string, c.objective, o);
  if (o.contains("hidden_dims")) {
    c.hidden_dims.clear();
    for (double v : get_num_array(o, where, "hidden_dims")) {
      c.hidden_dims.push_back(static_cast<int>(v));
    }
  }
  c.feature_dim = get_int(o, where, "feature_dim", c.feature_dim);
  c.activation = parse_enum("activation", activation_from_string, c.activation, o);
  if (o.contains("num_classes")) c.num_classes = get_int(o, where, "num_classes");
  c.validate();
  return c;
}

SweepSpec parse_sweep_section(const json& eval_section, const TrainConfig& base) {
  if (!eval_section.contains("sweep") || !eval_section["sweep"].is_object()) {
    throw ConfigError("config: missing section 'eval.sweep'");
  }
  const json& o = eval_section["sweep"];
  const std::string where = "eval.sweep";
  check_keys(o, where, {"axis", "grid", "repeats", "num_envs", "min_count"});
  SweepSpec spec;
  spec.base = base;
  try {
    spec.axis = sweep_axis_from_string(get_string(o, where, "axis"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: field 'eval.sweep.axis': ") + e.what());
  }
  spec.grid = get_num_array(o, where, "grid");
  spec.repeats = get_int(o, where, "repeats", 1);
  spec.num_envs = get_int(o, where, "num_envs", 2);
  spec.min_count = get_int(o, where, "min_count", 10);
  spec.validate();
  return spec;
}

// Output directory helpers ---------------------------------------------------

struct OutDir {
  fs::path dir;
  std::vector<std::string> outputs;

  void write(const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << content;
    outputs.push_back(name);
  }

  void write_dataset_file(const std::string& name, const Dataset& data) {
    write_dataset(data, (dir / name).string());
    outputs.push_back(name);
  }

  void finish(const std::string& command, const json& config_echo, json manifest_extra) {
    write("config.json", config_echo.dump(2) + "\n");
    json manifest = std::move(manifest_extra);
    manifest["command"] = command;
    manifest["outputs"] = outputs;
    manifest["outputs"].push_back("manifest.json");
    write("manifest.json", manifest.dump(2) + "\n");
  }
};

OutDir prepare_outdir(const std::string& path, bool force) {
  fs::path dir(path);
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) {
      throw std::runtime_error("output path is not a directory: " + path);
    }
    if (!fs::is_empty(dir) && !force) {
      throw std::runtime_error("output directory is not empty (use --force): " + path);
    }
  } else {
    fs::create_directories(dir);
  }
  return OutDir{dir, {}};
}

std::string resolve_outdir(const json& doc, const std::string& flag_out) {
  if (!flag_out.empty()) return flag_out;
  if (doc.contains("output")) {
    const json& o = require_section(doc, "output");
    check_keys(o, "output", {"dir"});
    return get_string(o, "output", "dir");
  }
  throw ConfigError("config: missing field 'output.dir' (or pass --out)");
}

// Shared data resolution ------------------------------------------------------

const std::set<std::string> kTopLevelKeys = {"data", "partition", "train",
                                             "eval", "output"};
const std::set<std::string> kDataKeys = {"generator", "spec", "seed",  "train_envs",
                                         "pooled",    "val",  "test"};
const std::set<std::string> kPartitionKeys = {"strategy", "E",         "K",   "key",
                                              "seed",     "min_count", "file"};

Dataset read_dataset_checked(const std::string& path, const std::string& field) {
  require_path_exists(path, field);
  return read_dataset(path);
}

// Environments for train/sweep: explicit per-env files, or a pooled file with
// a partition (precomputed file, a named strategy, or the forms expansion).
std::vector<Dataset> resolve_envs(const json& data, const json* partition) {
  if (data.contains("train_envs")) {
    std::vector<Dataset> envs;
    for (const auto& path : get_string_array(data, "data", "train_envs")) {
      envs.push_back(read_dataset_checked(path, "data.train_envs"));
    }
    if (envs.empty()) throw ConfigError("config: field 'data.train_envs' must be nonempty");
    return envs;
  }
  if (!data.contains("pooled")) {
    throw ConfigError("config: provide 'data.train_envs' or 'data.pooled'");
  }
  const Dataset pooled = read_dataset_checked(get_string(data, "data", "pooled"), "data.pooled");
  if (partition == nullptr) {
    throw ConfigError("config: 'data.pooled' requires a 'partition' section");
  }
  const json& p = *partition;
  if (p.contains("file")) {
    const std::string path = get_string(p, "partition", "file");
    require_path_exists(path, "partition.file");
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return apply_partition(pooled, partition_from_json(text));
  }
  const std::string strategy = get_string(p, "partition", "strategy");
  const std::uint64_t seed = get_seed(p, "partition", "seed", 0);
  if (strategy == "random") {
    return apply_partition(pooled, partition_random(pooled, get_int(p, "partition", "E"), seed));
  }
  if (strategy == "metadata") {
    return apply_partition(
        pooled, partition_by_metadata(pooled, get_string(p, "partition", "key"),
                                      get_int(p, "partition", "E"), seed));
  }
  if (strategy == "clustering") {
    return apply_partition(
        pooled, partition_by_clustering(pooled, get_int(p, "partition", "K"),
                                        get_int(p, "partition", "E"), seed,
                                        get_int(p, "partition", "min_count", 10)));
  }
  if (strategy == "forms") {
    return partition_by_forms(pooled, get_int(p, "partition", "E"));
  }
  throw ConfigError("config: field 'partition.strategy' has invalid value '" + strategy + "'");
}

// Commands --------------------------------------------------------------------

int cmd_gen(const std::string& config_path, const std::string& out, bool force) {
  const json doc = load_config(config_path);
  check_keys(doc, "", kTopLevelKeys);
  const json& data = require_section(doc, "data");
  check_keys(data, "data", kDataKeys);
  const std::string generator = get_string(data, "data", "generator");
  const std::uint64_t seed = get_seed(data, "data", "seed", 0);
  if (!data.contains("spec") || !data["spec"].is_object()) {
    throw ConfigError("config: missing section 'data.spec'");
  }
  const std::string outdir = resolve_outdir(doc, out);

  if (generator == "spurious") {
    const SpuriousSpec spec = parse_spurious_spec(data["spec"]);
    const SpuriousData generated = gen_spurious(spec, seed);
    OutDir o = prepare_outdir(outdir, force);
    json envs = json::array();
    for (std::size_t e = 0; e < generated.envs.size(); ++e) {
      const std::string name = "env" + std::to_string(e) + ".jsonl";
      o.write_dataset_file(name, generated.envs[e]);
      envs.push_back(name);
    }
    o.write_dataset_file("val.jsonl", generated.val);
    o.write_dataset_file("test.jsonl", generated.ood_test);
    o.finish("gen", doc,
             json{{"generator", "spurious"},
                  {"seed", seed},
                  {"envs", envs},
                  {"val", "val.jsonl"},
                  {"test", "test.jsonl"}});
    std::cout << "generated " << generated.envs.size() << " environments of "
              << spec.n_per_env << " examples, val " << spec.n_val << ", test "
              << spec.n_test << " -> " << outdir << "\n";
    return 0;
  }
  if (generator == "token_groups") {
    const TokenGroupsConfig config = parse_token_config(data["spec"]);
    const Dataset generated = gen_token_groups(config, seed);
    OutDir o = prepare_outdir(outdir, force);
    o.write_dataset_file("data.jsonl", generated);
    o.finish("gen", doc,
             json{{"generator", "token_groups"}, {"seed", seed}, {"data", "data.jsonl"}});
    std::cout << "generated " << generated.size() << " examples -> " << outdir << "\n";
    return 0;
  }
  throw ConfigError("config: field 'data.generator' must be \"spurious\" or \"token_groups\"");
}

json label_histograms(const std::vector<Dataset>& envs) {
  int classes = 0;
  for (const auto& env : envs) classes = std::max(classes, env.num_classes());
  json hists = json::array();
  for (const auto& env : envs) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
    for (const auto& ex : env.examples) {
      ++counts[static_cast<std::size_t>(ex.label_index())];
    }
    hists.push_back(counts);
  }
  return hists;
}

int cmd_partition(const std::string& config_path, const std::string& in,
                  const std::string& out, bool force) {
  const json doc = load_config(config_path);
  check_keys(doc, "", kTopLevelKeys);
  const json& p = require_section(doc, "partition");
  check_keys(p, "partition", kPartitionKeys);
  const std::string strategy = get_string(p, "partition", "strategy");
  const std::string outdir = resolve_outdir(doc, out);

  json data = json::object();
  if (doc.contains("data")) {
    data = require_section(doc, "data");
    check_keys(data, "data", kDataKeys);
  }
  auto input_path = [&]() {
    if (!in.empty()) return in;
    return get_string(data, "data", "pooled");
  };

  if (strategy == "dataset_id") {
    std::vector<Dataset> inputs;
    for (const auto& path : get_string_array(data, "data", "train_envs")) {
      inputs.push_back(read_dataset_checked(path, "data.train_envs"));
    }
    const auto [merged, part] = partition_by_dataset_id(inputs);
    OutDir o = prepare_outdir(outdir, force);
    o.write_dataset_file("pooled.jsonl", merged);
    o.write("partition.json", partition_to_json(part) + "\n");
    json summary;
    json sizes = json::array();
    for (const auto& env : part.env_indices) sizes.push_back(env.size());
    summary["env_sizes"] = sizes;
    summary["label_histograms"] = label_histograms(apply_partition(merged, part));
    o.write("summary.json", summary.dump(2) + "\n");
    o.finish("partition", doc, json{{"strategy", strategy}});
    std::cout << "partitioned " << merged.size() << " examples into "
              << part.num_envs() << " environments -> " << outdir << "\n";
    return 0;
  }

  const Dataset pooled = read_dataset_checked(input_path(), "data.pooled");
  if (strategy == "forms") {
    const int E = get_int(p, "partition", "E");
    const std::vector<Dataset> envs = partition_by_forms(pooled, E);
    OutDir o = prepare_outdir(outdir, force);
    json files = json::array();
    for (std::size_t e = 0; e < envs.size(); ++e) {
      const std::string name = "env" + std::to_string(e) + ".jsonl";
      o.write_dataset_file(name, envs[e]);
      files.push_back(name);
    }
    json summary;
    json sizes = json::array();
    for (const auto& env : envs) sizes.push_back(env.size());
    summary["env_sizes"] = sizes;
    summary["label_histograms"] = label_histograms(envs);
    o.write("summary.json", summary.dump(2) + "\n");
    o.finish("partition", doc, json{{"strategy", strategy}, {"envs", files}});
    std::cout << "expanded " << pooled.size() << " examples into " << envs.size()
              << " form environments -> " << outdir << "\n";
    return 0;
  }

  EnvironmentPartition part;
  const std::uint64_t seed = get_seed(p, "partition", "seed", 0);
  if (strategy == "random") {
    part = partition_random(pooled, get_int(p, "partition", "E"), seed);
  } else if (strategy == "metadata") {
    part = partition_by_metadata(pooled, get_string(p, "partition", "key"),
                                 get_int(p, "partition", "E"), seed);
  } else if (strategy == "clustering") {
    part = partition_by_clustering(pooled, get_int(p, "partition", "K"),
                                   get_int(p, "partition", "E"), seed,
                                   get_int(p, "partition", "min_count", 10));
  } else {
    throw ConfigError("config: field 'partition.strategy' has invalid value '" + strategy +
                      "'");
  }

  OutDir o = prepare_outdir(outdir, force);
  o.write("partition.json", partition_to_json(part) + "\n");
  json summary;
  json sizes = json::array();
  for (const auto& env : part.env_indices) sizes.push_back(env.size());
  summary["env_sizes"] = sizes;
  summary["label_histograms"] = label_histograms(apply_partition(pooled, part));
  o.write("summary.json", summary.dump(2) + "\n");
  o.finish("partition", doc, json{{"strategy", strategy}});
  std::cout << "partitioned " << pooled.size() << " examples into " << part.num_envs()
            << " environments -> " << outdir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out, bool force) {
  const json doc = load_config(config_path);
  check_keys(doc, "", kTopLevelKeys);
  const json& data = require_section(doc, "data");
  check_keys(data, "data", kDataKeys);
  const json* partition = nullptr;
  if (doc.contains("partition")) {
    partition = &require_section(doc, "partition");
    check_keys(*partition, "partition", kPartitionKeys);
  }
  const TrainConfig config = parse_train_section(require_section(doc, "train"));
  const std::string outdir = resolve_outdir(doc, out);

  const std::vector<Dataset> envs = resolve_envs(data, partition);
  const Dataset val = read_dataset_checked(get_string(data, "data", "val"), "data.val");
  std::optional<Dataset> test;
  if (data.contains("test")) {
    test = read_dataset_checked(get_string(data, "data", "test"), "data.test");
  }

  const TrainResult result = train(config, envs, val);

  OutDir o = prepare_outdir(outdir, force);
  o.write("model.json", model_to_json(result.params) + "\n");
  o.write("report.json", report_to_json(result.report) + "\n");
  o.write("trace.csv", report_trace_csv(result.report));
  json metrics;
  metrics["val_acc"] = result.report.final_val_acc;
  metrics["best_epoch"] = result.report.best_epoch;
  metrics["epochs_run"] = result.report.epochs_run;
  if (test) {
    metrics["ood_acc"] = accuracy(result.params, HeadSelector::merged(), *test);
  }
  o.write("metrics.json", metrics.dump(2) + "\n");
  o.finish("train", doc, json{{"objective", to_string(config.objective)}});
  std::cout << "val accuracy: " << result.report.final_val_acc << "\n";
  if (test) std::cout << "ood accuracy: " << metrics["ood_acc"].get<double>() << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, std::vector<std::string> model_paths,
             std::string data_path, bool ensemble_flag, const std::string& out,
             bool force) {
  const json doc = load_config(config_path);
  check_keys(doc, "", kTopLevelKeys);
  bool ensemble = ensemble_flag;
  if (doc.contains("eval")) {
    const json& e = require_section(doc, "eval");
    check_keys(e, "eval", {"models", "data", "ensemble", "sweep"});
    if (model_paths.empty() && e.contains("models")) {
      model_paths = get_string_array(e, "eval", "models");
    }
    if (data_path.empty() && e.contains("data")) {
      data_path = get_string(e, "eval", "data");
    }
    if (!ensemble_flag && e.contains("ensemble")) {
      ensemble = get_bool(e, "eval", "ensemble");
    }
  }
  if (data_path.empty() && doc.contains("data")) {
    const json& data = require_section(doc, "data");
    check_keys(data, "data", kDataKeys);
    if (data.contains("test")) data_path = get_string(data, "data", "test");
  }
  if (model_paths.empty()) {
    throw ConfigError("config: no models given (field 'eval.models' or --model)");
  }
  if (data_path.empty()) {
    throw ConfigError("config: no dataset given (field 'eval.data', 'data.test', or --data)");
  }
  for (const auto& path : model_paths) require_path_exists(path, "eval.models");
  const Dataset data = read_dataset_checked(data_path, "eval.data");

  std::vector<ModelParams> models;
  for (const auto& path : model_paths) models.push_back(load_model(path));
  std::vector<const ModelParams*> pointers;
  for (const auto& m : models) pointers.push_back(&m);

  json metrics;
  metrics["n_models"] = models.size();
  metrics["ensemble"] = ensemble;
  metrics["data"] = data_path;
  if (ensemble) {
    const double acc = ensemble_accuracy(pointers, HeadSelector::merged(), data);
    metrics["accuracy"] = acc;
    std::cout << "ensemble accuracy: " << acc << "\n";
  } else {
    json accs = json::array();
    for (const auto* m : pointers) {
      accs.push_back(accuracy(*m, HeadSelector::merged(), data));
    }
    metrics["accuracy"] = accs;
    std::cout << "accuracy:";
    for (const auto& a : accs) std::cout << " " << a.get<double>();
    std::cout << "\n";
  }

  std::string outdir;
  if (!out.empty() || doc.contains("output")) outdir = resolve_outdir(doc, out);
  if (!outdir.empty()) {
    OutDir o = prepare_outdir(outdir, force);
    o.write("metrics.json", metrics.dump(2) + "\n");
    o.finish("eval", doc, json::object());
  }
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out, bool force) {
  const json doc = load_config(config_path);
  check_keys(doc, "", kTopLevelKeys);
  const json& data = require_section(doc, "data");
  check_keys(data, "data", kDataKeys);
  const json* partition = nullptr;
  if (doc.contains("partition")) {
    partition = &require_section(doc, "partition");
    check_keys(*partition, "partition", kPartitionKeys);
  }
  TrainConfig base;
  if (doc.contains("train")) base = parse_train_section(require_section(doc, "train"));
  const SweepSpec spec = parse_sweep_section(require_section(doc, "eval"), base);
  const std::string outdir = resolve_outdir(doc, out);

  const std::vector<Dataset> envs = resolve_envs(data, partition);
  const Dataset val = read_dataset_checked(get_string(data, "data", "val"), "data.val");
  const Dataset test = read_dataset_checked(get_string(data, "data", "test"), "data.test");

  OutDir o = prepare_outdir(outdir, force);
  const fs::path csv_path = o.dir / "sweep.csv";
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  csv << sweep_csv_header();
  csv.flush();

  const ComparisonReport report =
      sweep(spec, envs, val, test, [&](const ComparisonRow& row) {
        csv << sweep_csv_row(row, spec.repeats);
        csv.flush();
        if (row.failed) {
          std::cout << row.name << ": failed (" << row.error << ")\n";
        } else {
          std::cout << row.name << ": val " << row.mean_val_acc << ", ood "
                    << row.mean_ood_acc << "\n";
        }
      });
  csv.close();
  o.outputs.push_back("sweep.csv");
  o.write("report.json", comparison_to_json(report) + "\n");
  o.finish("sweep", doc, json{{"axis", to_string(spec.axis)}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-environment training with head-variance regularization"};
  app.require_subcommand(1);

  std::string config_path, out, in, data_path;
  std::vector<std::string> model_paths;
  bool force = false, ensemble = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON")->required();
    cmd->add_option("--out", out, "output directory (overrides output.dir)");
    cmd->add_flag("--force", force, "allow writing into a non-empty output directory");
  };

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic benchmark");
  add_common(gen);
  CLI::App* partition = app.add_subcommand("partition", "partition a dataset into environments");
  add_common(partition);
  partition->add_option("--in", in, "input dataset (overrides data.pooled)");
  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd);
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate saved models");
  add_common(eval_cmd);
  eval_cmd->add_option("--model", model_paths, "model file (repeatable)");
  eval_cmd->add_option("--data", data_path, "dataset to evaluate on");
  eval_cmd->add_flag("--ensemble", ensemble, "average predictions across models");
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "run a hyperparameter sweep");
  add_common(sweep_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(config_path, out, force);
    if (partition->parsed()) return cmd_partition(config_path, in, out, force);
    if (train_cmd->parsed()) return cmd_train(config_path, out, force);
    if (eval_cmd->parsed()) {
      return cmd_eval(config_path, model_paths, data_path, ensemble, out, force);
    }
    if (sweep_cmd->parsed()) return cmd_sweep(config_path, out, force);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
