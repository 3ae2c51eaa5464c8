#include "unshuffle/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "unshuffle/rng.hpp"

namespace unshuffle {

using nlohmann::json;

namespace {
constexpr double kProbClamp = 1e-7;
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation: " + name);
}

std::string to_string(Activation a) {
  return a == Activation::kRelu ? "relu" : "tanh";
}

ModelParams init_params(int input_dim, const std::vector<int>& hidden_dims,
                        int feature_dim, int num_classes, int num_envs,
                        std::uint64_t seed) {
  if (input_dim <= 0) throw std::invalid_argument("init_params: input_dim must be >= 1");
  if (feature_dim <= 0) throw std::invalid_argument("init_params: feature_dim must be >= 1");
  if (num_classes <= 0) throw std::invalid_argument("init_params: num_classes must be >= 1");
  if (num_envs <= 0) throw std::invalid_argument("init_params: num_envs must be >= 1");
  for (int h : hidden_dims) {
    if (h <= 0) throw std::invalid_argument("init_params: hidden dims must be >= 1");
  }

  Rng rng(seed);
  auto uniform_layer = [&rng](int out, int in) {
    const double a = std::sqrt(6.0 / (in + out));
    Eigen::MatrixXd w(out, in);
    for (int r = 0; r < out; ++r) {
      for (int c = 0; c < in; ++c) w(r, c) = (2.0 * rng.u01() - 1.0) * a;
    }
    return w;
  };

  ModelParams p;
  p.extractor.input_dim = input_dim;
  p.extractor.hidden_dims = hidden_dims;
  p.extractor.feature_dim = feature_dim;
  int in = input_dim;
  for (int h : hidden_dims) {
    p.extractor.layers.emplace_back(uniform_layer(h, in), Eigen::VectorXd::Zero(h));
    in = h;
  }
  p.extractor.layers.emplace_back(uniform_layer(feature_dim, in),
                                  Eigen::VectorXd::Zero(feature_dim));

  HeadParams head;
  head.weights = uniform_layer(num_classes, feature_dim);
  head.bias = Eigen::VectorXd::Zero(num_classes);
  for (int e = 0; e < num_envs; ++e) {
    HeadParams h = head;
    h.env_id = e;
    p.heads.push_back(std::move(h));
  }
  return p;
}

namespace {

Eigen::MatrixXd apply_activation(const Eigen::MatrixXd& z, Activation a) {
  if (a == Activation::kRelu) return z.cwiseMax(0.0);
  return z.array().tanh().matrix();
}

Eigen::MatrixXd activation_derivative(const Eigen::MatrixXd& pre,
                                      const Eigen::MatrixXd& post, Activation a) {
  if (a == Activation::kRelu) {
    return (pre.array() > 0.0).cast<double>().matrix();
  }
  return (1.0 - post.array().square()).matrix();
}

const HeadParams& select_head(const ModelParams& params, const HeadSelector& sel) {
  if (sel.is_merged()) {
    if (!params.merged) {
      throw std::runtime_error("forward: merged head requested before merge_heads");
    }
    return *params.merged;
  }
  if (sel.index >= params.num_envs()) {
    throw std::runtime_error("forward: head index " + std::to_string(sel.index) +
                             " out of range for " + std::to_string(params.num_envs()) +
                             " environments");
  }
  return params.heads.at(static_cast<std::size_t>(sel.index));
}

Eigen::MatrixXd logistic(const Eigen::MatrixXd& z) {
  return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

}  // namespace

Eigen::MatrixXd forward_features(const ModelParams& params, const Eigen::MatrixXd& x) {
  if (x.cols() != params.extractor.input_dim) {
    throw std::runtime_error("forward: input dimension " + std::to_string(x.cols()) +
                             " does not match extractor input " +
                             std::to_string(params.extractor.input_dim));
  }
  Eigen::MatrixXd h = x;
  for (const auto& [w, b] : params.extractor.layers) {
    h = ((h * w.transpose()).rowwise() + b.transpose());
    h = apply_activation(h, params.extractor.activation);
  }
  return h;
}

Eigen::MatrixXd forward(const ModelParams& params, const HeadSelector& sel,
                        const Eigen::MatrixXd& x) {
  const HeadParams& head = select_head(params, sel);
  const Eigen::MatrixXd f = forward_features(params, x);
  return logistic((f * head.weights.transpose()).rowwise() + head.bias.transpose());
}

double loss_bce(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& targets) {
  if (probs.rows() != targets.rows() || probs.cols() != targets.cols()) {
    throw std::runtime_error("loss_bce: probs " + std::to_string(probs.rows()) + "x" +
                             std::to_string(probs.cols()) + " vs targets " +
                             std::to_string(targets.rows()) + "x" +
                             std::to_string(targets.cols()));
  }
  const auto p = probs.array().min(1.0 - kProbClamp).max(kProbClamp);
  const auto y = targets.array();
  const double total = -(y * p.log() + (1.0 - y) * (1.0 - p).log()).sum();
  return total / static_cast<double>(probs.rows() * probs.cols());
}

ForwardCache forward_cached(const ModelParams& params, int env, const Eigen::MatrixXd& x) {
  ForwardCache cache;
  Eigen::MatrixXd h = x;
  for (const auto& [w, b] : params.extractor.layers) {
    Eigen::MatrixXd pre = (h * w.transpose()).rowwise() + b.transpose();
    h = apply_activation(pre, params.extractor.activation);
    cache.pre.push_back(std::move(pre));
    cache.post.push_back(h);
  }
  const HeadParams& head = params.heads.at(static_cast<std::size_t>(env));
  cache.probs = logistic((h * head.weights.transpose()).rowwise() + head.bias.transpose());
  return cache;
}

ModelGrads backprop(const ModelParams& params, int env, const Eigen::MatrixXd& x,
                    const ForwardCache& cache, const Eigen::MatrixXd& dlogits) {
  const HeadParams& head = params.heads.at(static_cast<std::size_t>(env));
  const Eigen::MatrixXd& features = cache.post.back();

  ModelGrads g;
  g.env = env;
  g.head_weights = dlogits.transpose() * features;
  g.head_bias = dlogits.colwise().sum().transpose();

  Eigen::MatrixXd delta = dlogits * head.weights;  // d loss / d features
  const auto& layers = params.extractor.layers;
  g.layers.resize(layers.size());
  for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
    delta = delta.cwiseProduct(
        activation_derivative(cache.pre[static_cast<std::size_t>(i)],
                              cache.post[static_cast<std::size_t>(i)],
                              params.extractor.activation));
    const Eigen::MatrixXd& input =
        i == 0 ? x : cache.post[static_cast<std::size_t>(i - 1)];
    g.layers[static_cast<std::size_t>(i)].first = delta.transpose() * input;
    g.layers[static_cast<std::size_t>(i)].second = delta.colwise().sum().transpose();
    if (i > 0) delta = delta * layers[static_cast<std::size_t>(i)].first;
  }
  return g;
}

ModelGrads grad_model(const ModelParams& params, int env, const Batch& batch) {
  if (env < 0 || env >= params.num_envs()) {
    throw std::runtime_error("grad_model: invalid env index " + std::to_string(env));
  }
  ForwardCache cache = forward_cached(params, env, batch.x);
  const double scale =
      1.0 / static_cast<double>(cache.probs.rows() * cache.probs.cols());
  const Eigen::MatrixXd dlogits = (cache.probs - batch.targets) * scale;
  return backprop(params, env, batch.x, cache, dlogits);
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& a) {
  if (!a.is_array() || a.empty()) throw std::runtime_error("model JSON: expected matrix");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(a.size()),
                    static_cast<Eigen::Index>(a[0].size()));
  for (std::size_t r = 0; r < a.size(); ++r) {
    if (a[r].size() != static_cast<std::size_t>(m.cols())) {
      throw std::runtime_error("model JSON: ragged matrix");
    }
    for (std::size_t c = 0; c < a[r].size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a[r][c].get<double>();
    }
  }
  return m;
}

json vec_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd vec_from_json(const json& a) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

json head_to_json(const HeadParams& h) {
  return json{{"weights", matrix_to_json(h.weights)},
              {"bias", vec_to_json(h.bias)},
              {"env_id", h.env_id}};
}

HeadParams head_from_json(const json& j) {
  HeadParams h;
  h.weights = matrix_from_json(j.at("weights"));
  h.bias = vec_from_json(j.at("bias"));
  h.env_id = j.at("env_id").get<int>();
  return h;
}

}  // namespace

std::string model_to_json(const ModelParams& params) {
  json j;
  j["version"] = 1;
  json layers = json::array();
  for (const auto& [w, b] : params.extractor.layers) {
    layers.push_back(json{{"weights", matrix_to_json(w)}, {"bias", vec_to_json(b)}});
  }
  j["extractor"] = json{{"layers", layers},
                        {"activation", to_string(params.extractor.activation)},
                        {"input_dim", params.extractor.input_dim},
                        {"hidden_dims", params.extractor.hidden_dims},
                        {"feature_dim", params.extractor.feature_dim}};
  json heads = json::array();
  for (const auto& h : params.heads) heads.push_back(head_to_json(h));
  j["heads"] = heads;
  j["merged"] = params.merged ? head_to_json(*params.merged) : json(nullptr);
  return j.dump(2);
}

ModelParams model_from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.at("version").get<int>() != 1) {
    throw std::runtime_error("model JSON: unsupported version");
  }
  ModelParams p;
  const json& ex = j.at("extractor");
  for (const auto& layer : ex.at("layers")) {
    p.extractor.layers.emplace_back(matrix_from_json(layer.at("weights")),
                                    vec_from_json(layer.at("bias")));
  }
  p.extractor.activation = activation_from_string(ex.at("activation").get<std::string>());
  p.extractor.input_dim = ex.at("input_dim").get<int>();
  p.extractor.hidden_dims = ex.at("hidden_dims").get<std::vector<int>>();
  p.extractor.feature_dim = ex.at("feature_dim").get<int>();
  for (const auto& h : j.at("heads")) p.heads.push_back(head_from_json(h));
  if (!j.at("merged").is_null()) p.merged = head_from_json(j.at("merged"));
  return p;
}

void save_model(const ModelParams& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model file: " + path);
  out << model_to_json(params) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

ModelParams load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str());
}

}  // namespace unshuffle
