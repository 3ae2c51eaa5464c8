#include "unshuffle/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "unshuffle/errors.hpp"

namespace unshuffle {

using nlohmann::json;

int Example::label_index() const {
  if (!multihot) return y;
  int best = 0;
  for (int c = 1; c < y_multihot.size(); ++c) {
    if (y_multihot[c] > y_multihot[best]) best = c;
  }
  return best;
}

int Dataset::num_classes() const {
  if (examples.empty()) throw std::runtime_error("num_classes: empty dataset");
  int c = 0;
  for (const auto& ex : examples) {
    if (ex.multihot) {
      c = std::max(c, static_cast<int>(ex.y_multihot.size()));
    } else {
      c = std::max(c, ex.y + 1);
    }
  }
  return std::max(c, 2);  // binary tasks stay two-column even if only class 0 appears
}

void Dataset::validate() const {
  const Eigen::Index d = dim();
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.x.size() != d) {
      throw std::runtime_error("dataset: example " + std::to_string(i) +
                               " has dimension " + std::to_string(ex.x.size()) +
                               ", expected " + std::to_string(d));
    }
    for (const auto& f : ex.meta.forms) {
      if (f.size() != d) {
        throw std::runtime_error("dataset: example " + std::to_string(i) +
                                 " carries a form of dimension " +
                                 std::to_string(f.size()) + ", expected " +
                                 std::to_string(d));
      }
    }
  }
}

int num_classes(const std::vector<const Dataset*>& sets) {
  int c = 0;
  for (const Dataset* d : sets) {
    if (d != nullptr && !d->empty()) c = std::max(c, d->num_classes());
  }
  if (c == 0) throw std::runtime_error("num_classes: no data");
  return c;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices,
                 int num_classes) {
  if (indices.empty()) throw std::runtime_error("make_batch: empty index list");
  const Eigen::Index d = data.dim();
  Batch b;
  b.x.resize(static_cast<Eigen::Index>(indices.size()), d);
  b.targets = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(indices.size()),
                                    num_classes);
  b.labels.resize(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Example& ex = data.examples.at(indices[r]);
    b.x.row(static_cast<Eigen::Index>(r)) = ex.x.transpose();
    if (ex.multihot) {
      if (ex.y_multihot.size() > num_classes) {
        throw std::runtime_error("make_batch: multi-hot label wider than class count");
      }
      b.targets.row(static_cast<Eigen::Index>(r)).head(ex.y_multihot.size()) =
          ex.y_multihot.transpose();
    } else {
      if (ex.y < 0 || ex.y >= num_classes) {
        throw std::runtime_error("make_batch: label " + std::to_string(ex.y) +
                                 " out of range for " + std::to_string(num_classes) +
                                 " classes");
      }
      b.targets(static_cast<Eigen::Index>(r), ex.y) = 1.0;
    }
    b.labels[r] = ex.label_index();
  }
  return b;
}

Batch make_batch(const Dataset& data, int num_classes) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(data, all, num_classes);
}

namespace {

json vector_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd vector_from_json(const json& a, std::size_t line) {
  if (!a.is_array()) {
    throw std::runtime_error("line " + std::to_string(line) + ": expected array");
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].is_number()) {
      throw std::runtime_error("line " + std::to_string(line) +
                               ": non-numeric feature entry");
    }
    v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  }
  return v;
}

}  // namespace

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  Dataset data;
  std::string line;
  std::size_t lineno = 0;
  Eigen::Index dim = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                               ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("x") || !j.contains("y")) {
      throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                               ": expected object with \"x\" and \"y\"");
    }
    Example ex;
    ex.x = vector_from_json(j["x"], lineno);
    if (dim < 0) dim = ex.x.size();
    if (ex.x.size() != dim) {
      throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                               ": dimension " + std::to_string(ex.x.size()) +
                               " inconsistent with " + std::to_string(dim));
    }
    if (j["y"].is_number_integer()) {
      ex.y = j["y"].get<int>();
      ex.multihot = false;
    } else if (j["y"].is_array()) {
      ex.y_multihot = vector_from_json(j["y"], lineno);
      ex.multihot = true;
    } else {
      throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                               ": \"y\" must be an integer or an array");
    }
    if (j.contains("meta")) {
      const json& m = j["meta"];
      if (!m.is_object()) {
        throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                                 ": \"meta\" must be an object");
      }
      if (m.contains("group")) ex.meta.group = m["group"].get<std::string>();
      if (m.contains("dataset_id")) ex.meta.dataset_id = m["dataset_id"].get<std::string>();
      if (m.contains("forms")) {
        for (const auto& f : m["forms"]) {
          Eigen::VectorXd fv = vector_from_json(f, lineno);
          if (fv.size() != dim) {
            throw std::runtime_error(path + ": line " + std::to_string(lineno) +
                                     ": form dimension " + std::to_string(fv.size()) +
                                     " inconsistent with " + std::to_string(dim));
          }
          ex.meta.forms.push_back(std::move(fv));
        }
      }
      if (m.contains("tokens")) {
        for (const auto& t : m["tokens"]) ex.meta.tokens.push_back(t.get<std::string>());
      }
    }
    data.examples.push_back(std::move(ex));
  }
  if (data.empty()) throw std::runtime_error(path + ": empty dataset");
  return data;
}

void write_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  for (const auto& ex : data.examples) {
    json j;
    j["x"] = vector_to_json(ex.x);
    if (ex.multihot) {
      j["y"] = vector_to_json(ex.y_multihot);
    } else {
      j["y"] = ex.y;
    }
    json m = json::object();
    if (ex.meta.group) m["group"] = *ex.meta.group;
    if (ex.meta.dataset_id) m["dataset_id"] = *ex.meta.dataset_id;
    if (!ex.meta.forms.empty()) {
      json fs = json::array();
      for (const auto& f : ex.meta.forms) fs.push_back(vector_to_json(f));
      m["forms"] = fs;
    }
    if (!ex.meta.tokens.empty()) m["tokens"] = ex.meta.tokens;
    if (!m.empty()) j["meta"] = m;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace unshuffle
