#pragma once

#include <map>
#include <string>

#include "rimae/tensor.hpp"

#include <json.hpp>

namespace rimae {

// Flat, name-ordered parameter tree. Dotted names encode the hierarchy
// (e.g. "enc.block0.attn.wq"); lexicographic order makes every traversal
// deterministic.
struct ParamTree {
  std::map<std::string, Tensor> params;

  Tensor& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ArgumentError("parameter not found: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ArgumentError("parameter not found: " + name);
    return it->second;
  }

  void add(const std::string& name, Tensor t) {
    if (params.count(name)) throw ArgumentError("duplicate parameter: " + name);
    params.emplace(name, std::move(t));
  }

  bool has(const std::string& name) const { return params.count(name) != 0; }

  Index total_size() const {
    Index n = 0;
    for (const auto& [_, t] : params) n += t.size();
    return n;
  }

  // Deep copy; `grads` controls whether copies participate in autodiff.
  ParamTree clone(bool grads) const {
    ParamTree out;
    for (const auto& [name, t] : params) {
      Tensor c(t.shape(), t.raw());
      c.set_requires_grad(grads);
      out.params.emplace(name, std::move(c));
    }
    return out;
  }

  // Overwrite values in-place from a structurally identical tree.
  void copy_values_from(const ParamTree& other) {
    if (params.size() != other.params.size()) throw ArgumentError("parameter tree structure mismatch");
    auto it = params.begin();
    auto jt = other.params.begin();
    for (; it != params.end(); ++it, ++jt) {
      if (it->first != jt->first || it->second.shape() != jt->second.shape())
        throw ArgumentError("parameter tree structure mismatch at " + it->first);
      it->second.raw() = jt->second.raw();
    }
  }

  void zero_grads() {
    for (auto& [_, t] : params)
      if (t.has_grad()) t.zero_grad();
  }

  // Copy every entry of `tree` into this one under `prefix.`.
  void merge(const std::string& prefix, const ParamTree& tree) {
    for (const auto& [name, t] : tree.params) add(prefix + "." + name, t);
  }

  // Sub-tree of entries under `prefix.`, names stripped. Tensors are shared.
  ParamTree extract(const std::string& prefix) const {
    ParamTree out;
    const std::string p = prefix + ".";
    for (const auto& [name, t] : params)
      if (name.rfind(p, 0) == 0) out.params.emplace(name.substr(p.size()), t);
    return out;
  }
};

// Single-file checkpoint: "RIMP" magic, a JSON manifest (config, step, RNG
// state), then each parameter as name + shape + little-endian f64 buffer.
void save_checkpoint(const std::string& path, const ParamTree& flat, const nlohmann::json& manifest);
std::pair<ParamTree, nlohmann::json> load_checkpoint(const std::string& path);

}  // namespace rimae
