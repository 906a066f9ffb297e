// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "glab/core/tensor.hpp"

namespace glab {

// Group tags a parameter may carry.
inline constexpr std::array<std::string_view, 9> kParameterGroups = {
    "encoder", "predictor", "projectors", "xattn", "lora", "heads", "base", "calibrator", "whitening"};

inline bool is_known_group(std::string_view g) {
  return std::find(kParameterGroups.begin(), kParameterGroups.end(), g) != kParameterGroups.end();
}

struct ParameterEntry {
  std::string name;
  Tensor tensor;
  std::string group;
  bool frozen = false;
};

// Named tensors with group tags and freeze flags, in insertion order.
// A frozen tensor has requires_grad off, so no gradient ever reaches it.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor t, const std::string& group, bool frozen = false) {
    if (!is_known_group(group)) throw ContractError("unknown parameter group '" + group + "'");
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    t.set_requires_grad(!frozen);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t), group, frozen});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const ParameterEntry& entry(const std::string& name) const { return entries_.at(lookup(name)); }
  ParameterEntry& entry(const std::string& name) { return entries_.at(lookup(name)); }
  Tensor& get(const std::string& name) { return entry(name).tensor; }
  const Tensor& get(const std::string& name) const { return entry(name).tensor; }

  const std::vector<ParameterEntry>& entries() const { return entries_; }
  std::vector<ParameterEntry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names_in_group(std::string_view group) const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (e.group == group) out.push_back(e.name);
    return out;
  }

  std::map<std::string, std::size_t> group_counts() const {
    std::map<std::string, std::size_t> out;
    for (const auto& e : entries_) ++out[e.group];
    return out;
  }

  void set_frozen(const std::string& name, bool frozen) {
    auto& e = entry(name);
    e.frozen = frozen;
    e.tensor.set_requires_grad(!frozen);
  }

  void set_group_frozen(std::string_view group, bool frozen) {
    if (!is_known_group(group)) throw ContractError("unknown parameter group '" + std::string(group) + "'");
    for (auto& e : entries_) {
      if (e.group != group) continue;
      e.frozen = frozen;
      e.tensor.set_requires_grad(!frozen);
    }
  }

  // Overwrites values in place, keeping shape, group and flags.
  void assign(const std::string& name, std::span<const double> values) {
    auto& t = get(name);
    if (values.size() != t.numel()) {
      throw ShapeError("assign '" + name + "': " + std::to_string(values.size()) + " values for shape " +
                       shape_str(t.shape()));
    }
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  // Deep copy with fresh leaf tensors.
  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.clone_leaf(!e.frozen), e.group, e.frozen);
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return it->second;
  }

  std::vector<ParameterEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace glab
