// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "glab/core/error.hpp"

namespace glab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& checked_mode_flag() {
  thread_local bool enabled = false;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// In checked mode, tensor creation rejects NaN/Inf values.
inline void set_checked_mode(bool on) { detail::checked_mode_flag() = on; }
inline bool checked_mode() { return detail::checked_mode_flag(); }

// Dense row-major f64 tensor of rank 0, 1 or 2 with optional reverse-mode
// gradient tracking. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape.size() > 2) throw ShapeError("tensor rank > 2 is unsupported: " + shape_str(shape));
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
    if (checked_mode()) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
          throw ContractError("non-finite value at flat index " + std::to_string(i));
        }
      }
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), v);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> d,
                       bool requires_grad = false) {
    return from({r, c}, std::move(d), requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->data.size(); }
  // Matrix view: rank 0 is 1x1, rank 1 is 1xn.
  std::size_t rows() const { return rank() == 2 ? n_->shape[0] : 1; }
  std::size_t cols() const {
    if (rank() == 2) return n_->shape[1];
    return rank() == 1 ? n_->shape[0] : 1;
  }

  std::span<const double> data() const { return n_->data; }
  std::span<double> mutable_data() { return n_->data; }
  std::vector<double>& storage() { return n_->data; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return n_->data[0];
  }
  double operator()(std::size_t r, std::size_t c) const { return n_->data[r * cols() + c]; }
  double operator[](std::size_t i) const { return n_->data[i]; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool on) { n_->requires_grad = on; }

  bool has_grad() const { return n_->grad.size() == n_->data.size(); }
  std::span<const double> grad() const { return n_->grad; }
  std::vector<double> grad_or_zeros() const {
    return has_grad() ? n_->grad : std::vector<double>(numel(), 0.0);
  }
  void zero_grad() { n_->grad.clear(); }

  // Leaf copy of the values with no history.
  Tensor detach() const { return from(shape(), n_->data, false); }
  Tensor clone_leaf(bool requires_grad) const { return from(shape(), n_->data, requires_grad); }

  detail::Node* node() const { return n_.get(); }
  const detail::NodePtr& node_ptr() const { return n_; }

  // Reverse-mode sweep from a single-element tensor.
  void backward() const;

 private:
  detail::NodePtr n_;
};

inline void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
  if (!n_->requires_grad) return;
  // Iterative post-order DFS gives a topological order; each node visited once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(n_.get(), 0);
  seen.insert(n_.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  n_->ensure_grad();
  n_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->grad.size() == node->data.size()) node->backward(*node);
  }
}

}  // namespace glab
