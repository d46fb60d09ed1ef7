// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with tape-ordered reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage and graph node.
// Every operation whose inputs require gradients records a node stamped with
// a monotonically increasing sequence number; backward() replays those nodes
// in reverse construction order, visiting each exactly once.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dwd {

using Scalar = double;
using Index = Eigen::Index;
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using Shape = std::vector<Index>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// parent_grads[i] is null when parent i takes no part in the current pass.
using BackwardFn = std::function<void(const Array& out_grad, std::span<Array* const> parent_grads)>;

struct Node {
  Shape shape;
  Array value;
  bool requires_grad = false;
  Array grad;  // leaves only; accumulated across backward() calls
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  std::uint64_t seq = 0;
  const char* op = "leaf";
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Array values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);
  static Tensor vector(std::initializer_list<Scalar> values, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  Index rank() const { return static_cast<Index>(shape().size()); }
  Index dim(Index axis) const;
  Index size() const { return values().size(); }

  const Array& values() const;
  Scalar item() const;
  Scalar operator[](Index i) const { return values()[i]; }

  // Row-major view of a rank-2 tensor (rank-1 is viewed as a single row).
  ConstMatrixMap matrix_view() const;

  // In-place access for optimizers and masking; leaves only.
  Array& mutable_values();

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  const Array& grad() const;
  void zero_grad();

  // Fresh leaf holding a copy of the values, cut from any graph.
  Tensor detach() const;

  const char* op_name() const;

  // Internal: graph access for the differentiation engine.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
void backward(const Tensor& root);

// Gradients of a scalar root with respect to the given tensors only. Nothing
// is accumulated into leaf grad buffers, so this is safe to call on graphs
// whose parameter leaves are shared with other threads.
std::vector<Array> gradients(const Tensor& root, std::span<const Tensor> wrt);
Array gradient(const Tensor& root, const Tensor& wrt);

// Elementwise arithmetic. Operands must share a shape, or one of them must
// hold a single element (scalar broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar factor);
Tensor add_scalar(const Tensor& a, Scalar value);

Tensor matmul(const Tensor& a, const Tensor& b);

// x: N x M with bias M (per-row), or N x C x H x W with bias C (per-channel).
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor log(const Tensor& x);

// Row-wise over the last axis of a rank-2 tensor (rank-1 is one row).
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor l2norm(const Tensor& x);

// Valid (unpadded) stride-1 convolution: x N x C x H x W, w O x C x KH x KW.
Tensor conv2d(const Tensor& x, const Tensor& w);
// Non-overlapping max pooling with window == stride == kernel; trailing
// rows/columns that do not fill a window are dropped.
Tensor maxpool2d(const Tensor& x, Index kernel);

Tensor reshape(const Tensor& x, Shape shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }
inline Tensor operator*(const Tensor& a, Scalar s) { return scale(a, s); }
inline Tensor operator*(Scalar s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, Scalar s) { return add_scalar(a, s); }
inline Tensor operator+(Scalar s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, Scalar s) { return add_scalar(a, -s); }
inline Tensor operator-(Scalar s, const Tensor& a) { return add_scalar(scale(a, -1.0), s); }

}  // namespace dwd
