// Copyright 2026 The Deadwood Authors
// SPDX-License-Identifier: Apache-2.0

#include "deadwood/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace dwd {

using detail::Node;

namespace {

std::atomic<std::uint64_t> g_sequence{0};

std::uint64_t next_sequence() { return g_sequence.fetch_add(1, std::memory_order_relaxed) + 1; }

void check_finite(const Array& values, const char* op) {
  if (!values.allFinite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

Tensor record(const char* op, Shape shape, Array value, std::initializer_list<const Tensor*> inputs,
              detail::BackwardFn fn) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = next_sequence();
  node->op = op;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

enum class Broadcast { kSame, kLeftScalar, kRightScalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kRightScalar;
  if (a.size() == 1) return Broadcast::kLeftScalar;
  throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()) + " do not conform");
}

// Adds g to a parent gradient, reducing when the parent was broadcast.
void accumulate(Array* target, const Array& g) {
  if (target == nullptr) return;
  if (target->size() == g.size()) {
    *target += g;
  } else {
    (*target)[0] += g.sum();
  }
}

struct RowLayout {
  Index rows;
  Index cols;
};

RowLayout row_layout(const Tensor& x, const char* op) {
  require_defined(x, op);
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  if (x.rank() == 1) return {1, x.dim(0)};
  throw DimensionError(std::string(op) + " expects rank 1 or 2, got " + shape_string(x.shape()));
}

std::vector<Node*> collect_graph(const Tensor& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  return order;
}

// Reverse sweep over the recorded tape. `relevant` (indexed like `order`)
// restricts which nodes receive gradient.
std::vector<Array> sweep(const std::vector<Node*>& order, const std::vector<char>& relevant) {
  std::unordered_map<const Node*, std::size_t> index;
  index.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) index.emplace(order[i], i);

  std::vector<Array> grads(order.size());
  grads[0] = Array::Ones(order[0]->value.size());
  std::vector<Array*> parent_grads;
  for (std::size_t i = 0; i < order.size(); ++i) {
    Node* n = order[i];
    if (!relevant[i] || grads[i].size() == 0 || !n->backward) continue;
    parent_grads.assign(n->parents.size(), nullptr);
    bool any = false;
    for (std::size_t p = 0; p < n->parents.size(); ++p) {
      const Node* parent = n->parents[p].get();
      if (!parent->requires_grad) continue;
      const std::size_t j = index.at(parent);
      if (!relevant[j]) continue;
      if (grads[j].size() == 0) grads[j] = Array::Zero(parent->value.size());
      parent_grads[p] = &grads[j];
      any = true;
    }
    if (any) n->backward(grads[i], parent_grads);
  }
  return grads;
}

void require_scalar_root(const Tensor& root) {
  require_defined(root, "backward");
  if (root.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) {
    throw ContractError("backward: root does not depend on any tensor requiring grad");
  }
}

}  // namespace

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, Array values, bool requires_grad) {
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  check_finite(values, "tensor construction");
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->seq = next_sequence();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  const Index n = shape_size(shape);
  return Tensor(std::move(shape), Array::Constant(n, value), requires_grad);
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return Tensor(Shape{}, Array::Constant(1, value), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<Scalar> values, bool requires_grad) {
  Array a(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), a.data());
  Shape shape{a.size()};
  return Tensor(std::move(shape), std::move(a), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<Scalar>> rows, bool requires_grad) {
  const Index r = static_cast<Index>(rows.size());
  const Index c = r == 0 ? 0 : static_cast<Index>(rows.begin()->size());
  Array a(r * c);
  Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Index>(row.size()) != c) throw DimensionError("ragged matrix literal");
    for (Scalar v : row) a[i++] = v;
  }
  return Tensor(Shape{r, c}, std::move(a), requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

Index Tensor::dim(Index axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<Index>(s.size())) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

const Array& Tensor::values() const {
  require_defined(*this, "values");
  return node_->value;
}

Scalar Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

ConstMatrixMap Tensor::matrix_view() const {
  const Shape& s = shape();
  if (s.size() == 2) return ConstMatrixMap(node_->value.data(), s[0], s[1]);
  if (s.size() <= 1) return ConstMatrixMap(node_->value.data(), 1, node_->value.size());
  throw DimensionError("matrix_view on tensor of shape " + shape_string(s));
}

Array& Tensor::mutable_values() {
  if (!is_leaf()) throw ContractError("mutable_values() on a non-leaf tensor");
  return node_->value;
}

bool Tensor::requires_grad() const {
  require_defined(*this, "requires_grad");
  return node_->requires_grad;
}

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const {
  require_defined(*this, "is_leaf");
  return !node_->backward;
}

bool Tensor::has_grad() const { return defined() && node_->grad.size() == node_->value.size(); }

const Array& Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined(*this, "zero_grad");
  node_->grad.resize(0);
}

Tensor Tensor::detach() const { return Tensor(shape(), values(), false); }

const char* Tensor::op_name() const {
  require_defined(*this, "op_name");
  return node_->op;
}

// ---------------------------------------------------------------------------
// Differentiation

void backward(const Tensor& root) {
  require_scalar_root(root);
  const std::vector<Node*> order = collect_graph(root);
  const std::vector<char> relevant(order.size(), 1);
  std::vector<Array> grads = sweep(order, relevant);
  for (std::size_t i = 0; i < order.size(); ++i) {
    Node* n = order[i];
    if (n->backward || grads[i].size() == 0) continue;
    if (n->grad.size() != n->value.size()) n->grad = Array::Zero(n->value.size());
    n->grad += grads[i];
  }
}

std::vector<Array> gradients(const Tensor& root, std::span<const Tensor> wrt) {
  require_scalar_root(root);
  std::unordered_set<const Node*> targets;
  for (const Tensor& t : wrt) {
    require_defined(t, "gradients");
    if (!t.requires_grad()) throw ContractError("gradients: target does not require grad");
    targets.insert(t.node().get());
  }
  const std::vector<Node*> order = collect_graph(root);
  std::unordered_map<const Node*, std::size_t> index;
  for (std::size_t i = 0; i < order.size(); ++i) index.emplace(order[i], i);

  // Ascending sequence order: a node is relevant if it is a target or one of
  // its parents is.
  std::vector<char> relevant(order.size(), 0);
  for (std::size_t k = order.size(); k-- > 0;) {
    const Node* n = order[k];
    char r = targets.count(n) ? 1 : 0;
    for (const auto& p : n->parents) {
      auto it = index.find(p.get());
      if (it != index.end() && relevant[it->second]) r = 1;
    }
    relevant[k] = r;
  }
  std::vector<Array> grads = sweep(order, relevant);

  std::vector<Array> out;
  out.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    auto it = index.find(t.node().get());
    if (it == index.end() || grads[it->second].size() == 0) {
      out.push_back(Array::Zero(t.size()));
    } else {
      out.push_back(grads[it->second]);
    }
  }
  return out;
}

Array gradient(const Tensor& root, const Tensor& wrt) {
  return std::move(gradients(root, std::span<const Tensor>(&wrt, 1)).front());
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  const Broadcast kind = broadcast_kind(a, b, "add");
  Array out;
  Shape shape;
  switch (kind) {
    case Broadcast::kSame: out = a.values() + b.values(); shape = a.shape(); break;
    case Broadcast::kRightScalar: out = a.values() + b.values()[0]; shape = a.shape(); break;
    case Broadcast::kLeftScalar: out = b.values() + a.values()[0]; shape = b.shape(); break;
  }
  return record("add", std::move(shape), std::move(out), {&a, &b},
                [](const Array& g, std::span<Array* const> pg) {
                  accumulate(pg[0], g);
                  accumulate(pg[1], g);
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Broadcast kind = broadcast_kind(a, b, "sub");
  Array out;
  Shape shape;
  switch (kind) {
    case Broadcast::kSame: out = a.values() - b.values(); shape = a.shape(); break;
    case Broadcast::kRightScalar: out = a.values() - b.values()[0]; shape = a.shape(); break;
    case Broadcast::kLeftScalar: out = a.values()[0] - b.values(); shape = b.shape(); break;
  }
  return record("sub", std::move(shape), std::move(out), {&a, &b},
                [](const Array& g, std::span<Array* const> pg) {
                  accumulate(pg[0], g);
                  if (pg[1] != nullptr) accumulate(pg[1], (-g).eval());
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast kind = broadcast_kind(a, b, "mul");
  Array out;
  Shape shape;
  switch (kind) {
    case Broadcast::kSame: out = a.values() * b.values(); shape = a.shape(); break;
    case Broadcast::kRightScalar: out = a.values() * b.values()[0]; shape = a.shape(); break;
    case Broadcast::kLeftScalar: out = b.values() * a.values()[0]; shape = b.shape(); break;
  }
  const Node* an = a.node().get();
  const Node* bn = b.node().get();
  return record("mul", std::move(shape), std::move(out), {&a, &b},
                [an, bn, kind](const Array& g, std::span<Array* const> pg) {
                  const Array& av = an->value;
                  const Array& bv = bn->value;
                  if (pg[0] != nullptr) {
                    if (kind == Broadcast::kSame) *pg[0] += g * bv;
                    else if (kind == Broadcast::kRightScalar) *pg[0] += g * bv[0];
                    else (*pg[0])[0] += (g * bv).sum();
                  }
                  if (pg[1] != nullptr) {
                    if (kind == Broadcast::kSame) *pg[1] += g * av;
                    else if (kind == Broadcast::kLeftScalar) *pg[1] += g * av[0];
                    else (*pg[1])[0] += (g * av).sum();
                  }
                });
}

Tensor scale(const Tensor& a, Scalar factor) {
  require_defined(a, "scale");
  return record("scale", a.shape(), a.values() * factor, {&a},
                [factor](const Array& g, std::span<Array* const> pg) { *pg[0] += g * factor; });
}

Tensor add_scalar(const Tensor& a, Scalar value) {
  require_defined(a, "add_scalar");
  return record("add_scalar", a.shape(), a.values() + value, {&a},
                [](const Array& g, std::span<Array* const> pg) { *pg[0] += g; });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  const Node* xn = x.node().get();
  return record("relu", x.shape(), x.values().max(0.0), {&x}, [xn](const Array& g, std::span<Array* const> pg) {
    *pg[0] += (xn->value > 0.0).select(g, 0.0);
  });
}

Tensor square(const Tensor& x) {
  require_defined(x, "square");
  const Node* xn = x.node().get();
  return record("square", x.shape(), x.values().square(), {&x},
                [xn](const Array& g, std::span<Array* const> pg) { *pg[0] += 2.0 * xn->value * g; });
}

Tensor abs(const Tensor& x) {
  require_defined(x, "abs");
  const Node* xn = x.node().get();
  // Subgradient 0 at the kink.
  return record("abs", x.shape(), x.values().abs(), {&x}, [xn](const Array& g, std::span<Array* const> pg) {
    *pg[0] += xn->value.sign() * g;
  });
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  const Node* xn = x.node().get();
  return record("log", x.shape(), x.values().log(), {&x},
                [xn](const Array& g, std::span<Array* const> pg) { *pg[0] += g / xn->value; });
}

// ---------------------------------------------------------------------------
// Reductions and row-wise normalizations

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  return record("sum", Shape{}, Array::Constant(1, x.values().sum()), {&x},
                [](const Array& g, std::span<Array* const> pg) { *pg[0] += g[0]; });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  const Index n = x.size();
  if (n == 0) throw ContractError("mean of empty tensor");
  const Scalar inv = 1.0 / static_cast<Scalar>(n);
  return record("mean", Shape{}, Array::Constant(1, x.values().sum() * inv), {&x},
                [inv](const Array& g, std::span<Array* const> pg) { *pg[0] += g[0] * inv; });
}

Tensor l2norm(const Tensor& x) {
  require_defined(x, "l2norm");
  const Scalar norm = std::sqrt(x.values().square().sum());
  const Node* xn = x.node().get();
  return record("l2norm", Shape{}, Array::Constant(1, norm), {&x},
                [xn, norm](const Array& g, std::span<Array* const> pg) {
                  if (norm > 0.0) *pg[0] += xn->value * (g[0] / norm);
                });
}

Tensor softmax(const Tensor& x) {
  const RowLayout layout = row_layout(x, "softmax");
  ConstMatrixMap in(x.values().data(), layout.rows, layout.cols);
  RowMatrix s = (in.colwise() - in.rowwise().maxCoeff()).array().exp().matrix();
  s.array().colwise() /= s.rowwise().sum().array();
  Array out = Eigen::Map<const Array>(s.data(), s.size());
  Array saved = out;
  return record("softmax", x.shape(), std::move(out), {&x},
                [saved = std::move(saved), layout](const Array& g, std::span<Array* const> pg) {
                  ConstMatrixMap sm(saved.data(), layout.rows, layout.cols);
                  ConstMatrixMap gm(g.data(), layout.rows, layout.cols);
                  const Eigen::VectorXd dot = (gm.array() * sm.array()).rowwise().sum();
                  MatrixMap target(pg[0]->data(), layout.rows, layout.cols);
                  target.array() += sm.array() * (gm.array().colwise() - dot.array());
                });
}

Tensor log_softmax(const Tensor& x) {
  const RowLayout layout = row_layout(x, "log_softmax");
  ConstMatrixMap in(x.values().data(), layout.rows, layout.cols);
  RowMatrix shifted = in.colwise() - in.rowwise().maxCoeff();
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  shifted.colwise() -= lse;
  Array out = Eigen::Map<const Array>(shifted.data(), shifted.size());
  Array probs = out.exp();
  return record("log_softmax", x.shape(), std::move(out), {&x},
                [probs = std::move(probs), layout](const Array& g, std::span<Array* const> pg) {
                  ConstMatrixMap pm(probs.data(), layout.rows, layout.cols);
                  ConstMatrixMap gm(g.data(), layout.rows, layout.cols);
                  const Eigen::VectorXd total = gm.rowwise().sum();
                  MatrixMap target(pg[0]->data(), layout.rows, layout.cols);
                  target.array() += gm.array() - pm.array().colwise() * total.array();
                });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Array out(m * n);
  MatrixMap(out.data(), m, n).noalias() = a.matrix_view() * b.matrix_view();
  const Node* an = a.node().get();
  const Node* bn = b.node().get();
  return record("matmul", Shape{m, n}, std::move(out), {&a, &b},
                [an, bn, m, k, n](const Array& g, std::span<Array* const> pg) {
                  ConstMatrixMap gm(g.data(), m, n);
                  if (pg[0] != nullptr) {
                    MatrixMap(pg[0]->data(), m, k).noalias() += gm * ConstMatrixMap(bn->value.data(), k, n).transpose();
                  }
                  if (pg[1] != nullptr) {
                    MatrixMap(pg[1]->data(), k, n).noalias() += ConstMatrixMap(an->value.data(), m, k).transpose() * gm;
                  }
                });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  if (bias.rank() != 1) throw DimensionError("add_bias: bias must be rank 1");
  if (x.rank() == 2) {
    const Index rows = x.dim(0), cols = x.dim(1);
    if (bias.dim(0) != cols) {
      throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
    }
    Array out(x.size());
    MatrixMap(out.data(), rows, cols) = x.matrix_view().rowwise() + bias.matrix_view().row(0);
    return record("add_bias", x.shape(), std::move(out), {&x, &bias},
                  [rows, cols](const Array& g, std::span<Array* const> pg) {
                    if (pg[0] != nullptr) *pg[0] += g;
                    if (pg[1] != nullptr) {
                      pg[1]->matrix().transpose() += ConstMatrixMap(g.data(), rows, cols).colwise().sum();
                    }
                  });
  }
  if (x.rank() == 4) {
    const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (bias.dim(0) != c) {
      throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
    }
    Array out = x.values();
    for (Index i = 0; i < n; ++i) {
      for (Index ch = 0; ch < c; ++ch) out.segment((i * c + ch) * plane, plane) += bias.values()[ch];
    }
    return record("add_bias", x.shape(), std::move(out), {&x, &bias},
                  [n, c, plane](const Array& g, std::span<Array* const> pg) {
                    if (pg[0] != nullptr) *pg[0] += g;
                    if (pg[1] != nullptr) {
                      for (Index i = 0; i < n; ++i) {
                        for (Index ch = 0; ch < c; ++ch) (*pg[1])[ch] += g.segment((i * c + ch) * plane, plane).sum();
                      }
                    }
                  });
  }
  throw DimensionError("add_bias expects rank 2 or 4 input, got " + shape_string(x.shape()));
}

namespace {

struct ConvGeometry {
  Index batch, channels, height, width;
  Index filters, kh, kw;
  Index out_h, out_w;
  Index patch() const { return channels * kh * kw; }
  Index positions() const { return out_h * out_w; }
};

void im2col(const Scalar* image, const ConvGeometry& g, RowMatrix& cols) {
  cols.resize(g.patch(), g.positions());
  for (Index c = 0; c < g.channels; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const Index row = (c * g.kh + i) * g.kw + j;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Scalar* src = image + (c * g.height + oh + i) * g.width + j;
          Scalar* dst = cols.data() + row * g.positions() + oh * g.out_w;
          for (Index ow = 0; ow < g.out_w; ++ow) dst[ow] = src[ow];
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& cols, const ConvGeometry& g, Scalar* image) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const Index row = (c * g.kh + i) * g.kw + j;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          Scalar* dst = image + (c * g.height + oh + i) * g.width + j;
          const Scalar* src = cols.data() + row * g.positions() + oh * g.out_w;
          for (Index ow = 0; ow < g.out_w; ++ow) dst[ow] += src[ow];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w) {
  require_defined(x, "conv2d");
  require_defined(w, "conv2d");
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d expects rank-4 input and kernel, got " + shape_string(x.shape()) + " and " +
                         shape_string(w.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0};
  if (w.dim(1) != g.channels) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(w.dim(1)) + " channels, input has " +
                         std::to_string(g.channels));
  }
  if (g.kh > g.height || g.kw > g.width) {
    throw DimensionError("conv2d: kernel " + shape_string(w.shape()) + " does not fit input " +
                         shape_string(x.shape()));
  }
  g.out_h = g.height - g.kh + 1;
  g.out_w = g.width - g.kw + 1;

  const Index in_stride = g.channels * g.height * g.width;
  const Index out_stride = g.filters * g.positions();
  Array out(g.batch * out_stride);
  ConstMatrixMap kernel(w.values().data(), g.filters, g.patch());
  RowMatrix cols;
  for (Index n = 0; n < g.batch; ++n) {
    im2col(x.values().data() + n * in_stride, g, cols);
    MatrixMap(out.data() + n * out_stride, g.filters, g.positions()).noalias() = kernel * cols;
  }
  const Node* xn = x.node().get();
  const Node* wn = w.node().get();
  return record("conv2d", Shape{g.batch, g.filters, g.out_h, g.out_w}, std::move(out), {&x, &w},
                [xn, wn, g, in_stride, out_stride](const Array& grad, std::span<Array* const> pg) {
                  ConstMatrixMap kernel(wn->value.data(), g.filters, g.patch());
                  RowMatrix cols;
                  RowMatrix dcols;
                  for (Index n = 0; n < g.batch; ++n) {
                    ConstMatrixMap gout(grad.data() + n * out_stride, g.filters, g.positions());
                    if (pg[1] != nullptr) {
                      im2col(xn->value.data() + n * in_stride, g, cols);
                      MatrixMap(pg[1]->data(), g.filters, g.patch()).noalias() += gout * cols.transpose();
                    }
                    if (pg[0] != nullptr) {
                      dcols.noalias() = kernel.transpose() * gout;
                      col2im_add(dcols, g, pg[0]->data() + n * in_stride);
                    }
                  }
                });
}

Tensor maxpool2d(const Tensor& x, Index kernel) {
  require_defined(x, "maxpool2d");
  if (x.rank() != 4) throw DimensionError("maxpool2d expects rank-4 input, got " + shape_string(x.shape()));
  if (kernel < 1) throw ContractError("maxpool2d: kernel must be positive");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = h / kernel, ow = w / kernel;
  if (oh == 0 || ow == 0) {
    throw DimensionError("maxpool2d: window " + std::to_string(kernel) + " does not fit " + shape_string(x.shape()));
  }
  Array out(n * c * oh * ow);
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Array& in = x.values();
  Index o = 0;
  for (Index plane = 0; plane < n * c; ++plane) {
    const Index base = plane * h * w;
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j, ++o) {
        Index best = base + (i * kernel) * w + j * kernel;
        for (Index di = 0; di < kernel; ++di) {
          for (Index dj = 0; dj < kernel; ++dj) {
            const Index idx = base + (i * kernel + di) * w + j * kernel + dj;
            if (in[idx] > in[best]) best = idx;
          }
        }
        out[o] = in[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return record("maxpool2d", Shape{n, c, oh, ow}, std::move(out), {&x},
                [argmax = std::move(argmax)](const Array& g, std::span<Array* const> pg) {
                  for (std::size_t i = 0; i < argmax.size(); ++i) (*pg[0])[argmax[i]] += g[static_cast<Index>(i)];
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  return record("reshape", std::move(shape), x.values(), {&x},
                [](const Array& g, std::span<Array* const> pg) { *pg[0] += g; });
}

}  // namespace dwd
