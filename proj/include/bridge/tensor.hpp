#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bridge/errors.hpp"

namespace bridge {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense n-dimensional array of 64-bit floats in row-major order.
// `grad` stays empty until a backward pass populates it; when present it has
// exactly the same element count as `data`.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

  static Tensor scalar(double v) {
    Tensor t(Shape{1});
    t.data[0] = v;
    return t;
  }
  static Tensor row(std::vector<double> values) {
    Tensor t;
    t.shape = {1, static_cast<int>(values.size())};
    t.data = std::move(values);
    return t;
  }
  static Tensor vec(std::vector<double> values) {
    Tensor t;
    t.shape = {static_cast<int>(values.size())};
    t.data = std::move(values);
    return t;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // 2-D accessors; callers guarantee rank 2.
  int rows() const { return shape[0]; }
  int cols() const { return shape[1]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  double item() const {
    if (size() != 1) throw ContractError("Tensor::item requires a single-element tensor, got shape " + shape_str(shape));
    return data[0];
  }

  void zero_grad() { grad.clear(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  bool has_grad() const { return grad.size() == data.size(); }
};

// Handle into a Graph's tape.
struct ValueRef {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Dynamic tape rebuilt per forward pass. Operations append nodes in
// topological order by construction; backward() runs the tape in reverse and
// writes gradients back into every bound parameter tensor on the path.
//
// Single-threaded per instance. Parameters bound via param() must outlive the
// graph.
class Graph {
 public:
  // Leaf carrying a value; participates in differentiation iff
  // t.requires_grad, but gradients stay local to the graph (read via grad()).
  ValueRef input(Tensor t);
  // Leaf bound to an external tensor; backward() accumulates into t.grad.
  ValueRef param(Tensor& t);

  ValueRef add(ValueRef a, ValueRef b);
  ValueRef sub(ValueRef a, ValueRef b);
  ValueRef mul(ValueRef a, ValueRef b);
  ValueRef scale(ValueRef x, double c);
  ValueRef add_rowvec(ValueRef x, ValueRef b);  // [m,n] + [n], row broadcast
  ValueRef matmul(ValueRef a, ValueRef b);
  ValueRef transpose(ValueRef x);
  ValueRef gelu(ValueRef x);  // tanh approximation
  ValueRef softmax(ValueRef x, int axis);
  ValueRef layer_norm(ValueRef x, ValueRef gamma, ValueRef beta, double eps);
  ValueRef concat(const std::vector<ValueRef>& xs, int axis);
  ValueRef slice(ValueRef x, int axis, int begin, int end);
  ValueRef linear(ValueRef x, ValueRef w, ValueRef b);
  ValueRef embedding_lookup(ValueRef table, const std::vector<int>& ids);
  ValueRef cross_entropy(ValueRef logits, const std::vector<int>& targets);
  ValueRef bce_with_logits(ValueRef logits, const std::vector<double>& targets);
  ValueRef mse(ValueRef pred, ValueRef target);
  ValueRef mean_rows(ValueRef x);  // [m,n] -> [1,n]
  ValueRef sum_all(ValueRef x);
  ValueRef mean_all(ValueRef x);
  // Masking: replaces entries with -inf before a softmax. At least one
  // unmasked entry per row must remain.
  ValueRef causal_mask(ValueRef scores);
  ValueRef mask_tail_cols(ValueRef scores, int count);

  const Tensor& value(ValueRef v) const;
  // Node-local gradient; valid after backward() for any node on the path.
  const std::vector<double>& grad(ValueRef v) const;

  // Reverse accumulation from a scalar root. d(loss)/d(loss) = 1.
  void backward(ValueRef loss);

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<int> inputs;
    std::function<void(Graph&, int)> back;
    Tensor* bound = nullptr;
    bool needs_grad = false;
  };

  ValueRef push(Node n);
  Node& at(ValueRef v);
  const Node& at(ValueRef v) const;
  bool any_needs_grad(const std::vector<int>& ids) const;
  std::vector<double>& grad_buf(int id);

  std::vector<Node> nodes_;

  friend struct GraphOps;
};

}  // namespace bridge
