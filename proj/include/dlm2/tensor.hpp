#pragma once

// Dense 64-bit tensors with a tape-based reverse-mode differentiation graph.
//
// A Graph records every op in call order; backward() replays the tape in
// reverse. Graphs are meant to live for a single step: build, backward, drop.
// Tensors are reference-counted handles, so a parameter tensor owned by a
// model can appear in many graphs over its lifetime while its grad buffer
// keeps accumulating until zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dlm2 {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(data_); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  // Leading extent of a rank-2 tensor; rank-1 tensors report 1.
  std::size_t rows() const;
  // Trailing extent.
  std::size_t cols() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  // Handle semantics: the grad buffer belongs to the shared storage.
  std::span<double> mutable_grad() const;
  void zero_grad();

  // Independent copy of values (no grad, no graph history).
  Tensor clone(bool requires_grad = false) const;

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

 private:
  friend class Graph;

  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
  };

  explicit Tensor(std::shared_ptr<Storage> data) : data_(std::move(data)) {}

  std::shared_ptr<Storage> data_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Records differentiable ops. A Graph constructed with record = false
// evaluates values only; use it for teacher rows, sampling and evaluation.
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t op_count() const { return ops_.size(); }

  // Elementwise. Shapes must match exactly, or one operand is a scalar.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double factor);
  Tensor add_scalar(const Tensor& a, double offset);
  Tensor neg(const Tensor& a) { return scale(a, -1.0); }
  Tensor log(const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor gelu(const Tensor& a);
  // log(exp(a) + exp(b)) without overflow.
  Tensor log_add_exp(const Tensor& a, const Tensor& b);
  Tensor log_sigmoid(const Tensor& a);

  // Reductions.
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  // [m x n] -> [m]
  Tensor sum_rows(const Tensor& a);
  // [P] -> [segments.size()], summing consecutive runs of the given lengths.
  Tensor segment_sum(const Tensor& a, std::span<const std::size_t> lengths);

  // Linear algebra on rank-2 tensors.
  Tensor matmul(const Tensor& a, const Tensor& b);
  // a [m x k] times transpose(b [n x k]).
  Tensor matmul_nt(const Tensor& a, const Tensor& b);

  // Row-wise log-softmax over the last axis.
  Tensor log_softmax(const Tensor& a, int axis = -1);
  // Softmax of square score blocks along the diagonal, restricted to the
  // lower triangle of each block; entries outside are exactly zero.
  Tensor causal_softmax(const Tensor& scores, std::span<const std::size_t> segments);
  // Per-row standardization (no affine), eps = 1e-5.
  Tensor layer_norm(const Tensor& a);

  // [m x V], indices[m] -> [m], picking a[t, indices[t]].
  Tensor gather(const Tensor& a, std::span<const std::size_t> indices);
  // [r x n], indices[k] -> [k x n]
  Tensor select_rows(const Tensor& a, std::span<const std::size_t> indices);
  // [n] or [1 x n] -> [m x n]
  Tensor repeat_rows(const Tensor& a, std::size_t m);
  Tensor reshape(const Tensor& a, Shape shape);

  // Populates grads of every requires_grad tensor reachable on the tape.
  // Leaf grads accumulate across calls; intermediate grads are recomputed.
  void backward(const Tensor& loss);

 private:
  struct Op {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Tensor make_output(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                     const char* op_name);
  void record(std::vector<Tensor> inputs, const Tensor& output, std::function<void()> backward);

  bool record_;
  std::vector<Op> ops_;
};

void check_finite(std::span<const double> values, const char* what);

}  // namespace dlm2
