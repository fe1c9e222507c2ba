#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace svg {

// Shape extents, all positive, row-major layout.
using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Graph;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;
  Graph* graph = nullptr;  // non-owning; null means not recording
  int node = -1;           // producing node id, -1 for leaves and constants
};

void ensure_grad(TensorImpl& t);

}  // namespace detail

/// Dense f64 tensor handle. Copies share storage. Values are immutable once
/// an operation has produced them; only gradient buffers mutate afterwards.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return full({1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  const double* data() const { return impl_->data.data(); }
  const std::vector<double>& values() const { return impl_->data; }
  // Leaves only: parameter initialization, optimizer updates, test probes.
  double* mutable_data() { return impl_->data.data(); }

  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  std::vector<double> grad_or_zeros() const;
  void zero_grad() { impl_->grad.clear(); }

  Graph* graph() const { return impl_->graph; }
  int node() const { return impl_->node; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Reverse-mode tape. Operations executed on tensors attached to a graph are
/// recorded in execution order, which is already a topological order; backward
/// replays it in reverse. A graph is single-use: running backward twice
/// throws instead of silently accumulating.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Fresh leaf owned by this graph.
  Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = true);
  // Adopt an existing tensor (typically a persistent parameter) as a leaf.
  // Clears any stale gradient.
  void attach(Tensor& t, bool requires_grad = true);
  // Release a tensor from this graph again.
  static void detach(Tensor& t);

  void backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  int record(std::vector<int> parents, std::function<void()> backprop);

 private:
  struct Node {
    std::vector<int> parents;
    std::function<void()> backprop;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- Elementwise and shape ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.2);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

// Broadcast a [N] vector across the rows of a [B,N] matrix.
Tensor add_rowvec(const Tensor& mat, const Tensor& vec);
// Broadcast a [C] vector across the channels of a [B,C,H,W] tensor.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(const Tensor& a, const Tensor& b);    // [B,Na]+[B,Nb]
Tensor slice_cols(const Tensor& a, int lo, int hi);      // [B,N] -> [B,hi-lo)
Tensor concat_channels(const Tensor& a, const Tensor& b);  // NCHW, axis 1

// ---- Linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]

// ---- Convolution ----
// Cross-correlation, NCHW input [B,C,H,W] with kernel [F,C,kH,kW].
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride,
              int padding);
// Nearest-neighbour 2x spatial duplication.
Tensor upsample2x(const Tensor& input);

// ---- Reductions ----
Tensor sum(const Tensor& a);  // -> [1]

}  // namespace svg
