#include "svg/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace svg {

using MatrixR =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatrixR>;
using ConstMapR = Eigen::Map<const MatrixR>;

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

void ensure_grad(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
}

}  // namespace detail

namespace {

using detail::TensorImpl;
using detail::ensure_grad;

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw std::invalid_argument("tensor data length " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  for (int e : shape)
    if (e <= 0)
      throw std::invalid_argument("non-positive extent in shape " +
                                  shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

// Gathers the recording context of an op: which graph (if any) the inputs
// live on and which recorded nodes feed it.
struct OpCtx {
  Graph* graph = nullptr;
  bool requires = false;
  std::vector<int> parents;

  void scan(const Tensor& t) {
    Graph* g = t.graph();
    if (g) {
      if (graph && graph != g)
        throw std::logic_error("operation mixes tensors from two graphs");
      graph = g;
      requires = requires || t.requires_grad();
      if (t.node() >= 0) parents.push_back(t.node());
    }
  }

  bool recording() const { return graph != nullptr && requires; }

  void finish(Tensor& out, std::function<void()> backprop) {
    if (!recording()) return;
    auto impl = out.impl();
    impl->graph = graph;
    impl->requires_grad = true;
    impl->node = graph->record(std::move(parents), std::move(backprop));
  }
};

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

void axpy(std::vector<double>& y, const std::vector<double>& x, double a) {
  for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfdx_from_xy) {
  std::vector<double> out(a.numel());
  const double* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = fwd(pa[i]);
  Tensor r = Tensor::from_data(a.shape(), std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  if (ctx.recording()) {
    auto ai = a.impl();
    auto oi = r.impl();
    ctx.finish(r, [ai, oi, dfdx_from_xy] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ensure_grad(*ai);
      for (size_t i = 0; i < ai->data.size(); ++i)
        ai->grad[i] += dfdx_from_xy(ai->data[i], oi->data[i]) * oi->grad[i];
    });
  }
  return r;
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  return wrap(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 0.0);
  return from_data(std::move(shape), std::move(d));
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), value);
  return from_data(std::move(shape), std::move(d));
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

double Tensor::item() const {
  if (numel() != 1)
    throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty())
    throw std::logic_error("gradient requested but never populated");
  return impl_->grad;
}

std::vector<double> Tensor::grad_or_zeros() const {
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

// ---- Graph ----

Tensor Graph::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  Tensor t = Tensor::from_data(std::move(shape), std::move(data));
  attach(t, requires_grad);
  return t;
}

void Graph::attach(Tensor& t, bool requires_grad) {
  auto impl = t.impl();
  impl->graph = this;
  impl->node = -1;
  impl->requires_grad = requires_grad;
  impl->grad.clear();
}

void Graph::detach(Tensor& t) {
  auto impl = t.impl();
  impl->graph = nullptr;
  impl->node = -1;
}

int Graph::record(std::vector<int> parents, std::function<void()> backprop) {
  if (consumed_)
    throw std::logic_error("recording onto a graph that was already consumed");
  nodes_.push_back({std::move(parents), std::move(backprop)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward on a consumed graph");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got " +
                                shape_str(loss.shape()));
  if (loss.graph() != this)
    throw std::logic_error("loss does not belong to this graph");
  consumed_ = true;

  auto li = loss.impl();
  ensure_grad(*li);
  li->grad[0] = 1.0;
  if (li->node < 0) return;  // loss is a bare leaf

  // Execution order is a topological order, so a reverse sweep over the
  // nodes reachable from the loss visits each exactly once.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack{li->node};
  reachable[static_cast<size_t>(li->node)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : nodes_[static_cast<size_t>(id)].parents) {
      if (!reachable[static_cast<size_t>(p)]) {
        reachable[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }
  for (int id = li->node; id >= 0; --id)
    if (reachable[static_cast<size_t>(id)]) nodes_[static_cast<size_t>(id)].backprop();
}

// ---- Elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  const double *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] + pb[i];
  Tensor r = Tensor::from_data(a.shape(), std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  ctx.scan(b);
  if (ctx.recording()) {
    auto ai = a.impl(), bi = b.impl(), oi = r.impl();
    ctx.finish(r, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        axpy(ai->grad, oi->grad, 1.0);
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        axpy(bi->grad, oi->grad, 1.0);
      }
    });
  }
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  const double *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] - pb[i];
  Tensor r = Tensor::from_data(a.shape(), std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  ctx.scan(b);
  if (ctx.recording()) {
    auto ai = a.impl(), bi = b.impl(), oi = r.impl();
    ctx.finish(r, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        axpy(ai->grad, oi->grad, 1.0);
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        axpy(bi->grad, oi->grad, -1.0);
      }
    });
  }
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  const double *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] * pb[i];
  Tensor r = Tensor::from_data(a.shape(), std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  ctx.scan(b);
  if (ctx.recording()) {
    auto ai = a.impl(), bi = b.impl(), oi = r.impl();
    ctx.finish(r, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (size_t i = 0; i < ai->grad.size(); ++i)
          ai->grad[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (size_t i = 0; i < bi->grad.size(); ++i)
          bi->grad[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return r;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  const double *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] / pb[i];
  Tensor r = Tensor::from_data(a.shape(), std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  ctx.scan(b);
  if (ctx.recording()) {
    auto ai = a.impl(), bi = b.impl(), oi = r.impl();
    ctx.finish(r, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (size_t i = 0; i < ai->grad.size(); ++i)
          ai->grad[i] += oi->grad[i] / bi->data[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (size_t i = 0; i < bi->grad.size(); ++i)
          bi->grad[i] -= oi->grad[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
      }
    });
  }
  return r;
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_op(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

// ---- Broadcasts ----

Tensor add_rowvec(const Tensor& mat, const Tensor& vec) {
  if (mat.ndim() != 2 || vec.ndim() != 1 || mat.dim(1) != vec.dim(0))
    throw std::invalid_argument("add_rowvec: shape mismatch " +
                                shape_str(mat.shape()) + " vs " +
                                shape_str(vec.shape()));
  const int rows = mat.dim(0), cols = mat.dim(1);
  std::vector<double> out(mat.numel());
  const double *pm = mat.data(), *pv = vec.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r * cols + c] = pm[r * cols + c] + pv[c];
  Tensor r = Tensor::from_data(mat.shape(), std::move(out));
  OpCtx ctx;
  ctx.scan(mat);
  ctx.scan(vec);
  if (ctx.recording()) {
    auto mi = mat.impl(), vi = vec.impl(), oi = r.impl();
    ctx.finish(r, [mi, vi, oi, rows, cols] {
      if (oi->grad.empty()) return;
      if (mi->requires_grad) {
        ensure_grad(*mi);
        axpy(mi->grad, oi->grad, 1.0);
      }
      if (vi->requires_grad) {
        ensure_grad(*vi);
        for (int rr = 0; rr < rows; ++rr)
          for (int c = 0; c < cols; ++c) vi->grad[c] += oi->grad[rr * cols + c];
      }
    });
  }
  return r;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 4 || bias.ndim() != 1 || x.dim(1) != bias.dim(0))
    throw std::invalid_argument("add_channel_bias: shape mismatch " +
                                shape_str(x.shape()) + " vs " +
                                shape_str(bias.shape()));
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(x.numel());
  const double *px = x.data(), *pb = bias.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double bc = pb[c];
      const int64_t base = (static_cast<int64_t>(b) * C + c) * HW;
      for (int i = 0; i < HW; ++i) out[base + i] = px[base + i] + bc;
    }
  Tensor r = Tensor::from_data(x.shape(), std::move(out));
  OpCtx ctx;
  ctx.scan(x);
  ctx.scan(bias);
  if (ctx.recording()) {
    auto xi = x.impl(), bi = bias.impl(), oi = r.impl();
    ctx.finish(r, [xi, bi, oi, B, C, HW] {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        ensure_grad(*xi);
        axpy(xi->grad, oi->grad, 1.0);
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const int64_t base = (static_cast<int64_t>(b) * C + c) * HW;
            double acc = 0.0;
            for (int i = 0; i < HW; ++i) acc += oi->grad[base + i];
            bi->grad[c] += acc;
          }
      }
    });
  }
  return r;
}

// ---- Shape ops ----

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " +
                                shape_str(shape) + " changes element count");
  Tensor r = Tensor::from_data(std::move(shape), a.values());
  OpCtx ctx;
  ctx.scan(a);
  if (ctx.recording()) {
    auto ai = a.impl(), oi = r.impl();
    ctx.finish(r, [ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ensure_grad(*ai);
      axpy(ai->grad, oi->grad, 1.0);
    });
  }
  return r;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<double> out(static_cast<size_t>(rows) * (ca + cb));
  const double *pa = a.data(), *pb = b.data();
  for (int r = 0; r < rows; ++r) {
    std::memcpy(&out[static_cast<size_t>(r) * (ca + cb)], pa + static_cast<size_t>(r) * ca,
                sizeof(double) * static_cast<size_t>(ca));
    std::memcpy(&out[static_cast<size_t>(r) * (ca + cb) + ca], pb + static_cast<size_t>(r) * cb,
                sizeof(double) * static_cast<size_t>(cb));
  }
  Tensor r = Tensor::from_data({rows, ca + cb}, std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  ctx.scan(b);
  if (ctx.recording()) {
    auto ai = a.impl(), bi = b.impl(), oi = r.impl();
    ctx.finish(r, [ai, bi, oi, rows, ca, cb] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (int rr = 0; rr < rows; ++rr)
          for (int c = 0; c < ca; ++c)
            ai->grad[static_cast<size_t>(rr) * ca + c] +=
                oi->grad[static_cast<size_t>(rr) * (ca + cb) + c];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (int rr = 0; rr < rows; ++rr)
          for (int c = 0; c < cb; ++c)
            bi->grad[static_cast<size_t>(rr) * cb + c] +=
                oi->grad[static_cast<size_t>(rr) * (ca + cb) + ca + c];
      }
    });
  }
  return r;
}

Tensor slice_cols(const Tensor& a, int lo, int hi) {
  if (a.ndim() != 2 || lo < 0 || hi > a.dim(1) || lo >= hi)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(lo) +
                                "," + std::to_string(hi) + ") for " +
                                shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1), w = hi - lo;
  std::vector<double> out(static_cast<size_t>(rows) * w);
  const double* pa = a.data();
  for (int r = 0; r < rows; ++r)
    std::memcpy(&out[static_cast<size_t>(r) * w],
                pa + static_cast<size_t>(r) * cols + lo,
                sizeof(double) * static_cast<size_t>(w));
  Tensor r = Tensor::from_data({rows, w}, std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  if (ctx.recording()) {
    auto ai = a.impl(), oi = r.impl();
    ctx.finish(r, [ai, oi, rows, cols, lo, w] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ensure_grad(*ai);
      for (int rr = 0; rr < rows; ++rr)
        for (int c = 0; c < w; ++c)
          ai->grad[static_cast<size_t>(rr) * cols + lo + c] +=
              oi->grad[static_cast<size_t>(rr) * w + c];
    });
  }
  return r;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 4 || b.ndim() != 4 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  std::vector<double> out(static_cast<size_t>(B) * (Ca + Cb) * HW);
  const double *pa = a.data(), *pb = b.data();
  for (int bb = 0; bb < B; ++bb) {
    std::memcpy(&out[static_cast<size_t>(bb) * (Ca + Cb) * HW],
                pa + static_cast<size_t>(bb) * Ca * HW,
                sizeof(double) * static_cast<size_t>(Ca) * HW);
    std::memcpy(&out[static_cast<size_t>(bb) * (Ca + Cb) * HW + static_cast<size_t>(Ca) * HW],
                pb + static_cast<size_t>(bb) * Cb * HW,
                sizeof(double) * static_cast<size_t>(Cb) * HW);
  }
  Tensor r = Tensor::from_data({B, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  ctx.scan(b);
  if (ctx.recording()) {
    auto ai = a.impl(), bi = b.impl(), oi = r.impl();
    ctx.finish(r, [ai, bi, oi, B, Ca, Cb, HW] {
      if (oi->grad.empty()) return;
      const size_t stride = static_cast<size_t>(Ca + Cb) * HW;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (int bb = 0; bb < B; ++bb)
          for (size_t i = 0; i < static_cast<size_t>(Ca) * HW; ++i)
            ai->grad[static_cast<size_t>(bb) * Ca * HW + i] +=
                oi->grad[bb * stride + i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (int bb = 0; bb < B; ++bb)
          for (size_t i = 0; i < static_cast<size_t>(Cb) * HW; ++i)
            bi->grad[static_cast<size_t>(bb) * Cb * HW + i] +=
                oi->grad[bb * stride + static_cast<size_t>(Ca) * HW + i];
      }
    });
  }
  return r;
}

// ---- Matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  {
    ConstMapR A(a.data(), m, k), B(b.data(), k, n);
    MapR O(out.data(), m, n);
    O.noalias() = A * B;
  }
  Tensor r = Tensor::from_data({m, n}, std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  ctx.scan(b);
  if (ctx.recording()) {
    auto ai = a.impl(), bi = b.impl(), oi = r.impl();
    ctx.finish(r, [ai, bi, oi, m, k, n] {
      if (oi->grad.empty()) return;
      ConstMapR G(oi->grad.data(), m, n);
      if (ai->requires_grad) {
        ensure_grad(*ai);
        ConstMapR B(bi->data.data(), k, n);
        MapR GA(ai->grad.data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        ConstMapR A(ai->data.data(), m, k);
        MapR GB(bi->grad.data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return r;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw std::invalid_argument("matmul_nt: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(static_cast<size_t>(m) * n);
  {
    ConstMapR A(a.data(), m, k), B(b.data(), n, k);
    MapR O(out.data(), m, n);
    O.noalias() = A * B.transpose();
  }
  Tensor r = Tensor::from_data({m, n}, std::move(out));
  OpCtx ctx;
  ctx.scan(a);
  ctx.scan(b);
  if (ctx.recording()) {
    auto ai = a.impl(), bi = b.impl(), oi = r.impl();
    ctx.finish(r, [ai, bi, oi, m, k, n] {
      if (oi->grad.empty()) return;
      ConstMapR G(oi->grad.data(), m, n);
      if (ai->requires_grad) {
        ensure_grad(*ai);
        ConstMapR B(bi->data.data(), n, k);
        MapR GA(ai->grad.data(), m, k);
        GA.noalias() += G * B;
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        ConstMapR A(ai->data.data(), m, k);
        MapR GB(bi->grad.data(), n, k);
        GB.noalias() += G.transpose() * A;
      }
    });
  }
  return r;
}

// ---- Convolution ----

namespace {

struct ConvDims {
  int B, C, H, W, F, kH, kW, stride, pad, Ho, Wo;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride,
                   int padding) {
  if (input.ndim() != 4 || kernel.ndim() != 4)
    throw std::invalid_argument("conv2d expects 4-d input and kernel, got " +
                                shape_str(input.shape()) + " and " +
                                shape_str(kernel.shape()));
  if (input.dim(1) != kernel.dim(1))
    throw std::invalid_argument("conv2d channel mismatch: input " +
                                shape_str(input.shape()) + " kernel " +
                                shape_str(kernel.shape()));
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: bad stride/padding");
  ConvDims d{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
             kernel.dim(0), input.dim(1), 0, stride, padding, 0, 0};
  d.kH = kernel.dim(2);
  d.kW = kernel.dim(3);
  const int hnum = d.H + 2 * padding - d.kH;
  const int wnum = d.W + 2 * padding - d.kW;
  if (hnum < 0 || wnum < 0 || hnum % stride != 0 || wnum % stride != 0)
    throw std::invalid_argument(
        "conv2d: output extent not a positive integer for input " +
        shape_str(input.shape()) + " kernel " + shape_str(kernel.shape()) +
        " stride " + std::to_string(stride) + " pad " +
        std::to_string(padding));
  d.Ho = hnum / stride + 1;
  d.Wo = wnum / stride + 1;
  return d;
}

// col layout: [C*kH*kW, Ho*Wo] row-major for one batch element.
void im2col(const double* x, const ConvDims& d, double* col) {
  const int HoWo = d.Ho * d.Wo;
  int row = 0;
  for (int c = 0; c < d.C; ++c)
    for (int ki = 0; ki < d.kH; ++ki)
      for (int kj = 0; kj < d.kW; ++kj, ++row) {
        double* dst = col + static_cast<size_t>(row) * HoWo;
        for (int oi = 0; oi < d.Ho; ++oi) {
          const int ii = oi * d.stride + ki - d.pad;
          if (ii < 0 || ii >= d.H) {
            for (int oj = 0; oj < d.Wo; ++oj) dst[oi * d.Wo + oj] = 0.0;
            continue;
          }
          const double* src = x + (static_cast<size_t>(c) * d.H + ii) * d.W;
          for (int oj = 0; oj < d.Wo; ++oj) {
            const int jj = oj * d.stride + kj - d.pad;
            dst[oi * d.Wo + oj] = (jj < 0 || jj >= d.W) ? 0.0 : src[jj];
          }
        }
      }
}

void col2im_add(const double* col, const ConvDims& d, double* gx) {
  const int HoWo = d.Ho * d.Wo;
  int row = 0;
  for (int c = 0; c < d.C; ++c)
    for (int ki = 0; ki < d.kH; ++ki)
      for (int kj = 0; kj < d.kW; ++kj, ++row) {
        const double* src = col + static_cast<size_t>(row) * HoWo;
        for (int oi = 0; oi < d.Ho; ++oi) {
          const int ii = oi * d.stride + ki - d.pad;
          if (ii < 0 || ii >= d.H) continue;
          double* dst = gx + (static_cast<size_t>(c) * d.H + ii) * d.W;
          for (int oj = 0; oj < d.Wo; ++oj) {
            const int jj = oj * d.stride + kj - d.pad;
            if (jj >= 0 && jj < d.W) dst[jj] += src[oi * d.Wo + oj];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride,
              int padding) {
  const ConvDims d = conv_dims(input, kernel, stride, padding);
  const int CKK = d.C * d.kH * d.kW, HoWo = d.Ho * d.Wo;
  std::vector<double> out(static_cast<size_t>(d.B) * d.F * HoWo);
  std::vector<double> col(static_cast<size_t>(CKK) * HoWo);
  ConstMapR K(kernel.data(), d.F, CKK);
  for (int b = 0; b < d.B; ++b) {
    im2col(input.data() + static_cast<size_t>(b) * d.C * d.H * d.W, d,
           col.data());
    ConstMapR Col(col.data(), CKK, HoWo);
    MapR O(out.data() + static_cast<size_t>(b) * d.F * HoWo, d.F, HoWo);
    O.noalias() = K * Col;
  }
  Tensor r = Tensor::from_data({d.B, d.F, d.Ho, d.Wo}, std::move(out));
  OpCtx ctx;
  ctx.scan(input);
  ctx.scan(kernel);
  if (ctx.recording()) {
    auto xi = input.impl(), ki = kernel.impl(), oi = r.impl();
    ctx.finish(r, [xi, ki, oi, d] {
      if (oi->grad.empty()) return;
      const int CKK2 = d.C * d.kH * d.kW, HoWo2 = d.Ho * d.Wo;
      std::vector<double> col(static_cast<size_t>(CKK2) * HoWo2);
      const bool need_x = xi->requires_grad, need_k = ki->requires_grad;
      if (need_x) ensure_grad(*xi);
      if (need_k) ensure_grad(*ki);
      std::vector<double> dcol(need_x ? col.size() : 0);
      for (int b = 0; b < d.B; ++b) {
        ConstMapR G(oi->grad.data() + static_cast<size_t>(b) * d.F * HoWo2, d.F,
                    HoWo2);
        if (need_k) {
          im2col(xi->data.data() + static_cast<size_t>(b) * d.C * d.H * d.W, d,
                 col.data());
          ConstMapR Col(col.data(), CKK2, HoWo2);
          MapR GK(ki->grad.data(), d.F, CKK2);
          GK.noalias() += G * Col.transpose();
        }
        if (need_x) {
          ConstMapR K(ki->data.data(), d.F, CKK2);
          MapR DCol(dcol.data(), CKK2, HoWo2);
          DCol.noalias() = K.transpose() * G;
          col2im_add(dcol.data(), d,
                     xi->grad.data() + static_cast<size_t>(b) * d.C * d.H * d.W);
        }
      }
    });
  }
  return r;
}

Tensor upsample2x(const Tensor& input) {
  if (input.ndim() != 4)
    throw std::invalid_argument("upsample2x expects 4-d input, got " +
                                shape_str(input.shape()));
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2),
            W = input.dim(3);
  std::vector<double> out(static_cast<size_t>(B) * C * 4 * H * W);
  const double* px = input.data();
  for (int bc = 0; bc < B * C; ++bc) {
    const double* src = px + static_cast<size_t>(bc) * H * W;
    double* dst = out.data() + static_cast<size_t>(bc) * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double v = src[i * W + j];
        double* o = dst + (2 * i) * (2 * W) + 2 * j;
        o[0] = v;
        o[1] = v;
        o[2 * W] = v;
        o[2 * W + 1] = v;
      }
  }
  Tensor r = Tensor::from_data({B, C, 2 * H, 2 * W}, std::move(out));
  OpCtx ctx;
  ctx.scan(input);
  if (ctx.recording()) {
    auto xi = input.impl(), oi = r.impl();
    ctx.finish(r, [xi, oi, B, C, H, W] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      ensure_grad(*xi);
      for (int bc = 0; bc < B * C; ++bc) {
        double* gx = xi->grad.data() + static_cast<size_t>(bc) * H * W;
        const double* go = oi->grad.data() + static_cast<size_t>(bc) * 4 * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const double* g = go + (2 * i) * (2 * W) + 2 * j;
            gx[i * W + j] += g[0] + g[1] + g[2 * W] + g[2 * W + 1];
          }
      }
    });
  }
  return r;
}

// ---- Reductions ----

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  const double* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  Tensor r = Tensor::from_data({1}, {acc});
  OpCtx ctx;
  ctx.scan(a);
  if (ctx.recording()) {
    auto ai = a.impl(), oi = r.impl();
    ctx.finish(r, [ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ensure_grad(*ai);
      const double g = oi->grad[0];
      for (auto& v : ai->grad) v += g;
    });
  }
  return r;
}

}  // namespace svg
