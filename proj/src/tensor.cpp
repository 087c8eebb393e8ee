#include "ewa/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ewa {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

MatMap mmap(std::vector<double>& v, int64_t r, int64_t c) {
  return MatMap(v.data(), r, c);
}
CMatMap cmap(const std::vector<double>& v, int64_t r, int64_t c) {
  return CMatMap(v.data(), r, c);
}

std::atomic<uint64_t> g_next_id{1};

std::vector<double>& grad_buf(const std::shared_ptr<TensorImpl>& impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

bool tracked(const Tensor& t) {
  if (!t.defined()) return false;
  const auto& impl = t.impl();
  if (impl->requires_grad) return true;
  return impl->node >= 0 && impl->graph_epoch == Graph::get().epoch();
}

// True when the graph is live and at least one input participates in it.
bool recording_any(std::initializer_list<Tensor> inputs) {
  if (!Graph::get().recording()) return false;
  for (const Tensor& t : inputs) {
    if (tracked(t)) return true;
  }
  return false;
}

std::vector<uint64_t> ids_of(std::initializer_list<Tensor> inputs) {
  std::vector<uint64_t> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(t.impl()->id);
  return ids;
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    check_shape(d > 0, "tensor: dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor make_tensor(Shape shape, std::vector<double> values) {
  check_shape(!shape.empty(), "tensor: shape must have at least one dimension");
  for (int64_t d : shape) {
    check_shape(d > 0, "tensor: dimensions must be positive, got " + shape_str(shape));
  }
  check_shape(shape_numel(shape) == static_cast<int64_t>(values.size()),
              "tensor: shape " + shape_str(shape) + " does not match value count " +
                  std::to_string(values.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) {
  int64_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  int64_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return make_tensor({1}, {value}); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return make_tensor(std::move(shape), std::move(values));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, double mean) {
  int64_t n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.normal(mean, stddev);
  return make_tensor(std::move(shape), std::move(v));
}

double& Tensor::at(int64_t r, int64_t c) {
  return impl_->data[static_cast<size_t>(r * dim(1) + c)];
}

double Tensor::at(int64_t r, int64_t c) const {
  return impl_->data[static_cast<size_t>(r * dim(1) + c)];
}

double Tensor::item() const {
  check_value(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

const std::vector<double>& Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return make_tensor(impl_->shape, impl_->data);
}

void Tensor::copy_data_from(const Tensor& other) {
  check_shape(impl_->shape == other.impl_->shape,
              "copy_data_from: shape mismatch " + shape_str(impl_->shape) + " vs " +
                  shape_str(other.impl_->shape));
  impl_->data = other.impl_->data;
}

// ----- Graph -----

Graph& Graph::get() {
  thread_local Graph g;
  return g;
}

void Graph::push(const char* op, std::vector<uint64_t> input_ids,
                 const std::shared_ptr<TensorImpl>& out, std::function<void()> pullback) {
  out->node = static_cast<int64_t>(nodes_.size());
  out->graph_epoch = epoch_;
  nodes_.push_back(Node{op, std::move(input_ids), out, std::move(pullback)});
}

void Graph::backward(const Tensor& loss) {
  check_value(loss.defined() && loss.numel() == 1,
              "backward: loss must be a one-element tensor");
  const auto& li = loss.impl();
  if (li->node < 0 || li->graph_epoch != epoch_) {
    throw ValueError("backward: loss is a constant, nothing was recorded for it");
  }
  li->grad.assign(1, 1.0);
  last_backward_nodes_ = 0;
  // Reverse tape walk from the loss's producer. Nodes appended after it
  // cannot be its ancestors, so they are skipped outright; earlier nodes are
  // skipped when no gradient ever reached their output.
  for (int64_t i = li->node; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.out->grad.empty()) continue;
    n.pullback();
    ++last_backward_nodes_;
  }
  clear();
}

void Graph::clear() {
  nodes_.clear();
  ++epoch_;
}

NoGradGuard::NoGradGuard() { ++Graph::get().disable_depth_; }
NoGradGuard::~NoGradGuard() { --Graph::get().disable_depth_; }

void backward(const Tensor& loss) { Graph::get().backward(loss); }

// ----- ops -----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_shape(a.rank() == 2 && b.rank() == 2,
              "matmul: expects 2-d operands, got " + shape_str(a.shape()) + " x " +
                  shape_str(b.shape()));
  check_shape(a.dim(1) == b.dim(0), "matmul: inner dimensions differ: " +
                                        shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  mmap(out.data(), m, n).noalias() = cmap(a.data(), m, k) * cmap(b.data(), k, n);
  if (recording_any({a, b})) {
    bool da = tracked(a), db = tracked(b);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Graph::get().push("matmul", ids_of({a, b}), oi, [ai, bi, oi, da, db, m, k, n] {
      CMatMap go(oi->grad.data(), m, n);
      if (da) {
        MatMap(grad_buf(ai).data(), m, k).noalias() +=
            go * CMatMap(bi->data.data(), k, n).transpose();
      }
      if (db) {
        MatMap(grad_buf(bi).data(), k, n).noalias() +=
            CMatMap(ai->data.data(), m, k).transpose() * go;
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_shape(a.rank() == 2, "transpose: expects a 2-d tensor, got " + shape_str(a.shape()));
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  mmap(out.data(), n, m).noalias() = cmap(a.data(), m, n).transpose();
  if (recording_any({a})) {
    auto ai = a.impl(), oi = out.impl();
    Graph::get().push("transpose", ids_of({a}), oi, [ai, oi, m, n] {
      MatMap(grad_buf(ai).data(), m, n).noalias() += CMatMap(oi->grad.data(), n, m).transpose();
    });
  }
  return out;
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check_shape(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (recording_any({a, b})) {
    bool da = tracked(a), db = tracked(b);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Graph::get().push("add", ids_of({a, b}), oi, [ai, bi, oi, da, db, n] {
      const auto& go = oi->grad;
      if (da) {
        auto& ga = grad_buf(ai);
        for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
      }
      if (db) {
        auto& gb = grad_buf(bi);
        for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (recording_any({a, b})) {
    bool da = tracked(a), db = tracked(b);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Graph::get().push("sub", ids_of({a, b}), oi, [ai, bi, oi, da, db, n] {
      const auto& go = oi->grad;
      if (da) {
        auto& ga = grad_buf(ai);
        for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
      }
      if (db) {
        auto& gb = grad_buf(bi);
        for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] -= go[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (recording_any({a, b})) {
    bool da = tracked(a), db = tracked(b);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    Graph::get().push("mul", ids_of({a, b}), oi, [ai, bi, oi, da, db, n] {
      const auto& go = oi->grad;
      if (da) {
        auto& ga = grad_buf(ai);
        for (int64_t i = 0; i < n; ++i) {
          ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * bi->data[static_cast<size_t>(i)];
        }
      }
      if (db) {
        auto& gb = grad_buf(bi);
        for (int64_t i = 0; i < n; ++i) {
          gb[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * ai->data[static_cast<size_t>(i)];
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  const int64_t n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
  if (recording_any({a})) {
    auto ai = a.impl(), oi = out.impl();
    Graph::get().push("scale", ids_of({a}), oi, [ai, oi, c, n] {
      auto& ga = grad_buf(ai);
      for (int64_t i = 0; i < n; ++i) {
        ga[static_cast<size_t>(i)] += c * oi->grad[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check_shape(x.rank() == 2, "add_rowvec: x must be 2-d, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  check_shape(v.numel() == n && (v.rank() == 1 || (v.rank() == 2 && v.dim(0) == 1)),
              "add_rowvec: v must be a length-" + std::to_string(n) + " vector, got " +
                  shape_str(v.shape()));
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t r = 0; r < m; ++r) {
    for (int64_t c = 0; c < n; ++c) out.at(r * n + c) = x.at(r * n + c) + v.at(c);
  }
  if (recording_any({x, v})) {
    bool dx = tracked(x), dv = tracked(v);
    auto xi = x.impl(), vi = v.impl(), oi = out.impl();
    Graph::get().push("add_rowvec", ids_of({x, v}), oi, [xi, vi, oi, dx, dv, m, n] {
      const auto& go = oi->grad;
      if (dx) {
        auto& gx = grad_buf(xi);
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (dv) {
        auto& gv = grad_buf(vi);
        for (int64_t r = 0; r < m; ++r) {
          for (int64_t c = 0; c < n; ++c) {
            gv[static_cast<size_t>(c)] += go[static_cast<size_t>(r * n + c)];
          }
        }
      }
    });
  }
  return out;
}

Tensor mul_rows(const Tensor& x, const Tensor& s) {
  check_shape(x.rank() == 2, "mul_rows: x must be 2-d, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  check_shape(s.numel() == m && (s.rank() == 1 || (s.rank() == 2 && s.dim(1) == 1)),
              "mul_rows: s must hold one factor per row, got " + shape_str(s.shape()));
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t r = 0; r < m; ++r) {
    const double f = s.at(r);
    for (int64_t c = 0; c < n; ++c) out.at(r * n + c) = x.at(r * n + c) * f;
  }
  if (recording_any({x, s})) {
    bool dx = tracked(x), ds = tracked(s);
    auto xi = x.impl(), si = s.impl(), oi = out.impl();
    Graph::get().push("mul_rows", ids_of({x, s}), oi, [xi, si, oi, dx, ds, m, n] {
      const auto& go = oi->grad;
      if (dx) {
        auto& gx = grad_buf(xi);
        for (int64_t r = 0; r < m; ++r) {
          const double f = si->data[static_cast<size_t>(r)];
          for (int64_t c = 0; c < n; ++c) {
            gx[static_cast<size_t>(r * n + c)] += go[static_cast<size_t>(r * n + c)] * f;
          }
        }
      }
      if (ds) {
        auto& gs = grad_buf(si);
        for (int64_t r = 0; r < m; ++r) {
          double acc = 0.0;
          for (int64_t c = 0; c < n; ++c) {
            acc += go[static_cast<size_t>(r * n + c)] * xi->data[static_cast<size_t>(r * n + c)];
          }
          gs[static_cast<size_t>(r)] += acc;
        }
      }
    });
  }
  return out;
}

Tensor mul_mask(const Tensor& x, std::vector<double> mask) {
  check_shape(static_cast<int64_t>(mask.size()) == x.numel(),
              "mul_mask: mask size " + std::to_string(mask.size()) + " does not match tensor " +
                  shape_str(x.shape()));
  auto m = std::make_shared<std::vector<double>>(std::move(mask));
  const int64_t n = x.numel();
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < n; ++i) out.at(i) = x.at(i) * (*m)[static_cast<size_t>(i)];
  if (recording_any({x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::get().push("mul_mask", ids_of({x}), oi, [xi, oi, m, n] {
      auto& gx = grad_buf(xi);
      for (int64_t i = 0; i < n; ++i) {
        gx[static_cast<size_t>(i)] += oi->grad[static_cast<size_t>(i)] * (*m)[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::vector<int64_t> idx) {
  check_shape(x.rank() == 2, "gather_rows: x must be 2-d, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  check_value(!idx.empty(), "gather_rows: empty index list");
  for (int64_t i : idx) {
    check_value(i >= 0 && i < m, "gather_rows: row index " + std::to_string(i) +
                                     " out of range for " + shape_str(x.shape()));
  }
  auto ids = std::make_shared<std::vector<int64_t>>(std::move(idx));
  const int64_t k = static_cast<int64_t>(ids->size());
  Tensor out = Tensor::zeros({k, n});
  for (int64_t j = 0; j < k; ++j) {
    const double* src = x.data().data() + (*ids)[static_cast<size_t>(j)] * n;
    std::copy(src, src + n, out.data().data() + j * n);
  }
  if (recording_any({x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::get().push("gather_rows", ids_of({x}), oi, [xi, oi, ids, k, n] {
      auto& gx = grad_buf(xi);
      for (int64_t j = 0; j < k; ++j) {
        const double* src = oi->grad.data() + j * n;
        double* dst = gx.data() + (*ids)[static_cast<size_t>(j)] * n;
        for (int64_t c = 0; c < n; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

Tensor scatter_rows(const Tensor& rows, std::vector<int64_t> idx, int64_t n_rows) {
  check_shape(rows.rank() == 2, "scatter_rows: rows must be 2-d, got " + shape_str(rows.shape()));
  const int64_t m = rows.dim(0), n = rows.dim(1);
  check_value(static_cast<int64_t>(idx.size()) == m,
              "scatter_rows: index count " + std::to_string(idx.size()) + " does not match " +
                  std::to_string(m) + " rows");
  std::vector<char> seen(static_cast<size_t>(n_rows), 0);
  for (int64_t i : idx) {
    check_value(i >= 0 && i < n_rows,
                "scatter_rows: target index " + std::to_string(i) + " out of range");
    check_value(!seen[static_cast<size_t>(i)],
                "scatter_rows: duplicate target index " + std::to_string(i));
    seen[static_cast<size_t>(i)] = 1;
  }
  auto ids = std::make_shared<std::vector<int64_t>>(std::move(idx));
  Tensor out = Tensor::zeros({n_rows, n});
  for (int64_t j = 0; j < m; ++j) {
    const double* src = rows.data().data() + j * n;
    std::copy(src, src + n, out.data().data() + (*ids)[static_cast<size_t>(j)] * n);
  }
  if (recording_any({rows})) {
    auto ri = rows.impl(), oi = out.impl();
    Graph::get().push("scatter_rows", ids_of({rows}), oi, [ri, oi, ids, m, n] {
      auto& gr = grad_buf(ri);
      for (int64_t j = 0; j < m; ++j) {
        const double* src = oi->grad.data() + (*ids)[static_cast<size_t>(j)] * n;
        double* dst = gr.data() + j * n;
        for (int64_t c = 0; c < n; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  check_value(!parts.empty(), "concat_rows: no tensors given");
  const int64_t n = parts[0].dim(1);
  int64_t rows = 0;
  for (const Tensor& p : parts) {
    check_shape(p.rank() == 2 && p.dim(1) == n,
                "concat_rows: all parts must be 2-d with " + std::to_string(n) + " columns");
    rows += p.dim(0);
  }
  Tensor out = Tensor::zeros({rows, n});
  int64_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off * n);
    off += p.dim(0);
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || tracked(p);
  if (Graph::get().recording() && any) {
    struct Piece {
      std::shared_ptr<TensorImpl> impl;
      int64_t offset, rows;
      bool needs;
    };
    auto pieces = std::make_shared<std::vector<Piece>>();
    std::vector<uint64_t> in_ids;
    off = 0;
    for (const Tensor& p : parts) {
      pieces->push_back(Piece{p.impl(), off, p.dim(0), tracked(p)});
      in_ids.push_back(p.impl()->id);
      off += p.dim(0);
    }
    auto oi = out.impl();
    Graph::get().push("concat_rows", std::move(in_ids), oi, [pieces, oi, n] {
      for (const auto& piece : *pieces) {
        if (!piece.needs) continue;
        auto& g = grad_buf(piece.impl);
        const double* src = oi->grad.data() + piece.offset * n;
        for (int64_t i = 0; i < piece.rows * n; ++i) g[static_cast<size_t>(i)] += src[i];
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  check_shape(x.rank() == 2, "slice_cols: x must be 2-d, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  check_value(0 <= c0 && c0 < c1 && c1 <= n,
              "slice_cols: bad column range [" + std::to_string(c0) + "," + std::to_string(c1) +
                  ") for " + shape_str(x.shape()));
  const int64_t w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  for (int64_t r = 0; r < m; ++r) {
    const double* src = x.data().data() + r * n + c0;
    std::copy(src, src + w, out.data().data() + r * w);
  }
  if (recording_any({x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::get().push("slice_cols", ids_of({x}), oi, [xi, oi, m, n, w, c0] {
      auto& gx = grad_buf(xi);
      for (int64_t r = 0; r < m; ++r) {
        const double* src = oi->grad.data() + r * w;
        double* dst = gx.data() + r * n + c0;
        for (int64_t c = 0; c < w; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int64_t axis) {
  check_value(axis >= 0 && axis < x.rank(),
              "softmax: axis " + std::to_string(axis) + " out of range for " +
                  shape_str(x.shape()));
  const int64_t len = x.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * len * inner + i;
      double mx = x.at(base);
      for (int64_t l = 1; l < len; ++l) mx = std::max(mx, x.at(base + l * inner));
      double z = 0.0;
      for (int64_t l = 0; l < len; ++l) {
        const double e = std::exp(x.at(base + l * inner) - mx);
        out.at(base + l * inner) = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (int64_t l = 0; l < len; ++l) out.at(base + l * inner) *= inv;
    }
  }
  if (recording_any({x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::get().push("softmax", ids_of({x}), oi, [xi, oi, outer, inner, len] {
      auto& gx = grad_buf(xi);
      const auto& p = oi->data;
      const auto& go = oi->grad;
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * len * inner + i;
          double dot = 0.0;
          for (int64_t l = 0; l < len; ++l) {
            const size_t k = static_cast<size_t>(base + l * inner);
            dot += p[k] * go[k];
          }
          for (int64_t l = 0; l < len; ++l) {
            const size_t k = static_cast<size_t>(base + l * inner);
            gx[k] += p[k] * (go[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  const int64_t n = x.numel();
  Tensor out = Tensor::zeros(x.shape());
  // Phi(x) is kept for the pullback: d gelu = Phi(x) + x * phi(x).
  auto cdf = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double v = x.at(i);
    const double c = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    (*cdf)[static_cast<size_t>(i)] = c;
    out.at(i) = v * c;
  }
  if (recording_any({x})) {
    auto xi = x.impl(), oi = out.impl();
    Graph::get().push("gelu", ids_of({x}), oi, [xi, oi, cdf, n] {
      auto& gx = grad_buf(xi);
      for (int64_t i = 0; i < n; ++i) {
        const size_t k = static_cast<size_t>(i);
        const double v = xi->data[k];
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[k] += oi->grad[k] * ((*cdf)[k] + v * pdf);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_shape(x.rank() >= 1, "layer_norm: x must have rank >= 1");
  const int64_t d = x.shape().back();
  check_value(d >= 2, "layer_norm: normalized axis needs at least 2 elements, got " +
                          std::to_string(d));
  check_shape(gamma.numel() == d && beta.numel() == d,
              "layer_norm: gamma/beta must have " + std::to_string(d) + " elements");
  const int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);  // biased variance
    const double rs = 1.0 / std::sqrt(var + eps);
    (*mean)[static_cast<size_t>(r)] = mu;
    (*rstd)[static_cast<size_t>(r)] = rs;
    double* yr = out.data().data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      yr[j] = gamma.at(j) * ((xr[j] - mu) * rs) + beta.at(j);
    }
  }
  if (recording_any({x, gamma, beta})) {
    bool dx = tracked(x), dg = tracked(gamma), db = tracked(beta);
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    Graph::get().push("layer_norm", ids_of({x, gamma, beta}), oi,
                      [xi, gi, bi, oi, mean, rstd, dx, dg, db, rows, d] {
      const auto& go = oi->grad;
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xi->data.data() + r * d;
        const double* gr = go.data() + r * d;
        const double mu = (*mean)[static_cast<size_t>(r)];
        const double rs = (*rstd)[static_cast<size_t>(r)];
        if (dg || db) {
          auto& gg = grad_buf(gi);
          auto& gb = grad_buf(bi);
          for (int64_t j = 0; j < d; ++j) {
            if (dg) gg[static_cast<size_t>(j)] += gr[j] * ((xr[j] - mu) * rs);
            if (db) gb[static_cast<size_t>(j)] += gr[j];
          }
        }
        if (dx) {
          // dxhat = dy * gamma; dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
          double s1 = 0.0, s2 = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu) * rs;
            const double dxh = gr[j] * gi->data[static_cast<size_t>(j)];
            s1 += dxh;
            s2 += dxh * xh;
          }
          s1 /= static_cast<double>(d);
          s2 /= static_cast<double>(d);
          auto& gx = grad_buf(xi);
          for (int64_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu) * rs;
            const double dxh = gr[j] * gi->data[static_cast<size_t>(j)];
            gx[static_cast<size_t>(r * d + j)] += rs * (dxh - s1 - xh * s2);
          }
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.at(i);
  Tensor out = Tensor::scalar(acc);
  if (recording_any({x})) {
    auto xi = x.impl(), oi = out.impl();
    const int64_t n = x.numel();
    Graph::get().push("sum_all", ids_of({x}), oi, [xi, oi, n] {
      const double g = oi->grad[0];
      auto& gx = grad_buf(xi);
      for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
    });
  }
  return out;
}

Tensor dot_const(const Tensor& x, std::span<const double> w) {
  check_shape(static_cast<int64_t>(w.size()) == x.numel(),
              "dot_const: weight count " + std::to_string(w.size()) + " does not match tensor " +
                  shape_str(x.shape()));
  auto wv = std::make_shared<std::vector<double>>(w.begin(), w.end());
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.at(i) * (*wv)[static_cast<size_t>(i)];
  Tensor out = Tensor::scalar(acc);
  if (recording_any({x})) {
    auto xi = x.impl(), oi = out.impl();
    const int64_t n = x.numel();
    Graph::get().push("dot_const", ids_of({x}), oi, [xi, oi, wv, n] {
      const double g = oi->grad[0];
      auto& gx = grad_buf(xi);
      for (int64_t i = 0; i < n; ++i) {
        gx[static_cast<size_t>(i)] += g * (*wv)[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
  if (!train || p == 0.0) return x;
  check_value(p > 0.0 && p < 1.0, "dropout: p must lie in [0,1), got " + std::to_string(p));
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(static_cast<size_t>(x.numel()));
  for (double& m : mask) m = (rng.uniform() < p) ? 0.0 : keep_scale;
  return mul_mask(x, std::move(mask));
}

Tensor multihead_attention(const Tensor& qkv, int64_t batch, int64_t tokens, int64_t n_heads,
                           double attn_dropout, Rng* rng, bool train,
                           std::vector<double>* probs_out) {
  check_shape(qkv.rank() == 2, "multihead_attention: qkv must be 2-d");
  check_shape(qkv.dim(1) % 3 == 0, "multihead_attention: qkv width must be 3*d_model");
  const int64_t d = qkv.dim(1) / 3;
  check_shape(qkv.dim(0) == batch * tokens,
              "multihead_attention: qkv has " + std::to_string(qkv.dim(0)) + " rows, expected " +
                  std::to_string(batch * tokens));
  check_value(n_heads > 0 && d % n_heads == 0,
              "multihead_attention: d_model " + std::to_string(d) + " not divisible by " +
                  std::to_string(n_heads) + " heads");
  const int64_t dh = d / n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool use_dropout = train && attn_dropout > 0.0;
  if (use_dropout) {
    check_value(attn_dropout < 1.0, "multihead_attention: dropout must be < 1");
    check_value(rng != nullptr, "multihead_attention: dropout needs an rng in train mode");
  }

  Tensor out = Tensor::zeros({batch * tokens, d});
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(batch * n_heads * tokens * tokens));
  auto keep = use_dropout ? std::make_shared<std::vector<uint8_t>>(probs->size(), uint8_t{1})
                          : std::shared_ptr<std::vector<uint8_t>>();
  const double keep_scale = use_dropout ? 1.0 / (1.0 - attn_dropout) : 1.0;

  Mat scores(tokens, tokens);
  Mat dropped(tokens, tokens);
  MatMap out_map = mmap(out.data(), batch * tokens, d);
  CMatMap qkv_map = cmap(qkv.data(), batch * tokens, 3 * d);
  for (int64_t b = 0; b < batch; ++b) {
    const auto rows = qkv_map.middleRows(b * tokens, tokens);
    for (int64_t h = 0; h < n_heads; ++h) {
      const auto q = rows.middleCols(h * dh, dh);
      const auto k = rows.middleCols(d + h * dh, dh);
      const auto v = rows.middleCols(2 * d + h * dh, dh);
      scores.noalias() = q * k.transpose() * att_scale;
      double* prow = probs->data() + ((b * n_heads + h) * tokens) * tokens;
      for (int64_t t = 0; t < tokens; ++t) {
        double mx = scores(t, 0);
        for (int64_t u = 1; u < tokens; ++u) mx = std::max(mx, scores(t, u));
        double z = 0.0;
        for (int64_t u = 0; u < tokens; ++u) {
          const double e = std::exp(scores(t, u) - mx);
          prow[t * tokens + u] = e;
          z += e;
        }
        const double inv = 1.0 / z;
        for (int64_t u = 0; u < tokens; ++u) prow[t * tokens + u] *= inv;
      }
      CMatMap attn(prow, tokens, tokens);
      if (use_dropout) {
        uint8_t* krow = keep->data() + ((b * n_heads + h) * tokens) * tokens;
        for (int64_t i = 0; i < tokens * tokens; ++i) {
          krow[i] = rng->uniform() < attn_dropout ? 0 : 1;
          dropped.data()[i] = krow[i] ? attn.data()[i] * keep_scale : 0.0;
        }
        out_map.middleRows(b * tokens, tokens).middleCols(h * dh, dh).noalias() = dropped * v;
      } else {
        out_map.middleRows(b * tokens, tokens).middleCols(h * dh, dh).noalias() = attn * v;
      }
    }
  }
  if (probs_out) *probs_out = *probs;

  if (recording_any({qkv})) {
    auto qi = qkv.impl(), oi = out.impl();
    Graph::get().push(
        "multihead_attention", ids_of({qkv}), oi,
        [qi, oi, probs, keep, keep_scale, batch, tokens, n_heads, d, dh, att_scale] {
          CMatMap go(oi->grad.data(), batch * tokens, d);
          CMatMap qkv_m(qi->data.data(), batch * tokens, 3 * d);
          MatMap gqkv(grad_buf(qi).data(), batch * tokens, 3 * d);
          Mat attn_used(tokens, tokens);
          Mat d_attn(tokens, tokens);
          Mat d_scores(tokens, tokens);
          for (int64_t b = 0; b < batch; ++b) {
            const auto rows = qkv_m.middleRows(b * tokens, tokens);
            auto grows = gqkv.middleRows(b * tokens, tokens);
            for (int64_t h = 0; h < n_heads; ++h) {
              const auto q = rows.middleCols(h * dh, dh);
              const auto k = rows.middleCols(d + h * dh, dh);
              const auto v = rows.middleCols(2 * d + h * dh, dh);
              const double* prow = probs->data() + ((b * n_heads + h) * tokens) * tokens;
              CMatMap attn(prow, tokens, tokens);
              const auto d_out = go.middleRows(b * tokens, tokens).middleCols(h * dh, dh);
              if (keep) {
                const uint8_t* krow = keep->data() + ((b * n_heads + h) * tokens) * tokens;
                for (int64_t i = 0; i < tokens * tokens; ++i) {
                  attn_used.data()[i] = krow[i] ? attn.data()[i] * keep_scale : 0.0;
                }
                grows.middleCols(2 * d + h * dh, dh).noalias() += attn_used.transpose() * d_out;
                d_attn.noalias() = d_out * v.transpose();
                for (int64_t i = 0; i < tokens * tokens; ++i) {
                  d_attn.data()[i] = krow[i] ? d_attn.data()[i] * keep_scale : 0.0;
                }
              } else {
                grows.middleCols(2 * d + h * dh, dh).noalias() += attn.transpose() * d_out;
                d_attn.noalias() = d_out * v.transpose();
              }
              // softmax pullback per row, then the 1/sqrt(dh) score scale
              for (int64_t t = 0; t < tokens; ++t) {
                double dot = 0.0;
                for (int64_t u = 0; u < tokens; ++u) dot += d_attn(t, u) * attn(t, u);
                for (int64_t u = 0; u < tokens; ++u) {
                  d_scores(t, u) = attn(t, u) * (d_attn(t, u) - dot) * att_scale;
                }
              }
              grows.middleCols(h * dh, dh).noalias() += d_scores * k;
              grows.middleCols(d + h * dh, dh).noalias() += d_scores.transpose() * q;
            }
          }
        });
  }
  return out;
}

Tensor assemble_tokens(const Tensor& patch_embed, const Tensor& cls_token,
                       const Tensor& pos_embed, int64_t batch) {
  check_shape(patch_embed.rank() == 2, "assemble_tokens: patch_embed must be 2-d");
  const int64_t d = patch_embed.dim(1);
  check_value(batch > 0 && patch_embed.dim(0) % batch == 0,
              "assemble_tokens: patch rows " + std::to_string(patch_embed.dim(0)) +
                  " not divisible by batch " + std::to_string(batch));
  const int64_t t0 = patch_embed.dim(0) / batch;
  const int64_t t = t0 + 1;
  check_shape(cls_token.numel() == d, "assemble_tokens: cls_token must have d elements");
  check_shape(pos_embed.rank() == 2 && pos_embed.dim(0) == t && pos_embed.dim(1) == d,
              "assemble_tokens: pos_embed must be [" + std::to_string(t) + "," +
                  std::to_string(d) + "], got " + shape_str(pos_embed.shape()));
  Tensor out = Tensor::zeros({batch * t, d});
  for (int64_t b = 0; b < batch; ++b) {
    double* dst = out.data().data() + b * t * d;
    for (int64_t j = 0; j < d; ++j) dst[j] = cls_token.at(j) + pos_embed.at(j);
    for (int64_t r = 0; r < t0; ++r) {
      const double* src = patch_embed.data().data() + (b * t0 + r) * d;
      const double* pos = pos_embed.data().data() + (r + 1) * d;
      double* row = dst + (r + 1) * d;
      for (int64_t j = 0; j < d; ++j) row[j] = src[j] + pos[j];
    }
  }
  if (recording_any({patch_embed, cls_token, pos_embed})) {
    bool dp = tracked(patch_embed), dc = tracked(cls_token), dpos = tracked(pos_embed);
    auto pi = patch_embed.impl(), ci = cls_token.impl(), si = pos_embed.impl(), oi = out.impl();
    Graph::get().push("assemble_tokens", ids_of({patch_embed, cls_token, pos_embed}), oi,
                      [pi, ci, si, oi, dp, dc, dpos, batch, t0, t, d] {
      const auto& go = oi->grad;
      for (int64_t b = 0; b < batch; ++b) {
        const double* gb = go.data() + b * t * d;
        if (dc) {
          auto& gc = grad_buf(ci);
          for (int64_t j = 0; j < d; ++j) gc[static_cast<size_t>(j)] += gb[j];
        }
        if (dpos) {
          auto& gs = grad_buf(si);
          for (int64_t r = 0; r < t; ++r) {
            for (int64_t j = 0; j < d; ++j) gs[static_cast<size_t>(r * d + j)] += gb[r * d + j];
          }
        }
        if (dp) {
          auto& gp = grad_buf(pi);
          for (int64_t r = 0; r < t0; ++r) {
            double* dst = gp.data() + (b * t0 + r) * d;
            const double* src = gb + (r + 1) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> labels,
                     double label_smoothing) {
  check_shape(logits.rank() == 2, "cross_entropy: logits must be 2-d, got " +
                                      shape_str(logits.shape()));
  const int64_t b = logits.dim(0), k = logits.dim(1);
  check_value(static_cast<int64_t>(labels.size()) == b,
              "cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                  std::to_string(b));
  check_value(label_smoothing >= 0.0 && label_smoothing < 1.0,
              "cross_entropy: label_smoothing must lie in [0,1)");
  for (int64_t i = 0; i < b; ++i) {
    check_value(labels[static_cast<size_t>(i)] >= 0 && labels[static_cast<size_t>(i)] < k,
                "cross_entropy: label " + std::to_string(labels[static_cast<size_t>(i)]) +
                    " out of range for " + std::to_string(k) + " classes");
  }
  const double eps = label_smoothing;
  const double off = eps / static_cast<double>(k);
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(b * k));
  auto labels_copy = std::make_shared<std::vector<int64_t>>(labels.begin(), labels.end());
  double total = 0.0;
  for (int64_t r = 0; r < b; ++r) {
    const double* lr = logits.data().data() + r * k;
    double mx = lr[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, lr[j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(lr[j] - mx);
    const double logz = mx + std::log(z);
    double row_loss = 0.0;
    const int64_t y = (*labels_copy)[static_cast<size_t>(r)];
    for (int64_t j = 0; j < k; ++j) {
      const double logp = lr[j] - logz;
      (*probs)[static_cast<size_t>(r * k + j)] = std::exp(logp);
      const double target = off + (j == y ? 1.0 - eps : 0.0);
      row_loss -= target * logp;
    }
    total += row_loss;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(b));
  if (recording_any({logits})) {
    auto li = logits.impl(), oi = out.impl();
    Graph::get().push("cross_entropy", ids_of({logits}), oi,
                      [li, oi, probs, labels_copy, b, k, eps, off] {
      const double g = oi->grad[0] / static_cast<double>(b);
      auto& gl = grad_buf(li);
      for (int64_t r = 0; r < b; ++r) {
        const int64_t y = (*labels_copy)[static_cast<size_t>(r)];
        for (int64_t j = 0; j < k; ++j) {
          const size_t idx = static_cast<size_t>(r * k + j);
          const double target = off + (j == y ? 1.0 - eps : 0.0);
          gl[idx] += g * ((*probs)[idx] - target);
        }
      }
    });
  }
  return out;
}

// ----- gradient checking -----

GradCheckResult grad_check(
    const std::function<double(const std::vector<double>&)>& value_fn,
    const std::function<std::vector<double>(const std::vector<double>&)>& grad_fn,
    const std::vector<double>& point, double h, int64_t max_coords, uint64_t sample_seed) {
  check_value(h > 0.0, "grad_check: step size must be positive");
  const int64_t n = static_cast<int64_t>(point.size());
  std::vector<double> analytic = grad_fn(point);
  check_value(static_cast<int64_t>(analytic.size()) == n,
              "grad_check: gradient has " + std::to_string(analytic.size()) +
                  " entries for " + std::to_string(n) + " coordinates");

  std::vector<int64_t> coords;
  if (max_coords <= 0 || max_coords >= n) {
    coords.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
  } else {
    // sample distinct coordinates: partial Fisher-Yates over 0..n-1
    Rng rng(sample_seed);
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < max_coords; ++i) {
      const int64_t j = i + rng.uniform_int(n - i);
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    coords.assign(pool.begin(), pool.begin() + max_coords);
  }

  GradCheckResult res;
  std::vector<double> probe = point;
  for (int64_t c : coords) {
    const double saved = probe[static_cast<size_t>(c)];
    probe[static_cast<size_t>(c)] = saved + h;
    const double fp = value_fn(probe);
    probe[static_cast<size_t>(c)] = saved - h;
    const double fm = value_fn(probe);
    probe[static_cast<size_t>(c)] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[static_cast<size_t>(c)];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    const double rel = std::fabs(a - numeric) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_coord = c;
      res.analytic_at_worst = a;
      res.numeric_at_worst = numeric;
    }
    ++res.coords_checked;
  }
  return res;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           double h, int64_t max_coords, uint64_t sample_seed) {
  const Shape shape = point.shape();
  auto value_fn = [&f, &shape](const std::vector<double>& v) {
    NoGradGuard ng;
    Tensor x = Tensor::from(shape, v);
    Tensor y = f(x);
    return y.item();
  };
  auto grad_fn = [&f, &shape](const std::vector<double>& v) {
    Tensor x = Tensor::from(shape, v);
    x.set_requires_grad();
    Tensor y = f(x);
    backward(y);
    if (x.has_grad()) return x.grad();
    return std::vector<double>(v.size(), 0.0);
  };
  return grad_check(value_fn, grad_fn, point.data(), h, max_coords, sample_seed);
}

}  // namespace ewa
