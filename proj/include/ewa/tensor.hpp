#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ewa/common.hpp"
#include "ewa/rng.hpp"

namespace ewa {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Raises glibc's mmap/trim thresholds so the multi-megabyte activation
// buffers a training step churns through are reused from the heap instead of
// being mapped and unmapped on every allocation (which roughly doubles
// desk-scale step time in kernel overhead). Call once from long-running
// entry points; harmless elsewhere and on non-glibc platforms.
void tune_allocator();

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, stays empty until backward needs it
  bool requires_grad = false;
  int64_t node = -1;         // index of the graph node that produced this tensor
  uint64_t graph_epoch = 0;  // which graph generation that node index belongs to
  uint64_t id = 0;
};

// Dense float64 tensor with shared value semantics: copies alias the same
// storage, clone() makes an independent one. All math runs in float64.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);  // shape {1}
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t dim(int64_t i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  double& at(int64_t i) { return impl_->data[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }
  double& at(int64_t r, int64_t c);
  double at(int64_t r, int64_t c) const;
  double item() const;  // value of a one-element tensor

  Tensor& set_requires_grad(bool value = true);
  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  Tensor clone() const;  // deep copy of values; detached, requires_grad off
  void copy_data_from(const Tensor& other);

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend class Graph;
  friend Tensor make_tensor(Shape shape, std::vector<double> values);
};

// Reverse-mode tape. Ops append nodes as they execute, so append order is a
// topological order of the recorded computation. backward() walks it once in
// reverse from the loss, invoking each node's pullback at most once, then
// clears the tape. One graph per thread.
class Graph {
 public:
  static Graph& get();

  bool recording() const { return disable_depth_ == 0; }
  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  uint64_t epoch() const { return epoch_; }

  // Number of pullbacks invoked by the most recent backward() call.
  int64_t last_backward_nodes() const { return last_backward_nodes_; }

  void push(const char* op, std::vector<uint64_t> input_ids,
            const std::shared_ptr<TensorImpl>& out, std::function<void()> pullback);
  void backward(const Tensor& loss);
  void clear();

 private:
  struct Node {
    const char* op;
    std::vector<uint64_t> inputs;
    std::shared_ptr<TensorImpl> out;
    std::function<void()> pullback;
  };
  std::vector<Node> nodes_;
  int disable_depth_ = 0;
  uint64_t epoch_ = 1;
  int64_t last_backward_nodes_ = 0;
  friend class NoGradGuard;
};

// Disables graph recording for its lifetime (nestable).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// backward on the thread's graph. loss must be a one-element tensor produced
// by a recorded op; gradients accumulate additively into requires_grad leaves.
void backward(const Tensor& loss);

// ----- primitive ops (all differentiable unless noted) -----

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // 2-d only
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);     // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& v);   // [m,n] + [n] broadcast
Tensor mul_rows(const Tensor& x, const Tensor& s);     // row r scaled by s[r]; s is [m] or [m,1]
Tensor mul_mask(const Tensor& x, std::vector<double> mask);  // constant elementwise factor
Tensor gather_rows(const Tensor& x, std::vector<int64_t> idx);
Tensor scatter_rows(const Tensor& rows, std::vector<int64_t> idx, int64_t n_rows);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
Tensor softmax(const Tensor& x, int64_t axis);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor sum_all(const Tensor& x);                       // -> shape {1}
Tensor dot_const(const Tensor& x, std::span<const double> w);  // sum(x*w) -> shape {1}

// Inverted dropout. Identity (and records nothing) when train is false or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool train);

// Multi-head scaled dot-product self-attention over a packed qkv matrix.
// qkv is [B*T, 3*d] laid out as [q | k | v] column blocks, each split into
// n_heads contiguous head slices. Returns [B*T, d]. probs_out, when given,
// receives the post-softmax attention weights as [B, H, T, T] flattened.
Tensor multihead_attention(const Tensor& qkv, int64_t batch, int64_t tokens, int64_t n_heads,
                           double attn_dropout, Rng* rng, bool train,
                           std::vector<double>* probs_out = nullptr);

// Builds the transformer input sequence: for each sample, row 0 is
// cls_token, rows 1..T-1 are that sample's patch embeddings, and pos_embed
// is added to every sample's rows. patch_embed is [B*(T-1), d], out [B*T, d].
Tensor assemble_tokens(const Tensor& patch_embed, const Tensor& cls_token,
                       const Tensor& pos_embed, int64_t batch);

// Mean softmax cross-entropy over the batch with label smoothing: targets are
// (1-eps)*onehot + eps/K. logits [B,K], labels in [0,K).
Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> labels,
                     double label_smoothing = 0.0);

// ----- gradient checking -----

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t worst_coord = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  int64_t coords_checked = 0;
};

// Central-difference check of grad_fn against value_fn at point. Relative
// error uses max(|analytic|, |numeric|, 1e-8) as denominator. max_coords = 0
// checks every coordinate; otherwise that many are sampled with sample_seed.
GradCheckResult grad_check(
    const std::function<double(const std::vector<double>&)>& value_fn,
    const std::function<std::vector<double>(const std::vector<double>&)>& grad_fn,
    const std::vector<double>& point, double h, int64_t max_coords = 0,
    uint64_t sample_seed = 0);

// Convenience form for a scalar-valued tensor function f: analytic gradients
// come from one backward() call at point, numeric ones from central
// differences of f's value.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double h, int64_t max_coords = 0,
                           uint64_t sample_seed = 0);

}  // namespace ewa
