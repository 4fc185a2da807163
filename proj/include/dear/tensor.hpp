#pragma once

// Dense row-major f64 tensors with define-by-run reverse-mode autodiff.
//
// Each op that has a grad-requiring input records its parents and a
// backward closure on the output. `backward(loss)` linearizes the recorded
// graph into a Tape (parents before children) and replays it in reverse.
// Graphs are rebuilt on every forward pass. A graph and its tensors belong
// to one thread; independent graphs may run concurrently.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dear/attention_mask.hpp"

namespace dear {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor identity(std::size_t n);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  /// Rank-2 extents; a rank-1 tensor reads as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access, meant for leaves (initialization, optimizer steps).
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool is_leaf() const { return !impl_->backward_fn; }
  const char* op_name() const { return impl_->op; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  /// Value copy with no graph history.
  Tensor detach() const;
  Tensor clone_leaf(bool requires_grad) const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// --- grad mode -------------------------------------------------------------

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// --- tape ------------------------------------------------------------------

/// Topologically ordered view of the graph reachable from a root, restricted
/// to grad-requiring nodes. Parents always precede their children.
class Tape {
 public:
  explicit Tape(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<detail::TensorImpl*>& nodes() const { return nodes_; }

  /// Seeds d(root)/d(root) = 1 and runs every backward rule once, children first.
  void replay_backward();

 private:
  std::shared_ptr<detail::TensorImpl> root_;
  std::vector<detail::TensorImpl*> nodes_;
};

/// Populates .grad on every grad-requiring leaf reachable from `loss`.
/// Throws ContractError unless `loss` holds exactly one element.
void backward(const Tensor& loss);

// --- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// x[n x d] + bias[d] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// w * a + (1 - w) * b for a scalar tensor w (differentiable in w).
Tensor lerp(const Tensor& a, const Tensor& b, const Tensor& w);

Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);

/// Per-row layer norm over the last dimension (biased variance).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Row softmax where flagged mask entries are excluded (weight exactly 0).
Tensor masked_softmax_rows(const Tensor& scores, const AttentionMask* mask = nullptr);
Tensor softmax(const Tensor& v);

/// Fused multi-head attention on packed [n x d_model] projections.
/// `masks` is empty (unmasked) or one mask per head.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                            std::vector<AttentionMask> masks = {});

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Embedding lookup: rows of `table` selected by `ids`.
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);
Tensor element(const Tensor& x, std::size_t i);
/// Packs scalar tensors into a rank-1 tensor.
Tensor stack(const std::vector<Tensor>& scalars);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);

/// Each row scaled to unit L2 norm; ZeroNormError below 1e-12.
Tensor normalize_rows(const Tensor& x);
/// Differentiable cosine similarity of two vectors (scalar tensor).
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
/// -log softmax(logits)[label] for a logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t label);

inline constexpr double kNormFloor = 1e-12;

/// Plain-value cosine similarity; ZeroNormError when either norm <= 1e-12.
double cosine(std::span<const double> a, std::span<const double> b);

// --- finite differences ----------------------------------------------------

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
/// `h` must lie in [1e-7, 1e-3].
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

/// Same, perturbing a leaf in place (restored afterwards); `f` re-reads it.
std::vector<double> finite_diff_grad_inplace(const std::function<double()>& f, Tensor& leaf, double h = 1e-5);

}  // namespace dear
