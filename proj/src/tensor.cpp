#include "dear/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "dear/errors.hpp"
#include "dear/kernels.hpp"

namespace dear {

using detail::TensorImpl;

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

using BackwardFn = std::function<void(TensorImpl&)>;

// Builds an op result; the graph edge is only recorded when some input
// requires grad and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> data, const char* op, std::vector<Tensor> parents,
                   BackwardFn fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (g_grad_enabled && any) {
    impl->requires_grad = true;
    impl->parents.reserve(parents.size());
    for (const auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(fn);
  }
  return Tensor::wrap(std::move(impl));
}

bool wants(const TensorImpl& self, std::size_t i) { return self.parents[i]->requires_grad; }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(product(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (product(shape) != values.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(product(shape)) +
                     " values, got " + std::to_string(values.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape()[0];
  if (rank() <= 1) return 1;
  throw ShapeError("rows(): rank " + std::to_string(rank()));
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape()[1];
  if (rank() == 1) return shape()[0];
  if (rank() == 0) return 1;
  throw ShapeError("cols(): rank " + std::to_string(rank()));
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

Tensor Tensor::clone_leaf(bool requires_grad) const { return from(shape(), impl_->data, requires_grad); }

// --- grad mode / tape --------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tape::Tape(const Tensor& root) : root_(root.impl()) {
  if (!root_ || !root_->requires_grad) return;
  std::unordered_set<TensorImpl*> seen;
  // Iterative post-order DFS: a node is emitted after all of its parents.
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root_.get(), 0);
  seen.insert(root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      nodes_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tape::replay_backward() {
  if (nodes_.empty()) return;
  for (auto* n : nodes_)
    if (n->backward_fn) n->grad.clear();
  root_->ensure_grad().assign(root_->data.size(), 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorImpl* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  Tape(loss).replay_backward();
}

// --- linear algebra ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](TensorImpl& self) {
    const auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) kernels::gemm_nt(g.data(), pb.data.data(), pa.ensure_grad().data(), m, n, k, true);
    if (pb.requires_grad) kernels::gemm_tn(pa.data.data(), g.data(), pb.ensure_grad().data(), k, m, n, true);
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return make_result({c, r}, std::move(out), "transpose", {a}, [r, c](TensorImpl& self) {
    auto& pg = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) pg[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (product(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {a}, [](TensorImpl& self) {
    auto& pg = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i];
  });
}

// --- elementwise -----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), "add", {a, b}, [](TensorImpl& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      auto& pg = self.parents[p]->ensure_grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b}, [](TensorImpl& self) {
    if (wants(self, 0)) {
      auto& pg = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& pg = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b}, [](TensorImpl& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result(a.shape(), std::move(out), "scale", {a}, [s](TensorImpl& self) {
    auto& pg = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i] * s;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t d = x.cols();
  if (bias.numel() != d)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match rows of " + shape_str(x.shape()));
  const std::size_t n = x.numel() / d;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] + bias[j];
  return make_result(x.shape(), std::move(out), "add_bias", {x, bias}, [n, d](TensorImpl& self) {
    if (wants(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
    }
  });
}

Tensor lerp(const Tensor& a, const Tensor& b, const Tensor& w) {
  require_same_shape(a, b, "lerp");
  if (w.numel() != 1) throw ShapeError("lerp: weight must be scalar, got " + shape_str(w.shape()));
  const double wv = w[0];
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wv * a[i] + (1.0 - wv) * b[i];
  return make_result(a.shape(), std::move(out), "lerp", {a, b, w}, [wv](TensorImpl& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto& pw = *self.parents[2];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += wv * self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (1.0 - wv) * self.grad[i];
    }
    if (pw.requires_grad) {
      double s = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) s += self.grad[i] * (pa.data[i] - pb.data[i]);
      pw.ensure_grad()[0] += s;
    }
  });
}

Tensor gelu(const Tensor& x) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), "gelu", {x}, [](TensorImpl& self) {
    auto& px = *self.parents[0];
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px.data[i];
      const double u = c * (v + 0.044715 * v * v * v);
      const double t = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x[i]));
    out[i] = std::log(x[i]);
  }
  return make_result(x.shape(), std::move(out), "log", {x}, [](TensorImpl& self) {
    auto& px = *self.parents[0];
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / px.data[i];
  });
}

// --- normalization / softmax -------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().empty() ? 1 : x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: last dimension of " + shape_str(x.shape()) + " vs gain " +
                     shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  const std::size_t n = x.numel() / d;
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gain[j] * h + bias[j];
    }
  }
  return make_result(x.shape(), std::move(out), "layer_norm", {x, gain, bias},
                     [n, d, xhat, inv_std](TensorImpl& self) {
                       auto& px = *self.parents[0];
                       auto& pgain = *self.parents[1];
                       auto& pbias = *self.parents[2];
                       const auto& g = self.grad;
                       if (pgain.requires_grad) {
                         auto& gg = pgain.ensure_grad();
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                       }
                       if (pbias.requires_grad) {
                         auto& gb = pbias.ensure_grad();
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                       }
                       if (px.requires_grad) {
                         auto& gx = px.ensure_grad();
                         for (std::size_t r = 0; r < n; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = g[r * d + j] * pgain.data[j];
                             m1 += dh;
                             m2 += dh * (*xhat)[r * d + j];
                           }
                           m1 /= static_cast<double>(d);
                           m2 /= static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = g[r * d + j] * pgain.data[j];
                             gx[r * d + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
                           }
                         }
                       }
                     });
}

Tensor masked_softmax_rows(const Tensor& scores, const AttentionMask* mask) {
  const std::size_t r = scores.rows(), c = scores.cols();
  std::vector<double> out(scores.numel());
  kernels::masked_softmax(scores.data().data(), out.data(), r, c, mask);
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(scores.shape(), std::move(out), "masked_softmax", {scores}, [r, c, y](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double dotp = 0.0;
      for (std::size_t j = 0; j < c; ++j) dotp += (*y)[i * c + j] * self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (*y)[i * c + j] * (self.grad[i * c + j] - dotp);
    }
  });
}

Tensor softmax(const Tensor& v) { return masked_softmax_rows(v, nullptr); }

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                            std::vector<AttentionMask> masks) {
  require_rank2(q, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t n = q.dim(0), d = q.dim(1);
  std::vector<double> out(n * d);
  auto probs = std::make_shared<std::vector<double>>(n_heads * n * n);
  kernels::attention_forward(q.data().data(), k.data().data(), v.data().data(), out.data(), probs->data(), n, d,
                             n_heads, masks);
  return make_result({n, d}, std::move(out), "attention", {q, k, v}, [n, d, n_heads, probs](TensorImpl& self) {
    auto& pq = *self.parents[0];
    auto& pk = *self.parents[1];
    auto& pv = *self.parents[2];
    // The kernel writes all three; unused buffers are scratch.
    std::vector<double> sq, sk, sv;
    double* dq = pq.requires_grad ? pq.ensure_grad().data() : (sq.assign(n * d, 0.0), sq.data());
    double* dk = pk.requires_grad ? pk.ensure_grad().data() : (sk.assign(n * d, 0.0), sk.data());
    double* dv = pv.requires_grad ? pv.ensure_grad().data() : (sv.assign(n * d, 0.0), sv.data());
    kernels::attention_backward(pq.data.data(), pk.data.data(), pv.data.data(), probs->data(), self.grad.data(), dq,
                                dk, dv, n, d, n_heads);
  });
}

// --- indexing ------------------------------------------------------------------------

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  if (begin > end || end > x.dim(0))
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of " +
                     shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          x.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return make_result({end - begin, c}, std::move(out), "slice_rows", {x}, [begin, c](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != c)
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(total * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result({total, c}, std::move(out), "concat_rows", parts, [offsets](TensorImpl& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (!wants(self, p)) continue;
      auto& g = self.parents[p]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[p] + i];
    }
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  require_rank2(table, "gather_rows");
  const std::size_t c = table.dim(1);
  std::vector<double> out(ids.size() * c);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= table.dim(0))
      throw ShapeError("gather_rows: id " + std::to_string(ids[r]) + " outside table " + shape_str(table.shape()));
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * c), c, out.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  return make_result({ids.size(), c}, std::move(out), "gather_rows", {table}, [ids, c](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < c; ++j) g[ids[r] * c + j] += self.grad[r * c + j];
  });
}

Tensor element(const Tensor& x, std::size_t i) {
  if (i >= x.numel()) throw ShapeError("element: index " + std::to_string(i) + " outside " + shape_str(x.shape()));
  return make_result({}, {x[i]}, "element", {x}, [i](TensorImpl& self) {
    self.parents[0]->ensure_grad()[i] += self.grad[0];
  });
}

Tensor stack(const std::vector<Tensor>& scalars) {
  std::vector<double> out;
  out.reserve(scalars.size());
  for (const auto& s : scalars) out.push_back(s.item());
  return make_result({scalars.size()}, std::move(out), "stack", scalars, [](TensorImpl& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p)
      if (wants(self, p)) self.parents[p]->ensure_grad()[0] += self.grad[p];
  });
}

// --- reductions ------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, "sum", {x}, [](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel())
    throw ShapeError("dot: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return make_result({}, {s}, "dot", {a, b}, [](TensorImpl& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double g = self.grad[0];
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * pa.data[i];
    }
  });
}

Tensor normalize_rows(const Tensor& x) {
  const std::size_t c = x.cols();
  const std::size_t r = x.numel() / c;
  std::vector<double> out(x.numel());
  auto norms = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j] * x[i * c + j];
    const double nrm = std::sqrt(s);
    if (nrm <= kNormFloor) throw ZeroNormError("normalize: row " + std::to_string(i) + " has near-zero norm");
    (*norms)[i] = nrm;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / nrm;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), "normalize_rows", {x}, [r, c, norms, y](TensorImpl& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double yg = 0.0;
      for (std::size_t j = 0; j < c; ++j) yg += (*y)[i * c + j] * self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += (self.grad[i * c + j] - (*y)[i * c + j] * yg) / (*norms)[i];
    }
  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel())
    throw ShapeError("cosine_similarity: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return dot(normalize_rows(reshape(a, {a.numel()})), normalize_rows(reshape(b, {b.numel()})));
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t m = logits.numel();
  if (label >= m)
    throw DomainError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(m) + ")");
  double mx = logits[0];
  for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, logits[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < m; ++j) s += std::exp(logits[j] - mx);
  const double lse = mx + std::log(s);
  return make_result({}, {lse - logits[label]}, "cross_entropy", {logits}, [label, lse](TensorImpl& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double pj = std::exp(p.data[j] - lse);
      g[j] += self.grad[0] * (pj - (j == label ? 1.0 : 0.0));
    }
  });
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (na <= kNormFloor || nb <= kNormFloor) throw ZeroNormError("cosine: near-zero norm");
  return ab / (na * nb);
}

// --- finite differences ------------------------------------------------------------------

namespace {
void check_step(double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("finite_diff_grad: step " + std::to_string(h) + " outside [1e-7, 1e-3]");
}
}  // namespace

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  check_step(h);
  NoGradGuard guard;
  Tensor probe = x.clone_leaf(false);
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = probe[i];
    probe.mutable_data()[i] = orig + h;
    const double fp = f(probe);
    probe.mutable_data()[i] = orig - h;
    const double fm = f(probe);
    probe.mutable_data()[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::from(x.shape(), std::move(g));
}

std::vector<double> finite_diff_grad_inplace(const std::function<double()>& f, Tensor& leaf, double h) {
  check_step(h);
  NoGradGuard guard;
  std::vector<double> g(leaf.numel());
  auto d = leaf.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = d[i];
    d[i] = orig + h;
    const double fp = f();
    d[i] = orig - h;
    const double fm = f();
    d[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace dear
