#include "csft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace csft {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("shape extents must be positive");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

NodePtr leaf_node(Shape shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  n->leaf = true;
  return n;
}

NodePtr op_node(Shape shape, std::vector<NodePtr> parents) {
  auto n = std::make_shared<TensorNode>();
  n->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  n->leaf = false;
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Grad buffer of `p`, allocated on demand; null when p does not need one.
double* grad_of(TensorNode* p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(leaf_node(shape, requires_grad));
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  auto n = leaf_node(shape, requires_grad);
  std::fill(n->value.begin(), n->value.end(), v);
  return Tensor(n);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data, bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw std::invalid_argument("Tensor::from: data length does not match shape");
  auto n = leaf_node(shape, requires_grad);
  n->value = std::move(data);
  return Tensor(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return full({1}, v, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item(): tensor is not scalar");
  return n_->value[0];
}

void Tensor::backward() const {
  if (!n_) throw std::logic_error("backward: undefined tensor");
  if (n_->numel() != 1) throw std::logic_error("backward: loss must be a scalar");

  // Reverse post-order over parent edges = consumers before producers.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({n_.get(), 0});
  visited.insert(n_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next++].get();
      if (p && !p->leaf && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  n_->ensure_grad();
  n_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop && node->has_grad()) node->backprop();
  }
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto n = op_node(a.shape(), {a.node_ptr(), b.node_ptr()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + bv[i];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    n->backprop = [self, pa, pb]() {
      const double* g = self->grad.data();
      if (double* da = grad_of(pa))
        for (size_t i = 0; i < self->grad.size(); ++i) da[i] += g[i];
      if (double* db = grad_of(pb))
        for (size_t i = 0; i < self->grad.size(); ++i) db[i] += g[i];
    };
  }
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto n = op_node(a.shape(), {a.node_ptr(), b.node_ptr()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] - bv[i];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    n->backprop = [self, pa, pb]() {
      const double* g = self->grad.data();
      if (double* da = grad_of(pa))
        for (size_t i = 0; i < self->grad.size(); ++i) da[i] += g[i];
      if (double* db = grad_of(pb))
        for (size_t i = 0; i < self->grad.size(); ++i) db[i] -= g[i];
    };
  }
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto n = op_node(a.shape(), {a.node_ptr(), b.node_ptr()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] * bv[i];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    n->backprop = [self, pa, pb]() {
      const double* g = self->grad.data();
      if (double* da = grad_of(pa))
        for (size_t i = 0; i < self->grad.size(); ++i) da[i] += g[i] * pb->value[i];
      if (double* db = grad_of(pb))
        for (size_t i = 0; i < self->grad.size(); ++i) db[i] += g[i] * pa->value[i];
    };
  }
  return Tensor(n);
}

Tensor affine(const Tensor& a, double scale, double shift) {
  auto n = op_node(a.shape(), {a.node_ptr()});
  const auto& av = a.data();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = scale * av[i] + shift;
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node();
    n->backprop = [self, pa, scale]() {
      const double* g = self->grad.data();
      if (double* da = grad_of(pa))
        for (size_t i = 0; i < self->grad.size(); ++i) da[i] += scale * g[i];
    };
  }
  return Tensor(n);
}

Tensor scale_by(const Tensor& s, const Tensor& a) {
  if (s.size() != 1) throw std::invalid_argument("scale_by: s must be scalar");
  auto n = op_node(a.shape(), {s.node_ptr(), a.node_ptr()});
  const double sv = s.data()[0];
  const auto& av = a.data();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = sv * av[i];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* ps = s.node();
    TensorNode* pa = a.node();
    n->backprop = [self, ps, pa]() {
      const double* g = self->grad.data();
      if (double* ds = grad_of(ps)) {
        double acc = 0.0;
        for (size_t i = 0; i < self->grad.size(); ++i) acc += g[i] * pa->value[i];
        ds[0] += acc;
      }
      if (double* da = grad_of(pa)) {
        const double sv2 = ps->value[0];
        for (size_t i = 0; i < self->grad.size(); ++i) da[i] += sv2 * g[i];
      }
    };
  }
  return Tensor(n);
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.ndim() != 1 || a.dim(a.ndim() - 1) != v.dim(0))
    throw std::invalid_argument("add_rowvec: trailing dims disagree");
  auto n = op_node(a.shape(), {a.node_ptr(), v.node_ptr()});
  const int w = v.dim(0);
  const auto& av = a.data();
  const auto& vv = v.data();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + vv[i % w];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node();
    TensorNode* pv = v.node();
    n->backprop = [self, pa, pv, w]() {
      const double* g = self->grad.data();
      if (double* da = grad_of(pa))
        for (size_t i = 0; i < self->grad.size(); ++i) da[i] += g[i];
      if (double* dv = grad_of(pv))
        for (size_t i = 0; i < self->grad.size(); ++i) dv[i % w] += g[i];
    };
  }
  return Tensor(n);
}

Tensor add_rowmat(const Tensor& a, const Tensor& m) {
  if (a.ndim() != 3 || m.ndim() != 2 || a.dim(1) != m.dim(0) || a.dim(2) != m.dim(1))
    throw std::invalid_argument("add_rowmat: expects a [B,T,d] and m [T,d]");
  auto n = op_node(a.shape(), {a.node_ptr(), m.node_ptr()});
  const size_t stride = m.data().size();
  const auto& av = a.data();
  const auto& mv = m.data();
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = av[i] + mv[i % stride];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node();
    TensorNode* pm = m.node();
    n->backprop = [self, pa, pm, stride]() {
      const double* g = self->grad.data();
      if (double* da = grad_of(pa))
        for (size_t i = 0; i < self->grad.size(); ++i) da[i] += g[i];
      if (double* dm = grad_of(pm))
        for (size_t i = 0; i < self->grad.size(); ++i) dm[i % stride] += g[i];
    };
  }
  return Tensor(n);
}

// ---- gemm kernels ----------------------------------------------------------

void gemm_nn_acc(double* c, const double* a, const double* b, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_acc(double* c, const double* a, const double* b, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

void gemm_tn_acc(double* c, const double* a, const double* b, int m, int n, int k) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<size_t>(p) * m;
    const double* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void softmax_row_inplace(double* row, int n) {
  double mx = row[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - mx);
    z += row[i];
  }
  const double inv = 1.0 / z;
  for (int i = 0; i < n; ++i) row[i] *= inv;
}

// ---- matmul ----------------------------------------------------------------

namespace {

struct MatmulDims {
  int batch;
  int m, n, k;
  bool b_batched;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool transpose_b,
                       const char* op) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw std::invalid_argument(std::string(op) + ": operands must have >= 2 dims");
  MatmulDims d{};
  d.m = a.dim(a.ndim() - 2);
  d.k = a.dim(a.ndim() - 1);
  const int bk = transpose_b ? b.dim(b.ndim() - 1) : b.dim(b.ndim() - 2);
  d.n = transpose_b ? b.dim(b.ndim() - 2) : b.dim(b.ndim() - 1);
  if (bk != d.k)
    throw std::invalid_argument(std::string(op) + ": inner dimensions disagree: " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  d.batch = static_cast<int>(a.size() / (static_cast<int64_t>(d.m) * d.k));
  d.b_batched = b.ndim() > 2;
  if (d.b_batched) {
    if (b.ndim() != a.ndim())
      throw std::invalid_argument(std::string(op) + ": batched operand rank mismatch");
    for (int i = 0; i < a.ndim() - 2; ++i)
      if (a.dim(i) != b.dim(i))
        throw std::invalid_argument(std::string(op) + ": leading batch dims disagree");
  }
  return d;
}

Shape matmul_out_shape(const Tensor& a, int n) {
  Shape s = a.shape();
  s.back() = n;
  return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulDims d = matmul_dims(a, b, false, "matmul");
  auto node = op_node(matmul_out_shape(a, d.n), {a.node_ptr(), b.node_ptr()});
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double* ov = node->value.data();
  const size_t a_str = static_cast<size_t>(d.m) * d.k;
  const size_t b_str = d.b_batched ? static_cast<size_t>(d.k) * d.n : 0;
  const size_t o_str = static_cast<size_t>(d.m) * d.n;
  for (int t = 0; t < d.batch; ++t)
    gemm_nn_acc(ov + t * o_str, av + t * a_str, bv + t * b_str, d.m, d.n, d.k);
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    node->backprop = [self, pa, pb, d, a_str, b_str, o_str]() {
      const double* g = self->grad.data();
      if (double* da = grad_of(pa)) {
        for (int t = 0; t < d.batch; ++t)
          gemm_nt_acc(da + t * a_str, g + t * o_str, pb->value.data() + t * b_str,
                      d.m, d.k, d.n);
      }
      if (double* db = grad_of(pb)) {
        for (int t = 0; t < d.batch; ++t)
          gemm_tn_acc(db + t * b_str, pa->value.data() + t * a_str, g + t * o_str,
                      d.k, d.n, d.m);
      }
    };
  }
  return Tensor(node);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const MatmulDims d = matmul_dims(a, b, true, "matmul_nt");
  auto node = op_node(matmul_out_shape(a, d.n), {a.node_ptr(), b.node_ptr()});
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double* ov = node->value.data();
  const size_t a_str = static_cast<size_t>(d.m) * d.k;
  const size_t b_str = d.b_batched ? static_cast<size_t>(d.n) * d.k : 0;
  const size_t o_str = static_cast<size_t>(d.m) * d.n;
  for (int t = 0; t < d.batch; ++t)
    gemm_nt_acc(ov + t * o_str, av + t * a_str, bv + t * b_str, d.m, d.n, d.k);
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* pa = a.node();
    TensorNode* pb = b.node();
    node->backprop = [self, pa, pb, d, a_str, b_str, o_str]() {
      const double* g = self->grad.data();
      if (double* da = grad_of(pa)) {
        for (int t = 0; t < d.batch; ++t)
          gemm_nn_acc(da + t * a_str, g + t * o_str, pb->value.data() + t * b_str,
                      d.m, d.k, d.n);
      }
      if (double* db = grad_of(pb)) {
        for (int t = 0; t < d.batch; ++t)
          gemm_tn_acc(db + t * b_str, g + t * o_str, pa->value.data() + t * a_str,
                      d.n, d.k, d.m);
      }
    };
  }
  return Tensor(node);
}

// ---- row-structured ops ----------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  auto n = op_node(x.shape(), {x.node_ptr()});
  const int w = x.dim(x.ndim() - 1);
  const int rows = static_cast<int>(x.size() / w);
  n->value = x.data();
  for (int r = 0; r < rows; ++r) softmax_row_inplace(n->value.data() + static_cast<size_t>(r) * w, w);
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = x.node();
    n->backprop = [self, pa, rows, w]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double* g = self->grad.data();
      const double* p = self->value.data();
      for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * w;
        double dot = 0.0;
        for (int i = 0; i < w; ++i) dot += g[off + i] * p[off + i];
        for (int i = 0; i < w; ++i) da[off + i] += p[off + i] * (g[off + i] - dot);
      }
    };
  }
  return Tensor(n);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int w = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != w || bias.dim(0) != w)
    throw std::invalid_argument("layer_norm: gain/bias must match last dimension");
  constexpr double kEps = 1e-5;
  auto n = op_node(x.shape(), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()});
  const int rows = static_cast<int>(x.size() / w);
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  for (int r = 0; r < rows; ++r) {
    const size_t off = static_cast<size_t>(r) * w;
    double mu = 0.0;
    for (int i = 0; i < w; ++i) mu += xv[off + i];
    mu /= w;
    double var = 0.0;
    for (int i = 0; i < w; ++i) {
      const double d = xv[off + i] - mu;
      var += d * d;
    }
    var /= w;
    const double inv = 1.0 / std::sqrt(var + kEps);
    for (int i = 0; i < w; ++i)
      n->value[off + i] = gv[i] * ((xv[off + i] - mu) * inv) + bv[i];
  }
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* px = x.node();
    TensorNode* pg = gain.node();
    TensorNode* pb = bias.node();
    n->backprop = [self, px, pg, pb, rows, w]() {
      const double* g = self->grad.data();
      const double* xv2 = px->value.data();
      const double* gv2 = pg->value.data();
      double* dx = grad_of(px);
      double* dg = grad_of(pg);
      double* db = grad_of(pb);
      std::vector<double> xh(static_cast<size_t>(w));
      for (int r = 0; r < rows; ++r) {
        const size_t off = static_cast<size_t>(r) * w;
        double mu = 0.0;
        for (int i = 0; i < w; ++i) mu += xv2[off + i];
        mu /= w;
        double var = 0.0;
        for (int i = 0; i < w; ++i) {
          const double d = xv2[off + i] - mu;
          var += d * d;
        }
        var /= w;
        const double inv = 1.0 / std::sqrt(var + kEps);
        for (int i = 0; i < w; ++i) xh[static_cast<size_t>(i)] = (xv2[off + i] - mu) * inv;
        if (dg)
          for (int i = 0; i < w; ++i) dg[i] += g[off + i] * xh[static_cast<size_t>(i)];
        if (db)
          for (int i = 0; i < w; ++i) db[i] += g[off + i];
        if (dx) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (int i = 0; i < w; ++i) {
            const double dxh = g[off + i] * gv2[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[static_cast<size_t>(i)];
          }
          mean_dxh /= w;
          mean_dxh_xh /= w;
          for (int i = 0; i < w; ++i) {
            const double dxh = g[off + i] * gv2[i];
            dx[off + i] += inv * (dxh - mean_dxh - xh[static_cast<size_t>(i)] * mean_dxh_xh);
          }
        }
      }
    };
  }
  return Tensor(n);
}

// ---- scalar nonlinearities --------------------------------------------------

Tensor gelu(const Tensor& x) {
  auto n = op_node(x.shape(), {x.node_ptr()});
  const auto& xv = x.data();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = x.node();
    n->backprop = [self, pa]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double* g = self->grad.data();
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      for (size_t i = 0; i < self->grad.size(); ++i) {
        const double v = pa->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        da[i] += g[i] * (cdf + v * pdf);
      }
    };
  }
  return Tensor(n);
}

Tensor sigmoid(const Tensor& x) {
  auto n = op_node(x.shape(), {x.node_ptr()});
  const auto& xv = x.data();
  for (size_t i = 0; i < n->value.size(); ++i) {
    const double v = xv[i];
    n->value[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                           : std::exp(v) / (1.0 + std::exp(v));
  }
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = x.node();
    n->backprop = [self, pa]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double* g = self->grad.data();
      const double* y = self->value.data();
      for (size_t i = 0; i < self->grad.size(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
    };
  }
  return Tensor(n);
}

Tensor xlogx(const Tensor& x) {
  auto n = op_node(x.shape(), {x.node_ptr()});
  const auto& xv = x.data();
  for (size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = xv[i] > 0.0 ? xv[i] * std::log(xv[i]) : 0.0;
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = x.node();
    n->backprop = [self, pa]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double* g = self->grad.data();
      for (size_t i = 0; i < self->grad.size(); ++i) {
        const double v = pa->value[i];
        if (v > 0.0) da[i] += g[i] * (std::log(v) + 1.0);
      }
    };
  }
  return Tensor(n);
}

// ---- reductions / structural ops --------------------------------------------

Tensor sum(const Tensor& x) {
  auto n = op_node({1}, {x.node_ptr()});
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  n->value[0] = acc;
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = x.node();
    n->backprop = [self, pa]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double g = self->grad[0];
      for (size_t i = 0; i < pa->value.size(); ++i) da[i] += g;
    };
  }
  return Tensor(n);
}

Tensor mean_over_rows(const Tensor& x) {
  if (x.ndim() != 2) throw std::invalid_argument("mean_over_rows: expects [B,K]");
  const int b = x.dim(0), k = x.dim(1);
  auto n = op_node({k}, {x.node_ptr()});
  const auto& xv = x.data();
  const double inv = 1.0 / b;
  for (int r = 0; r < b; ++r)
    for (int j = 0; j < k; ++j) n->value[static_cast<size_t>(j)] += xv[static_cast<size_t>(r) * k + j] * inv;
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = x.node();
    n->backprop = [self, pa, b, k, inv]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double* g = self->grad.data();
      for (int r = 0; r < b; ++r)
        for (int j = 0; j < k; ++j) da[static_cast<size_t>(r) * k + j] += g[j] * inv;
    };
  }
  return Tensor(n);
}

Tensor select_token(const Tensor& x, int t) {
  if (x.ndim() != 3) throw std::invalid_argument("select_token: expects [B,T,d]");
  const int b = x.dim(0), tt = x.dim(1), d = x.dim(2);
  if (t < 0 || t >= tt) throw std::out_of_range("select_token: index out of range");
  auto n = op_node({b, d}, {x.node_ptr()});
  const auto& xv = x.data();
  for (int r = 0; r < b; ++r)
    std::copy_n(xv.data() + (static_cast<size_t>(r) * tt + t) * d, d,
                n->value.data() + static_cast<size_t>(r) * d);
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = x.node();
    n->backprop = [self, pa, b, tt, d, t]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double* g = self->grad.data();
      for (int r = 0; r < b; ++r) {
        double* dst = da + (static_cast<size_t>(r) * tt + t) * d;
        const double* src = g + static_cast<size_t>(r) * d;
        for (int i = 0; i < d; ++i) dst[i] += src[i];
      }
    };
  }
  return Tensor(n);
}

Tensor permute_tokens(const Tensor& x, const std::vector<int>& perm) {
  if (x.ndim() != 3) throw std::invalid_argument("permute_tokens: expects [B,T,d]");
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (static_cast<int>(perm.size()) != t)
    throw std::invalid_argument("permute_tokens: permutation length != T");
  std::vector<char> seen(static_cast<size_t>(t), 0);
  for (int p : perm) {
    if (p < 0 || p >= t || seen[static_cast<size_t>(p)])
      throw std::invalid_argument("permute_tokens: not a permutation");
    seen[static_cast<size_t>(p)] = 1;
  }
  auto n = op_node(x.shape(), {x.node_ptr()});
  const auto& xv = x.data();
  for (int r = 0; r < b; ++r)
    for (int i = 0; i < t; ++i)
      std::copy_n(xv.data() + (static_cast<size_t>(r) * t + perm[static_cast<size_t>(i)]) * d, d,
                  n->value.data() + (static_cast<size_t>(r) * t + i) * d);
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = x.node();
    std::vector<int> perm_copy = perm;
    n->backprop = [self, pa, b, t, d, perm_copy]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double* g = self->grad.data();
      for (int r = 0; r < b; ++r)
        for (int i = 0; i < t; ++i) {
          double* dst = da + (static_cast<size_t>(r) * t + perm_copy[static_cast<size_t>(i)]) * d;
          const double* src = g + (static_cast<size_t>(r) * t + i) * d;
          for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    };
  }
  return Tensor(n);
}

Tensor extract_patches(const Tensor& img, int patch) {
  if (img.ndim() != 4) throw std::invalid_argument("extract_patches: expects [B,C,H,W]");
  const int b = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw std::invalid_argument("extract_patches: image dims not divisible by patch");
  const int gy = h / patch, gx = w / patch;
  const int np = gy * gx;
  const int f = c * patch * patch;
  auto n = op_node({b, np, f}, {img.node_ptr()});
  const auto& iv = img.data();
  auto src_index = [=](int bi, int ci, int y, int x) {
    return ((static_cast<size_t>(bi) * c + ci) * h + y) * w + x;
  };
  for (int bi = 0; bi < b; ++bi)
    for (int py = 0; py < gy; ++py)
      for (int px = 0; px < gx; ++px) {
        const size_t base = (static_cast<size_t>(bi) * np + py * gx + px) * f;
        size_t o = base;
        for (int ci = 0; ci < c; ++ci)
          for (int dy = 0; dy < patch; ++dy)
            for (int dx = 0; dx < patch; ++dx)
              n->value[o++] = iv[src_index(bi, ci, py * patch + dy, px * patch + dx)];
      }
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = img.node();
    n->backprop = [self, pa, b, c, h, w, patch, gy, gx, np, f, src_index]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double* g = self->grad.data();
      for (int bi = 0; bi < b; ++bi)
        for (int py = 0; py < gy; ++py)
          for (int px = 0; px < gx; ++px) {
            const size_t base = (static_cast<size_t>(bi) * np + py * gx + px) * f;
            size_t o = base;
            for (int ci = 0; ci < c; ++ci)
              for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                  da[src_index(bi, ci, py * patch + dy, px * patch + dx)] += g[o++];
          }
    };
  }
  return Tensor(n);
}

Tensor prepend_tokens(const Tensor& patches, const Tensor& cls, const Tensor& sty) {
  if (patches.ndim() != 3) throw std::invalid_argument("prepend_tokens: expects [B,NP,d]");
  const int b = patches.dim(0), np = patches.dim(1), d = patches.dim(2);
  if (cls.ndim() != 1 || sty.ndim() != 1 || cls.dim(0) != d || sty.dim(0) != d)
    throw std::invalid_argument("prepend_tokens: token dims disagree");
  const int t = np + 2;
  auto n = op_node({b, t, d}, {patches.node_ptr(), cls.node_ptr(), sty.node_ptr()});
  const auto& pv = patches.data();
  for (int r = 0; r < b; ++r) {
    double* row = n->value.data() + static_cast<size_t>(r) * t * d;
    std::copy_n(cls.data().data(), d, row);
    std::copy_n(sty.data().data(), d, row + d);
    std::copy_n(pv.data() + static_cast<size_t>(r) * np * d, static_cast<size_t>(np) * d, row + 2 * d);
  }
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pp = patches.node();
    TensorNode* pc = cls.node();
    TensorNode* ps = sty.node();
    n->backprop = [self, pp, pc, ps, b, np, d, t]() {
      const double* g = self->grad.data();
      double* dp = grad_of(pp);
      double* dc = grad_of(pc);
      double* ds = grad_of(ps);
      for (int r = 0; r < b; ++r) {
        const double* row = g + static_cast<size_t>(r) * t * d;
        if (dc)
          for (int i = 0; i < d; ++i) dc[i] += row[i];
        if (ds)
          for (int i = 0; i < d; ++i) ds[i] += row[d + i];
        if (dp) {
          double* dst = dp + static_cast<size_t>(r) * np * d;
          const double* src = row + 2 * d;
          for (size_t i = 0; i < static_cast<size_t>(np) * d; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return Tensor(n);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     double smoothing) {
  if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: expects [B,K]");
  const int b = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != b)
    throw std::invalid_argument("cross_entropy: label count != batch");
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw std::invalid_argument("cross_entropy: smoothing must be in [0,1)");
  for (int y : labels)
    if (y < 0 || y >= k) throw std::out_of_range("cross_entropy: label out of range");

  auto n = op_node({1}, {logits.node_ptr()});
  const auto& zv = logits.data();
  const double unif = smoothing / k;
  const double hot = 1.0 - smoothing;
  double total = 0.0;
  for (int r = 0; r < b; ++r) {
    const double* z = zv.data() + static_cast<size_t>(r) * k;
    double mx = z[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, z[i]);
    double lse = 0.0;
    for (int i = 0; i < k; ++i) lse += std::exp(z[i] - mx);
    lse = std::log(lse) + mx;
    double qz = hot * z[labels[static_cast<size_t>(r)]];
    for (int i = 0; i < k; ++i) qz += unif * z[i];
    total += lse - qz;
  }
  n->value[0] = total / b;
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = logits.node();
    std::vector<int> labels_copy = labels;
    n->backprop = [self, pa, labels_copy, b, k, unif, hot]() {
      double* da = grad_of(pa);
      if (!da) return;
      const double g = self->grad[0] / b;
      std::vector<double> p(static_cast<size_t>(k));
      for (int r = 0; r < b; ++r) {
        const double* z = pa->value.data() + static_cast<size_t>(r) * k;
        std::copy_n(z, k, p.data());
        softmax_row_inplace(p.data(), k);
        double* row = da + static_cast<size_t>(r) * k;
        for (int i = 0; i < k; ++i) row[i] += g * (p[static_cast<size_t>(i)] - unif);
        row[labels_copy[static_cast<size_t>(r)]] -= g * hot;
      }
    };
  }
  return Tensor(n);
}

}  // namespace csft
