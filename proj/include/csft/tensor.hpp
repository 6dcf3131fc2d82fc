#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace csft {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// One node of the recorded computation. Op nodes hold owning references to
// their parents and a closure that pushes the node's gradient into them, so
// the whole graph dies with the last handle to its result.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  bool has_grad() const { return grad.size() == value.size(); }
};

using NodePtr = std::shared_ptr<TensorNode>;

// Value-semantics handle over a shared node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return n_->numel(); }

  std::vector<double>& data() { return n_->value; }
  const std::vector<double>& data() const { return n_->value; }
  double item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) {
    n_->requires_grad = rg;
  }

  bool has_grad() const { return n_->has_grad(); }
  std::vector<double>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<double>& grad() const { return n_->grad; }
  void zero_grad() {
    if (n_->has_grad()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  // Reverse-mode sweep from this (scalar) node; accumulates into every
  // reachable requires_grad tensor. Repeated calls accumulate additively.
  void backward() const;

  TensorNode* node() const { return n_.get(); }
  const NodePtr& node_ptr() const { return n_; }

 private:
  NodePtr n_;
};

// ---- differentiable operations -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor sub(const Tensor& a, const Tensor& b);           // same shape
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor affine(const Tensor& a, double scale, double shift);
Tensor scale_by(const Tensor& s, const Tensor& a);      // s scalar tensor
Tensor add_rowvec(const Tensor& a, const Tensor& v);    // a [...,n], v [n]
Tensor add_rowmat(const Tensor& a, const Tensor& m);    // a [B,T,d], m [T,d]

// a [...,m,k] x b [k,n] (b broadcast over leading dims) or b [...,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// a [...,m,k] x b [...,n,k]^T -> [...,m,n].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor softmax_rows(const Tensor& x);                   // along last dim
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor xlogx(const Tensor& x);                          // x*ln(x), 0 at x<=0
Tensor sum(const Tensor& x);                            // -> scalar
Tensor mean_over_rows(const Tensor& x);                 // [B,K] -> [K]
Tensor select_token(const Tensor& x, int t);            // [B,T,d] -> [B,d]
Tensor permute_tokens(const Tensor& x, const std::vector<int>& perm);
Tensor extract_patches(const Tensor& img, int patch);   // [B,C,H,W] -> [B,NP,C*P*P]
Tensor prepend_tokens(const Tensor& patches, const Tensor& cls,
                      const Tensor& sty);               // -> [B,NP+2,d]

// Mean over the batch of label-smoothed negative log-likelihood.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     double smoothing);

// ---- raw kernels (exposed for value-only code paths) ----------------------

void gemm_nn_acc(double* c, const double* a, const double* b, int m, int n, int k);
void gemm_nt_acc(double* c, const double* a, const double* b, int m, int n, int k);
void gemm_tn_acc(double* c, const double* a, const double* b, int m, int n, int k);
void softmax_row_inplace(double* row, int n);

// Restores requires_grad flags on destruction; used to confine a backward
// sweep to one parameter group.
class RequiresGradScope {
 public:
  RequiresGradScope() = default;
  ~RequiresGradScope() { release(); }
  RequiresGradScope(const RequiresGradScope&) = delete;
  RequiresGradScope& operator=(const RequiresGradScope&) = delete;

  void disable(const Tensor& t) {
    saved_.emplace_back(t.node(), t.requires_grad());
    t.node()->requires_grad = false;
  }
  void disable(const std::vector<Tensor>& ts) {
    for (const auto& t : ts) disable(t);
  }
  void release() {
    for (auto it = saved_.rbegin(); it != saved_.rend(); ++it)
      it->first->requires_grad = it->second;
    saved_.clear();
  }

 private:
  std::vector<std::pair<TensorNode*, bool>> saved_;
};

}  // namespace csft
