#pragma once

#include <functional>
#include <vector>

#include "stamp/tensor.hpp"

namespace stamp {

// Reverse-mode autodiff over a dynamically built tape. Nodes are created in
// topological order, so backward() is a single reverse sweep. Handles are
// plain indices; a Tape owns all node storage and is not thread-safe, but
// independent Tape instances may run in parallel.
class Tape {
 public:
  using Id = int32_t;
  static constexpr Id kNone = -1;

  Id leaf(Tensor t, bool requires_grad = false);

  const Tensor& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor& grad(Id id);
  bool requires_grad(Id id) const { return nodes_[static_cast<size_t>(id)].requires; }
  size_t num_nodes() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and sweeps the tape once. root must be scalar.
  void backward(Id root);

  // ----- elementwise -----
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id div(Id a, Id b);
  Id affine(Id x, double k, double c);  // k*x + c
  Id scale(Id x, double k) { return affine(x, k, 0.0); }
  Id relu(Id x);
  Id sigmoid(Id x);
  Id exp_(Id x);
  Id log_(Id x);
  Id square(Id x) { return mul(x, x); }
  Id clamp_hard(Id x, double lo, double hi);  // subgradient 0 outside [lo,hi]

  // ----- linear algebra -----
  Id matmul(Id a, Id b);      // [n,k]x[k,m] -> [n,m]
  Id matmul_nt(Id a, Id b);   // [n,k]x[m,k]^T -> [n,m]
  Id add_rows(Id x, Id row);  // [n,d] + [d] broadcast over rows
  Id slice_cols(Id x, int64_t c0, int64_t c1);
  Id concat_cols(const std::vector<Id>& xs);
  Id reshape(Id x, std::vector<int64_t> new_shape);

  // ----- row-wise nonlinear -----
  Id softmax_rows(Id x);
  Id layer_norm(Id x, Id gain, Id bias, double eps = 1e-10);

  // ----- convolutional -----
  Id conv2d(Id x, Id w, Id b, int stride, int pad);  // x [N,Ci,H,W], w [Co,Ci,k,k], b [Co]
  Id avg_pool2(Id x);                                // 2x2, stride 2
  Id global_avg_pool(Id x);                          // [N,C,H,W] -> [N,C]
  Id channel_affine(Id x, Id g, Id b);               // per-channel scale/shift
  Id channel_mul(Id x, Id m);                        // [N,C,H,W] * [C]

  // ----- reductions / losses -----
  Id sum_all(Id x);
  Id mean_all(Id x);
  Id cross_entropy_mean(Id logits, std::vector<int64_t> labels);

  // Per-element KL( Kumaraswamy(a,b) || Beta(alpha,1) ), closed form.
  Id kumaraswamy_kl(Id a, Id b, double alpha);

 private:
  struct Node {
    Tensor value;
    Tensor gradient;  // lazily sized
    bool requires = false;
    bool grad_alloc = false;
    std::function<void(Tape&)> back;  // empty for leaves
  };

  Id push(Tensor out, bool requires, std::function<void(Tape&)> back);
  void accumulate(Id id, const double* g, int64_t n);

  std::vector<Node> nodes_;
};

}  // namespace stamp
