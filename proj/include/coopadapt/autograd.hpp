#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "coopadapt/rng.hpp"
#include "coopadapt/tensor.hpp"

namespace coopadapt::ad {

// Reverse-mode autodiff over a dynamically built graph. Every op returns a
// new node holding its value; backward() walks the graph in reverse
// topological order. Graphs are rebuilt per training step and freed when the
// last Value handle drops.

class Node;
using Value = std::shared_ptr<Node>;

class Node {
 public:
  Tensor val;
  Tensor grad;  // allocated on first accumulation
  std::vector<Value> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents
  bool requires_grad = false;
  std::string name;  // set for parameters

  Tensor& ensure_grad() {
    if (grad.data.empty()) grad = Tensor::zeros(val.shape);
    return grad;
  }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

Value constant(Tensor t);
Value parameter(std::string name, Tensor t);

// Thread-local inference switch. Ops built while grad is disabled are plain
// leaves: no parents, no backward closures.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Runs backprop from a scalar root. Seeds d(root)/d(root) = 1.
void backward(const Value& root);

// ---- elementwise / shape ----
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double c);
Value add_scalar(const Value& a, double c);
Value relu(const Value& x);
Value sigmoid(const Value& x);
Value ew_max(const Value& a, const Value& b);  // ties route gradient to a
Value reshape(const Value& x, std::vector<std::int64_t> shape);
Value concat_channels(const Value& a, const Value& b);  // [Ca,H,W]+[Cb,H,W]

// ---- linear algebra ----
Value matmul(const Value& a, const Value& b);              // [m,k]x[k,n]
Value linear(const Value& x, const Value& w, const Value& b);  // x[m,k], w[k,n], b[n]

// ---- conv / grid ----
Value conv2d(const Value& x, const Value& w, const Value& b, int stride, int pad);
Value mul_bcast_hw(const Value& x, const Value& m);  // [C,H,W] * [H,W]
Value mean_hw(const Value& x);                       // [C,H,W] -> [C]
Value channel_max(const Value& x);                   // [A,H,W] -> [H,W]

// ---- pillar plumbing ----
// Per-(segment, column) max over rows of x grouped by seg ids (0..n_seg-1).
// Every segment must own at least one row. Ties keep the lowest row index.
Value segment_max(const Value& x, std::vector<int> seg, int n_seg);
// Place pillar feature rows [S,D] at flat cells (row-major H*W) -> [D,H,W].
Value scatter_hw(const Value& x, std::vector<int> cells, int height, int width);

// ---- reductions ----
Value sum(const Value& x);       // -> [1]
Value mean_all(const Value& x);  // -> [1]

// ---- regularizers / stochastic ----
Value dropout(const Value& x, double p, Rng& rng);  // train-time scaling 1/(1-p)

// ---- gradient reversal ----
// Identity forward; backward multiplies the upstream gradient by gamma.
Value grl(const Value& x, double gamma);

// ---- fused losses (numerically stable, exact backward) ----
// Elementwise binary cross-entropy with logits against constant labels.
Value bce_with_logits(const Value& logits, const Tensor& labels);
// Elementwise focal loss with logits: -alpha_t (1 - p_t)^gamma log(p_t),
// multiplied by a constant mask (0 drops the element).
Value focal_loss_with_logits(const Value& logits, const Tensor& targets, const Tensor& mask,
                             double alpha, double gamma);
// Elementwise smooth-L1 (Huber, delta) against a constant target, times mask.
Value smooth_l1(const Value& pred, const Tensor& target, const Tensor& mask, double delta);
// Per-cell cross-entropy of [K,H,W] logits against one constant class label.
Value softmax_ce_map(const Value& logits, int label);
// Elementwise product with a constant weight map of the same shape.
Value mul_const(const Value& x, const Tensor& w);

}  // namespace coopadapt::ad
