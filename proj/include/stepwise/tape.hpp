#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stepwise/tensor.hpp"

namespace stepwise {

enum class Mode { train, eval };

enum class OpKind {
  leaf,
  constant,
  matmul,
  add,
  multiply,
  scalar_scale,
  relu,
  gelu,
  sigmoid,
  tanh_fn,
  softmax,
  layer_norm,
  dropout,
  concat,
  slice,
  reduce_mean,
  reduce_sum,
  embedding_select,
  transpose,
  reshape,
  bce_with_logits,
  softmax_xent,
  masked_mae,
  l1_norm,
};

const char* op_name(OpKind kind);

// One executed primitive. value holds the forward result; grad is allocated
// during backward for nodes on the path to the loss. aux stores whatever the
// op's VJP needs beyond value (dropout mask, layer-norm inverse std).
struct TapeNode {
  OpKind kind = OpKind::leaf;
  std::vector<int> inputs;
  Tensor value;
  std::vector<double> grad;
  bool requires_grad = false;
  Tensor* external = nullptr;
  int axis = 0;
  int start = 0;
  int len = 0;
  double scalar = 0.0;
  std::uint64_t stream = 0;
  std::vector<std::int64_t> ids;
  std::vector<double> aux;
};

// Define-by-run tape: ops execute eagerly and append a node, so creation
// order is a topological order and backward is a single reverse sweep.
// A tape is single-threaded; distinct tapes may share read-only parameter
// tensors. Gradients accumulate into Tensor::grad of bound leaves.
class GraphTape {
 public:
  explicit GraphTape(Mode mode = Mode::train, std::uint64_t dropout_seed = 0)
      : mode_(mode), seed_(dropout_seed) {}

  Mode mode() const { return mode_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Binds external storage; backward adds into t->grad when t->requires_grad.
  int leaf(Tensor* t);
  // Copies the tensor in; never receives gradient.
  int constant(Tensor t);

  const Tensor& val(int id) const { return node(id).value; }
  // Valid after backward for nodes that were reached; zeros otherwise.
  Tensor grad_tensor(int id) const;

  int matmul(int a, int b);
  int add(int a, int b);
  int multiply(int a, int b);
  int scalar_scale(int a, double s);
  int relu(int a);
  int gelu(int a);
  int sigmoid(int a);
  int tanh_fn(int a);
  int softmax(int a, int axis);
  int layer_norm(int a, int axis, double eps = 1e-5);
  int dropout(int a, double rate);
  int concat(const std::vector<int>& xs, int axis);
  int concat(int a, int b, int axis) { return concat(std::vector<int>{a, b}, axis); }
  int slice(int a, int axis, int start, int len);
  // axis -1 reduces over all elements to shape [1].
  int reduce_mean(int a, int axis);
  int reduce_sum(int a, int axis);
  int embedding_select(int table, const std::vector<std::int64_t>& ids);
  // Swaps the last two axes.
  int transpose(int a);
  int reshape(int a, const std::vector<int>& shape);

  // Fused scalar losses. Targets and masks are expected to be constants.
  // Masked forms divide by the mask weight; an all-zero mask yields loss 0.
  int bce_with_logits(int logits, int targets);
  int bce_with_logits(int logits, int targets, int mask);
  int softmax_xent(int logits, const std::vector<std::int64_t>& labels);
  int masked_mae(int pred, int target, int mask);
  int l1_norm(int a);

  // Reverse accumulation from a scalar loss node. Gradients of bound leaves
  // are added into their Tensor::grad; unreached leaves receive exact zeros.
  void backward(int loss_id);

 private:
  TapeNode& node(int id);
  const TapeNode& node(int id) const;
  int push(TapeNode n);
  int unary(OpKind kind, int a);
  void check_id(int id, const char* who) const;

  std::vector<TapeNode> nodes_;
  Mode mode_;
  std::uint64_t seed_;
};

// Central-difference gradient audit. build must construct a fresh scalar loss
// from the current contents of params on each call and return its node id.
// Returns max over parameter entries of |analytic - numeric| / max(1, |analytic|).
double finite_diff_check(const std::function<int(GraphTape&)>& build,
                         const std::vector<Tensor*>& params, double eps = 1e-5,
                         Mode mode = Mode::eval, std::uint64_t dropout_seed = 0);

}  // namespace stepwise
