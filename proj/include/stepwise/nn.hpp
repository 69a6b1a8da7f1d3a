#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stepwise/rng.hpp"
#include "stepwise/tape.hpp"
#include "stepwise/tensor.hpp"

namespace stepwise {

// Named parameter tensors with stable addresses and registration order.
// Optimizer state and checkpoints key off the names.
class ParamMap {
 public:
  Tensor* add(const std::string& name, Tensor t);
  Tensor* get(const std::string& name);
  const Tensor* get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t count() const { return items_.size(); }
  std::vector<std::pair<std::string, Tensor*>> entries();
  std::vector<std::pair<std::string, const Tensor*>> entries() const;
  std::vector<Tensor*> with_prefix(const std::string& prefix);
  void zero_grads();

 private:
  std::vector<std::unique_ptr<std::pair<std::string, Tensor>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-forward-pass context: one tape plus a leaf cache so each parameter
// tensor becomes a single tape node no matter how often it is referenced.
struct Ctx {
  GraphTape& tape;
  ParamMap& params;
  std::unordered_map<const Tensor*, int> leaf_ids;

  Ctx(GraphTape& t, ParamMap& p) : tape(t), params(p) {}
  int leaf(Tensor* p);
  int param(const std::string& name) { return leaf(params.get(name)); }
};

// W drawn from U(-1/sqrt(fan_in), +1/sqrt(fan_in)), b zero.
void add_linear_params(ParamMap& pm, const std::string& prefix, int in, int out, Rng& rng);
// x @ W + b for x of shape [n,in] or [b,n,in].
int linear(Ctx& ctx, const std::string& prefix, int x);

// Pre-norm transformer block over token sequences [n, s, m]:
// x + attn(ln(x)) then + ffn(ln(.)), multi-head self-attention, GELU feed
// forward of width ffn_dim. mask, when >= 0, is an additive [s, s] score
// offset (0 keep, large negative drop). head_probs, when given, receives the
// node id of each head's post-softmax attention [n, s, s].
void add_block_params(ParamMap& pm, const std::string& prefix, int m, int ffn_dim, Rng& rng);
int transformer_block(Ctx& ctx, const std::string& prefix, int x, int heads, double dropout,
                      double attention_dropout, int mask = -1, std::vector<int>* head_probs = nullptr);

// Additive causal mask: 0 at or below the diagonal, -1e9 above, so softmax
// assigns masked positions exactly zero weight by underflow.
Tensor causal_mask(int T);
Tensor sinusoidal_positions(int T, int dim);

}  // namespace stepwise
