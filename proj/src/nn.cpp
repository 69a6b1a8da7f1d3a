#include "stepwise/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "stepwise/errors.hpp"

namespace stepwise {

Tensor* ParamMap::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw std::logic_error("ParamMap: duplicate parameter " + name);
  t.requires_grad = true;
  t.ensure_grad();
  items_.push_back(std::make_unique<std::pair<std::string, Tensor>>(name, std::move(t)));
  index_[name] = items_.size() - 1;
  return &items_.back()->second;
}

Tensor* ParamMap::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::logic_error("ParamMap: unknown parameter " + name);
  return &items_[it->second]->second;
}

const Tensor* ParamMap::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::logic_error("ParamMap: unknown parameter " + name);
  return &items_[it->second]->second;
}

std::vector<std::pair<std::string, Tensor*>> ParamMap::entries() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.reserve(items_.size());
  for (auto& it : items_) out.emplace_back(it->first, &it->second);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ParamMap::entries() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(items_.size());
  for (const auto& it : items_) out.emplace_back(it->first, &it->second);
  return out;
}

std::vector<Tensor*> ParamMap::with_prefix(const std::string& prefix) {
  std::vector<Tensor*> out;
  for (auto& it : items_)
    if (it->first.rfind(prefix, 0) == 0) out.push_back(&it->second);
  return out;
}

void ParamMap::zero_grads() {
  for (auto& it : items_) {
    it->second.ensure_grad();
    it->second.zero_grad();
  }
}

int Ctx::leaf(Tensor* p) {
  auto it = leaf_ids.find(p);
  if (it != leaf_ids.end()) return it->second;
  const int id = tape.leaf(p);
  leaf_ids.emplace(p, id);
  return id;
}

void add_linear_params(ParamMap& pm, const std::string& prefix, int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w = Tensor::zeros({in, out});
  for (auto& v : w.data) v = rng.uniform(-bound, bound);
  pm.add(prefix + ".w", std::move(w));
  pm.add(prefix + ".b", Tensor::zeros({out}));
}

int linear(Ctx& ctx, const std::string& prefix, int x) {
  const int w = ctx.param(prefix + ".w");
  const int b = ctx.param(prefix + ".b");
  return ctx.tape.add(ctx.tape.matmul(x, w), b);
}

void add_block_params(ParamMap& pm, const std::string& prefix, int m, int ffn_dim, Rng& rng) {
  add_linear_params(pm, prefix + ".q", m, m, rng);
  add_linear_params(pm, prefix + ".k", m, m, rng);
  add_linear_params(pm, prefix + ".v", m, m, rng);
  add_linear_params(pm, prefix + ".o", m, m, rng);
  add_linear_params(pm, prefix + ".ffn1", m, ffn_dim, rng);
  add_linear_params(pm, prefix + ".ffn2", ffn_dim, m, rng);
}

int transformer_block(Ctx& ctx, const std::string& prefix, int x, int heads, double dropout,
                      double attention_dropout, int mask, std::vector<int>* head_probs) {
  GraphTape& t = ctx.tape;
  const auto& shape = t.val(x).shape;
  if (shape.size() != 3) throw ShapeError("transformer_block: expected [n, s, m], got " + shape_str(shape));
  const int m = shape[2];
  if (heads < 1 || m % heads != 0)
    throw ShapeError("transformer_block: " + std::to_string(heads) + " heads do not divide token dim " +
                     std::to_string(m));
  const int dh = m / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const int h1 = t.layer_norm(x, 2);
  const int q = linear(ctx, prefix + ".q", h1);
  const int k = linear(ctx, prefix + ".k", h1);
  const int v = linear(ctx, prefix + ".v", h1);
  std::vector<int> head_out;
  head_out.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const int qh = t.slice(q, 2, h * dh, dh);
    const int kh = t.slice(k, 2, h * dh, dh);
    const int vh = t.slice(v, 2, h * dh, dh);
    int scores = t.scalar_scale(t.matmul(qh, t.transpose(kh)), scale);
    if (mask >= 0) scores = t.add(scores, mask);
    const int probs = t.softmax(scores, 2);
    if (head_probs) head_probs->push_back(probs);
    const int att = t.dropout(probs, attention_dropout);
    head_out.push_back(t.matmul(att, vh));
  }
  const int merged = heads == 1 ? head_out[0] : t.concat(head_out, 2);
  const int attn = t.dropout(linear(ctx, prefix + ".o", merged), dropout);
  const int x2 = t.add(x, attn);

  const int h2 = t.layer_norm(x2, 2);
  const int f1 = t.gelu(linear(ctx, prefix + ".ffn1", h2));
  const int f2 = t.dropout(linear(ctx, prefix + ".ffn2", f1), dropout);
  return t.add(x2, f2);
}

Tensor causal_mask(int T) {
  Tensor m = Tensor::zeros({T, T});
  for (int i = 0; i < T; ++i)
    for (int j = i + 1; j < T; ++j) m.at(i, j) = -1e9;
  return m;
}

Tensor sinusoidal_positions(int T, int dim) {
  Tensor pe = Tensor::zeros({T, dim});
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < dim; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe.at(t, i) = std::sin(t * rate);
      if (i + 1 < dim) pe.at(t, i + 1) = std::cos(t * rate);
    }
  return pe;
}

}  // namespace stepwise
