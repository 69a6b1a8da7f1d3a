#include "stepwise/tape.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "stepwise/errors.hpp"
#include "stepwise/rng.hpp"

namespace stepwise {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

// Factors a shape around one axis: idx = (o*n + i)*inner + j.
struct AxisView {
  std::int64_t outer = 1;
  std::int64_t n = 1;
  std::int64_t inner = 1;
};

AxisView axis_view(const std::vector<int>& shape, int axis) {
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  v.n = shape[static_cast<std::size_t>(axis)];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
    v.inner *= shape[static_cast<std::size_t>(i)];
  return v;
}

int norm_axis(const char* op, int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return axis;
}

// Shapes and strides padded to rank 3 with leading ones so elementwise
// broadcasting is always a fixed triple loop. A broadcast dimension gets
// stride zero.
struct Bcast {
  std::vector<int> out_shape;
  int d0 = 1, d1 = 1, d2 = 1;
  std::int64_t sa[3] = {0, 0, 0};
  std::int64_t sb[3] = {0, 0, 0};
};

void pad_strides(const std::vector<int>& shape, const std::vector<int>& out, std::int64_t s[3]) {
  const int r = static_cast<int>(shape.size());
  const int ro = static_cast<int>(out.size());
  std::int64_t own[3] = {0, 0, 0};
  std::int64_t acc = 1;
  for (int i = r - 1; i >= 0; --i) {
    own[i] = acc;
    acc *= shape[static_cast<std::size_t>(i)];
  }
  for (int k = 0; k < 3; ++k) s[k] = 0;
  for (int j = 0; j < ro; ++j) {
    const int i = j - (ro - r);
    const int pad = 3 - ro;
    if (i < 0) continue;
    if (shape[static_cast<std::size_t>(i)] == 1 && out[static_cast<std::size_t>(j)] != 1) continue;
    s[pad + j] = own[i];
  }
}

Bcast broadcast_plan(const char* op, const std::vector<int>& a, const std::vector<int>& b) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Bcast p;
  p.out_shape.assign(static_cast<std::size_t>(r), 1);
  for (int i = 1; i <= r; ++i) {
    const int da = i <= ra ? a[static_cast<std::size_t>(ra - i)] : 1;
    const int db = i <= rb ? b[static_cast<std::size_t>(rb - i)] : 1;
    if (da != db && da != 1 && db != 1)
      shape_fail(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out_shape[static_cast<std::size_t>(r - i)] = std::max(da, db);
  }
  int dims[3] = {1, 1, 1};
  for (int j = 0; j < r; ++j) dims[3 - r + j] = p.out_shape[static_cast<std::size_t>(j)];
  p.d0 = dims[0];
  p.d1 = dims[1];
  p.d2 = dims[2];
  pad_strides(a, p.out_shape, p.sa);
  pad_strides(b, p.out_shape, p.sb);
  return p;
}

// C[n,m] += A[n,k] @ B[k,m]
void mm_nn(const double* A, const double* B, double* C, std::int64_t n, std::int64_t k, std::int64_t m) {
  for (std::int64_t i = 0; i < n; ++i) {
    double* c = C + i * m;
    const double* a = A + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + p * m;
      for (std::int64_t j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

// C[n,m] += A[n,k] @ B[m,k]^T
void mm_nt(const double* A, const double* B, double* C, std::int64_t n, std::int64_t k, std::int64_t m) {
  for (std::int64_t i = 0; i < n; ++i) {
    const double* a = A + i * k;
    double* c = C + i * m;
    for (std::int64_t j = 0; j < m; ++j) {
      const double* b = B + j * k;
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) s += a[p] * b[p];
      c[j] += s;
    }
  }
}

// C[n,m] += A[k,n]^T @ B[k,m]
void mm_tn(const double* A, const double* B, double* C, std::int64_t n, std::int64_t k, std::int64_t m) {
  for (std::int64_t p = 0; p < k; ++p) {
    const double* a = A + p * n;
    const double* b = B + p * m;
    for (std::int64_t i = 0; i < n; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + i * m;
      for (std::int64_t j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::multiply: return "multiply";
    case OpKind::scalar_scale: return "scalar-scale";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh_fn: return "tanh";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer-norm";
    case OpKind::dropout: return "dropout";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::reduce_mean: return "reduce-mean";
    case OpKind::reduce_sum: return "reduce-sum";
    case OpKind::embedding_select: return "embedding-select";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::bce_with_logits: return "bce-with-logits";
    case OpKind::softmax_xent: return "softmax-xent";
    case OpKind::masked_mae: return "masked-mae";
    case OpKind::l1_norm: return "l1-norm";
  }
  return "?";
}

TapeNode& GraphTape::node(int id) {
  check_id(id, "node");
  return nodes_[static_cast<std::size_t>(id)];
}

const TapeNode& GraphTape::node(int id) const {
  check_id(id, "node");
  return nodes_[static_cast<std::size_t>(id)];
}

void GraphTape::check_id(int id, const char* who) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw std::logic_error(std::string(who) + ": node id " + std::to_string(id) + " not on this tape");
}

int GraphTape::push(TapeNode n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int GraphTape::leaf(Tensor* t) {
  if (t == nullptr) throw std::logic_error("leaf: null tensor");
  if (!t->all_finite()) throw NumericError("NaN-input: leaf tensor of shape " + t->shape_string() + " is not finite");
  TapeNode n;
  n.kind = OpKind::leaf;
  n.value = *t;
  n.requires_grad = t->requires_grad;
  n.external = t;
  return push(std::move(n));
}

int GraphTape::constant(Tensor t) {
  if (!t.all_finite()) throw NumericError("NaN-input: constant tensor of shape " + t.shape_string() + " is not finite");
  TapeNode n;
  n.kind = OpKind::constant;
  n.value = std::move(t);
  n.requires_grad = false;
  return push(std::move(n));
}

Tensor GraphTape::grad_tensor(int id) const {
  const TapeNode& n = node(id);
  Tensor g = Tensor::zeros(n.value.shape);
  if (!n.grad.empty()) g.data = n.grad;
  return g;
}

int GraphTape::matmul(int a, int b) {
  const TapeNode& na = node(a);
  const TapeNode& nb = node(b);
  const auto& A = na.value;
  const auto& B = nb.value;
  TapeNode n;
  n.kind = OpKind::matmul;
  n.inputs = {a, b};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  if (A.rank() == 2 && B.rank() == 2) {
    if (A.shape[1] != B.shape[0])
      shape_fail("matmul", shape_str(A.shape) + " @ " + shape_str(B.shape));
    n.value = Tensor::zeros({A.shape[0], B.shape[1]});
    mm_nn(A.data.data(), B.data.data(), n.value.data.data(), A.shape[0], A.shape[1], B.shape[1]);
  } else if (A.rank() == 3 && B.rank() == 3) {
    if (A.shape[0] != B.shape[0] || A.shape[2] != B.shape[1])
      shape_fail("matmul", shape_str(A.shape) + " @ " + shape_str(B.shape));
    const std::int64_t bs = A.shape[0], nn = A.shape[1], kk = A.shape[2], mm = B.shape[2];
    n.value = Tensor::zeros({A.shape[0], A.shape[1], B.shape[2]});
    for (std::int64_t i = 0; i < bs; ++i)
      mm_nn(A.data.data() + i * nn * kk, B.data.data() + i * kk * mm,
            n.value.data.data() + i * nn * mm, nn, kk, mm);
  } else if (A.rank() == 3 && B.rank() == 2) {
    if (A.shape[2] != B.shape[0])
      shape_fail("matmul", shape_str(A.shape) + " @ " + shape_str(B.shape));
    n.value = Tensor::zeros({A.shape[0], A.shape[1], B.shape[1]});
    mm_nn(A.data.data(), B.data.data(), n.value.data.data(),
          static_cast<std::int64_t>(A.shape[0]) * A.shape[1], A.shape[2], B.shape[1]);
  } else {
    shape_fail("matmul", "unsupported ranks " + shape_str(A.shape) + " @ " + shape_str(B.shape));
  }
  return push(std::move(n));
}

int GraphTape::add(int a, int b) {
  const TapeNode& na = node(a);
  const TapeNode& nb = node(b);
  Bcast p = broadcast_plan("add", na.value.shape, nb.value.shape);
  TapeNode n;
  n.kind = OpKind::add;
  n.inputs = {a, b};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  n.value = Tensor::zeros(p.out_shape);
  const double* da = na.value.data.data();
  const double* db = nb.value.data.data();
  double* out = n.value.data.data();
  std::int64_t idx = 0;
  for (std::int64_t i = 0; i < p.d0; ++i)
    for (std::int64_t j = 0; j < p.d1; ++j)
      for (std::int64_t k = 0; k < p.d2; ++k, ++idx)
        out[idx] = da[i * p.sa[0] + j * p.sa[1] + k * p.sa[2]] + db[i * p.sb[0] + j * p.sb[1] + k * p.sb[2]];
  return push(std::move(n));
}

int GraphTape::multiply(int a, int b) {
  const TapeNode& na = node(a);
  const TapeNode& nb = node(b);
  Bcast p = broadcast_plan("multiply", na.value.shape, nb.value.shape);
  TapeNode n;
  n.kind = OpKind::multiply;
  n.inputs = {a, b};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  n.value = Tensor::zeros(p.out_shape);
  const double* da = na.value.data.data();
  const double* db = nb.value.data.data();
  double* out = n.value.data.data();
  std::int64_t idx = 0;
  for (std::int64_t i = 0; i < p.d0; ++i)
    for (std::int64_t j = 0; j < p.d1; ++j)
      for (std::int64_t k = 0; k < p.d2; ++k, ++idx)
        out[idx] = da[i * p.sa[0] + j * p.sa[1] + k * p.sa[2]] * db[i * p.sb[0] + j * p.sb[1] + k * p.sb[2]];
  return push(std::move(n));
}

int GraphTape::unary(OpKind kind, int a) {
  const TapeNode& na = node(a);
  TapeNode n;
  n.kind = kind;
  n.inputs = {a};
  n.requires_grad = na.requires_grad;
  n.value = na.value;
  n.value.requires_grad = false;
  n.value.grad.clear();
  return push(std::move(n));
}

int GraphTape::scalar_scale(int a, double s) {
  const int id = unary(OpKind::scalar_scale, a);
  TapeNode& n = node(id);
  n.scalar = s;
  for (auto& v : n.value.data) v *= s;
  return id;
}

int GraphTape::relu(int a) {
  const int id = unary(OpKind::relu, a);
  for (auto& v : node(id).value.data) v = v > 0.0 ? v : 0.0;
  return id;
}

int GraphTape::gelu(int a) {
  const int id = unary(OpKind::gelu, a);
  for (auto& v : node(id).value.data) {
    const double u = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return id;
}

int GraphTape::sigmoid(int a) {
  const int id = unary(OpKind::sigmoid, a);
  for (auto& v : node(id).value.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return id;
}

int GraphTape::tanh_fn(int a) {
  const int id = unary(OpKind::tanh_fn, a);
  for (auto& v : node(id).value.data) v = std::tanh(v);
  return id;
}

int GraphTape::softmax(int a, int axis) {
  const int id = unary(OpKind::softmax, a);
  TapeNode& n = node(id);
  n.axis = norm_axis("softmax", axis, n.value.rank());
  const AxisView v = axis_view(n.value.shape, n.axis);
  double* d = n.value.data.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t in = 0; in < v.inner; ++in) {
      double* base = d + o * v.n * v.inner + in;
      double mx = base[0];
      for (std::int64_t i = 1; i < v.n; ++i) mx = std::max(mx, base[i * v.inner]);
      double sum = 0.0;
      for (std::int64_t i = 0; i < v.n; ++i) {
        const double e = std::exp(base[i * v.inner] - mx);
        base[i * v.inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::int64_t i = 0; i < v.n; ++i) base[i * v.inner] *= inv;
    }
  }
  return id;
}

int GraphTape::layer_norm(int a, int axis, double eps) {
  if (eps < 0.0) shape_fail("layer-norm", "negative eps");
  const int id = unary(OpKind::layer_norm, a);
  TapeNode& n = node(id);
  n.axis = norm_axis("layer-norm", axis, n.value.rank());
  n.scalar = eps;
  const AxisView v = axis_view(n.value.shape, n.axis);
  n.aux.assign(static_cast<std::size_t>(v.outer * v.inner), 0.0);
  double* d = n.value.data.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t in = 0; in < v.inner; ++in) {
      double* base = d + o * v.n * v.inner + in;
      double mean = 0.0;
      for (std::int64_t i = 0; i < v.n; ++i) mean += base[i * v.inner];
      mean /= static_cast<double>(v.n);
      double var = 0.0;
      for (std::int64_t i = 0; i < v.n; ++i) {
        const double c = base[i * v.inner] - mean;
        var += c * c;
      }
      var /= static_cast<double>(v.n);
      const double inv = 1.0 / std::sqrt(var + eps);
      n.aux[static_cast<std::size_t>(o * v.inner + in)] = inv;
      for (std::int64_t i = 0; i < v.n; ++i) base[i * v.inner] = (base[i * v.inner] - mean) * inv;
    }
  }
  return id;
}

int GraphTape::dropout(int a, double rate) {
  if (rate < 0.0 || rate >= 1.0) shape_fail("dropout", "rate must lie in [0,1)");
  const int id = unary(OpKind::dropout, a);
  TapeNode& n = node(id);
  n.scalar = rate;
  if (mode_ == Mode::eval || rate == 0.0) return id;
  n.stream = hash_mix(seed_, static_cast<std::uint64_t>(id));
  n.aux.resize(n.value.data.size());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < n.value.data.size(); ++i) {
    const double u = u64_to_unit(hash_mix(n.stream, static_cast<std::uint64_t>(i)));
    const double m = u >= rate ? keep_scale : 0.0;
    n.aux[i] = m;
    n.value.data[i] *= m;
  }
  return id;
}

int GraphTape::concat(const std::vector<int>& xs, int axis) {
  if (xs.empty()) shape_fail("concat", "no inputs");
  const TapeNode& first = node(xs[0]);
  const int rank = first.value.rank();
  const int ax = norm_axis("concat", axis, rank);
  std::vector<int> out_shape = first.value.shape;
  bool rg = false;
  int total = 0;
  for (int x : xs) {
    const TapeNode& nx = node(x);
    if (nx.value.rank() != rank)
      shape_fail("concat", "rank mismatch " + shape_str(first.value.shape) + " vs " + shape_str(nx.value.shape));
    for (int i = 0; i < rank; ++i) {
      if (i == ax) continue;
      if (nx.value.shape[static_cast<std::size_t>(i)] != first.value.shape[static_cast<std::size_t>(i)])
        shape_fail("concat", "incompatible " + shape_str(first.value.shape) + " vs " + shape_str(nx.value.shape));
    }
    total += nx.value.shape[static_cast<std::size_t>(ax)];
    rg = rg || nx.requires_grad;
  }
  out_shape[static_cast<std::size_t>(ax)] = total;
  TapeNode n;
  n.kind = OpKind::concat;
  n.inputs = xs;
  n.requires_grad = rg;
  n.axis = ax;
  n.value = Tensor::zeros(out_shape);
  const AxisView ov = axis_view(out_shape, ax);
  std::int64_t off = 0;
  for (int x : xs) {
    const TapeNode& nx = node(x);
    const AxisView xv = axis_view(nx.value.shape, ax);
    for (std::int64_t o = 0; o < xv.outer; ++o) {
      const double* src = nx.value.data.data() + o * xv.n * xv.inner;
      double* dst = n.value.data.data() + (o * ov.n + off) * ov.inner;
      std::copy(src, src + xv.n * xv.inner, dst);
    }
    off += xv.n;
  }
  return push(std::move(n));
}

int GraphTape::slice(int a, int axis, int start, int len) {
  const TapeNode& na = node(a);
  const int ax = norm_axis("slice", axis, na.value.rank());
  const int dim = na.value.shape[static_cast<std::size_t>(ax)];
  if (start < 0 || len < 1 || start + len > dim)
    shape_fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                            ") outside axis " + std::to_string(ax) + " of " + shape_str(na.value.shape));
  std::vector<int> out_shape = na.value.shape;
  out_shape[static_cast<std::size_t>(ax)] = len;
  TapeNode n;
  n.kind = OpKind::slice;
  n.inputs = {a};
  n.requires_grad = na.requires_grad;
  n.axis = ax;
  n.start = start;
  n.len = len;
  n.value = Tensor::zeros(out_shape);
  const AxisView iv = axis_view(na.value.shape, ax);
  for (std::int64_t o = 0; o < iv.outer; ++o) {
    const double* src = na.value.data.data() + (o * iv.n + start) * iv.inner;
    double* dst = n.value.data.data() + o * len * iv.inner;
    std::copy(src, src + static_cast<std::int64_t>(len) * iv.inner, dst);
  }
  return push(std::move(n));
}

namespace {
std::vector<int> reduced_shape(const std::vector<int>& shape, int axis) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i)
    if (i != axis) out.push_back(shape[static_cast<std::size_t>(i)]);
  if (out.empty()) out.push_back(1);
  return out;
}
}  // namespace

int GraphTape::reduce_sum(int a, int axis) {
  const TapeNode& na = node(a);
  TapeNode n;
  n.kind = OpKind::reduce_sum;
  n.inputs = {a};
  n.requires_grad = na.requires_grad;
  if (axis == -1) {
    n.axis = -1;
    double s = 0.0;
    for (double v : na.value.data) s += v;
    n.value = Tensor::scalar(s);
  } else {
    const int ax = norm_axis("reduce-sum", axis, na.value.rank());
    n.axis = ax;
    const AxisView v = axis_view(na.value.shape, ax);
    n.value = Tensor::zeros(reduced_shape(na.value.shape, ax));
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::int64_t i = 0; i < v.n; ++i) {
        const double* src = na.value.data.data() + (o * v.n + i) * v.inner;
        double* dst = n.value.data.data() + o * v.inner;
        for (std::int64_t in = 0; in < v.inner; ++in) dst[in] += src[in];
      }
  }
  return push(std::move(n));
}

int GraphTape::reduce_mean(int a, int axis) {
  const std::int64_t total = node(a).value.numel();
  const std::vector<int> in_shape = node(a).value.shape;
  const int id = reduce_sum(a, axis);
  TapeNode& n = node(id);
  n.kind = OpKind::reduce_mean;
  const double cnt = axis == -1 ? static_cast<double>(total)
                                : static_cast<double>(in_shape[static_cast<std::size_t>(n.axis)]);
  for (auto& v : n.value.data) v /= cnt;
  return id;
}

int GraphTape::embedding_select(int table, const std::vector<std::int64_t>& ids) {
  const TapeNode& nt = node(table);
  if (nt.value.rank() != 2) shape_fail("embedding-select", "table must be rank 2, got " + shape_str(nt.value.shape));
  if (ids.empty()) shape_fail("embedding-select", "empty id list");
  const int V = nt.value.shape[0];
  const int m = nt.value.shape[1];
  for (std::int64_t id : ids)
    if (id < 0 || id >= V)
      shape_fail("embedding-select", "id " + std::to_string(id) + " outside table of " + std::to_string(V) + " rows");
  TapeNode n;
  n.kind = OpKind::embedding_select;
  n.inputs = {table};
  n.requires_grad = nt.requires_grad;
  n.ids = ids;
  n.value = Tensor::zeros({static_cast<int>(ids.size()), m});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(nt.value.data.data() + ids[i] * m, nt.value.data.data() + (ids[i] + 1) * m,
              n.value.data.data() + static_cast<std::int64_t>(i) * m);
  return push(std::move(n));
}

int GraphTape::transpose(int a) {
  const TapeNode& na = node(a);
  const int r = na.value.rank();
  if (r < 2) shape_fail("transpose", "needs rank >= 2, got " + shape_str(na.value.shape));
  TapeNode n;
  n.kind = OpKind::transpose;
  n.inputs = {a};
  n.requires_grad = na.requires_grad;
  const int B = r == 3 ? na.value.shape[0] : 1;
  const int rows = na.value.shape[static_cast<std::size_t>(r - 2)];
  const int cols = na.value.shape[static_cast<std::size_t>(r - 1)];
  std::vector<int> out_shape = na.value.shape;
  std::swap(out_shape[static_cast<std::size_t>(r - 2)], out_shape[static_cast<std::size_t>(r - 1)]);
  n.value = Tensor::zeros(out_shape);
  for (std::int64_t b = 0; b < B; ++b) {
    const double* src = na.value.data.data() + b * rows * cols;
    double* dst = n.value.data.data() + b * rows * cols;
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
  return push(std::move(n));
}

int GraphTape::reshape(int a, const std::vector<int>& shape) {
  const TapeNode& na = node(a);
  if (shape_numel(shape) != na.value.numel())
    shape_fail("reshape", shape_str(na.value.shape) + " to " + shape_str(shape) + " changes element count");
  const int id = unary(OpKind::reshape, a);
  TapeNode& n = node(id);
  n.value.shape = shape;
  return id;
}

int GraphTape::bce_with_logits(int logits, int targets) {
  const TapeNode& nl = node(logits);
  Tensor ones = Tensor::full(nl.value.shape, 1.0);
  return bce_with_logits(logits, targets, constant(std::move(ones)));
}

int GraphTape::bce_with_logits(int logits, int targets, int mask) {
  const TapeNode& nl = node(logits);
  const TapeNode& ntg = node(targets);
  const TapeNode& nm = node(mask);
  if (nl.value.shape != ntg.value.shape || nl.value.shape != nm.value.shape)
    shape_fail("bce-with-logits", shape_str(nl.value.shape) + " vs " + shape_str(ntg.value.shape) + " vs " +
                                      shape_str(nm.value.shape));
  double weight = 0.0;
  for (double w : nm.value.data) weight += w;
  TapeNode n;
  n.kind = OpKind::bce_with_logits;
  n.inputs = {logits, targets, mask};
  n.requires_grad = nl.requires_grad || ntg.requires_grad;
  n.scalar = weight;
  double loss = 0.0;
  if (weight > 0.0) {
    for (std::size_t i = 0; i < nl.value.data.size(); ++i) {
      const double z = nl.value.data[i];
      const double t = ntg.value.data[i];
      const double w = nm.value.data[i];
      if (w == 0.0) continue;
      loss += w * (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))));
    }
    loss /= weight;
  }
  n.value = Tensor::scalar(loss);
  return push(std::move(n));
}

int GraphTape::softmax_xent(int logits, const std::vector<std::int64_t>& labels) {
  const TapeNode& nl = node(logits);
  if (nl.value.rank() != 2) shape_fail("softmax-xent", "logits must be rank 2, got " + shape_str(nl.value.shape));
  const int rows = nl.value.shape[0];
  const int C = nl.value.shape[1];
  if (static_cast<int>(labels.size()) != rows)
    shape_fail("softmax-xent", std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  for (std::int64_t y : labels)
    if (y < 0 || y >= C) shape_fail("softmax-xent", "label " + std::to_string(y) + " outside " + std::to_string(C) + " classes");
  TapeNode n;
  n.kind = OpKind::softmax_xent;
  n.inputs = {logits};
  n.requires_grad = nl.requires_grad;
  n.ids = labels;
  n.aux.resize(nl.value.data.size());
  double loss = 0.0;
  for (int i = 0; i < rows; ++i) {
    const double* z = nl.value.data.data() + static_cast<std::int64_t>(i) * C;
    double* p = n.aux.data() + static_cast<std::int64_t>(i) * C;
    double mx = z[0];
    for (int j = 1; j < C; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (int j = 0; j < C; ++j) {
      p[j] = std::exp(z[j] - mx);
      sum += p[j];
    }
    for (int j = 0; j < C; ++j) p[j] /= sum;
    loss += std::log(sum) + mx - z[labels[static_cast<std::size_t>(i)]];
  }
  n.value = Tensor::scalar(loss / rows);
  return push(std::move(n));
}

int GraphTape::masked_mae(int pred, int target, int mask) {
  const TapeNode& np = node(pred);
  const TapeNode& ntg = node(target);
  const TapeNode& nm = node(mask);
  if (np.value.shape != ntg.value.shape || np.value.shape != nm.value.shape)
    shape_fail("masked-mae", shape_str(np.value.shape) + " vs " + shape_str(ntg.value.shape) + " vs " +
                                 shape_str(nm.value.shape));
  double weight = 0.0;
  for (double w : nm.value.data) weight += w;
  TapeNode n;
  n.kind = OpKind::masked_mae;
  n.inputs = {pred, target, mask};
  n.requires_grad = np.requires_grad || ntg.requires_grad;
  n.scalar = weight;
  double loss = 0.0;
  if (weight > 0.0) {
    for (std::size_t i = 0; i < np.value.data.size(); ++i)
      loss += nm.value.data[i] * std::abs(np.value.data[i] - ntg.value.data[i]);
    loss /= weight;
  }
  n.value = Tensor::scalar(loss);
  return push(std::move(n));
}

int GraphTape::l1_norm(int a) {
  const TapeNode& na = node(a);
  TapeNode n;
  n.kind = OpKind::l1_norm;
  n.inputs = {a};
  n.requires_grad = na.requires_grad;
  double s = 0.0;
  for (double v : na.value.data) s += std::abs(v);
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

void GraphTape::backward(int loss_id) {
  if (nodes_.empty()) throw std::logic_error("backward-before-forward: tape is empty");
  check_id(loss_id, "backward");
  TapeNode& loss = nodes_[static_cast<std::size_t>(loss_id)];
  if (loss.value.numel() != 1)
    throw ShapeError("loss-not-scalar: backward needs a scalar loss, got shape " + loss.value.shape_string());
  loss.grad.assign(1, 1.0);

  for (int id = loss_id; id >= 0; --id) {
    TapeNode& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() || !n.requires_grad) continue;
    const double* g = n.grad.data();
    auto grad_buf = [&](int input) -> double* {
      TapeNode& in = nodes_[static_cast<std::size_t>(input)];
      if (!in.requires_grad) return nullptr;
      if (in.grad.empty()) in.grad.assign(in.value.data.size(), 0.0);
      return in.grad.data();
    };
    switch (n.kind) {
      case OpKind::leaf:
      case OpKind::constant:
        break;
      case OpKind::matmul: {
        const TapeNode& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
        const TapeNode& nb = nodes_[static_cast<std::size_t>(n.inputs[1])];
        double* ga = grad_buf(n.inputs[0]);
        double* gb = grad_buf(n.inputs[1]);
        const auto& A = na.value;
        const auto& B = nb.value;
        if (A.rank() == 2) {
          const std::int64_t nn = A.shape[0], kk = A.shape[1], mm = B.shape[1];
          if (ga) mm_nt(g, B.data.data(), ga, nn, mm, kk);
          if (gb) mm_tn(A.data.data(), g, gb, kk, nn, mm);
        } else if (B.rank() == 3) {
          const std::int64_t bs = A.shape[0], nn = A.shape[1], kk = A.shape[2], mm = B.shape[2];
          for (std::int64_t i = 0; i < bs; ++i) {
            if (ga) mm_nt(g + i * nn * mm, B.data.data() + i * kk * mm, ga + i * nn * kk, nn, mm, kk);
            if (gb) mm_tn(A.data.data() + i * nn * kk, g + i * nn * mm, gb + i * kk * mm, kk, nn, mm);
          }
        } else {
          const std::int64_t rows = static_cast<std::int64_t>(A.shape[0]) * A.shape[1];
          const std::int64_t kk = A.shape[2], mm = B.shape[1];
          if (ga) mm_nt(g, B.data.data(), ga, rows, mm, kk);
          if (gb) mm_tn(A.data.data(), g, gb, kk, rows, mm);
        }
        break;
      }
      case OpKind::add:
      case OpKind::multiply: {
        const TapeNode& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
        const TapeNode& nb = nodes_[static_cast<std::size_t>(n.inputs[1])];
        Bcast p = broadcast_plan(op_name(n.kind), na.value.shape, nb.value.shape);
        double* ga = grad_buf(n.inputs[0]);
        double* gb = grad_buf(n.inputs[1]);
        const double* da = na.value.data.data();
        const double* db = nb.value.data.data();
        std::int64_t idx = 0;
        for (std::int64_t i = 0; i < p.d0; ++i)
          for (std::int64_t j = 0; j < p.d1; ++j)
            for (std::int64_t k = 0; k < p.d2; ++k, ++idx) {
              const std::int64_t oa = i * p.sa[0] + j * p.sa[1] + k * p.sa[2];
              const std::int64_t ob = i * p.sb[0] + j * p.sb[1] + k * p.sb[2];
              if (n.kind == OpKind::add) {
                if (ga) ga[oa] += g[idx];
                if (gb) gb[ob] += g[idx];
              } else {
                if (ga) ga[oa] += g[idx] * db[ob];
                if (gb) gb[ob] += g[idx] * da[oa];
              }
            }
        break;
      }
      case OpKind::scalar_scale: {
        double* ga = grad_buf(n.inputs[0]);
        if (ga)
          for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i] * n.scalar;
        break;
      }
      case OpKind::relu: {
        double* ga = grad_buf(n.inputs[0]);
        const TapeNode& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
        if (ga)
          for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += na.value.data[i] > 0.0 ? g[i] : 0.0;
        break;
      }
      case OpKind::gelu: {
        double* ga = grad_buf(n.inputs[0]);
        const TapeNode& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
        if (ga)
          for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double x = na.value.data[i];
            const double u = kGeluC * (x + kGeluA * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
          }
        break;
      }
      case OpKind::sigmoid: {
        double* ga = grad_buf(n.inputs[0]);
        if (ga)
          for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double y = n.value.data[i];
            ga[i] += g[i] * y * (1.0 - y);
          }
        break;
      }
      case OpKind::tanh_fn: {
        double* ga = grad_buf(n.inputs[0]);
        if (ga)
          for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double y = n.value.data[i];
            ga[i] += g[i] * (1.0 - y * y);
          }
        break;
      }
      case OpKind::softmax: {
        double* ga = grad_buf(n.inputs[0]);
        if (!ga) break;
        const AxisView v = axis_view(n.value.shape, n.axis);
        for (std::int64_t o = 0; o < v.outer; ++o)
          for (std::int64_t in = 0; in < v.inner; ++in) {
            const std::int64_t base = o * v.n * v.inner + in;
            double dot = 0.0;
            for (std::int64_t i = 0; i < v.n; ++i) {
              const std::int64_t k = base + i * v.inner;
              dot += n.value.data[static_cast<std::size_t>(k)] * g[k];
            }
            for (std::int64_t i = 0; i < v.n; ++i) {
              const std::int64_t k = base + i * v.inner;
              ga[k] += n.value.data[static_cast<std::size_t>(k)] * (g[k] - dot);
            }
          }
        break;
      }
      case OpKind::layer_norm: {
        double* ga = grad_buf(n.inputs[0]);
        if (!ga) break;
        const AxisView v = axis_view(n.value.shape, n.axis);
        const double nn = static_cast<double>(v.n);
        for (std::int64_t o = 0; o < v.outer; ++o)
          for (std::int64_t in = 0; in < v.inner; ++in) {
            const std::int64_t base = o * v.n * v.inner + in;
            const double inv = n.aux[static_cast<std::size_t>(o * v.inner + in)];
            double gmean = 0.0, gymean = 0.0;
            for (std::int64_t i = 0; i < v.n; ++i) {
              const std::int64_t k = base + i * v.inner;
              gmean += g[k];
              gymean += g[k] * n.value.data[static_cast<std::size_t>(k)];
            }
            gmean /= nn;
            gymean /= nn;
            for (std::int64_t i = 0; i < v.n; ++i) {
              const std::int64_t k = base + i * v.inner;
              const double y = n.value.data[static_cast<std::size_t>(k)];
              ga[k] += inv * (g[k] - gmean - y * gymean);
            }
          }
        break;
      }
      case OpKind::dropout: {
        double* ga = grad_buf(n.inputs[0]);
        if (!ga) break;
        if (n.aux.empty()) {
          for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i];
        } else {
          for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i] * n.aux[i];
        }
        break;
      }
      case OpKind::concat: {
        const AxisView ov = axis_view(n.value.shape, n.axis);
        std::int64_t off = 0;
        for (int x : n.inputs) {
          TapeNode& nx = nodes_[static_cast<std::size_t>(x)];
          const AxisView xv = axis_view(nx.value.shape, n.axis);
          double* gx = grad_buf(x);
          if (gx)
            for (std::int64_t o = 0; o < xv.outer; ++o) {
              const double* src = g + (o * ov.n + off) * ov.inner;
              double* dst = gx + o * xv.n * xv.inner;
              for (std::int64_t i = 0; i < xv.n * xv.inner; ++i) dst[i] += src[i];
            }
          off += xv.n;
        }
        break;
      }
      case OpKind::slice: {
        double* ga = grad_buf(n.inputs[0]);
        if (!ga) break;
        const TapeNode& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
        const AxisView iv = axis_view(na.value.shape, n.axis);
        for (std::int64_t o = 0; o < iv.outer; ++o) {
          const double* src = g + o * n.len * iv.inner;
          double* dst = ga + (o * iv.n + n.start) * iv.inner;
          for (std::int64_t i = 0; i < static_cast<std::int64_t>(n.len) * iv.inner; ++i) dst[i] += src[i];
        }
        break;
      }
      case OpKind::reduce_sum:
      case OpKind::reduce_mean: {
        double* ga = grad_buf(n.inputs[0]);
        if (!ga) break;
        const TapeNode& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
        if (n.axis == -1) {
          const double cnt = n.kind == OpKind::reduce_mean ? static_cast<double>(na.value.numel()) : 1.0;
          const double gv = g[0] / cnt;
          for (std::size_t i = 0; i < na.value.data.size(); ++i) ga[i] += gv;
        } else {
          const AxisView v = axis_view(na.value.shape, n.axis);
          const double cnt = n.kind == OpKind::reduce_mean ? static_cast<double>(v.n) : 1.0;
          for (std::int64_t o = 0; o < v.outer; ++o)
            for (std::int64_t i = 0; i < v.n; ++i) {
              double* dst = ga + (o * v.n + i) * v.inner;
              const double* src = g + o * v.inner;
              for (std::int64_t in = 0; in < v.inner; ++in) dst[in] += src[in] / cnt;
            }
        }
        break;
      }
      case OpKind::embedding_select: {
        double* gt = grad_buf(n.inputs[0]);
        if (!gt) break;
        const int m = n.value.shape[1];
        for (std::size_t i = 0; i < n.ids.size(); ++i) {
          const double* src = g + static_cast<std::int64_t>(i) * m;
          double* dst = gt + n.ids[i] * m;
          for (int j = 0; j < m; ++j) dst[j] += src[j];
        }
        break;
      }
      case OpKind::transpose: {
        double* ga = grad_buf(n.inputs[0]);
        if (!ga) break;
        const TapeNode& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
        const int r = na.value.rank();
        const int B = r == 3 ? na.value.shape[0] : 1;
        const int rows = na.value.shape[static_cast<std::size_t>(r - 2)];
        const int cols = na.value.shape[static_cast<std::size_t>(r - 1)];
        for (std::int64_t b = 0; b < B; ++b) {
          const double* src = g + b * rows * cols;
          double* dst = ga + b * rows * cols;
          for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < cols; ++j) dst[i * cols + j] += src[j * rows + i];
        }
        break;
      }
      case OpKind::reshape: {
        double* ga = grad_buf(n.inputs[0]);
        if (ga)
          for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i];
        break;
      }
      case OpKind::bce_with_logits: {
        if (n.scalar <= 0.0) break;
        const TapeNode& nl = nodes_[static_cast<std::size_t>(n.inputs[0])];
        const TapeNode& ntg = nodes_[static_cast<std::size_t>(n.inputs[1])];
        const TapeNode& nm = nodes_[static_cast<std::size_t>(n.inputs[2])];
        double* gl = grad_buf(n.inputs[0]);
        double* gt = grad_buf(n.inputs[1]);
        const double scale = g[0] / n.scalar;
        for (std::size_t i = 0; i < nl.value.data.size(); ++i) {
          const double w = nm.value.data[i];
          if (w == 0.0) continue;
          const double z = nl.value.data[i];
          const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
          if (gl) gl[i] += scale * w * (s - ntg.value.data[i]);
          if (gt) gt[i] += scale * w * (-z);
        }
        break;
      }
      case OpKind::softmax_xent: {
        double* gl = grad_buf(n.inputs[0]);
        if (!gl) break;
        const TapeNode& nl = nodes_[static_cast<std::size_t>(n.inputs[0])];
        const int rows = nl.value.shape[0];
        const int C = nl.value.shape[1];
        const double scale = g[0] / rows;
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < C; ++j) {
            const std::int64_t k = static_cast<std::int64_t>(i) * C + j;
            const double onehot = j == n.ids[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
            gl[k] += scale * (n.aux[static_cast<std::size_t>(k)] - onehot);
          }
        break;
      }
      case OpKind::masked_mae: {
        if (n.scalar <= 0.0) break;
        const TapeNode& np = nodes_[static_cast<std::size_t>(n.inputs[0])];
        const TapeNode& ntg = nodes_[static_cast<std::size_t>(n.inputs[1])];
        const TapeNode& nm = nodes_[static_cast<std::size_t>(n.inputs[2])];
        double* gp = grad_buf(n.inputs[0]);
        double* gt = grad_buf(n.inputs[1]);
        const double scale = g[0] / n.scalar;
        for (std::size_t i = 0; i < np.value.data.size(); ++i) {
          const double w = nm.value.data[i];
          if (w == 0.0) continue;
          const double s = sign_of(np.value.data[i] - ntg.value.data[i]);
          if (gp) gp[i] += scale * w * s;
          if (gt) gt[i] -= scale * w * s;
        }
        break;
      }
      case OpKind::l1_norm: {
        double* ga = grad_buf(n.inputs[0]);
        if (!ga) break;
        const TapeNode& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
        for (std::size_t i = 0; i < na.value.data.size(); ++i) ga[i] += g[0] * sign_of(na.value.data[i]);
        break;
      }
    }
  }

  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    TapeNode& n = nodes_[id];
    if (n.kind != OpKind::leaf || n.external == nullptr || !n.external->requires_grad) continue;
    n.external->ensure_grad();
    if (n.grad.empty()) continue;
    for (std::size_t i = 0; i < n.grad.size(); ++i) n.external->grad[i] += n.grad[i];
  }
}

double finite_diff_check(const std::function<int(GraphTape&)>& build, const std::vector<Tensor*>& params,
                         double eps, Mode mode, std::uint64_t dropout_seed) {
  for (Tensor* p : params) {
    p->requires_grad = true;
    p->ensure_grad();
    p->zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    GraphTape tape(mode, dropout_seed);
    const int loss = build(tape);
    if (tape.val(loss).numel() != 1)
      throw ShapeError("loss-not-scalar: finite_diff_check needs a scalar loss");
    tape.backward(loss);
  }
  analytic.reserve(params.size());
  for (Tensor* p : params) analytic.push_back(p->grad);

  auto eval_loss = [&]() {
    GraphTape tape(mode, dropout_seed);
    const int loss = build(tape);
    return tape.val(loss).data[0];
  };

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double save = p->data[i];
      p->data[i] = save + eps;
      const double fp = eval_loss();
      p->data[i] = save - eps;
      const double fm = eval_loss();
      p->data[i] = save;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace stepwise
