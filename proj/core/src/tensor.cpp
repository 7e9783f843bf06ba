#include "maad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace maad {

namespace {

thread_local bool g_grad_enabled = true;
thread_local GrlProbe g_grl_probe;
thread_local bool g_grl_probe_set = false;

using GradSink = std::function<std::vector<double>&(size_t)>;

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op) + ": undefined tensor");
  }
}

Tensor make_op_result(
    Shape shape, std::vector<double> values, const char* op,
    std::initializer_list<Tensor> inputs,
    std::function<void(const std::vector<double>&, const GradSink&)> bw) {
  auto td = std::make_shared<TensorData>();
  td->shape = std::move(shape);
  td->values = std::move(values);
  bool req = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) req = req || t.requires_grad();
  }
  td->requires_grad = req;
  if (req) {
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(bw);
    td->node = std::move(node);
  }
  return Tensor(td);
}

Shape broadcast_out_shape(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(op) + ": rank mismatch " +
                                shape_str(a) + " vs " + shape_str(b));
  }
  Shape out(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || a[i] == 1 || b[i] == 1) {
      out[i] = std::max(a[i], b[i]);
    } else {
      throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                  shape_str(a) + " vs " + shape_str(b));
    }
  }
  return out;
}

std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t k = s.size(); k-- > 0;) {
    st[k] = (s[k] == 1 && out[k] != 1) ? 0 : acc;
    acc *= s[k];
  }
  return st;
}

// Visits output elements in row-major order; ia/ib are the matching flat
// indices into the two (possibly broadcast) operands.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& f) {
  const int64_t n = shape_numel(out);
  const size_t rank = out.size();
  std::vector<int64_t> idx(rank, 0);
  int64_t ia = 0;
  int64_t ib = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    f(flat, ia, ib);
    for (size_t k = rank; k-- > 0;) {
      ia += sa[k];
      ib += sb[k];
      if (++idx[k] < out[k]) break;
      ia -= sa[k] * out[k];
      ib -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind,
                 const char* name) {
  check_defined(a, name);
  check_defined(b, name);
  Shape out = broadcast_out_shape(a.shape(), b.shape(), name);
  const Shape osh = out;
  const auto sa = bcast_strides(a.shape(), out);
  const auto sb = bcast_strides(b.shape(), out);
  std::vector<double> v(shape_numel(out));
  const auto& av = a.values();
  const auto& bv = b.values();
  switch (kind) {
    case BinKind::Add:
      for_each_broadcast(out, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
        v[o] = av[ia] + bv[ib];
      });
      break;
    case BinKind::Sub:
      for_each_broadcast(out, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
        v[o] = av[ia] - bv[ib];
      });
      break;
    case BinKind::Mul:
      for_each_broadcast(out, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
        v[o] = av[ia] * bv[ib];
      });
      break;
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_op_result(
      std::move(out), std::move(v), name, {a, b},
      [ai, bi, osh, sa, sb, kind](const std::vector<double>& g,
                                  const GradSink& sink) {
        if (ai->requires_grad) {
          auto& ga = sink(0);
          switch (kind) {
            case BinKind::Add:
            case BinKind::Sub:
              for_each_broadcast(osh, sa, sb,
                                 [&](int64_t o, int64_t ia, int64_t) {
                                   ga[ia] += g[o];
                                 });
              break;
            case BinKind::Mul:
              for_each_broadcast(osh, sa, sb,
                                 [&](int64_t o, int64_t ia, int64_t ib) {
                                   ga[ia] += g[o] * bi->values[ib];
                                 });
              break;
          }
        }
        if (bi->requires_grad) {
          auto& gb = sink(1);
          switch (kind) {
            case BinKind::Add:
              for_each_broadcast(osh, sa, sb,
                                 [&](int64_t o, int64_t, int64_t ib) {
                                   gb[ib] += g[o];
                                 });
              break;
            case BinKind::Sub:
              for_each_broadcast(osh, sa, sb,
                                 [&](int64_t o, int64_t, int64_t ib) {
                                   gb[ib] -= g[o];
                                 });
              break;
            case BinKind::Mul:
              for_each_broadcast(osh, sa, sb,
                                 [&](int64_t o, int64_t ia, int64_t ib) {
                                   gb[ib] += g[o] * ai->values[ia];
                                 });
              break;
          }
        }
      });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// C[M x N] += A[M x K] * B[K x N], all row-major contiguous. Every output
// element accumulates its products in ascending k, so results match a naive
// triple loop with the same inner order.
void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
             double* C) {
  constexpr int64_t MR = 4;
  constexpr int64_t NR = 16;
  for (int64_t i0 = 0; i0 < M; i0 += MR) {
    const int64_t ib = std::min(MR, M - i0);
    for (int64_t j0 = 0; j0 < N; j0 += NR) {
      const int64_t jb = std::min(NR, N - j0);
      if (ib == MR && jb == NR) {
        double acc[MR][NR] = {};
        const double* a0 = A + (i0 + 0) * K;
        const double* a1 = A + (i0 + 1) * K;
        const double* a2 = A + (i0 + 2) * K;
        const double* a3 = A + (i0 + 3) * K;
        const double* bp = B + j0;
        for (int64_t k = 0; k < K; ++k, bp += N) {
          const double w0 = a0[k];
          const double w1 = a1[k];
          const double w2 = a2[k];
          const double w3 = a3[k];
          for (int64_t j = 0; j < NR; ++j) {
            const double bv = bp[j];
            acc[0][j] += w0 * bv;
            acc[1][j] += w1 * bv;
            acc[2][j] += w2 * bv;
            acc[3][j] += w3 * bv;
          }
        }
        for (int64_t ii = 0; ii < MR; ++ii) {
          double* crow = C + (i0 + ii) * N + j0;
          for (int64_t j = 0; j < NR; ++j) crow[j] += acc[ii][j];
        }
      } else {
        for (int64_t ii = 0; ii < ib; ++ii) {
          const double* arow = A + (i0 + ii) * K;
          for (int64_t jj = 0; jj < jb; ++jj) {
            const double* bcol = B + j0 + jj;
            double acc = 0.0;
            for (int64_t k = 0; k < K; ++k) acc += arow[k] * bcol[k * N];
            C[(i0 + ii) * N + j0 + jj] += acc;
          }
        }
      }
    }
  }
}

void transpose(const double* src, int64_t rows, int64_t cols, double* dst) {
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

// col is (C*KH*KW) x (OH*OW) row-major; out-of-image taps become zero.
void im2col(const double* x, int64_t C, int64_t H, int64_t W, int64_t KH,
            int64_t KW, int64_t stride, const Padding2d& p, int64_t OH,
            int64_t OW, double* col) {
  const int64_t M = OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t kh = 0; kh < KH; ++kh) {
      for (int64_t kw = 0; kw < KW; ++kw) {
        double* crow = col + ((c * KH + kh) * KW + kw) * M;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = oh * stride - p.top + kh;
          if (ih < 0 || ih >= H) {
            std::fill(crow + oh * OW, crow + (oh + 1) * OW, 0.0);
            continue;
          }
          const double* xrow = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = ow * stride - p.left + kw;
            crow[oh * OW + ow] = (iw >= 0 && iw < W) ? xrow[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int64_t C, int64_t H, int64_t W, int64_t KH,
                int64_t KW, int64_t stride, const Padding2d& p, int64_t OH,
                int64_t OW, double* dx) {
  const int64_t M = OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t kh = 0; kh < KH; ++kh) {
      for (int64_t kw = 0; kw < KW; ++kw) {
        const double* crow = col + ((c * KH + kh) * KW + kw) * M;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = oh * stride - p.top + kh;
          if (ih < 0 || ih >= H) continue;
          double* xrow = dx + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = ow * stride - p.left + kw;
            if (iw >= 0 && iw < W) xrow[iw] += crow[oh * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

void set_grl_probe(GrlProbe probe) {
  g_grl_probe = std::move(probe);
  g_grl_probe_set = true;
}

void clear_grl_probe() {
  g_grl_probe = GrlProbe{};
  g_grl_probe_set = false;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_numel(shape), 0.0),
                     requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_numel(shape), value),
                     requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("tensor: nonpositive dim in shape " +
                                  shape_str(shape));
    }
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument(
        "tensor: shape " + shape_str(shape) + " wants " +
        std::to_string(shape_numel(shape)) + " values, got " +
        std::to_string(values.size()));
  }
  auto td = std::make_shared<TensorData>();
  td->shape = std::move(shape);
  td->values = std::move(values);
  td->requires_grad = requires_grad;
  return Tensor(td);
}

const Shape& Tensor::shape() const {
  check_defined(*this, "shape");
  return data_->shape;
}

int64_t Tensor::dim(size_t i) const {
  const Shape& s = shape();
  if (i >= s.size()) {
    throw std::out_of_range("dim: axis " + std::to_string(i) +
                            " out of range for " + shape_str(s));
  }
  return s[i];
}

int64_t Tensor::numel() const { return shape_numel(shape()); }

bool Tensor::requires_grad() const {
  check_defined(*this, "requires_grad");
  return data_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool v) {
  check_defined(*this, "set_requires_grad");
  if (data_->node) {
    throw std::runtime_error(
        "set_requires_grad: only leaf tensors can be toggled");
  }
  data_->requires_grad = v;
  return *this;
}

const std::vector<double>& Tensor::values() const {
  check_defined(*this, "values");
  return data_->values;
}

std::vector<double>& Tensor::values() {
  check_defined(*this, "values");
  return data_->values;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item: tensor has shape " +
                                shape_str(shape()));
  }
  return data_->values[0];
}

bool Tensor::has_grad() const {
  check_defined(*this, "has_grad");
  return !data_->grad.empty();
}

const std::vector<double>& Tensor::grad() const {
  check_defined(*this, "grad");
  if (data_->grad.empty()) {
    throw std::runtime_error("grad: absent (tensor unreached by backward)");
  }
  return data_->grad;
}

void Tensor::zero_grad() {
  check_defined(*this, "zero_grad");
  data_->grad.clear();
}

void Tensor::backward() const {
  check_defined(*this, "backward");
  if (numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(data_->shape));
  }
  if (!data_->requires_grad) {
    throw std::logic_error(
        "backward: tensor does not require grad (no graph)");
  }
  if (data_->backward_ran) {
    throw std::logic_error(
        "backward: already ran on this graph root; run a new forward first");
  }
  data_->backward_ran = true;

  // Post-order DFS: inputs land before their consumers, root lands last.
  std::vector<TensorData*> order;
  std::unordered_set<TensorData*> seen;
  struct Frame {
    TensorData* td;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({data_.get(), 0});
  seen.insert(data_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    Node* node = f.td->node.get();
    const size_t nin = node ? node->inputs.size() : 0;
    if (f.next < nin) {
      TensorData* in = node->inputs[f.next++].get();
      if (in->requires_grad && seen.insert(in).second) {
        stack.push_back({in, 0});
      }
    } else {
      order.push_back(f.td);
      stack.pop_back();
    }
  }

  std::unordered_map<TensorData*, std::vector<double>> grads;
  grads[data_.get()] = {1.0};
  for (size_t pos = order.size(); pos-- > 0;) {
    TensorData* td = order[pos];
    auto it = grads.find(td);
    if (it == grads.end()) continue;
    std::vector<double> g = std::move(it->second);
    grads.erase(it);
    if (td->node) {
      Node* node = td->node.get();
      GradSink sink = [&](size_t i) -> std::vector<double>& {
        TensorData* in = node->inputs.at(i).get();
        auto& buf = grads[in];
        if (buf.size() != in->values.size()) {
          buf.assign(in->values.size(), 0.0);
        }
        return buf;
      };
      node->backward(g, sink);
    } else if (td->requires_grad) {
      if (td->grad.empty()) td->grad.assign(g.size(), 0.0);
      for (size_t i = 0; i < g.size(); ++i) td->grad[i] += g[i];
    }
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, BinKind::Add, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, BinKind::Sub, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, BinKind::Mul, "mul");
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor add_scalar(const Tensor& x, double c) {
  check_defined(x, "add_scalar");
  std::vector<double> v(x.values());
  for (double& e : v) e += c;
  auto xi = x.impl();
  return make_op_result(
      x.shape(), std::move(v), "add_scalar", {x},
      [xi](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
}

Tensor scale(const Tensor& x, double c) {
  check_defined(x, "scale");
  std::vector<double> v(x.values());
  for (double& e : v) e *= c;
  auto xi = x.impl();
  return make_op_result(
      x.shape(), std::move(v), "scale", {x},
      [xi, c](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
      });
}

Tensor abs(const Tensor& x) {
  check_defined(x, "abs");
  std::vector<double> v(x.values());
  for (double& e : v) e = std::fabs(e);
  auto xi = x.impl();
  return make_op_result(
      x.shape(), std::move(v), "abs", {x},
      [xi](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) {
          const double xv = xi->values[i];
          gx[i] += g[i] * (xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0));
        }
      });
}

Tensor log(const Tensor& x) {
  check_defined(x, "log");
  std::vector<double> v(x.values().size());
  for (size_t i = 0; i < v.size(); ++i) {
    const double xv = x.values()[i];
    if (xv <= 0.0) {
      throw std::domain_error("log: nonpositive input " + std::to_string(xv));
    }
    v[i] = std::log(xv);
  }
  auto xi = x.impl();
  return make_op_result(
      x.shape(), std::move(v), "log", {x},
      [xi](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xi->values[i];
      });
}

Tensor exp(const Tensor& x) {
  check_defined(x, "exp");
  std::vector<double> v(x.values());
  for (double& e : v) e = std::exp(e);
  auto xi = x.impl();
  auto yi = std::make_shared<std::vector<double>>(v);
  return make_op_result(
      x.shape(), std::move(v), "exp", {x},
      [xi, yi](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*yi)[i];
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  check_defined(x, "clamp");
  if (!(lo <= hi)) {
    throw std::invalid_argument("clamp: lo must not exceed hi");
  }
  std::vector<double> v(x.values());
  for (double& e : v) e = std::min(std::max(e, lo), hi);
  auto xi = x.impl();
  return make_op_result(
      x.shape(), std::move(v), "clamp", {x},
      [xi, lo, hi](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) {
          const double xv = xi->values[i];
          if (xv > lo && xv < hi) gx[i] += g[i];
        }
      });
}

Tensor relu(const Tensor& x) {
  check_defined(x, "relu");
  std::vector<double> v(x.values());
  for (double& e : v) e = e > 0.0 ? e : 0.0;
  auto xi = x.impl();
  return make_op_result(
      x.shape(), std::move(v), "relu", {x},
      [xi](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) {
          if (xi->values[i] > 0.0) gx[i] += g[i];
        }
      });
}

Tensor leaky_relu(const Tensor& x, double alpha) {
  check_defined(x, "leaky_relu");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("leaky_relu: alpha must be in (0,1)");
  }
  std::vector<double> v(x.values());
  for (double& e : v) e = e > 0.0 ? e : alpha * e;
  auto xi = x.impl();
  return make_op_result(
      x.shape(), std::move(v), "leaky_relu", {x},
      [xi, alpha](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) {
          gx[i] += g[i] * (xi->values[i] > 0.0 ? 1.0 : alpha);
        }
      });
}

Tensor sigmoid(const Tensor& x) {
  check_defined(x, "sigmoid");
  std::vector<double> v(x.values());
  for (double& e : v) e = stable_sigmoid(e);
  auto xi = x.impl();
  auto yi = std::make_shared<std::vector<double>>(v);
  return make_op_result(
      x.shape(), std::move(v), "sigmoid", {x},
      [xi, yi](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (size_t i = 0; i < g.size(); ++i) {
          const double y = (*yi)[i];
          gx[i] += g[i] * y * (1.0 - y);
        }
      });
}

Tensor sum(const Tensor& x) {
  check_defined(x, "sum");
  double acc = 0.0;
  for (double e : x.values()) acc += e;
  auto xi = x.impl();
  return make_op_result(
      Shape{1}, {acc}, "sum", {x},
      [xi](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (double& e : gx) e += g[0];
      });
}

Tensor mean(const Tensor& x) {
  check_defined(x, "mean");
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (double e : x.values()) acc += e;
  auto xi = x.impl();
  return make_op_result(
      Shape{1}, {acc / n}, "mean", {x},
      [xi, n](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        const double gi = g[0] / n;
        for (double& e : gx) e += gi;
      });
}

Tensor spatial_mean(const Tensor& x) {
  check_defined(x, "spatial_mean");
  if (x.shape().size() != 4) {
    throw std::invalid_argument("spatial_mean: expected NCHW, got " +
                                shape_str(x.shape()));
  }
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t plane = H * W;
  std::vector<double> v(N * C);
  const auto& xv = x.values();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const double* p = xv.data() + nc * plane;
    for (int64_t i = 0; i < plane; ++i) acc += p[i];
    v[nc] = acc / static_cast<double>(plane);
  }
  auto xi = x.impl();
  return make_op_result(
      Shape{N, C}, std::move(v), "spatial_mean", {x},
      [xi, N, C, plane](const std::vector<double>& g, const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const double gi = g[nc] / static_cast<double>(plane);
          double* p = gx.data() + nc * plane;
          for (int64_t i = 0; i < plane; ++i) p[i] += gi;
        }
      });
}

Tensor concat0(const Tensor& a, const Tensor& b) {
  check_defined(a, "concat0");
  check_defined(b, "concat0");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || sa.empty()) {
    throw std::invalid_argument("concat0: rank mismatch " + shape_str(sa) +
                                " vs " + shape_str(sb));
  }
  for (size_t i = 1; i < sa.size(); ++i) {
    if (sa[i] != sb[i]) {
      throw std::invalid_argument("concat0: trailing dims differ " +
                                  shape_str(sa) + " vs " + shape_str(sb));
    }
  }
  Shape out = sa;
  out[0] += sb[0];
  std::vector<double> v;
  v.reserve(a.numel() + b.numel());
  v.insert(v.end(), a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  auto ai = a.impl();
  auto bi = b.impl();
  const size_t na = a.values().size();
  return make_op_result(
      std::move(out), std::move(v), "concat0", {a, b},
      [ai, bi, na](const std::vector<double>& g, const GradSink& sink) {
        if (ai->requires_grad) {
          auto& ga = sink(0);
          for (size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (bi->requires_grad) {
          auto& gb = sink(1);
          for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
        }
      });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int64_t stride, Padding2d padding) {
  check_defined(input, "conv2d");
  check_defined(weight, "conv2d");
  if (input.shape().size() != 4) {
    throw std::invalid_argument("conv2d: input must be NCHW, got " +
                                shape_str(input.shape()));
  }
  if (weight.shape().size() != 4) {
    throw std::invalid_argument("conv2d: weight must be (out_c,in_c,kh,kw), got " +
                                shape_str(weight.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding.top < 0 || padding.bottom < 0 || padding.left < 0 ||
      padding.right < 0) {
    throw std::invalid_argument("conv2d: padding must be >= 0");
  }
  const int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2),
                W = input.dim(3);
  const int64_t Cout = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  if (weight.dim(1) != Cin) {
    throw std::invalid_argument(
        "conv2d: input channels " + std::to_string(Cin) +
        " do not match weight channels " + std::to_string(weight.dim(1)));
  }
  if (bias.defined() &&
      (bias.shape().size() != 1 || bias.dim(0) != Cout)) {
    throw std::invalid_argument("conv2d: bias must have shape (" +
                                std::to_string(Cout) + "), got " +
                                shape_str(bias.shape()));
  }
  const int64_t padH = H + padding.top + padding.bottom;
  const int64_t padW = W + padding.left + padding.right;
  if (padH < KH || padW < KW) {
    throw std::invalid_argument(
        "conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) +
        " exceeds padded input " + std::to_string(padH) + "x" +
        std::to_string(padW));
  }
  const int64_t OH = (padH - KH) / stride + 1;
  const int64_t OW = (padW - KW) / stride + 1;
  const int64_t K = Cin * KH * KW;
  const int64_t M = OH * OW;

  std::vector<double> col(K * M);
  std::vector<double> out(N * Cout * M, 0.0);
  const auto& xv = input.values();
  const auto& wv = weight.values();
  for (int64_t n = 0; n < N; ++n) {
    im2col(xv.data() + n * Cin * H * W, Cin, H, W, KH, KW, stride, padding, OH,
           OW, col.data());
    gemm_nn(Cout, M, K, wv.data(), col.data(), out.data() + n * Cout * M);
  }
  if (bias.defined()) {
    const auto& bv = bias.values();
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t oc = 0; oc < Cout; ++oc) {
        double* row = out.data() + (n * Cout + oc) * M;
        const double b = bv[oc];
        for (int64_t m = 0; m < M; ++m) row[m] += b;
      }
    }
  }

  auto xi = input.impl();
  auto wi = weight.impl();
  auto bw = [xi, wi, N, Cin, H, W, Cout, KH, KW, K, M, OH, OW, stride,
             padding](const std::vector<double>& g, const GradSink& sink) {
    if (wi->requires_grad) {
      auto& gw = sink(1);
      std::vector<double> col(K * M);
      std::vector<double> colT(M * K);
      for (int64_t n = 0; n < N; ++n) {
        im2col(xi->values.data() + n * Cin * H * W, Cin, H, W, KH, KW, stride,
               padding, OH, OW, col.data());
        transpose(col.data(), K, M, colT.data());
        gemm_nn(Cout, K, M, g.data() + n * Cout * M, colT.data(), gw.data());
      }
    }
    if (xi->requires_grad) {
      auto& gx = sink(0);
      std::vector<double> wT(K * Cout);
      transpose(wi->values.data(), Cout, K, wT.data());
      std::vector<double> dcol(K * M);
      for (int64_t n = 0; n < N; ++n) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        gemm_nn(K, M, Cout, wT.data(), g.data() + n * Cout * M, dcol.data());
        col2im_add(dcol.data(), Cin, H, W, KH, KW, stride, padding, OH, OW,
                   gx.data() + n * Cin * H * W);
      }
    }
  };

  if (!bias.defined()) {
    return make_op_result(Shape{N, Cout, OH, OW}, std::move(out), "conv2d",
                          {input, weight}, std::move(bw));
  }
  auto bi = bias.impl();
  auto bw_bias = [bw, bi, N, Cout, M](const std::vector<double>& g,
                                      const GradSink& sink) {
    bw(g, sink);
    if (bi->requires_grad) {
      auto& gb = sink(2);
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t oc = 0; oc < Cout; ++oc) {
          const double* row = g.data() + (n * Cout + oc) * M;
          double acc = 0.0;
          for (int64_t m = 0; m < M; ++m) acc += row[m];
          gb[oc] += acc;
        }
      }
    }
  };
  return make_op_result(Shape{N, Cout, OH, OW}, std::move(out), "conv2d",
                        {input, weight, bias}, std::move(bw_bias));
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int64_t stride, int64_t padding) {
  return conv2d(input, weight, bias, stride,
                Padding2d{padding, padding, padding, padding});
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::vector<double>& running_mean,
                    std::vector<double>& running_var, bool training,
                    double momentum, double eps) {
  check_defined(x, "batch_norm2d");
  check_defined(gamma, "batch_norm2d");
  check_defined(beta, "batch_norm2d");
  if (x.shape().size() != 4) {
    throw std::invalid_argument("batch_norm2d: expected NCHW, got " +
                                shape_str(x.shape()));
  }
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C ||
      static_cast<int64_t>(running_mean.size()) != C ||
      static_cast<int64_t>(running_var.size()) != C) {
    throw std::invalid_argument(
        "batch_norm2d: gamma/beta/running stats must have " +
        std::to_string(C) + " channels");
  }
  if (eps <= 0.0) throw std::invalid_argument("batch_norm2d: eps must be > 0");
  const int64_t plane = H * W;
  const int64_t m = N * plane;
  const auto& xv = x.values();

  std::vector<double> mu(C), var(C);
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* p = xv.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      mu[c] = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* p = xv.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu[c];
          vacc += d * d;
        }
      }
      var[c] = vacc / static_cast<double>(m);  // biased, also for running var
    }
    for (int64_t c = 0; c < C; ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
    }
  } else {
    mu = running_mean;
    var = running_var;
  }

  std::vector<double> inv(C);
  for (int64_t c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);

  std::vector<double> out(xv.size());
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const double* p = xv.data() + (n * C + c) * plane;
      double* q = out.data() + (n * C + c) * plane;
      const double mc = mu[c], ic = inv[c], gc = gv[c], bc = bv[c];
      for (int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mc) * ic * gc + bc;
    }
  }

  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  return make_op_result(
      x.shape(), std::move(out), "batch_norm2d", {x, gamma, beta},
      [xi, gi, bi, mu, inv, training, N, C, plane,
       m](const std::vector<double>& g, const GradSink& sink) {
        const auto& xv = xi->values;
        const auto& gv = gi->values;
        // per-channel sums used by every branch
        std::vector<double> sum_g(C, 0.0), sum_gxh(C, 0.0);
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t c = 0; c < C; ++c) {
            const double* gp = g.data() + (n * C + c) * plane;
            const double* xp = xv.data() + (n * C + c) * plane;
            double sg = 0.0, sgx = 0.0;
            for (int64_t i = 0; i < plane; ++i) {
              sg += gp[i];
              sgx += gp[i] * (xp[i] - mu[c]) * inv[c];
            }
            sum_g[c] += sg;
            sum_gxh[c] += sgx;
          }
        }
        if (bi->requires_grad) {
          auto& gb = sink(2);
          for (int64_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (gi->requires_grad) {
          auto& gg = sink(1);
          for (int64_t c = 0; c < C; ++c) gg[c] += sum_gxh[c];
        }
        if (xi->requires_grad) {
          auto& gx = sink(0);
          if (training) {
            const double dm = static_cast<double>(m);
            for (int64_t n = 0; n < N; ++n) {
              for (int64_t c = 0; c < C; ++c) {
                const double* gp = g.data() + (n * C + c) * plane;
                const double* xp = xv.data() + (n * C + c) * plane;
                double* o = gx.data() + (n * C + c) * plane;
                const double k1 = gv[c] * inv[c];
                for (int64_t i = 0; i < plane; ++i) {
                  const double xhat = (xp[i] - mu[c]) * inv[c];
                  o[i] += k1 * (gp[i] - sum_g[c] / dm - xhat * sum_gxh[c] / dm);
                }
              }
            }
          } else {
            for (int64_t n = 0; n < N; ++n) {
              for (int64_t c = 0; c < C; ++c) {
                const double* gp = g.data() + (n * C + c) * plane;
                double* o = gx.data() + (n * C + c) * plane;
                const double k1 = gv[c] * inv[c];
                for (int64_t i = 0; i < plane; ++i) o[i] += k1 * gp[i];
              }
            }
          }
        }
      });
}

Tensor channel_pool(const Tensor& x) {
  check_defined(x, "channel_pool");
  if (x.shape().size() != 4) {
    throw std::invalid_argument("channel_pool: expected NCHW, got " +
                                shape_str(x.shape()));
  }
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t plane = H * W;
  const auto& xv = x.values();
  std::vector<double> out(N * 2 * plane);
  auto argmax = std::make_shared<std::vector<int32_t>>(N * plane);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t i = 0; i < plane; ++i) {
      double acc = 0.0;
      double best = xv[(n * C + 0) * plane + i];
      int32_t bestc = 0;
      for (int64_t c = 0; c < C; ++c) {
        const double v = xv[(n * C + c) * plane + i];
        acc += v;
        if (v > best) {
          best = v;
          bestc = static_cast<int32_t>(c);
        }
      }
      out[(n * 2 + 0) * plane + i] = acc / static_cast<double>(C);
      out[(n * 2 + 1) * plane + i] = best;
      (*argmax)[n * plane + i] = bestc;
    }
  }
  auto xi = x.impl();
  return make_op_result(
      Shape{N, 2, H, W}, std::move(out), "channel_pool", {x},
      [xi, argmax, N, C, plane](const std::vector<double>& g,
                                const GradSink& sink) {
        if (!xi->requires_grad) return;
        auto& gx = sink(0);
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t i = 0; i < plane; ++i) {
            const double ga = g[(n * 2 + 0) * plane + i] / static_cast<double>(C);
            for (int64_t c = 0; c < C; ++c) gx[(n * C + c) * plane + i] += ga;
            const int32_t bc = (*argmax)[n * plane + i];
            gx[(n * C + bc) * plane + i] += g[(n * 2 + 1) * plane + i];
          }
        }
      });
}

Tensor grl(const Tensor& x, double lambda_p) {
  check_defined(x, "grl");
  if (lambda_p < 0.0) {
    throw std::invalid_argument("grl: lambda_p must be >= 0");
  }
  std::vector<double> v(x.values());
  if (g_grl_probe_set && g_grl_probe.on_forward) {
    g_grl_probe.on_forward(x.values(), v);
  }
  auto xi = x.impl();
  return make_op_result(
      x.shape(), std::move(v), "grl", {x},
      [xi, lambda_p](const std::vector<double>& g, const GradSink& sink) {
        std::vector<double> gin(g.size());
        for (size_t i = 0; i < g.size(); ++i) gin[i] = -lambda_p * g[i];
        if (g_grl_probe_set && g_grl_probe.on_backward) {
          g_grl_probe.on_backward(lambda_p, g, gin);
        }
        if (xi->requires_grad) {
          auto& gx = sink(0);
          for (size_t i = 0; i < gin.size(); ++i) gx[i] += gin[i];
        }
      });
}

Tensor mmd_rbf(const Tensor& xs, const Tensor& xt, double sigma) {
  check_defined(xs, "mmd_rbf");
  check_defined(xt, "mmd_rbf");
  if (xs.shape().size() != 2 || xt.shape().size() != 2) {
    throw std::invalid_argument("mmd_rbf: expected (N,D) feature matrices");
  }
  if (xs.dim(1) != xt.dim(1)) {
    throw std::invalid_argument("mmd_rbf: feature dims differ " +
                                shape_str(xs.shape()) + " vs " +
                                shape_str(xt.shape()));
  }
  if (xs.dim(0) < 1 || xt.dim(0) < 1) {
    throw std::invalid_argument("mmd_rbf: empty feature set");
  }
  if (!(sigma > 0.0)) {
    throw std::invalid_argument("mmd_rbf: bandwidth must be > 0");
  }
  const int64_t Ns = xs.dim(0), Nt = xt.dim(0), D = xs.dim(1);
  const auto& sv = xs.values();
  const auto& tv = xt.values();
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);

  auto kernel = [&](const double* a, const double* b) {
    double d2 = 0.0;
    for (int64_t k = 0; k < D; ++k) {
      const double d = a[k] - b[k];
      d2 += d * d;
    }
    return std::exp(-d2 * inv2s2);
  };

  double kss = 0.0, ktt = 0.0, kst = 0.0;
  for (int64_t i = 0; i < Ns; ++i) {
    for (int64_t j = 0; j < Ns; ++j) {
      kss += kernel(sv.data() + i * D, sv.data() + j * D);
    }
  }
  for (int64_t i = 0; i < Nt; ++i) {
    for (int64_t j = 0; j < Nt; ++j) {
      ktt += kernel(tv.data() + i * D, tv.data() + j * D);
    }
  }
  for (int64_t i = 0; i < Ns; ++i) {
    for (int64_t j = 0; j < Nt; ++j) {
      kst += kernel(sv.data() + i * D, tv.data() + j * D);
    }
  }
  const double mmd = kss / static_cast<double>(Ns * Ns) +
                     ktt / static_cast<double>(Nt * Nt) -
                     2.0 * kst / static_cast<double>(Ns * Nt);

  auto si = xs.impl();
  auto ti = xt.impl();
  return make_op_result(
      Shape{1}, {mmd}, "mmd_rbf", {xs, xt},
      [si, ti, Ns, Nt, D, inv2s2](const std::vector<double>& g,
                                  const GradSink& sink) {
        const auto& sv = si->values;
        const auto& tv = ti->values;
        auto kernel = [D, inv2s2](const double* a, const double* b) {
          double d2 = 0.0;
          for (int64_t k = 0; k < D; ++k) {
            const double d = a[k] - b[k];
            d2 += d * d;
          }
          return std::exp(-d2 * inv2s2);
        };
        const double g0 = g[0];
        const double css = 2.0 / static_cast<double>(Ns * Ns);
        const double ctt = 2.0 / static_cast<double>(Nt * Nt);
        const double cst = 2.0 / static_cast<double>(Ns * Nt);
        // dk(x,y)/dx = k * (y - x) / sigma^2 = k * (y - x) * 2 * inv2s2
        if (si->requires_grad) {
          auto& gs = sink(0);
          for (int64_t i = 0; i < Ns; ++i) {
            const double* a = sv.data() + i * D;
            double* gi = gs.data() + i * D;
            for (int64_t j = 0; j < Ns; ++j) {
              const double* b = sv.data() + j * D;
              const double k = kernel(a, b);
              const double w = g0 * css * k * 2.0 * inv2s2;
              for (int64_t d = 0; d < D; ++d) gi[d] += w * (b[d] - a[d]);
            }
            for (int64_t j = 0; j < Nt; ++j) {
              const double* b = tv.data() + j * D;
              const double k = kernel(a, b);
              const double w = -g0 * cst * k * 2.0 * inv2s2;
              for (int64_t d = 0; d < D; ++d) gi[d] += w * (b[d] - a[d]);
            }
          }
        }
        if (ti->requires_grad) {
          auto& gt = sink(1);
          for (int64_t i = 0; i < Nt; ++i) {
            const double* a = tv.data() + i * D;
            double* gi = gt.data() + i * D;
            for (int64_t j = 0; j < Nt; ++j) {
              const double* b = tv.data() + j * D;
              const double k = kernel(a, b);
              const double w = g0 * ctt * k * 2.0 * inv2s2;
              for (int64_t d = 0; d < D; ++d) gi[d] += w * (b[d] - a[d]);
            }
            for (int64_t j = 0; j < Ns; ++j) {
              const double* b = sv.data() + j * D;
              const double k = kernel(a, b);
              const double w = -g0 * cst * k * 2.0 * inv2s2;
              for (int64_t d = 0; d < D; ++d) gi[d] += w * (b[d] - a[d]);
            }
          }
        }
      });
}

double mmd_median_bandwidth(const Tensor& xs, const Tensor& xt) {
  check_defined(xs, "mmd_median_bandwidth");
  check_defined(xt, "mmd_median_bandwidth");
  if (xs.shape().size() != 2 || xt.shape().size() != 2 ||
      xs.dim(1) != xt.dim(1)) {
    throw std::invalid_argument(
        "mmd_median_bandwidth: expected (N,D) matrices with equal D");
  }
  const int64_t D = xs.dim(1);
  std::vector<const double*> rows;
  for (int64_t i = 0; i < xs.dim(0); ++i) rows.push_back(xs.values().data() + i * D);
  for (int64_t i = 0; i < xt.dim(0); ++i) rows.push_back(xt.values().data() + i * D);
  std::vector<double> dists;
  dists.reserve(rows.size() * (rows.size() - 1) / 2);
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = i + 1; j < rows.size(); ++j) {
      double d2 = 0.0;
      for (int64_t k = 0; k < D; ++k) {
        const double d = rows[i][k] - rows[j][k];
        d2 += d * d;
      }
      dists.push_back(std::sqrt(d2));
    }
  }
  if (dists.empty()) return 1.0;
  std::sort(dists.begin(), dists.end());
  const size_t n = dists.size();
  const double med =
      (n % 2 == 1) ? dists[n / 2] : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
  return med > 0.0 ? med : 1.0;
}

}  // namespace maad
