#include "khn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "khn/errors.hpp"
#include "khn/instrument.hpp"

namespace khn {
namespace {

using detail::Node;
using instrument::OpKind;

void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// Builds the output node; records parents only when some input requires
// grad, so inference-only graphs stay flat.
std::shared_ptr<Node> make_node(Shape shape, std::vector<double> data, const char* op,
                                std::initializer_list<const Tensor*> inputs) {
  check_finite(data, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  for (const Tensor* in : inputs) {
    if (in->defined() && in->requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor* in : inputs) {
      if (in->defined()) node->parents.push_back(in->node());
    }
  }
  return node;
}

// Upstream gradient, multiplied by the fault factor when a test installed one.
class Upstream {
 public:
  Upstream(const Node& self, OpKind kind) : grad_(self.grad) {
    double s = instrument::backward_scale(kind);
    if (s != 1.0) {
      scaled_.resize(self.grad.size());
      for (std::size_t i = 0; i < scaled_.size(); ++i) scaled_[i] = self.grad[i] * s;
      grad_ = scaled_;
    }
  }
  double operator[](std::size_t i) const { return grad_[i]; }
  std::span<const double> span() const { return grad_; }

 private:
  std::span<const double> grad_;
  std::vector<double> scaled_;
};

double* grad_target(Node* parent) {
  if (!parent->requires_grad) return nullptr;
  parent->ensure_grad();
  return parent->grad.data();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + " expects rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

void record_signs(std::span<const double> values, double threshold) {
  if (!instrument::branch_recording_active()) return;
  std::uint64_t word = 0;
  std::size_t bit = 0;
  for (double v : values) {
    if (v > threshold) word |= (std::uint64_t{1} << bit);
    if (++bit == 64) {
      instrument::record_branch(word);
      word = 0;
      bit = 0;
    }
  }
  instrument::record_branch(word ^ (std::uint64_t{bit} << 58));
}

// Index maps from output positions to input positions under trailing-
// dimension broadcasting.
struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  std::size_t rank = std::max(a.size(), b.size());
  plan.out.assign(rank, 1);
  std::vector<std::size_t> a_dims(rank, 1), b_dims(rank, 1);
  std::copy(a.begin(), a.end(), a_dims.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), b_dims.begin() + (rank - b.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (a_dims[i] == b_dims[i] || b_dims[i] == 1) {
      plan.out[i] = a_dims[i];
    } else if (a_dims[i] == 1) {
      plan.out[i] = b_dims[i];
    } else {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    }
  }
  // Strides of the inputs expressed in the output index space (0 where broadcast).
  std::vector<std::size_t> a_stride(rank, 0), b_stride(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    a_stride[i] = a_dims[i] == 1 ? 0 : sa;
    b_stride[i] = b_dims[i] == 1 ? 0 : sb;
    sa *= a_dims[i];
    sb *= b_dims[i];
  }
  std::size_t n = shape_numel(plan.out);
  plan.a_index.resize(n);
  plan.b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.a_index[flat] = ia;
    plan.b_index[flat] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += a_stride[d];
      ib += b_stride[d];
      if (idx[d] < plan.out[d]) break;
      ia -= a_stride[d] * idx[d];
      ib -= b_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

Tensor binary(ElementwiseKind kind, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(kind)];
  auto plan = plan_broadcast(a.shape(), b.shape(), name);
  std::size_t n = shape_numel(plan.out);
  auto ad = a.data();
  auto bd = b.data();
  auto ai = [&](std::size_t i) { return plan.same ? i : plan.a_index[i]; };
  auto bi = [&](std::size_t i) { return plan.same ? i : plan.b_index[i]; };
  std::vector<double> out(n);
  switch (kind) {
    case ElementwiseKind::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[ai(i)] + bd[bi(i)];
      break;
    case ElementwiseKind::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[ai(i)] - bd[bi(i)];
      break;
    case ElementwiseKind::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[ai(i)] * bd[bi(i)];
      break;
    case ElementwiseKind::div:
      for (std::size_t i = 0; i < n; ++i) {
        double den = bd[bi(i)];
        if (den == 0.0) throw NumericError("div: division by zero");
        out[i] = ad[ai(i)] / den;
      }
      break;
    default:
      throw StateError("not a binary elementwise kind");
  }
  auto node = make_node(plan.out, std::move(out), name, {&a, &b});
  if (node->requires_grad) {
    node->backward = [kind, plan = std::move(plan), pa = a.node().get(), pb = b.node().get()](Node& self) {
      Upstream g(self, OpKind::elementwise);
      double* ga = grad_target(pa);
      double* gb = grad_target(pb);
      std::size_t n = self.data.size();
      const auto& av = pa->data;
      const auto& bv = pb->data;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t ia = plan.same ? i : plan.a_index[i];
        std::size_t ib = plan.same ? i : plan.b_index[i];
        double gi = g[i];
        switch (kind) {
          case ElementwiseKind::add:
            if (ga) ga[ia] += gi;
            if (gb) gb[ib] += gi;
            break;
          case ElementwiseKind::sub:
            if (ga) ga[ia] += gi;
            if (gb) gb[ib] -= gi;
            break;
          case ElementwiseKind::mul:
            if (ga) ga[ia] += gi * bv[ib];
            if (gb) gb[ib] += gi * av[ia];
            break;
          case ElementwiseKind::div:
            if (ga) ga[ia] += gi / bv[ib];
            if (gb) gb[ib] -= gi * av[ia] / (bv[ib] * bv[ib]);
            break;
          default:
            break;
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double aip = ad[i * k + p];
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  auto node = make_node({m, n}, std::move(out), "matmul", {&a, &b});
  if (node->requires_grad) {
    node->backward = [m, k, n, pa = a.node().get(), pb = b.node().get()](Node& self) {
      Upstream g(self, OpKind::matmul);
      if (double* ga = grad_target(pa)) {
        const auto& bv = pb->data;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (double* gb = grad_target(pb)) {
        const auto& av = pa->data;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
          }
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  auto node = make_node({c, r}, std::move(out), "transpose", {&a});
  if (node->requires_grad) {
    node->backward = [r, c, pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::reshape);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  auto xd = x.data();
  auto wd = weight.data();
  std::vector<double> out(batch * out_dim);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xr = xd.data() + b * in;
    std::size_t o = 0;
    // Four output units at a time: independent accumulation chains.
    for (; o + 4 <= out_dim; o += 4) {
      const double* w0 = wd.data() + o * in;
      const double* w1 = w0 + in;
      const double* w2 = w1 + in;
      const double* w3 = w2 + in;
      double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
      for (std::size_t i = 0; i < in; ++i) {
        a0 += xr[i] * w0[i];
        a1 += xr[i] * w1[i];
        a2 += xr[i] * w2[i];
        a3 += xr[i] * w3[i];
      }
      out[b * out_dim + o] = a0;
      out[b * out_dim + o + 1] = a1;
      out[b * out_dim + o + 2] = a2;
      out[b * out_dim + o + 3] = a3;
    }
    for (; o < out_dim; ++o) {
      const double* wr = wd.data() + o * in;
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      out[b * out_dim + o] = acc;
    }
    if (bias.defined()) {
      auto bd = bias.data();
      for (o = 0; o < out_dim; ++o) out[b * out_dim + o] += bd[o];
    }
  }
  auto node = make_node({batch, out_dim}, std::move(out), "linear", {&x, &weight, &bias});
  if (node->requires_grad) {
    node->backward = [batch, in, out_dim, px = x.node().get(), pw = weight.node().get(),
                      pbias = bias.defined() ? bias.node().get() : nullptr](Node& self) {
      Upstream g(self, OpKind::linear);
      const auto& xv = px->data;
      const auto& wv = pw->data;
      if (double* gx = grad_target(px)) {
        for (std::size_t b = 0; b < batch; ++b) {
          double* row = gx + b * in;
          for (std::size_t o = 0; o < out_dim; ++o) {
            double go = g[b * out_dim + o];
            if (go == 0.0) continue;
            const double* wr = wv.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) row[i] += go * wr[i];
          }
        }
      }
      if (double* gw = grad_target(pw)) {
        for (std::size_t b = 0; b < batch; ++b) {
          const double* xr = xv.data() + b * in;
          for (std::size_t o = 0; o < out_dim; ++o) {
            double go = g[b * out_dim + o];
            if (go == 0.0) continue;
            double* wr = gw + o * in;
            for (std::size_t i = 0; i < in; ++i) wr[i] += go * xr[i];
          }
        }
      }
      if (pbias) {
        if (double* gb = grad_target(pbias)) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[b * out_dim + o];
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor& b) { return binary(kind, a, b); }

Tensor elementwise(ElementwiseKind kind, const Tensor& a) {
  switch (kind) {
    case ElementwiseKind::relu: return relu(a);
    case ElementwiseKind::exp: return exp(a);
    case ElementwiseKind::log: return log(a);
    case ElementwiseKind::sqrt: return sqrt(a);
    default: throw StateError("binary elementwise kind applied to a single operand");
  }
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(ElementwiseKind::div, a, b); }

Tensor relu(const Tensor& a) {
  auto ad = a.data();
  record_signs(ad, 0.0);
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > 0.0 ? ad[i] : 0.0;
  auto node = make_node(a.shape(), std::move(out), "relu", {&a});
  if (node->requires_grad) {
    node->backward = [pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::relu);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < self.data.size(); ++i) {
        if (pa->data[i] > 0.0) ga[i] += g[i];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor exp(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(ad[i]);
  auto node = make_node(a.shape(), std::move(out), "exp", {&a});
  if (node->requires_grad) {
    node->backward = [pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::elementwise);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += g[i] * self.data[i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor log(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(ad[i] > 0.0)) throw NumericError("log: argument must be positive");
    out[i] = std::log(ad[i]);
  }
  auto node = make_node(a.shape(), std::move(out), "log", {&a});
  if (node->requires_grad) {
    node->backward = [pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::elementwise);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += g[i] / pa->data[i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor sqrt(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (ad[i] < 0.0) throw NumericError("sqrt: argument must be non-negative");
    out[i] = std::sqrt(ad[i]);
  }
  auto node = make_node(a.shape(), std::move(out), "sqrt", {&a});
  if (node->requires_grad) {
    node->backward = [pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::elementwise);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < self.data.size(); ++i) {
        if (g[i] == 0.0) continue;
        if (self.data[i] == 0.0) throw NumericError("sqrt: gradient undefined at 0");
        ga[i] += g[i] * 0.5 / self.data[i];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor scale(const Tensor& a, double factor) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
  auto node = make_node(a.shape(), std::move(out), "scale", {&a});
  if (node->requires_grad) {
    node->backward = [factor, pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::elementwise);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += g[i] * factor;
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor clamp_min(const Tensor& a, double floor) {
  auto ad = a.data();
  record_signs(ad, floor);
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > floor ? ad[i] : floor;
  auto node = make_node(a.shape(), std::move(out), "clamp_min", {&a});
  if (node->requires_grad) {
    node->backward = [floor, pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::clamp_min);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < self.data.size(); ++i) {
        if (pa->data[i] > floor) ga[i] += g[i];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto node = make_node({}, {total}, "sum", {&a});
  if (node->requires_grad) {
    node->backward = [pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::reduce);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < pa->data.size(); ++i) ga[i] += g[0];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor row_sum(const Tensor& a) {
  require_rank(a, 2, "row_sum");
  std::size_t r = a.dim(0), c = a.dim(1);
  auto ad = a.data();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += ad[i * c + j];
  auto node = make_node({r, 1}, std::move(out), "row_sum", {&a});
  if (node->requires_grad) {
    node->backward = [r, c, pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::reduce);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  auto node = make_node(std::move(shape), std::move(out), "reshape", {&a});
  if (node->requires_grad) {
    node->backward = [pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::reshape);
      double* ga = grad_target(pa);
      for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += g[i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor flatten(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("flatten needs at least one axis");
  std::size_t batch = a.dim(0);
  return reshape(a, {batch, batch == 0 ? 0 : a.numel() / batch});
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() < 1) throw ShapeError("gather_rows needs at least one axis");
  std::size_t count = a.dim(0);
  std::size_t width = count == 0 ? 0 : a.numel() / count;
  Shape shape = a.shape();
  shape[0] = rows.size();
  std::vector<double> out(rows.size() * width);
  auto ad = a.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= count) throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  auto node = make_node(std::move(shape), std::move(out), "gather_rows", {&a});
  if (node->requires_grad) {
    node->backward = [width, index = std::vector<std::size_t>(rows.begin(), rows.end()),
                      pa = a.node().get()](Node& self) {
      Upstream g(self, OpKind::reshape);
      double* ga = grad_target(pa);
      for (std::size_t r = 0; r < index.size(); ++r)
        for (std::size_t j = 0; j < width; ++j) ga[index[r] * width + j] += g[r * width + j];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() < 1 || begin > end || end > a.dim(0)) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                     shape_str(a.shape()));
  }
  std::vector<std::size_t> rows(end - begin);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = begin + i;
  return gather_rows(a, rows);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows needs at least one tensor");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t total = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) throw ShapeError("concat_rows: trailing shapes differ");
    total += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape = parts[0].shape();
  shape[0] = total;
  auto node = std::make_shared<Node>();
  check_finite(out, "concat_rows");
  node->shape = std::move(shape);
  node->data = std::move(out);
  node->op = "concat_rows";
  for (const auto& p : parts) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
      node->parents.push_back(p.node());
      offsets.push_back(offset);
      offset += p.numel();
    }
    node->backward = [offsets](Node& self) {
      Upstream g(self, OpKind::reshape);
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node* p = self.parents[k].get();
        double* gp = grad_target(p);
        if (!gp) continue;
        for (std::size_t i = 0; i < p->data.size(); ++i) gp[i] += g[offsets[k] + i];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (batch == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  if (labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  auto z = logits.data();
  std::vector<double> probs(batch * classes);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const double* row = z.data() + b * classes;
    double mx = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[b * classes + c] = std::exp(row[c] - mx);
      denom += probs[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= denom;
    total += std::log(denom) + mx - row[label];
  }
  auto node = make_node({}, {total / static_cast<double>(batch)}, "softmax_cross_entropy", {&logits});
  if (node->requires_grad) {
    node->backward = [batch, classes, probs = std::move(probs),
                      target = std::vector<int>(labels.begin(), labels.end()),
                      pz = logits.node().get()](Node& self) {
      Upstream g(self, OpKind::cross_entropy);
      double* gz = grad_target(pz);
      double s = g[0] / static_cast<double>(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < classes; ++c) {
          double onehot = static_cast<int>(c) == target[b] ? 1.0 : 0.0;
          gz[b * classes + c] += s * (probs[b * classes + c] - onehot);
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

std::vector<double> softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows");
  std::size_t batch = logits.dim(0), classes = logits.dim(1);
  auto z = logits.data();
  std::vector<double> out(batch * classes);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = z.data() + b * classes;
    double mx = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += (out[b * classes + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < classes; ++c) out[b * classes + c] /= denom;
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::size_t O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != k || k % 2 == 0) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) throw ShapeError("conv2d: bias shape mismatch");
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  auto xd = x.data();
  auto wd = weight.data();
  std::vector<double> out(B * O * H * W, 0.0);

  // Visits every (output pixel, input pixel, weight) triple of a
  // same-padded convolution; `fn(out_idx, in_idx, w_idx)`.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              std::size_t w_idx = ((o * C + c) * k + ky) * k + kx;
              std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
              std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
              std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
              std::size_t y1 = dy > 0 ? H - static_cast<std::size_t>(dy) : H;
              std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
              std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
              if (dy > 0 && static_cast<std::size_t>(dy) >= H) continue;
              if (dx > 0 && static_cast<std::size_t>(dx) >= W) continue;
              for (std::size_t yy = y0; yy < y1; ++yy) {
                std::size_t out_row = ((b * O + o) * H + yy) * W;
                std::size_t in_row = ((b * C + c) * H + (yy + dy)) * W;
                fn(out_row, in_row + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x0) + dx), x0, x1 - x0,
                   w_idx);
              }
            }
  };
  for_each_tap([&](std::size_t out_row, std::size_t in_start, std::size_t x0, std::size_t len, std::size_t w_idx) {
    double w = wd[w_idx];
    double* dst = out.data() + out_row + x0;
    const double* src = xd.data() + in_start;
    for (std::size_t i = 0; i < len; ++i) dst[i] += w * src[i];
  });
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o) {
        double* plane = out.data() + (b * O + o) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) plane[i] += bd[o];
      }
  }
  auto node = make_node({B, O, H, W}, std::move(out), "conv2d", {&x, &weight, &bias});
  if (node->requires_grad) {
    node->backward = [for_each_tap, B, O, H, W, px = x.node().get(), pw = weight.node().get(),
                      pb = bias.defined() ? bias.node().get() : nullptr](Node& self) {
      Upstream g(self, OpKind::conv2d);
      auto gs = g.span();
      double* gx = grad_target(px);
      double* gw = grad_target(pw);
      const auto& xv = px->data;
      const auto& wv = pw->data;
      for_each_tap([&](std::size_t out_row, std::size_t in_start, std::size_t x0, std::size_t len, std::size_t w_idx) {
        const double* go = gs.data() + out_row + x0;
        if (gx) {
          double w = wv[w_idx];
          double* dst = gx + in_start;
          for (std::size_t i = 0; i < len; ++i) dst[i] += w * go[i];
        }
        if (gw) {
          const double* src = xv.data() + in_start;
          double acc = 0.0;
          for (std::size_t i = 0; i < len; ++i) acc += go[i] * src[i];
          gw[w_idx] += acc;
        }
      });
      if (pb) {
        if (double* gb = grad_target(pb)) {
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < O; ++o) {
              const double* plane = gs.data() + (b * O + o) * H * W;
              for (std::size_t i = 0; i < H * W; ++i) gb[o] += plane[i];
            }
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  require_rank(x, 4, "max_pool2d");
  std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw ShapeError("max_pool2d: spatial size " + shape_str(x.shape()) + " not divisible by window " +
                     std::to_string(window));
  }
  std::size_t Ho = H / window, Wo = W / window;
  auto xd = x.data();
  std::vector<double> out(B * C * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t plane = 0; plane < B * C; ++plane) {
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = plane * H * W + (oy * window) * W + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            std::size_t idx = plane * H * W + (oy * window + dy) * W + (ox * window + dx);
            if (xd[idx] > xd[best]) best = idx;
          }
        std::size_t o = (plane * Ho + oy) * Wo + ox;
        out[o] = xd[best];
        argmax[o] = best;
      }
  }
  if (instrument::branch_recording_active()) {
    for (auto idx : argmax) instrument::record_branch(idx);
  }
  auto node = make_node({B, C, Ho, Wo}, std::move(out), "max_pool2d", {&x});
  if (node->requires_grad) {
    node->backward = [argmax = std::move(argmax), px = x.node().get()](Node& self) {
      Upstream g(self, OpKind::max_pool);
      double* gx = grad_target(px);
      for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
    };
  }
  return Tensor::from_node(std::move(node));
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 4, "batch_norm2d");
  std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("batch_norm2d: affine parameters must have C entries");
  std::size_t n = B * HW;
  if (n == 0) throw ShapeError("batch_norm2d: empty batch");
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> xhat(xd.size()), out(xd.size()), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) mean += xd[(b * C + c) * HW + i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        double d = xd[(b * C + c) * HW + i] - mean;
        var += d * d;
      }
    var /= static_cast<double>(n);
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        std::size_t idx = (b * C + c) * HW + i;
        xhat[idx] = (xd[idx] - mean) * inv_std[c];
        out[idx] = gd[c] * xhat[idx] + bd[c];
      }
  }
  auto node = make_node(x.shape(), std::move(out), "batch_norm2d", {&x, &gamma, &beta});
  if (node->requires_grad) {
    node->backward = [B, C, HW, n, xhat = std::move(xhat), inv_std = std::move(inv_std), px = x.node().get(),
                      pg = gamma.node().get(), pb = beta.node().get()](Node& self) {
      Upstream g(self, OpKind::batch_norm);
      double* gx = grad_target(px);
      double* gg = grad_target(pg);
      double* gb = grad_target(pb);
      const auto& gamma_v = pg->data;
      for (std::size_t c = 0; c < C; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < HW; ++i) {
            std::size_t idx = (b * C + c) * HW + i;
            sum_g += g[idx];
            sum_gx += g[idx] * xhat[idx];
          }
        if (gg) gg[c] += sum_gx;
        if (gb) gb[c] += sum_g;
        if (gx) {
          double k = gamma_v[c] * inv_std[c] / static_cast<double>(n);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i) {
              std::size_t idx = (b * C + c) * HW + i;
              gx[idx] += k * (static_cast<double>(n) * g[idx] - sum_g - xhat[idx] * sum_gx);
            }
        }
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace khn
