#include "bridge/tensor.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace bridge {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kGeluCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / M_PI);

struct AxisSpan {
  int64_t outer = 1;
  int64_t len = 1;
  int64_t inner = 1;
};

AxisSpan axis_span(const Shape& shape, int axis) {
  AxisSpan s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  s.len = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  return axis;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  if (s.empty()) return 0;
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw DimensionError("shape has non-positive dimension: " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

ValueRef Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return ValueRef{static_cast<int>(nodes_.size()) - 1};
}

Graph::Node& Graph::at(ValueRef v) { return nodes_[static_cast<size_t>(v.id)]; }
const Graph::Node& Graph::at(ValueRef v) const { return nodes_[static_cast<size_t>(v.id)]; }

bool Graph::any_needs_grad(const std::vector<int>& ids) const {
  for (int id : ids)
    if (nodes_[static_cast<size_t>(id)].needs_grad) return true;
  return false;
}

std::vector<double>& Graph::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), 0.0);
  return n.grad;
}

const Tensor& Graph::value(ValueRef v) const { return at(v).value; }

const std::vector<double>& Graph::grad(ValueRef v) const { return at(v).grad; }

ValueRef Graph::input(Tensor t) {
  Node n;
  n.needs_grad = t.requires_grad;
  n.value = std::move(t);
  return push(std::move(n));
}

ValueRef Graph::param(Tensor& t) {
  Node n;
  n.value = t;
  n.needs_grad = t.requires_grad;
  n.bound = &t;
  return push(std::move(n));
}

ValueRef Graph::add(ValueRef a, ValueRef b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (ta.shape != tb.shape)
    throw DimensionError("add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.value = Tensor(ta.shape);
  for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] = ta.data[i] + tb.data[i];
  n.inputs = {a.id, b.id};
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad)
    n.back = [a, b](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      for (ValueRef in : {a, b}) {
        if (!g.nodes_[static_cast<size_t>(in.id)].needs_grad) continue;
        auto& gi = g.grad_buf(in.id);
        for (size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i];
      }
    };
  return push(std::move(n));
}

ValueRef Graph::sub(ValueRef a, ValueRef b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (ta.shape != tb.shape)
    throw DimensionError("sub: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.value = Tensor(ta.shape);
  for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] = ta.data[i] - tb.data[i];
  n.inputs = {a.id, b.id};
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad)
    n.back = [a, b](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      if (g.nodes_[static_cast<size_t>(a.id)].needs_grad) {
        auto& ga = g.grad_buf(a.id);
        for (size_t i = 0; i < gs.size(); ++i) ga[i] += gs[i];
      }
      if (g.nodes_[static_cast<size_t>(b.id)].needs_grad) {
        auto& gb = g.grad_buf(b.id);
        for (size_t i = 0; i < gs.size(); ++i) gb[i] -= gs[i];
      }
    };
  return push(std::move(n));
}

ValueRef Graph::mul(ValueRef a, ValueRef b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (ta.shape != tb.shape)
    throw DimensionError("mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.value = Tensor(ta.shape);
  for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] = ta.data[i] * tb.data[i];
  n.inputs = {a.id, b.id};
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad)
    n.back = [a, b](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      const auto& da = g.nodes_[static_cast<size_t>(a.id)].value.data;
      const auto& db = g.nodes_[static_cast<size_t>(b.id)].value.data;
      if (g.nodes_[static_cast<size_t>(a.id)].needs_grad) {
        auto& ga = g.grad_buf(a.id);
        for (size_t i = 0; i < gs.size(); ++i) ga[i] += gs[i] * db[i];
      }
      if (g.nodes_[static_cast<size_t>(b.id)].needs_grad) {
        auto& gb = g.grad_buf(b.id);
        for (size_t i = 0; i < gs.size(); ++i) gb[i] += gs[i] * da[i];
      }
    };
  return push(std::move(n));
}

ValueRef Graph::scale(ValueRef x, double c) {
  const Tensor& tx = at(x).value;
  Node n;
  n.value = Tensor(tx.shape);
  for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] = tx.data[i] * c;
  n.inputs = {x.id};
  n.needs_grad = at(x).needs_grad;
  if (n.needs_grad)
    n.back = [x, c](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      auto& gx = g.grad_buf(x.id);
      for (size_t i = 0; i < gs.size(); ++i) gx[i] += gs[i] * c;
    };
  return push(std::move(n));
}

ValueRef Graph::add_rowvec(ValueRef x, ValueRef b) {
  const Tensor& tx = at(x).value;
  const Tensor& tb = at(b).value;
  if (tx.rank() != 2 || tb.rank() != 1 || tb.dim(0) != tx.dim(1))
    throw DimensionError("add_rowvec: shapes " + shape_str(tx.shape) + " and " + shape_str(tb.shape));
  const int m = tx.rows(), c = tx.cols();
  Node n;
  n.value = Tensor(tx.shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j)
      n.value.at(i, j) = tx.at(i, j) + tb.data[static_cast<size_t>(j)];
  n.inputs = {x.id, b.id};
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad)
    n.back = [x, b, m, c](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      if (g.nodes_[static_cast<size_t>(x.id)].needs_grad) {
        auto& gx = g.grad_buf(x.id);
        for (size_t i = 0; i < gs.size(); ++i) gx[i] += gs[i];
      }
      if (g.nodes_[static_cast<size_t>(b.id)].needs_grad) {
        auto& gb = g.grad_buf(b.id);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < c; ++j)
            gb[static_cast<size_t>(j)] += gs[static_cast<size_t>(i) * c + j];
      }
    };
  return push(std::move(n));
}

ValueRef Graph::matmul(ValueRef a, ValueRef b) {
  const Tensor& ta = at(a).value;
  const Tensor& tb = at(b).value;
  if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_str(ta.shape) + " and " + shape_str(tb.shape));
  const int m = ta.rows(), k = ta.cols(), c = tb.cols();
  Node n;
  n.value = Tensor(Shape{m, c});
  {
    const double* A = ta.data.data();
    const double* B = tb.data.data();
    double* C = n.value.data.data();
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const double aik = A[static_cast<size_t>(i) * k + kk];
        if (aik == 0.0) continue;
        const double* brow = B + static_cast<size_t>(kk) * c;
        double* crow = C + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) crow[j] += aik * brow[j];
      }
  }
  n.inputs = {a.id, b.id};
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad)
    n.back = [a, b, m, k, c](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      const double* A = g.nodes_[static_cast<size_t>(a.id)].value.data.data();
      const double* B = g.nodes_[static_cast<size_t>(b.id)].value.data.data();
      if (g.nodes_[static_cast<size_t>(a.id)].needs_grad) {
        auto& ga = g.grad_buf(a.id);
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double s = 0.0;
            const double* grow = gs.data() + static_cast<size_t>(i) * c;
            const double* brow = B + static_cast<size_t>(kk) * c;
            for (int j = 0; j < c; ++j) s += grow[j] * brow[j];
            ga[static_cast<size_t>(i) * k + kk] += s;
          }
      }
      if (g.nodes_[static_cast<size_t>(b.id)].needs_grad) {
        auto& gb = g.grad_buf(b.id);
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const double aik = A[static_cast<size_t>(i) * k + kk];
            if (aik == 0.0) continue;
            const double* grow = gs.data() + static_cast<size_t>(i) * c;
            double* gbrow = gb.data() + static_cast<size_t>(kk) * c;
            for (int j = 0; j < c; ++j) gbrow[j] += aik * grow[j];
          }
      }
    };
  return push(std::move(n));
}

ValueRef Graph::transpose(ValueRef x) {
  const Tensor& tx = at(x).value;
  if (tx.rank() != 2) throw DimensionError("transpose: rank-2 tensor required, got " + shape_str(tx.shape));
  const int m = tx.rows(), c = tx.cols();
  Node n;
  n.value = Tensor(Shape{c, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) n.value.at(j, i) = tx.at(i, j);
  n.inputs = {x.id};
  n.needs_grad = at(x).needs_grad;
  if (n.needs_grad)
    n.back = [x, m, c](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      auto& gx = g.grad_buf(x.id);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j)
          gx[static_cast<size_t>(i) * c + j] += gs[static_cast<size_t>(j) * m + i];
    };
  return push(std::move(n));
}

ValueRef Graph::gelu(ValueRef x) {
  const Tensor& tx = at(x).value;
  Node n;
  n.value = Tensor(tx.shape);
  for (size_t i = 0; i < tx.data.size(); ++i) {
    const double v = tx.data[i];
    const double u = kSqrt2OverPi * (v + kGeluCoeff * v * v * v);
    n.value.data[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  n.inputs = {x.id};
  n.needs_grad = at(x).needs_grad;
  if (n.needs_grad)
    n.back = [x](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      const auto& xv = g.nodes_[static_cast<size_t>(x.id)].value.data;
      auto& gx = g.grad_buf(x.id);
      for (size_t i = 0; i < gs.size(); ++i) {
        const double v = xv[i];
        const double u = kSqrt2OverPi * (v + kGeluCoeff * v * v * v);
        const double t = std::tanh(u);
        const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * v * v);
        gx[i] += gs[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
    };
  return push(std::move(n));
}

ValueRef Graph::softmax(ValueRef x, int axis) {
  const Tensor& tx = at(x).value;
  axis = normalize_axis(axis, tx.rank(), "softmax");
  const AxisSpan sp = axis_span(tx.shape, axis);
  Node n;
  n.value = Tensor(tx.shape);
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      const int64_t base = o * sp.len * sp.inner + in;
      double mx = kNegInf;
      for (int64_t j = 0; j < sp.len; ++j)
        mx = std::max(mx, tx.data[static_cast<size_t>(base + j * sp.inner)]);
      if (mx == kNegInf) throw ContractError("softmax: fully masked slice");
      double sum = 0.0;
      for (int64_t j = 0; j < sp.len; ++j) {
        const double e = std::exp(tx.data[static_cast<size_t>(base + j * sp.inner)] - mx);
        n.value.data[static_cast<size_t>(base + j * sp.inner)] = e;
        sum += e;
      }
      for (int64_t j = 0; j < sp.len; ++j)
        n.value.data[static_cast<size_t>(base + j * sp.inner)] /= sum;
    }
  n.inputs = {x.id};
  n.needs_grad = at(x).needs_grad;
  if (n.needs_grad)
    n.back = [x, sp](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      const auto& y = g.nodes_[static_cast<size_t>(self)].value.data;
      auto& gx = g.grad_buf(x.id);
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t in = 0; in < sp.inner; ++in) {
          const int64_t base = o * sp.len * sp.inner + in;
          double dot = 0.0;
          for (int64_t j = 0; j < sp.len; ++j) {
            const size_t idx = static_cast<size_t>(base + j * sp.inner);
            dot += y[idx] * gs[idx];
          }
          for (int64_t j = 0; j < sp.len; ++j) {
            const size_t idx = static_cast<size_t>(base + j * sp.inner);
            gx[idx] += y[idx] * (gs[idx] - dot);
          }
        }
    };
  return push(std::move(n));
}

ValueRef Graph::layer_norm(ValueRef x, ValueRef gamma, ValueRef beta, double eps) {
  const Tensor& tx = at(x).value;
  const Tensor& tg = at(gamma).value;
  const Tensor& tb = at(beta).value;
  if (tx.rank() < 1) throw DimensionError("layer_norm: rank >= 1 required");
  const int d = tx.shape.back();
  if (tg.shape != Shape{d} || tb.shape != Shape{d})
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                         shape_str(tg.shape) + " and " + shape_str(tb.shape));
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const int64_t rows = tx.size() / d;
  Node n;
  n.value = Tensor(tx.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = tx.data.data() + r * d;
    double* yr = n.value.data.data() + r * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j)
      yr[j] = tg.data[static_cast<size_t>(j)] * (xr[j] - mean) * inv + tb.data[static_cast<size_t>(j)];
  }
  n.inputs = {x.id, gamma.id, beta.id};
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad)
    n.back = [x, gamma, beta, d, rows, eps](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      const auto& xv = g.nodes_[static_cast<size_t>(x.id)].value.data;
      const auto& gv = g.nodes_[static_cast<size_t>(gamma.id)].value.data;
      const bool need_x = g.nodes_[static_cast<size_t>(x.id)].needs_grad;
      const bool need_g = g.nodes_[static_cast<size_t>(gamma.id)].needs_grad;
      const bool need_b = g.nodes_[static_cast<size_t>(beta.id)].needs_grad;
      std::vector<double> xhat(static_cast<size_t>(d));
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        const double* gr = gs.data() + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) xhat[static_cast<size_t>(j)] = (xr[j] - mean) * inv;
        if (need_g) {
          auto& gg = g.grad_buf(gamma.id);
          for (int j = 0; j < d; ++j) gg[static_cast<size_t>(j)] += gr[j] * xhat[static_cast<size_t>(j)];
        }
        if (need_b) {
          auto& gb = g.grad_buf(beta.id);
          for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += gr[j];
        }
        if (need_x) {
          auto& gx = g.grad_buf(x.id);
          double mg = 0.0, mgx = 0.0;
          for (int j = 0; j < d; ++j) {
            const double h = gr[j] * gv[static_cast<size_t>(j)];
            mg += h;
            mgx += h * xhat[static_cast<size_t>(j)];
          }
          mg /= d;
          mgx /= d;
          for (int j = 0; j < d; ++j) {
            const double h = gr[j] * gv[static_cast<size_t>(j)];
            gx[static_cast<size_t>(r * d + j)] += (h - mg - xhat[static_cast<size_t>(j)] * mgx) * inv;
          }
        }
      }
    };
  return push(std::move(n));
}

ValueRef Graph::concat(const std::vector<ValueRef>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat: empty input list");
  const Tensor& first = at(xs[0]).value;
  axis = normalize_axis(axis, first.rank(), "concat");
  Shape out_shape = first.shape;
  int64_t total = first.shape[static_cast<size_t>(axis)];
  for (size_t i = 1; i < xs.size(); ++i) {
    const Tensor& t = at(xs[i]).value;
    if (t.rank() != first.rank())
      throw DimensionError("concat: rank mismatch " + shape_str(first.shape) + " vs " + shape_str(t.shape));
    for (int d = 0; d < first.rank(); ++d)
      if (d != axis && t.dim(d) != first.dim(d))
        throw DimensionError("concat: shape mismatch off axis, " + shape_str(first.shape) + " vs " +
                             shape_str(t.shape));
    total += t.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = static_cast<int>(total);
  const AxisSpan sp = axis_span(out_shape, axis);

  Node n;
  n.value = Tensor(out_shape);
  std::vector<int> lens;
  lens.reserve(xs.size());
  int64_t off = 0;
  for (ValueRef x : xs) {
    const Tensor& t = at(x).value;
    const int64_t li = t.dim(axis);
    lens.push_back(static_cast<int>(li));
    for (int64_t o = 0; o < sp.outer; ++o) {
      const double* src = t.data.data() + o * li * sp.inner;
      double* dst = n.value.data.data() + (o * sp.len + off) * sp.inner;
      std::memcpy(dst, src, static_cast<size_t>(li * sp.inner) * sizeof(double));
    }
    off += li;
  }
  n.inputs.reserve(xs.size());
  for (ValueRef x : xs) n.inputs.push_back(x.id);
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad) {
    std::vector<int> ids = n.inputs;
    n.back = [ids, lens, sp](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      int64_t off2 = 0;
      for (size_t i = 0; i < ids.size(); ++i) {
        const int64_t li = lens[i];
        if (g.nodes_[static_cast<size_t>(ids[i])].needs_grad) {
          auto& gi = g.grad_buf(ids[i]);
          for (int64_t o = 0; o < sp.outer; ++o) {
            const double* src = gs.data() + (o * sp.len + off2) * sp.inner;
            double* dst = gi.data() + o * li * sp.inner;
            for (int64_t k = 0; k < li * sp.inner; ++k) dst[k] += src[k];
          }
        }
        off2 += li;
      }
    };
  }
  return push(std::move(n));
}

ValueRef Graph::slice(ValueRef x, int axis, int begin, int end) {
  const Tensor& tx = at(x).value;
  axis = normalize_axis(axis, tx.rank(), "slice");
  const int len = tx.dim(axis);
  if (begin < 0 || end > len || begin >= end)
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for axis length " + std::to_string(len));
  Shape out_shape = tx.shape;
  out_shape[static_cast<size_t>(axis)] = end - begin;
  const AxisSpan sp = axis_span(tx.shape, axis);
  const int64_t li = end - begin;
  Node n;
  n.value = Tensor(out_shape);
  for (int64_t o = 0; o < sp.outer; ++o) {
    const double* src = tx.data.data() + (o * sp.len + begin) * sp.inner;
    double* dst = n.value.data.data() + o * li * sp.inner;
    std::memcpy(dst, src, static_cast<size_t>(li * sp.inner) * sizeof(double));
  }
  n.inputs = {x.id};
  n.needs_grad = at(x).needs_grad;
  if (n.needs_grad)
    n.back = [x, sp, begin, li](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      auto& gx = g.grad_buf(x.id);
      for (int64_t o = 0; o < sp.outer; ++o) {
        const double* src = gs.data() + o * li * sp.inner;
        double* dst = gx.data() + (o * sp.len + begin) * sp.inner;
        for (int64_t k = 0; k < li * sp.inner; ++k) dst[k] += src[k];
      }
    };
  return push(std::move(n));
}

ValueRef Graph::linear(ValueRef x, ValueRef w, ValueRef b) { return add_rowvec(matmul(x, w), b); }

ValueRef Graph::embedding_lookup(ValueRef table, const std::vector<int>& ids) {
  const Tensor& tt = at(table).value;
  if (tt.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2, got " + shape_str(tt.shape));
  if (ids.empty()) throw InputError("embedding_lookup: empty id list");
  const int v = tt.rows(), d = tt.cols();
  for (int id : ids)
    if (id < 0 || id >= v)
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(v));
  Node n;
  n.value = Tensor(Shape{static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(n.value.data.data() + i * static_cast<size_t>(d),
                tt.data.data() + static_cast<size_t>(ids[i]) * d, static_cast<size_t>(d) * sizeof(double));
  n.inputs = {table.id};
  n.needs_grad = at(table).needs_grad;
  if (n.needs_grad)
    n.back = [table, ids, d](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      auto& gt = g.grad_buf(table.id);
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          gt[static_cast<size_t>(ids[i]) * d + j] += gs[i * static_cast<size_t>(d) + j];
    };
  return push(std::move(n));
}

ValueRef Graph::cross_entropy(ValueRef logits, const std::vector<int>& targets) {
  const Tensor& tl = at(logits).value;
  if (tl.rank() != 2) throw DimensionError("cross_entropy: logits must be rank 2, got " + shape_str(tl.shape));
  const int rows = tl.rows(), v = tl.cols();
  if (static_cast<int>(targets.size()) != rows)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  for (int t : targets)
    if (t < 0 || t >= v)
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(v) + ")");
  Node n;
  n.value = Tensor(Shape{1});
  double total = 0.0;
  for (int i = 0; i < rows; ++i) {
    const double* xr = tl.data.data() + static_cast<size_t>(i) * v;
    double mx = xr[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(xr[j] - mx);
    total += mx + std::log(sum) - xr[targets[static_cast<size_t>(i)]];
  }
  n.value.data[0] = total / rows;
  n.inputs = {logits.id};
  n.needs_grad = at(logits).needs_grad;
  if (n.needs_grad)
    n.back = [logits, targets, rows, v](Graph& g, int self) {
      const double up = g.nodes_[static_cast<size_t>(self)].grad[0] / rows;
      const auto& xv = g.nodes_[static_cast<size_t>(logits.id)].value.data;
      auto& gx = g.grad_buf(logits.id);
      for (int i = 0; i < rows; ++i) {
        const double* xr = xv.data() + static_cast<size_t>(i) * v;
        double mx = xr[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < v; ++j) sum += std::exp(xr[j] - mx);
        for (int j = 0; j < v; ++j) {
          double p = std::exp(xr[j] - mx) / sum;
          if (j == targets[static_cast<size_t>(i)]) p -= 1.0;
          gx[static_cast<size_t>(i) * v + j] += p * up;
        }
      }
    };
  return push(std::move(n));
}

ValueRef Graph::bce_with_logits(ValueRef logits, const std::vector<double>& targets) {
  const Tensor& tl = at(logits).value;
  const int64_t count = tl.size();
  if (static_cast<int64_t>(targets.size()) != count)
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(count) + " logits");
  Node n;
  n.value = Tensor(Shape{1});
  double total = 0.0;
  for (int64_t i = 0; i < count; ++i) {
    const double z = tl.data[static_cast<size_t>(i)];
    const double y = targets[static_cast<size_t>(i)];
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
  }
  n.value.data[0] = total / static_cast<double>(count);
  n.inputs = {logits.id};
  n.needs_grad = at(logits).needs_grad;
  if (n.needs_grad)
    n.back = [logits, targets, count](Graph& g, int self) {
      const double up = g.nodes_[static_cast<size_t>(self)].grad[0] / static_cast<double>(count);
      const auto& xv = g.nodes_[static_cast<size_t>(logits.id)].value.data;
      auto& gx = g.grad_buf(logits.id);
      for (int64_t i = 0; i < count; ++i) {
        const double z = xv[static_cast<size_t>(i)];
        const double sig = 1.0 / (1.0 + std::exp(-z));
        gx[static_cast<size_t>(i)] += (sig - targets[static_cast<size_t>(i)]) * up;
      }
    };
  return push(std::move(n));
}

ValueRef Graph::mse(ValueRef pred, ValueRef target) {
  const Tensor& tp = at(pred).value;
  const Tensor& tt = at(target).value;
  if (tp.shape != tt.shape)
    throw DimensionError("mse: shape mismatch " + shape_str(tp.shape) + " vs " + shape_str(tt.shape));
  const int64_t count = tp.size();
  Node n;
  n.value = Tensor(Shape{1});
  double total = 0.0;
  for (int64_t i = 0; i < count; ++i) {
    const double d = tp.data[static_cast<size_t>(i)] - tt.data[static_cast<size_t>(i)];
    total += d * d;
  }
  n.value.data[0] = total / static_cast<double>(count);
  n.inputs = {pred.id, target.id};
  n.needs_grad = any_needs_grad(n.inputs);
  if (n.needs_grad)
    n.back = [pred, target, count](Graph& g, int self) {
      const double up = 2.0 * g.nodes_[static_cast<size_t>(self)].grad[0] / static_cast<double>(count);
      const auto& pv = g.nodes_[static_cast<size_t>(pred.id)].value.data;
      const auto& tv = g.nodes_[static_cast<size_t>(target.id)].value.data;
      if (g.nodes_[static_cast<size_t>(pred.id)].needs_grad) {
        auto& gp = g.grad_buf(pred.id);
        for (int64_t i = 0; i < count; ++i)
          gp[static_cast<size_t>(i)] += up * (pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]);
      }
      if (g.nodes_[static_cast<size_t>(target.id)].needs_grad) {
        auto& gt = g.grad_buf(target.id);
        for (int64_t i = 0; i < count; ++i)
          gt[static_cast<size_t>(i)] -= up * (pv[static_cast<size_t>(i)] - tv[static_cast<size_t>(i)]);
      }
    };
  return push(std::move(n));
}

ValueRef Graph::mean_rows(ValueRef x) {
  const Tensor& tx = at(x).value;
  if (tx.rank() != 2) throw DimensionError("mean_rows: rank-2 tensor required, got " + shape_str(tx.shape));
  const int m = tx.rows(), c = tx.cols();
  Node n;
  n.value = Tensor(Shape{1, c});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) n.value.data[static_cast<size_t>(j)] += tx.at(i, j);
  for (int j = 0; j < c; ++j) n.value.data[static_cast<size_t>(j)] /= m;
  n.inputs = {x.id};
  n.needs_grad = at(x).needs_grad;
  if (n.needs_grad)
    n.back = [x, m, c](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      auto& gx = g.grad_buf(x.id);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j)
          gx[static_cast<size_t>(i) * c + j] += gs[static_cast<size_t>(j)] / m;
    };
  return push(std::move(n));
}

ValueRef Graph::sum_all(ValueRef x) {
  const Tensor& tx = at(x).value;
  Node n;
  n.value = Tensor(Shape{1});
  for (double v : tx.data) n.value.data[0] += v;
  n.inputs = {x.id};
  n.needs_grad = at(x).needs_grad;
  if (n.needs_grad)
    n.back = [x](Graph& g, int self) {
      const double up = g.nodes_[static_cast<size_t>(self)].grad[0];
      auto& gx = g.grad_buf(x.id);
      for (double& v : gx) v += up;
    };
  return push(std::move(n));
}

ValueRef Graph::mean_all(ValueRef x) {
  const int64_t count = at(x).value.size();
  return scale(sum_all(x), 1.0 / static_cast<double>(count));
}

ValueRef Graph::causal_mask(ValueRef scores) {
  const Tensor& ts = at(scores).value;
  if (ts.rank() != 2 || ts.rows() != ts.cols())
    throw DimensionError("causal_mask: square rank-2 tensor required, got " + shape_str(ts.shape));
  const int m = ts.rows();
  Node n;
  n.value = ts;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) n.value.at(i, j) = kNegInf;
  n.inputs = {scores.id};
  n.needs_grad = at(scores).needs_grad;
  if (n.needs_grad)
    n.back = [scores, m](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      auto& gx = g.grad_buf(scores.id);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j <= i; ++j)
          gx[static_cast<size_t>(i) * m + j] += gs[static_cast<size_t>(i) * m + j];
    };
  return push(std::move(n));
}

ValueRef Graph::mask_tail_cols(ValueRef scores, int count) {
  const Tensor& ts = at(scores).value;
  if (ts.rank() != 2) throw DimensionError("mask_tail_cols: rank-2 tensor required, got " + shape_str(ts.shape));
  const int m = ts.rows(), c = ts.cols();
  if (count < 0 || count >= c)
    throw ContractError("mask_tail_cols: count " + std::to_string(count) + " must be in [0," +
                        std::to_string(c) + ")");
  Node n;
  n.value = ts;
  for (int i = 0; i < m; ++i)
    for (int j = c - count; j < c; ++j) n.value.at(i, j) = kNegInf;
  n.inputs = {scores.id};
  n.needs_grad = at(scores).needs_grad;
  if (n.needs_grad)
    n.back = [scores, m, c, count](Graph& g, int self) {
      const auto& gs = g.nodes_[static_cast<size_t>(self)].grad;
      auto& gx = g.grad_buf(scores.id);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c - count; ++j)
          gx[static_cast<size_t>(i) * c + j] += gs[static_cast<size_t>(i) * c + j];
    };
  return push(std::move(n));
}

void Graph::backward(ValueRef loss) {
  Node& root = at(loss);
  if (root.value.size() != 1)
    throw ContractError("backward: root must be scalar, got shape " + shape_str(root.value.shape));
  grad_buf(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty() || !n.needs_grad) continue;
    if (n.back) n.back(*this, id);
    if (n.bound && n.bound->requires_grad) {
      n.bound->ensure_grad();
      for (size_t k = 0; k < n.grad.size(); ++k) n.bound->grad[k] += n.grad[k];
    }
  }
}

}  // namespace bridge
