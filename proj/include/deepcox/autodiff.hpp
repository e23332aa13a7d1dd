#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcox/rng.hpp"

namespace deepcox::ad {

// Dense row-major matrix of doubles.  Vectors are 1xN or Nx1, scalars 1x1.
// 64-bit floats throughout: desk-scale problem sizes make precision cheaper
// than chasing 32-bit nondeterminism.
struct Tensor {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }
  static Tensor row(const std::vector<double>& v) {
    Tensor t(1, v.size());
    t.data = v;
    return t;
  }
  static Tensor column(const std::vector<double>& v) {
    Tensor t(v.size(), 1);
    t.data = v;
    return t;
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  bool same_shape(const Tensor& o) const {
    return rows == o.rows && cols == o.cols;
  }
  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

// Trainable tensor with persistent gradient and optimiser state.  Gradients
// accumulate across tapes until the caller zeroes them, which is what lets a
// mini-batch be processed pair by pair.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m, v;  // Adam moments

  void zero_grad() {
    grad = Tensor(value.rows, value.cols);
  }
};

namespace detail {

inline void gemm(const Tensor& a, bool ta, const Tensor& b, bool tb,
                 Tensor& out, bool accumulate) {
  const std::size_t m = ta ? a.cols : a.rows;
  const std::size_t k = ta ? a.rows : a.cols;
  const std::size_t n = tb ? b.rows : b.cols;
  if (!accumulate) out = Tensor(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a.at(p, i) : a.at(i, p);
      if (av == 0.0) continue;
      double* orow = &out.data[i * n];
      if (!tb) {
        const double* brow = &b.data[p * n];
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * b.at(j, p);
      }
    }
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

enum class Op {
  leaf,
  param_leaf,
  matmul,
  add,
  affine,
  mul,
  concat,
  slice,
  sigmoid,
  tanh_fn,
  elu,
  exp_fn,
  log_fn,
  softplus,
  softmax,
  gather,
  dropout,
  sum,
  mean
};

struct Value {
  int i = -1;
};

// Dynamically built computation graph.  Nodes are appended in evaluation
// order, so reverse index order is a valid reverse-topological sweep.  A tape
// is confined to one thread; independent tapes run in parallel freely.
class Tape {
 public:
  struct Node {
    Op op;
    int p0 = -1, p1 = -1;
    std::vector<int> parts;  // n-ary concat parents
    Tensor val;
    Tensor grad;
    Param* bound = nullptr;       // param_leaf payload
    std::vector<std::int32_t> idx;  // gather indices
    Tensor aux;                   // dropout mask
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0;  // slice bounds / axis / transpose flags
    double a = 0, b = 0;          // affine coefficients / dropout rate
  };

  Value leaf(Tensor t) {
    Node n;
    n.op = Op::leaf;
    n.val = std::move(t);
    return push(std::move(n));
  }

  Value param(Param& p) {
    Node n;
    n.op = Op::param_leaf;
    n.bound = &p;
    return push(std::move(n));
  }

  const Tensor& value(Value v) const { return val_of(v.i); }
  const Tensor& gradient(Value v) const {
    const Node& n = nodes_[v.i];
    return n.bound ? n.bound->grad : n.grad;
  }

  Value matmul(Value a, Value b, bool trans_a = false, bool trans_b = false) {
    const Tensor& A = val_of(a.i);
    const Tensor& B = val_of(b.i);
    const std::size_t ka = trans_a ? A.rows : A.cols;
    const std::size_t kb = trans_b ? B.cols : B.rows;
    if (ka != kb)
      throw std::runtime_error("matmul: incompatible shapes " + A.shape_str() +
                               " x " + B.shape_str());
    Node n;
    n.op = Op::matmul;
    n.p0 = a.i;
    n.p1 = b.i;
    n.i2 = trans_a;
    n.i3 = trans_b;
    detail::gemm(A, trans_a, B, trans_b, n.val, false);
    return push(std::move(n));
  }

  // Elementwise sum; b may also be a 1xC row vector broadcast over a's rows.
  Value add(Value a, Value b) {
    const Tensor& A = val_of(a.i);
    const Tensor& B = val_of(b.i);
    bool broadcast = !A.same_shape(B);
    if (broadcast && !(B.rows == 1 && B.cols == A.cols))
      throw std::runtime_error("add: incompatible shapes " + A.shape_str() +
                               " + " + B.shape_str());
    Node n;
    n.op = Op::add;
    n.p0 = a.i;
    n.p1 = b.i;
    n.i0 = broadcast;
    n.val = A;
    for (std::size_t i = 0; i < A.rows; ++i)
      for (std::size_t j = 0; j < A.cols; ++j)
        n.val.at(i, j) += broadcast ? B.at(0, j) : B.at(i, j);
    return push(std::move(n));
  }

  // y = s*x + c, elementwise
  Value affine(Value x, double s, double c) {
    Node n;
    n.op = Op::affine;
    n.p0 = x.i;
    n.a = s;
    n.b = c;
    n.val = val_of(x.i);
    for (double& v : n.val.data) v = s * v + c;
    return push(std::move(n));
  }

  Value mul(Value a, Value b) {
    const Tensor& A = val_of(a.i);
    const Tensor& B = val_of(b.i);
    if (!A.same_shape(B))
      throw std::runtime_error("mul: incompatible shapes " + A.shape_str() +
                               " * " + B.shape_str());
    Node n;
    n.op = Op::mul;
    n.p0 = a.i;
    n.p1 = b.i;
    n.val = A;
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val.data[i] *= B.data[i];
    return push(std::move(n));
  }

  Value concat(const std::vector<Value>& parts, int axis) {
    if (parts.empty()) throw std::runtime_error("concat: no inputs");
    if (axis != 0 && axis != 1) throw std::runtime_error("concat: bad axis");
    std::size_t rows = val_of(parts[0].i).rows;
    std::size_t cols = val_of(parts[0].i).cols;
    std::size_t total = 0;
    for (Value p : parts) {
      const Tensor& t = val_of(p.i);
      if (axis == 0) {
        if (t.cols != cols)
          throw std::runtime_error("concat: column mismatch " + t.shape_str());
        total += t.rows;
      } else {
        if (t.rows != rows)
          throw std::runtime_error("concat: row mismatch " + t.shape_str());
        total += t.cols;
      }
    }
    Node n;
    n.op = Op::concat;
    n.i0 = axis;
    for (Value p : parts) n.parts.push_back(p.i);
    if (axis == 0) {
      n.val = Tensor(total, cols);
      std::size_t r = 0;
      for (Value p : parts) {
        const Tensor& t = val_of(p.i);
        for (std::size_t i = 0; i < t.rows; ++i, ++r)
          for (std::size_t j = 0; j < cols; ++j) n.val.at(r, j) = t.at(i, j);
      }
    } else {
      n.val = Tensor(rows, total);
      std::size_t c = 0;
      for (Value p : parts) {
        const Tensor& t = val_of(p.i);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < t.cols; ++j)
            n.val.at(i, c + j) = t.at(i, j);
        c += t.cols;
      }
    }
    return push(std::move(n));
  }

  // Half-open [r0,r1) x [c0,c1) block copy.
  Value slice(Value x, std::size_t r0, std::size_t r1, std::size_t c0,
              std::size_t c1) {
    const Tensor& X = val_of(x.i);
    if (r1 > X.rows || c1 > X.cols || r0 >= r1 || c0 >= c1)
      throw std::runtime_error("slice: bounds out of range for " +
                               X.shape_str());
    Node n;
    n.op = Op::slice;
    n.p0 = x.i;
    n.i0 = static_cast<int>(r0);
    n.i1 = static_cast<int>(r1);
    n.i2 = static_cast<int>(c0);
    n.i3 = static_cast<int>(c1);
    n.val = Tensor(r1 - r0, c1 - c0);
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t j = c0; j < c1; ++j)
        n.val.at(i - r0, j - c0) = X.at(i, j);
    return push(std::move(n));
  }

  Value row(Value x, std::size_t r) {
    return slice(x, r, r + 1, 0, val_of(x.i).cols);
  }

  Value sigmoid(Value x) { return unary(Op::sigmoid, x); }
  Value tanh(Value x) { return unary(Op::tanh_fn, x); }
  Value elu(Value x) { return unary(Op::elu, x); }
  Value exp(Value x) { return unary(Op::exp_fn, x); }
  Value log(Value x) { return unary(Op::log_fn, x); }
  Value softplus(Value x) { return unary(Op::softplus, x); }

  // Stable softmax along rows (axis=1) or columns (axis=0).
  Value softmax(Value x, int axis) {
    if (axis != 0 && axis != 1) throw std::runtime_error("softmax: bad axis");
    const Tensor& X = val_of(x.i);
    Node n;
    n.op = Op::softmax;
    n.p0 = x.i;
    n.i0 = axis;
    n.val = X;
    const std::size_t lanes = axis == 1 ? X.rows : X.cols;
    const std::size_t len = axis == 1 ? X.cols : X.rows;
    for (std::size_t l = 0; l < lanes; ++l) {
      double mx = -1e308;
      for (std::size_t j = 0; j < len; ++j) {
        double v = axis == 1 ? X.at(l, j) : X.at(j, l);
        if (v > mx) mx = v;
      }
      double z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        double v = axis == 1 ? X.at(l, j) : X.at(j, l);
        double e = std::exp(v - mx);
        if (axis == 1)
          n.val.at(l, j) = e;
        else
          n.val.at(j, l) = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) {
        if (axis == 1)
          n.val.at(l, j) /= z;
        else
          n.val.at(j, l) /= z;
      }
    }
    return push(std::move(n));
  }

  // Embedding row lookup from a parameter table.
  Value gather(Param& table, const std::vector<std::int32_t>& ids) {
    Value t = param(table);
    Node n;
    n.op = Op::gather;
    n.p0 = t.i;
    n.idx = ids;
    n.val = Tensor(ids.size(), table.value.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.value.rows)
        throw std::runtime_error("gather: id " + std::to_string(ids[i]) +
                                 " out of range for table " +
                                 table.value.shape_str());
      for (std::size_t j = 0; j < n.val.cols; ++j)
        n.val.at(i, j) = table.value.at(static_cast<std::size_t>(ids[i]), j);
    }
    return push(std::move(n));
  }

  // Inverted dropout: train mode zeroes each element independently with
  // probability `rate` and scales survivors by 1/(1-rate); eval mode is the
  // identity.
  Value dropout(Value x, double rate, bool train, Rng& rng) {
    if (rate < 0 || rate >= 1) throw std::runtime_error("dropout: bad rate");
    Node n;
    n.op = Op::dropout;
    n.p0 = x.i;
    n.a = rate;
    const Tensor& X = val_of(x.i);
    n.val = X;
    if (train && rate > 0) {
      n.aux = Tensor(X.rows, X.cols);
      const double scale = 1.0 / (1.0 - rate);
      for (std::size_t i = 0; i < X.size(); ++i) {
        n.aux.data[i] = rng.uniform() < rate ? 0.0 : scale;
        n.val.data[i] = X.data[i] * n.aux.data[i];
      }
    }
    return push(std::move(n));
  }

  Value sum(Value x) {
    Node n;
    n.op = Op::sum;
    n.p0 = x.i;
    double s = 0;
    for (double v : val_of(x.i).data) s += v;
    n.val = Tensor::scalar(s);
    return push(std::move(n));
  }

  Value mean(Value x) {
    const Tensor& X = val_of(x.i);
    if (X.empty()) throw std::runtime_error("mean: empty input");
    Node n;
    n.op = Op::mean;
    n.p0 = x.i;
    double s = 0;
    for (double v : X.data) s += v;
    n.val = Tensor::scalar(s / static_cast<double>(X.size()));
    return push(std::move(n));
  }

  // Reverse accumulation from a scalar root.  `seed` scales the whole
  // gradient, letting per-pair losses accumulate as a running mean.
  void backward(Value root, double seed = 1.0) {
    Node& rn = nodes_[root.i];
    const Tensor& rv = val_of(root.i);
    if (rv.size() != 1)
      throw std::runtime_error("backward: root is not scalar (" +
                               rv.shape_str() + ")");
    touch_grad(root.i).data[0] += seed;
    (void)rn;
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[i];
      const Tensor& g = n.bound ? n.bound->grad : n.grad;
      if (g.empty()) continue;
      dispatch(n);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;

  Value push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& val_of(int i) const {
    const Node& n = nodes_[i];
    return n.bound ? n.bound->value : n.val;
  }

  Tensor& touch_grad(int i) {
    Node& n = nodes_[i];
    Tensor& g = n.bound ? n.bound->grad : n.grad;
    const Tensor& v = val_of(i);
    if (g.rows != v.rows || g.cols != v.cols) g = Tensor(v.rows, v.cols);
    return g;
  }

  Value unary(Op op, Value x) {
    Node n;
    n.op = op;
    n.p0 = x.i;
    const Tensor& X = val_of(x.i);
    n.val = X;
    switch (op) {
      case Op::sigmoid:
        for (double& v : n.val.data) v = detail::stable_sigmoid(v);
        break;
      case Op::tanh_fn:
        for (double& v : n.val.data) v = std::tanh(v);
        break;
      case Op::elu:
        for (double& v : n.val.data) v = v > 0 ? v : std::expm1(v);
        break;
      case Op::exp_fn:
        for (double& v : n.val.data) {
          v = std::exp(v);
          if (!std::isfinite(v)) throw std::runtime_error("exp: overflow");
        }
        break;
      case Op::log_fn:
        for (double& v : n.val.data) {
          v = std::log(v);
          if (!std::isfinite(v))
            throw std::runtime_error("log: domain/overflow");
        }
        break;
      case Op::softplus:
        for (double& v : n.val.data)
          v = (v > 0 ? v : 0.0) + std::log1p(std::exp(-std::fabs(v)));
        break;
      default:
        throw std::runtime_error("unary: bad op");
    }
    return push(std::move(n));
  }

  void dispatch(Node& n) {
    const Tensor& g = n.bound ? n.bound->grad : n.grad;
    switch (n.op) {
      case Op::leaf:
      case Op::param_leaf:
        break;
      case Op::matmul: {
        const Tensor& A = val_of(n.p0);
        const Tensor& B = val_of(n.p1);
        const bool ta = n.i2, tb = n.i3;
        Tensor& da = touch_grad(n.p0);
        Tensor& db = touch_grad(n.p1);
        if (!ta)
          detail::gemm(g, false, B, !tb, da, true);
        else
          detail::gemm(B, tb, g, true, da, true);
        if (!tb)
          detail::gemm(A, !ta, g, false, db, true);
        else
          detail::gemm(g, true, A, ta, db, true);
        break;
      }
      case Op::add: {
        Tensor& da = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i];
        Tensor& db = touch_grad(n.p1);
        if (n.i0) {
          for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j)
              db.at(0, j) += g.at(i, j);
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) db.data[i] += g.data[i];
        }
        break;
      }
      case Op::affine: {
        Tensor& dx = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.size(); ++i)
          dx.data[i] += n.a * g.data[i];
        break;
      }
      case Op::mul: {
        const Tensor& A = val_of(n.p0);
        const Tensor& B = val_of(n.p1);
        Tensor& da = touch_grad(n.p0);
        Tensor& db = touch_grad(n.p1);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da.data[i] += g.data[i] * B.data[i];
          db.data[i] += g.data[i] * A.data[i];
        }
        break;
      }
      case Op::concat: {
        std::size_t off = 0;
        for (int pi : n.parts) {
          const Tensor& p = val_of(pi);
          Tensor& dp = touch_grad(pi);
          if (n.i0 == 0) {
            for (std::size_t i = 0; i < p.rows; ++i)
              for (std::size_t j = 0; j < p.cols; ++j)
                dp.at(i, j) += g.at(off + i, j);
            off += p.rows;
          } else {
            for (std::size_t i = 0; i < p.rows; ++i)
              for (std::size_t j = 0; j < p.cols; ++j)
                dp.at(i, j) += g.at(i, off + j);
            off += p.cols;
          }
        }
        break;
      }
      case Op::slice: {
        Tensor& dx = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.rows; ++i)
          for (std::size_t j = 0; j < g.cols; ++j)
            dx.at(n.i0 + i, n.i2 + j) += g.at(i, j);
        break;
      }
      case Op::sigmoid: {
        Tensor& dx = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = n.val.data[i];
          dx.data[i] += g.data[i] * y * (1.0 - y);
        }
        break;
      }
      case Op::tanh_fn: {
        Tensor& dx = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = n.val.data[i];
          dx.data[i] += g.data[i] * (1.0 - y * y);
        }
        break;
      }
      case Op::elu: {
        Tensor& dx = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = n.val.data[i];
          dx.data[i] += g.data[i] * (y > 0 ? 1.0 : y + 1.0);
        }
        break;
      }
      case Op::exp_fn: {
        Tensor& dx = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.size(); ++i)
          dx.data[i] += g.data[i] * n.val.data[i];
        break;
      }
      case Op::log_fn: {
        const Tensor& X = val_of(n.p0);
        Tensor& dx = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.size(); ++i)
          dx.data[i] += g.data[i] / X.data[i];
        break;
      }
      case Op::softplus: {
        const Tensor& X = val_of(n.p0);
        Tensor& dx = touch_grad(n.p0);
        for (std::size_t i = 0; i < g.size(); ++i)
          dx.data[i] += g.data[i] * detail::stable_sigmoid(X.data[i]);
        break;
      }
      case Op::softmax: {
        Tensor& dx = touch_grad(n.p0);
        const std::size_t lanes = n.i0 == 1 ? g.rows : g.cols;
        const std::size_t len = n.i0 == 1 ? g.cols : g.rows;
        for (std::size_t l = 0; l < lanes; ++l) {
          double dot = 0;
          for (std::size_t j = 0; j < len; ++j) {
            double y = n.i0 == 1 ? n.val.at(l, j) : n.val.at(j, l);
            double gg = n.i0 == 1 ? g.at(l, j) : g.at(j, l);
            dot += y * gg;
          }
          for (std::size_t j = 0; j < len; ++j) {
            double y = n.i0 == 1 ? n.val.at(l, j) : n.val.at(j, l);
            double gg = n.i0 == 1 ? g.at(l, j) : g.at(j, l);
            double d = y * (gg - dot);
            if (n.i0 == 1)
              dx.at(l, j) += d;
            else
              dx.at(j, l) += d;
          }
        }
        break;
      }
      case Op::gather: {
        Tensor& dt = touch_grad(n.p0);
        for (std::size_t i = 0; i < n.idx.size(); ++i)
          for (std::size_t j = 0; j < g.cols; ++j)
            dt.at(static_cast<std::size_t>(n.idx[i]), j) += g.at(i, j);
        break;
      }
      case Op::dropout: {
        Tensor& dx = touch_grad(n.p0);
        if (n.aux.empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) dx.data[i] += g.data[i];
        } else {
          for (std::size_t i = 0; i < g.size(); ++i)
            dx.data[i] += g.data[i] * n.aux.data[i];
        }
        break;
      }
      case Op::sum: {
        Tensor& dx = touch_grad(n.p0);
        for (double& v : dx.data) v += g.data[0];
        break;
      }
      case Op::mean: {
        Tensor& dx = touch_grad(n.p0);
        const double s = g.data[0] / static_cast<double>(dx.size());
        for (double& v : dx.data) v += s;
        break;
      }
    }
  }
};

// f builds a scalar from leaves created on the given tape, one per input.
using ScalarFn =
    std::function<Value(Tape&, const std::vector<Value>&)>;

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  Value out = f(tape, leaves);
  return tape.value(out).data[0];
}

// Central differences d f / d inputs[which], elementwise.
inline Tensor numeric_gradient(const ScalarFn& f, std::vector<Tensor> inputs,
                               std::size_t which, double epsilon) {
  Tensor g(inputs[which].rows, inputs[which].cols);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double keep = inputs[which].data[i];
    inputs[which].data[i] = keep + epsilon;
    const double up = eval_scalar(f, inputs);
    inputs[which].data[i] = keep - epsilon;
    const double dn = eval_scalar(f, inputs);
    inputs[which].data[i] = keep;
    g.data[i] = (up - dn) / (2.0 * epsilon);
  }
  return g;
}

inline double relative_error(double analytic, double numeric) {
  const double denom = std::fabs(analytic) + std::fabs(numeric);
  if (denom <= 1e-8) return 0.0;
  return std::fabs(analytic - numeric) / denom;
}

// Max elementwise relative error between reverse-mode and central-difference
// gradients over all inputs.
inline double gradient_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                             double epsilon) {
  if (epsilon <= 0) throw std::runtime_error("gradient_check: epsilon <= 0");
  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  Value out = f(tape, leaves);
  tape.backward(out);
  double worst = 0.0;
  for (std::size_t w = 0; w < inputs.size(); ++w) {
    const Tensor numeric = numeric_gradient(f, inputs, w, epsilon);
    const Tensor& analytic = tape.gradient(leaves[w]);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double a = analytic.empty() ? 0.0 : analytic.data[i];
      worst = std::max(worst, relative_error(a, numeric.data[i]));
    }
  }
  return worst;
}

}  // namespace deepcox::ad
