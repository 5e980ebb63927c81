#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lors/errors.hpp"
#include "lors/tensor.hpp"

namespace lors {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid with its owning graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

enum class OpKind : std::uint8_t {
  Input,
  Constant,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddScalar,
  Exp,
  Log,
  Sigmoid,
  Tanh,
  Softplus,
  Sqrt,
  RowSoftmax,
  RowLogSoftmax,
  RowNormalize,
  RowNorm,
  SumAll,
  SumRows,
  SumCols,
  MeanAll,
  MeanRows,
  MeanCols,
  SliceRows,
  SliceCols,
  ConcatRows,
  ConcatCols,
  GatherRows,
  GreaterMask,
};

/// Reverse-mode differentiation over an explicitly recorded computation graph.
///
/// Nodes are evaluated as they are added (define-by-run), and `forward` replays
/// the recorded node list after rebinding inputs. Node order is a topological
/// order by construction. Constants and comparison masks carry no gradient.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves --------------------------------------------------------------

  /// Differentiable leaf bound to `value`. Names must be unique within a graph.
  Var input(const std::string& name, Tensor value) {
    if (input_ids_.count(name)) throw ShapeError("duplicate graph input '" + name + "'");
    Node n;
    n.op = OpKind::Input;
    n.name = name;
    n.differentiable = true;
    n.value = std::move(value);
    const Var v = push(std::move(n));
    input_ids_[name] = v.id;
    return v;
  }

  Var constant(Tensor value) {
    Node n;
    n.op = OpKind::Constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  // ---- structural ----------------------------------------------------------

  Var matmul(Var a, Var b) { return binary(OpKind::MatMul, a, b); }
  Var transpose(Var a) { return unary(OpKind::Transpose, a); }

  Var add(Var a, Var b) { return binary(OpKind::Add, a, b); }
  Var sub(Var a, Var b) { return binary(OpKind::Sub, a, b); }
  Var mul(Var a, Var b) { return binary(OpKind::Mul, a, b); }
  Var div(Var a, Var b) { return binary(OpKind::Div, a, b); }
  Var neg(Var a) { return unary(OpKind::Neg, a); }
  Var scale(Var a, double c) { return unary(OpKind::Scale, a, c); }
  Var add_scalar(Var a, double c) { return unary(OpKind::AddScalar, a, c); }

  Var exp(Var a) { return unary(OpKind::Exp, a); }
  Var log(Var a) { return unary(OpKind::Log, a); }
  Var sigmoid(Var a) { return unary(OpKind::Sigmoid, a); }
  Var tanh(Var a) { return unary(OpKind::Tanh, a); }
  /// log(1 + e^x), evaluated without overflow.
  Var softplus(Var a) { return unary(OpKind::Softplus, a); }
  Var sqrt(Var a) { return unary(OpKind::Sqrt, a); }

  Var softmax_rows(Var a) { return unary(OpKind::RowSoftmax, a); }
  Var log_softmax_rows(Var a) { return unary(OpKind::RowLogSoftmax, a); }
  Var softmax_cols(Var a) { return transpose(softmax_rows(transpose(a))); }
  Var log_softmax_cols(Var a) { return transpose(log_softmax_rows(transpose(a))); }
  /// Each row divided by max(||row||, kNormGuard).
  Var normalize_rows(Var a) { return unary(OpKind::RowNormalize, a); }
  /// Column vector of guarded row norms max(||row||, kNormGuard).
  Var row_norms(Var a) { return unary(OpKind::RowNorm, a); }

  Var sum(Var a) { return unary(OpKind::SumAll, a); }
  /// Sum over each row: m x n -> m x 1.
  Var sum_rows(Var a) { return unary(OpKind::SumRows, a); }
  /// Sum over each column: m x n -> 1 x n.
  Var sum_cols(Var a) { return unary(OpKind::SumCols, a); }
  Var mean(Var a) { return unary(OpKind::MeanAll, a); }
  Var mean_rows(Var a) { return unary(OpKind::MeanRows, a); }
  Var mean_cols(Var a) { return unary(OpKind::MeanCols, a); }

  Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    Node n = make(OpKind::SliceRows, {a.id});
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
  }
  Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    Node n = make(OpKind::SliceCols, {a.id});
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
  }
  Var concat_rows(const std::vector<Var>& parts) { return concat(OpKind::ConcatRows, parts); }
  Var concat_cols(const std::vector<Var>& parts) { return concat(OpKind::ConcatCols, parts); }

  Var gather_rows(Var a, std::vector<std::size_t> indices) {
    Node n = make(OpKind::GatherRows, {a.id});
    n.indices = std::move(indices);
    return push(std::move(n));
  }

  /// 1.0 where a > threshold, else 0.0. Never differentiable.
  Var greater(Var a, double threshold) {
    Node n = make(OpKind::GreaterMask, {a.id});
    n.scalar = threshold;
    n.differentiable = false;
    return push(std::move(n));
  }

  // ---- evaluation ----------------------------------------------------------

  const Tensor& value(Var v) const { return node(v).value; }
  std::size_t size() const { return nodes_.size(); }
  bool differentiable(Var v) const { return node(v).differentiable; }

  void mark_output(const std::string& name, Var v) {
    node(v);
    outputs_[name] = v.id;
  }

  /// Rebinds the named inputs (shapes must match) and replays every node.
  /// Returns the values of all outputs registered through mark_output.
  std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs = {}) {
    for (const auto& [name, value] : inputs) {
      auto it = input_ids_.find(name);
      if (it == input_ids_.end()) throw ShapeError("unknown graph input '" + name + "'");
      Node& n = nodes_[it->second];
      if (n.value.shape() != value.shape()) {
        throw ShapeError("rebinding input '" + name + "' with shape " + value.shape_string() +
                         ", expected " + n.value.shape_string());
      }
      n.value = value;
    }
    for (auto& n : nodes_) {
      if (n.op != OpKind::Input && n.op != OpKind::Constant) n.value = evaluate(n);
    }
    adjoints_.clear();
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : outputs_) out[name] = nodes_[id].value;
    return out;
  }

  /// Reverse sweep from a 1 x 1 output. Adjoints accumulate additively over fan-out.
  void backward(Var output) {
    const Node& out = node(output);
    if (!out.value.is_scalar()) {
      throw GradientError("backward() needs a scalar output, got " + out.value.shape_string());
    }
    adjoints_.assign(nodes_.size(), Tensor{});
    adjoints_[output.id] = Tensor::scalar(1.0);
    for (std::size_t k = output.id + 1; k-- > 0;) {
      const Node& n = nodes_[k];
      if (!n.differentiable || adjoints_[k].size() == 0) continue;
      propagate(n, adjoints_[k]);
    }
  }

  /// Adjoint of `v` from the last backward(); zeros if `v` does not influence the output.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (!n.differentiable) {
      throw GradientError("gradient requested for a constant or mask node");
    }
    if (adjoints_.empty()) throw GradientError("grad() called before backward()");
    if (adjoints_[v.id].size() == 0) return Tensor(n.value.rows(), n.value.cols());
    return adjoints_[v.id];
  }

  /// Adjoints of every named input after backward().
  std::map<std::string, Tensor> input_gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : input_ids_) out[name] = grad(Var{const_cast<Graph*>(this), id});
    return out;
  }

 private:
  struct Node {
    OpKind op = OpKind::Constant;
    std::vector<std::size_t> inputs;
    double scalar = 0.0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::vector<std::size_t> indices;
    std::string name;
    bool differentiable = false;
    Tensor value;
  };

  const Node& node(Var v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw ShapeError("variable does not belong to this graph");
    return nodes_[v.id];
  }

  Node make(OpKind op, std::vector<std::size_t> inputs) const {
    Node n;
    n.op = op;
    n.differentiable = false;
    for (std::size_t id : inputs) n.differentiable = n.differentiable || nodes_[id].differentiable;
    n.inputs = std::move(inputs);
    return n;
  }

  Var push(Node n) {
    if (n.op != OpKind::Input && n.op != OpKind::Constant) n.value = evaluate(n);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var unary(OpKind op, Var a, double c = 0.0) {
    node(a);
    Node n = make(op, {a.id});
    n.scalar = c;
    return push(std::move(n));
  }

  Var binary(OpKind op, Var a, Var b) {
    node(a);
    node(b);
    return push(make(op, {a.id, b.id}));
  }

  Var concat(OpKind op, const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    std::vector<std::size_t> ids;
    for (Var p : parts) {
      node(p);
      ids.push_back(p.id);
    }
    return push(make(op, std::move(ids)));
  }

  const Tensor& in(const Node& n, std::size_t k) const { return nodes_[n.inputs[k]].value; }

  static std::array<std::size_t, 2> broadcast_shape(const Tensor& a, const Tensor& b) {
    auto dim = [&](std::size_t x, std::size_t y) {
      if (x == y || y == 1) return x;
      if (x == 1) return y;
      throw ShapeError("cannot broadcast " + a.shape_string() + " with " + b.shape_string());
    };
    return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
  }

  template <typename F>
  static Tensor elementwise(const Tensor& a, const Tensor& b, F f) {
    const auto [r, c] = broadcast_shape(a, b);
    Tensor out(r, c);
    const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        out(i, j) = f(a(ar ? 0 : i, ac ? 0 : j), b(br ? 0 : i, bc ? 0 : j));
      }
    }
    return out;
  }

  template <typename F>
  static Tensor map(const Tensor& a, F f) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = f(a[k]);
    return out;
  }

  /// Sums a broadcast adjoint back down to `shape`.
  static Tensor reduce_to(const Tensor& g, std::size_t rows, std::size_t cols) {
    if (g.rows() == rows && g.cols() == cols) return g;
    Tensor out(rows, cols);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) {
        out(rows == 1 ? 0 : i, cols == 1 ? 0 : j) += g(i, j);
      }
    }
    return out;
  }

  static double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double stable_softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }

  Tensor evaluate(const Node& n) const {
    switch (n.op) {
      case OpKind::Input:
      case OpKind::Constant:
        return n.value;
      case OpKind::MatMul:
        return lors::matmul(in(n, 0), in(n, 1));
      case OpKind::Transpose:
        return lors::transpose(in(n, 0));
      case OpKind::Add:
        return elementwise(in(n, 0), in(n, 1), [](double x, double y) { return x + y; });
      case OpKind::Sub:
        return elementwise(in(n, 0), in(n, 1), [](double x, double y) { return x - y; });
      case OpKind::Mul:
        return elementwise(in(n, 0), in(n, 1), [](double x, double y) { return x * y; });
      case OpKind::Div:
        return elementwise(in(n, 0), in(n, 1), [](double x, double y) {
          if (y == 0.0) throw DomainError("division by zero in graph");
          return x / y;
        });
      case OpKind::Neg:
        return map(in(n, 0), [](double x) { return -x; });
      case OpKind::Scale: {
        const double c = n.scalar;
        return map(in(n, 0), [c](double x) { return c * x; });
      }
      case OpKind::AddScalar: {
        const double c = n.scalar;
        return map(in(n, 0), [c](double x) { return x + c; });
      }
      case OpKind::Exp:
        return map(in(n, 0), [](double x) { return std::exp(x); });
      case OpKind::Log:
        return map(in(n, 0), [](double x) {
          if (!(x > 0.0)) throw DomainError("log of non-positive value in graph");
          return std::log(x);
        });
      case OpKind::Sigmoid:
        return map(in(n, 0), stable_sigmoid);
      case OpKind::Tanh:
        return map(in(n, 0), [](double x) { return std::tanh(x); });
      case OpKind::Softplus:
        return map(in(n, 0), stable_softplus);
      case OpKind::Sqrt:
        return map(in(n, 0), [](double x) {
          if (x < 0.0) throw DomainError("sqrt of negative value in graph");
          return std::sqrt(x);
        });
      case OpKind::RowSoftmax:
      case OpKind::RowLogSoftmax: {
        const Tensor& a = in(n, 0);
        Tensor out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          auto src = a.row(i);
          auto dst = out.row(i);
          const double mx = *std::max_element(src.begin(), src.end());
          double total = 0.0;
          for (std::size_t j = 0; j < a.cols(); ++j) total += std::exp(src[j] - mx);
          if (n.op == OpKind::RowSoftmax) {
            for (std::size_t j = 0; j < a.cols(); ++j) dst[j] = std::exp(src[j] - mx) / total;
          } else {
            const double lse = mx + std::log(total);
            for (std::size_t j = 0; j < a.cols(); ++j) dst[j] = src[j] - lse;
          }
        }
        return out;
      }
      case OpKind::RowNormalize:
        return lors::normalize_rows(in(n, 0));
      case OpKind::RowNorm: {
        const Tensor& a = in(n, 0);
        Tensor out(a.rows(), 1);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          out(i, 0) = std::max(std::sqrt(sum_of_squares(a.row(i))), kNormGuard);
        }
        return out;
      }
      case OpKind::SumAll:
      case OpKind::MeanAll: {
        const Tensor& a = in(n, 0);
        double acc = 0.0;
        for (double x : a.values()) acc += x;
        if (n.op == OpKind::MeanAll) acc /= static_cast<double>(a.size());
        return Tensor::scalar(acc);
      }
      case OpKind::SumRows:
      case OpKind::MeanRows: {
        const Tensor& a = in(n, 0);
        Tensor out(a.rows(), 1);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          double acc = 0.0;
          for (double x : a.row(i)) acc += x;
          out(i, 0) = n.op == OpKind::MeanRows ? acc / static_cast<double>(a.cols()) : acc;
        }
        return out;
      }
      case OpKind::SumCols:
      case OpKind::MeanCols: {
        const Tensor& a = in(n, 0);
        Tensor out(1, a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
        }
        if (n.op == OpKind::MeanCols) {
          for (auto& x : out.values()) x /= static_cast<double>(a.rows());
        }
        return out;
      }
      case OpKind::SliceRows: {
        const Tensor& a = in(n, 0);
        if (n.begin > n.end || n.end > a.rows()) throw ShapeError("row slice out of range for " + a.shape_string());
        Tensor out(n.end - n.begin, a.cols());
        for (std::size_t i = n.begin; i < n.end; ++i) {
          std::copy(a.row(i).begin(), a.row(i).end(), out.row(i - n.begin).begin());
        }
        return out;
      }
      case OpKind::SliceCols: {
        const Tensor& a = in(n, 0);
        if (n.begin > n.end || n.end > a.cols()) throw ShapeError("column slice out of range for " + a.shape_string());
        Tensor out(a.rows(), n.end - n.begin);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = n.begin; j < n.end; ++j) out(i, j - n.begin) = a(i, j);
        }
        return out;
      }
      case OpKind::ConcatRows: {
        const std::size_t cols = in(n, 0).cols();
        std::vector<double> data;
        std::size_t rows = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& p = in(n, k);
          if (p.cols() != cols) throw ShapeError("concat_rows column mismatch");
          data.insert(data.end(), p.values().begin(), p.values().end());
          rows += p.rows();
        }
        return Tensor(rows, cols, std::move(data));
      }
      case OpKind::ConcatCols: {
        const std::size_t rows = in(n, 0).rows();
        std::size_t cols = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          if (in(n, k).rows() != rows) throw ShapeError("concat_cols row mismatch");
          cols += in(n, k).cols();
        }
        Tensor out(rows, cols);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& p = in(n, k);
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < p.cols(); ++j) out(i, offset + j) = p(i, j);
          }
          offset += p.cols();
        }
        return out;
      }
      case OpKind::GatherRows:
        return lors::gather_rows(in(n, 0), n.indices);
      case OpKind::GreaterMask: {
        const double t = n.scalar;
        return map(in(n, 0), [t](double x) { return x > t ? 1.0 : 0.0; });
      }
    }
    throw ShapeError("unknown graph op");
  }

  void accumulate(std::size_t id, Tensor g) {
    if (!nodes_[id].differentiable) return;
    Tensor& slot = adjoints_[id];
    if (slot.size() == 0) {
      slot = std::move(g);
      return;
    }
    for (std::size_t k = 0; k < slot.size(); ++k) slot[k] += g[k];
  }

  void propagate(const Node& n, const Tensor& g) {
    auto input_shape = [&](std::size_t k) { return in(n, k).shape(); };
    switch (n.op) {
      case OpKind::Input:
      case OpKind::Constant:
      case OpKind::GreaterMask:
        return;
      case OpKind::MatMul:
        accumulate(n.inputs[0], matmul_nt(g, in(n, 1)));
        accumulate(n.inputs[1], matmul_tn(in(n, 0), g));
        return;
      case OpKind::Transpose:
        accumulate(n.inputs[0], lors::transpose(g));
        return;
      case OpKind::Add:
      case OpKind::Sub: {
        const auto [ar, ac] = input_shape(0);
        const auto [br, bc] = input_shape(1);
        accumulate(n.inputs[0], reduce_to(g, ar, ac));
        Tensor gb = reduce_to(g, br, bc);
        if (n.op == OpKind::Sub) {
          for (auto& x : gb.values()) x = -x;
        }
        accumulate(n.inputs[1], std::move(gb));
        return;
      }
      case OpKind::Mul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        auto mul = [](double x, double y) { return x * y; };
        accumulate(n.inputs[0], reduce_to(elementwise(g, b, mul), a.rows(), a.cols()));
        accumulate(n.inputs[1], reduce_to(elementwise(g, a, mul), b.rows(), b.cols()));
        return;
      }
      case OpKind::Div: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        accumulate(n.inputs[0],
                   reduce_to(elementwise(g, b, [](double x, double y) { return x / y; }), a.rows(), a.cols()));
        // d(a/b)/db = -(a/b)/b = -out/b
        Tensor t = elementwise(g, n.value, [](double x, double y) { return -x * y; });
        accumulate(n.inputs[1],
                   reduce_to(elementwise(t, b, [](double x, double y) { return x / y; }), b.rows(), b.cols()));
        return;
      }
      case OpKind::Neg:
        accumulate(n.inputs[0], map(g, [](double x) { return -x; }));
        return;
      case OpKind::Scale: {
        const double c = n.scalar;
        accumulate(n.inputs[0], map(g, [c](double x) { return c * x; }));
        return;
      }
      case OpKind::AddScalar:
        accumulate(n.inputs[0], g);
        return;
      case OpKind::Exp:
        accumulate(n.inputs[0], elementwise(g, n.value, [](double x, double y) { return x * y; }));
        return;
      case OpKind::Log:
        accumulate(n.inputs[0], elementwise(g, in(n, 0), [](double x, double y) { return x / y; }));
        return;
      case OpKind::Sigmoid:
        accumulate(n.inputs[0], elementwise(g, n.value, [](double x, double y) { return x * y * (1.0 - y); }));
        return;
      case OpKind::Tanh:
        accumulate(n.inputs[0], elementwise(g, n.value, [](double x, double y) { return x * (1.0 - y * y); }));
        return;
      case OpKind::Softplus:
        accumulate(n.inputs[0],
                   elementwise(g, in(n, 0), [](double x, double y) { return x * stable_sigmoid(y); }));
        return;
      case OpKind::Sqrt:
        accumulate(n.inputs[0], elementwise(g, n.value, [](double x, double y) { return x / (2.0 * y); }));
        return;
      case OpKind::RowSoftmax: {
        const Tensor& y = n.value;
        Tensor out(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          const double inner = dot(g.row(i), y.row(i));
          for (std::size_t j = 0; j < y.cols(); ++j) out(i, j) = y(i, j) * (g(i, j) - inner);
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case OpKind::RowLogSoftmax: {
        const Tensor& y = n.value;
        Tensor out(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double total = 0.0;
          for (double x : g.row(i)) total += x;
          for (std::size_t j = 0; j < y.cols(); ++j) out(i, j) = g(i, j) - std::exp(y(i, j)) * total;
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case OpKind::RowNormalize: {
        const Tensor& x = in(n, 0);
        const Tensor& y = n.value;
        Tensor out(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const double norm = std::sqrt(sum_of_squares(x.row(i)));
          if (norm > kNormGuard) {
            const double inner = dot(g.row(i), y.row(i));
            for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = (g(i, j) - y(i, j) * inner) / norm;
          } else {
            for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = g(i, j) / kNormGuard;
          }
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case OpKind::RowNorm: {
        const Tensor& x = in(n, 0);
        Tensor out(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const double norm = std::sqrt(sum_of_squares(x.row(i)));
          if (norm <= kNormGuard) continue;
          for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = g(i, 0) * x(i, j) / norm;
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case OpKind::SumAll:
      case OpKind::MeanAll: {
        const auto [r, c] = input_shape(0);
        double v = g.item();
        if (n.op == OpKind::MeanAll) v /= static_cast<double>(r * c);
        accumulate(n.inputs[0], Tensor(r, c, v));
        return;
      }
      case OpKind::SumRows:
      case OpKind::MeanRows: {
        const auto [r, c] = input_shape(0);
        const double f = n.op == OpKind::MeanRows ? 1.0 / static_cast<double>(c) : 1.0;
        Tensor out(r, c);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) out(i, j) = g(i, 0) * f;
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case OpKind::SumCols:
      case OpKind::MeanCols: {
        const auto [r, c] = input_shape(0);
        const double f = n.op == OpKind::MeanCols ? 1.0 / static_cast<double>(r) : 1.0;
        Tensor out(r, c);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) out(i, j) = g(0, j) * f;
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case OpKind::SliceRows: {
        const auto [r, c] = input_shape(0);
        Tensor out(r, c);
        for (std::size_t i = n.begin; i < n.end; ++i) {
          for (std::size_t j = 0; j < c; ++j) out(i, j) = g(i - n.begin, j);
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case OpKind::SliceCols: {
        const auto [r, c] = input_shape(0);
        Tensor out(r, c);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = n.begin; j < n.end; ++j) out(i, j) = g(i, j - n.begin);
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
      case OpKind::ConcatRows: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const auto [r, c] = input_shape(k);
          Tensor part(r, c);
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) part(i, j) = g(offset + i, j);
          }
          offset += r;
          accumulate(n.inputs[k], std::move(part));
        }
        return;
      }
      case OpKind::ConcatCols: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const auto [r, c] = input_shape(k);
          Tensor part(r, c);
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) part(i, j) = g(i, offset + j);
          }
          offset += c;
          accumulate(n.inputs[k], std::move(part));
        }
        return;
      }
      case OpKind::GatherRows: {
        const auto [r, c] = input_shape(0);
        Tensor out(r, c);
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          auto dst = out.row(n.indices[k]);
          auto src = g.row(k);
          for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
        accumulate(n.inputs[0], std::move(out));
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> adjoints_;
  std::map<std::string, std::size_t> input_ids_;
  std::map<std::string, std::size_t> outputs_;
};

inline Var operator+(Var a, Var b) { return a.graph->add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.graph->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.graph->div(a, b); }
inline Var operator-(Var a) { return a.graph->neg(a); }
inline Var operator*(double c, Var a) { return a.graph->scale(a, c); }
inline Var operator*(Var a, double c) { return a.graph->scale(a, c); }
inline Var operator+(Var a, double c) { return a.graph->add_scalar(a, c); }
inline Var operator-(Var a, double c) { return a.graph->add_scalar(a, -c); }

}  // namespace lors
