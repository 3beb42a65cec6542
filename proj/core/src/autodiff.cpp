// SPDX-License-Identifier: Apache-2.0
#include "curvloc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace curvloc::ad {

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  if (rows <= 0 || cols <= 0) throw ShapeError("parameter block '" + name + "' must be non-empty");
  for (const auto& b : blocks_) {
    if (b.name == name) throw std::invalid_argument("duplicate parameter block '" + name + "'");
  }
  blocks_.push_back({std::move(name), Matrix::Zero(rows, cols)});
}

std::size_t ParamStore::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter block named '" + std::string(name) + "'");
}

Eigen::Map<Matrix> ParamStore::at(std::string_view name) { return block(index_of(name)); }

const Matrix& ParamStore::at(std::string_view name) const { return block(index_of(name)); }

Eigen::Map<Matrix> ParamStore::block(std::size_t index) {
  Matrix& m = blocks_.at(index).value;
  return {m.data(), m.rows(), m.cols()};
}

const Matrix& ParamStore::block(std::size_t index) const { return blocks_.at(index).value; }

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += static_cast<std::size_t>(b.value.size());
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (const auto& b : blocks_) {
    for (Eigen::Index r = 0; r < b.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < b.value.cols(); ++c) out.push_back(b.value(r, c));
    }
  }
  return out;
}

void ParamStore::unflatten(std::span<const double> flat) {
  if (flat.size() != total_size()) {
    throw ShapeError("parameter payload has " + std::to_string(flat.size()) + " values, expected " +
                     std::to_string(total_size()));
  }
  std::size_t k = 0;
  for (auto& b : blocks_) {
    for (Eigen::Index r = 0; r < b.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < b.value.cols(); ++c) b.value(r, c) = flat[k++];
    }
  }
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (blocks_.size() != other.blocks_.size()) return false;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& a = blocks_[i];
    const auto& b = other.blocks_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) {
      return false;
    }
  }
  return true;
}

bool ParamStore::all_finite() const {
  return std::all_of(blocks_.begin(), blocks_.end(),
                     [](const Block& b) { return b.value.allFinite(); });
}

// ---------------------------------------------------------------------------
// Tape

std::string_view op_name(Tape::Op op) {
  switch (op) {
    case Tape::Op::Constant: return "constant";
    case Tape::Op::Variable: return "variable";
    case Tape::Op::Affine: return "affine";
    case Tape::Op::Tanh: return "tanh";
    case Tape::Op::Add: return "add";
    case Tape::Op::Sub: return "sub";
    case Tape::Op::Scale: return "scale";
    case Tape::Op::ScaleCols: return "scale_cols";
    case Tape::Op::Hadamard: return "hadamard";
    case Tape::Op::ConcatRows: return "concat_rows";
    case Tape::Op::GatherCols: return "gather_cols";
    case Tape::Op::Dot: return "dot";
    case Tape::Op::SumSquares: return "sum_squares";
  }
  return "unknown";
}

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

const Tape::Node& Tape::node(NodeId id) const {
  if (id.index < 0 || static_cast<std::size_t>(id.index) >= nodes_.size()) {
    throw std::out_of_range("invalid tape node id");
  }
  return nodes_[static_cast<std::size_t>(id.index)];
}

NodeId Tape::push(Node n) {
  const int index = static_cast<int>(nodes_.size());
  if (!n.value.allFinite()) {
    std::ostringstream os;
    os << "non-finite value at node #" << index << " (" << op_name(n.op) << ")";
    throw NumericError(os.str());
  }
  for (int in : n.inputs) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(in)].needs_grad;
  nodes_.push_back(std::move(n));
  return NodeId{index};
}

NodeId Tape::constant(Matrix value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::variable(Matrix value) {
  Node n;
  n.op = Op::Variable;
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

NodeId Tape::affine(NodeId w, NodeId x, NodeId b) {
  const Matrix& W = node(w).value;
  const Matrix& X = node(x).value;
  if (W.cols() != X.rows()) throw ShapeError("affine: " + shape_str(W) + " * " + shape_str(X));
  Node n;
  n.op = Op::Affine;
  n.inputs = {w.index, x.index};
  n.value.noalias() = W * X;
  if (b.valid()) {
    const Matrix& B = node(b).value;
    if (B.rows() != W.rows() || B.cols() != 1) throw ShapeError("affine: bias shape " + shape_str(B));
    n.value.colwise() += B.col(0);
    n.inputs.push_back(b.index);
  }
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  Node n;
  n.op = Op::Tanh;
  n.inputs = {a.index};
  n.value = node(a).value.array().tanh().matrix();
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  require_same_shape(node(a).value, node(b).value, "add");
  Node n;
  n.op = Op::Add;
  n.inputs = {a.index, b.index};
  n.value = node(a).value + node(b).value;
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  require_same_shape(node(a).value, node(b).value, "sub");
  Node n;
  n.op = Op::Sub;
  n.inputs = {a.index, b.index};
  n.value = node(a).value - node(b).value;
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double factor) {
  Node n;
  n.op = Op::Scale;
  n.inputs = {a.index};
  n.factor = factor;
  n.value = node(a).value * factor;
  return push(std::move(n));
}

NodeId Tape::scale_cols(NodeId a, const Vector& factors) {
  const Matrix& A = node(a).value;
  if (factors.size() != A.cols()) throw ShapeError("scale_cols: factor count mismatch");
  Node n;
  n.op = Op::ScaleCols;
  n.inputs = {a.index};
  n.factors = factors;
  n.value = A * factors.asDiagonal();
  return push(std::move(n));
}

NodeId Tape::hadamard(NodeId a, NodeId b) {
  require_same_shape(node(a).value, node(b).value, "hadamard");
  Node n;
  n.op = Op::Hadamard;
  n.inputs = {a.index, b.index};
  n.value = node(a).value.cwiseProduct(node(b).value);
  return push(std::move(n));
}

NodeId Tape::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = node(parts.front()).value.cols();
  Eigen::Index rows = 0;
  for (NodeId p : parts) {
    if (node(p).value.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += node(p).value.rows();
  }
  Node n;
  n.op = Op::ConcatRows;
  n.value.resize(rows, cols);
  Eigen::Index offset = 0;
  for (NodeId p : parts) {
    const Matrix& v = node(p).value;
    n.value.middleRows(offset, v.rows()) = v;
    offset += v.rows();
    n.inputs.push_back(p.index);
  }
  return push(std::move(n));
}

NodeId Tape::gather_cols(NodeId table, std::vector<int> ids) {
  const Matrix& T = node(table).value;
  Node n;
  n.op = Op::GatherCols;
  n.inputs = {table.index};
  n.value.resize(T.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] < 0 || ids[j] >= T.cols()) throw ShapeError("gather_cols: index out of range");
    n.value.col(static_cast<Eigen::Index>(j)) = T.col(ids[j]);
  }
  n.ids = std::move(ids);
  return push(std::move(n));
}

NodeId Tape::dot(NodeId a, NodeId b) {
  require_same_shape(node(a).value, node(b).value, "dot");
  Node n;
  n.op = Op::Dot;
  n.inputs = {a.index, b.index};
  n.value = Matrix::Constant(1, 1, node(a).value.cwiseProduct(node(b).value).sum());
  return push(std::move(n));
}

NodeId Tape::sum_squares(NodeId a) {
  Node n;
  n.op = Op::SumSquares;
  n.inputs = {a.index};
  n.value = Matrix::Constant(1, 1, node(a).value.squaredNorm());
  return push(std::move(n));
}

const Matrix& Tape::value(NodeId id) const { return node(id).value; }

Matrix Tape::grad(NodeId id) const {
  const Node& n = node(id);
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

double Tape::scalar(NodeId id) const {
  const Matrix& v = node(id).value;
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError("scalar: node is " + shape_str(v));
  return v(0, 0);
}

void Tape::accumulate(int index, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(index)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(NodeId out) {
  const Node& root = node(out);
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ShapeError("backward: output must be 1x1, got " + shape_str(root.value));
  }
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!root.needs_grad) return;
  nodes_[static_cast<std::size_t>(out.index)].grad = Matrix::Ones(1, 1);

  for (int i = out.index; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    const Matrix& G = n.grad;
    switch (n.op) {
      case Op::Constant:
      case Op::Variable:
        break;
      case Op::Affine: {
        const Matrix& W = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
        const Matrix& X = nodes_[static_cast<std::size_t>(n.inputs[1])].value;
        if (nodes_[static_cast<std::size_t>(n.inputs[0])].needs_grad) {
          Matrix gw;
          gw.noalias() = G * X.transpose();
          accumulate(n.inputs[0], gw);
        }
        if (nodes_[static_cast<std::size_t>(n.inputs[1])].needs_grad) {
          Matrix gx;
          gx.noalias() = W.transpose() * G;
          accumulate(n.inputs[1], gx);
        }
        if (n.inputs.size() == 3) accumulate(n.inputs[2], G.rowwise().sum());
        break;
      }
      case Op::Tanh: {
        const Matrix g = G.cwiseProduct((1.0 - n.value.array().square()).matrix());
        accumulate(n.inputs[0], g);
        break;
      }
      case Op::Add:
        accumulate(n.inputs[0], G);
        accumulate(n.inputs[1], G);
        break;
      case Op::Sub:
        accumulate(n.inputs[0], G);
        accumulate(n.inputs[1], -G);
        break;
      case Op::Scale:
        accumulate(n.inputs[0], G * n.factor);
        break;
      case Op::ScaleCols:
        accumulate(n.inputs[0], G * n.factors.asDiagonal());
        break;
      case Op::Hadamard: {
        const Matrix& a = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
        const Matrix& b = nodes_[static_cast<std::size_t>(n.inputs[1])].value;
        accumulate(n.inputs[0], G.cwiseProduct(b));
        accumulate(n.inputs[1], G.cwiseProduct(a));
        break;
      }
      case Op::ConcatRows: {
        Eigen::Index offset = 0;
        for (int in : n.inputs) {
          const Eigen::Index rows = nodes_[static_cast<std::size_t>(in)].value.rows();
          accumulate(in, G.middleRows(offset, rows));
          offset += rows;
        }
        break;
      }
      case Op::GatherCols: {
        Node& table = nodes_[static_cast<std::size_t>(n.inputs[0])];
        if (!table.needs_grad) break;
        Matrix gt = Matrix::Zero(table.value.rows(), table.value.cols());
        for (std::size_t j = 0; j < n.ids.size(); ++j) gt.col(n.ids[j]) += G.col(static_cast<Eigen::Index>(j));
        accumulate(n.inputs[0], gt);
        break;
      }
      case Op::Dot: {
        const double g = G(0, 0);
        const Matrix& a = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
        const Matrix& b = nodes_[static_cast<std::size_t>(n.inputs[1])].value;
        accumulate(n.inputs[0], b * g);
        accumulate(n.inputs[1], a * g);
        break;
      }
      case Op::SumSquares: {
        const Matrix& a = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
        accumulate(n.inputs[0], a * (2.0 * G(0, 0)));
        break;
      }
    }
  }
}

Vector grad_scalar(const ScalarFn& f, const Vector& x) {
  Tape tape;
  const NodeId in = tape.variable(x);
  const NodeId out = f(tape, in);
  tape.backward(out);
  return tape.grad(in).col(0);
}

Vector vjp(const VectorFn& s, const Vector& x, const Vector& v) {
  Tape tape;
  const NodeId in = tape.variable(x);
  const NodeId out = s(tape, in);
  const Matrix& y = tape.value(out);
  if (y.cols() != 1 || y.rows() != v.size()) {
    throw ShapeError("vjp: output is " + shape_str(y) + " but v has length " + std::to_string(v.size()));
  }
  const NodeId probe = tape.constant(v);
  tape.backward(tape.dot(out, probe));
  return tape.grad(in).col(0);
}

Matrix vjp_columns(const VectorFn& s, const Matrix& x, const Matrix& v) {
  Tape tape;
  const NodeId in = tape.variable(x);
  const NodeId out = s(tape, in);
  require_same_shape(tape.value(out), v, "vjp_columns");
  const NodeId probe = tape.constant(v);
  tape.backward(tape.dot(out, probe));
  return tape.grad(in);
}

Matrix finite_diff_jacobian(const std::function<Vector(const Vector&)>& s, const Vector& x,
                            double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_jacobian: step must be positive");
  const Vector y0 = s(x);
  Matrix J(y0.size(), x.size());
  Vector xp = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    xp(j) = x(j) + h;
    const Vector plus = s(xp);
    xp(j) = x(j) - h;
    const Vector minus = s(xp);
    xp(j) = x(j);
    J.col(j) = (plus - minus) / (2.0 * h);
  }
  if (!J.allFinite()) throw NumericError("finite_diff_jacobian: non-finite entry");
  return J;
}

}  // namespace curvloc::ad
