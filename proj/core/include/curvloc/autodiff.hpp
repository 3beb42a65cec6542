// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace curvloc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace ad {

/// Raised when a recorded operation produces a NaN or infinity.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Named dense parameter blocks. Block shapes are fixed at creation; values
/// can be mutated in place through `at()`.
class ParamStore {
 public:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols);

  [[nodiscard]] Eigen::Map<Matrix> at(std::string_view name);
  [[nodiscard]] const Matrix& at(std::string_view name) const;
  [[nodiscard]] Eigen::Map<Matrix> block(std::size_t index);
  [[nodiscard]] const Matrix& block(std::size_t index) const;
  [[nodiscard]] const std::string& name(std::size_t index) const { return blocks_.at(index).name; }
  [[nodiscard]] std::size_t index_of(std::string_view name) const;

  [[nodiscard]] std::size_t block_count() const { return blocks_.size(); }
  [[nodiscard]] std::size_t total_size() const;

  /// Blocks in insertion order, each block row-major.
  [[nodiscard]] std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  [[nodiscard]] bool same_layout(const ParamStore& other) const;
  [[nodiscard]] bool all_finite() const;

 private:
  struct Block {
    std::string name;
    Matrix value;
  };
  std::vector<Block> blocks_;
};

struct NodeId {
  int index = -1;
  [[nodiscard]] bool valid() const { return index >= 0; }
};

/// Reverse-mode tape over matrix-valued nodes. Columns are treated as
/// independent batch entries by every op except `dot` and `sum_squares`,
/// which reduce to a 1x1 scalar.
class Tape {
 public:
  enum class Op {
    Constant,
    Variable,
    Affine,
    Tanh,
    Add,
    Sub,
    Scale,
    ScaleCols,
    Hadamard,
    ConcatRows,
    GatherCols,
    Dot,
    SumSquares,
  };

  NodeId constant(Matrix value);
  NodeId variable(Matrix value);

  /// W * X (+ b broadcast over columns when `b` is valid).
  NodeId affine(NodeId w, NodeId x, NodeId b = {});
  NodeId tanh(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  /// Column j multiplied by factors[j].
  NodeId scale_cols(NodeId a, const Vector& factors);
  NodeId hadamard(NodeId a, NodeId b);
  NodeId concat_rows(std::span<const NodeId> parts);
  /// Output column j is column ids[j] of `table`.
  NodeId gather_cols(NodeId table, std::vector<int> ids);
  NodeId dot(NodeId a, NodeId b);
  NodeId sum_squares(NodeId a);

  /// Seeds d(out)/d(out) = 1 for a 1x1 node and propagates to every node
  /// that depends on a variable.
  void backward(NodeId out);

  [[nodiscard]] const Matrix& value(NodeId id) const;
  /// Zero matrix when the node received no gradient.
  [[nodiscard]] Matrix grad(NodeId id) const;
  [[nodiscard]] double scalar(NodeId id) const;
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::Constant;
    std::vector<int> inputs;
    Matrix value;
    Matrix grad;
    Vector factors;
    std::vector<int> ids;
    double factor = 1.0;
    bool needs_grad = false;
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;
  void accumulate(int index, const Matrix& g);

  std::vector<Node> nodes_;
};

[[nodiscard]] std::string_view op_name(Tape::Op op);

using ScalarFn = std::function<NodeId(Tape&, NodeId)>;
using VectorFn = std::function<NodeId(Tape&, NodeId)>;

/// Gradient of a scalar function recorded on a fresh tape.
[[nodiscard]] Vector grad_scalar(const ScalarFn& f, const Vector& x);

/// J(x)^T v for a vector function via one reverse pass.
[[nodiscard]] Vector vjp(const VectorFn& s, const Vector& x, const Vector& v);

/// Column-wise VJP: column k of the result is J(X_k)^T V_k. Requires `s`
/// to act independently on each column of its input.
[[nodiscard]] Matrix vjp_columns(const VectorFn& s, const Matrix& x, const Matrix& v);

/// Central-difference Jacobian, entry (i, j) = (s_i(x + h e_j) - s_i(x - h e_j)) / 2h.
[[nodiscard]] Matrix finite_diff_jacobian(const std::function<Vector(const Vector&)>& s,
                                          const Vector& x, double h);

}  // namespace ad
}  // namespace curvloc
