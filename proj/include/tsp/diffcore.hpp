#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation in insertion order. Backward rules are
// themselves written in terms of recorded operations, so a gradient taken
// with `create_graph = true` is an ordinary node that can be differentiated
// again. This is what lets the outer loss be differentiated through a whole
// inner optimization loop.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace tsp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::string shape_string(Index rows, Index cols);

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

class Tape;

// Handle to a value recorded on a Tape.
class Node {
 public:
  Node() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  const Matrix& value() const;
  bool requires_grad() const;
  double scalar() const;

 private:
  friend class Tape;
  Node(Tape* tape, std::size_t id, Index rows, Index cols)
      : tape_(tape), id_(id), rows_(rows), cols_(cols) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  Index rows_ = 0;
  Index cols_ = 0;
};

class Tape {
 public:
  // Maps the adjoint of an operation's output to one adjoint per parent.
  // Entries for parents that do not require gradients may be invalid nodes.
  using Vjp = std::function<std::vector<Node>(const Node& adjoint)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  // Throws NonFiniteError if `value` contains NaN or Inf.
  Node leaf(Matrix value, bool requires_grad);
  // Unchecked, never requires gradients. Used for masks and index matrices.
  Node constant(Matrix value);

  Node record(Matrix value, std::vector<Node> parents, Vjp vjp);

  std::size_t size() const { return entries_.size(); }
  const Matrix& value(const Node& n) const { return entries_[n.id()].value; }
  bool requires_grad(const Node& n) const { return entries_[n.id()].requires_grad; }
  bool is_leaf(const Node& n) const { return entries_[n.id()].is_leaf; }

  // Adjoints of `loss` with respect to each node in `wrt`. Nodes that do not
  // influence `loss` receive an exact zero matrix. With `create_graph` the
  // returned nodes are differentiable; otherwise they are detached constants.
  std::vector<Node> grad(const Node& loss, std::span<const Node> wrt, bool create_graph = false);

  bool recording() const { return recording_; }

  // Every leaf created with requires_grad, in insertion order.
  std::vector<Node> trainable_leaves();

 private:
  struct Entry {
    Matrix value;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<Node> parents;
    Vjp vjp;
  };

  // deque keeps references to stored values stable while the tape grows
  std::deque<Entry> entries_;
  bool recording_ = true;
};

// Gradients of a scalar loss with respect to every requires_grad leaf.
class Gradients {
 public:
  // Zero matrix of the node's shape when the leaf was not reached.
  Matrix operator[](const Node& leaf) const;
  bool contains(const Node& leaf) const { return grads_.count(leaf.id()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(Tape& tape, const Node& loss);
  std::unordered_map<std::size_t, Matrix> grads_;
};

// First-order reverse sweep. `loss` must be 1x1.
Gradients backward(Tape& tape, const Node& loss);

// ---------------------------------------------------------------------------
// Operations. All operands must live on the same tape.

Node matmul(const Node& a, const Node& b);
Node add(const Node& a, const Node& b);
Node sub(const Node& a, const Node& b);
Node scale(const Node& a, double c);
Node transpose(const Node& a);
Node hadamard(const Node& a, const Node& b);
Node relu(const Node& a);
Node tanh(const Node& a);
Node sigmoid(const Node& a);
Node softplus(const Node& a);
// 1 x cols mean over rows.
Node mean_rows(const Node& a);
// (n x d, k x d) -> n x k with entries -||e_i - c_j||^2.
Node neg_sq_dist(const Node& emb, const Node& protos);
// Row-wise softmax.
Node softmax_rows(const Node& logits);
// Mean over rows of the cross entropy of softmax(logits) against labels.
Node softmax_cross_entropy(const Node& logits, std::span<const int> labels);
// Multiplies every entry of `a` by the 1x1 node `s`.
Node mul_scalar(const Node& a, const Node& s);
// Sum of all entries as a 1x1 node.
Node sum(const Node& a);
// 1x1 node holding a(row, col).
Node element(const Node& a, Index row, Index col);
// Square matrix with the column vector `v` on its diagonal.
Node diag_embed(const Node& v);
// Column vector holding the diagonal of a square matrix.
Node diagonal(const Node& a);

inline Node operator+(const Node& a, const Node& b) { return add(a, b); }
inline Node operator-(const Node& a, const Node& b) { return sub(a, b); }
inline Node operator*(const Node& a, const Node& b) { return matmul(a, b); }
inline Node operator*(double c, const Node& a) { return scale(a, c); }

// ---------------------------------------------------------------------------

using ScalarFunction = std::function<Node(Tape&, std::span<const Node>)>;

// Max over all entries of |analytic - central difference| / max(1, |analytic|).
double grad_check(const ScalarFunction& f, std::span<const Matrix> inputs, double eps = 1e-5);

}  // namespace tsp
