#include "tsp/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tsp {

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "(" << rows << "x" << cols << ")";
  return os.str();
}

const Matrix& Node::value() const { return tape_->value(*this); }

bool Node::requires_grad() const { return tape_->requires_grad(*this); }

double Node::scalar() const {
  if (rows_ != 1 || cols_ != 1) {
    throw ShapeError("scalar() on non-scalar node " + shape_string(rows_, cols_));
  }
  return value()(0, 0);
}

Node Tape::leaf(Matrix value, bool requires_grad) {
  if (!all_finite(value)) {
    throw NonFiniteError("leaf value " + shape_string(value.rows(), value.cols()) +
                         " contains NaN or Inf");
  }
  const Index r = value.rows(), c = value.cols();
  Entry& e = entries_.emplace_back();
  e.value = std::move(value);
  e.requires_grad = requires_grad;
  e.is_leaf = true;
  return Node(this, entries_.size() - 1, r, c);
}

Node Tape::constant(Matrix value) {
  const Index r = value.rows(), c = value.cols();
  Entry& e = entries_.emplace_back();
  e.value = std::move(value);
  e.is_leaf = true;
  return Node(this, entries_.size() - 1, r, c);
}

Node Tape::record(Matrix value, std::vector<Node> parents, Vjp vjp) {
  bool needs = false;
  for (const Node& p : parents) {
    if (&p.tape() != this) {
      throw std::invalid_argument("operands recorded on different tapes");
    }
    needs = needs || requires_grad(p);
  }
  needs = needs && recording_;
  const Index r = value.rows(), c = value.cols();
  Entry& e = entries_.emplace_back();
  e.value = std::move(value);
  e.requires_grad = needs;
  if (needs) {
    e.parents = std::move(parents);
    e.vjp = std::move(vjp);
  }
  return Node(this, entries_.size() - 1, r, c);
}

namespace {

struct RecordingGuard {
  RecordingGuard(bool& flag, bool value) : flag_(flag), saved_(flag) { flag_ = value; }
  ~RecordingGuard() { flag_ = saved_; }
  bool& flag_;
  bool saved_;
};

}  // namespace

std::vector<Node> Tape::grad(const Node& loss, std::span<const Node> wrt, bool create_graph) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("gradient requires a scalar loss, got " +
                     shape_string(loss.rows(), loss.cols()));
  }
  const std::size_t end = loss.id() + 1;
  // Adjoints only flow from later nodes to earlier ones, so nothing below the
  // oldest requested node can change a requested adjoint.
  std::size_t stop = end;
  for (const Node& w : wrt) stop = std::min(stop, w.id());
  std::vector<Node> adjoint(end);
  {
    RecordingGuard guard(recording_, create_graph);
    adjoint[loss.id()] = constant(Matrix::Ones(1, 1));
    for (std::size_t i = end; i-- > stop;) {
      if (!adjoint[i].valid()) continue;
      const Entry& e = entries_[i];
      if (!e.requires_grad || !e.vjp) continue;
      std::vector<Node> contrib = e.vjp(adjoint[i]);
      for (std::size_t j = 0; j < e.parents.size(); ++j) {
        const Node& parent = e.parents[j];
        if (!requires_grad(parent) || !contrib[j].valid()) continue;
        Node& slot = adjoint[parent.id()];
        slot = slot.valid() ? add(slot, contrib[j]) : contrib[j];
      }
    }
  }

  std::vector<Node> out;
  out.reserve(wrt.size());
  for (const Node& w : wrt) {
    if (w.id() < end && adjoint[w.id()].valid() && requires_grad(w)) {
      out.push_back(adjoint[w.id()]);
    } else {
      out.push_back(constant(Matrix::Zero(w.rows(), w.cols())));
    }
  }
  return out;
}

Matrix Gradients::operator[](const Node& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) return Matrix::Zero(leaf.rows(), leaf.cols());
  return it->second;
}

std::vector<Node> Tape::trainable_leaves() {
  std::vector<Node> out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const Entry& e = entries_[i];
    if (e.is_leaf && e.requires_grad) out.push_back(Node(this, i, e.value.rows(), e.value.cols()));
  }
  return out;
}

Gradients backward(Tape& tape, const Node& loss) {
  const std::vector<Node> leaves = tape.trainable_leaves();
  const std::vector<Node> adj = tape.grad(loss, leaves, false);
  Gradients out;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    out.grads_.emplace(leaves[i].id(), adj[i].value());
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void require(bool ok, const char* op, const Node& a, const Node& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.rows(), a.cols()) +
                     " and " + shape_string(b.rows(), b.cols()));
  }
}

void require(bool ok, const char* op, const Node& a) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": invalid shape " + shape_string(a.rows(), a.cols()));
  }
}

bool wants(const Node& n) { return n.requires_grad(); }

Node ones_like(Tape& t, Index r, Index c) { return t.constant(Matrix::Ones(r, c)); }

Matrix sigmoid_value(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Matrix softmax_value(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    out.row(i) = (z.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

Node matmul(const Node& a, const Node& b) {
  require(a.cols() == b.rows(), "matmul", a, b);
  return a.tape().record(a.value() * b.value(), {a, b}, [a, b](const Node& g) {
    return std::vector<Node>{wants(a) ? matmul(g, transpose(b)) : Node{},
                             wants(b) ? matmul(transpose(a), g) : Node{}};
  });
}

Node add(const Node& a, const Node& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
  return a.tape().record(a.value() + b.value(), {a, b},
                         [](const Node& g) { return std::vector<Node>{g, g}; });
}

Node sub(const Node& a, const Node& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub", a, b);
  return a.tape().record(a.value() - b.value(), {a, b}, [b](const Node& g) {
    return std::vector<Node>{g, wants(b) ? scale(g, -1.0) : Node{}};
  });
}

Node scale(const Node& a, double c) {
  return a.tape().record(c * a.value(), {a},
                         [c](const Node& g) { return std::vector<Node>{scale(g, c)}; });
}

Node transpose(const Node& a) {
  return a.tape().record(a.value().transpose(), {a},
                         [](const Node& g) { return std::vector<Node>{transpose(g)}; });
}

Node hadamard(const Node& a, const Node& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard", a, b);
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Node& g) {
    return std::vector<Node>{wants(a) ? hadamard(g, b) : Node{},
                             wants(b) ? hadamard(g, a) : Node{}};
  });
}

Node relu(const Node& a) {
  return a.tape().record(a.value().cwiseMax(0.0), {a}, [a](const Node& g) {
    Matrix mask = (a.value().array() > 0.0).cast<double>().matrix();
    return std::vector<Node>{hadamard(g, g.tape().constant(std::move(mask)))};
  });
}

Node tanh(const Node& a) {
  return a.tape().record(a.value().array().tanh().matrix(), {a}, [a](const Node& g) {
    Tape& t = g.tape();
    const Node y = tanh(a);
    return std::vector<Node>{hadamard(g, sub(ones_like(t, a.rows(), a.cols()), hadamard(y, y)))};
  });
}

Node sigmoid(const Node& a) {
  return a.tape().record(sigmoid_value(a.value()), {a}, [a](const Node& g) {
    Tape& t = g.tape();
    const Node s = sigmoid(a);
    return std::vector<Node>{hadamard(g, hadamard(s, sub(ones_like(t, a.rows(), a.cols()), s)))};
  });
}

Node softplus(const Node& a) {
  Matrix v = a.value().unaryExpr(
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return a.tape().record(std::move(v), {a}, [a](const Node& g) {
    return std::vector<Node>{hadamard(g, sigmoid(a))};
  });
}

Node mean_rows(const Node& a) {
  require(a.rows() > 0, "mean_rows", a);
  return a.tape().record(a.value().colwise().mean(), {a}, [a](const Node& g) {
    const Index n = a.rows();
    return std::vector<Node>{
        matmul(g.tape().constant(Matrix::Constant(n, 1, 1.0 / static_cast<double>(n))), g)};
  });
}

Node neg_sq_dist(const Node& emb, const Node& protos) {
  require(emb.cols() == protos.cols(), "neg_sq_dist", emb, protos);
  const Matrix& e = emb.value();
  const Matrix& c = protos.value();
  Matrix v(e.rows(), c.rows());
  for (Index i = 0; i < e.rows(); ++i) {
    for (Index j = 0; j < c.rows(); ++j) v(i, j) = -(e.row(i) - c.row(j)).squaredNorm();
  }
  return emb.tape().record(std::move(v), {emb, protos}, [emb, protos](const Node& g) {
    Tape& t = g.tape();
    const Index n = emb.rows(), k = protos.rows(), d = emb.cols();
    Node de, dc;
    if (wants(emb)) {
      const Node row_sums = matmul(g, ones_like(t, k, d));
      de = scale(sub(matmul(g, protos), hadamard(row_sums, emb)), 2.0);
    }
    if (wants(protos)) {
      const Node gt = transpose(g);
      const Node col_sums = matmul(gt, ones_like(t, n, d));
      dc = scale(sub(matmul(gt, emb), hadamard(col_sums, protos)), 2.0);
    }
    return std::vector<Node>{de, dc};
  });
}

Node softmax_rows(const Node& logits) {
  return logits.tape().record(softmax_value(logits.value()), {logits}, [logits](const Node& g) {
    Tape& t = g.tape();
    const Node s = softmax_rows(logits);
    const Node dot = matmul(hadamard(g, s), ones_like(t, logits.cols(), logits.cols()));
    return std::vector<Node>{hadamard(s, sub(g, dot))};
  });
}

Node softmax_cross_entropy(const Node& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_string(logits.rows(), logits.cols()));
  }
  const Index n = logits.rows(), k = logits.cols();
  Matrix onehot = Matrix::Zero(n, k);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(k) + ")");
    }
    onehot(i, y) = 1.0;
  }
  const Matrix& z = logits.value();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double mx = z.row(i).maxCoeff();
    const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    total += lse - z(i, labels[static_cast<std::size_t>(i)]);
  }
  Matrix v(1, 1);
  v(0, 0) = total / static_cast<double>(n);
  return logits.tape().record(
      std::move(v), {logits}, [logits, onehot = std::move(onehot)](const Node& g) {
        Tape& t = g.tape();
        const double inv_n = 1.0 / static_cast<double>(logits.rows());
        const Node diff = scale(sub(softmax_rows(logits), t.constant(onehot)), inv_n);
        return std::vector<Node>{mul_scalar(diff, g)};
      });
}

Node mul_scalar(const Node& a, const Node& s) {
  require(s.rows() == 1 && s.cols() == 1, "mul_scalar", a, s);
  return a.tape().record(a.value() * s.value()(0, 0), {a, s}, [a, s](const Node& g) {
    return std::vector<Node>{wants(a) ? mul_scalar(g, s) : Node{},
                             wants(s) ? sum(hadamard(g, a)) : Node{}};
  });
}

Node sum(const Node& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape().record(std::move(v), {a}, [a](const Node& g) {
    return std::vector<Node>{mul_scalar(ones_like(g.tape(), a.rows(), a.cols()), g)};
  });
}

Node element(const Node& a, Index row, Index col) {
  if (row < 0 || row >= a.rows() || col < 0 || col >= a.cols()) {
    throw std::out_of_range("element(" + std::to_string(row) + ", " + std::to_string(col) +
                            ") outside " + shape_string(a.rows(), a.cols()));
  }
  Matrix v(1, 1);
  v(0, 0) = a.value()(row, col);
  return a.tape().record(std::move(v), {a}, [a, row, col](const Node& g) {
    Matrix unit = Matrix::Zero(a.rows(), a.cols());
    unit(row, col) = 1.0;
    return std::vector<Node>{mul_scalar(g.tape().constant(std::move(unit)), g)};
  });
}

Node diag_embed(const Node& v) {
  require(v.cols() == 1, "diag_embed", v);
  Matrix out = v.value().col(0).asDiagonal();
  return v.tape().record(std::move(out), {v},
                         [](const Node& g) { return std::vector<Node>{diagonal(g)}; });
}

Node diagonal(const Node& a) {
  require(a.rows() == a.cols(), "diagonal", a);
  return a.tape().record(Matrix(a.value().diagonal()), {a},
                         [](const Node& g) { return std::vector<Node>{diag_embed(g)}; });
}

// ---------------------------------------------------------------------------

double grad_check(const ScalarFunction& f, std::span<const Matrix> inputs, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");

  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Node> leaves;
    for (const Matrix& m : inputs) leaves.push_back(tape.leaf(m, true));
    const Node loss = f(tape, leaves);
    const std::vector<Node> g = tape.grad(loss, leaves);
    for (const Node& n : g) analytic.push_back(n.value());
  }

  auto evaluate = [&](const std::vector<Matrix>& point) {
    Tape tape;
    std::vector<Node> leaves;
    for (const Matrix& m : point) leaves.push_back(tape.leaf(m, true));
    return f(tape, leaves).scalar();
  };

  std::vector<Matrix> point(inputs.begin(), inputs.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < point.size(); ++k) {
    for (Index idx = 0; idx < point[k].size(); ++idx) {
      const double saved = point[k](idx);
      point[k](idx) = saved + eps;
      const double up = evaluate(point);
      point[k](idx) = saved - eps;
      const double down = evaluate(point);
      point[k](idx) = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double a = analytic[k](idx);
      worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace tsp
