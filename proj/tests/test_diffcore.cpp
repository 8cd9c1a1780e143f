#include <cmath>
#include <limits>
#include <vector>

#include <doctest.h>

#include "tsp/diffcore.hpp"
#include "tsp/episodes.hpp"
#include "tsp/metatrain.hpp"
#include "tsp/model.hpp"
#include "tsp/precond.hpp"

using namespace tsp;

TEST_CASE("leaf holds its value") {
  Tape tape;
  const Node i2 = tape.leaf(Matrix::Identity(2, 2), true);
  CHECK(i2.value() == Matrix::Identity(2, 2));
  CHECK(i2.requires_grad());

  const Node z = tape.leaf(Matrix::Zero(1, 1), false);
  CHECK(z.scalar() == 0.0);
  CHECK_FALSE(z.requires_grad());
}

TEST_CASE("leaf rejects non-finite values") {
  Tape tape;
  Matrix bad = Matrix::Zero(2, 2);
  bad(1, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(tape.leaf(bad, true), NonFiniteError);
  bad(1, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(tape.leaf(bad, false), NonFiniteError);
}

TEST_CASE("forward values") {
  Tape tape;
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  const Node na = tape.leaf(a, false);
  const Node ni = tape.leaf(Matrix::Identity(2, 2), false);
  CHECK(matmul(na, ni).value() == a);
  CHECK(transpose(na).value() == a.transpose());
  CHECK(add(na, ni).value() == a + Matrix::Identity(2, 2));
  CHECK(sub(na, na).value() == Matrix::Zero(2, 2));
  CHECK(scale(na, 3.0).value() == 3.0 * a);
  CHECK(hadamard(na, na).value() == a.cwiseProduct(a));
  CHECK(mean_rows(na).value() == (Matrix(1, 2) << 2, 3).finished());

  Matrix signs(1, 3);
  signs << -1, 0, 2;
  CHECK(relu(tape.leaf(signs, false)).value() == (Matrix(1, 3) << 0, 0, 2).finished());
  CHECK(tanh(tape.leaf(signs, false)).value().isApprox(signs.array().tanh().matrix()));

  const Node logits = tape.leaf(Matrix::Zero(1, 3), false);
  const std::vector<int> label{0};
  CHECK(softmax_cross_entropy(logits, label).scalar() == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  Matrix protos(2, 2);
  protos << 1, 0, 0, 2;
  const Node d = neg_sq_dist(tape.leaf(Matrix::Zero(1, 2), false), tape.leaf(protos, false));
  CHECK(d.value() == (Matrix(1, 2) << -1, -4).finished());
}

TEST_CASE("shape mismatch names both shapes") {
  Tape tape;
  const Node a = tape.leaf(Matrix::Zero(2, 3), false);
  const Node b = tape.leaf(Matrix::Zero(2, 3), false);
  try {
    (void)matmul(a, b);
    FAIL("no error");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("2x3") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.leaf(Matrix::Zero(3, 2), false)), ShapeError);
  const std::vector<int> label{5};
  CHECK_THROWS(softmax_cross_entropy(a, label));
}

TEST_CASE("backward of x^T x is 2x") {
  Tape tape;
  const Node x = tape.leaf((Matrix(3, 1) << 1, 2, 3).finished(), true);
  const Node loss = matmul(transpose(x), x);
  const Gradients g = backward(tape, loss);
  CHECK(g[x] == (Matrix(3, 1) << 2, 4, 6).finished());
}

TEST_CASE("backward of trace(A I) is I") {
  Tape tape;
  const Node a = tape.leaf((Matrix(2, 2) << 1, 2, 3, 4).finished(), true);
  const Node prod = matmul(a, tape.constant(Matrix::Identity(2, 2)));
  const Node tr = sum(diagonal(prod));
  CHECK(tr.scalar() == 5.0);
  CHECK(backward(tape, tr)[a] == Matrix::Identity(2, 2));
}

TEST_CASE("unreachable leaf gets a zero gradient") {
  Tape tape;
  const Node x = tape.leaf(Matrix::Ones(2, 1), true);
  const Node y = tape.leaf(Matrix::Ones(3, 2), true);
  const Gradients g = backward(tape, sum(x));
  CHECK(g[y] == Matrix::Zero(3, 2));
  CHECK(g[x] == Matrix::Ones(2, 1));
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  const Node x = tape.leaf(Matrix::Ones(2, 1), true);
  CHECK_THROWS(backward(tape, x));
}

TEST_CASE("second-order gradient through create_graph") {
  // d/dx of (d/dx x^3) = 6x
  Tape tape;
  const Node x = tape.leaf(Matrix::Constant(1, 1, 2.0), true);
  const Node cube = hadamard(hadamard(x, x), x);
  const Node first = tape.grad(cube, std::vector<Node>{x}, true)[0];
  CHECK(first.scalar() == doctest::Approx(12.0));
  const Node second = tape.grad(first, std::vector<Node>{x})[0];
  CHECK(second.scalar() == doctest::Approx(12.0));
}

TEST_CASE("grad_check on squared norm") {
  const std::vector<Matrix> in{(Matrix(3, 2) << 1, -2, 0.5, 3, -1, 0.25).finished()};
  const double err = grad_check([](Tape&, std::span<const Node> x) { return sum(hadamard(x[0], x[0])); }, in, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check of a constant is zero") {
  const std::vector<Matrix> in{Matrix::Ones(2, 2)};
  const double err = grad_check(
      [](Tape& t, std::span<const Node>) { return t.constant(Matrix::Constant(1, 1, 7.0)); }, in, 1e-5);
  CHECK(err == 0.0);
}

TEST_CASE("grad_check of the query loss after five preconditioned steps") {
  const DomainFamily fam = make_domains(1, 0, 8, 3);
  const Encoder enc = Encoder::random(8, 16, 4, 11);
  const Episode ep = sample_episode(fam.domains[0], EpisodeConfig::fixed(2, 3, 3), 5);
  const EncodedSet s = encode(enc, ep.support, ep.way);
  const EncodedSet q = encode(enc, ep.query, ep.way);
  InnerOptions opts;
  opts.steps = 5;
  opts.lr = {0.1, 0.1};

  std::vector<Matrix> m;
  for (int l = 0; l < 2; ++l) m.push_back(0.1 * Matrix::Identity(4, 4) + 0.05 * Matrix::Ones(4, 4));
  const double err = grad_check(
      [&](Tape& t, std::span<const Node> raw) {
        std::vector<Node> p;
        for (const Node& r : raw) p.push_back(add(matmul(transpose(r), r), t.constant(Matrix::Identity(4, 4))));
        const auto theta = record_adapters(t, AdapterSet::canonical(4), true);
        return outer_loss(s, q, inner_adapt(theta, p, s, opts));
      },
      m, 1e-5);
  CHECK(err < 1e-4);
}
