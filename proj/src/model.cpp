#include "tsp/model.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>
#include <string>

namespace tsp {

namespace {

int way_of(std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("empty label set");
  const int mx = *std::max_element(labels.begin(), labels.end());
  if (*std::min_element(labels.begin(), labels.end()) < 0) {
    throw std::invalid_argument("negative class label");
  }
  return mx + 1;
}

void check_adapters(std::span<const Node> adapters, Index m) {
  if (adapters.size() != 2) {
    throw ShapeError("expected 2 adapter layers, got " + std::to_string(adapters.size()));
  }
  for (const Node& a : adapters) {
    if (a.rows() != m || a.cols() != m) {
      throw ShapeError("adapter " + shape_string(a.rows(), a.cols()) + " does not match embedding width " +
                       std::to_string(m));
    }
  }
}

Node embed_set(Tape& tape, const EncodedSet& set, std::span<const Node> adapters) {
  return embed(tape.constant(set.embeddings), adapters);
}

}  // namespace

Encoder Encoder::random(int d_in, int hidden, int out, std::uint64_t seed) {
  if (d_in < 1 || hidden < 1 || out < 1) throw std::invalid_argument("encoder dimensions must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Index r, Index c, double s) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m(i) = s * normal(rng);
    return m;
  };
  Encoder e;
  e.w1 = fill(d_in, hidden, 1.0 / std::sqrt(static_cast<double>(d_in)));
  e.b1 = fill(1, hidden, 0.1);
  e.w2 = fill(hidden, out, 1.0 / std::sqrt(static_cast<double>(hidden)));
  e.b2 = Matrix::Zero(1, out);
  return e;
}

Matrix Encoder::operator()(const Matrix& x) const {
  if (x.cols() != w1.rows()) {
    throw ShapeError("encoder expects " + std::to_string(w1.rows()) + " input features, got " +
                     shape_string(x.rows(), x.cols()));
  }
  const Matrix h = ((x * w1).rowwise() + b1.row(0)).array().tanh().matrix();
  return (h * w2).rowwise() + b2.row(0);
}

AdapterSet AdapterSet::canonical(int m, int layers) {
  AdapterSet a;
  for (int l = 0; l < layers; ++l) {
    a.layers.push_back(l + 1 == layers ? Matrix(Matrix::Identity(m, m)) : Matrix(Matrix::Zero(m, m)));
  }
  return a;
}

std::vector<int> AdapterSet::dims() const {
  std::vector<int> d;
  for (const Matrix& m : layers) d.push_back(static_cast<int>(m.rows()));
  return d;
}

EncodedSet encode(const Encoder& enc, const LabeledSet& set) {
  return encode(enc, set, way_of(set.labels));
}

EncodedSet encode(const Encoder& enc, const LabeledSet& set, int way) {
  if (static_cast<Index>(set.labels.size()) != set.features.rows()) {
    throw ShapeError("label count does not match feature rows");
  }
  return EncodedSet{enc(set.features), set.labels, way};
}

Matrix embed(const Matrix& encoded, const AdapterSet& adapters) {
  if (adapters.layers.size() != 2) throw ShapeError("expected 2 adapter layers");
  const Matrix& t1 = adapters.layers[0];
  const Matrix& t2 = adapters.layers[1];
  if (t1.rows() != encoded.cols() || t2.rows() != encoded.cols()) {
    throw ShapeError("adapter width does not match embedding " + shape_string(encoded.rows(), encoded.cols()));
  }
  const Matrix e = encoded + encoded * t1.transpose();
  return e * t2.transpose();
}

Matrix embed(const Encoder& enc, const AdapterSet& adapters, const Matrix& x) {
  return embed(enc(x), adapters);
}

Node embed(const Node& encoded, std::span<const Node> adapters) {
  check_adapters(adapters, encoded.cols());
  const Node e = add(encoded, matmul(encoded, transpose(adapters[0])));
  return matmul(e, transpose(adapters[1]));
}

Matrix class_mean_operator(std::span<const int> labels, int way) {
  Matrix a = Matrix::Zero(way, static_cast<Index>(labels.size()));
  std::vector<int> counts(static_cast<std::size_t>(way), 0);
  for (int y : labels) {
    if (y < 0 || y >= way) throw std::out_of_range("label outside [0, way)");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    a(y, static_cast<Index>(i)) = 1.0 / counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < way; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw std::invalid_argument("class " + std::to_string(c) + " has no support examples");
    }
  }
  return a;
}

Node prototypes(const Node& embedded, std::span<const int> labels, int way) {
  return matmul(embedded.tape().constant(class_mean_operator(labels, way)), embedded);
}

Node ncc_loss(const Node& embedded, std::span<const int> labels, const Node& protos) {
  return softmax_cross_entropy(neg_sq_dist(embedded, protos), labels);
}

Node inner_loss(const EncodedSet& support, std::span<const Node> adapters, const Node* frozen_protos) {
  if (support.labels.empty()) throw std::invalid_argument("inner_loss: empty support set");
  if (support.way < 2) throw std::invalid_argument("inner_loss: support set needs at least 2 classes");
  Tape& tape = adapters.front().tape();
  const Node z = embed_set(tape, support, adapters);
  const Node c = frozen_protos ? *frozen_protos : prototypes(z, support.labels, support.way);
  return ncc_loss(z, support.labels, c);
}

Node outer_loss(const EncodedSet& support, const EncodedSet& query, std::span<const Node> adapters) {
  if (support.way < 2) throw std::invalid_argument("outer_loss: support set needs at least 2 classes");
  for (int y : query.labels) {
    if (y < 0 || y >= support.way) throw std::invalid_argument("outer_loss: query class absent from support");
  }
  Tape& tape = adapters.front().tape();
  const Node c = prototypes(embed_set(tape, support, adapters), support.labels, support.way);
  return ncc_loss(embed_set(tape, query, adapters), query.labels, c);
}

double accuracy(const EncodedSet& support, const EncodedSet& query, const AdapterSet& adapters) {
  const Matrix protos = class_mean_operator(support.labels, support.way) * embed(support.embeddings, adapters);
  const Matrix zq = embed(query.embeddings, adapters);
  if (zq.rows() == 0) return 0.0;
  int correct = 0;
  for (Index i = 0; i < zq.rows(); ++i) {
    Index best = 0;
    double best_d = (zq.row(i) - protos.row(0)).squaredNorm();
    for (Index c = 1; c < protos.rows(); ++c) {
      const double d = (zq.row(i) - protos.row(c)).squaredNorm();
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == query.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(zq.rows());
}

std::vector<Node> record_adapters(Tape& tape, const AdapterSet& adapters, bool requires_grad) {
  std::vector<Node> out;
  for (const Matrix& m : adapters.layers) out.push_back(tape.leaf(m, requires_grad));
  return out;
}

AdapterSet values_of(std::span<const Node> adapters) {
  AdapterSet a;
  for (const Node& n : adapters) a.layers.push_back(n.value());
  return a;
}

}  // namespace tsp
