#pragma once

// Frozen feature extractor, residual adapters, and the nearest-centroid head
// that defines the inner (support) and outer (query) losses.

#include <cstdint>
#include <span>
#include <vector>

#include "tsp/diffcore.hpp"
#include "tsp/episodes.hpp"

namespace tsp {

// x -> tanh(x W1 + b1) W2 + b2, applied row-wise. Never trained.
struct Encoder {
  Matrix w1;  // d_in x hidden
  Matrix b1;  // 1 x hidden
  Matrix w2;  // hidden x m
  Matrix b2;  // 1 x m

  static Encoder random(int d_in, int hidden, int out, std::uint64_t seed);

  int input_dim() const { return static_cast<int>(w1.rows()); }
  int output_dim() const { return static_cast<int>(w2.cols()); }
  Matrix operator()(const Matrix& x) const;
};

// theta^1 (residual adapter) and theta^2 (pre-classifier transform), both m x m.
struct AdapterSet {
  std::vector<Matrix> layers;

  // theta^1 = 0, theta^2 = I: the adapters act as the identity.
  static AdapterSet canonical(int m, int layers = 2);
  std::vector<int> dims() const;
};

// Encoder output for a labeled set; the frozen part is evaluated once.
struct EncodedSet {
  Matrix embeddings;
  std::vector<int> labels;
  int way = 0;
};

EncodedSet encode(const Encoder& enc, const LabeledSet& set);
EncodedSet encode(const Encoder& enc, const LabeledSet& set, int way);

// Value route: rows z = theta^2 (e + theta^1 e).
Matrix embed(const Matrix& encoded, const AdapterSet& adapters);
Matrix embed(const Encoder& enc, const AdapterSet& adapters, const Matrix& x);

// Tape route of the same map; differentiable in the adapters only.
Node embed(const Node& encoded, std::span<const Node> adapters);

// (way x n) matrix averaging the rows of each class.
Matrix class_mean_operator(std::span<const int> labels, int way);

// Class means of `embedded` rows.
Node prototypes(const Node& embedded, std::span<const int> labels, int way);

// Mean cross entropy of softmax(-||z - c||^2) over the rows of `embedded`.
Node ncc_loss(const Node& embedded, std::span<const int> labels, const Node& protos);

// Support loss. With `frozen_protos` the prototypes are held fixed instead of
// being recomputed from the current adapters.
Node inner_loss(const EncodedSet& support, std::span<const Node> adapters,
                const Node* frozen_protos = nullptr);

// Query loss against prototypes computed from the support set.
Node outer_loss(const EncodedSet& support, const EncodedSet& query, std::span<const Node> adapters);

// Fraction of query rows whose nearest prototype carries the true label;
// ties go to the lowest class index.
double accuracy(const EncodedSet& support, const EncodedSet& query, const AdapterSet& adapters);

std::vector<Node> record_adapters(Tape& tape, const AdapterSet& adapters, bool requires_grad);
AdapterSet values_of(std::span<const Node> adapters);

}  // namespace tsp
