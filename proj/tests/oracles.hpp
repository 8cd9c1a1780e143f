#pragma once

// Reference implementations written without the tape, for cross-checking.

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Adapters {
  Matrix t1;
  Matrix t2;
};

inline Matrix class_means(const Matrix& z, std::span<const int> labels, int way) {
  Matrix c = Matrix::Zero(way, z.cols());
  Vector count = Vector::Zero(way);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    c.row(labels[i]) += z.row(static_cast<Eigen::Index>(i));
    count(labels[i]) += 1.0;
  }
  for (int j = 0; j < way; ++j) c.row(j) /= count(j);
  return c;
}

// Loss and analytic gradient of the nearest-centroid cross entropy on the
// support set, for z_i = t2 (e_i + t1 e_i) with prototypes recomputed from z.
struct NccGrad {
  double loss = 0.0;
  Matrix g1;
  Matrix g2;
};

inline NccGrad ncc_grad(const Matrix& e, std::span<const int> labels, int way, const Adapters& a) {
  const Eigen::Index n = e.rows();
  const Matrix h = e + e * a.t1.transpose();
  const Matrix z = h * a.t2.transpose();
  const Matrix c = class_means(z, labels, way);

  Matrix logits(n, way);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < way; ++j) logits(i, j) = -(z.row(i) - c.row(j)).squaredNorm();

  NccGrad out;
  Matrix dlogits(n, way);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd ex = (logits.row(i).array() - mx).exp().matrix();
    const double s = ex.sum();
    const int y = labels[static_cast<std::size_t>(i)];
    out.loss += -(logits(i, y) - mx - std::log(s));
    dlogits.row(i) = ex / s;
    dlogits(i, y) -= 1.0;
  }
  out.loss /= static_cast<double>(n);
  dlogits /= static_cast<double>(n);

  // logits = -D, D_ij = |z_i - c_j|^2
  const Matrix s = -dlogits;
  Matrix dz = 2.0 * (s.rowwise().sum().asDiagonal() * z - s * c);
  const Matrix dc = 2.0 * (s.colwise().sum().transpose().asDiagonal() * c - s.transpose() * z);
  // c = A z with A_ji = 1/n_j for labels_i = j
  Matrix avg = Matrix::Zero(way, n);
  Vector count = Vector::Zero(way);
  for (int y : labels) count(y) += 1.0;
  for (Eigen::Index i = 0; i < n; ++i) avg(labels[static_cast<std::size_t>(i)], i) = 1.0 / count(labels[static_cast<std::size_t>(i)]);
  dz += avg.transpose() * dc;

  out.g2 = dz.transpose() * h;
  const Matrix dh = dz * a.t2;
  out.g1 = dh.transpose() * e;
  return out;
}

// Unpreconditioned gradient descent; returns the adapters after every step,
// starting with the initial ones.
inline std::vector<Adapters> plain_gd(const Matrix& e, std::span<const int> labels, int way, Adapters a,
                                      double lr, int steps) {
  std::vector<Adapters> path{a};
  for (int t = 0; t < steps; ++t) {
    const NccGrad g = ncc_grad(e, labels, way, a);
    a.t1 -= lr * g.g1;
    a.t2 -= lr * g.g2;
    path.push_back(a);
  }
  return path;
}

// exp(entropy) of the singular values, read off as the m largest eigenvalues
// of the symmetric embedding [[0, P], [P^T, 0]] (its spectrum is +-sigma).
inline double erank(const Matrix& p) {
  const Eigen::Index m = p.rows();
  Matrix aug = Matrix::Zero(2 * m, 2 * m);
  aug.topRightCorner(m, m) = p;
  aug.bottomLeftCorner(m, m) = p.transpose();
  const Eigen::SelfAdjointEigenSolver<Matrix> es(aug, Eigen::EigenvaluesOnly);
  const Vector sigma = es.eigenvalues().tail(m).cwiseMax(0.0);
  const double total = sigma.sum();
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    const double q = sigma(i) / total;
    if (q > 0.0) h -= q * std::log(q);
  }
  return std::exp(h);
}

// Symmetric (to 1e-10) with every eigenvalue strictly positive.
inline bool is_pd(const Matrix& p) {
  if (p.rows() != p.cols()) return false;
  if ((p - p.transpose()).cwiseAbs().maxCoeff() > 1e-10) return false;
  const Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (p + p.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() > 0.0;
}

inline double min_eig(const Matrix& p) {
  const Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (p + p.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

}  // namespace oracle
