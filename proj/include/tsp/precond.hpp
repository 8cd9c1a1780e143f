#pragma once

// Domain-specific preconditioner parameterizations, their convex mixture into
// a task-specific preconditioner, and numerical PD / effective-rank checks.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "tsp/diffcore.hpp"

namespace tsp {

enum class DspDesign {
  GramPlusI,     // P = M^T M + I
  CholLLT,       // P = L L^T, positive diagonal on L
  CholLLTPlusI,  // P = L L^T + I
  RawM,          // P = M, no constraint
};

std::string_view to_string(DspDesign design);
std::optional<DspDesign> parse_design(std::string_view name);
// Comma separated list of accepted design names.
std::string design_names();

// Designs whose materialized matrices are PD by construction.
constexpr bool is_certified(DspDesign d) { return d != DspDesign::RawM; }
constexpr bool is_cholesky(DspDesign d) {
  return d == DspDesign::CholLLT || d == DspDesign::CholLLTPlusI;
}

// Floor added to the softplus-activated Cholesky diagonal.
inline constexpr double kCholDiagFloor = 1e-6;

struct DspParams {
  int domain = 0;
  DspDesign design = DspDesign::GramPlusI;
  // M for GramPlusI / RawM; strictly lower-triangular part of L otherwise.
  std::vector<Matrix> raw;
  // Pre-activation of diag(L). Empty for non-Cholesky designs.
  std::vector<Vector> diag_raw;

  std::size_t layers() const { return raw.size(); }
};

// Initial parameters whose materialized factor is `init_scale * I`: M = s I,
// or L = s I for the Cholesky designs (requires s > kCholDiagFloor there).
DspParams make_dsp(int domain, DspDesign design, std::span<const int> dims, double init_scale);

// Throws ShapeError on ragged or non-square layers.
void validate(const DspParams& params);

// Per-layer square matrices.
struct Preconditioner {
  std::vector<Matrix> layers;

  std::size_t size() const { return layers.size(); }
  static Preconditioner identity(std::span<const int> dims);
};

// Softmax of the logits for K > 1, sigmoid for K = 1.
struct TaskCoefficients {
  Vector logits;
  Vector weights;

  static TaskCoefficients from_logits(const Vector& logits);
  static TaskCoefficients one_hot(int k, int count);
};

struct PdCertificate {
  bool is_pd = false;
  bool symmetric = false;
  bool cholesky_ok = false;
  double min_eigenvalue = 0.0;
  double asymmetry = 0.0;  // max |P - P^T|
};

// Symmetry tolerance used by certify_pd.
inline constexpr double kSymmetryTolerance = 1e-10;

enum class PreconditionSide { Left, Right };

// ---------------------------------------------------------------------------
// Value routes

template <typename Derived>
Matrix gram_plus_identity(const Eigen::MatrixBase<Derived>& m) {
  Matrix p = m.transpose() * m;
  p.diagonal().array() += 1.0;
  return p;
}

// Lower-triangular factor with diagonal softplus(diag_raw) + floor.
Matrix cholesky_factor(const Matrix& strict_lower, const Vector& diag_raw);

Matrix materialize_layer(const DspParams& params, std::size_t layer);
Preconditioner materialize(const DspParams& params);

// Sum_k p_k P_k per layer. Zero weights are skipped so a one-hot mixture
// reproduces its selected preconditioner bitwise.
Preconditioner mix(const TaskCoefficients& coeffs, std::span<const Preconditioner> dsps);

PdCertificate certify_pd(const Matrix& p);
std::vector<PdCertificate> certify_pd(const Preconditioner& p);

// exp of the Shannon entropy of the normalized singular values; 0 for a zero matrix.
// Evaluated as S * exp(-sum(s ln s) / S) with S = sum(s), which is exact for I_n.
template <typename Derived>
double effective_rank(const Eigen::MatrixBase<Derived>& p) {
  const Vector sigma = Eigen::JacobiSVD<Matrix>(p.eval()).singularValues();
  const double total = sigma.sum();
  if (!(total > 0.0)) return 0.0;
  double s_log_s = 0.0;
  for (Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) > 0.0) s_log_s += sigma(i) * std::log(sigma(i));
  }
  return total * std::exp(-s_log_s / total);
}

std::vector<double> effective_rank(const Preconditioner& p);

// P^l * g^l (Left) or g^l * P^l (Right) per layer.
std::vector<Matrix> precondition(const Preconditioner& p, std::span<const Matrix> grads,
                                 PreconditionSide side = PreconditionSide::Left);

// ---------------------------------------------------------------------------
// Tape routes

// Leaves for every learnable tensor of `params`, in the order raw..., diag_raw...
struct DspLeaves {
  std::vector<Node> raw;
  std::vector<Node> diag_raw;
};

DspLeaves record_leaves(Tape& tape, const DspParams& params, bool requires_grad);
std::vector<Node> materialize(const DspLeaves& leaves, DspDesign design);

// Sum_k coeffs[k] * dsps[k][l]; coeffs are 1x1 nodes.
std::vector<Node> mix(std::span<const Node> coeffs, std::span<const std::vector<Node>> dsps);

Node precondition(const Node& p, const Node& grad, PreconditionSide side = PreconditionSide::Left);

// ---------------------------------------------------------------------------

// One JSON-ready row of a certification report.
struct CertificationRecord {
  std::size_t layer = 0;
  DspDesign design = DspDesign::GramPlusI;
  bool is_pd = false;
  double min_eig = 0.0;
  double erank = 0.0;
};

std::vector<CertificationRecord> certification_report(const Preconditioner& p, DspDesign design);

}  // namespace tsp
