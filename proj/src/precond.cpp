#include "tsp/precond.hpp"

#include <array>
#include <cmath>

namespace tsp {

namespace {

constexpr std::array<std::pair<DspDesign, std::string_view>, 4> kDesignNames{{
    {DspDesign::GramPlusI, "gram_plus_i"},
    {DspDesign::CholLLT, "chol_llt"},
    {DspDesign::CholLLTPlusI, "chol_llt_plus_i"},
    {DspDesign::RawM, "raw_m"},
}};

double softplus_inverse(double y) { return y + std::log(-std::expm1(-y)); }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

Matrix strictly_lower_mask(Index m) {
  Matrix mask = Matrix::Zero(m, m);
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < i; ++j) mask(i, j) = 1.0;
  }
  return mask;
}

}  // namespace

std::string_view to_string(DspDesign design) {
  for (const auto& [d, name] : kDesignNames) {
    if (d == design) return name;
  }
  return "unknown";
}

std::optional<DspDesign> parse_design(std::string_view name) {
  for (const auto& [d, n] : kDesignNames) {
    if (n == name) return d;
  }
  return std::nullopt;
}

std::string design_names() {
  std::string out;
  for (const auto& [d, name] : kDesignNames) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

DspParams make_dsp(int domain, DspDesign design, std::span<const int> dims, double init_scale) {
  DspParams p;
  p.domain = domain;
  p.design = design;
  for (int m : dims) {
    if (m <= 0) throw ShapeError("preconditioner layer dimension must be positive");
    if (is_cholesky(design)) {
      if (!(init_scale > kCholDiagFloor)) {
        throw std::invalid_argument("Cholesky designs need an initial diagonal above the floor");
      }
      p.raw.push_back(Matrix::Zero(m, m));
      p.diag_raw.push_back(Vector::Constant(m, softplus_inverse(init_scale - kCholDiagFloor)));
    } else {
      p.raw.push_back(init_scale * Matrix::Identity(m, m));
    }
  }
  return p;
}

void validate(const DspParams& params) {
  for (std::size_t l = 0; l < params.raw.size(); ++l) {
    const Matrix& r = params.raw[l];
    if (r.rows() != r.cols()) {
      throw ShapeError("layer " + std::to_string(l) + " is not square " +
                       shape_string(r.rows(), r.cols()));
    }
    if (is_cholesky(params.design)) {
      if (params.diag_raw.size() != params.raw.size() || params.diag_raw[l].size() != r.rows()) {
        throw ShapeError("layer " + std::to_string(l) + " diagonal does not match its factor");
      }
    }
  }
  if (!is_cholesky(params.design) && !params.diag_raw.empty()) {
    throw ShapeError("diagonal parameters given for a non-Cholesky design");
  }
}

Preconditioner Preconditioner::identity(std::span<const int> dims) {
  Preconditioner p;
  for (int m : dims) p.layers.push_back(Matrix::Identity(m, m));
  return p;
}

TaskCoefficients TaskCoefficients::from_logits(const Vector& logits) {
  TaskCoefficients c;
  c.logits = logits;
  if (logits.size() == 1) {
    const double z = logits(0);
    c.weights = Vector::Constant(1, z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                             : std::exp(z) / (1.0 + std::exp(z)));
  } else {
    const double mx = logits.maxCoeff();
    c.weights = (logits.array() - mx).exp().matrix();
    c.weights /= c.weights.sum();
  }
  return c;
}

TaskCoefficients TaskCoefficients::one_hot(int k, int count) {
  if (k < 0 || k >= count) throw std::out_of_range("one-hot index outside domain range");
  TaskCoefficients c;
  c.logits = Vector::Zero(count);
  c.weights = Vector::Zero(count);
  c.weights(k) = 1.0;
  return c;
}

Matrix cholesky_factor(const Matrix& strict_lower, const Vector& diag_raw) {
  Matrix l = strict_lower.triangularView<Eigen::StrictlyLower>();
  for (Index i = 0; i < l.rows(); ++i) l(i, i) = softplus(diag_raw(i)) + kCholDiagFloor;
  return l;
}

Matrix materialize_layer(const DspParams& params, std::size_t layer) {
  const Matrix& raw = params.raw.at(layer);
  switch (params.design) {
    case DspDesign::GramPlusI:
      return gram_plus_identity(raw);
    case DspDesign::CholLLT:
    case DspDesign::CholLLTPlusI: {
      const Matrix l = cholesky_factor(raw, params.diag_raw.at(layer));
      Matrix p = l * l.transpose();
      if (params.design == DspDesign::CholLLTPlusI) p.diagonal().array() += 1.0;
      return p;
    }
    case DspDesign::RawM:
      return raw;
  }
  return raw;
}

Preconditioner materialize(const DspParams& params) {
  validate(params);
  Preconditioner p;
  for (std::size_t l = 0; l < params.layers(); ++l) p.layers.push_back(materialize_layer(params, l));
  return p;
}

Preconditioner mix(const TaskCoefficients& coeffs, std::span<const Preconditioner> dsps) {
  if (dsps.empty() || static_cast<Index>(dsps.size()) != coeffs.weights.size()) {
    throw ShapeError("mix: " + std::to_string(coeffs.weights.size()) + " coefficients for " +
                     std::to_string(dsps.size()) + " preconditioners");
  }
  Preconditioner out;
  for (std::size_t l = 0; l < dsps[0].size(); ++l) {
    const Matrix& first = dsps[0].layers[l];
    Matrix acc;
    for (std::size_t k = 0; k < dsps.size(); ++k) {
      if (dsps[k].size() != dsps[0].size()) throw ShapeError("mix: layer counts differ");
      const Matrix& pk = dsps[k].layers[l];
      if (pk.rows() != first.rows() || pk.cols() != first.cols()) {
        throw ShapeError("mix: layer " + std::to_string(l) + " shapes differ " +
                         shape_string(first.rows(), first.cols()) + " vs " +
                         shape_string(pk.rows(), pk.cols()));
      }
      const double w = coeffs.weights(static_cast<Index>(k));
      if (w == 0.0) continue;
      if (acc.size() == 0) {
        acc = w == 1.0 ? pk : Matrix(w * pk);
      } else {
        acc += w * pk;
      }
    }
    if (acc.size() == 0) acc = Matrix::Zero(first.rows(), first.cols());
    out.layers.push_back(std::move(acc));
  }
  return out;
}

PdCertificate certify_pd(const Matrix& p) {
  if (p.rows() != p.cols()) throw ShapeError("certify_pd: non-square " + shape_string(p.rows(), p.cols()));
  PdCertificate c;
  c.asymmetry = p.rows() == 0 ? 0.0 : (p - p.transpose()).cwiseAbs().maxCoeff();
  c.symmetric = c.asymmetry < kSymmetryTolerance;
  const Matrix sym = 0.5 * (p + p.transpose());
  Eigen::LLT<Matrix> llt(sym);
  c.cholesky_ok = llt.info() == Eigen::Success;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  c.min_eigenvalue = eig.eigenvalues().minCoeff();
  c.is_pd = c.symmetric && c.cholesky_ok;
  return c;
}

std::vector<PdCertificate> certify_pd(const Preconditioner& p) {
  std::vector<PdCertificate> out;
  out.reserve(p.size());
  for (const Matrix& m : p.layers) out.push_back(certify_pd(m));
  return out;
}

std::vector<double> effective_rank(const Preconditioner& p) {
  std::vector<double> out;
  out.reserve(p.size());
  for (const Matrix& m : p.layers) out.push_back(effective_rank(m));
  return out;
}

std::vector<Matrix> precondition(const Preconditioner& p, std::span<const Matrix> grads,
                                 PreconditionSide side) {
  if (p.size() != grads.size()) {
    throw ShapeError("precondition: " + std::to_string(p.size()) + " layers for " +
                     std::to_string(grads.size()) + " gradients");
  }
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < grads.size(); ++l) {
    const Matrix& pl = p.layers[l];
    const Matrix& g = grads[l];
    const bool ok = side == PreconditionSide::Left ? pl.cols() == g.rows() : g.cols() == pl.rows();
    if (!ok) {
      throw ShapeError("precondition: layer " + std::to_string(l) + " preconditioner " +
                       shape_string(pl.rows(), pl.cols()) + " vs gradient " +
                       shape_string(g.rows(), g.cols()));
    }
    out.push_back(side == PreconditionSide::Left ? Matrix(pl * g) : Matrix(g * pl));
  }
  return out;
}

DspLeaves record_leaves(Tape& tape, const DspParams& params, bool requires_grad) {
  validate(params);
  DspLeaves leaves;
  for (const Matrix& r : params.raw) leaves.raw.push_back(tape.leaf(r, requires_grad));
  for (const Vector& d : params.diag_raw) leaves.diag_raw.push_back(tape.leaf(d, requires_grad));
  return leaves;
}

std::vector<Node> materialize(const DspLeaves& leaves, DspDesign design) {
  std::vector<Node> out;
  for (std::size_t l = 0; l < leaves.raw.size(); ++l) {
    const Node& raw = leaves.raw[l];
    Tape& t = raw.tape();
    const Index m = raw.rows();
    switch (design) {
      case DspDesign::GramPlusI:
        out.push_back(add(matmul(transpose(raw), raw), t.constant(Matrix::Identity(m, m))));
        break;
      case DspDesign::CholLLT:
      case DspDesign::CholLLTPlusI: {
        const Node floor = t.constant(Matrix::Constant(m, 1, kCholDiagFloor));
        const Node diag = diag_embed(add(softplus(leaves.diag_raw.at(l)), floor));
        const Node l_factor = add(hadamard(raw, t.constant(strictly_lower_mask(m))), diag);
        Node p = matmul(l_factor, transpose(l_factor));
        if (design == DspDesign::CholLLTPlusI) p = add(p, t.constant(Matrix::Identity(m, m)));
        out.push_back(p);
        break;
      }
      case DspDesign::RawM:
        out.push_back(raw);
        break;
    }
  }
  return out;
}

std::vector<Node> mix(std::span<const Node> coeffs, std::span<const std::vector<Node>> dsps) {
  if (coeffs.size() != dsps.size() || dsps.empty()) {
    throw ShapeError("mix: " + std::to_string(coeffs.size()) + " coefficients for " +
                     std::to_string(dsps.size()) + " preconditioners");
  }
  std::vector<Node> out;
  for (std::size_t l = 0; l < dsps[0].size(); ++l) {
    Node acc = mul_scalar(dsps[0].at(l), coeffs[0]);
    for (std::size_t k = 1; k < dsps.size(); ++k) acc = add(acc, mul_scalar(dsps[k].at(l), coeffs[k]));
    out.push_back(acc);
  }
  return out;
}

Node precondition(const Node& p, const Node& grad, PreconditionSide side) {
  return side == PreconditionSide::Left ? matmul(p, grad) : matmul(grad, p);
}

std::vector<CertificationRecord> certification_report(const Preconditioner& p, DspDesign design) {
  std::vector<CertificationRecord> out;
  for (std::size_t l = 0; l < p.size(); ++l) {
    const PdCertificate c = certify_pd(p.layers[l]);
    out.push_back({l, design, c.is_pd, c.min_eigenvalue, effective_rank(p.layers[l])});
  }
  return out;
}

}  // namespace tsp
