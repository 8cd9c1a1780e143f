#pragma once

// Bi-level training of domain-specific preconditioners, the dataset
// classifier that produces task coefficients, and preconditioned meta-test
// adaptation with its evaluation harness.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsp/diffcore.hpp"
#include "tsp/episodes.hpp"
#include "tsp/model.hpp"
#include "tsp/precond.hpp"

namespace tsp {

struct TraceRow {
  int iter = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

// Non-finite loss during adaptation or training.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int step, std::vector<TraceRow> trace = {})
      : std::runtime_error(what), step_(step), trace_(std::move(trace)) {}
  int step() const { return step_; }
  const std::vector<TraceRow>& trace() const { return trace_; }

 private:
  int step_;
  std::vector<TraceRow> trace_;
};

// A preconditioner built from a PD-by-construction design failed certification.
class TheoremViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InnerOptions {
  // One rate per adapter layer, or a single rate shared by all layers.
  std::vector<double> lr{0.1};
  int steps = 5;
  PreconditionSide side = PreconditionSide::Left;
  bool freeze_prototypes = false;

  double lr_for(std::size_t layer) const;
};

// Called with (step, adapters at that step, support loss at that step) for
// step = 0..T; the last call follows the final update.
using AdaptObserver = std::function<void(int, const AdapterSet&, double)>;

// theta_{t+1} = theta_t - lr * P grad L_in(theta_t; S), recomputing the full
// gradient each step. Detached: no tape survives the call.
AdapterSet inner_adapt(const AdapterSet& start, const Preconditioner& p, const EncodedSet& support,
                       const InnerOptions& opts, const AdaptObserver& observer = {});

// Support loss of adapter leaves recorded on a fresh tape.
using InnerLossFn = std::function<Node(std::span<const Node>)>;

// The same update for an arbitrary differentiable loss.
AdapterSet inner_adapt(const AdapterSet& start, const Preconditioner& p, const InnerLossFn& loss,
                       const InnerOptions& opts, const AdaptObserver& observer = {});

// Same update recorded on the tape of `start`, differentiable through every
// step (second order), so the outer loss can be differentiated w.r.t. `p`.
std::vector<Node> inner_adapt(std::span<const Node> start, std::span<const Node> p,
                              const EncodedSet& support, const InnerOptions& opts);

// ---------------------------------------------------------------------------
// Domain-specific preconditioner meta-training

struct MetaState {
  std::vector<DspParams> dsps;  // one per seen domain
  DspDesign design = DspDesign::GramPlusI;
  std::vector<int> dims;
  double alpha_in = 0.1;
  double alpha_out = 0.1;
  int inner_steps = 5;

  static MetaState fresh(int domains, DspDesign design, std::vector<int> dims, double init_scale,
                         double alpha_in = 0.1, double alpha_out = 0.1, int inner_steps = 5);
  int domain_count() const { return static_cast<int>(dsps.size()); }
  std::vector<Preconditioner> materialized() const;
  InnerOptions inner_options() const;
  // Throws std::invalid_argument if an invariant does not hold.
  void validate() const;
};

struct TrainDspOptions {
  int batch = 8;
  int iters = 150;
  std::uint64_t seed = 0;
  bool cosine = false;
  int workers = 1;
  PreconditionSide side = PreconditionSide::Left;
  bool freeze_prototypes = false;
};

struct TrainDspResult {
  MetaState state;
  std::vector<TraceRow> trace;
};

TrainDspResult train_dsp(MetaState state, const Encoder& enc, std::span<const DomainSpec> seen,
                         const EpisodeConfig& cfg, const TrainDspOptions& opts);

// Mean outer loss over `tasks` episodes drawn from `seen` after DSP-only
// inner adaptation.
double mean_outer_loss(const MetaState& state, const Encoder& enc, std::span<const DomainSpec> seen,
                       const EpisodeConfig& cfg, int tasks, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset classifier

// Mean-pooled frozen embeddings -> tanh hidden layer -> K logits (1 when K = 1).
struct ClassifierParams {
  Matrix w1;  // m x hidden
  Matrix b1;  // 1 x hidden
  Matrix w2;  // hidden x K
  Matrix b2;  // 1 x K
  double lambda = 0.1;
  bool aux_only = false;

  static ClassifierParams random(int m, int hidden, int domains, std::uint64_t seed);
  static ClassifierParams zeros(int m, int hidden, int domains);
  int domains() const { return static_cast<int>(w2.cols()); }
  void validate() const;
};

Vector classifier_logits(const ClassifierParams& cls, const EncodedSet& support);
Vector classifier_logits(const ClassifierParams& cls, const Encoder& enc, const LabeledSet& support);

struct ClassifierLeaves {
  Node w1, b1, w2, b2;
  static ClassifierLeaves record(Tape& tape, const ClassifierParams& cls, bool requires_grad);
  std::vector<Node> all() const { return {w1, b1, w2, b2}; }
};

Node classifier_logits(const ClassifierLeaves& cls, const EncodedSet& support);

// Coefficient nodes p_1..p_K (softmax, or sigmoid when K = 1).
std::vector<Node> coefficient_nodes(const Node& logits);

struct ClassifierLoss {
  Node total;
  Node ce;
  Node aux;
};

// L_CE + lambda * L_aux, where L_aux is the query loss after inner adaptation
// under sum_k p_k P_k with the coefficients still on the tape. `dsps` are
// held constant.
ClassifierLoss classifier_loss(const ClassifierLeaves& cls, double lambda, bool aux_only,
                               std::span<const Preconditioner> dsps, const EncodedSet& support,
                               const EncodedSet& query, int domain, const InnerOptions& inner);

double classifier_loss(const ClassifierParams& cls, const MetaState& state, const Encoder& enc,
                       const Episode& episode);

struct TrainClassifierOptions {
  int batch = 8;
  int iters = 150;
  double lr = 0.05;
  std::uint64_t seed = 0;
  int heldout_per_domain = 50;
  int workers = 1;
};

struct TrainClassifierResult {
  ClassifierParams cls;
  std::vector<TraceRow> trace;
  double heldout_accuracy = 0.0;
};

TrainClassifierResult train_classifier(ClassifierParams cls, const MetaState& state, const Encoder& enc,
                                       std::span<const DomainSpec> seen, const EpisodeConfig& cfg,
                                       const TrainClassifierOptions& opts);

// Fraction of episodes whose arg-max logit names the true source domain.
double domain_accuracy(const ClassifierParams& cls, const Encoder& enc, std::span<const DomainSpec> seen,
                       const EpisodeConfig& cfg, int per_domain, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Meta-test

struct TspConfig {
  std::vector<double> beta{0.1, 0.1};  // residual adapter, pre-classifier transform
  int steps = 40;

  void validate() const;
};

struct MetaTestOptions {
  // Ignore the classifier and precondition with I.
  bool baseline_gd = false;
  // Use these coefficients instead of the classifier's.
  std::optional<TaskCoefficients> forced;
  PreconditionSide side = PreconditionSide::Left;
  bool freeze_prototypes = false;
};

struct MetaTestResult {
  double accuracy = 0.0;
  TaskCoefficients coeffs;
  Preconditioner p;
  std::vector<PdCertificate> certificates;
  AdapterSet adapted;
  // Adaptation blew up; accuracy then scores every query as class 0.
  bool diverged = false;
  int diverged_at = -1;
};

// Accuracy of predicting class 0 for every query (all distances NaN tie,
// and ties go to the lowest index).
double diverged_accuracy(const EncodedSet& query);

InnerOptions test_inner_options(const TspConfig& tsp, const MetaTestOptions& opts);

// `dsps` are the materialized preconditioners of `state`. Throws
// TheoremViolation when a certified design yields a non-PD mixture.
MetaTestResult meta_test(const MetaState& state, std::span<const Preconditioner> dsps,
                         const ClassifierParams& cls, const Encoder& enc, const TspConfig& tsp,
                         const Episode& episode, const MetaTestOptions& opts = {});
MetaTestResult meta_test(const MetaState& state, const ClassifierParams& cls, const Encoder& enc,
                         const TspConfig& tsp, const Episode& episode, const MetaTestOptions& opts = {});

struct DomainResult {
  int domain = 0;
  bool seen = true;
  int episodes = 0;
  double acc_mean = 0.0;
  double ci95 = 0.0;
  int diverged = 0;
  std::vector<double> pd_rate;     // per layer, fraction of P_T certified PD
  std::vector<double> mean_erank;  // per layer
};

struct EvalReport {
  std::vector<DomainResult> domains;
  double avg_seen = 0.0;
  double avg_unseen = 0.0;
  double avg_all = 0.0;
  int diverged = 0;
  std::vector<double> pd_rate;     // per layer over all episodes
  std::vector<double> mean_erank;  // per layer over all episodes
};

struct EvalOptions {
  MetaTestOptions test;
  int workers = 1;
};

// 1.96 * sample standard deviation / sqrt(n).
double ci95_half_width(std::span<const double> values);

EvalReport evaluate(const MetaState& state, const ClassifierParams& cls, const Encoder& enc,
                    const TspConfig& tsp, const DomainFamily& family, const EpisodeConfig& cfg,
                    int episodes_per_domain, std::uint64_t seed, const EvalOptions& opts = {});

struct NonPdReport {
  std::vector<double> per_domain;
  double average = 0.0;
};

// Fraction of layers per domain whose materialized DSP fails certify_pd.
NonPdReport non_pd_rate(const MetaState& state);

// Inner loss and query accuracy at steps 0..T averaged over episodes.
struct CurvePoint {
  int step = 0;
  double inner_loss = 0.0;
  double query_acc = 0.0;
};

std::vector<CurvePoint> learning_curve(const MetaState& state, const ClassifierParams& cls,
                                       const Encoder& enc, const TspConfig& tsp, const DomainSpec& domain,
                                       const EpisodeConfig& cfg, int episodes, std::uint64_t seed,
                                       const EvalOptions& opts = {});

// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
// visited exactly once; callers write results into per-index slots.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace tsp
