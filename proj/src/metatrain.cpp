#include "tsp/metatrain.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <numbers>
#include <thread>

namespace tsp {

namespace {

// Seed streams; distinct per use so no two draws share randomness.
enum Stream : std::uint64_t {
  kDspTaskDomain = 11,
  kDspTaskEpisode = 12,
  kHeldoutLoss = 13,
  kClsTaskDomain = 21,
  kClsTaskEpisode = 22,
  kClsHeldout = 23,
  kEvalEpisode = 31,
  kCurveEpisode = 41,
};

void require_finite(double v, const std::string& what, int step) {
  if (!std::isfinite(v)) {
    throw DivergenceError(what + " is not finite at step " + std::to_string(step), step);
  }
}

int pick_domain(std::uint64_t seed, std::uint64_t stream, int it, int b, std::size_t count) {
  std::mt19937_64 rng(mix_seed(seed, stream, static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(b)));
  return std::uniform_int_distribution<int>(0, static_cast<int>(count) - 1)(rng);
}

double learning_rate(double base, bool cosine, int it, int iters) {
  if (!cosine || iters <= 1) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * it / static_cast<double>(iters)));
}

double squared_norm(const std::vector<Matrix>& ms) {
  double s = 0.0;
  for (const Matrix& m : ms) s += m.squaredNorm();
  return s;
}

}  // namespace

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(run);
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------

double InnerOptions::lr_for(std::size_t layer) const {
  if (lr.empty()) throw std::invalid_argument("no inner learning rate given");
  return lr.size() == 1 ? lr[0] : lr.at(layer);
}

AdapterSet inner_adapt(const AdapterSet& start, const Preconditioner& p, const InnerLossFn& loss_fn,
                       const InnerOptions& opts, const AdaptObserver& observer) {
  if (p.size() != start.layers.size()) {
    throw ShapeError("inner_adapt: " + std::to_string(p.size()) + " preconditioner layers for " +
                     std::to_string(start.layers.size()) + " adapters");
  }
  for (std::size_t l = 0; l < p.size(); ++l) {
    const Matrix& pl = p.layers[l];
    const Matrix& th = start.layers[l];
    if (pl.rows() != th.rows() || pl.cols() != th.rows()) {
      throw ShapeError("inner_adapt: layer " + std::to_string(l) + " preconditioner " +
                       shape_string(pl.rows(), pl.cols()) + " vs adapter " + shape_string(th.rows(), th.cols()));
    }
  }

  AdapterSet theta = start;
  for (int t = 0; t <= opts.steps; ++t) {
    const bool last = t == opts.steps;
    if (last && !observer) break;
    Tape tape;
    const std::vector<Node> th = record_adapters(tape, theta, true);
    const Node loss = loss_fn(th);
    require_finite(loss.scalar(), "support loss", t);
    if (observer) observer(t, theta, loss.scalar());
    if (last) break;
    const std::vector<Node> g = tape.grad(loss, th);
    for (std::size_t l = 0; l < theta.layers.size(); ++l) {
      const Matrix& gl = g[l].value();
      const Matrix step = opts.side == PreconditionSide::Left ? Matrix(p.layers[l] * gl) : Matrix(gl * p.layers[l]);
      theta.layers[l] -= opts.lr_for(l) * step;
      if (!theta.layers[l].allFinite()) {
        throw DivergenceError("adapter layer " + std::to_string(l) + " is not finite after step " +
                                  std::to_string(t + 1),
                              t + 1);
      }
    }
  }
  return theta;
}

AdapterSet inner_adapt(const AdapterSet& start, const Preconditioner& p, const EncodedSet& support,
                       const InnerOptions& opts, const AdaptObserver& observer) {
  Matrix frozen;
  if (opts.freeze_prototypes) {
    frozen = class_mean_operator(support.labels, support.way) * embed(support.embeddings, start);
  }
  const InnerLossFn loss = [&](std::span<const Node> th) {
    if (!opts.freeze_prototypes) return inner_loss(support, th);
    const Node fixed = th.front().tape().constant(frozen);
    return inner_loss(support, th, &fixed);
  };
  return inner_adapt(start, p, loss, opts, observer);
}

std::vector<Node> inner_adapt(std::span<const Node> start, std::span<const Node> p,
                              const EncodedSet& support, const InnerOptions& opts) {
  if (p.size() != start.size()) {
    throw ShapeError("inner_adapt: " + std::to_string(p.size()) + " preconditioner layers for " +
                     std::to_string(start.size()) + " adapters");
  }
  for (const Node& s : start) {
    if (!s.requires_grad()) {
      throw std::invalid_argument("inner_adapt on tape needs adapters that require gradients");
    }
  }
  std::vector<Node> theta(start.begin(), start.end());
  Node fixed;
  if (opts.freeze_prototypes) {
    Tape& tape = theta.front().tape();
    fixed = prototypes(embed(tape.constant(support.embeddings), theta), support.labels, support.way);
  }
  for (int t = 0; t < opts.steps; ++t) {
    const Node loss = inner_loss(support, theta, opts.freeze_prototypes ? &fixed : nullptr);
    require_finite(loss.scalar(), "support loss", t);
    const std::vector<Node> g = loss.tape().grad(loss, theta, true);
    for (std::size_t l = 0; l < theta.size(); ++l) {
      theta[l] = sub(theta[l], scale(precondition(p[l], g[l], opts.side), opts.lr_for(l)));
    }
  }
  return theta;
}

// ---------------------------------------------------------------------------

MetaState MetaState::fresh(int domains, DspDesign design, std::vector<int> dims, double init_scale,
                           double alpha_in, double alpha_out, int inner_steps) {
  MetaState s;
  s.design = design;
  s.dims = std::move(dims);
  s.alpha_in = alpha_in;
  s.alpha_out = alpha_out;
  s.inner_steps = inner_steps;
  for (int k = 0; k < domains; ++k) s.dsps.push_back(make_dsp(k, design, s.dims, init_scale));
  s.validate();
  return s;
}

std::vector<Preconditioner> MetaState::materialized() const {
  std::vector<Preconditioner> out;
  for (const DspParams& d : dsps) out.push_back(materialize(d));
  return out;
}

InnerOptions MetaState::inner_options() const {
  InnerOptions o;
  o.lr = {alpha_in};
  o.steps = inner_steps;
  return o;
}

void MetaState::validate() const {
  if (!(alpha_in > 0.0) || !(alpha_out > 0.0)) throw std::invalid_argument("learning rates must be positive");
  if (inner_steps < 1) throw std::invalid_argument("inner steps must be at least 1");
  if (dsps.empty()) throw std::invalid_argument("meta state has no domains");
  for (std::size_t k = 0; k < dsps.size(); ++k) {
    const DspParams& d = dsps[k];
    if (d.design != design) throw std::invalid_argument("DSP design differs from meta state design");
    if (d.domain != static_cast<int>(k)) throw std::invalid_argument("DSP domain indices must be 0..K-1");
    tsp::validate(d);
    if (d.layers() != dims.size()) throw std::invalid_argument("DSP layer count differs from dims");
    for (std::size_t l = 0; l < dims.size(); ++l) {
      if (d.raw[l].rows() != dims[l]) throw std::invalid_argument("DSP layer size differs from dims");
    }
  }
}

namespace {

struct DspTaskGradient {
  int domain = 0;
  double loss = 0.0;
  std::vector<Matrix> raw;
  std::vector<Matrix> diag;
};

DspTaskGradient dsp_task_gradient(const MetaState& state, const Encoder& enc, const DomainSpec& spec,
                                  const EpisodeConfig& cfg, std::uint64_t seed, const InnerOptions& inner) {
  if (spec.id < 0 || spec.id >= state.domain_count()) {
    throw std::invalid_argument("seen domain id " + std::to_string(spec.id) + " has no DSP");
  }
  const Episode e = sample_episode(spec, cfg, seed);
  const EncodedSet s = encode(enc, e.support, e.way);
  const EncodedSet q = encode(enc, e.query, e.way);

  Tape tape;
  const DspLeaves leaves = record_leaves(tape, state.dsps[static_cast<std::size_t>(spec.id)], true);
  const std::vector<Node> p = materialize(leaves, state.design);
  const std::vector<Node> theta0 = record_adapters(tape, AdapterSet::canonical(state.dims.front()), true);
  const std::vector<Node> theta = inner_adapt(theta0, p, s, inner);
  const Node loss = outer_loss(s, q, theta);

  DspTaskGradient out;
  out.domain = spec.id;
  out.loss = loss.scalar();
  require_finite(out.loss, "outer loss", 0);
  std::vector<Node> wrt = leaves.raw;
  wrt.insert(wrt.end(), leaves.diag_raw.begin(), leaves.diag_raw.end());
  const std::vector<Node> g = tape.grad(loss, wrt);
  for (std::size_t i = 0; i < leaves.raw.size(); ++i) out.raw.push_back(g[i].value());
  for (std::size_t i = 0; i < leaves.diag_raw.size(); ++i) out.diag.push_back(g[leaves.raw.size() + i].value());
  return out;
}

}  // namespace

TrainDspResult train_dsp(MetaState state, const Encoder& enc, std::span<const DomainSpec> seen,
                         const EpisodeConfig& cfg, const TrainDspOptions& opts) {
  state.validate();
  cfg.validate();
  if (opts.batch < 1) throw std::invalid_argument("batch must be at least 1");
  if (seen.empty()) throw std::invalid_argument("no seen domains to train on");

  InnerOptions inner = state.inner_options();
  inner.side = opts.side;
  inner.freeze_prototypes = opts.freeze_prototypes;

  TrainDspResult result;
  const auto batch = static_cast<std::size_t>(opts.batch);
  for (int it = 0; it < opts.iters; ++it) {
    std::vector<DspTaskGradient> tasks(batch);
    try {
      parallel_for(batch, opts.workers, [&](std::size_t b) {
        const int di = pick_domain(opts.seed, kDspTaskDomain, it, static_cast<int>(b), seen.size());
        const std::uint64_t es = mix_seed(opts.seed, kDspTaskEpisode, static_cast<std::uint64_t>(it), b);
        tasks[b] = dsp_task_gradient(state, enc, seen[static_cast<std::size_t>(di)], cfg, es, inner);
      });
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("DSP training diverged at iteration ") + std::to_string(it) + ": " +
                                e.what(),
                            it, result.trace);
    }

    // Ordered reduction over the batch.
    const double inv_b = 1.0 / static_cast<double>(batch);
    std::vector<std::vector<Matrix>> g_raw(state.dsps.size());
    std::vector<std::vector<Matrix>> g_diag(state.dsps.size());
    double loss = 0.0;
    for (const DspTaskGradient& t : tasks) {
      loss += t.loss;
      auto& raw = g_raw[static_cast<std::size_t>(t.domain)];
      auto& diag = g_diag[static_cast<std::size_t>(t.domain)];
      if (raw.empty()) {
        for (const Matrix& m : t.raw) raw.push_back(inv_b * m);
        for (const Matrix& m : t.diag) diag.push_back(inv_b * m);
      } else {
        for (std::size_t l = 0; l < raw.size(); ++l) raw[l] += inv_b * t.raw[l];
        for (std::size_t l = 0; l < diag.size(); ++l) diag[l] += inv_b * t.diag[l];
      }
    }
    loss *= inv_b;

    double norm2 = 0.0;
    for (std::size_t k = 0; k < state.dsps.size(); ++k) norm2 += squared_norm(g_raw[k]) + squared_norm(g_diag[k]);
    const double grad_norm = std::sqrt(norm2);
    result.trace.push_back({it, loss, grad_norm});
    if (!std::isfinite(loss) || !std::isfinite(grad_norm)) {
      throw DivergenceError("DSP training diverged at iteration " + std::to_string(it), it, result.trace);
    }

    const double lr = learning_rate(state.alpha_out, opts.cosine, it, opts.iters);
    for (std::size_t k = 0; k < state.dsps.size(); ++k) {
      if (g_raw[k].empty()) continue;  // domain absent from this batch
      DspParams& d = state.dsps[k];
      for (std::size_t l = 0; l < d.raw.size(); ++l) d.raw[l] -= lr * g_raw[k][l];
      for (std::size_t l = 0; l < d.diag_raw.size(); ++l) d.diag_raw[l] -= lr * g_diag[k][l];
    }
  }
  result.state = std::move(state);
  return result;
}

double mean_outer_loss(const MetaState& state, const Encoder& enc, std::span<const DomainSpec> seen,
                       const EpisodeConfig& cfg, int tasks, std::uint64_t seed) {
  const std::vector<Preconditioner> dsps = state.materialized();
  const InnerOptions inner = state.inner_options();
  double total = 0.0;
  for (int i = 0; i < tasks; ++i) {
    const int di = pick_domain(seed, kHeldoutLoss, i, 0, seen.size());
    const DomainSpec& spec = seen[static_cast<std::size_t>(di)];
    const Episode e = sample_episode(spec, cfg, mix_seed(seed, kHeldoutLoss, 1, static_cast<std::uint64_t>(i)));
    const EncodedSet s = encode(enc, e.support, e.way);
    const EncodedSet q = encode(enc, e.query, e.way);
    const AdapterSet adapted = inner_adapt(AdapterSet::canonical(state.dims.front()),
                                           dsps[static_cast<std::size_t>(spec.id)], s, inner);
    Tape tape;
    total += outer_loss(s, q, record_adapters(tape, adapted, false)).scalar();
  }
  return total / static_cast<double>(tasks);
}

// ---------------------------------------------------------------------------

ClassifierParams ClassifierParams::random(int m, int hidden, int domains, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Index r, Index c, double s) {
    Matrix out(r, c);
    for (Index i = 0; i < out.size(); ++i) out(i) = s * normal(rng);
    return out;
  };
  ClassifierParams c;
  c.w1 = fill(m, hidden, 1.0 / std::sqrt(static_cast<double>(m)));
  c.b1 = Matrix::Zero(1, hidden);
  c.w2 = fill(hidden, domains, 0.1 / std::sqrt(static_cast<double>(hidden)));
  c.b2 = Matrix::Zero(1, domains);
  return c;
}

ClassifierParams ClassifierParams::zeros(int m, int hidden, int domains) {
  ClassifierParams c;
  c.w1 = Matrix::Zero(m, hidden);
  c.b1 = Matrix::Zero(1, hidden);
  c.w2 = Matrix::Zero(hidden, domains);
  c.b2 = Matrix::Zero(1, domains);
  return c;
}

void ClassifierParams::validate() const {
  if (w1.cols() != b1.cols() || b1.rows() != 1 || w2.rows() != w1.cols() || w2.cols() != b2.cols() ||
      b2.rows() != 1 || w2.cols() < 1) {
    throw ShapeError("classifier parameter shapes are inconsistent");
  }
  if (!(lambda >= 0.0)) throw std::invalid_argument("classifier lambda must be non-negative");
}

Vector classifier_logits(const ClassifierParams& cls, const EncodedSet& support) {
  if (support.embeddings.rows() == 0) throw std::invalid_argument("classifier_logits: empty support set");
  const Matrix pooled = support.embeddings.colwise().mean();
  const Matrix h = (pooled * cls.w1 + cls.b1).array().tanh().matrix();
  const Matrix z = h * cls.w2 + cls.b2;
  return z.row(0).transpose();
}

Vector classifier_logits(const ClassifierParams& cls, const Encoder& enc, const LabeledSet& support) {
  if (support.features.rows() == 0) throw std::invalid_argument("classifier_logits: empty support set");
  EncodedSet s;
  s.embeddings = enc(support.features);
  return classifier_logits(cls, s);
}

ClassifierLeaves ClassifierLeaves::record(Tape& tape, const ClassifierParams& cls, bool requires_grad) {
  return {tape.leaf(cls.w1, requires_grad), tape.leaf(cls.b1, requires_grad), tape.leaf(cls.w2, requires_grad),
          tape.leaf(cls.b2, requires_grad)};
}

Node classifier_logits(const ClassifierLeaves& cls, const EncodedSet& support) {
  Tape& tape = cls.w1.tape();
  const Node pooled = mean_rows(tape.constant(support.embeddings));
  const Node h = tanh(add(matmul(pooled, cls.w1), cls.b1));
  return add(matmul(h, cls.w2), cls.b2);
}

std::vector<Node> coefficient_nodes(const Node& logits) {
  if (logits.cols() == 1) return {sigmoid(logits)};
  const Node s = softmax_rows(logits);
  std::vector<Node> out;
  for (Index k = 0; k < logits.cols(); ++k) out.push_back(element(s, 0, k));
  return out;
}

ClassifierLoss classifier_loss(const ClassifierLeaves& cls, double lambda, bool aux_only,
                               std::span<const Preconditioner> dsps, const EncodedSet& support,
                               const EncodedSet& query, int domain, const InnerOptions& inner) {
  Tape& tape = cls.w1.tape();
  const Node z = classifier_logits(cls, support);
  const Index k_count = z.cols();
  if (domain < 0 || domain >= std::max<Index>(k_count, 1)) {
    throw std::invalid_argument("classifier_loss: domain label outside classifier range");
  }
  if (static_cast<Index>(dsps.size()) != k_count) {
    throw ShapeError("classifier_loss: " + std::to_string(dsps.size()) + " DSPs for " +
                     std::to_string(k_count) + " logits");
  }

  ClassifierLoss out;
  // -log sigmoid(z) = softplus(-z) in the single-domain case.
  const int label[1] = {domain};
  out.ce = k_count == 1 ? softplus(scale(z, -1.0)) : softmax_cross_entropy(z, label);

  if (aux_only || lambda != 0.0) {
    const std::vector<Node> p = coefficient_nodes(z);
    std::vector<std::vector<Node>> dsp_nodes;
    for (const Preconditioner& pk : dsps) {
      std::vector<Node> layers;
      for (const Matrix& m : pk.layers) layers.push_back(tape.constant(m));
      dsp_nodes.push_back(std::move(layers));
    }
    const std::vector<Node> p_task = mix(p, dsp_nodes);
    std::vector<int> dims;
    for (const Matrix& m : dsps.front().layers) dims.push_back(static_cast<int>(m.rows()));
    const std::vector<Node> theta0 = record_adapters(tape, AdapterSet::canonical(dims.front()), true);
    const std::vector<Node> theta = inner_adapt(theta0, p_task, support, inner);
    out.aux = outer_loss(support, query, theta);
  }

  if (aux_only) {
    out.total = out.aux;
  } else if (lambda == 0.0) {
    out.total = out.ce;
  } else {
    out.total = add(out.ce, scale(out.aux, lambda));
  }
  return out;
}

double classifier_loss(const ClassifierParams& cls, const MetaState& state, const Encoder& enc,
                       const Episode& episode) {
  if (!episode.domain) throw std::invalid_argument("classifier_loss needs a domain-labelled episode");
  const EncodedSet s = encode(enc, episode.support, episode.way);
  const EncodedSet q = encode(enc, episode.query, episode.way);
  const std::vector<Preconditioner> dsps = state.materialized();
  Tape tape;
  const ClassifierLeaves leaves = ClassifierLeaves::record(tape, cls, false);
  return classifier_loss(leaves, cls.lambda, cls.aux_only, dsps, s, q, *episode.domain, state.inner_options())
      .total.scalar();
}

double domain_accuracy(const ClassifierParams& cls, const Encoder& enc, std::span<const DomainSpec> seen,
                       const EpisodeConfig& cfg, int per_domain, std::uint64_t seed) {
  int correct = 0, total = 0;
  for (const DomainSpec& d : seen) {
    for (int i = 0; i < per_domain; ++i) {
      const Episode e = sample_episode(d, cfg, mix_seed(seed, kClsHeldout, static_cast<std::uint64_t>(d.id),
                                                        static_cast<std::uint64_t>(i)));
      const Vector z = classifier_logits(cls, enc, e.support);
      Index best = 0;
      for (Index k = 1; k < z.size(); ++k) {
        if (z(k) > z(best)) best = k;
      }
      correct += z.size() == 1 || best == d.id;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

TrainClassifierResult train_classifier(ClassifierParams cls, const MetaState& state, const Encoder& enc,
                                       std::span<const DomainSpec> seen, const EpisodeConfig& cfg,
                                       const TrainClassifierOptions& opts) {
  cls.validate();
  state.validate();
  cfg.validate();
  if (cls.domains() != state.domain_count()) {
    throw ShapeError("classifier output count differs from the number of DSP domains");
  }
  const std::vector<Preconditioner> dsps = state.materialized();
  const InnerOptions inner = state.inner_options();
  const auto batch = static_cast<std::size_t>(opts.batch);

  struct TaskGrad {
    double loss = 0.0;
    std::vector<Matrix> g;
  };

  TrainClassifierResult result;
  for (int it = 0; it < opts.iters; ++it) {
    std::vector<TaskGrad> tasks(batch);
    try {
      parallel_for(batch, opts.workers, [&](std::size_t b) {
        const int di = pick_domain(opts.seed, kClsTaskDomain, it, static_cast<int>(b), seen.size());
        const DomainSpec& spec = seen[static_cast<std::size_t>(di)];
        const Episode e =
            sample_episode(spec, cfg, mix_seed(opts.seed, kClsTaskEpisode, static_cast<std::uint64_t>(it), b));
        const EncodedSet s = encode(enc, e.support, e.way);
        const EncodedSet q = encode(enc, e.query, e.way);
        Tape tape;
        const ClassifierLeaves leaves = ClassifierLeaves::record(tape, cls, true);
        const ClassifierLoss loss = classifier_loss(leaves, cls.lambda, cls.aux_only, dsps, s, q, spec.id, inner);
        require_finite(loss.total.scalar(), "classifier loss", it);
        const std::vector<Node> wrt = leaves.all();
        const std::vector<Node> g = tape.grad(loss.total, wrt);
        tasks[b].loss = loss.total.scalar();
        for (const Node& n : g) tasks[b].g.push_back(n.value());
      });
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("classifier training diverged at iteration ") + std::to_string(it) +
                                ": " + e.what(),
                            it, result.trace);
    }

    // Batch loss is the sum over tasks.
    std::vector<Matrix> g = tasks.front().g;
    double loss = tasks.front().loss;
    for (std::size_t b = 1; b < batch; ++b) {
      loss += tasks[b].loss;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += tasks[b].g[i];
    }
    const double grad_norm = std::sqrt(squared_norm(g));
    result.trace.push_back({it, loss, grad_norm});
    if (!std::isfinite(loss) || !std::isfinite(grad_norm)) {
      throw DivergenceError("classifier training diverged at iteration " + std::to_string(it), it, result.trace);
    }
    cls.w1 -= opts.lr * g[0];
    cls.b1 -= opts.lr * g[1];
    cls.w2 -= opts.lr * g[2];
    cls.b2 -= opts.lr * g[3];
  }
  result.heldout_accuracy = domain_accuracy(cls, enc, seen, cfg, opts.heldout_per_domain, opts.seed);
  result.cls = std::move(cls);
  return result;
}

// ---------------------------------------------------------------------------

void TspConfig::validate() const {
  if (beta.empty()) throw std::invalid_argument("test learning rate missing");
  for (double b : beta) {
    if (!(b > 0.0)) throw std::invalid_argument("test learning rates must be positive");
  }
  if (steps < 1) throw std::invalid_argument("test inner steps must be at least 1");
}

InnerOptions test_inner_options(const TspConfig& tsp, const MetaTestOptions& opts) {
  InnerOptions o;
  o.lr = tsp.beta;
  o.steps = tsp.steps;
  o.side = opts.side;
  o.freeze_prototypes = opts.freeze_prototypes;
  return o;
}

MetaTestResult meta_test(const MetaState& state, std::span<const Preconditioner> dsps,
                         const ClassifierParams& cls, const Encoder& enc, const TspConfig& tsp,
                         const Episode& episode, const MetaTestOptions& opts) {
  const EncodedSet s = encode(enc, episode.support, episode.way);
  const EncodedSet q = encode(enc, episode.query, episode.way);

  MetaTestResult r;
  if (opts.baseline_gd) {
    r.p = Preconditioner::identity(state.dims);
  } else {
    r.coeffs = opts.forced ? *opts.forced : TaskCoefficients::from_logits(classifier_logits(cls, s));
    r.p = mix(r.coeffs, dsps);
  }
  r.certificates = certify_pd(r.p);
  if (!opts.baseline_gd && is_certified(state.design)) {
    for (std::size_t l = 0; l < r.certificates.size(); ++l) {
      if (!r.certificates[l].is_pd) {
        throw TheoremViolation("task-specific preconditioner layer " + std::to_string(l) + " under design " +
                               std::string(to_string(state.design)) + " is not positive definite (min eig " +
                               std::to_string(r.certificates[l].min_eigenvalue) + ")");
      }
    }
  }
  try {
    r.adapted = inner_adapt(AdapterSet::canonical(state.dims.front()), r.p, s, test_inner_options(tsp, opts));
    r.accuracy = accuracy(s, q, r.adapted);
  } catch (const DivergenceError& e) {
    r.diverged = true;
    r.diverged_at = e.step();
    r.adapted = AdapterSet::canonical(state.dims.front());
    r.accuracy = diverged_accuracy(q);
  }
  return r;
}

MetaTestResult meta_test(const MetaState& state, const ClassifierParams& cls, const Encoder& enc,
                         const TspConfig& tsp, const Episode& episode, const MetaTestOptions& opts) {
  const std::vector<Preconditioner> dsps = state.materialized();
  return meta_test(state, dsps, cls, enc, tsp, episode, opts);
}

double diverged_accuracy(const EncodedSet& query) {
  if (query.labels.empty()) return 0.0;
  const auto hits = std::count(query.labels.begin(), query.labels.end(), 0);
  return static_cast<double>(hits) / static_cast<double>(query.labels.size());
}

double ci95_half_width(std::span<const double> values) {
  const auto n = static_cast<double>(values.size());
  if (values.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

EvalReport evaluate(const MetaState& state, const ClassifierParams& cls, const Encoder& enc,
                    const TspConfig& tsp, const DomainFamily& family, const EpisodeConfig& cfg,
                    int episodes_per_domain, std::uint64_t seed, const EvalOptions& opts) {
  if (episodes_per_domain < 2) throw std::invalid_argument("evaluate needs at least 2 episodes per domain");
  tsp.validate();
  const std::vector<Preconditioner> dsps = state.materialized();
  const std::size_t layers = state.dims.size();
  const auto per = static_cast<std::size_t>(episodes_per_domain);
  const std::size_t total = family.domains.size() * per;

  struct Outcome {
    double acc = 0.0;
    bool diverged = false;
    std::vector<bool> pd;
    std::vector<double> erank;
  };
  std::vector<Outcome> outcomes(total);
  parallel_for(total, opts.workers, [&](std::size_t i) {
    const DomainSpec& d = family.domains[i / per];
    const std::uint64_t es = mix_seed(seed, kEvalEpisode, static_cast<std::uint64_t>(d.id), i % per);
    const Episode e = strip_domain_label(sample_episode(d, cfg, es));
    const MetaTestResult r = meta_test(state, dsps, cls, enc, tsp, e, opts.test);
    Outcome& o = outcomes[i];
    o.acc = r.accuracy;
    o.diverged = r.diverged;
    for (std::size_t l = 0; l < layers; ++l) {
      o.pd.push_back(r.certificates[l].is_pd);
      o.erank.push_back(effective_rank(r.p.layers[l]));
    }
  });

  EvalReport report;
  report.pd_rate.assign(layers, 0.0);
  report.mean_erank.assign(layers, 0.0);
  double seen_sum = 0.0, unseen_sum = 0.0;
  int seen_n = 0, unseen_n = 0;
  for (std::size_t di = 0; di < family.domains.size(); ++di) {
    const DomainSpec& d = family.domains[di];
    DomainResult dr;
    dr.domain = d.id;
    dr.seen = d.seen;
    dr.episodes = episodes_per_domain;
    dr.pd_rate.assign(layers, 0.0);
    dr.mean_erank.assign(layers, 0.0);
    std::vector<double> accs;
    for (std::size_t e = 0; e < per; ++e) {
      const Outcome& o = outcomes[di * per + e];
      accs.push_back(o.acc);
      dr.diverged += o.diverged ? 1 : 0;
      for (std::size_t l = 0; l < layers; ++l) {
        dr.pd_rate[l] += o.pd[l] ? 1.0 : 0.0;
        dr.mean_erank[l] += o.erank[l];
      }
    }
    double sum = 0.0;
    for (double a : accs) sum += a;
    dr.acc_mean = sum / static_cast<double>(per);
    dr.ci95 = ci95_half_width(accs);
    for (std::size_t l = 0; l < layers; ++l) {
      report.pd_rate[l] += dr.pd_rate[l];
      report.mean_erank[l] += dr.mean_erank[l];
      dr.pd_rate[l] /= static_cast<double>(per);
      dr.mean_erank[l] /= static_cast<double>(per);
    }
    report.diverged += dr.diverged;
    (d.seen ? seen_sum : unseen_sum) += dr.acc_mean;
    (d.seen ? seen_n : unseen_n) += 1;
    report.domains.push_back(std::move(dr));
  }
  for (std::size_t l = 0; l < layers; ++l) {
    report.pd_rate[l] /= static_cast<double>(total);
    report.mean_erank[l] /= static_cast<double>(total);
  }
  report.avg_seen = seen_n ? seen_sum / seen_n : 0.0;
  report.avg_unseen = unseen_n ? unseen_sum / unseen_n : 0.0;
  report.avg_all = (seen_n + unseen_n) ? (seen_sum + unseen_sum) / (seen_n + unseen_n) : 0.0;
  return report;
}

NonPdReport non_pd_rate(const MetaState& state) {
  NonPdReport r;
  for (const DspParams& d : state.dsps) {
    int failing = 0;
    for (std::size_t l = 0; l < d.layers(); ++l) failing += !certify_pd(materialize_layer(d, l)).is_pd;
    r.per_domain.push_back(static_cast<double>(failing) / static_cast<double>(d.layers()));
  }
  for (double v : r.per_domain) r.average += v;
  if (!r.per_domain.empty()) r.average /= static_cast<double>(r.per_domain.size());
  return r;
}

std::vector<CurvePoint> learning_curve(const MetaState& state, const ClassifierParams& cls,
                                       const Encoder& enc, const TspConfig& tsp, const DomainSpec& domain,
                                       const EpisodeConfig& cfg, int episodes, std::uint64_t seed,
                                       const EvalOptions& opts) {
  tsp.validate();
  const std::vector<Preconditioner> dsps = state.materialized();
  const auto n = static_cast<std::size_t>(episodes);
  const auto steps = static_cast<std::size_t>(tsp.steps);
  std::vector<std::vector<CurvePoint>> per(n, std::vector<CurvePoint>(steps + 1));

  parallel_for(n, opts.workers, [&](std::size_t i) {
    const std::uint64_t es = mix_seed(seed, kCurveEpisode, static_cast<std::uint64_t>(domain.id), i);
    const Episode e = strip_domain_label(sample_episode(domain, cfg, es));
    const EncodedSet s = encode(enc, e.support, e.way);
    const EncodedSet q = encode(enc, e.query, e.way);
    Preconditioner p;
    if (opts.test.baseline_gd) {
      p = Preconditioner::identity(state.dims);
    } else {
      const TaskCoefficients c =
          opts.test.forced ? *opts.test.forced : TaskCoefficients::from_logits(classifier_logits(cls, s));
      p = mix(c, dsps);
    }
    std::size_t reached = 0;
    try {
      inner_adapt(AdapterSet::canonical(state.dims.front()), p, s, test_inner_options(tsp, opts.test),
                  [&](int t, const AdapterSet& a, double loss) {
                    per[i][static_cast<std::size_t>(t)] = {t, loss, accuracy(s, q, a)};
                    reached = static_cast<std::size_t>(t) + 1;
                  });
    } catch (const DivergenceError&) {
      // Steps past the blow-up keep an infinite loss and the lowest-index prediction.
      for (std::size_t t = reached; t <= steps; ++t) {
        per[i][t] = {static_cast<int>(t), std::numeric_limits<double>::infinity(), diverged_accuracy(q)};
      }
    }
  });

  std::vector<CurvePoint> out(steps + 1);
  for (std::size_t t = 0; t <= steps; ++t) {
    out[t].step = static_cast<int>(t);
    for (std::size_t i = 0; i < n; ++i) {
      out[t].inner_loss += per[i][t].inner_loss;
      out[t].query_acc += per[i][t].query_acc;
    }
    out[t].inner_loss /= static_cast<double>(n);
    out[t].query_acc /= static_cast<double>(n);
  }
  return out;
}

}  // namespace tsp
