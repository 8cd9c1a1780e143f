#include "tsp/commands.hpp"

#include <charconv>
#include <chrono>
#include <functional>
#include <ostream>

namespace tsp {

namespace {

// Seed streams, one per consumer of randomness.
enum : std::uint64_t {
  kEncoderSeed = 0xe1,
  kDspSeed = 0xd5,
  kClassifierInit = 0xc1,
  kClassifierSeed = 0xc2,
  kEvalSeed = 0xe5,
  kProbeSeed = 0xb0,
  kDiagnoseSeed = 0xd9,
  kCompareSeed = 0xcf,
};

constexpr const char* kDspFile = "dsp.json";
constexpr const char* kDomainsFile = "domains.json";
constexpr const char* kClassifierFile = "classifier.json";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Wall-clock lives next to the reports, never inside them.
void write_timing(const std::filesystem::path& dir, const std::string& command, double seconds) {
  write_json(dir / ("timing_" + command + ".json"), Json{{"command", command}, {"seconds", seconds}});
}

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "bad input file: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << " (step " << e.step() << ")\n";
    return kExitDivergence;
  } catch (const TheoremViolation& e) {
    err << "PD certification failed: " << e.what() << '\n';
    return kExitTheorem;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

template <typename T>
T load_checked(const std::filesystem::path& path, T (*parse)(const Json&), const char* what) {
  if (!std::filesystem::exists(path)) throw ConfigError(0, std::string(what) + " checkpoint not found: " + path.string());
  return parse(read_json(path));
}

void check_state(const MetaState& s, const RunConfig& cfg) {
  if (s.domain_count() != cfg.k_seen) {
    throw ConfigError(0, "DSP checkpoint holds " + std::to_string(s.domain_count()) + " domains but k_seen = " +
                             std::to_string(cfg.k_seen));
  }
  if (s.dims != cfg.adapter_dims()) throw ConfigError(0, "DSP checkpoint layer sizes do not match embed_dim");
}

void check_classifier(const ClassifierParams& c, const RunConfig& cfg) {
  const int expected = cfg.k_seen;
  if (c.domains() != expected) {
    throw ConfigError(0, "classifier checkpoint has " + std::to_string(c.domains()) + " outputs but k_seen = " +
                             std::to_string(cfg.k_seen));
  }
  if (c.w1.rows() != cfg.embed_dim) throw ConfigError(0, "classifier checkpoint input width does not match embed_dim");
}

// Pipeline for verbs that continue from a DSP checkpoint: the domain family
// saved next to it is reused.
Pipeline pipeline_near(const RunConfig& cfg, const std::filesystem::path& dsp_path, int workers) {
  const auto domains = dsp_path.parent_path() / kDomainsFile;
  if (!std::filesystem::exists(domains)) {
    throw ConfigError(0, "domain family not found next to the DSP checkpoint: " + domains.string());
  }
  return make_pipeline(cfg, domain_family_from_json(read_json(domains)), workers);
}

Pipeline checked_pipeline(const RunConfig& cfg, int workers) {
  Pipeline p = make_pipeline(cfg, workers);
  const double sep = min_separability(p);
  if (sep <= kSeparabilityFloor) {
    throw ConfigError(0, "seen domains are not separable (probe accuracy " + format_number(sep) + ")");
  }
  return p;
}

std::string bool01(bool b) { return b ? "1" : "0"; }

}  // namespace

RunConfig resolve_config(const GlobalOptions& opts) {
  RunConfig cfg = opts.config ? load_config(*opts.config) : RunConfig{};
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.out_dir = *opts.out;
  if (opts.workers < 1) throw ConfigError(0, "--workers must be at least 1");
  cfg.validate();
  return cfg;
}

Pipeline make_pipeline(const RunConfig& cfg, int workers) {
  return make_pipeline(cfg, make_domains(cfg.k_seen, cfg.k_unseen, cfg.d_in, cfg.seed), workers);
}

Pipeline make_pipeline(const RunConfig& cfg, DomainFamily family, int workers) {
  const int seen = static_cast<int>(family.seen_count());
  const int unseen = static_cast<int>(family.domains.size()) - seen;
  if (family.seed != cfg.seed || seen != cfg.k_seen || unseen != cfg.k_unseen) {
    throw ConfigError(0, "saved domain family (seed " + std::to_string(family.seed) + ", " + std::to_string(seen) +
                             " seen, " + std::to_string(unseen) + " unseen) does not match the config");
  }
  for (const DomainSpec& d : family.domains) {
    if (d.d_in != cfg.d_in) throw ConfigError(0, "saved domain family has d_in " + std::to_string(d.d_in));
  }
  Pipeline p;
  p.cfg = cfg;
  p.family = std::move(family);
  p.encoder = Encoder::random(cfg.d_in, cfg.encoder_hidden, cfg.embed_dim, mix_seed(cfg.seed, kEncoderSeed));
  p.workers = workers;
  return p;
}

double min_separability(const Pipeline& p) {
  const auto seen = p.seen();
  const EpisodeConfig ec = p.cfg.episode_config();
  double worst = 1.0;
  for (std::size_t a = 0; a < seen.size(); ++a) {
    for (std::size_t b = a + 1; b < seen.size(); ++b) {
      const double acc = domain_probe_accuracy(seen[a], seen[b], ec, mix_seed(p.cfg.seed, kProbeSeed, a, b), 50);
      worst = std::min(worst, acc);
    }
  }
  return worst;
}

TrainDspResult run_train_dsp(const Pipeline& p, DspDesign design, double m_init) {
  const RunConfig& c = p.cfg;
  MetaState state = MetaState::fresh(c.k_seen, design, c.adapter_dims(), m_init, c.alpha_in, c.alpha_out, c.t_train);
  TrainDspOptions o;
  o.batch = c.batch;
  o.iters = c.dsp_iters;
  o.seed = mix_seed(c.seed, kDspSeed);
  o.cosine = c.cosine;
  o.workers = p.workers;
  o.side = c.side;
  o.freeze_prototypes = c.freeze_prototypes;
  const auto seen = p.seen();
  return train_dsp(std::move(state), p.encoder, seen, c.episode_config(), o);
}

TrainClassifierResult run_train_classifier(const Pipeline& p, const MetaState& state, double lambda,
                                           bool aux_only) {
  const RunConfig& c = p.cfg;
  ClassifierParams cls = ClassifierParams::random(c.embed_dim, c.cls_hidden, c.k_seen, mix_seed(c.seed, kClassifierInit));
  cls.lambda = lambda;
  cls.aux_only = aux_only;
  TrainClassifierOptions o;
  o.batch = c.batch;
  o.iters = c.cls_iters;
  o.lr = c.cls_lr;
  o.seed = mix_seed(c.seed, kClassifierSeed);
  o.heldout_per_domain = c.heldout_per_domain;
  o.workers = p.workers;
  const auto seen = p.seen();
  return train_classifier(std::move(cls), state, p.encoder, seen, c.episode_config(), o);
}

EvalReport run_eval(const Pipeline& p, const MetaState& state, const ClassifierParams& cls,
                    const MetaTestOptions& test) {
  EvalOptions o;
  o.test = test;
  o.test.side = p.cfg.side;
  o.test.freeze_prototypes = p.cfg.freeze_prototypes;
  o.workers = p.workers;
  return evaluate(state, cls, p.encoder, p.cfg.tsp_config(), p.family, p.cfg.episode_config(), p.cfg.eval_episodes,
                  mix_seed(p.cfg.seed, kEvalSeed), o);
}

std::vector<CompareRow> run_compare_pd(const Pipeline& p, int episodes) {
  const RunConfig& c = p.cfg;
  // All three methods adapt with the same step size so only P differs.
  TspConfig tsp = c.tsp_config();
  tsp.beta.assign(2, c.alpha_in);

  const TrainDspResult gram = run_train_dsp(p, DspDesign::GramPlusI, c.m_init);
  const TrainDspResult raw = run_train_dsp(p, DspDesign::RawM, -1.0);
  const ClassifierParams gram_cls = run_train_classifier(p, gram.state, c.lambda, c.aux_only).cls;
  const ClassifierParams raw_cls = run_train_classifier(p, raw.state, c.lambda, c.aux_only).cls;

  struct Method {
    const char* name;
    const MetaState* state;
    const ClassifierParams* cls;
    bool gd;
  };
  const Method methods[] = {{"gd", &gram.state, &gram_cls, true},
                            {"gram_plus_i_tsp", &gram.state, &gram_cls, false},
                            {"raw_m_tsp", &raw.state, &raw_cls, false}};

  std::vector<CompareRow> rows;
  for (const DomainSpec& d : p.family.domains) {
    for (const Method& m : methods) {
      EvalOptions o;
      o.test.baseline_gd = m.gd;
      o.test.side = c.side;
      o.test.freeze_prototypes = c.freeze_prototypes;
      o.workers = p.workers;
      const auto curve =
          learning_curve(*m.state, *m.cls, p.encoder, tsp, d, c.episode_config(), episodes, mix_seed(c.seed, kCompareSeed), o);
      for (const CurvePoint& pt : curve) rows.push_back({m.name, d.id, d.seen, pt});
    }
  }
  return rows;
}

std::string per_domain_csv(const EvalReport& r) {
  std::string out = "domain,seen,acc_mean,ci95\n";
  for (const DomainResult& d : r.domains) {
    out += std::to_string(d.domain) + ',' + bool01(d.seen) + ',' + format_number(d.acc_mean) + ',' +
           format_number(d.ci95) + '\n';
  }
  return out;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::string out = "method,domain,seen,step,inner_loss,query_acc\n";
  for (const CompareRow& r : rows) {
    out += r.method + ',' + std::to_string(r.domain) + ',' + bool01(r.seen) + ',' + std::to_string(r.point.step) + ',' +
           format_number(r.point.inner_loss) + ',' + format_number(r.point.query_acc) + '\n';
  }
  return out;
}

Json config_json(const RunConfig& cfg) {
  Json j = Json::object();
  const std::string text = canonical_text(cfg);
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl - pos);
    const auto eq = line.find(" = ");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    // Numbers, booleans, and the beta list keep their JSON types; names stay strings.
    Json typed = Json::parse(key == "beta" ? "[" + value + "]" : value, nullptr, false);
    j[key] = typed.is_discarded() || typed.is_string() ? Json(value) : std::move(typed);
    pos = nl + 1;
  }
  return j;
}

std::optional<int> parse_onehot(std::string_view spec) {
  constexpr std::string_view prefix = "onehot:";
  if (spec.substr(0, prefix.size()) != prefix) return std::nullopt;
  spec.remove_prefix(prefix.size());
  int k = 0;
  const auto res = std::from_chars(spec.data(), spec.data() + spec.size(), k);
  if (res.ec != std::errc() || res.ptr != spec.data() + spec.size() || k < 0) return std::nullopt;
  return k;
}

int cmd_train_dsp(const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto t0 = Clock::now();
    const RunConfig cfg = resolve_config(g);
    const Pipeline p = checked_pipeline(cfg, g.workers);
    const TrainDspResult r = run_train_dsp(p, cfg.design, cfg.m_init);
    write_json(cfg.out_dir / kDomainsFile, to_json(p.family));
    Json ckpt = to_json(r.state);
    ckpt["config_hash"] = config_hash(cfg);
    write_json(cfg.out_dir / kDspFile, ckpt);
    write_text(cfg.out_dir / "dsp_trace.csv", trace_csv(r.trace));
    write_timing(cfg.out_dir, "train-dsp", seconds_since(t0));
    out << "trained " << r.state.domain_count() << " " << to_string(cfg.design) << " DSPs; final loss "
        << format_number(r.trace.back().loss) << '\n';
    return kExitOk;
  });
}

int cmd_train_classifier(const GlobalOptions& g, const ClassifierArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto t0 = Clock::now();
    const RunConfig cfg = resolve_config(g);
    if (a.lambda && !(*a.lambda >= 0.0)) throw ConfigError(0, "--lambda must be non-negative");
    const auto dsp_path = a.dsp.value_or(cfg.out_dir / kDspFile);
    const MetaState state = load_checked(dsp_path, &meta_state_from_json, "DSP");
    check_state(state, cfg);
    const Pipeline p = pipeline_near(cfg, dsp_path, g.workers);
    const TrainClassifierResult r =
        run_train_classifier(p, state, a.lambda.value_or(cfg.lambda), a.aux_only || cfg.aux_only);
    Json ckpt = to_json(r.cls);
    ckpt["config_hash"] = config_hash(cfg);
    write_json(cfg.out_dir / kClassifierFile, ckpt);
    write_text(cfg.out_dir / "classifier_trace.csv", trace_csv(r.trace));
    write_timing(cfg.out_dir, "train-classifier", seconds_since(t0));
    out << "held-out domain accuracy " << format_number(r.heldout_accuracy) << '\n';
    return kExitOk;
  });
}

int cmd_eval(const GlobalOptions& g, const EvalArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto t0 = Clock::now();
    const RunConfig cfg = resolve_config(g);
    const auto dsp_path = a.dsp.value_or(cfg.out_dir / kDspFile);
    const MetaState state = load_checked(dsp_path, &meta_state_from_json, "DSP");
    check_state(state, cfg);
    const ClassifierParams cls =
        load_checked(a.classifier.value_or(cfg.out_dir / kClassifierFile), &classifier_from_json, "classifier");
    check_classifier(cls, cfg);
    const Pipeline p = pipeline_near(cfg, dsp_path, g.workers);

    MetaTestOptions test;
    std::string method = "tsp";
    if (a.baseline_gd) {
      test.baseline_gd = true;
      method = "gd";
    } else if (a.onehot) {
      if (*a.onehot >= cfg.k_seen) throw ConfigError(0, "--coeffs onehot index out of range");
      test.forced = TaskCoefficients::one_hot(*a.onehot, cfg.k_seen);
      method = "onehot:" + std::to_string(*a.onehot);
    }
    const EvalReport report = run_eval(p, state, cls, test);

    Json certs = Json::array();
    const auto dsps = state.materialized();
    for (std::size_t k = 0; k < dsps.size(); ++k) {
      certs.push_back(Json{{"domain", k}, {"layers", to_json(certification_report(dsps[k], state.design))}});
    }
    const Json doc{{"config", config_json(cfg)},
                   {"config_hash", config_hash(cfg)},
                   {"method", method},
                   {"report", to_json(report)},
                   {"dsp_certification", std::move(certs)}};
    write_json(cfg.out_dir / "eval.json", doc);
    write_text(cfg.out_dir / "per_domain.csv", per_domain_csv(report));
    write_timing(cfg.out_dir, "eval", seconds_since(t0));
    out << "avg_seen " << format_number(report.avg_seen) << " avg_unseen " << format_number(report.avg_unseen)
        << " avg_all " << format_number(report.avg_all) << '\n';
    return kExitOk;
  });
}

int cmd_ablate_designs(const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto t0 = Clock::now();
    const RunConfig cfg = resolve_config(g);
    const Pipeline p = checked_pipeline(cfg, g.workers);
    std::string csv = "design,avg_seen,avg_unseen,avg_all,non_pd_rate\n";
    for (DspDesign d : {DspDesign::CholLLT, DspDesign::CholLLTPlusI, DspDesign::GramPlusI, DspDesign::RawM}) {
      const TrainDspResult dsp = run_train_dsp(p, d, cfg.m_init);
      const ClassifierParams cls = run_train_classifier(p, dsp.state, cfg.lambda, cfg.aux_only).cls;
      const EvalReport r = run_eval(p, dsp.state, cls);
      csv += std::string(to_string(d)) + ',' + format_number(r.avg_seen) + ',' + format_number(r.avg_unseen) + ',' +
             format_number(r.avg_all) + ',' + format_number(non_pd_rate(dsp.state).average) + '\n';
      err << to_string(d) << " done\n";
    }
    write_text(cfg.out_dir / "ablate_designs.csv", csv);
    write_timing(cfg.out_dir, "ablate-designs", seconds_since(t0));
    out << csv;
    return kExitOk;
  });
}

int cmd_sweep_lambda(const GlobalOptions& g, const SweepArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto t0 = Clock::now();
    const RunConfig cfg = resolve_config(g);
    for (double l : a.lambdas) {
      if (!(l >= 0.0)) throw ConfigError(0, "lambda values must be non-negative");
    }
    const Pipeline p = checked_pipeline(cfg, g.workers);
    const TrainDspResult dsp = run_train_dsp(p, cfg.design, cfg.m_init);

    struct Setting {
      std::string label;
      double lambda;
      bool aux_only;
    };
    std::vector<Setting> settings;
    for (double l : a.lambdas) settings.push_back({format_number(l), l, false});
    settings.push_back({"only_ce", 0.0, false});
    settings.push_back({"only_aux", 1.0, true});

    std::string csv = "setting,lambda,avg_seen,avg_unseen,avg_all\n";
    for (const Setting& s : settings) {
      const ClassifierParams cls = run_train_classifier(p, dsp.state, s.lambda, s.aux_only).cls;
      const EvalReport r = run_eval(p, dsp.state, cls);
      csv += s.label + ',' + (s.aux_only ? std::string("aux_only") : format_number(s.lambda)) + ',' +
             format_number(r.avg_seen) + ',' + format_number(r.avg_unseen) + ',' + format_number(r.avg_all) + '\n';
      err << "setting " << s.label << " done\n";
    }
    write_text(cfg.out_dir / "sweep_lambda.csv", csv);
    write_timing(cfg.out_dir, "sweep-lambda", seconds_since(t0));
    out << csv;
    return kExitOk;
  });
}

int cmd_diagnose(const GlobalOptions& g, const DiagnoseArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto t0 = Clock::now();
    const RunConfig cfg = resolve_config(g);
    if (a.tasks_per_domain < 1) throw ConfigError(0, "--tasks must be at least 1");
    const auto dsp_path = a.dsp.value_or(cfg.out_dir / kDspFile);
    const MetaState state = load_checked(dsp_path, &meta_state_from_json, "DSP");
    check_state(state, cfg);
    const ClassifierParams cls =
        load_checked(a.classifier.value_or(cfg.out_dir / kClassifierFile), &classifier_from_json, "classifier");
    check_classifier(cls, cfg);
    const Pipeline p = pipeline_near(cfg, dsp_path, g.workers);
    const auto dsps = state.materialized();
    const std::size_t layers = state.dims.size();
    const auto per = static_cast<std::size_t>(a.tasks_per_domain);
    const std::size_t total = p.family.domains.size() * per;

    struct Sample {
      Vector coeffs;
      std::vector<double> erank;
    };
    std::vector<Sample> samples(total);
    const EpisodeConfig ec = cfg.episode_config();
    parallel_for(total, g.workers, [&](std::size_t i) {
      const DomainSpec& d = p.family.domains[i / per];
      const Episode e =
          strip_domain_label(sample_episode(d, ec, mix_seed(cfg.seed, kDiagnoseSeed, static_cast<std::uint64_t>(d.id), i % per)));
      const TaskCoefficients c = TaskCoefficients::from_logits(classifier_logits(cls, p.encoder, e.support));
      samples[i] = {c.weights, effective_rank(mix(c, dsps))};
    });

    std::string csv = "domain,seen";
    for (int k = 0; k < cfg.k_seen; ++k) csv += ",p_" + std::to_string(k);
    csv += '\n';
    Json domains = Json::array();
    for (std::size_t di = 0; di < p.family.domains.size(); ++di) {
      const DomainSpec& d = p.family.domains[di];
      std::vector<double> mean(layers, 0.0);
      for (std::size_t t = 0; t < per; ++t) {
        const Sample& s = samples[di * per + t];
        for (std::size_t l = 0; l < layers; ++l) mean[l] += s.erank[l];
        csv += std::to_string(d.id) + ',' + bool01(d.seen);
        for (Index k = 0; k < s.coeffs.size(); ++k) csv += ',' + format_number(s.coeffs(k));
        csv += '\n';
      }
      for (double& v : mean) v /= static_cast<double>(per);
      domains.push_back(Json{{"domain", d.id}, {"seen", d.seen}, {"mean_erank", mean}});
    }
    Json dsp_ranks = Json::array();
    for (std::size_t k = 0; k < dsps.size(); ++k) {
      dsp_ranks.push_back(Json{{"domain", k}, {"layers", to_json(certification_report(dsps[k], state.design))}});
    }
    const Json doc{{"config", config_json(cfg)},
                   {"config_hash", config_hash(cfg)},
                   {"tasks_per_domain", a.tasks_per_domain},
                   {"task_preconditioner_erank", std::move(domains)},
                   {"dsp_certification", std::move(dsp_ranks)}};
    write_json(cfg.out_dir / "diagnose.json", doc);
    write_text(cfg.out_dir / "coefficients.csv", csv);
    write_timing(cfg.out_dir, "diagnose", seconds_since(t0));
    out << "wrote diagnose.json and coefficients.csv\n";
    return kExitOk;
  });
}

int cmd_compare_pd(const GlobalOptions& g, int episodes, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto t0 = Clock::now();
    const RunConfig cfg = resolve_config(g);
    if (episodes < 1) throw ConfigError(0, "--episodes must be at least 1");
    const Pipeline p = checked_pipeline(cfg, g.workers);
    const std::string csv = compare_csv(run_compare_pd(p, episodes));
    write_text(cfg.out_dir / "compare_pd.csv", csv);
    write_timing(cfg.out_dir, "compare-pd", seconds_since(t0));
    out << "wrote compare_pd.csv\n";
    return kExitOk;
  });
}

}  // namespace tsp
