#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tsp/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Task-specific preconditioned few-shot adaptation on synthetic domains"};
  app.require_subcommand(1);
  app.fallthrough();

  tsp::GlobalOptions g;
  std::string config, out;
  std::uint64_t seed = 0;
  app.add_option("--config", config, "run configuration file (key = value)");
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", out, "output directory");
  app.add_option("--workers", g.workers, "worker threads")->check(CLI::PositiveNumber);

  auto* train_dsp = app.add_subcommand("train-dsp", "meta-train domain-specific preconditioners");

  tsp::ClassifierArgs ca;
  std::string ca_dsp;
  double ca_lambda = 0.0;
  auto* train_cls = app.add_subcommand("train-classifier", "train the dataset classifier");
  train_cls->add_option("--dsp", ca_dsp, "DSP checkpoint (default OUT/dsp.json)");
  auto* lambda_opt = train_cls->add_option("--lambda", ca_lambda, "weight of the auxiliary loss");
  train_cls->add_flag("--aux-only", ca.aux_only, "train on the auxiliary loss alone");

  tsp::EvalArgs ea;
  std::string ea_dsp, ea_cls, baseline, coeffs;
  auto* eval = app.add_subcommand("eval", "meta-test on seen and unseen domains");
  eval->add_option("--dsp", ea_dsp, "DSP checkpoint (default OUT/dsp.json)");
  eval->add_option("--classifier", ea_cls, "classifier checkpoint (default OUT/classifier.json)");
  eval->add_option("--baseline", baseline, "'gd' evaluates with P = I")->check(CLI::IsMember({"gd"}));
  eval->add_option("--coeffs", coeffs, "'onehot:k' forces one-hot task coefficients");

  auto* ablate = app.add_subcommand("ablate-designs", "train and evaluate every DSP design");

  tsp::SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep-lambda", "classifier auxiliary-weight sweep");
  sweep->add_option("--lambdas", sa.lambdas, "lambda grid")->delimiter(',');

  tsp::DiagnoseArgs da;
  std::string da_dsp, da_cls;
  auto* diagnose = app.add_subcommand("diagnose", "effective ranks and task-coefficient matrix");
  diagnose->add_option("--dsp", da_dsp, "DSP checkpoint (default OUT/dsp.json)");
  diagnose->add_option("--classifier", da_cls, "classifier checkpoint (default OUT/classifier.json)");
  diagnose->add_option("--tasks", da.tasks_per_domain, "test tasks per domain");

  int compare_episodes = 50;
  auto* compare = app.add_subcommand("compare-pd", "learning curves with and without the PD constraint");
  compare->add_option("--episodes", compare_episodes, "test episodes per domain");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : tsp::kExitConfig;
  }

  if (!config.empty()) g.config = config;
  if (!out.empty()) g.out = out;
  if (seed_opt->count() > 0) g.seed = seed;

  if (train_dsp->parsed()) return tsp::cmd_train_dsp(g, std::cout, std::cerr);
  if (train_cls->parsed()) {
    if (!ca_dsp.empty()) ca.dsp = ca_dsp;
    if (lambda_opt->count() > 0) ca.lambda = ca_lambda;
    return tsp::cmd_train_classifier(g, ca, std::cout, std::cerr);
  }
  if (eval->parsed()) {
    if (!ea_dsp.empty()) ea.dsp = ea_dsp;
    if (!ea_cls.empty()) ea.classifier = ea_cls;
    ea.baseline_gd = baseline == "gd";
    if (!coeffs.empty()) {
      ea.onehot = tsp::parse_onehot(coeffs);
      if (!ea.onehot) {
        std::cerr << "config error: --coeffs expects onehot:k, got '" << coeffs << "'\n";
        return tsp::kExitConfig;
      }
    }
    if (ea.baseline_gd && ea.onehot) {
      std::cerr << "config error: --baseline and --coeffs are mutually exclusive\n";
      return tsp::kExitConfig;
    }
    return tsp::cmd_eval(g, ea, std::cout, std::cerr);
  }
  if (ablate->parsed()) return tsp::cmd_ablate_designs(g, std::cout, std::cerr);
  if (sweep->parsed()) return tsp::cmd_sweep_lambda(g, sa, std::cout, std::cerr);
  if (diagnose->parsed()) {
    if (!da_dsp.empty()) da.dsp = da_dsp;
    if (!da_cls.empty()) da.classifier = da_cls;
    return tsp::cmd_diagnose(g, da, std::cout, std::cerr);
  }
  if (compare->parsed()) return tsp::cmd_compare_pd(g, compare_episodes, std::cout, std::cerr);
  return tsp::kExitConfig;
}
