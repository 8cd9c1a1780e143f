#pragma once

// Experiment stages behind the CLI verbs. Every stage is a pure function of
// the resolved config, its inputs, and the seed; `workers` only changes speed.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tsp/config.hpp"
#include "tsp/episodes.hpp"
#include "tsp/metatrain.hpp"
#include "tsp/model.hpp"
#include "tsp/serialize.hpp"

namespace tsp {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitDivergence = 3,
  kExitTheorem = 4,
};

struct GlobalOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  int workers = 1;
};

// Config file (or defaults) with --seed / --out applied.
RunConfig resolve_config(const GlobalOptions& opts);

// Domains and frozen encoder shared by every stage of one run.
struct Pipeline {
  RunConfig cfg;
  DomainFamily family;
  Encoder encoder;
  int workers = 1;

  std::vector<DomainSpec> seen() const { return family.seen(); }
};

Pipeline make_pipeline(const RunConfig& cfg, int workers);
// Same, with a previously saved domain family. Throws ConfigError when the
// family does not match the config.
Pipeline make_pipeline(const RunConfig& cfg, DomainFamily family, int workers);

// Lowest held-out probe accuracy over every pair of seen domains.
double min_separability(const Pipeline& p);
inline constexpr double kSeparabilityFloor = 0.9;

TrainDspResult run_train_dsp(const Pipeline& p, DspDesign design, double m_init);
TrainClassifierResult run_train_classifier(const Pipeline& p, const MetaState& state, double lambda,
                                           bool aux_only);
EvalReport run_eval(const Pipeline& p, const MetaState& state, const ClassifierParams& cls,
                    const MetaTestOptions& test = {});

struct CompareRow {
  std::string method;
  int domain = 0;
  bool seen = true;
  CurvePoint point;
};

// GD, GramPlusI-TSP, and RawM-TSP (M initialised to -I) learning curves on
// every domain, `episodes` test episodes each.
std::vector<CompareRow> run_compare_pd(const Pipeline& p, int episodes);

std::string per_domain_csv(const EvalReport& r);
std::string compare_csv(const std::vector<CompareRow>& rows);
Json config_json(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// CLI verbs. Each returns an exit code; errors are reported on `err`.

struct ClassifierArgs {
  std::optional<std::filesystem::path> dsp;
  std::optional<double> lambda;
  bool aux_only = false;
};

struct EvalArgs {
  std::optional<std::filesystem::path> dsp;
  std::optional<std::filesystem::path> classifier;
  bool baseline_gd = false;
  std::optional<int> onehot;
};

struct SweepArgs {
  std::vector<double> lambdas{10.0, 1.0, 0.1, 0.01};
};

struct DiagnoseArgs {
  std::optional<std::filesystem::path> dsp;
  std::optional<std::filesystem::path> classifier;
  int tasks_per_domain = 100;
};

int cmd_train_dsp(const GlobalOptions& g, std::ostream& out, std::ostream& err);
int cmd_train_classifier(const GlobalOptions& g, const ClassifierArgs& a, std::ostream& out, std::ostream& err);
int cmd_eval(const GlobalOptions& g, const EvalArgs& a, std::ostream& out, std::ostream& err);
int cmd_ablate_designs(const GlobalOptions& g, std::ostream& out, std::ostream& err);
int cmd_sweep_lambda(const GlobalOptions& g, const SweepArgs& a, std::ostream& out, std::ostream& err);
int cmd_diagnose(const GlobalOptions& g, const DiagnoseArgs& a, std::ostream& out, std::ostream& err);
int cmd_compare_pd(const GlobalOptions& g, int episodes, std::ostream& out, std::ostream& err);

// Parses "onehot:k".
std::optional<int> parse_onehot(std::string_view spec);

}  // namespace tsp
