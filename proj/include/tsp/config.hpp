#pragma once

// Run configuration: flat `key = value` text, `#` starts a comment.
// Every key is optional; omitted keys keep the defaults below.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tsp/episodes.hpp"
#include "tsp/metatrain.hpp"
#include "tsp/precond.hpp"

namespace tsp {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(int line, const std::string& detail, const std::string& source = "")
      : std::runtime_error((source.empty() ? "" : source + ": ") +
                           (line > 0 ? "line " + std::to_string(line) + ": " : "") + detail),
        line_(line),
        detail_(detail) {}
  // 0 when the error is not tied to a line.
  int line() const { return line_; }
  const std::string& detail() const { return detail_; }

 private:
  int line_;
  std::string detail_;
};

struct RunConfig {
  std::uint64_t seed = 0;

  int k_seen = 8;
  int k_unseen = 5;
  int d_in = 16;
  int encoder_hidden = 32;
  int embed_dim = 8;

  EpisodeMode mode = EpisodeMode::VaryingWayVaryingShot;
  int queries_per_class = 5;

  DspDesign design = DspDesign::GramPlusI;
  double m_init = 0.1;
  double alpha_in = 0.1;
  double alpha_out = 1.0;
  std::vector<double> beta{0.1, 0.1};
  int t_train = 5;
  int t_test = 40;
  double lambda = 0.1;
  bool aux_only = false;
  PreconditionSide side = PreconditionSide::Left;
  bool freeze_prototypes = false;
  bool cosine = false;

  int batch = 8;
  int dsp_iters = 1000;
  int cls_iters = 300;
  double cls_lr = 0.05;
  int cls_hidden = 32;
  int heldout_per_domain = 50;
  int eval_episodes = 100;

  std::filesystem::path out_dir = "runs";

  // Throws ConfigError (line 0) on an out-of-range value.
  void validate() const;

  EpisodeConfig episode_config() const;
  TspConfig tsp_config() const;
  std::vector<int> adapter_dims() const;
};

RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

// Every key with its resolved value, one `key = value` line each, in a fixed
// order. The output directory is left out: it does not affect any result.
std::string canonical_text(const RunConfig& cfg);

// 64-bit FNV-1a of canonical_text, as 16 lowercase hex digits.
std::string config_hash(const RunConfig& cfg);

}  // namespace tsp
