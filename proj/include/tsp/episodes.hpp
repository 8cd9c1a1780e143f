#pragma once

// Synthetic multi-domain few-shot episodes. Each domain is a Gaussian-cluster
// generator pushed through its own affine map (rotation, anisotropic scaling,
// bias); unseen domains draw their maps from a disjoint, wider range.

#include <cstdint>
#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include "tsp/diffcore.hpp"

namespace tsp {

// splitmix64 finalizer; combines a base seed with stream indices.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                       std::uint64_t c = 0);

struct DomainSpec {
  int id = 0;
  bool seen = true;
  int d_in = 0;
  double proto_scale = 1.0;
  double noise_scale = 0.5;
  Matrix rotation;  // orthogonal d_in x d_in
  Vector scaling;   // positive, length d_in
  Vector bias;      // length d_in
  // Class prototypes vary only in the first `signal_dims` latent coordinates;
  // the remaining ones carry within-class noise alone.
  int signal_dims = 4;
  int max_classes = 10;
};

struct DomainFamily {
  std::vector<DomainSpec> domains;
  std::uint64_t seed = 0;

  std::size_t seen_count() const;
  std::vector<DomainSpec> seen() const;
  std::vector<DomainSpec> unseen() const;
};

enum class EpisodeMode { VaryingWayVaryingShot, VaryingWayFiveShot, FiveWayOneShot };

std::string_view to_string(EpisodeMode mode);
std::optional<EpisodeMode> parse_episode_mode(std::string_view name);

struct EpisodeConfig {
  int min_way = 3;
  int max_way = 8;
  int min_shot = 5;
  int max_shot = 20;
  int queries_per_class = 5;
  EpisodeMode mode = EpisodeMode::VaryingWayVaryingShot;

  // Way/shot ranges implied by the mode; queries_per_class kept.
  static EpisodeConfig for_mode(EpisodeMode mode, int queries_per_class = 5);
  static EpisodeConfig fixed(int way, int shot, int queries_per_class);
  // Throws std::invalid_argument when a range is empty or below its floor.
  void validate() const;
};

struct LabeledSet {
  Matrix features;  // rows are examples
  std::vector<int> labels;

  Index size() const { return features.rows(); }
};

struct Episode {
  LabeledSet support;
  LabeledSet query;
  int way = 0;
  std::optional<int> domain;  // present for meta-training episodes only
};

DomainFamily make_domains(int seen, int unseen, int d_in, std::uint64_t seed);

Episode sample_episode(const DomainSpec& spec, const EpisodeConfig& cfg, std::uint64_t seed);

Episode strip_domain_label(Episode e);

// Held-out accuracy of a logistic-regression probe telling two domains apart
// from the mean input features of their support sets.
double domain_probe_accuracy(const DomainSpec& a, const DomainSpec& b, const EpisodeConfig& cfg,
                             std::uint64_t seed, int episodes_per_domain = 100);

}  // namespace tsp
