#include <algorithm>
#include <set>
#include <vector>

#include <doctest.h>

#include "tsp/episodes.hpp"
#include "tsp/metatrain.hpp"
#include "tsp/model.hpp"

using namespace tsp;

namespace {

bool same_spec(const DomainSpec& a, const DomainSpec& b) {
  return a.id == b.id && a.seen == b.seen && a.rotation == b.rotation && a.scaling == b.scaling &&
         a.bias == b.bias && a.proto_scale == b.proto_scale && a.noise_scale == b.noise_scale;
}

std::vector<int> counts(const std::vector<int>& labels, int way) {
  std::vector<int> c(static_cast<std::size_t>(way), 0);
  for (int y : labels) ++c[static_cast<std::size_t>(y)];
  return c;
}

}  // namespace

TEST_CASE("make_domains layout") {
  const DomainFamily f = make_domains(8, 5, 16, 0);
  REQUIRE(f.domains.size() == 13);
  for (int k = 0; k < 13; ++k) {
    CHECK(f.domains[k].id == k);
    CHECK(f.domains[k].seen == (k < 8));
  }
  CHECK(f.seen_count() == 8);
  CHECK(f.unseen().size() == 5);

  const DomainFamily single = make_domains(1, 0, 16, 0);
  CHECK(single.domains.size() == 1);
  CHECK(single.domains[0].seen);
}

TEST_CASE("domain transforms") {
  const DomainFamily f = make_domains(8, 5, 16, 0);
  for (const DomainSpec& d : f.domains) {
    CHECK((d.rotation.transpose() * d.rotation - Matrix::Identity(16, 16)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(d.noise_scale > 0.0);
    CHECK((d.scaling.array() > 0.0).all());
  }
  for (std::size_t a = 0; a < f.domains.size(); ++a)
    for (std::size_t b = a + 1; b < f.domains.size(); ++b) CHECK(f.domains[a].rotation != f.domains[b].rotation);
}

TEST_CASE("make_domains is deterministic in the seed") {
  const DomainFamily a = make_domains(8, 5, 16, 7);
  const DomainFamily b = make_domains(8, 5, 16, 7);
  const DomainFamily c = make_domains(8, 5, 16, 8);
  for (std::size_t k = 0; k < a.domains.size(); ++k) {
    CHECK(same_spec(a.domains[k], b.domains[k]));
    CHECK_FALSE(same_spec(a.domains[k], c.domains[k]));
  }
}

TEST_CASE("make_domains preconditions") {
  CHECK_THROWS(make_domains(0, 5, 16, 0));
  CHECK_THROWS(make_domains(8, 5, 1, 0));
}

TEST_CASE("unseen domains use wider transforms") {
  const DomainFamily f = make_domains(8, 5, 16, 2);
  double seen_max = 0.0, unseen_min = 1e9;
  for (const DomainSpec& d : f.domains) {
    const double spread = d.scaling.array().log().abs().maxCoeff();
    if (d.seen) seen_max = std::max(seen_max, spread);
    else unseen_min = std::min(unseen_min, spread);
  }
  CHECK(unseen_min >= 0.6);
  CHECK(seen_max <= 0.6);
}

TEST_CASE("five-way one-shot episodes") {
  const DomainFamily f = make_domains(2, 0, 16, 0);
  const EpisodeConfig cfg = EpisodeConfig::for_mode(EpisodeMode::FiveWayOneShot);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Episode e = sample_episode(f.domains[1], cfg, s);
    CHECK(e.way == 5);
    CHECK(counts(e.support.labels, 5) == std::vector<int>(5, 1));
    CHECK(e.domain == 1);
  }
}

TEST_CASE("varying-way five-shot episodes") {
  const DomainFamily f = make_domains(1, 0, 16, 0);
  const EpisodeConfig cfg = EpisodeConfig::for_mode(EpisodeMode::VaryingWayFiveShot);
  std::set<int> ways;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Episode e = sample_episode(f.domains[0], cfg, s);
    ways.insert(e.way);
    CHECK(counts(e.support.labels, e.way) == std::vector<int>(static_cast<std::size_t>(e.way), 5));
  }
  CHECK(ways.size() > 1);
}

TEST_CASE("episode well-formedness") {
  const DomainFamily f = make_domains(3, 2, 16, 1);
  const EpisodeConfig cfg;
  for (const DomainSpec& d : f.domains) {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Episode e = sample_episode(d, cfg, s);
      CHECK(e.way >= cfg.min_way);
      CHECK(e.way <= cfg.max_way);
      CHECK(e.support.features.cols() == 16);
      CHECK(e.support.size() == static_cast<Index>(e.support.labels.size()));
      const auto sc = counts(e.support.labels, e.way);
      for (int c : sc) {
        CHECK(c >= cfg.min_shot);
        CHECK(c <= cfg.max_shot);
      }
      // balanced queries over contiguous labels, all present in the support
      CHECK(counts(e.query.labels, e.way) == std::vector<int>(static_cast<std::size_t>(e.way), cfg.queries_per_class));
      CHECK(e.support.features.allFinite());
      CHECK(e.query.features.allFinite());
    }
  }
}

TEST_CASE("sample_episode is deterministic") {
  const DomainFamily f = make_domains(1, 0, 16, 0);
  const Episode a = sample_episode(f.domains[0], EpisodeConfig{}, 42);
  const Episode b = sample_episode(f.domains[0], EpisodeConfig{}, 42);
  const Episode c = sample_episode(f.domains[0], EpisodeConfig{}, 43);
  CHECK(a.support.features == b.support.features);
  CHECK(a.query.features == b.query.features);
  CHECK(a.support.labels == b.support.labels);
  const bool same_shape = a.support.features.rows() == c.support.features.rows();
  CHECK_FALSE((same_shape && a.support.features == c.support.features));
}

TEST_CASE("strip_domain_label") {
  const DomainFamily f = make_domains(4, 0, 16, 0);
  const Episode e = sample_episode(f.domains[3], EpisodeConfig{}, 1);
  REQUIRE(e.domain == 3);
  const Episode s = strip_domain_label(e);
  CHECK_FALSE(s.domain.has_value());
  CHECK(s.support.features == e.support.features);
  CHECK(s.query.labels == e.query.labels);
  const Episode again = strip_domain_label(s);
  CHECK(again.support.features == s.support.features);
  CHECK_FALSE(again.domain.has_value());

  const Encoder enc = Encoder::random(16, 32, 8, 0);
  const ClassifierParams cls = ClassifierParams::random(8, 16, 4, 0);
  CHECK(classifier_logits(cls, enc, s.support).size() == 4);
}

TEST_CASE("episode config validation") {
  EpisodeConfig c;
  c.min_way = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = EpisodeConfig{};
  c.min_shot = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = EpisodeConfig{};
  c.max_way = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_NOTHROW(EpisodeConfig::fixed(2, 1, 1).validate());
}

TEST_CASE("episode modes parse") {
  for (EpisodeMode m : {EpisodeMode::VaryingWayVaryingShot, EpisodeMode::VaryingWayFiveShot, EpisodeMode::FiveWayOneShot})
    CHECK(parse_episode_mode(to_string(m)) == m);
  CHECK_FALSE(parse_episode_mode("ten_way").has_value());
}

TEST_CASE("seen domains are separable by a linear probe") {
  const DomainFamily f = make_domains(8, 5, 16, 0);
  const EpisodeConfig cfg;
  for (int a = 0; a < 8; a += 3)
    for (int b = a + 1; b < 8; b += 2) CHECK(domain_probe_accuracy(f.domains[a], f.domains[b], cfg, 5, 50) > 0.9);
}

TEST_CASE("mix_seed separates streams") {
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(0, 0, 1) != mix_seed(0, 1, 0));
}
