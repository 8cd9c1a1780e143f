#include "tsp/episodes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tsp {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto step = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = step(seed);
  h = step(h ^ a);
  h = step(h ^ b);
  return step(h ^ c);
}

std::size_t DomainFamily::seen_count() const {
  return static_cast<std::size_t>(
      std::count_if(domains.begin(), domains.end(), [](const DomainSpec& d) { return d.seen; }));
}

std::vector<DomainSpec> DomainFamily::seen() const {
  std::vector<DomainSpec> out;
  std::copy_if(domains.begin(), domains.end(), std::back_inserter(out),
               [](const DomainSpec& d) { return d.seen; });
  return out;
}

std::vector<DomainSpec> DomainFamily::unseen() const {
  std::vector<DomainSpec> out;
  std::copy_if(domains.begin(), domains.end(), std::back_inserter(out),
               [](const DomainSpec& d) { return !d.seen; });
  return out;
}

namespace {

constexpr std::array<std::pair<EpisodeMode, std::string_view>, 3> kModeNames{{
    {EpisodeMode::VaryingWayVaryingShot, "varying_way_varying_shot"},
    {EpisodeMode::VaryingWayFiveShot, "varying_way_5_shot"},
    {EpisodeMode::FiveWayOneShot, "5_way_1_shot"},
}};

Matrix random_orthogonal(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(d, d);
  for (Index i = 0; i < g.size(); ++i) g(i) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(d, d);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  // Fix column signs so the factorization is unique.
  for (int j = 0; j < d; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  return q;
}

}  // namespace

std::string_view to_string(EpisodeMode mode) {
  for (const auto& [m, name] : kModeNames) {
    if (m == mode) return name;
  }
  return "unknown";
}

std::optional<EpisodeMode> parse_episode_mode(std::string_view name) {
  for (const auto& [m, n] : kModeNames) {
    if (n == name) return m;
  }
  return std::nullopt;
}

EpisodeConfig EpisodeConfig::for_mode(EpisodeMode mode, int queries_per_class) {
  EpisodeConfig cfg;
  cfg.mode = mode;
  cfg.queries_per_class = queries_per_class;
  switch (mode) {
    case EpisodeMode::VaryingWayVaryingShot:
      cfg.min_way = 3, cfg.max_way = 8, cfg.min_shot = 5, cfg.max_shot = 20;
      break;
    case EpisodeMode::VaryingWayFiveShot:
      cfg.min_way = 3, cfg.max_way = 8, cfg.min_shot = 5, cfg.max_shot = 5;
      break;
    case EpisodeMode::FiveWayOneShot:
      cfg.min_way = 5, cfg.max_way = 5, cfg.min_shot = 1, cfg.max_shot = 1;
      break;
  }
  return cfg;
}

EpisodeConfig EpisodeConfig::fixed(int way, int shot, int queries_per_class) {
  EpisodeConfig cfg;
  cfg.min_way = cfg.max_way = way;
  cfg.min_shot = cfg.max_shot = shot;
  cfg.queries_per_class = queries_per_class;
  return cfg;
}

void EpisodeConfig::validate() const {
  if (min_way < 2) throw std::invalid_argument("episode way must be at least 2");
  if (min_way > max_way) throw std::invalid_argument("episode way range is empty");
  if (min_shot < 1) throw std::invalid_argument("episode shot must be at least 1");
  if (min_shot > max_shot) throw std::invalid_argument("episode shot range is empty");
  if (queries_per_class < 1) throw std::invalid_argument("queries per class must be at least 1");
}

DomainFamily make_domains(int seen, int unseen, int d_in, std::uint64_t seed) {
  if (seen < 1) throw std::invalid_argument("at least one seen domain is required");
  if (unseen < 0) throw std::invalid_argument("unseen domain count must be non-negative");
  if (d_in < 2) throw std::invalid_argument("input dimension must be at least 2");

  DomainFamily family;
  family.seed = seed;
  for (int k = 0; k < seen + unseen; ++k) {
    std::mt19937_64 rng(mix_seed(seed, 0xd0ULL, static_cast<std::uint64_t>(k)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const bool is_seen = k < seen;

    DomainSpec d;
    d.id = k;
    d.seen = is_seen;
    d.d_in = d_in;
    d.rotation = random_orthogonal(d_in, rng);
    d.scaling.resize(d_in);
    for (int i = 0; i < d_in; ++i) {
      // Seen log-scales lie in [-0.6, 0.6]; unseen magnitudes in [0.6, 1.2].
      const double u = unit(rng);
      double log_scale;
      if (is_seen) {
        log_scale = -0.6 + 1.2 * u;
      } else {
        const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
        log_scale = sign * (0.6 + 0.6 * u);
      }
      d.scaling(i) = std::exp(log_scale);
    }
    const double bias_scale = is_seen ? 1.5 : 2.0;
    d.bias.resize(d_in);
    for (int i = 0; i < d_in; ++i) d.bias(i) = bias_scale * normal(rng);
    d.proto_scale = is_seen ? 0.8 + 0.4 * unit(rng) : 1.2 + 0.4 * unit(rng);
    d.noise_scale = is_seen ? 0.3 + 0.2 * unit(rng) : 0.5 + 0.2 * unit(rng);
    d.signal_dims = std::max(2, d_in / 4);
    d.max_classes = 10;
    family.domains.push_back(std::move(d));
  }
  return family;
}

Episode sample_episode(const DomainSpec& spec, const EpisodeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const int max_way = std::min(cfg.max_way, spec.max_classes);
  if (max_way < cfg.min_way) throw std::invalid_argument("domain class pool smaller than way range");
  const int way = std::uniform_int_distribution<int>(cfg.min_way, max_way)(rng);
  std::uniform_int_distribution<int> shot_dist(cfg.min_shot, cfg.max_shot);
  std::vector<int> shots(static_cast<std::size_t>(way));
  for (int& s : shots) s = shot_dist(rng);

  const int d = spec.d_in;
  Matrix protos = Matrix::Zero(way, d);
  for (int c = 0; c < way; ++c) {
    for (int i = 0; i < spec.signal_dims; ++i) protos(c, i) = spec.proto_scale * normal(rng);
  }

  auto draw = [&](int cls) {
    Vector latent(d);
    for (int i = 0; i < d; ++i) latent(i) = protos(cls, i) + spec.noise_scale * normal(rng);
    return Vector(spec.rotation * spec.scaling.cwiseProduct(latent) + spec.bias);
  };

  Episode e;
  e.way = way;
  e.domain = spec.id;
  int n_support = 0;
  for (int s : shots) n_support += s;
  e.support.features.resize(n_support, d);
  e.query.features.resize(way * cfg.queries_per_class, d);
  int row = 0;
  for (int c = 0; c < way; ++c) {
    for (int j = 0; j < shots[static_cast<std::size_t>(c)]; ++j, ++row) {
      e.support.features.row(row) = draw(c).transpose();
      e.support.labels.push_back(c);
    }
  }
  row = 0;
  for (int c = 0; c < way; ++c) {
    for (int j = 0; j < cfg.queries_per_class; ++j, ++row) {
      e.query.features.row(row) = draw(c).transpose();
      e.query.labels.push_back(c);
    }
  }
  return e;
}

Episode strip_domain_label(Episode e) {
  e.domain.reset();
  return e;
}

double domain_probe_accuracy(const DomainSpec& a, const DomainSpec& b, const EpisodeConfig& cfg,
                             std::uint64_t seed, int episodes_per_domain) {
  const int d = a.d_in;
  auto pooled = [&](std::uint64_t stream) {
    Matrix x(2 * episodes_per_domain, d);
    Vector y(2 * episodes_per_domain);
    for (int i = 0; i < episodes_per_domain; ++i) {
      const auto s = static_cast<std::uint64_t>(i);
      x.row(2 * i) = sample_episode(a, cfg, mix_seed(seed, stream, 0, s)).support.features.colwise().mean();
      x.row(2 * i + 1) = sample_episode(b, cfg, mix_seed(seed, stream, 1, s)).support.features.colwise().mean();
      y(2 * i) = 0.0;
      y(2 * i + 1) = 1.0;
    }
    return std::pair{x, y};
  };
  auto [train_x, train_y] = pooled(1);
  auto [test_x, test_y] = pooled(2);

  // Standardize with training statistics, then plain logistic-regression GD.
  const Eigen::RowVectorXd mu = train_x.colwise().mean();
  Eigen::RowVectorXd sd = ((train_x.rowwise() - mu).array().square().colwise().mean()).sqrt();
  sd = sd.cwiseMax(1e-12);
  auto standardize = [&](const Matrix& x) {
    return Matrix((x.rowwise() - mu).array().rowwise() / sd.array());
  };
  const Matrix xs = standardize(train_x);
  Vector w = Vector::Zero(d);
  double bias = 0.0;
  const double n = static_cast<double>(xs.rows());
  for (int it = 0; it < 500; ++it) {
    const Vector z = (xs * w).array() + bias;
    const Vector p = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    const Vector r = p - train_y;
    w -= 0.5 * (xs.transpose() * r) / n;
    bias -= 0.5 * r.sum() / n;
  }
  const Vector z = (standardize(test_x) * w).array() + bias;
  int correct = 0;
  for (Index i = 0; i < z.size(); ++i) correct += (z(i) > 0.0) == (test_y(i) > 0.5);
  return static_cast<double>(correct) / static_cast<double>(z.size());
}

}  // namespace tsp
