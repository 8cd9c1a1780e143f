#include "tsp/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <set>

#include "tsp/serialize.hpp"

namespace tsp {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view v, std::string_view key) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw std::invalid_argument("'" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

bool parse_bool(std::string_view v, std::string_view key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("'" + std::string(key) + "' expects true or false, got '" + std::string(v) + "'");
}

std::string side_name(PreconditionSide s) { return s == PreconditionSide::Left ? "left" : "right"; }

struct Key {
  const char* name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> show;
};

template <typename T>
Key number_key(const char* name, T RunConfig::*member) {
  return {name, [=](RunConfig& c, std::string_view v) { c.*member = parse_number<T>(v, name); },
          [=](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_number(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

Key bool_key(const char* name, bool RunConfig::*member) {
  return {name, [=](RunConfig& c, std::string_view v) { c.*member = parse_bool(v, name); },
          [=](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      number_key("seed", &RunConfig::seed),
      number_key("k_seen", &RunConfig::k_seen),
      number_key("k_unseen", &RunConfig::k_unseen),
      number_key("d_in", &RunConfig::d_in),
      number_key("encoder_hidden", &RunConfig::encoder_hidden),
      number_key("embed_dim", &RunConfig::embed_dim),
      {"mode",
       [](RunConfig& c, std::string_view v) {
         const auto m = parse_episode_mode(v);
         if (!m) {
           throw std::invalid_argument("unknown mode '" + std::string(v) +
                                       "' (expected varying_way_varying_shot, varying_way_5_shot, 5_way_1_shot)");
         }
         c.mode = *m;
       },
       [](const RunConfig& c) { return std::string(to_string(c.mode)); }},
      number_key("queries_per_class", &RunConfig::queries_per_class),
      {"design",
       [](RunConfig& c, std::string_view v) {
         const auto d = parse_design(v);
         if (!d) throw std::invalid_argument("unknown design '" + std::string(v) + "' (expected " + design_names() + ")");
         c.design = *d;
       },
       [](const RunConfig& c) { return std::string(to_string(c.design)); }},
      number_key("m_init", &RunConfig::m_init),
      number_key("alpha_in", &RunConfig::alpha_in),
      number_key("alpha_out", &RunConfig::alpha_out),
      {"beta",
       [](RunConfig& c, std::string_view v) {
         std::vector<double> out;
         while (true) {
           const auto comma = v.find(',');
           out.push_back(parse_number<double>(trim(v.substr(0, comma)), "beta"));
           if (comma == std::string_view::npos) break;
           v.remove_prefix(comma + 1);
         }
         c.beta = std::move(out);
       },
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.beta.size(); ++i) s += (i ? ", " : "") + format_number(c.beta[i]);
         return s;
       }},
      number_key("t_train", &RunConfig::t_train),
      number_key("t_test", &RunConfig::t_test),
      number_key("lambda", &RunConfig::lambda),
      bool_key("aux_only", &RunConfig::aux_only),
      {"side",
       [](RunConfig& c, std::string_view v) {
         if (v == "left") {
           c.side = PreconditionSide::Left;
         } else if (v == "right") {
           c.side = PreconditionSide::Right;
         } else {
           throw std::invalid_argument("unknown side '" + std::string(v) + "' (expected left, right)");
         }
       },
       [](const RunConfig& c) { return side_name(c.side); }},
      bool_key("freeze_prototypes", &RunConfig::freeze_prototypes),
      bool_key("cosine", &RunConfig::cosine),
      number_key("batch", &RunConfig::batch),
      number_key("dsp_iters", &RunConfig::dsp_iters),
      number_key("cls_iters", &RunConfig::cls_iters),
      number_key("cls_lr", &RunConfig::cls_lr),
      number_key("cls_hidden", &RunConfig::cls_hidden),
      number_key("heldout_per_domain", &RunConfig::heldout_per_domain),
      number_key("eval_episodes", &RunConfig::eval_episodes),
      {"out_dir", [](RunConfig& c, std::string_view v) { c.out_dir = std::string(v); },
       [](const RunConfig& c) { return c.out_dir.string(); }},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(0, what); };
  if (k_seen < 1) fail("k_seen must be at least 1");
  if (k_unseen < 0) fail("k_unseen must be non-negative");
  if (d_in < 2) fail("d_in must be at least 2");
  if (encoder_hidden < 1 || embed_dim < 1) fail("encoder_hidden and embed_dim must be positive");
  if (queries_per_class < 1) fail("queries_per_class must be at least 1");
  if (!(m_init == m_init)) fail("m_init must be a number");
  if (is_cholesky(design) && !(m_init > kCholDiagFloor)) fail("m_init must exceed 1e-6 for Cholesky designs");
  if (!(alpha_in > 0.0) || !(alpha_out > 0.0)) fail("alpha_in and alpha_out must be positive");
  if (beta.size() != 2) fail("beta needs exactly 2 values, got " + std::to_string(beta.size()));
  for (double b : beta) {
    if (!(b > 0.0)) fail("beta values must be positive");
  }
  if (t_train < 1 || t_test < 1) fail("t_train and t_test must be at least 1");
  if (!(lambda >= 0.0)) fail("lambda must be non-negative");
  if (batch < 1) fail("batch must be at least 1");
  if (dsp_iters < 1 || cls_iters < 1) fail("dsp_iters and cls_iters must be at least 1");
  if (!(cls_lr > 0.0)) fail("cls_lr must be positive");
  if (cls_hidden < 1) fail("cls_hidden must be positive");
  if (heldout_per_domain < 1) fail("heldout_per_domain must be at least 1");
  if (eval_episodes < 2) fail("eval_episodes must be at least 2");
  if (out_dir.empty()) fail("out_dir must not be empty");
}

EpisodeConfig RunConfig::episode_config() const { return EpisodeConfig::for_mode(mode, queries_per_class); }

TspConfig RunConfig::tsp_config() const {
  TspConfig t;
  t.beta = beta;
  t.steps = t_test;
  return t;
}

std::vector<int> RunConfig::adapter_dims() const { return {embed_dim, embed_dim}; }

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::set<std::string, std::less<>> seen;
  int line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);

    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(line_no, "expected 'key = value', got '" + std::string(line) + "'");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(line_no, "missing key before '='");
    if (value.empty()) throw ConfigError(line_no, "missing value for '" + std::string(key) + "'");

    const Key* match = nullptr;
    for (const Key& k : keys()) {
      if (key == k.name) match = &k;
    }
    if (!match) throw ConfigError(line_no, "unknown key '" + std::string(key) + "'");
    if (!seen.emplace(key).second) throw ConfigError(line_no, "duplicate key '" + std::string(key) + "'");
    try {
      match->set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(line_no, e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(0, e.what());
  }
  try {
    return parse_config(text);
  } catch (const ConfigError& e) {
    throw ConfigError(e.line(), e.detail(), path.string());
  }
}

std::string canonical_text(const RunConfig& cfg) {
  std::string out;
  for (const Key& k : keys()) {
    if (std::string_view(k.name) == "out_dir") continue;
    out += k.name;
    out += " = ";
    out += k.show(cfg);
    out += '\n';
  }
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_text(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace tsp
