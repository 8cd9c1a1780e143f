#include "tsp/serialize.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tsp {

namespace {

const Json& field(const Json& j, const char* key) {
  if (!j.is_object()) throw FormatError(std::string("expected an object holding '") + key + "'");
  const auto it = j.find(key);
  if (it == j.end()) throw FormatError(std::string("missing field '") + key + "'");
  return *it;
}

template <typename T>
T get(const Json& j, const char* key) {
  try {
    return field(j, key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("field '") + key + "': " + e.what());
  }
}

void expect_kind(const Json& j, std::string_view kind) {
  const auto got = get<std::string>(j, "format");
  if (got != kind) throw FormatError("expected a " + std::string(kind) + " file, got " + got);
  const int version = get<int>(j, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported " + std::string(kind) + " version " + std::to_string(version));
  }
}

Json set_to_json(const LabeledSet& s) {
  Json cols = Json::array();
  for (Index c = 0; c < s.features.cols(); ++c) {
    Json col = Json::array();
    for (Index r = 0; r < s.features.rows(); ++r) col.push_back(s.features(r, c));
    cols.push_back(std::move(col));
  }
  return Json{{"labels", s.labels}, {"columns", std::move(cols)}};
}

LabeledSet set_from_json(const Json& j) {
  LabeledSet s;
  s.labels = get<std::vector<int>>(j, "labels");
  const auto cols = get<std::vector<std::vector<double>>>(j, "columns");
  const auto n = static_cast<Index>(s.labels.size());
  s.features.resize(n, static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (static_cast<Index>(cols[c].size()) != n) throw FormatError("ragged episode column");
    for (Index r = 0; r < n; ++r) s.features(r, static_cast<Index>(c)) = cols[c][static_cast<std::size_t>(r)];
  }
  return s;
}

}  // namespace

Json to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const Json& j) {
  const auto rows = get<Index>(j, "rows");
  const auto cols = get<Index>(j, "cols");
  if (rows < 0 || cols < 0) throw FormatError("negative matrix dimension");
  const auto data = get<std::vector<double>>(j, "data");
  if (static_cast<Index>(data.size()) != rows * cols) {
    throw FormatError("matrix " + shape_string(rows, cols) + " holds " + std::to_string(data.size()) + " values");
  }
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

Json to_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

Vector vector_from_json(const Json& j) {
  std::vector<double> data;
  try {
    data = j.get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("vector: ") + e.what());
  }
  return Eigen::Map<const Vector>(data.data(), static_cast<Index>(data.size()));
}

Json to_json(const Episode& e) {
  Json j{{"format", "tsp-episode"}, {"version", kCheckpointVersion}, {"way", e.way},
         {"support", set_to_json(e.support)}, {"query", set_to_json(e.query)}};
  j["domain"] = e.domain ? Json(*e.domain) : Json(nullptr);
  return j;
}

Episode episode_from_json(const Json& j) {
  expect_kind(j, "tsp-episode");
  Episode e;
  e.way = get<int>(j, "way");
  e.support = set_from_json(field(j, "support"));
  e.query = set_from_json(field(j, "query"));
  const Json& d = field(j, "domain");
  if (!d.is_null()) e.domain = d.get<int>();
  return e;
}

Json to_json(const DomainSpec& d) {
  return Json{{"id", d.id},
              {"seen", d.seen},
              {"d_in", d.d_in},
              {"proto_scale", d.proto_scale},
              {"noise_scale", d.noise_scale},
              {"signal_dims", d.signal_dims},
              {"max_classes", d.max_classes},
              {"rotation", to_json(d.rotation)},
              {"scaling", to_json(d.scaling)},
              {"bias", to_json(d.bias)}};
}

DomainSpec domain_from_json(const Json& j) {
  DomainSpec d;
  d.id = get<int>(j, "id");
  d.seen = get<bool>(j, "seen");
  d.d_in = get<int>(j, "d_in");
  d.proto_scale = get<double>(j, "proto_scale");
  d.noise_scale = get<double>(j, "noise_scale");
  d.signal_dims = get<int>(j, "signal_dims");
  d.max_classes = get<int>(j, "max_classes");
  d.rotation = matrix_from_json(field(j, "rotation"));
  d.scaling = vector_from_json(field(j, "scaling"));
  d.bias = vector_from_json(field(j, "bias"));
  if (d.rotation.rows() != d.d_in || d.rotation.cols() != d.d_in || d.scaling.size() != d.d_in ||
      d.bias.size() != d.d_in) {
    throw FormatError("domain " + std::to_string(d.id) + " transform does not match d_in");
  }
  return d;
}

Json to_json(const DomainFamily& f) {
  Json domains = Json::array();
  for (const DomainSpec& d : f.domains) domains.push_back(to_json(d));
  return Json{{"format", "tsp-domains"}, {"version", kCheckpointVersion}, {"seed", f.seed},
              {"domains", std::move(domains)}};
}

DomainFamily domain_family_from_json(const Json& j) {
  expect_kind(j, "tsp-domains");
  DomainFamily f;
  f.seed = get<std::uint64_t>(j, "seed");
  for (const Json& d : field(j, "domains")) f.domains.push_back(domain_from_json(d));
  return f;
}

Json to_json(const MetaState& s) {
  Json dsps = Json::array();
  for (const DspParams& d : s.dsps) {
    Json raw = Json::array();
    for (const Matrix& m : d.raw) raw.push_back(to_json(m));
    Json diag = Json::array();
    for (const Vector& v : d.diag_raw) diag.push_back(to_json(v));
    dsps.push_back(Json{{"domain", d.domain}, {"raw", std::move(raw)}, {"diag_raw", std::move(diag)}});
  }
  return Json{{"format", "tsp-dsp"},
              {"version", kCheckpointVersion},
              {"design", std::string(to_string(s.design))},
              {"dims", s.dims},
              {"alpha_in", s.alpha_in},
              {"alpha_out", s.alpha_out},
              {"inner_steps", s.inner_steps},
              {"dsps", std::move(dsps)}};
}

MetaState meta_state_from_json(const Json& j) {
  expect_kind(j, "tsp-dsp");
  MetaState s;
  const auto name = get<std::string>(j, "design");
  const auto design = parse_design(name);
  if (!design) throw FormatError("unknown design '" + name + "'");
  s.design = *design;
  s.dims = get<std::vector<int>>(j, "dims");
  s.alpha_in = get<double>(j, "alpha_in");
  s.alpha_out = get<double>(j, "alpha_out");
  s.inner_steps = get<int>(j, "inner_steps");
  for (const Json& d : field(j, "dsps")) {
    DspParams p;
    p.domain = get<int>(d, "domain");
    p.design = s.design;
    for (const Json& m : field(d, "raw")) p.raw.push_back(matrix_from_json(m));
    for (const Json& v : field(d, "diag_raw")) p.diag_raw.push_back(vector_from_json(v));
    s.dsps.push_back(std::move(p));
  }
  try {
    s.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("inconsistent DSP checkpoint: ") + e.what());
  }
  return s;
}

Json to_json(const ClassifierParams& c) {
  return Json{{"format", "tsp-classifier"},
              {"version", kCheckpointVersion},
              {"lambda", c.lambda},
              {"aux_only", c.aux_only},
              {"w1", to_json(c.w1)},
              {"b1", to_json(c.b1)},
              {"w2", to_json(c.w2)},
              {"b2", to_json(c.b2)}};
}

ClassifierParams classifier_from_json(const Json& j) {
  expect_kind(j, "tsp-classifier");
  ClassifierParams c;
  c.lambda = get<double>(j, "lambda");
  c.aux_only = get<bool>(j, "aux_only");
  c.w1 = matrix_from_json(field(j, "w1"));
  c.b1 = matrix_from_json(field(j, "b1"));
  c.w2 = matrix_from_json(field(j, "w2"));
  c.b2 = matrix_from_json(field(j, "b2"));
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("inconsistent classifier checkpoint: ") + e.what());
  }
  return c;
}

Json to_json(const CertificationRecord& r) {
  return Json{{"layer", r.layer},
              {"design", std::string(to_string(r.design))},
              {"is_pd", r.is_pd},
              {"min_eig", r.min_eig},
              {"erank", r.erank}};
}

Json to_json(std::span<const CertificationRecord> records) {
  Json out = Json::array();
  for (const CertificationRecord& r : records) out.push_back(to_json(r));
  return out;
}

Json to_json(const EvalReport& r) {
  Json domains = Json::array();
  for (const DomainResult& d : r.domains) {
    domains.push_back(Json{{"domain", d.domain},
                           {"seen", d.seen},
                           {"episodes", d.episodes},
                           {"acc_mean", d.acc_mean},
                           {"ci95", d.ci95},
                           {"diverged", d.diverged},
                           {"pd_rate", d.pd_rate},
                           {"mean_erank", d.mean_erank}});
  }
  return Json{{"domains", std::move(domains)}, {"avg_seen", r.avg_seen},     {"avg_unseen", r.avg_unseen},
              {"avg_all", r.avg_all},          {"diverged", r.diverged},     {"pd_rate", r.pd_rate},
              {"mean_erank", r.mean_erank}};
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trace_csv(std::span<const TraceRow> trace) {
  std::string out = "iter,loss,grad_norm\n";
  for (const TraceRow& r : trace) {
    out += std::to_string(r.iter) + ',' + format_number(r.loss) + ',' + format_number(r.grad_norm) + '\n';
  }
  return out;
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

Json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace tsp
