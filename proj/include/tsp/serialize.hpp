#pragma once

// JSON checkpoints and fixtures. Matrices are stored as
// {"rows", "cols", "data"} with row-major data; doubles round-trip exactly.

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

#include "tsp/episodes.hpp"
#include "tsp/metatrain.hpp"
#include "tsp/precond.hpp"

namespace tsp {

using Json = nlohmann::json;

// Malformed, truncated, or wrong-kind file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

Json to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);
Json to_json(const Vector& v);
Vector vector_from_json(const Json& j);

// Features are stored column by column: "columns"[i] holds feature i of every row.
Json to_json(const Episode& e);
Episode episode_from_json(const Json& j);

Json to_json(const DomainSpec& d);
DomainSpec domain_from_json(const Json& j);
Json to_json(const DomainFamily& f);
DomainFamily domain_family_from_json(const Json& j);

Json to_json(const MetaState& s);
MetaState meta_state_from_json(const Json& j);

Json to_json(const ClassifierParams& c);
ClassifierParams classifier_from_json(const Json& j);

Json to_json(const CertificationRecord& r);
Json to_json(std::span<const CertificationRecord> records);

Json to_json(const EvalReport& r);

// Shortest text that parses back to the same double; "nan", "inf", "-inf"
// for non-finite values. Independent of the global locale.
std::string format_number(double v);

// `iter,loss,grad_norm` with a header row and LF line endings.
std::string trace_csv(std::span<const TraceRow> trace);

void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& j);
// Throws std::runtime_error when the file is missing, FormatError when it
// does not parse.
Json read_json(const std::filesystem::path& path);

}  // namespace tsp
