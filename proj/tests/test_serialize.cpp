#include <cmath>
#include <filesystem>
#include <limits>

#include <doctest.h>

#include "tsp/serialize.hpp"

using namespace tsp;

TEST_CASE("matrices round-trip exactly") {
  Matrix m(2, 3);
  m << 0.1, -2.5e-300, 1.0 / 3.0, 7, 0, -0.0;
  const Json j = to_json(m);
  CHECK(j["rows"] == 2);
  CHECK(j["data"][1] == -2.5e-300);
  CHECK(matrix_from_json(Json::parse(j.dump())) == m);

  const Vector v = (Vector(3) << 1e-17, 2, std::nextafter(1.0, 2.0)).finished();
  CHECK(vector_from_json(Json::parse(to_json(v).dump())) == v);
}

TEST_CASE("malformed matrices are rejected") {
  CHECK_THROWS_AS(matrix_from_json(Json::parse(R"({"rows":2,"cols":2,"data":[1,2,3]})")), FormatError);
  CHECK_THROWS_AS(matrix_from_json(Json::parse(R"({"rows":1})")), FormatError);
  CHECK_THROWS_AS(matrix_from_json(Json::parse(R"([1,2])")), FormatError);
}

TEST_CASE("episodes round-trip") {
  const DomainFamily f = make_domains(2, 1, 16, 0);
  const Episode e = sample_episode(f.domains[1], EpisodeConfig{}, 5);
  const Episode back = episode_from_json(Json::parse(to_json(e).dump()));
  CHECK(back.support.features == e.support.features);
  CHECK(back.query.labels == e.query.labels);
  CHECK(back.domain == 1);
  CHECK(back.way == e.way);
  const Episode stripped = episode_from_json(to_json(strip_domain_label(e)));
  CHECK_FALSE(stripped.domain.has_value());
}

TEST_CASE("domain families round-trip") {
  const DomainFamily f = make_domains(3, 2, 16, 9);
  const DomainFamily back = domain_family_from_json(Json::parse(to_json(f).dump()));
  REQUIRE(back.domains.size() == 5);
  CHECK(back.seed == 9);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(back.domains[k].rotation == f.domains[k].rotation);
    CHECK(back.domains[k].bias == f.domains[k].bias);
    CHECK(back.domains[k].seen == f.domains[k].seen);
    CHECK(back.domains[k].signal_dims == f.domains[k].signal_dims);
  }
  CHECK_THROWS_AS(domain_family_from_json(to_json(Matrix(Matrix::Zero(1, 1)))), FormatError);
}

TEST_CASE("meta states round-trip") {
  MetaState s = MetaState::fresh(3, DspDesign::CholLLTPlusI, {4, 4}, 0.3, 0.1, 1.0, 5);
  s.dsps[1].raw[0](2, 1) = 1.0 / 7.0;
  s.dsps[2].diag_raw[1](3) = -0.123456789;
  const MetaState back = meta_state_from_json(Json::parse(to_json(s).dump()));
  CHECK(back.design == s.design);
  CHECK(back.dims == s.dims);
  CHECK(back.alpha_out == 1.0);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(back.dsps[k].raw == s.dsps[k].raw);
    CHECK(back.dsps[k].diag_raw == s.dsps[k].diag_raw);
  }
  Json bad = to_json(s);
  bad["format"] = "tsp-classifier";
  CHECK_THROWS_AS(meta_state_from_json(bad), FormatError);
  bad = to_json(s);
  bad["dsps"][0]["raw"][0] = to_json(Matrix(Matrix::Zero(3, 3)));
  CHECK_THROWS(meta_state_from_json(bad));
}

TEST_CASE("classifiers round-trip") {
  ClassifierParams c = ClassifierParams::random(8, 16, 4, 2);
  c.lambda = 0.01;
  c.aux_only = true;
  const ClassifierParams back = classifier_from_json(Json::parse(to_json(c).dump()));
  CHECK(back.w1 == c.w1);
  CHECK(back.b2 == c.b2);
  CHECK(back.lambda == 0.01);
  CHECK(back.aux_only);
}

TEST_CASE("certification records") {
  const auto rec = certification_report(Preconditioner::identity(std::vector<int>{3}), DspDesign::RawM);
  const Json j = to_json(rec[0]);
  CHECK(j["layer"] == 0);
  CHECK(j["design"] == "raw_m");
  CHECK(j["is_pd"] == true);
  CHECK(j["min_eig"] == 1.0);
  CHECK(j["erank"] == 3.0);
}

TEST_CASE("number formatting") {
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(1.0) == "1");
  CHECK(format_number(-2.5e-7) == "-2.5e-07");
  CHECK(format_number(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(format_number(-std::numeric_limits<double>::infinity()) == "-inf");
  CHECK(format_number(std::numeric_limits<double>::quiet_NaN()) == "nan");
  const double third = 1.0 / 3.0;
  CHECK(std::stod(format_number(third)) == third);
}

TEST_CASE("trace csv") {
  const std::vector<TraceRow> t{{0, 1.5, 0.25}, {1, 1.25, 0.125}};
  CHECK(trace_csv(t) == "iter,loss,grad_norm\n0,1.5,0.25\n1,1.25,0.125\n");
}

TEST_CASE("files") {
  const auto dir = std::filesystem::temp_directory_path() / "tsp_serialize_test";
  std::filesystem::remove_all(dir);
  write_json(dir / "nested" / "a.json", Json{{"x", 1}});
  CHECK(read_json(dir / "nested" / "a.json")["x"] == 1);
  CHECK(read_text(dir / "nested" / "a.json").back() == '\n');
  CHECK_THROWS_AS(read_json(dir / "missing.json"), std::runtime_error);
  write_text(dir / "bad.json", "{\"x\": ");
  CHECK_THROWS_AS(read_json(dir / "bad.json"), FormatError);
  std::filesystem::remove_all(dir);
}
