#include <string>

#include <doctest.h>

#include "tsp/config.hpp"

using namespace tsp;

TEST_CASE("defaults") {
  const RunConfig c = parse_config("");
  CHECK(c.k_seen == 8);
  CHECK(c.k_unseen == 5);
  CHECK(c.d_in == 16);
  CHECK(c.design == DspDesign::GramPlusI);
  CHECK(c.m_init == 0.1);
  CHECK(c.alpha_in == 0.1);
  CHECK(c.t_train == 5);
  CHECK(c.t_test == 40);
  CHECK(c.lambda == 0.1);
  CHECK(c.beta == std::vector<double>{0.1, 0.1});
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("grammar") {
  const RunConfig c = parse_config(
      "# comment line\n"
      "  seed = 42   # trailing comment\n"
      "\n"
      "design=raw_m\n"
      "m_init = -1.0\n"
      "beta = 0.2, 0.05\n"
      "mode = 5_way_1_shot\n"
      "cosine = true\n"
      "freeze_prototypes = 1\n"
      "side = right\n"
      "out_dir = some/dir\n");
  CHECK(c.seed == 42);
  CHECK(c.design == DspDesign::RawM);
  CHECK(c.m_init == -1.0);
  CHECK(c.beta == std::vector<double>{0.2, 0.05});
  CHECK(c.mode == EpisodeMode::FiveWayOneShot);
  CHECK(c.cosine);
  CHECK(c.freeze_prototypes);
  CHECK(c.side == PreconditionSide::Right);
  CHECK(c.out_dir == "some/dir");
}

TEST_CASE("errors carry the line number") {
  auto line_of = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return e.line();
    }
    return -1;
  };
  CHECK(line_of("seed = 1\nbogus = 3\n") == 2);
  CHECK(line_of("seed = 1\n\nseed = 2\n") == 3);
  CHECK(line_of("no equals sign\n") == 1);
  CHECK(line_of("k_seen = eight\n") == 1);
  CHECK(line_of("k_seen = 8x\n") == 1);
  CHECK(line_of("cosine = maybe\n") == 1);
  CHECK(line_of("alpha_in =\n") == 1);
}

TEST_CASE("unknown design names the valid variants") {
  try {
    parse_config("design = cholesky\n");
    FAIL("accepted an unknown design");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    for (const char* name : {"gram_plus_i", "chol_llt", "chol_llt_plus_i", "raw_m"})
      CHECK(what.find(name) != std::string::npos);
  }
}

TEST_CASE("validation") {
  CHECK_THROWS_AS(parse_config("beta = 0.1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("lambda = -0.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("design = chol_llt\nm_init = 0\n"), ConfigError);
  CHECK_NOTHROW(parse_config("lambda = 0\n"));
}

TEST_CASE("canonical text and hash") {
  const RunConfig a = parse_config("seed = 3\n");
  const RunConfig b = parse_config("   seed=3 # same\n");
  CHECK(canonical_text(a) == canonical_text(b));
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  CHECK(config_hash(a) != config_hash(parse_config("seed = 4\n")));
  CHECK(config_hash(a) == config_hash(parse_config("seed = 3\nout_dir = elsewhere\n")));
  // canonical text parses back to the same config
  CHECK(canonical_text(parse_config(canonical_text(a))) == canonical_text(a));
}

TEST_CASE("derived settings") {
  const RunConfig c = parse_config("embed_dim = 6\nt_test = 12\nmode = varying_way_5_shot\n");
  CHECK(c.adapter_dims() == std::vector<int>{6, 6});
  CHECK(c.tsp_config().steps == 12);
  CHECK(c.episode_config().min_shot == 5);
  CHECK(c.episode_config().max_shot == 5);
}
