#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "tsp/serialize.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "tsp_cli_test";

constexpr const char* kTiny =
    "k_seen = 2\n"
    "k_unseen = 1\n"
    "dsp_iters = 4\n"
    "cls_iters = 4\n"
    "batch = 2\n"
    "t_test = 4\n"
    "eval_episodes = 3\n"
    "heldout_per_domain = 3\n";

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args) {
  const fs::path log = kRoot / "last.log";
  const std::string cmd = std::string(TSP_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = tsp::read_text(log);
  return r;
}

fs::path write_config(const std::string& name, const std::string& text) {
  const fs::path p = kRoot / name;
  tsp::write_text(p, text);
  return p;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string flags(const fs::path& cfg, const fs::path& out) {
  return "--config " + cfg.string() + " --out " + out.string();
}

}  // namespace

TEST_CASE("config errors exit with 2 and a line number") {
  fs::create_directories(kRoot);
  const fs::path bad = write_config("bad.cfg", "seed = 1\ndesign = cholesky\n");
  const Run r = run("train-dsp --config " + bad.string() + " --out " + (kRoot / "bad").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("line 2") != std::string::npos);
  CHECK(r.output.find("chol_llt_plus_i") != std::string::npos);

  CHECK(run("no-such-verb").code == 2);
  CHECK(run("train-dsp --config " + (kRoot / "absent.cfg").string()).code == 2);
}

TEST_CASE("missing checkpoints exit with 2") {
  const fs::path cfg = write_config("tiny.cfg", kTiny);
  CHECK(run("train-classifier " + flags(cfg, kRoot / "empty")).code == 2);
  CHECK(run("eval " + flags(cfg, kRoot / "empty")).code == 2);
}

TEST_CASE("train, classify, evaluate") {
  const fs::path cfg = write_config("tiny.cfg", kTiny);
  const fs::path out = kRoot / "pipeline";
  fs::remove_all(out);
  REQUIRE(run("train-dsp " + flags(cfg, out)).code == 0);
  CHECK(fs::exists(out / "dsp.json"));
  CHECK(fs::exists(out / "domains.json"));
  CHECK(lines(tsp::read_text(out / "dsp_trace.csv")).size() == 5);

  const Run cls = run("train-classifier " + flags(cfg, out) + " --lambda 0");
  REQUIRE(cls.code == 0);
  CHECK(cls.output.find("held-out domain accuracy") != std::string::npos);
  CHECK(tsp::read_json(out / "classifier.json")["lambda"] == 0.0);

  REQUIRE(run("eval " + flags(cfg, out)).code == 0);
  const auto csv = lines(tsp::read_text(out / "per_domain.csv"));
  REQUIRE(csv.size() == 4);
  CHECK(csv[0] == "domain,seen,acc_mean,ci95");
  CHECK(csv[3].rfind("2,0,", 0) == 0);
  const tsp::Json doc = tsp::read_json(out / "eval.json");
  CHECK(doc["config"]["k_seen"] == 2);
  CHECK(doc["config_hash"].get<std::string>().size() == 16);
  CHECK(doc["method"] == "tsp");

  SUBCASE("same seed gives identical bytes") {
    const std::string json = tsp::read_text(out / "eval.json");
    const std::string per = tsp::read_text(out / "per_domain.csv");
    REQUIRE(run("eval " + flags(cfg, out) + " --workers 3").code == 0);
    CHECK(tsp::read_text(out / "eval.json") == json);
    CHECK(tsp::read_text(out / "per_domain.csv") == per);
  }

  SUBCASE("baselines and forced coefficients") {
    REQUIRE(run("eval " + flags(cfg, out) + " --baseline gd").code == 0);
    CHECK(tsp::read_json(out / "eval.json")["method"] == "gd");
    REQUIRE(run("eval " + flags(cfg, out) + " --coeffs onehot:1").code == 0);
    CHECK(tsp::read_json(out / "eval.json")["method"] == "onehot:1");
    CHECK(run("eval " + flags(cfg, out) + " --coeffs onehot:2").code == 2);
    CHECK(run("eval " + flags(cfg, out) + " --coeffs uniform").code == 2);
    CHECK(run("eval " + flags(cfg, out) + " --coeffs onehot:0 --baseline gd").code == 2);
  }

  SUBCASE("checkpoint and config disagree") {
    const fs::path three = write_config("three.cfg", std::string(kTiny) + "k_seen = 3\n");
    // duplicate key
    CHECK(run("eval " + flags(three, out)).code == 2);
    std::string text = kTiny;
    text.replace(text.find("k_seen = 2"), 10, "k_seen = 3");
    const fs::path other = write_config("other.cfg", text);
    const Run r = run("eval " + flags(other, out));
    CHECK(r.code == 2);
  }

  SUBCASE("diagnose") {
    REQUIRE(run("diagnose " + flags(cfg, out) + " --tasks 4").code == 0);
    const auto rows = lines(tsp::read_text(out / "coefficients.csv"));
    REQUIRE(rows.size() == 1 + 3 * 4);
    CHECK(rows[0] == "domain,seen,p_0,p_1");
    for (std::size_t i = 1; i < rows.size(); ++i) {
      std::istringstream in(rows[i]);
      std::string f;
      std::vector<std::string> cells;
      while (std::getline(in, f, ',')) cells.push_back(f);
      REQUIRE(cells.size() == 4);
      CHECK(std::stod(cells[2]) + std::stod(cells[3]) == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(tsp::read_json(out / "diagnose.json")["task_preconditioner_erank"].size() == 3);
  }
}

TEST_CASE("raw_m with a negative initialization is accepted") {
  const fs::path cfg = write_config("raw.cfg", std::string(kTiny) + "design = raw_m\nm_init = -1.0\n");
  const fs::path out = kRoot / "raw";
  CHECK(run("train-dsp " + flags(cfg, out)).code == 0);
  CHECK(tsp::read_json(out / "dsp.json")["design"] == "raw_m");
}

TEST_CASE("sweep, ablation and PD comparison shapes") {
  const fs::path cfg = write_config("tiny.cfg", kTiny);
  const fs::path out = kRoot / "experiments";

  REQUIRE(run("sweep-lambda " + flags(cfg, out)).code == 0);
  const auto sweep = lines(tsp::read_text(out / "sweep_lambda.csv"));
  REQUIRE(sweep.size() == 7);
  CHECK(sweep[0] == "setting,lambda,avg_seen,avg_unseen,avg_all");
  CHECK(sweep[5].rfind("only_ce,0,", 0) == 0);
  CHECK(sweep[6].rfind("only_aux,aux_only,", 0) == 0);
  CHECK(run("sweep-lambda " + flags(cfg, out) + " --lambdas 1,-1").code == 2);

  REQUIRE(run("ablate-designs " + flags(cfg, out)).code == 0);
  const auto ab = lines(tsp::read_text(out / "ablate_designs.csv"));
  REQUIRE(ab.size() == 5);
  CHECK(ab[0] == "design,avg_seen,avg_unseen,avg_all,non_pd_rate");
  CHECK(ab[3].rfind("gram_plus_i,", 0) == 0);
  CHECK(ab[4].rfind("raw_m,", 0) == 0);

  REQUIRE(run("compare-pd " + flags(cfg, out) + " --episodes 2").code == 0);
  const auto cmp = lines(tsp::read_text(out / "compare_pd.csv"));
  CHECK(cmp[0] == "method,domain,seen,step,inner_loss,query_acc");
  // three methods x three domains x (t_test + 1) steps
  CHECK(cmp.size() == 1 + 3 * 3 * 5);
  CHECK(cmp[1].rfind("gd,0,1,0,", 0) == 0);
  CHECK(cmp[6].rfind("gram_plus_i_tsp,0,1,0,", 0) == 0);
  CHECK(cmp[11].rfind("raw_m_tsp,0,1,0,", 0) == 0);
  fs::remove_all(kRoot);
}
