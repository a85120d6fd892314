#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "dspa/binary_io.hpp"
#include "dspa/cli.hpp"
#include "dspa/fixtures.hpp"
#include "test_util.hpp"

using namespace dspa;
using dspa::testing::TempDir;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
  nlohmann::json json() const { return nlohmann::json::parse(out); }
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "dspa");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Toy fixture directory with the map already built.
class ToyDir : public ::testing::Test {
 protected:
  void SetUp() override {
    fixtures::write_toy(dir_.path());
    const auto r = run({"build-map", "--manifest", p("manifest.json"), "--input-sae", p("input_sae.dspa"),
                        "--output-sae", p("output_sae.dspa"), "--out", p("map.dspm"), "--threads", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  std::string p(const std::string& name) const { return (dir_ / name).string(); }
  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  TempDir dir_;
};

}  // namespace

TEST_F(ToyDir, BuildMapGoldenValuesAndReport) {
  const auto map = read_map(p("map.dspm"));
  EXPECT_FLOAT_EQ(map.a.at(0, 0), 0.2f);
  EXPECT_FLOAT_EQ(map.a.at(0, 1), 0.2f);
  EXPECT_EQ(map.a.at(1, 0), 0.0f);
  EXPECT_FLOAT_EQ(map.a.at(1, 1), 0.3f);
  const auto sae = SaeParams::identity(2);
  EXPECT_EQ(io::read_file(p("map.dspm")), encode_map(build_map(fixtures::toy_triples(), sae, sae)));

  const auto r = run({"build-map", "--manifest", p("manifest.json"), "--input-sae", p("input_sae.dspa"),
                      "--output-sae", p("output_sae.dspa"), "--out", p("again.dspm"), "--threads", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(io::read_file(p("again.dspm")), io::read_file(p("map.dspm")));
  const auto j = r.json();
  EXPECT_EQ(j["schema_version"], 1);
  EXPECT_EQ(j["command"], "build-map");
  EXPECT_EQ(j["N"], 2);
  EXPECT_EQ(j["d_sae"], 2);
  EXPECT_EQ(j["nnz"], 3);
  EXPECT_EQ(j["config"]["percentile"], 75.0);
  EXPECT_EQ(j["support_histogram"].size(), 3u);
}

TEST_F(ToyDir, ConfigFileFillsDefaultsAndFlagsWin) {
  write("cfg.json", R"({"percentile": 50, "support_floor": 1, "manifest": ")" + p("manifest.json") +
                        R"(", "input-sae": ")" + p("input_sae.dspa") + R"(", "output_sae": ")" +
                        p("output_sae.dspa") + R"(", "out": ")" + p("cfg.dspm") + R"("})");
  const auto from_config = run({"build-map", "--config", p("cfg.json")});
  ASSERT_EQ(from_config.code, 0) << from_config.err;
  EXPECT_EQ(from_config.json()["config"]["percentile"], 50.0);
  EXPECT_EQ(from_config.json()["config"]["support_floor"], 1);

  const auto flag = run({"build-map", "--config", p("cfg.json"), "--percentile", "90"});
  ASSERT_EQ(flag.code, 0) << flag.err;
  EXPECT_EQ(flag.json()["config"]["percentile"], 90.0);

  write("bad.json", R"({"percentile": 50, "colour": "red"})");
  const auto bad = run({"build-map", "--config", p("bad.json")});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("colour"), std::string::npos);
}

TEST_F(ToyDir, ValidationFailuresExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"sparsify", "--map", p("map.dspm"), "--out", p("s.dspm"), "--bogus"}).code, 2);
  EXPECT_EQ(run({"sparsify", "--map", p("map.dspm")}).code, 2);
  EXPECT_EQ(run({"sparsify", "--map", p("missing.dspm"), "--out", p("s.dspm")}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);

  write("empty.json", "[]");
  const auto empty = run({"build-map", "--manifest", p("empty.json"), "--input-sae", p("input_sae.dspa"),
                          "--output-sae", p("output_sae.dspa"), "--out", p("e.dspm")});
  EXPECT_EQ(empty.code, 2);
  EXPECT_FALSE(std::filesystem::exists(p("e.dspm")));
}

TEST_F(ToyDir, SparsifyReport) {
  const auto r = run({"sparsify", "--map", p("map.dspm"), "--k-diff", "1", "--out", p("s.dspm")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.json()["nnz_before"], 3);
  EXPECT_EQ(read_map(p("s.dspm")), sparsify(read_map(p("map.dspm")), 1));
  const auto same = run({"sparsify", "--map", p("map.dspm"), "--k-diff", "2", "--out", p("same.dspm")});
  ASSERT_EQ(same.code, 0);
  EXPECT_EQ(read_map(p("same.dspm")).a, read_map(p("map.dspm")).a);
}

TEST_F(ToyDir, SteerPlanReportAndAlphaZero) {
  const std::vector<std::string> base = {"steer",       "--map",        p("map.dspm"),     "--input-sae",
                                         p("input_sae.dspa"), "--output-sae", p("output_sae.dspa"),
                                         "--prompt-trace", p("prompt.dspa"), "--stream",   p("stream.dspa"),
                                         "--k-prompt",  "2",            "--k-diff",        "1"};
  auto args = base;
  for (const auto& a : std::vector<std::string>{"--mode", "both", "--out", p("steered.dspa"), "--report",
                                                p("report.jsonl"), "--plan", p("plan.json")})
    args.push_back(a);
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.json()["augment"], nlohmann::json::array({1}));
  EXPECT_EQ(r.json()["ablate"], nlohmann::json::array({0}));
  std::ifstream plan_in(p("plan.json"));
  const auto plan = plan_from_json(nlohmann::json::parse(plan_in));
  EXPECT_EQ(plan.augment, (std::vector<FeatureIndex>{1}));
  const auto steered = read_trace(p("steered.dspa"));
  const auto expected = steer_stream(plan, SaeParams::identity(2), fixtures::toy_stream().hidden);
  EXPECT_EQ(steered.hidden, expected.hidden);
  std::ifstream report(p("report.jsonl"));
  std::size_t lines = 0;
  for (std::string line; std::getline(report, line);) {
    if (!line.empty()) ++lines;
  }
  EXPECT_EQ(lines, fixtures::toy_stream().token_count());

  auto zero = base;
  for (const auto& a : std::vector<std::string>{"--alpha", "0", "--out", p("zero.dspa")}) zero.push_back(a);
  ASSERT_EQ(run(zero).code, 0);
  EXPECT_EQ(io::read_file(p("zero.dspa")), io::read_file(p("stream.dspa")));
}

TEST_F(ToyDir, SteerOnZeroMapIsDegenerate) {
  DiffMap zero = read_map(p("map.dspm"));
  zero.a = CsrMatrix::from_dense(Matrix(2, 2));
  write_map(zero, p("zero.dspm"));
  const auto r = run({"steer", "--map", p("zero.dspm"), "--input-sae", p("input_sae.dspa"), "--output-sae",
                      p("output_sae.dspa"), "--prompt-trace", p("prompt.dspa"), "--stream", p("stream.dspa"),
                      "--k-prompt", "2", "--k-diff", "1", "--out", p("z.dspa")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("degenerate"), std::string::npos);
}

TEST_F(ToyDir, SteerRejectsLayerMismatch) {
  write_trace(fixtures::make_trace("elsewhere", 2, {{1, 1}, {1, 1}}), p("wrong.dspa"));
  const auto r = run({"steer", "--map", p("map.dspm"), "--input-sae", p("input_sae.dspa"), "--output-sae",
                      p("output_sae.dspa"), "--prompt-trace", p("wrong.dspa"), "--stream", p("stream.dspa"),
                      "--k-prompt", "2", "--k-diff", "1", "--out", p("z.dspa")});
  EXPECT_EQ(r.code, 2);
}

TEST_F(ToyDir, AuditAndEvidence) {
  const auto r = run({"audit", "--map", p("map.dspm"), "--set-size", "1", "--compare", p("map.dspm")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = r.json();
  EXPECT_EQ(j["sets"]["augment"], nlohmann::json::array({1}));
  EXPECT_EQ(j["sets"]["ablate"], nlohmann::json::array({0}));
  EXPECT_EQ(j["overlap"]["augment"], 1);
  EXPECT_TRUE(j["warnings"].empty());

  const auto ev = run({"evidence", "--map", p("map.dspm"), "--output-sae", p("output_sae.dspa"), "--traces",
                       p("x1.chosen.dspa"), p("x2.chosen.dspa"), "--feature", "1", "--top-n", "2"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  std::istringstream lines(ev.out);
  std::string header, first;
  std::getline(lines, header);
  EXPECT_EQ(nlohmann::json::parse(header)["schema_version"], 1);
  std::getline(lines, first);
  const auto rec = nlohmann::json::parse(first);
  EXPECT_EQ(rec["trace_index"], 1);
  EXPECT_EQ(rec["token"], 2);
  EXPECT_EQ(rec["activation"], 1.0);
  EXPECT_EQ(run({"evidence", "--map", p("map.dspm"), "--output-sae", p("output_sae.dspa"), "--traces",
                 p("x1.chosen.dspa"), "--feature", "5"})
                .code,
            2);
}

TEST_F(ToyDir, TheoryExitCodes) {
  write("world.json", R"({"d": 4, "seed": 3, "gates": {"bernoulli": 0.4}, "noise": {"scale": 0.05}})");
  const auto ok = run({"theory", "--world", p("world.json"), "--check", "factorization", "--n", "20000"});
  ASSERT_EQ(ok.code, 0) << ok.out << ok.err;
  EXPECT_TRUE(ok.json()["checks"]["factorization"]["passed"].get<bool>());
  EXPECT_EQ(ok.json()["config"]["seed"], 3);

  const auto strict = run({"theory", "--world", p("world.json"), "--check", "factorization", "--n", "100",
                           "--max-error", "1e-9"});
  EXPECT_EQ(strict.code, 3);
  EXPECT_FALSE(strict.json()["passed"].get<bool>());

  const auto topk = run({"theory", "--world", p("world.json"), "--check", "topk", "--trials", "50", "--k", "2"});
  EXPECT_EQ(topk.code, 0) << topk.err;
  EXPECT_EQ(topk.json()["checks"]["topk"]["agree"], 50);

  EXPECT_EQ(run({"theory", "--world", p("world.json"), "--check", "everything"}).code, 2);
  write("bad_world.json", R"({"d": 2, "gates": {"bernoulli": 2}})");
  EXPECT_EQ(run({"theory", "--world", p("bad_world.json")}).code, 2);
}

TEST(CliFlops, JsonAndTextAgree) {
  const auto j = run({"flops"});
  ASSERT_EQ(j.code, 0) << j.err;
  const auto doc = j.json();
  EXPECT_NEAR(doc["ratio"].get<double>(), 4.47, 0.01);
  EXPECT_EQ(doc["dspa"]["per_triple"].get<double>(), 8e13);

  const auto t = run({"flops", "--format", "text"});
  ASSERT_EQ(t.code, 0);
  EXPECT_NE(t.out.find("4.4728"), std::string::npos);
  EXPECT_NE(t.out.find("8.0000e+13"), std::string::npos);

  const auto half = run({"flops", "--step1-len", "384", "--triples", "3", "--sweep", "L2=256,512"});
  ASSERT_EQ(half.code, 0) << half.err;
  EXPECT_EQ(half.json()["rahf"]["per_triple"]["step1"].get<double>(), doc["rahf"]["per_triple"]["step1"].get<double>() / 2);
  EXPECT_EQ(half.json()["sweep"]["L2"].size(), 2u);
  EXPECT_EQ(run({"flops", "--format", "xml"}).code, 2);
  EXPECT_EQ(run({"flops", "--steps-factor", "2"}).code, 2);
}

TEST(CliFixture, CorpusBuildsEndToEnd) {
  TempDir dir;
  const auto f = run({"fixture", "--kind", "corpus", "--out", dir.path().string(), "--d", "6", "--triples", "20"});
  ASSERT_EQ(f.code, 0) << f.err;
  const auto b = run({"build-map", "--manifest", (dir / "manifest.json").string(), "--input-sae",
                      (dir / "input_sae.dspa").string(), "--output-sae", (dir / "output_sae.dspa").string(), "--out",
                      (dir / "m.dspm").string()});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(b.json()["N"], 20);
  EXPECT_EQ(b.json()["d_sae"], 6);
}
