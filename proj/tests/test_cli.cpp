#include "doctest.h"
#include "support.hpp"

#include "gqe/cli.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>

using namespace gqe;
using namespace gqe::testing;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

VectorD vector_of(const json& j) {
  const auto v = j.at("vector").get<std::vector<double>>();
  return VectorD::Map(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Shipped dataset written once per test case.
struct Shipped {
  TempDir dir;
  std::string db = dir.file("db.emb"), q = dir.file("q.emb");
  Shipped() {
    const Run r = run({"synth", "--queries-per-cluster", "5", "--output", db, "--queries-output", q});
    REQUIRE(r.code == 0);
  }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("help exits 0 and lists every flag") {
  const std::map<std::string, std::vector<std::string>> flags{
      {"ingest", {"--input", "--output", "--labels", "--no-normalize"}},
      {"synth", {"--clusters", "--points-per-cluster", "--dim", "--sigma", "--queries-per-cluster", "--output", "--queries-output"}},
      {"build-graph", {"--database", "--k", "--output"}},
      {"expand", {"--method", "--k", "--alpha", "--model", "--fast", "--levels", "--database", "--queries", "--query-id", "--vector", "--output"}},
      {"precompute", {"--model", "--database", "--graph", "--output"}},
      {"dba", {"--model", "--t1", "--t2", "--k-dba", "--database", "--output"}},
      {"train", {"--l", "--k", "--epochs", "--lr", "--margin", "--batch-size", "--weight-decay", "--negatives", "--pool-size", "--pool-refresh", "--config", "--val-queries", "--output"}},
      {"eval", {"--method", "--k", "--queries", "--database", "--dba-store", "--relevance", "--sweep-k", "--naive", "--output"}},
      {"metrics", {"--model", "--query-id", "--database", "--queries", "--output"}},
  };
  CHECK(run({"--help"}).code == 0);
  for (const auto& [sub, names] : flags) {
    CAPTURE(sub);
    const Run r = run({sub, "--help"});
    CHECK(r.code == 0);
    for (const auto& n : names) {
      CAPTURE(n);
      CHECK(r.out.find(n) != std::string::npos);
    }
  }
}

TEST_CASE("usage and data errors map to exit codes") {
  Shipped d;
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  const Run zero = run({"expand", "--method", "aqe", "--k", "0", "--database", d.db, "--queries", d.q, "--query-id", "0"});
  CHECK(zero.code == 1);
  CHECK(zero.err.find("--k") != std::string::npos);
  CHECK(run({"expand", "--method", "alphaqe", "--database", d.db, "--queries", d.q, "--query-id", "0"}).code == 1);
  const Run missing = run({"eval", "--queries", d.dir.file("nope.emb"), "--database", d.db});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("nope.emb") != std::string::npos);
  std::ofstream(d.dir.file("junk.emb")) << "not a store";
  CHECK(run({"eval", "--queries", d.q, "--database", d.dir.file("junk.emb")}).code == 2);
}

TEST_CASE("expansion improves retrieval on the shipped dataset") {
  Shipped d;
  const Run none = run({"eval", "--method", "none", "--queries", d.q, "--database", d.db});
  const Run aqe = run({"eval", "--method", "aqe", "--k", "10", "--queries", d.q, "--database", d.db});
  REQUIRE(none.code == 0);
  REQUIRE(aqe.code == 0);
  const json a = json::parse(none.out), b = json::parse(aqe.out);
  CHECK(a["method"] == "none");
  CHECK(b["params"]["k"] == 10);
  CHECK(b["map"].get<double>() > a["map"].get<double>());
  CHECK(a["per_query"].size() == 80);
}

TEST_CASE("fast and naive GQE expansion agree through the CLI") {
  Shipped d;
  TempDir dir;
  const std::string model = dir.file("m.gqe");
  REQUIRE(run({"train", "--database", d.db, "--k", "4", "--l", "2", "--epochs", "1", "--tuples-per-epoch", "32",
               "--pool-size", "50", "--output", model}).code == 0);
  for (const char* id : {"0", "17", "63"}) {
    const Run fast = run({"expand", "--method", "gqe", "--fast", "--model", model, "--database", d.db, "--queries", d.q, "--query-id", id});
    const Run slow = run({"expand", "--method", "gqe", "--model", model, "--database", d.db, "--queries", d.q, "--query-id", id});
    REQUIRE(fast.code == 0);
    REQUIRE(slow.code == 0);
    CHECK(max_abs_diff(vector_of(json::parse(fast.out)), vector_of(json::parse(slow.out))) < 1e-5);
  }
  REQUIRE(run({"precompute", "--model", model, "--database", d.db, "--output", dir.file("l.lvl")}).code == 0);
  const Run cached = run({"expand", "--method", "gqe", "--fast", "--model", model, "--level-store", dir.file("l.lvl"),
                          "--database", d.db, "--queries", d.q, "--query-id", "5"});
  const Run slow = run({"expand", "--method", "gqe", "--model", model, "--database", d.db, "--queries", d.q, "--query-id", "5"});
  CHECK(max_abs_diff(vector_of(json::parse(cached.out)), vector_of(json::parse(slow.out))) < 1e-5);
  const Run naive_eval = run({"eval", "--method", "gqe", "--naive", "--model", model, "--queries", d.q, "--database", d.db});
  const Run fast_eval = run({"eval", "--method", "gqe", "--model", model, "--queries", d.q, "--database", d.db});
  CHECK(json::parse(naive_eval.out)["map"].get<double>() ==
        doctest::Approx(json::parse(fast_eval.out)["map"].get<double>()).epsilon(1e-9));
}

TEST_CASE("graph cache, staleness and vector queries") {
  Shipped d;
  TempDir dir;
  REQUIRE(run({"build-graph", "--database", d.db, "--k", "10", "--output", dir.file("g.knn")}).code == 0);
  const Run a = run({"expand", "--method", "gqe", "--k", "10", "--graph", dir.file("g.knn"), "--database", d.db,
                     "--vector", "1,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0"});
  REQUIRE(a.code == 0);
  CHECK(std::abs(vector_of(json::parse(a.out)).norm() - 1.0) < 1e-12);
  const Run stale = run({"expand", "--method", "gqe", "--k", "10", "--graph", dir.file("g.knn"), "--database", d.q,
                         "--vector", "1,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0"});
  CHECK(stale.code == 2);
  CHECK(stale.err.find("stale cache") != std::string::npos);
  CHECK(run({"expand", "--method", "aqe", "--database", d.db, "--vector", "1,0"}).code == 2);
}

TEST_CASE("manifests record flags, inputs and outputs") {
  Shipped d;
  TempDir dir;
  const std::string out = dir.file("r.json");
  REQUIRE(run({"--seed", "3", "eval", "--method", "aqewd", "--k", "5", "--queries", d.q, "--database", d.db, "--output", out}).code == 0);
  const json m = json::parse(slurp(out + ".manifest.json"));
  CHECK(m["subcommand"] == "eval");
  CHECK(m["flags"]["--k"] == "5");
  CHECK(m["flags"]["--seed"] == "3");
  CHECK(m["inputs"][d.db] == to_hex(file_digest(d.db)));
  CHECK(m["outputs"][out] == to_hex(file_digest(out)));
  CHECK(m["tool_version"] == kToolVersion);
  CHECK(m.contains("wall_clock_seconds"));
}

TEST_CASE("subcommands are idempotent") {
  TempDir a, b;
  for (const TempDir* dir : {&a, &b}) {
    REQUIRE(run({"--seed", "4", "synth", "--clusters", "3", "--points-per-cluster", "10", "--dim", "8",
                 "--queries-per-cluster", "2", "--output", dir->file("db.emb"), "--queries-output", dir->file("q.emb")}).code == 0);
    REQUIRE(run({"--seed", "4", "train", "--database", dir->file("db.emb"), "--k", "3", "--epochs", "2",
                 "--heads", "2", "--ff-dim", "8", "--pool-size", "20", "--output", dir->file("m.gqe")}).code == 0);
    REQUIRE(run({"eval", "--method", "gqe", "--model", dir->file("m.gqe"), "--queries", dir->file("q.emb"),
                 "--database", dir->file("db.emb"), "--output", dir->file("r.json")}).code == 0);
  }
  for (const char* f : {"db.emb", "q.emb", "db.emb.labels", "m.gqe", "m.gqe.history.jsonl", "r.json"}) {
    CAPTURE(f);
    CHECK(slurp(a.file(f)) == slurp(b.file(f)));
  }
}

TEST_CASE("train flags override the config file") {
  Shipped d;
  TempDir dir;
  std::ofstream(dir.file("train.cfg")) << "epochs=3\ntuples-per-epoch=16\npool-size=40\n";
  const Run r = run({"train", "--config", dir.file("train.cfg"), "--epochs", "1", "--database", d.db, "--k", "3",
                     "--output", dir.file("m.gqe")});
  REQUIRE(r.code == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 1);
  const Run r3 = run({"train", "--config", dir.file("train.cfg"), "--database", d.db, "--k", "3", "--output", dir.file("m3.gqe")});
  CHECK(std::count(r3.out.begin(), r3.out.end(), '\n') == 3);
  std::ofstream(dir.file("bad.cfg")) << "epochz=3\n";
  CHECK(run({"train", "--config", dir.file("bad.cfg"), "--database", d.db, "--output", dir.file("x.gqe")}).code == 1);
}

TEST_CASE("ingest, dba and metrics") {
  TempDir dir;
  std::ofstream(dir.file("x.csv")) << "3,4\n1,0\n0,2\n1,1\n";
  std::ofstream(dir.file("x.labels")) << "0,0\n1,0\n2,1\n3,1\n";
  REQUIRE(run({"ingest", "--input", dir.file("x.csv"), "--labels", dir.file("x.labels"), "--output", dir.file("x.emb")}).code == 0);
  const auto s = load_store(dir.file("x.emb"), true);
  CHECK(s.row_d(0)[0] == doctest::Approx(0.6));
  CHECK(s.labels() == std::vector<std::uint32_t>{0, 0, 1, 1});

  Shipped d;
  REQUIRE(run({"dba", "--database", d.db, "--k", "8", "--t1", "0.1", "--t2", "0.1", "--k-dba", "5", "--output", dir.file("dba.emb")}).code == 0);
  const auto aug = load_store(dir.file("dba.emb"), true);
  CHECK(aug.labels() == load_store(d.db, true).labels());
  const Run ev = run({"eval", "--method", "aqe", "--dba-store", dir.file("dba.emb"), "--queries", d.q, "--database", d.db});
  REQUIRE(ev.code == 0);
  CHECK(json::parse(ev.out)["map"].get<double>() > 0.5);
  CHECK(run({"dba", "--database", d.db, "--k", "8", "--t1", "0.1", "--t2", "0.1", "--k-dba", "9", "--output", dir.file("bad.emb")}).code == 1);

  const Run met = run({"metrics", "--database", d.db, "--queries", d.q, "--query-id", "3", "--k", "8"});
  REQUIRE(met.code == 0);
  const json j = json::parse(met.out);
  CHECK(j["agreement"].get<double>() >= 0.0);
  CHECK(j["agreement"].get<double>() <= 1.0);
  CHECK(j["diversity"].get<double>() >= 0.0);
}

TEST_CASE("K sweeps emit one report per K") {
  Shipped d;
  const Run r = run({"eval", "--method", "aqe", "--sweep-k", "2,4,8", "--queries", d.q, "--database", d.db});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  REQUIRE(j.size() == 3);
  CHECK(j[1]["params"]["k"] == 4);
}

}
