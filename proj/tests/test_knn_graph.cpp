#include "doctest.h"
#include "support.hpp"

#include <fstream>

using namespace gqe;
using namespace gqe::testing;

TEST_SUITE("knn_graph") {

TEST_CASE("duplicate vectors are each other's nearest neighbour") {
  const auto s = store_from_rows({{1, 0}, {0, 1}, {1, 0}});
  const auto g = build_graph(s, 1);
  CHECK(g.neighbors(0)[0] == Neighbor{2, 1.0f});
  CHECK(g.neighbors(2)[0] == Neighbor{0, 1.0f});
}

TEST_CASE("duplicates far apart in id") {
  std::mt19937_64 rng(4);
  Mat rows;
  for (int i = 0; i < 12; ++i) rows.push_back(oracle::to_vec(random_unit(6, rng)));
  rows[9] = rows[5];
  const auto g = build_graph(store_from_rows(rows), 1);
  CHECK(g.neighbors(5)[0].id == 9);
  CHECK(g.neighbors(5)[0].sim == doctest::Approx(1.0));
}

TEST_CASE("k bounds") {
  std::mt19937_64 rng(1);
  const auto s = random_store(5, 3, rng);
  CHECK_THROWS_AS(build_graph(s, 5), UsageError);
  CHECK_THROWS_AS(build_graph(s, 0), UsageError);
  CHECK_NOTHROW(build_graph(s, 4));
  CHECK_THROWS_AS(build_graph(s, 2).neighbors(0, 3), UsageError);
}

TEST_CASE("query neighbours") {
  const auto s = store_from_rows({{1, 0}, {0, 1}, {0.6, 0.8}});
  const auto n = query_neighbors(s, 2, std::vector<double>{0.8, 0.6});
  REQUIRE(n.size() == 2);
  CHECK(n[0].id == 2);
  CHECK(n[0].sim == doctest::Approx(0.96));
  CHECK(n[1].id == 0);
  CHECK(n[1].sim == doctest::Approx(0.8));
  CHECK(query_neighbors(s, 1, std::vector<double>{0.6, 0.8})[0].id == 2);
  CHECK_THROWS_AS(query_neighbors(s, 1, std::vector<double>{1, 0, 0}), DataError);
}

TEST_CASE("orthogonal query falls back to id order") {
  const auto s = store_from_rows({{0, 1, 0}, {0, 0, 1}, {0, 1, 1}});
  const auto n = query_neighbors(s, 3, std::vector<double>{1, 0, 0});
  CHECK(n[0].id == 0);
  CHECK(n[1].id == 1);
  CHECK(n[2].id == 2);
  for (const auto& x : n) CHECK(x.sim == 0.0f);
}

TEST_CASE("property: graph matches brute force and list invariants hold") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 15; ++trial) {
    const std::size_t n = 2 + rng() % 199, f = 2 + rng() % 12;
    const std::size_t k = 1 + rng() % std::min<std::size_t>(n - 1, 15);
    const auto s = random_store(n, f, rng);
    const auto g = build_graph(s, k);
    for (std::size_t i = 0; i < n; ++i) {
      const auto expect = oracle::knn(s, oracle::row_of(s, i), k, static_cast<long long>(i));
      const auto got = g.neighbors(i);
      REQUIRE(got.size() == k);
      for (std::size_t j = 0; j < k; ++j) {
        CHECK(got[j].id == expect[j]);
        CHECK(got[j].id != i);
        if (j > 0) CHECK(got[j - 1].sim >= got[j].sim);
      }
    }
  }
}

TEST_CASE("property: cosine order equals Euclidean order on unit vectors") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = random_store(60, 5, rng);
    const VectorD q = random_unit(5, rng);
    const auto by_cos = query_neighbors(s, 60, std::span<const double>(q.data(), 5));
    std::vector<std::pair<double, NodeId>> by_dist;
    for (std::size_t j = 0; j < s.size(); ++j) by_dist.push_back({(q - s.row_d(j)).squaredNorm(), static_cast<NodeId>(j)});
    std::sort(by_dist.begin(), by_dist.end());
    for (std::size_t j = 0; j < s.size(); ++j) CHECK(by_cos[j].id == by_dist[j].second);
  }
}

TEST_CASE("deterministic across thread counts") {
  std::mt19937_64 rng(2);
  const auto s = random_store(150, 8, rng);
  set_thread_count(1);
  const auto a = build_graph(s, 7);
  set_thread_count(4);
  const auto b = build_graph(s, 7);
  set_thread_count(0);
  CHECK(a == b);
  CHECK(a.digest() == b.digest());
}

TEST_CASE("cache round trip and staleness") {
  TempDir dir;
  std::mt19937_64 rng(5);
  const auto s = random_store(40, 6, rng);
  const auto g = build_graph(s, 4);
  save_graph(g, dir.file("g.knn"));
  CHECK(load_graph(dir.file("g.knn"), s, 4) == g);
  CHECK_THROWS_WITH_AS(load_graph(dir.file("g.knn"), s, 5), doctest::Contains("stale cache"), DataError);
  const auto other = random_store(40, 6, rng);
  CHECK_THROWS_WITH_AS(load_graph(dir.file("g.knn"), other, 4), doctest::Contains("stale cache"), DataError);

  std::ifstream in(dir.file("g.knn"), std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  std::ofstream(dir.file("cut.knn"), std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(load_graph(dir.file("cut.knn"), s, 4), DataError);
  std::ofstream(dir.file("magic.knn"), std::ios::binary) << "XXXX" << bytes.substr(4);
  CHECK_THROWS_AS(load_graph(dir.file("magic.knn"), s, 4), DataError);
}

}
