#include "doctest.h"
#include "support.hpp"

using namespace gqe;
using namespace gqe::testing;

namespace {

QueryNeighbors ranked(std::initializer_list<NodeId> ids) {
  QueryNeighbors out;
  for (NodeId id : ids) out.push_back({id, 0.0f});
  return out;
}

}  // namespace

TEST_SUITE("classic_qe") {

TEST_CASE("AQE examples") {
  const auto s = store_from_rows({{1, 0}, {0, 1}, {-1, 0}});
  const VectorD q = vec({1, 0});
  CHECK(max_abs_diff(aqe(q, ranked({0, 0}), s).vector, q) < 1e-12);
  const VectorD two = aqe(q, ranked({1, 0}), s).vector;
  CHECK(two[0] == doctest::Approx(2 / std::sqrt(5.0)).epsilon(1e-12));
  CHECK(two[1] == doctest::Approx(1 / std::sqrt(5.0)).epsilon(1e-12));
  const auto degenerate = aqe(q, ranked({2}), s);
  CHECK(degenerate.degenerate);
  CHECK(max_abs_diff(degenerate.vector, q) == 0.0);
  CHECK_THROWS_AS(aqe(q, QueryNeighbors{}, s), UsageError);
}

TEST_CASE("AQEwD examples") {
  const auto s = store_from_rows({{1, 0}, {0, 1}, {-1, 0}});
  const VectorD q = vec({1, 0});
  CHECK(max_abs_diff(aqewd(q, ranked({1}), s).vector, q) < 1e-12);
  const VectorD out = aqewd(q, ranked({1, 2}), s).vector;
  CHECK(out[0] == doctest::Approx(0.894427191));
  CHECK(out[1] == doctest::Approx(0.447213595));
  CHECK(max_abs_diff(aqewd(q, ranked({0, 0, 0}), s).vector, q) < 1e-12);
}

TEST_CASE("alpha-QE examples") {
  const auto s = store_from_rows({{1, 0}, {0, 1}, {0.6, 0.8}, {-1, 0}});
  const VectorD q = vec({1, 0});
  CHECK(max_abs_diff(alpha_qe(q, ranked({1}), s, 3.0).vector, q) < 1e-12);
  const VectorD out = alpha_qe(q, ranked({2}), s, 2.0).vector;
  const double n = std::hypot(1.216, 0.288);
  CHECK(out[0] == doctest::Approx(1.216 / n).epsilon(1e-7));
  CHECK(out[1] == doctest::Approx(0.288 / n).epsilon(1e-7));
  // Negative similarity is clamped, so the antipodal neighbour adds nothing.
  CHECK(max_abs_diff(alpha_qe(q, ranked({3}), s, 0.5).vector, q) < 1e-12);
  ClassicQEConfig cfg{ClassicMethod::kAlphaQe, 3, std::nullopt};
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  ClassicQEConfig plain{ClassicMethod::kAqe, 3, 1.0};
  CHECK_THROWS_AS(plain.validate(), UsageError);
}

TEST_CASE("properties over random instances") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t f = 2 + rng() % 10, n = 20 + rng() % 30, k = 1 + rng() % 10;
    const auto s = random_store(n, f, rng);
    const VectorD q = random_unit(f, rng);
    const auto nb = query_neighbors(s, k, std::span<const double>(q.data(), f));
    const double scale = 0.1 + 10.0 * uniform01(rng);
    const double alpha = 4.0 * uniform01(rng);

    const VectorD a = aqe(q, nb, s).vector, w = aqewd(q, nb, s).vector, x = alpha_qe(q, nb, s, alpha).vector;
    CHECK(std::abs(a.norm() - 1.0) < 1e-12);
    CHECK(std::abs(w.norm() - 1.0) < 1e-12);
    CHECK(std::abs(x.norm() - 1.0) < 1e-12);

    CHECK(max_abs_diff(aqe(q * scale, nb, s).vector, a) < 1e-12);
    CHECK(max_abs_diff(aqewd(q * scale, nb, s).vector, w) < 1e-12);
    CHECK(max_abs_diff(alpha_qe(q * scale, nb, s, alpha).vector, x) < 1e-12);

    CHECK(cosine(alpha_qe(q, nb, s, 0.0).vector, a) > 1 - 1e-9);

    // The last-ranked neighbour has weight zero in AQEwD, so swapping it for
    // any other item leaves the output unchanged.
    QueryNeighbors swapped = nb;
    swapped.back().id = static_cast<NodeId>(rng() % n);
    CHECK(max_abs_diff(aqewd(q, swapped, s).vector, w) < 1e-12);
  }
}

}
