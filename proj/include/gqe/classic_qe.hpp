#pragma once

#include "gqe/knn_graph.hpp"

#include <optional>

namespace gqe {

enum class ClassicMethod { kAqe, kAqeWd, kAlphaQe };

struct ClassicQEConfig {
  ClassicMethod method = ClassicMethod::kAqe;
  std::size_t k = 10;
  std::optional<double> alpha;  // required iff method == kAlphaQe

  void validate() const;
};

struct ExpansionResult {
  VectorD vector;
  // Set when the weighted sum vanished and the query was returned unchanged.
  bool degenerate = false;
};

// normalize(q + sum_i d_i)
ExpansionResult aqe(const VectorD& q, const QueryNeighbors& neighbors, const EmbeddingStore& store);

// normalize(q + sum_i ((K - i) / K) d_i), i 1-indexed by rank.
ExpansionResult aqewd(const VectorD& q, const QueryNeighbors& neighbors, const EmbeddingStore& store);

// normalize(q + sum_i max(0, cos(q, d_i))^alpha d_i)
ExpansionResult alpha_qe(const VectorD& q, const QueryNeighbors& neighbors,
                         const EmbeddingStore& store, double alpha);

ExpansionResult classic_expand(const ClassicQEConfig& config, const VectorD& q,
                               const QueryNeighbors& neighbors, const EmbeddingStore& store);

}  // namespace gqe
