#include "gqe/classic_qe.hpp"

#include <cmath>
#include <iostream>

namespace gqe {

namespace {

constexpr double kZeroSum = 1e-12;

template <typename WeightFn>
ExpansionResult weighted_expand(const VectorD& q, const QueryNeighbors& neighbors,
                                const EmbeddingStore& store, WeightFn weight) {
  if (neighbors.empty()) throw UsageError("query expansion needs a non-empty neighbour list");
  if (static_cast<std::size_t>(q.size()) != store.dim()) {
    throw DataError("dimension mismatch between query and store");
  }
  const double qn = q.norm();
  if (!(qn > 0.0) || !std::isfinite(qn)) throw DataError("query must be a finite non-zero vector");
  const VectorD qhat = q / qn;
  VectorD sum = qhat;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    const double w = weight(qhat, i, neighbors[i]);
    if (w != 0.0) sum += w * store.row_d(neighbors[i].id);
  }
  const double norm = sum.norm();
  if (norm < kZeroSum) {
    std::cerr << "warning: query expansion summed to the zero vector; returning the query\n";
    return {qhat, true};
  }
  return {sum / norm, false};
}

}  // namespace

void ClassicQEConfig::validate() const {
  if (k < 1) throw UsageError("--k must be >= 1");
  if (method == ClassicMethod::kAlphaQe) {
    if (!alpha) throw UsageError("alpha-QE requires --alpha");
    if (!(*alpha >= 0.0) || !std::isfinite(*alpha)) throw UsageError("--alpha must be >= 0");
  } else if (alpha) {
    throw UsageError("--alpha is only valid for alpha-QE");
  }
}

ExpansionResult aqe(const VectorD& q, const QueryNeighbors& neighbors, const EmbeddingStore& store) {
  return weighted_expand(q, neighbors, store, [](const VectorD&, std::size_t, const Neighbor&) { return 1.0; });
}

ExpansionResult aqewd(const VectorD& q, const QueryNeighbors& neighbors, const EmbeddingStore& store) {
  const double k = static_cast<double>(neighbors.size());
  return weighted_expand(q, neighbors, store, [k](const VectorD&, std::size_t i, const Neighbor&) {
    return (k - static_cast<double>(i + 1)) / k;
  });
}

ExpansionResult alpha_qe(const VectorD& q, const QueryNeighbors& neighbors,
                         const EmbeddingStore& store, double alpha) {
  return weighted_expand(q, neighbors, store, [&](const VectorD& qhat, std::size_t, const Neighbor& nb) {
    const VectorD d = store.row_d(nb.id);
    const double cos = std::max(0.0, qhat.dot(d) / d.norm());
    return std::pow(cos, alpha);
  });
}

ExpansionResult classic_expand(const ClassicQEConfig& config, const VectorD& q,
                               const QueryNeighbors& neighbors, const EmbeddingStore& store) {
  config.validate();
  switch (config.method) {
    case ClassicMethod::kAqe:
      return aqe(q, neighbors, store);
    case ClassicMethod::kAqeWd:
      return aqewd(q, neighbors, store);
    case ClassicMethod::kAlphaQe:
      return alpha_qe(q, neighbors, store, *config.alpha);
  }
  throw UsageError("unknown classic QE method");
}

}  // namespace gqe
