#pragma once

#include "gqe/embed_store.hpp"

namespace gqe {

struct Neighbor {
  NodeId id = 0;
  float sim = 0.0f;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Ordered by descending similarity, ties by ascending id.
using QueryNeighbors = std::vector<Neighbor>;

/// Exact K-nearest-neighbour graph over a store (self excluded).
class KnnGraph {
 public:
  KnnGraph() = default;
  KnnGraph(std::size_t k, std::size_t n, std::vector<Neighbor> flat, Digest store_digest);

  std::size_t k() const { return k_; }
  std::size_t size() const { return n_; }
  const Digest& store_digest() const { return store_digest_; }

  /// Full list of node `id` (length k()).
  std::span<const Neighbor> neighbors(std::size_t id) const {
    return {flat_.data() + id * k_, k_};
  }
  /// The first `k` entries of the list of node `id`.
  std::span<const Neighbor> neighbors(std::size_t id, std::size_t k) const;

  /// Digest of k, N and the neighbour payload.
  Digest digest() const;

  friend bool operator==(const KnnGraph&, const KnnGraph&) = default;

 private:
  std::size_t k_ = 0;
  std::size_t n_ = 0;
  std::vector<Neighbor> flat_;
  Digest store_digest_{};
};

KnnGraph build_graph(const EmbeddingStore& store, std::size_t k);

/// Top-k database items for an external unit query (no self exclusion).
QueryNeighbors query_neighbors(const EmbeddingStore& store, std::size_t k, std::span<const double> q);

void save_graph(const KnnGraph& graph, const std::string& path);

/// Loads a cached graph and checks it against `store` and the requested k.
KnnGraph load_graph(const std::string& path, const EmbeddingStore& store, std::size_t k);

}  // namespace gqe
