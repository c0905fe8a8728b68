#include "gqe/knn_graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace gqe {

namespace {

struct Scored {
  double sim;
  NodeId id;
};

bool ranks_before(const Scored& a, const Scored& b) {
  return a.sim > b.sim || (a.sim == b.sim && a.id < b.id);
}

std::vector<Neighbor> top_k(std::vector<Scored>& scored, std::size_t k) {
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    ranks_before);
  std::vector<Neighbor> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = {scored[i].id, static_cast<float>(scored[i].sim)};
  return out;
}

}  // namespace

KnnGraph::KnnGraph(std::size_t k, std::size_t n, std::vector<Neighbor> flat, Digest store_digest)
    : k_(k), n_(n), flat_(std::move(flat)), store_digest_(store_digest) {
  if (flat_.size() != k_ * n_) throw DataError("graph payload size does not match k*N");
}

std::span<const Neighbor> KnnGraph::neighbors(std::size_t id, std::size_t k) const {
  if (k > k_) {
    throw UsageError("requested " + std::to_string(k) + " neighbours but graph has k=" +
                     std::to_string(k_));
  }
  return neighbors(id).first(k);
}

Digest KnnGraph::digest() const {
  Hasher h;
  h.update("KNN1");
  h.update_pod(static_cast<std::uint64_t>(k_));
  h.update_pod(static_cast<std::uint64_t>(n_));
  h.update(store_digest_.data(), store_digest_.size());
  for (const auto& nb : flat_) {
    h.update_pod(nb.id);
    h.update_pod(nb.sim);
  }
  return h.finish();
}

KnnGraph build_graph(const EmbeddingStore& store, std::size_t k) {
  const std::size_t n = store.size();
  if (k < 1 || k >= n) {
    throw UsageError("graph k must satisfy 1 <= k < N (k=" + std::to_string(k) +
                     ", N=" + std::to_string(n) + ")");
  }
  std::vector<Neighbor> flat(n * k);
  parallel_for(n, [&](std::size_t i) {
    std::vector<Scored> scored;
    scored.reserve(n - 1);
    const auto row = store.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) scored.push_back({dot(row, store.row(j)), static_cast<NodeId>(j)});
    }
    auto best = top_k(scored, k);
    std::copy(best.begin(), best.end(), flat.begin() + static_cast<std::ptrdiff_t>(i * k));
  });
  return KnnGraph(k, n, std::move(flat), store.digest());
}

QueryNeighbors query_neighbors(const EmbeddingStore& store, std::size_t k, std::span<const double> q) {
  if (q.size() != store.dim()) {
    throw DataError("dimension mismatch: query has " + std::to_string(q.size()) +
                    " components, store has " + std::to_string(store.dim()));
  }
  if (k < 1 || k > store.size()) throw UsageError("query k must satisfy 1 <= k <= N");
  std::vector<Scored> scored(store.size());
  for (std::size_t j = 0; j < store.size(); ++j) scored[j] = {dot(q, store.row(j)), static_cast<NodeId>(j)};
  return top_k(scored, k);
}

void save_graph(const KnnGraph& graph, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write graph cache " + path);
  out.write("KNN1", 4);
  binio::write_u32(out, static_cast<std::uint32_t>(graph.k()));
  binio::write_u32(out, static_cast<std::uint32_t>(graph.size()));
  binio::write_bytes(out, graph.store_digest().data(), graph.store_digest().size());
  for (std::size_t i = 0; i < graph.size(); ++i) {
    for (const auto& nb : graph.neighbors(i)) {
      binio::write_u32(out, nb.id);
      binio::write_f32(out, nb.sim);
    }
  }
  out.close();
  if (!out) throw IoError("failed writing " + path);
}

KnnGraph load_graph(const std::string& path, const EmbeddingStore& store, std::size_t k) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open graph cache " + path);
  binio::expect_magic(in, "KNN1", path);
  const std::uint32_t file_k = binio::read_u32(in, path);
  const std::uint32_t n = binio::read_u32(in, path);
  Digest digest{};
  binio::read_bytes(in, digest.data(), digest.size(), path);
  if (digest != store.digest() || n != store.size()) {
    throw DataError("stale cache: " + path + " was built for a different store");
  }
  if (file_k != k) {
    throw DataError("stale cache: " + path + " has k=" + std::to_string(file_k) + ", requested k=" +
                    std::to_string(k));
  }
  if (file_k == 0 || file_k >= n) throw DataError("malformed graph cache " + path);
  std::vector<Neighbor> flat(std::size_t{n} * file_k);
  for (auto& nb : flat) {
    nb.id = binio::read_u32(in, path);
    nb.sim = binio::read_f32(in, path);
    if (nb.id >= n) throw DataError("malformed graph cache " + path + ": neighbour id out of range");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("malformed graph cache " + path + ": trailing bytes");
  }
  return KnnGraph(file_k, n, std::move(flat), digest);
}

}  // namespace gqe
