#pragma once

#include "gqe/aggregator.hpp"
#include "gqe/knn_graph.hpp"

#include <map>
#include <unordered_map>

namespace gqe {

/// L aggregation levels; every application of level i shares params[i - 1].
struct GQEModel {
  std::vector<AggregatorParams> levels;

  std::size_t num_levels() const { return levels.size(); }
  std::size_t k() const { return levels.front().k; }
  std::size_t dim() const { return levels.front().dim(); }

  static GQEModel random(const EncoderConfig& encoder, std::size_t k, std::size_t num_levels,
                         double scale, std::mt19937_64& rng);
  /// IDENTITY encoder, zero positional rows, no temperature.
  static GQEModel identity(std::size_t dim, std::size_t k, std::size_t num_levels);

  void validate() const;
  void quantize();
  /// Hash of the serialised parameters.
  Digest digest() const;
};

void save_model(const GQEModel& model, const std::string& path);
GQEModel load_model(const std::string& path);

/// Node of the local graph: a database id, or kQueryNode for the query.
using NodeRef = std::int64_t;
inline constexpr NodeRef kQueryNode = -1;

/// sets[i] = S^i, sorted ascending (so kQueryNode first). sets[L] = {q}.
struct NeighborhoodSets {
  std::vector<std::vector<NodeRef>> sets;

  const std::vector<NodeRef>& at(std::size_t level) const { return sets.at(level); }
};

NeighborhoodSets build_sets(const QueryNeighbors& query_nbrs, const KnnGraph& graph,
                            std::size_t num_levels, std::size_t k);
NeighborhoodSets build_sets(const VectorD& q, const KnnGraph& graph, const EmbeddingStore& store,
                            std::size_t num_levels, std::size_t k);

/// q^L = query_weight * q + sum_i weights[i] * d_i (signed, exact).
struct WeightAttribution {
  double query_weight = 0.0;
  std::map<NodeId, double> weights;
  double final_norm = 0.0;  // norm of the last weighted sum before normalisation

  /// Database weights with negative entries set to 0, as consumed by the metrics.
  std::map<NodeId, double> clamped() const;
};

struct ExpandStats {
  std::size_t aggregate_calls = 0;
};

/// Fully unfolded hierarchical computation for one query.
struct ExpansionTree {
  struct Application {
    NodeRef node = 0;
    std::vector<NodeRef> neighbors;
    AggregationTrace trace;
    AggregateCache cache;  // filled only when the tree is built for training
  };

  NeighborhoodSets sets;
  std::vector<std::unordered_map<NodeRef, std::size_t>> index;  // level -> node -> row
  std::vector<RowMatrixD> embeddings;                            // level -> rows aligned with sets
  std::vector<std::vector<Application>> applications;            // [level], empty at level 0

  std::size_t num_levels() const { return sets.sets.size() - 1; }
  VectorD output() const { return embeddings.back().row(0).transpose(); }
};

/// Runs the naive recursion over S^0..S^L. `query_nbrs` are the ranked
/// neighbours of the query; database nodes use the first K graph entries.
ExpansionTree expand_tree(const GQEModel& model, const VectorD& q, const QueryNeighbors& query_nbrs,
                          const KnnGraph& graph, const EmbeddingStore& store, bool keep_cache,
                          ExpandStats* stats = nullptr);

/// Per-level parameter gradients for dL/d(q^L) = grad_output.
std::vector<AggregatorParams> backward_tree(const GQEModel& model, const ExpansionTree& tree,
                                            const VectorD& grad_output);

WeightAttribution attribute_weights(const ExpansionTree& tree);

struct Expansion {
  VectorD vector;
  WeightAttribution attribution;
};

Expansion expand_naive(const GQEModel& model, const VectorD& q, const KnnGraph& graph,
                       const EmbeddingStore& store, ExpandStats* stats = nullptr);

/// v^1..v^(L-1) for every database item.
struct LevelStore {
  std::vector<RowMatrixD> levels;  // levels[i - 1] holds v^i, N x F
  Digest digest{};

  const RowMatrixD& level(std::size_t i) const { return levels.at(i - 1); }
};

Digest level_digest(const GQEModel& model, const KnnGraph& graph, const EmbeddingStore& store);

LevelStore precompute_levels(const GQEModel& model, const KnnGraph& graph, const EmbeddingStore& store);

/// Exactly L aggregate calls, reading neighbour embeddings from `levels`.
VectorD expand_fast(const GQEModel& model, const VectorD& q, const KnnGraph& graph,
                    const EmbeddingStore& store, const LevelStore& levels, ExpandStats* stats = nullptr);

void save_level_store(const LevelStore& levels, const std::string& path);
LevelStore load_level_store(const std::string& path);

/// Database-side augmentation: every item replaced by its expansion using a
/// tempered softmax at each level (temperatures[i] for level i + 1, the last
/// value repeating) and k_dba neighbours from the original graph.
EmbeddingStore run_dba(const GQEModel& model, const KnnGraph& graph, const EmbeddingStore& store,
                       const std::vector<double>& temperatures, std::size_t k_dba);

inline EmbeddingStore run_dba(const GQEModel& model, const KnnGraph& graph, const EmbeddingStore& store,
                              double t1, double t2, std::size_t k_dba) {
  return run_dba(model, graph, store, std::vector<double>{t1, t2}, k_dba);
}

/// Default K = 44, capped by the database size.
std::size_t default_k(std::size_t database_size);

}  // namespace gqe
