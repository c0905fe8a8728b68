#pragma once

#include "gqe/hierarchical_qe.hpp"

#include <functional>
#include <iosfwd>
#include <optional>

namespace gqe {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 1.5e-6;
  double margin = 0.71;
  std::size_t negatives_per_positive = 5;
  std::size_t pool_size = 400;
  std::size_t pool_refresh_interval = 20;  // iterations
  std::uint64_t seed = 0;
  std::size_t tuples_per_epoch = 0;  // 0 = every eligible labelled item once

  // Adam constants.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

/// Reads `key=value` lines ('#' comments allowed) into `config`.
void read_train_config(std::istream& in, TrainConfig& config);

struct TrainingTuple {
  NodeId query = 0;
  NodeId positive = 0;
  std::vector<NodeId> negatives;
};

/// Positive pair: |a - b|^2. Negative pair: max(0, margin - |a - b|)^2.
double contrastive_loss(const VectorD& qe, const VectorD& other, bool is_positive, double margin);

/// Gradient of contrastive_loss with respect to `qe`.
VectorD contrastive_loss_grad(const VectorD& qe, const VectorD& other, bool is_positive, double margin);

/// Expansion of a database item used as a training query: its own row with its
/// graph neighbours as the query neighbour list.
ExpansionTree expand_database_item(const GQEModel& model, NodeId id, const KnnGraph& graph,
                                   const EmbeddingStore& store, bool keep_cache);

/// Ranks `pool` by similarity to `expanded` and keeps the first `count`
/// items whose label differs from `query_label`.
std::vector<NodeId> select_hard_negatives(const VectorD& expanded, std::uint32_t query_label,
                                          std::span<const NodeId> pool, std::size_t count,
                                          const EmbeddingStore& store);

std::vector<NodeId> mine_negatives(const GQEModel& model, NodeId query, std::span<const NodeId> pool,
                                   std::size_t count, const EmbeddingStore& store, const KnnGraph& graph);

/// Mean of the 1 + |negatives| contrastive terms of one tuple.
double tuple_loss(const GQEModel& model, const TrainingTuple& tuple, const EmbeddingStore& store,
                  const KnnGraph& graph, double margin);

struct LossAndGradients {
  double loss = 0.0;
  std::vector<AggregatorParams> grads;  // one per level, shaped like the model
};

/// Exact gradients of tuple_loss with respect to every parameter of every level.
LossAndGradients loss_gradients(const GQEModel& model, const TrainingTuple& tuple,
                                const EmbeddingStore& store, const KnnGraph& graph, double margin);

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> validation_map;
};

struct TrainResult {
  GQEModel model;
  std::vector<EpochRecord> history;
  std::optional<std::size_t> best_epoch;
};

/// Returns the validation mAP of a candidate model.
using Validator = std::function<double(const GQEModel&)>;

TrainResult train(const GQEModel& initial, const EmbeddingStore& store, const KnnGraph& graph,
                  const TrainConfig& config, const Validator& validator = {});

/// One JSON object per line: {"epoch":..,"mean_loss":..[,"validation_map":..]}.
void write_history_jsonl(std::ostream& out, const std::vector<EpochRecord>& history);

}  // namespace gqe
