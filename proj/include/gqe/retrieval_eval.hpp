#pragma once

#include "gqe/classic_qe.hpp"
#include "gqe/hierarchical_qe.hpp"

#include "json.hpp"

#include <optional>
#include <set>

namespace gqe {

/// Database ids by descending similarity to `query` (ties by ascending id).
std::vector<NodeId> rank_database(const EmbeddingStore& database, const VectorD& query);

/// (1/|relevant|) * sum of precision@r over ranks r holding a relevant item.
double average_precision(std::span<const NodeId> ranking, const std::set<NodeId>& relevant);

enum class QEMethod { kNone, kAqe, kAqeWd, kAlphaQe, kGqe };

QEMethod parse_method(const std::string& name);
std::string method_name(QEMethod method);

struct MethodSpec {
  QEMethod method = QEMethod::kNone;
  std::size_t k = 10;
  std::optional<double> alpha;
  const GQEModel* model = nullptr;  // required for kGqe; K comes from the model
  bool fast = true;                 // GQE through precomputed levels

  nlohmann::json params() const;
};

struct EvalReport {
  std::string method;
  nlohmann::json params;
  double map = 0.0;
  std::vector<std::pair<std::size_t, double>> per_query;  // (query id, AP), ascending ids

  nlohmann::json to_json() const;
};

/// Relevance file: line i lists the relevant database ids of query i.
std::vector<std::set<NodeId>> load_relevance(const std::string& path, std::size_t num_queries);

/// Expands every query with `spec`, ranks the whole database and reports mAP.
/// Relevance is label equality unless `relevance` is supplied. A graph over
/// `database` is built when `graph` is null and the method needs one.
EvalReport evaluate(const MethodSpec& spec, const EmbeddingStore& queries, const EmbeddingStore& database,
                    const KnnGraph* graph = nullptr,
                    const std::vector<std::set<NodeId>>* relevance = nullptr);

/// One report per K for the classic methods.
std::vector<EvalReport> evaluate_sweep(MethodSpec spec, const std::vector<std::size_t>& ks,
                                       const EmbeddingStore& queries, const EmbeddingStore& database);

/// Expanded query for one method (shared by evaluate and the CLI).
VectorD expand_query(const MethodSpec& spec, const VectorD& q, const EmbeddingStore& database,
                     const KnnGraph* graph, const LevelStore* levels);

/// Share of clamped database weight on items labelled like the query.
double agreement(const WeightAttribution& attr, const std::vector<std::uint32_t>& labels,
                 std::uint32_t query_label);

/// Natural-log entropy of the normalised same-label weights.
double diversity(const WeightAttribution& attr, const std::vector<std::uint32_t>& labels,
                 std::uint32_t query_label);

}  // namespace gqe
