#include "gqe/retrieval_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gqe {

std::vector<NodeId> rank_database(const EmbeddingStore& database, const VectorD& query) {
  const std::span<const double> q(query.data(), static_cast<std::size_t>(query.size()));
  std::vector<std::pair<double, NodeId>> scored(database.size());
  for (std::size_t j = 0; j < database.size(); ++j) scored[j] = {dot(q, database.row(j)), static_cast<NodeId>(j)};
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  std::vector<NodeId> out(scored.size());
  for (std::size_t j = 0; j < scored.size(); ++j) out[j] = scored[j].second;
  return out;
}

double average_precision(std::span<const NodeId> ranking, const std::set<NodeId>& relevant) {
  if (relevant.empty()) throw DataError("average precision needs a non-empty relevant set");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < ranking.size(); ++r) {
    if (relevant.count(ranking[r])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(relevant.size());
}

QEMethod parse_method(const std::string& name) {
  if (name == "none") return QEMethod::kNone;
  if (name == "aqe") return QEMethod::kAqe;
  if (name == "aqewd") return QEMethod::kAqeWd;
  if (name == "alphaqe") return QEMethod::kAlphaQe;
  if (name == "gqe") return QEMethod::kGqe;
  throw UsageError("unknown method '" + name + "' (expected none, aqe, aqewd, alphaqe or gqe)");
}

std::string method_name(QEMethod method) {
  switch (method) {
    case QEMethod::kNone: return "none";
    case QEMethod::kAqe: return "aqe";
    case QEMethod::kAqeWd: return "aqewd";
    case QEMethod::kAlphaQe: return "alphaqe";
    case QEMethod::kGqe: return "gqe";
  }
  return "unknown";
}

nlohmann::json MethodSpec::params() const {
  nlohmann::json j = nlohmann::json::object();
  switch (method) {
    case QEMethod::kNone:
      break;
    case QEMethod::kAlphaQe:
      j["alpha"] = alpha.value_or(0.0);
      [[fallthrough]];
    case QEMethod::kAqe:
    case QEMethod::kAqeWd:
      j["k"] = k;
      break;
    case QEMethod::kGqe:
      if (model) {
        j["k"] = model->k();
        j["levels"] = model->num_levels();
        j["model_digest"] = to_hex(model->digest());
      }
      j["fast"] = fast;
      break;
  }
  return j;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json pq = nlohmann::json::array();
  for (const auto& [id, ap] : per_query) pq.push_back({{"id", id}, {"ap", ap}});
  return {{"method", method}, {"params", params}, {"map", map}, {"per_query", pq}};
}

std::vector<std::set<NodeId>> load_relevance(const std::string& path, std::size_t num_queries) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open relevance file " + path);
  std::vector<std::set<NodeId>> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::set<NodeId> ids;
    long long id = 0;
    while (ls >> id) {
      if (id < 0) throw DataError(path + ": negative id on line " + std::to_string(out.size() + 1));
      ids.insert(static_cast<NodeId>(id));
    }
    if (!ls.eof()) throw DataError(path + ": cannot parse line " + std::to_string(out.size() + 1));
    out.push_back(std::move(ids));
  }
  if (out.size() != num_queries) {
    throw DataError(path + ": " + std::to_string(out.size()) + " lines for " + std::to_string(num_queries) +
                    " queries");
  }
  return out;
}

VectorD expand_query(const MethodSpec& spec, const VectorD& q, const EmbeddingStore& database,
                     const KnnGraph* graph, const LevelStore* levels) {
  const std::span<const double> qs(q.data(), static_cast<std::size_t>(q.size()));
  switch (spec.method) {
    case QEMethod::kNone:
      return q;
    case QEMethod::kAqe:
    case QEMethod::kAqeWd:
    case QEMethod::kAlphaQe: {
      ClassicQEConfig cfg;
      cfg.method = spec.method == QEMethod::kAqe     ? ClassicMethod::kAqe
                   : spec.method == QEMethod::kAqeWd ? ClassicMethod::kAqeWd
                                                     : ClassicMethod::kAlphaQe;
      cfg.k = spec.k;
      cfg.alpha = spec.alpha;
      cfg.validate();
      return classic_expand(cfg, q, query_neighbors(database, spec.k, qs), database).vector;
    }
    case QEMethod::kGqe:
      if (!spec.model || !graph) throw UsageError("GQE expansion needs a model and a graph");
      if (spec.fast && levels) return expand_fast(*spec.model, q, *graph, database, *levels);
      return expand_naive(*spec.model, q, *graph, database).vector;
  }
  throw UsageError("unknown method");
}

EvalReport evaluate(const MethodSpec& spec, const EmbeddingStore& queries, const EmbeddingStore& database,
                    const KnnGraph* graph, const std::vector<std::set<NodeId>>* relevance) {
  if (queries.dim() != database.dim()) {
    throw DataError("inconsistent dims: queries F=" + std::to_string(queries.dim()) + ", database F=" +
                    std::to_string(database.dim()));
  }
  if (!relevance && (!queries.has_labels() || !database.has_labels())) {
    throw DataError("evaluation needs labels on queries and database (or a relevance file)");
  }
  if (relevance && relevance->size() != queries.size()) throw DataError("relevance list count != query count");

  std::optional<KnnGraph> own_graph;
  std::optional<LevelStore> levels;
  if (spec.method == QEMethod::kGqe) {
    if (!spec.model) throw UsageError("method gqe needs --model");
    if (!graph) {
      own_graph = build_graph(database, spec.model->k());
      graph = &*own_graph;
    }
    if (spec.fast) levels = precompute_levels(*spec.model, *graph, database);
  }

  std::vector<std::set<NodeId>> label_relevance;
  if (!relevance) {
    std::map<std::uint32_t, std::set<NodeId>> by_label;
    for (std::size_t j = 0; j < database.size(); ++j) by_label[database.label(j)].insert(static_cast<NodeId>(j));
    label_relevance.resize(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
      auto it = by_label.find(queries.label(i));
      if (it == by_label.end()) {
        throw DataError("query " + std::to_string(i) + " has label " + std::to_string(queries.label(i)) +
                        " with no database match");
      }
      label_relevance[i] = it->second;
    }
    relevance = &label_relevance;
  }

  EvalReport report;
  report.method = method_name(spec.method);
  report.params = spec.params();
  report.per_query.resize(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    const VectorD qe = expand_query(spec, queries.row_d(i), database, graph, levels ? &*levels : nullptr);
    const auto ranking = rank_database(database, qe);
    report.per_query[i] = {i, average_precision(ranking, (*relevance)[i])};
  });
  double sum = 0.0;
  for (const auto& [id, ap] : report.per_query) sum += ap;
  report.map = sum / static_cast<double>(report.per_query.size());
  return report;
}

std::vector<EvalReport> evaluate_sweep(MethodSpec spec, const std::vector<std::size_t>& ks,
                                       const EmbeddingStore& queries, const EmbeddingStore& database) {
  if (spec.method == QEMethod::kGqe) throw UsageError("K sweeps apply to the classic methods");
  std::vector<EvalReport> out;
  for (std::size_t k : ks) {
    spec.k = k;
    out.push_back(evaluate(spec, queries, database));
  }
  return out;
}

double agreement(const WeightAttribution& attr, const std::vector<std::uint32_t>& labels,
                 std::uint32_t query_label) {
  double same = 0.0, total = 0.0;
  for (const auto& [id, w] : attr.clamped()) {
    total += w;
    if (labels.at(id) == query_label) same += w;
  }
  if (!(total > 0.0)) throw DataError("agreement undefined: zero total weight");
  return same / total;
}

double diversity(const WeightAttribution& attr, const std::vector<std::uint32_t>& labels,
                 std::uint32_t query_label) {
  std::vector<double> same;
  for (const auto& [id, w] : attr.clamped()) {
    if (labels.at(id) == query_label && w > 0.0) same.push_back(w);
  }
  const double total = std::accumulate(same.begin(), same.end(), 0.0);
  if (same.empty() || !(total > 0.0)) throw DataError("diversity undefined: no positive same-label weight");
  double h = 0.0;
  for (double w : same) {
    const double p = w / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace gqe
