#include "gqe/trainer.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <unordered_map>

namespace gqe {

namespace {

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

// First `count` entries of a seeded Fisher-Yates shuffle of [0, n).
std::vector<NodeId> sample_without_replacement(std::mt19937_64& rng, std::size_t n, std::size_t count) {
  std::vector<NodeId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<NodeId>(i);
  count = std::min(count, n);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_index(rng, n - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(count);
  return ids;
}

VectorD contrastive_tuple_grad(const VectorD& qe, const TrainingTuple& t, const EmbeddingStore& store,
                               double margin, double& loss) {
  const double terms = static_cast<double>(1 + t.negatives.size());
  const VectorD p = store.row_d(t.positive);
  loss = contrastive_loss(qe, p, true, margin);
  VectorD grad = contrastive_loss_grad(qe, p, true, margin);
  for (NodeId n : t.negatives) {
    const VectorD d = store.row_d(n);
    loss += contrastive_loss(qe, d, false, margin);
    grad += contrastive_loss_grad(qe, d, false, margin);
  }
  loss /= terms;
  return grad / terms;
}

void check_tuple(const TrainingTuple& t, const EmbeddingStore& store) {
  if (!store.has_labels()) throw DataError("training needs a labelled store");
  const auto lq = store.label(t.query);
  if (store.label(t.positive) != lq) throw DataError("tuple positive does not share the query label");
  for (NodeId n : t.negatives) {
    if (store.label(n) == lq) throw DataError("tuple negative shares the query label");
  }
}

void adamw_step(GQEModel& model, const std::vector<AggregatorParams>& grads, std::vector<AggregatorParams>& m,
                std::vector<AggregatorParams>& v, std::size_t step, const TrainConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t l = 0; l < model.levels.size(); ++l) {
    std::vector<RowMatrixD*> params, ms, vs;
    std::vector<const RowMatrixD*> gs;
    model.levels[l].for_each_tensor([&](const std::string&, RowMatrixD& t) { params.push_back(&t); });
    grads[l].for_each_tensor([&](const std::string&, const RowMatrixD& t) { gs.push_back(&t); });
    m[l].for_each_tensor([&](const std::string&, RowMatrixD& t) { ms.push_back(&t); });
    v[l].for_each_tensor([&](const std::string&, RowMatrixD& t) { vs.push_back(&t); });
    for (std::size_t t = 0; t < params.size(); ++t) {
      auto p = params[t]->array();
      const auto g = gs[t]->array();
      auto mt = ms[t]->array();
      auto vt = vs[t]->array();
      mt = cfg.beta1 * mt + (1.0 - cfg.beta1) * g;
      vt = cfg.beta2 * vt + (1.0 - cfg.beta2) * g.square();
      p -= cfg.learning_rate * ((mt / bc1) / ((vt / bc2).sqrt() + cfg.epsilon) + cfg.weight_decay * p);
    }
  }
  model.quantize();
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || negatives_per_positive < 1 || pool_size < 1 || pool_refresh_interval < 1) {
    throw UsageError("epochs, batch size, negatives, pool size and pool refresh interval must be positive");
  }
  if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) {
    throw UsageError("learning rate and weight decay must be non-negative");
  }
  if (!(margin > 0.0 && margin < 2.0)) throw UsageError("margin must lie in (0, 2)");
}

void read_train_config(std::istream& in, TrainConfig& c) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "epochs") c.epochs = std::stoul(value);
      else if (key == "batch-size") c.batch_size = std::stoul(value);
      else if (key == "lr") c.learning_rate = std::stod(value);
      else if (key == "weight-decay") c.weight_decay = std::stod(value);
      else if (key == "margin") c.margin = std::stod(value);
      else if (key == "negatives") c.negatives_per_positive = std::stoul(value);
      else if (key == "pool-size") c.pool_size = std::stoul(value);
      else if (key == "pool-refresh") c.pool_refresh_interval = std::stoul(value);
      else if (key == "seed") c.seed = std::stoull(value);
      else if (key == "tuples-per-epoch") c.tuples_per_epoch = std::stoul(value);
      else throw UsageError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const UsageError*>(&e)) throw;
      throw UsageError("config line " + std::to_string(lineno) + ": bad value for " + key);
    }
  }
}

double contrastive_loss(const VectorD& qe, const VectorD& other, bool is_positive, double margin) {
  const double d = (qe - other).norm();
  if (is_positive) return d * d;
  const double gap = std::max(0.0, margin - d);
  return gap * gap;
}

VectorD contrastive_loss_grad(const VectorD& qe, const VectorD& other, bool is_positive, double margin) {
  const VectorD diff = qe - other;
  if (is_positive) return 2.0 * diff;
  const double d = diff.norm();
  if (d >= margin || d == 0.0) return VectorD::Zero(qe.size());
  return -2.0 * (margin - d) / d * diff;
}

ExpansionTree expand_database_item(const GQEModel& model, NodeId id, const KnnGraph& graph,
                                   const EmbeddingStore& store, bool keep_cache) {
  const auto nbrs = graph.neighbors(id, model.k());
  const QueryNeighbors qn(nbrs.begin(), nbrs.end());
  return expand_tree(model, store.row_d(id), qn, graph, store, keep_cache);
}

std::vector<NodeId> select_hard_negatives(const VectorD& expanded, std::uint32_t query_label,
                                          std::span<const NodeId> pool, std::size_t count,
                                          const EmbeddingStore& store) {
  std::vector<std::pair<double, NodeId>> ranked;
  ranked.reserve(pool.size());
  for (NodeId id : pool) {
    if (store.label(id) == query_label) continue;
    ranked.emplace_back(dot(std::span<const double>(expanded.data(), expanded.size()), store.row(id)), id);
  }
  if (ranked.size() < count) {
    throw DataError("pool exhausted: " + std::to_string(ranked.size()) + " negatives available, " +
                    std::to_string(count) + " requested");
  }
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(count), ranked.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<NodeId> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = ranked[i].second;
  return out;
}

std::vector<NodeId> mine_negatives(const GQEModel& model, NodeId query, std::span<const NodeId> pool,
                                   std::size_t count, const EmbeddingStore& store, const KnnGraph& graph) {
  const VectorD qe = expand_database_item(model, query, graph, store, false).output();
  return select_hard_negatives(qe, store.label(query), pool, count, store);
}

double tuple_loss(const GQEModel& model, const TrainingTuple& tuple, const EmbeddingStore& store,
                  const KnnGraph& graph, double margin) {
  check_tuple(tuple, store);
  const VectorD qe = expand_database_item(model, tuple.query, graph, store, false).output();
  double loss = 0.0;
  contrastive_tuple_grad(qe, tuple, store, margin, loss);
  return loss;
}

namespace {

LossAndGradients gradients_from_tree(const GQEModel& model, const ExpansionTree& tree, const TrainingTuple& tuple,
                                     const EmbeddingStore& store, double margin) {
  LossAndGradients out;
  const VectorD grad_qe = contrastive_tuple_grad(tree.output(), tuple, store, margin, out.loss);
  if (grad_qe.isZero(0.0)) {
    for (const auto& p : model.levels) out.grads.push_back(p.zeros_like());
    return out;
  }
  out.grads = backward_tree(model, tree, grad_qe);
  for (std::size_t l = 0; l < out.grads.size(); ++l) {
    out.grads[l].for_each_tensor([l](const std::string& name, const RowMatrixD& t) {
      if (!t.allFinite()) throw DataError("non-finite gradient in level" + std::to_string(l + 1) + "." + name);
    });
  }
  return out;
}

}  // namespace

LossAndGradients loss_gradients(const GQEModel& model, const TrainingTuple& tuple, const EmbeddingStore& store,
                                const KnnGraph& graph, double margin) {
  check_tuple(tuple, store);
  const ExpansionTree tree = expand_database_item(model, tuple.query, graph, store, true);
  return gradients_from_tree(model, tree, tuple, store, margin);
}

TrainResult train(const GQEModel& initial, const EmbeddingStore& store, const KnnGraph& graph,
                  const TrainConfig& config, const Validator& validator) {
  config.validate();
  initial.validate();
  if (!store.has_labels()) throw DataError("training needs a labelled store");

  std::unordered_map<std::uint32_t, std::vector<NodeId>> by_label;
  for (std::size_t i = 0; i < store.size(); ++i) by_label[store.label(i)].push_back(static_cast<NodeId>(i));
  if (by_label.size() < 2) throw DataError("training needs at least 2 labels");
  std::vector<NodeId> eligible;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (by_label[store.label(i)].size() >= 2) eligible.push_back(static_cast<NodeId>(i));
  }
  if (eligible.empty()) throw DataError("no label has two or more members");

  std::mt19937_64 rng(config.seed);
  TrainResult result;
  result.model = initial;
  GQEModel& model = result.model;
  std::vector<AggregatorParams> adam_m, adam_v;
  for (const auto& p : model.levels) {
    adam_m.push_back(p.zeros_like());
    adam_v.push_back(p.zeros_like());
  }

  auto pool = sample_without_replacement(rng, store.size(), config.pool_size);
  std::size_t iteration = 0;
  std::optional<double> best_map;
  GQEModel best_model = model;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<NodeId> order = eligible;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    if (config.tuples_per_epoch > 0 && config.tuples_per_epoch < order.size()) order.resize(config.tuples_per_epoch);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::size_t b = end - start;

      std::vector<TrainingTuple> tuples(b);
      for (std::size_t t = 0; t < b; ++t) {
        tuples[t].query = order[start + t];
        const auto& same = by_label[store.label(tuples[t].query)];
        NodeId p = tuples[t].query;
        while (p == tuples[t].query) p = same[uniform_index(rng, same.size())];
        tuples[t].positive = p;
      }

      std::vector<LossAndGradients> per_tuple(b);
      parallel_for(b, [&](std::size_t t) {
        const ExpansionTree tree = expand_database_item(model, tuples[t].query, graph, store, true);
        try {
          tuples[t].negatives = select_hard_negatives(tree.output(), store.label(tuples[t].query), pool,
                                                      config.negatives_per_positive, store);
        } catch (const DataError& e) {
          throw DataError(std::string("degenerate pool: ") + e.what());
        }
        per_tuple[t] = gradients_from_tree(model, tree, tuples[t], store, config.margin);
      });

      // Fixed-order reduction keeps the sum independent of the schedule.
      std::vector<AggregatorParams> grads = per_tuple[0].grads;
      loss_sum += per_tuple[0].loss;
      for (std::size_t t = 1; t < b; ++t) {
        loss_sum += per_tuple[t].loss;
        for (std::size_t l = 0; l < grads.size(); ++l) {
          std::vector<const RowMatrixD*> src;
          per_tuple[t].grads[l].for_each_tensor([&](const std::string&, const RowMatrixD& x) { src.push_back(&x); });
          std::size_t idx = 0;
          grads[l].for_each_tensor([&](const std::string&, RowMatrixD& x) { x += *src[idx++]; });
        }
      }
      for (auto& g : grads) g.for_each_tensor([b](const std::string&, RowMatrixD& x) { x /= static_cast<double>(b); });

      ++iteration;
      adamw_step(model, grads, adam_m, adam_v, iteration, config);
      if (iteration % config.pool_refresh_interval == 0) {
        pool = sample_without_replacement(rng, store.size(), config.pool_size);
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(order.size());
    if (validator) {
      rec.validation_map = validator(model);
      if (!best_map || *rec.validation_map > *best_map) {
        best_map = rec.validation_map;
        best_model = model;
        result.best_epoch = epoch;
      }
    }
    result.history.push_back(rec);
  }

  if (validator) result.model = best_model;
  return result;
}

void write_history_jsonl(std::ostream& out, const std::vector<EpochRecord>& history) {
  for (const auto& r : history) {
    nlohmann::json j{{"epoch", r.epoch}, {"mean_loss", r.mean_loss}};
    if (r.validation_map) j["validation_map"] = *r.validation_map;
    out << j.dump() << '\n';
  }
}

}  // namespace gqe
