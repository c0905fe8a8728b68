#include "gqe/hierarchical_qe.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace gqe {

namespace {

constexpr std::uint32_t kModelVersion = 1;

void check_compatible(const GQEModel& model, const KnnGraph& graph, const EmbeddingStore& store) {
  model.validate();
  if (model.dim() != store.dim()) {
    throw DataError("dimension mismatch: model F=" + std::to_string(model.dim()) + ", store F=" +
                    std::to_string(store.dim()));
  }
  if (graph.size() != store.size() || graph.store_digest() != store.digest()) {
    throw DataError("stale graph: it was built for a different store");
  }
  if (graph.k() < model.k()) {
    throw UsageError("graph k=" + std::to_string(graph.k()) + " is smaller than model K=" +
                     std::to_string(model.k()));
  }
}

RowMatrixD as_double(const EmbeddingStore& store) { return store.matrix().cast<double>(); }

}  // namespace

// ---------------------------------------------------------------------------
// Model

GQEModel GQEModel::random(const EncoderConfig& encoder, std::size_t k, std::size_t num_levels,
                          double scale, std::mt19937_64& rng) {
  if (num_levels < 1) throw UsageError("number of levels must be >= 1");
  GQEModel m;
  for (std::size_t i = 0; i < num_levels; ++i) m.levels.push_back(AggregatorParams::random(encoder, k, scale, rng));
  m.quantize();
  return m;
}

GQEModel GQEModel::identity(std::size_t dim, std::size_t k, std::size_t num_levels) {
  if (num_levels < 1) throw UsageError("number of levels must be >= 1");
  EncoderConfig enc;
  enc.dim = dim;
  enc.variant = EncoderVariant::kIdentity;
  GQEModel m;
  m.levels.assign(num_levels, AggregatorParams::zeros(enc, k));
  return m;
}

void GQEModel::validate() const {
  if (levels.empty()) throw DataError("model has no levels");
  for (const auto& p : levels) {
    if (p.dim() != dim() || p.k != k()) throw DataError("all model levels must share F and K");
    if (static_cast<std::size_t>(p.positional.rows()) != p.k + 1 ||
        static_cast<std::size_t>(p.positional.cols()) != p.dim()) {
      throw DataError("positional table shape does not match K and F");
    }
  }
}

void GQEModel::quantize() {
  for (auto& p : levels) p.quantize();
}

Digest GQEModel::digest() const {
  std::ostringstream os(std::ios::binary);
  for (const auto& p : levels) write_params(os, p);
  const std::string bytes = os.str();
  Hasher h;
  h.update("GQE1");
  h.update(bytes);
  return h.finish();
}

void save_model(const GQEModel& model, const std::string& path) {
  model.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write model file " + path);
  out.write("GQE1", 4);
  binio::write_u32(out, kModelVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(model.num_levels()));
  for (const auto& p : model.levels) write_params(out, p);
  out.close();
  if (!out) throw IoError("failed writing " + path);
}

GQEModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file " + path);
  binio::expect_magic(in, "GQE1", path);
  const std::uint32_t version = binio::read_u32(in, path);
  if (version != kModelVersion) throw DataError("incompatible model file version in " + path);
  const std::uint32_t levels = binio::read_u32(in, path);
  if (levels == 0 || levels > 16) throw DataError("malformed model file " + path + ": bad level count");
  GQEModel m;
  for (std::uint32_t i = 0; i < levels; ++i) m.levels.push_back(read_params(in, path));
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("malformed model file " + path + ": trailing bytes");
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Neighbourhoods

NeighborhoodSets build_sets(const QueryNeighbors& query_nbrs, const KnnGraph& graph,
                            std::size_t num_levels, std::size_t k) {
  if (graph.k() < k) {
    throw UsageError("graph k=" + std::to_string(graph.k()) + " is smaller than K=" + std::to_string(k));
  }
  if (query_nbrs.size() < k) throw UsageError("query has fewer than K neighbours");
  NeighborhoodSets out;
  out.sets.resize(num_levels + 1);
  out.sets[num_levels] = {kQueryNode};
  for (std::size_t i = 1; i <= num_levels; ++i) {
    const auto& outer = out.sets[num_levels - i + 1];
    std::set<NodeRef> next(outer.begin(), outer.end());
    for (NodeRef u : outer) {
      if (u == kQueryNode) {
        for (std::size_t j = 0; j < k; ++j) next.insert(query_nbrs[j].id);
      } else {
        for (const auto& nb : graph.neighbors(static_cast<std::size_t>(u), k)) next.insert(nb.id);
      }
    }
    out.sets[num_levels - i].assign(next.begin(), next.end());
  }
  return out;
}

NeighborhoodSets build_sets(const VectorD& q, const KnnGraph& graph, const EmbeddingStore& store,
                            std::size_t num_levels, std::size_t k) {
  return build_sets(query_neighbors(store, k, std::span<const double>(q.data(), q.size())), graph,
                    num_levels, k);
}

// ---------------------------------------------------------------------------
// Naive recursion

ExpansionTree expand_tree(const GQEModel& model, const VectorD& q, const QueryNeighbors& query_nbrs,
                          const KnnGraph& graph, const EmbeddingStore& store, bool keep_cache,
                          ExpandStats* stats) {
  check_compatible(model, graph, store);
  if (static_cast<std::size_t>(q.size()) != store.dim()) throw DataError("dimension mismatch: query vs store");
  const std::size_t num_levels = model.num_levels();
  const std::size_t k = model.k();

  ExpansionTree tree;
  tree.sets = build_sets(query_nbrs, graph, num_levels, k);
  tree.index.resize(num_levels + 1);
  tree.embeddings.resize(num_levels + 1);
  tree.applications.resize(num_levels + 1);
  for (std::size_t i = 0; i <= num_levels; ++i) {
    const auto& s = tree.sets.sets[i];
    for (std::size_t j = 0; j < s.size(); ++j) tree.index[i].emplace(s[j], j);
  }

  const auto neighbours_of = [&](NodeRef u) {
    std::vector<NodeRef> out;
    out.reserve(k);
    if (u == kQueryNode) {
      for (std::size_t j = 0; j < k; ++j) out.push_back(query_nbrs[j].id);
    } else {
      for (const auto& nb : graph.neighbors(static_cast<std::size_t>(u), k)) out.push_back(nb.id);
    }
    return out;
  };

  const auto& s0 = tree.sets.sets[0];
  RowMatrixD& e0 = tree.embeddings[0];
  e0.resize(static_cast<Eigen::Index>(s0.size()), static_cast<Eigen::Index>(store.dim()));
  for (std::size_t j = 0; j < s0.size(); ++j) {
    if (s0[j] == kQueryNode) {
      e0.row(static_cast<Eigen::Index>(j)) = q.transpose();
    } else {
      e0.row(static_cast<Eigen::Index>(j)) = store.row_d(static_cast<std::size_t>(s0[j])).transpose();
    }
  }

  for (std::size_t i = 1; i <= num_levels; ++i) {
    const auto& si = tree.sets.sets[i];
    const auto& prev_index = tree.index[i - 1];
    const RowMatrixD& prev = tree.embeddings[i - 1];
    RowMatrixD& cur = tree.embeddings[i];
    cur.resize(static_cast<Eigen::Index>(si.size()), prev.cols());
    auto& apps = tree.applications[i];
    apps.resize(si.size());
    RowMatrixD inputs(static_cast<Eigen::Index>(k + 1), prev.cols());
    for (std::size_t j = 0; j < si.size(); ++j) {
      auto& app = apps[j];
      app.node = si[j];
      app.neighbors = neighbours_of(si[j]);
      inputs.row(0) = prev.row(static_cast<Eigen::Index>(prev_index.at(si[j])));
      for (std::size_t p = 0; p < k; ++p) {
        inputs.row(static_cast<Eigen::Index>(p + 1)) =
            prev.row(static_cast<Eigen::Index>(prev_index.at(app.neighbors[p])));
      }
      AggregateResult r = aggregate(model.levels[i - 1], inputs, keep_cache ? &app.cache : nullptr);
      if (stats) ++stats->aggregate_calls;
      cur.row(static_cast<Eigen::Index>(j)) = r.output.transpose();
      app.trace = std::move(r.trace);
    }
  }
  return tree;
}

std::vector<AggregatorParams> backward_tree(const GQEModel& model, const ExpansionTree& tree,
                                            const VectorD& grad_output) {
  const std::size_t num_levels = tree.num_levels();
  std::vector<AggregatorParams> grads;
  grads.reserve(num_levels);
  for (const auto& p : model.levels) grads.push_back(p.zeros_like());

  std::vector<RowMatrixD> g(num_levels + 1);
  for (std::size_t i = 0; i <= num_levels; ++i) g[i] = RowMatrixD::Zero(tree.embeddings[i].rows(), tree.embeddings[i].cols());
  g[num_levels].row(0) = grad_output.transpose();

  for (std::size_t i = num_levels; i >= 1; --i) {
    const auto& prev_index = tree.index[i - 1];
    const auto& apps = tree.applications[i];
    for (std::size_t j = 0; j < apps.size(); ++j) {
      const VectorD gj = g[i].row(static_cast<Eigen::Index>(j)).transpose();
      if (gj.isZero(0.0)) continue;
      const auto& app = apps[j];
      if (app.cache.inputs.rows() == 0) throw DataError("backward_tree needs a tree built with keep_cache");
      const RowMatrixD d_inputs = aggregate_backward(model.levels[i - 1], app.cache, gj, grads[i - 1]);
      g[i - 1].row(static_cast<Eigen::Index>(prev_index.at(app.node))) += d_inputs.row(0);
      for (std::size_t p = 0; p < app.neighbors.size(); ++p) {
        g[i - 1].row(static_cast<Eigen::Index>(prev_index.at(app.neighbors[p]))) +=
            d_inputs.row(static_cast<Eigen::Index>(p + 1));
      }
    }
  }
  return grads;
}

WeightAttribution attribute_weights(const ExpansionTree& tree) {
  const std::size_t num_levels = tree.num_levels();
  if (num_levels == 0 || tree.applications.size() != num_levels + 1) throw DataError("missing trace");
  std::vector<std::vector<double>> coef(num_levels + 1);
  for (std::size_t i = 0; i <= num_levels; ++i) coef[i].assign(tree.sets.sets[i].size(), 0.0);
  coef[num_levels][0] = 1.0;

  for (std::size_t i = num_levels; i >= 1; --i) {
    const auto& prev_index = tree.index[i - 1];
    const auto& apps = tree.applications[i];
    for (std::size_t j = 0; j < apps.size(); ++j) {
      const double c = coef[i][j];
      if (c == 0.0) continue;
      const auto& tr = apps[j].trace;
      if (tr.sims.size() != apps[j].neighbors.size() + 1 || !(tr.norm > 0.0)) throw DataError("missing trace");
      coef[i - 1][prev_index.at(apps[j].node)] += c * tr.sims[0] / tr.norm;
      for (std::size_t p = 0; p < apps[j].neighbors.size(); ++p) {
        coef[i - 1][prev_index.at(apps[j].neighbors[p])] += c * tr.sims[p + 1] / tr.norm;
      }
    }
  }

  WeightAttribution out;
  const auto& s0 = tree.sets.sets[0];
  for (std::size_t j = 0; j < s0.size(); ++j) {
    if (s0[j] == kQueryNode) {
      out.query_weight = coef[0][j];
    } else {
      out.weights[static_cast<NodeId>(s0[j])] += coef[0][j];
    }
  }
  out.final_norm = tree.applications[num_levels][0].trace.norm;
  return out;
}

std::map<NodeId, double> WeightAttribution::clamped() const {
  std::map<NodeId, double> out;
  for (const auto& [id, w] : weights) out[id] = std::max(0.0, w);
  return out;
}

Expansion expand_naive(const GQEModel& model, const VectorD& q, const KnnGraph& graph,
                       const EmbeddingStore& store, ExpandStats* stats) {
  model.validate();
  const auto nbrs = query_neighbors(store, model.k(), std::span<const double>(q.data(), q.size()));
  ExpansionTree tree = expand_tree(model, q, nbrs, graph, store, false, stats);
  return {tree.output(), attribute_weights(tree)};
}

// ---------------------------------------------------------------------------
// Efficient inference

Digest level_digest(const GQEModel& model, const KnnGraph& graph, const EmbeddingStore& store) {
  const Digest s = store.digest();
  const Digest g = graph.digest();
  const Digest m = model.digest();
  Hasher h;
  h.update("LVL1");
  h.update(s.data(), s.size()).update(g.data(), g.size()).update(m.data(), m.size());
  return h.finish();
}

LevelStore precompute_levels(const GQEModel& model, const KnnGraph& graph, const EmbeddingStore& store) {
  check_compatible(model, graph, store);
  const std::size_t k = model.k();
  const std::size_t n = store.size();
  LevelStore out;
  out.digest = level_digest(model, graph, store);
  RowMatrixD prev = as_double(store);
  for (std::size_t i = 1; i < model.num_levels(); ++i) {
    RowMatrixD next(prev.rows(), prev.cols());
    parallel_for(n, [&](std::size_t id) {
      RowMatrixD inputs(static_cast<Eigen::Index>(k + 1), prev.cols());
      inputs.row(0) = prev.row(static_cast<Eigen::Index>(id));
      const auto nbrs = graph.neighbors(id, k);
      for (std::size_t p = 0; p < k; ++p) inputs.row(static_cast<Eigen::Index>(p + 1)) = prev.row(nbrs[p].id);
      next.row(static_cast<Eigen::Index>(id)) = aggregate(model.levels[i - 1], inputs).output.transpose();
    });
    out.levels.push_back(next);
    prev = std::move(next);
  }
  return out;
}

VectorD expand_fast(const GQEModel& model, const VectorD& q, const KnnGraph& graph,
                    const EmbeddingStore& store, const LevelStore& levels, ExpandStats* stats) {
  check_compatible(model, graph, store);
  if (levels.levels.size() + 1 != model.num_levels() || levels.digest != level_digest(model, graph, store)) {
    throw DataError("stale level store: it does not match this store, graph and model");
  }
  if (static_cast<std::size_t>(q.size()) != store.dim()) throw DataError("dimension mismatch: query vs store");
  const std::size_t k = model.k();
  const auto nbrs = query_neighbors(store, k, std::span<const double>(q.data(), q.size()));

  VectorD cur = q;
  RowMatrixD inputs(static_cast<Eigen::Index>(k + 1), static_cast<Eigen::Index>(store.dim()));
  for (std::size_t i = 1; i <= model.num_levels(); ++i) {
    inputs.row(0) = cur.transpose();
    for (std::size_t p = 0; p < k; ++p) {
      const auto row = static_cast<Eigen::Index>(p + 1);
      if (i == 1) {
        inputs.row(row) = store.row_d(nbrs[p].id).transpose();
      } else {
        inputs.row(row) = levels.level(i - 1).row(nbrs[p].id);
      }
    }
    cur = aggregate(model.levels[i - 1], inputs).output;
    if (stats) ++stats->aggregate_calls;
  }
  return cur;
}

void save_level_store(const LevelStore& levels, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write level store " + path);
  const std::size_t n = levels.levels.empty() ? 0 : static_cast<std::size_t>(levels.levels[0].rows());
  const std::size_t f = levels.levels.empty() ? 0 : static_cast<std::size_t>(levels.levels[0].cols());
  out.write("LVL1", 4);
  binio::write_u32(out, static_cast<std::uint32_t>(levels.levels.size() + 1));
  binio::write_u32(out, static_cast<std::uint32_t>(n));
  binio::write_u32(out, static_cast<std::uint32_t>(f));
  binio::write_bytes(out, levels.digest.data(), levels.digest.size());
  for (const auto& m : levels.levels) {
    for (Eigen::Index i = 0; i < m.size(); ++i) binio::write_f32(out, static_cast<float>(m.data()[i]));
  }
  out.close();
  if (!out) throw IoError("failed writing " + path);
}

LevelStore load_level_store(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open level store " + path);
  binio::expect_magic(in, "LVL1", path);
  const std::uint32_t num_levels = binio::read_u32(in, path);
  const std::uint32_t n = binio::read_u32(in, path);
  const std::uint32_t f = binio::read_u32(in, path);
  if (num_levels == 0) throw DataError("malformed level store " + path);
  LevelStore out;
  binio::read_bytes(in, out.digest.data(), out.digest.size(), path);
  for (std::uint32_t i = 1; i < num_levels; ++i) {
    RowMatrixD m(n, f);
    for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = binio::read_f32(in, path);
    out.levels.push_back(std::move(m));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("malformed level store " + path + ": trailing bytes");
  return out;
}

// ---------------------------------------------------------------------------
// Database-side augmentation

EmbeddingStore run_dba(const GQEModel& model, const KnnGraph& graph, const EmbeddingStore& store,
                       const std::vector<double>& temperatures, std::size_t k_dba) {
  check_compatible(model, graph, store);
  if (temperatures.empty()) throw UsageError("DBA needs at least one temperature");
  for (double t : temperatures) {
    if (!(t > 0.0)) throw UsageError("DBA temperatures must be positive");
  }
  if (k_dba < 1 || k_dba > graph.k() || k_dba > model.k()) {
    throw UsageError("--k-dba must satisfy 1 <= k_dba <= min(graph k, model K)");
  }

  const std::size_t n = store.size();
  RowMatrixD cur = as_double(store);
  for (std::size_t i = 1; i <= model.num_levels(); ++i) {
    AggregatorParams params = model.levels[i - 1];
    params.temperature = temperatures[std::min(i - 1, temperatures.size() - 1)];
    RowMatrixD next(cur.rows(), cur.cols());
    parallel_for(n, [&](std::size_t id) {
      RowMatrixD inputs(static_cast<Eigen::Index>(k_dba + 1), cur.cols());
      inputs.row(0) = cur.row(static_cast<Eigen::Index>(id));
      const auto nbrs = graph.neighbors(id, k_dba);
      for (std::size_t p = 0; p < k_dba; ++p) inputs.row(static_cast<Eigen::Index>(p + 1)) = cur.row(nbrs[p].id);
      next.row(static_cast<Eigen::Index>(id)) = aggregate(params, inputs).output.transpose();
    });
    cur = std::move(next);
  }
  std::optional<std::vector<std::uint32_t>> labels;
  if (store.has_labels()) labels = store.labels();
  return EmbeddingStore(cur.cast<float>(), std::move(labels), true);
}

std::size_t default_k(std::size_t database_size) {
  if (database_size < 2) throw UsageError("database needs at least two items");
  return std::min<std::size_t>(44, database_size - 1);
}

}  // namespace gqe
