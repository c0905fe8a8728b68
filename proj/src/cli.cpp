#include "gqe/cli.hpp"

#include "gqe/retrieval_eval.hpp"
#include "gqe/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace gqe {

namespace {

using nlohmann::json;

struct Common {
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

struct RunContext {
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
};

EmbeddingStore open_store(const std::string& path, RunContext& ctx) {
  ctx.inputs.push_back(path);
  return load_store(path, true);
}

KnnGraph open_graph(const std::optional<std::string>& path, const EmbeddingStore& store, std::size_t k,
                    RunContext& ctx) {
  if (!path) return build_graph(store, k);
  ctx.inputs.push_back(*path);
  return load_graph(*path, store, k);
}

GQEModel resolve_model(const std::optional<std::string>& model_path, std::size_t levels,
                       std::optional<std::size_t> k, const EmbeddingStore& db, RunContext& ctx) {
  if (model_path) {
    ctx.inputs.push_back(*model_path);
    GQEModel m = load_model(*model_path);
    if (m.dim() != db.dim()) {
      throw DataError("dimension mismatch: model " + *model_path + " has F=" + std::to_string(m.dim()) +
                      ", database has F=" + std::to_string(db.dim()));
    }
    return m;
  }
  return GQEModel::identity(db.dim(), k.value_or(default_k(db.size())), levels);
}

VectorD parse_vector(const std::string& text) {
  std::vector<double> values;
  std::istringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      values.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw UsageError("--vector: cannot parse '" + cell + "'");
    }
  }
  VectorD v = Eigen::Map<VectorD>(values.data(), static_cast<Eigen::Index>(values.size()));
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw UsageError("--vector must be a finite non-zero vector");
  return v / n;
}

std::vector<std::size_t> parse_k_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    long long v = 0;
    try {
      v = std::stoll(cell);
    } catch (const std::exception&) {
      throw UsageError("--sweep-k: cannot parse '" + cell + "'");
    }
    if (v < 1) throw UsageError("--sweep-k values must be >= 1");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UsageError("--sweep-k needs at least one value");
  return out;
}

void emit_json(const json& j, const std::optional<std::string>& path, std::ostream& out, RunContext& ctx) {
  if (!path || *path == "-") {
    out << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(*path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + *path);
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing " + *path);
  ctx.outputs.push_back(*path);
}

void write_manifest(const CLI::App& app, const CLI::App& sub, const RunContext& ctx, double seconds) {
  if (ctx.outputs.empty()) return;
  json flags = json::object();
  auto collect = [&flags](const CLI::App& a) {
    for (const CLI::Option* opt : a.get_options()) {
      if (opt->count() == 0 || opt->get_name() == "--help") continue;
      const auto& res = opt->results();
      std::string joined;
      for (std::size_t i = 0; i < res.size(); ++i) joined += (i ? "," : "") + res[i];
      flags[opt->get_name()] = joined;
    }
  };
  collect(app);
  collect(sub);
  json inputs = json::object();
  for (const auto& p : ctx.inputs) {
    inputs[p] = to_hex(file_digest(p));
    if (std::filesystem::exists(labels_path_for(p))) {
      inputs[labels_path_for(p)] = to_hex(file_digest(labels_path_for(p)));
    }
  }
  json outputs = json::object();
  for (const auto& p : ctx.outputs) outputs[p] = to_hex(file_digest(p));
  const json manifest{{"subcommand", sub.get_name()}, {"flags", flags},       {"inputs", inputs},
                      {"outputs", outputs},            {"tool_version", kToolVersion},
                      {"wall_clock_seconds", seconds}};
  const std::string path = ctx.outputs.front() + ".manifest.json";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write manifest " + path);
  f << manifest.dump(2) << '\n';
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Query expansion for embedding retrieval: AQE, AQEwD, alpha-QE and hierarchical graph QE", "gqe"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--threads", common.threads, "Worker threads (0 = all cores)")->capture_default_str();

  RunContext ctx;
  std::function<void()> action;

  // ingest ----------------------------------------------------------------
  auto* ingest = app.add_subcommand("ingest", "Convert a comma-separated text file into a binary store");
  std::string ingest_in, ingest_out;
  std::optional<std::string> ingest_labels;
  bool ingest_raw = false;
  ingest->add_option("--input", ingest_in, "Text file, one embedding per line")->required();
  ingest->add_option("--output", ingest_out, "Binary store to write")->required();
  ingest->add_option("--labels", ingest_labels, "Label file (id,label per line) to attach");
  ingest->add_flag("--no-normalize", ingest_raw, "Keep rows as given instead of L2-normalising");
  ingest->callback([&] {
    action = [&] {
      ctx.inputs.push_back(ingest_in);
      EmbeddingStore store = load_text_store(ingest_in, !ingest_raw);
      if (ingest_labels) {
        ctx.inputs.push_back(*ingest_labels);
        store.set_labels(load_labels(*ingest_labels, store.size()));
      }
      save_store(store, ingest_out);
      ctx.outputs.push_back(ingest_out);
      out << "wrote " << store.size() << " x " << store.dim() << " store to " << ingest_out << '\n';
    };
  });

  // synth -----------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate a labelled clustered dataset");
  SynthSpec spec;
  std::uint32_t synth_queries = 0;
  std::string synth_out;
  std::optional<std::string> synth_qout;
  synth->add_option("--clusters", spec.clusters, "Number of clusters")->check(CLI::Range(2u, 1u << 20))->capture_default_str();
  synth->add_option("--points-per-cluster", spec.points_per_cluster, "Database points per cluster")
      ->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--dim", spec.dim, "Embedding dimension")->check(CLI::Range(2u, 1u << 16))->capture_default_str();
  synth->add_option("--sigma", spec.noise_sigma, "Per-coordinate noise scale")->check(CLI::NonNegativeNumber)->capture_default_str();
  synth->add_option("--queries-per-cluster", synth_queries, "Held-out query points per cluster")->capture_default_str();
  synth->add_option("--output", synth_out, "Database store to write")->required();
  synth->add_option("--queries-output", synth_qout, "Query store to write");
  synth->callback([&] {
    action = [&] {
      if (synth_queries > 0 && !synth_qout) throw UsageError("--queries-per-cluster needs --queries-output");
      spec.seed = common.seed;
      const SyntheticSplit split = generate_synthetic_split(spec, synth_queries);
      save_store(split.database, synth_out);
      ctx.outputs.push_back(synth_out);
      if (synth_queries > 0) {
        save_store(split.queries, *synth_qout);
        ctx.outputs.push_back(*synth_qout);
      }
      out << "wrote " << split.database.size() << " database points";
      if (synth_queries > 0) out << " and " << split.queries.size() << " queries";
      out << '\n';
    };
  });

  // build-graph -----------------------------------------------------------
  auto* bg = app.add_subcommand("build-graph", "Exact K-nearest-neighbour graph cache");
  std::string bg_db, bg_out;
  std::size_t bg_k = 0;
  bg->add_option("--database", bg_db, "Database store")->required();
  bg->add_option("--k", bg_k, "Neighbours per node")->required()->check(CLI::PositiveNumber);
  bg->add_option("--output", bg_out, "Graph cache to write")->required();
  bg->callback([&] {
    action = [&] {
      const EmbeddingStore db = open_store(bg_db, ctx);
      save_graph(build_graph(db, bg_k), bg_out);
      ctx.outputs.push_back(bg_out);
      out << "wrote graph k=" << bg_k << " over " << db.size() << " nodes to " << bg_out << '\n';
    };
  });

  // shared method flags ---------------------------------------------------
  struct MethodFlags {
    std::string method = "none";
    std::optional<std::size_t> k;
    std::optional<double> alpha;
    std::optional<std::string> model;
    std::size_t levels = 2;
    std::optional<std::string> graph;
  };
  auto add_method_flags = [](CLI::App* sub, MethodFlags& f) {
    sub->add_option("--method", f.method, "none | aqe | aqewd | alphaqe | gqe")
        ->check(CLI::IsMember({"none", "aqe", "aqewd", "alphaqe", "gqe"}))
        ->capture_default_str();
    sub->add_option("--k", f.k, "Neighbours used by the expansion (gqe: identity model only)")->check(CLI::PositiveNumber);
    sub->add_option("--alpha", f.alpha, "alpha-QE exponent")->check(CLI::NonNegativeNumber);
    sub->add_option("--model", f.model, "Trained GQE model (default: identity-encoder GQE)");
    sub->add_option("--levels", f.levels, "Levels of the identity GQE model")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--graph", f.graph, "Cached graph over the database");
  };

  // expand ----------------------------------------------------------------
  auto* expand = app.add_subcommand("expand", "Expand one query and print the vector as JSON");
  MethodFlags ex;
  std::string ex_db;
  std::optional<std::string> ex_queries, ex_vector, ex_out, ex_levels_path;
  std::optional<std::size_t> ex_qid;
  bool ex_fast = false;
  add_method_flags(expand, ex);
  expand->add_option("--database", ex_db, "Database store")->required();
  expand->add_option("--queries", ex_queries, "Query store");
  expand->add_option("--query-id", ex_qid, "Row of --queries to expand");
  expand->add_option("--vector", ex_vector, "Query as comma-separated values");
  expand->add_flag("--fast", ex_fast, "GQE through precomputed per-level embeddings");
  expand->add_option("--level-store", ex_levels_path, "Precomputed level store for --fast");
  expand->add_option("--output", ex_out, "JSON output file (default stdout)");
  expand->callback([&] {
    action = [&] {
      const EmbeddingStore db = open_store(ex_db, ctx);
      VectorD q;
      if (ex_vector) {
        if (ex_queries || ex_qid) throw UsageError("use either --vector or --queries/--query-id");
        q = parse_vector(*ex_vector);
      } else {
        if (!ex_queries || !ex_qid) throw UsageError("expand needs --vector or --queries with --query-id");
        const EmbeddingStore qs = open_store(*ex_queries, ctx);
        if (*ex_qid >= qs.size()) throw UsageError("--query-id out of range");
        q = qs.row_d(*ex_qid);
      }
      if (static_cast<std::size_t>(q.size()) != db.dim()) throw DataError("dimension mismatch: query vs --database");

      MethodSpec ms;
      ms.method = parse_method(ex.method);
      ms.alpha = ex.alpha;
      ms.fast = ex_fast;
      std::optional<GQEModel> model;
      std::optional<KnnGraph> graph;
      std::optional<LevelStore> levels;
      if (ms.method == QEMethod::kGqe) {
        model = resolve_model(ex.model, ex.levels, ex.k, db, ctx);
        ms.model = &*model;
        graph = open_graph(ex.graph, db, model->k(), ctx);
        if (ex_fast) {
          if (ex_levels_path) {
            ctx.inputs.push_back(*ex_levels_path);
            levels = load_level_store(*ex_levels_path);
          } else {
            levels = precompute_levels(*model, *graph, db);
          }
        }
      } else {
        ms.k = ex.k.value_or(10);
      }
      const VectorD v = expand_query(ms, q, db, graph ? &*graph : nullptr, levels ? &*levels : nullptr);
      json j{{"method", ex.method}, {"params", ms.params()}, {"vector", std::vector<double>(v.data(), v.data() + v.size())}};
      emit_json(j, ex_out, out, ctx);
    };
  });

  // precompute ------------------------------------------------------------
  auto* pre = app.add_subcommand("precompute", "Store per-level database embeddings for fast GQE");
  std::string pre_model, pre_db, pre_out;
  std::optional<std::string> pre_graph;
  pre->add_option("--model", pre_model, "Trained GQE model")->required();
  pre->add_option("--database", pre_db, "Database store")->required();
  pre->add_option("--graph", pre_graph, "Cached graph over the database");
  pre->add_option("--output", pre_out, "Level store to write")->required();
  pre->callback([&] {
    action = [&] {
      const EmbeddingStore db = open_store(pre_db, ctx);
      ctx.inputs.push_back(pre_model);
      const GQEModel model = load_model(pre_model);
      const KnnGraph graph = open_graph(pre_graph, db, model.k(), ctx);
      save_level_store(precompute_levels(model, graph, db), pre_out);
      ctx.outputs.push_back(pre_out);
      out << "wrote " << model.num_levels() - 1 << " level(s) to " << pre_out << '\n';
    };
  });

  // dba -------------------------------------------------------------------
  auto* dba = app.add_subcommand("dba", "Database-side augmentation with tempered GQE");
  MethodFlags dbaf;
  std::string dba_db, dba_out;
  double t1 = 0.0, t2 = 0.0;
  std::size_t k_dba = 0;
  dba->add_option("--model", dbaf.model, "Trained GQE model (default: identity-encoder GQE)");
  dba->add_option("--levels", dbaf.levels, "Levels of the identity GQE model")->check(CLI::PositiveNumber)->capture_default_str();
  dba->add_option("--k", dbaf.k, "K of the identity GQE model")->check(CLI::PositiveNumber);
  dba->add_option("--graph", dbaf.graph, "Cached graph over the database");
  dba->add_option("--database", dba_db, "Database store")->required();
  dba->add_option("--t1", t1, "Softmax temperature of level 1")->required()->check(CLI::PositiveNumber);
  dba->add_option("--t2", t2, "Softmax temperature of level 2 and above")->required()->check(CLI::PositiveNumber);
  dba->add_option("--k-dba", k_dba, "Neighbours per aggregation")->required()->check(CLI::PositiveNumber);
  dba->add_option("--output", dba_out, "Augmented store to write")->required();
  dba->callback([&] {
    action = [&] {
      const EmbeddingStore db = open_store(dba_db, ctx);
      const GQEModel model = resolve_model(dbaf.model, dbaf.levels, dbaf.k, db, ctx);
      const KnnGraph graph = open_graph(dbaf.graph, db, model.k(), ctx);
      save_store(run_dba(model, graph, db, t1, t2, k_dba), dba_out);
      ctx.outputs.push_back(dba_out);
      out << "wrote augmented store to " << dba_out << '\n';
    };
  });

  // train -----------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a GQE model with contrastive loss");
  TrainConfig tc;
  std::string tr_db, tr_out;
  std::optional<std::string> tr_graph, tr_config, tr_val_q, tr_val_db, tr_hist;
  std::size_t tr_levels = 2;
  std::optional<std::size_t> tr_k;
  EncoderConfig enc;
  double init_scale = 0.02;
  tr->add_option("--database", tr_db, "Labelled training store")->required();
  tr->add_option("--graph", tr_graph, "Cached graph over the training store");
  tr->add_option("--config", tr_config, "key=value file; flags given on the command line win");
  tr->add_option("--l,--levels", tr_levels, "Hierarchy depth L")->check(CLI::PositiveNumber)->capture_default_str();
  tr->add_option("--k", tr_k, "Neighbours per aggregation (default min(44, N-1))")->check(CLI::PositiveNumber);
  tr->add_option("--heads", enc.heads, "Attention heads")->check(CLI::PositiveNumber)->capture_default_str();
  tr->add_option("--layers", enc.layers, "Encoder layers")->check(CLI::PositiveNumber)->capture_default_str();
  tr->add_option("--ff-dim", enc.ff_dim, "Feed-forward width")->check(CLI::PositiveNumber)->capture_default_str();
  tr->add_option("--init-scale", init_scale, "Std of the initial weights")->check(CLI::NonNegativeNumber)->capture_default_str();
  auto* o_epochs = tr->add_option("--epochs", tc.epochs, "Epochs")->check(CLI::PositiveNumber)->capture_default_str();
  auto* o_batch = tr->add_option("--batch-size", tc.batch_size, "Tuples per batch")->check(CLI::PositiveNumber)->capture_default_str();
  auto* o_lr = tr->add_option("--lr", tc.learning_rate, "Learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
  auto* o_wd = tr->add_option("--weight-decay", tc.weight_decay, "Decoupled weight decay")->check(CLI::NonNegativeNumber)->capture_default_str();
  auto* o_margin = tr->add_option("--margin", tc.margin, "Contrastive margin in (0, 2)")->capture_default_str();
  auto* o_neg = tr->add_option("--negatives", tc.negatives_per_positive, "Hard negatives per tuple")->check(CLI::PositiveNumber)->capture_default_str();
  auto* o_pool = tr->add_option("--pool-size", tc.pool_size, "Negative pool size")->check(CLI::PositiveNumber)->capture_default_str();
  auto* o_refresh = tr->add_option("--pool-refresh", tc.pool_refresh_interval, "Iterations between pool refreshes")->check(CLI::PositiveNumber)->capture_default_str();
  auto* o_tpe = tr->add_option("--tuples-per-epoch", tc.tuples_per_epoch, "Tuples per epoch (0 = all)")->capture_default_str();
  tr->add_option("--val-queries", tr_val_q, "Labelled validation queries (enables model selection)");
  tr->add_option("--val-database", tr_val_db, "Validation database (default: --database)");
  tr->add_option("--output", tr_out, "Model file to write")->required();
  tr->add_option("--history", tr_hist, "Loss history JSON lines (default <output>.history.jsonl)");
  tr->callback([&] {
    action = [&] {
      if (tr_config) {
        // File values first, then re-apply the flags that were given explicitly.
        const TrainConfig flags = tc;
        std::ifstream f(*tr_config);
        if (!f) throw IoError("cannot open config " + *tr_config);
        ctx.inputs.push_back(*tr_config);
        read_train_config(f, tc);
        if (o_epochs->count()) tc.epochs = flags.epochs;
        if (o_batch->count()) tc.batch_size = flags.batch_size;
        if (o_lr->count()) tc.learning_rate = flags.learning_rate;
        if (o_wd->count()) tc.weight_decay = flags.weight_decay;
        if (o_margin->count()) tc.margin = flags.margin;
        if (o_neg->count()) tc.negatives_per_positive = flags.negatives_per_positive;
        if (o_pool->count()) tc.pool_size = flags.pool_size;
        if (o_refresh->count()) tc.pool_refresh_interval = flags.pool_refresh_interval;
        if (o_tpe->count()) tc.tuples_per_epoch = flags.tuples_per_epoch;
      }
      tc.seed = common.seed;
      tc.validate();

      const EmbeddingStore db = open_store(tr_db, ctx);
      const std::size_t k = tr_k.value_or(default_k(db.size()));
      enc.dim = db.dim();
      enc.variant = EncoderVariant::kAttention;
      const KnnGraph graph = open_graph(tr_graph, db, k, ctx);
      std::mt19937_64 init_rng(common.seed);
      const GQEModel initial = GQEModel::random(enc, k, tr_levels, init_scale, init_rng);

      std::optional<EmbeddingStore> vq, vdb;
      std::optional<KnnGraph> vgraph;
      Validator validator;
      if (tr_val_q) {
        vq = open_store(*tr_val_q, ctx);
        vdb = tr_val_db ? open_store(*tr_val_db, ctx) : db;
        vgraph = build_graph(*vdb, k);
        validator = [&](const GQEModel& m) {
          MethodSpec ms;
          ms.method = QEMethod::kGqe;
          ms.model = &m;
          return evaluate(ms, *vq, *vdb, &*vgraph).map;
        };
      } else if (tr_val_db) {
        throw UsageError("--val-database needs --val-queries");
      }

      const TrainResult result = train(initial, db, graph, tc, validator);
      save_model(result.model, tr_out);
      ctx.outputs.push_back(tr_out);
      const std::string hist_path = tr_hist.value_or(tr_out + ".history.jsonl");
      std::ofstream hf(hist_path, std::ios::trunc);
      if (!hf) throw IoError("cannot write " + hist_path);
      write_history_jsonl(hf, result.history);
      hf.close();
      ctx.outputs.push_back(hist_path);
      write_history_jsonl(out, result.history);
    };
  });

  // eval ------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Mean average precision of a method over a query set");
  MethodFlags evf;
  std::string ev_q, ev_db;
  std::optional<std::string> ev_dba, ev_rel, ev_out, ev_sweep;
  bool ev_naive = false;
  add_method_flags(ev, evf);
  ev->add_option("--queries", ev_q, "Labelled query store")->required();
  ev->add_option("--database", ev_db, "Labelled database store")->required();
  ev->add_option("--dba-store", ev_dba, "Augmented database to search instead of --database");
  ev->add_option("--relevance", ev_rel, "Relevant ids per query, one line per query");
  ev->add_option("--sweep-k", ev_sweep, "Comma-separated K values, one report each");
  ev->add_flag("--naive", ev_naive, "GQE through the full recursion instead of precomputed levels");
  ev->add_option("--output", ev_out, "JSON report file (default stdout)");
  ev->callback([&] {
    action = [&] {
      const EmbeddingStore qs = open_store(ev_q, ctx);
      EmbeddingStore db = open_store(ev_db, ctx);
      if (ev_dba) {
        EmbeddingStore aug = open_store(*ev_dba, ctx);
        if (!aug.has_labels() && db.has_labels()) aug.set_labels(db.labels());
        db = std::move(aug);
      }
      std::optional<std::vector<std::set<NodeId>>> rel;
      if (ev_rel) {
        ctx.inputs.push_back(*ev_rel);
        rel = load_relevance(*ev_rel, qs.size());
      }
      MethodSpec ms;
      ms.method = parse_method(evf.method);
      ms.alpha = evf.alpha;
      ms.fast = !ev_naive;
      ms.k = evf.k.value_or(10);
      if (ev_sweep) {
        if (rel) throw UsageError("--sweep-k does not combine with --relevance");
        json arr = json::array();
        for (const auto& r : evaluate_sweep(ms, parse_k_list(*ev_sweep), qs, db)) arr.push_back(r.to_json());
        emit_json(arr, ev_out, out, ctx);
        return;
      }
      std::optional<GQEModel> model;
      std::optional<KnnGraph> graph;
      if (ms.method == QEMethod::kGqe) {
        model = resolve_model(evf.model, evf.levels, evf.k, db, ctx);
        ms.model = &*model;
        graph = open_graph(ev_dba ? std::nullopt : evf.graph, db, model->k(), ctx);
      }
      const EvalReport report = evaluate(ms, qs, db, graph ? &*graph : nullptr, rel ? &*rel : nullptr);
      emit_json(report.to_json(), ev_out, out, ctx);
    };
  });

  // metrics ---------------------------------------------------------------
  auto* met = app.add_subcommand("metrics", "Agreement and Diversity of a GQE expansion");
  MethodFlags mf;
  std::string met_db, met_q;
  std::size_t met_qid = 0;
  std::optional<std::string> met_out;
  met->add_option("--model", mf.model, "Trained GQE model (default: identity-encoder GQE)");
  met->add_option("--levels", mf.levels, "Levels of the identity GQE model")->check(CLI::PositiveNumber)->capture_default_str();
  met->add_option("--k", mf.k, "K of the identity GQE model")->check(CLI::PositiveNumber);
  met->add_option("--graph", mf.graph, "Cached graph over the database");
  met->add_option("--database", met_db, "Labelled database store")->required();
  met->add_option("--queries", met_q, "Labelled query store")->required();
  met->add_option("--query-id", met_qid, "Row of --queries")->required();
  met->add_option("--output", met_out, "JSON output file (default stdout)");
  met->callback([&] {
    action = [&] {
      const EmbeddingStore db = open_store(met_db, ctx);
      const EmbeddingStore qs = open_store(met_q, ctx);
      if (met_qid >= qs.size()) throw UsageError("--query-id out of range");
      if (!db.has_labels() || !qs.has_labels()) throw DataError("metrics need labelled query and database stores");
      const GQEModel model = resolve_model(mf.model, mf.levels, mf.k, db, ctx);
      const KnnGraph graph = open_graph(mf.graph, db, model.k(), ctx);
      const Expansion e = expand_naive(model, qs.row_d(met_qid), graph, db);
      const auto label = qs.label(met_qid);
      double total = 0.0;
      for (const auto& [id, w] : e.attribution.clamped()) total += w;
      json j{{"query_id", met_qid},
             {"agreement", agreement(e.attribution, db.labels(), label)},
             {"diversity", diversity(e.attribution, db.labels(), label)},
             {"query_weight", e.attribution.query_weight},
             {"database_weight", total},
             {"support", e.attribution.weights.size()}};
      emit_json(j, met_out, out, ctx);
    };
  });

  std::vector<const char*> argv;
  argv.push_back("gqe");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    set_thread_count(common.threads);
    const auto t0 = std::chrono::steady_clock::now();
    action();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(app, *sub, ctx, secs);
  } catch (const UsageError& e) {
    err << "gqe " << sub->get_name() << ": " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    err << "gqe " << sub->get_name() << ": " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "gqe " << sub->get_name() << ": " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace gqe
