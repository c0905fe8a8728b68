#include "gqe/embed_store.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace gqe {

namespace {

constexpr std::uint32_t kFlagNormalized = 1u;
constexpr double kNormTolerance = 1e-5;

void normalize_rows(RowMatrixF& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    double sq = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      if (!std::isfinite(v)) throw DataError("non-finite value in row " + std::to_string(r));
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm == 0.0) throw DataError("zero vector at row " + std::to_string(r));
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = static_cast<float>(static_cast<double>(m(r, c)) / norm);
    }
  }
}

void check_finite(const RowMatrixF& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!std::isfinite(m.data()[i])) {
      throw DataError("non-finite value in row " + std::to_string(i / m.cols()));
    }
  }
}

bool rows_unit(const RowMatrixF& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).cast<double>().norm();
    if (std::abs(n - 1.0) > kNormTolerance) return false;
  }
  return true;
}

}  // namespace

EmbeddingStore::EmbeddingStore(RowMatrixF vectors,
                               std::optional<std::vector<std::uint32_t>> labels, bool normalize)
    : vectors_(std::move(vectors)) {
  if (vectors_.rows() == 0 || vectors_.cols() == 0) throw DataError("empty embedding store");
  if (normalize) {
    normalize_rows(vectors_);
    normalized_ = true;
  } else {
    check_finite(vectors_);
    normalized_ = rows_unit(vectors_);
  }
  if (labels) set_labels(std::move(*labels));
}

VectorD EmbeddingStore::row_d(std::size_t id) const {
  return vectors_.row(static_cast<Eigen::Index>(id)).cast<double>().transpose();
}

std::uint32_t EmbeddingStore::label(std::size_t id) const { return labels().at(id); }

const std::vector<std::uint32_t>& EmbeddingStore::labels() const {
  if (!labels_) throw DataError("store has no labels");
  return *labels_;
}

void EmbeddingStore::set_labels(std::vector<std::uint32_t> labels) {
  if (labels.size() != size()) {
    throw DataError("label count " + std::to_string(labels.size()) + " does not match store size " +
                    std::to_string(size()));
  }
  labels_ = std::move(labels);
}

Digest EmbeddingStore::digest() const {
  Hasher h;
  h.update("EMB1");
  h.update_pod(static_cast<std::uint32_t>(dim()));
  h.update_pod(static_cast<std::uint32_t>(size()));
  h.update(vectors_.data(), sizeof(float) * static_cast<std::size_t>(vectors_.size()));
  return h.finish();
}

SyntheticSplit generate_synthetic_split(const SynthSpec& spec, std::uint32_t queries_per_cluster) {
  if (spec.clusters < 2) throw UsageError("synthetic spec needs clusters >= 2");
  if (spec.dim < 2) throw UsageError("synthetic spec needs dim >= 2");
  if (spec.points_per_cluster < 1) throw UsageError("synthetic spec needs points_per_cluster >= 1");
  if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma)) {
    throw UsageError("synthetic spec needs a finite non-negative noise_sigma");
  }

  std::mt19937_64 rng(spec.seed);
  auto gaussian = [&rng] { return standard_normal(rng); };

  const std::size_t dim = spec.dim;
  RowMatrixD centers(spec.clusters, dim);
  for (std::uint32_t c = 0; c < spec.clusters; ++c) {
    double sq = 0.0;
    do {
      for (std::size_t j = 0; j < dim; ++j) centers(c, j) = gaussian();
      sq = centers.row(c).squaredNorm();
    } while (sq == 0.0);
    centers.row(c) /= std::sqrt(sq);
  }

  auto draw = [&](std::uint32_t per_cluster) {
    const std::size_t n = std::size_t{spec.clusters} * per_cluster;
    RowMatrixF m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    std::vector<std::uint32_t> labels(n);
    std::size_t row = 0;
    for (std::uint32_t c = 0; c < spec.clusters; ++c) {
      for (std::uint32_t p = 0; p < per_cluster; ++p, ++row) {
        VectorD v = centers.row(c).transpose();
        for (std::size_t j = 0; j < dim; ++j) v[j] += spec.noise_sigma * gaussian();
        v /= v.norm();
        m.row(row) = v.transpose().cast<float>();
        labels[row] = c;
      }
    }
    return std::pair{std::move(m), std::move(labels)};
  };

  auto [db, db_labels] = draw(spec.points_per_cluster);
  SyntheticSplit out;
  out.database = EmbeddingStore(std::move(db), std::move(db_labels), false);
  if (queries_per_cluster > 0) {
    auto [q, q_labels] = draw(queries_per_cluster);
    out.queries = EmbeddingStore(std::move(q), std::move(q_labels), false);
  }
  return out;
}

EmbeddingStore generate_synthetic(const SynthSpec& spec) {
  return generate_synthetic_split(spec, 0).database;
}

std::string labels_path_for(const std::string& store_path) { return store_path + ".labels"; }

EmbeddingStore load_store(const std::string& path, bool normalize,
                          const std::optional<std::string>& labels_path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding store " + path);
  binio::expect_magic(in, "EMB1", path);
  const std::uint32_t dim = binio::read_u32(in, path);
  const std::uint32_t count = binio::read_u32(in, path);
  const std::uint32_t flags = binio::read_u32(in, path);
  if (dim == 0 || count == 0) throw DataError("malformed header in " + path + ": zero dim or count");

  RowMatrixF m(count, dim);
  const std::size_t bytes = sizeof(float) * std::size_t{count} * dim;
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) {
    throw DataError("dimension mismatch in " + path + ": header declares " + std::to_string(count) +
                    "x" + std::to_string(dim) + " values but payload is shorter");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("dimension mismatch in " + path + ": trailing bytes after payload");
  }

  // A store flagged as normalised is re-validated rather than re-normalised
  // so that save/load stays bit-exact.
  const bool already_unit = (flags & kFlagNormalized) != 0;
  EmbeddingStore store(std::move(m), std::nullopt, normalize && !already_unit);
  if (normalize && !store.normalized()) {
    throw DataError("store " + path + " is flagged normalised but has non-unit rows");
  }

  const std::string lp = labels_path.value_or(labels_path_for(path));
  if (labels_path || std::filesystem::exists(lp)) store.set_labels(load_labels(lp, store.size()));
  return store;
}

void save_store(const EmbeddingStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write embedding store " + path);
  out.write("EMB1", 4);
  binio::write_u32(out, static_cast<std::uint32_t>(store.dim()));
  binio::write_u32(out, static_cast<std::uint32_t>(store.size()));
  binio::write_u32(out, store.normalized() ? kFlagNormalized : 0u);
  binio::write_bytes(out, store.matrix().data(),
                     sizeof(float) * static_cast<std::size_t>(store.matrix().size()));
  out.close();
  if (!out) throw IoError("failed writing " + path);
  if (store.has_labels()) save_labels(store.labels(), labels_path_for(path));
}

std::vector<std::uint32_t> load_labels(const std::string& path, std::size_t count) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label file " + path);
  std::vector<std::uint32_t> labels;
  labels.reserve(count);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    long long id = -1, label = -1;
    char comma = 0;
    std::istringstream ls(line);
    if (!(ls >> id >> comma >> label) || comma != ',' || label < 0) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 'id,label'");
    }
    if (id != static_cast<long long>(labels.size())) {
      throw DataError(path + ":" + std::to_string(lineno) + ": ids must be dense and ascending");
    }
    labels.push_back(static_cast<std::uint32_t>(label));
  }
  if (labels.size() != count) {
    throw DataError(path + ": " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(count) + " embeddings");
  }
  return labels;
}

void save_labels(const std::vector<std::uint32_t>& labels, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write label file " + path);
  for (std::size_t i = 0; i < labels.size(); ++i) out << i << ',' << labels[i] << '\n';
  if (!out) throw IoError("failed writing " + path);
}

EmbeddingStore load_text_store(const std::string& path, bool normalize) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<float> values;
  std::size_t dim = 0, rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::size_t count = 0;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        const float v = std::stof(cell, &used);
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(cell);
        values.push_back(v);
      } catch (const std::exception&) {
        throw DataError(path + ":" + std::to_string(rows + 1) + ": cannot parse '" + cell + "'");
      }
      ++count;
    }
    if (rows == 0) dim = count;
    if (count != dim) {
      throw DataError(path + ":" + std::to_string(rows + 1) + ": expected " + std::to_string(dim) +
                      " values, got " + std::to_string(count));
    }
    ++rows;
  }
  if (rows == 0) throw DataError(path + ": no embeddings");
  RowMatrixF m = Eigen::Map<RowMatrixF>(values.data(), static_cast<Eigen::Index>(rows),
                                        static_cast<Eigen::Index>(dim));
  return EmbeddingStore(std::move(m), std::nullopt, normalize);
}

}  // namespace gqe
