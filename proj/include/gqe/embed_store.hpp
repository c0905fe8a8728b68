#pragma once

#include "gqe/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gqe {

/// Dense, id-indexed matrix of embeddings with optional integer class labels.
///
/// Rows are float32 as on disk. Stores produced by `load_store(.., true)`,
/// `generate_synthetic` or DBA are unit-norm; downstream code relies on it.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;

  /// Takes ownership of `vectors` (N x F). When `normalize` is set every row is
  /// L2-normalised; a zero or non-finite row raises DataError.
  EmbeddingStore(RowMatrixF vectors, std::optional<std::vector<std::uint32_t>> labels,
                 bool normalize);

  std::size_t size() const { return static_cast<std::size_t>(vectors_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors_.cols()); }
  bool normalized() const { return normalized_; }

  std::span<const float> row(std::size_t id) const {
    return {vectors_.data() + id * dim(), dim()};
  }
  VectorD row_d(std::size_t id) const;
  const RowMatrixF& matrix() const { return vectors_; }

  bool has_labels() const { return labels_.has_value(); }
  std::uint32_t label(std::size_t id) const;
  const std::vector<std::uint32_t>& labels() const;
  void set_labels(std::vector<std::uint32_t> labels);

  /// SHA-256 over dim, count and the raw row bytes (labels excluded).
  Digest digest() const;

 private:
  RowMatrixF vectors_;
  std::optional<std::vector<std::uint32_t>> labels_;
  bool normalized_ = false;
};

struct SynthSpec {
  std::uint32_t clusters = 16;
  std::uint32_t points_per_cluster = 100;
  std::uint32_t dim = 32;
  double noise_sigma = 0.22;
  std::uint64_t seed = 0;
};

struct SyntheticSplit {
  EmbeddingStore database;
  EmbeddingStore queries;
};

/// Clustered dataset: centres uniform on the unit sphere, points are
/// normalize(centre + N(0, sigma^2 I)); label = cluster index.
EmbeddingStore generate_synthetic(const SynthSpec& spec);

/// Same database as `generate_synthetic(spec)` plus `queries_per_cluster`
/// held-out points per cluster drawn afterwards from the same stream.
SyntheticSplit generate_synthetic_split(const SynthSpec& spec, std::uint32_t queries_per_cluster);

/// Sibling label file used by save/load: "<path>.labels".
std::string labels_path_for(const std::string& store_path);

/// Reads the binary EMB1 format. Labels come from `labels_path` when given,
/// otherwise from the sibling label file if it exists.
EmbeddingStore load_store(const std::string& path, bool normalize,
                          const std::optional<std::string>& labels_path = std::nullopt);
void save_store(const EmbeddingStore& store, const std::string& path);

std::vector<std::uint32_t> load_labels(const std::string& path, std::size_t count);
void save_labels(const std::vector<std::uint32_t>& labels, const std::string& path);

/// One embedding per line, comma-separated decimals.
EmbeddingStore load_text_store(const std::string& path, bool normalize);

}  // namespace gqe
