#pragma once

#include "gqe/retrieval_eval.hpp"
#include "gqe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace gqe::testing {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline EmbeddingStore random_store(std::size_t n, std::size_t f, std::mt19937_64& rng,
                                   std::size_t num_labels = 0) {
  RowMatrixF m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(standard_normal(rng));
  std::optional<std::vector<std::uint32_t>> labels;
  if (num_labels > 0) {
    labels.emplace(n);
    for (std::size_t i = 0; i < n; ++i) (*labels)[i] = static_cast<std::uint32_t>(i % num_labels);
  }
  return EmbeddingStore(std::move(m), std::move(labels), true);
}

inline VectorD random_unit(std::size_t f, std::mt19937_64& rng) {
  VectorD v(static_cast<Eigen::Index>(f));
  for (auto& x : v) x = standard_normal(rng);
  return v.normalized();
}

inline EmbeddingStore store_from_rows(const Mat& rows, bool normalize = true,
                                      std::optional<std::vector<std::uint32_t>> labels = std::nullopt) {
  RowMatrixF m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = static_cast<float>(rows[i][j]);
  return EmbeddingStore(std::move(m), std::move(labels), normalize);
}

inline VectorD vec(std::initializer_list<double> v) {
  VectorD out(static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("gqe_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

// Reference implementations below use nested std::vector loops and share no
// code with the library beyond the parameter containers.
namespace oracle {

inline Vec row_of(const EmbeddingStore& s, std::size_t id) {
  Vec v(s.dim());
  for (std::size_t j = 0; j < s.dim(); ++j) v[j] = s.matrix()(id, j);
  return v;
}

inline double dotv(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Vec normalized(Vec v) {
  const double n = std::sqrt(dotv(v, v));
  for (double& x : v) x /= n;
  return v;
}

inline Vec to_vec(const VectorD& v) { return Vec(v.data(), v.data() + v.size()); }

// Top-k ids by cosine, ties by id; `skip` excluded.
inline std::vector<NodeId> knn(const EmbeddingStore& s, const Vec& q, std::size_t k, long long skip = -1) {
  std::vector<std::pair<double, NodeId>> all;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (static_cast<long long>(j) == skip) continue;
    all.push_back({dotv(q, row_of(s, j)), static_cast<NodeId>(j)});
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < k && i < all.size(); ++i) out.push_back(all[i].second);
  return out;
}

inline double at(const RowMatrixD& m, std::size_t r, std::size_t c) {
  return m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline Mat layer_norm(const Mat& x, const RowMatrixD& g, const RowMatrixD& b) {
  Mat y = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    double mean = 0.0;
    for (double v : x[r]) mean += v;
    mean /= static_cast<double>(x[r].size());
    double var = 0.0;
    for (double v : x[r]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x[r].size());
    for (std::size_t c = 0; c < x[r].size(); ++c)
      y[r][c] = (x[r][c] - mean) / std::sqrt(var + 1e-5) * at(g, 0, c) + at(b, 0, c);
  }
  return y;
}

inline Mat linear(const Mat& x, const RowMatrixD& w, const RowMatrixD& b) {
  Mat y(x.size(), Vec(static_cast<std::size_t>(w.cols())));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < y[r].size(); ++o) {
      double s = at(b, 0, o);
      for (std::size_t i = 0; i < x[r].size(); ++i) s += x[r][i] * at(w, i, o);
      y[r][o] = s;
    }
  return y;
}

inline double gelu_tanh(double z) {
  const double pi = 3.14159265358979323846;
  return 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / pi) * (z + 0.044715 * z * z * z)));
}

inline Mat encoder(const EncoderConfig& cfg, const EncoderWeights& w, Mat x) {
  if (cfg.variant == EncoderVariant::kIdentity) return x;
  const std::size_t n = x.size(), f = cfg.dim, dh = f / cfg.heads;
  for (const EncoderLayer& L : w.layers) {
    const Mat h = layer_norm(x, L.ln1_gain, L.ln1_bias);
    const Mat q = linear(h, L.wq, L.bq), k = linear(h, L.wk, L.bk), v = linear(h, L.wv, L.bv);
    Mat o(n, Vec(f, 0.0));
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      for (std::size_t r = 0; r < n; ++r) {
        Vec s(n);
        double mx = -1e300;
        for (std::size_t c = 0; c < n; ++c) {
          double d = 0.0;
          for (std::size_t e = hd * dh; e < (hd + 1) * dh; ++e) d += q[r][e] * k[c][e];
          s[c] = d / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[c]);
        }
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t c = 0; c < n; ++c)
          for (std::size_t e = hd * dh; e < (hd + 1) * dh; ++e) o[r][e] += s[c] / z * v[c][e];
      }
    }
    const Mat a = linear(o, L.wo, L.bo);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < f; ++c) x[r][c] += a[r][c];
    Mat z = linear(layer_norm(x, L.ln2_gain, L.ln2_bias), L.w1, L.b1);
    for (auto& row : z)
      for (double& e : row) e = gelu_tanh(e);
    const Mat ff = linear(z, L.w2, L.b2);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < f; ++c) x[r][c] += ff[r][c];
  }
  return x;
}

struct AggOut {
  Vec output;
  Vec weights;
  double norm = 0.0;
};

inline AggOut aggregate(const AggregatorParams& p, const Vec& node, const Mat& nbrs) {
  Mat inputs{node};
  inputs.insert(inputs.end(), nbrs.begin(), nbrs.end());
  AggOut out;
  if (p.passthrough) {
    out.weights.assign(inputs.size(), 0.0);
    out.weights[0] = 1.0;
  } else {
    Mat tokens = inputs;
    for (std::size_t r = 0; r < tokens.size(); ++r)
      for (std::size_t c = 0; c < tokens[r].size(); ++c) tokens[r][c] += at(p.positional, r, c);
    const Mat e = encoder(p.encoder, p.weights, tokens);
    out.weights.push_back(1.0);
    for (std::size_t i = 1; i < e.size(); ++i)
      out.weights.push_back(dotv(e[0], e[i]) / std::sqrt(dotv(e[0], e[0]) * dotv(e[i], e[i])));
    if (p.temperature) {
      double z = 0.0;
      for (double& w : out.weights) z += (w = std::exp(w / *p.temperature));
      for (double& w : out.weights) w /= z;
    }
  }
  Vec sum(node.size(), 0.0);
  for (std::size_t r = 0; r < inputs.size(); ++r)
    for (std::size_t c = 0; c < sum.size(); ++c) sum[c] += out.weights[r] * inputs[r][c];
  out.norm = std::sqrt(dotv(sum, sum));
  out.output = sum;
  for (double& x : out.output) x /= out.norm;
  return out;
}

// Plain recursion: u^i = agg_i(u^(i-1), nbrs^(i-1)). Query neighbours from a
// brute-force search, database neighbours from a brute-force search that skips
// the node itself.
inline Vec embed(const GQEModel& m, const EmbeddingStore& s, long long node, const Vec& q, std::size_t level) {
  const Vec self = node < 0 ? q : row_of(s, static_cast<std::size_t>(node));
  if (level == 0) return self;
  const auto ids = knn(s, self, m.k(), node);
  Mat nb;
  for (NodeId id : ids) nb.push_back(embed(m, s, id, q, level - 1));
  return aggregate(m.levels[level - 1], embed(m, s, node, q, level - 1), nb).output;
}

inline Vec expand(const GQEModel& m, const EmbeddingStore& s, const Vec& q) {
  return embed(m, s, -1, q, m.num_levels());
}

inline double max_abs_diff(const Vec& a, const VectorD& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[static_cast<Eigen::Index>(i)]));
  return d;
}

}  // namespace oracle

inline double max_abs_diff(const VectorD& a, const VectorD& b) { return (a - b).cwiseAbs().maxCoeff(); }

inline double cosine(const VectorD& a, const VectorD& b) { return a.dot(b) / (a.norm() * b.norm()); }

inline EncoderConfig tiny_encoder(std::size_t f, std::size_t heads = 2, std::size_t ff = 16) {
  EncoderConfig c;
  c.dim = f;
  c.heads = heads;
  c.layers = 1;
  c.ff_dim = ff;
  return c;
}

// Random biases and norm parameters too, so every tensor carries signal.
inline GQEModel dense_random_model(const EncoderConfig& enc, std::size_t k, std::size_t levels, double scale,
                                   std::mt19937_64& rng) {
  GQEModel m = GQEModel::random(enc, k, levels, scale, rng);
  for (auto& p : m.levels) {
    p.for_each_tensor([&](const std::string& name, RowMatrixD& t) {
      const bool gain = name.find("gain") != std::string::npos;
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = (gain ? 1.0 : 0.0) + scale * standard_normal(rng);
    });
  }
  m.quantize();
  return m;
}

}  // namespace gqe::testing
