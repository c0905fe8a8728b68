#pragma once

#include "gqe/common.hpp"

#include <random>

namespace gqe {

enum class EncoderVariant : std::uint32_t { kIdentity = 0, kAttention = 1 };

struct EncoderConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t layers = 1;
  std::size_t ff_dim = 64;
  EncoderVariant variant = EncoderVariant::kAttention;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// One pre-norm transformer block. Vectors are stored as 1 x n rows and
// projections act on row vectors: y = x W + b.
struct EncoderLayer {
  RowMatrixD ln1_gain, ln1_bias;
  RowMatrixD wq, bq, wk, bk, wv, bv, wo, bo;
  RowMatrixD ln2_gain, ln2_bias;
  RowMatrixD w1, b1, w2, b2;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("ln1_gain", self.ln1_gain);
    f("ln1_bias", self.ln1_bias);
    f("wq", self.wq);
    f("bq", self.bq);
    f("wk", self.wk);
    f("bk", self.bk);
    f("wv", self.wv);
    f("bv", self.bv);
    f("wo", self.wo);
    f("bo", self.bo);
    f("ln2_gain", self.ln2_gain);
    f("ln2_bias", self.ln2_bias);
    f("w1", self.w1);
    f("b1", self.b1);
    f("w2", self.w2);
    f("b2", self.b2);
  }
};

struct EncoderWeights {
  std::vector<EncoderLayer> layers;

  /// Zero-filled weights shaped for `config` (empty for IDENTITY).
  static EncoderWeights zeros(const EncoderConfig& config);
  /// Gaussian(0, scale) projections, unit norm gains, zero biases.
  static EncoderWeights random(const EncoderConfig& config, double scale, std::mt19937_64& rng);

  /// Calls f(name, tensor) for every tensor in declaration order.
  template <typename F>
  void for_each(F&& f) {
    visit_layers(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_layers(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_layers(Self& self, F& f) {
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      EncoderLayer::visit(self.layers[l], [&](const char* name, auto& t) { f(prefix + name, t); });
    }
  }
};

struct LayerCache {
  RowMatrixD x_in, xhat1, h1, q, k, v, o, x_mid, xhat2, h2, z, g;
  VectorD rstd1, rstd2;
  std::vector<RowMatrixD> attn;  // per-head softmax probabilities
};

struct EncoderCache {
  std::vector<LayerCache> layers;
};

/// Runs the encoder over a (K+1) x F token matrix. IDENTITY returns the input.
/// When `cache` is non-null the activations needed by encoder_backward are kept.
RowMatrixD encoder_forward(const EncoderConfig& config, const EncoderWeights& weights,
                           const RowMatrixD& tokens, EncoderCache* cache = nullptr);

/// Back-propagates dL/d(output) through a cached forward pass; parameter
/// gradients are accumulated into `grads`, the input gradient is returned.
RowMatrixD encoder_backward(const EncoderConfig& config, const EncoderWeights& weights,
                            const EncoderCache& cache, const RowMatrixD& grad_out,
                            EncoderWeights& grads);

double gelu(double z);
double gelu_derivative(double z);

constexpr double kLayerNormEps = 1e-5;

}  // namespace gqe
