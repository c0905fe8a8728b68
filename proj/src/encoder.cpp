#include "gqe/encoder.hpp"

#include <cmath>

namespace gqe {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

RowMatrixD row_zeros(std::size_t n) { return RowMatrixD::Zero(1, static_cast<Eigen::Index>(n)); }
RowMatrixD row_ones(std::size_t n) { return RowMatrixD::Ones(1, static_cast<Eigen::Index>(n)); }
RowMatrixD mat_zeros(std::size_t r, std::size_t c) {
  return RowMatrixD::Zero(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

RowMatrixD affine(const RowMatrixD& x, const RowMatrixD& w, const RowMatrixD& b) {
  RowMatrixD y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

// Row-wise layer norm; keeps xhat and 1/sigma per row for the backward pass.
RowMatrixD layer_norm(const RowMatrixD& x, const RowMatrixD& gain, const RowMatrixD& bias,
                      RowMatrixD& xhat, VectorD& rstd) {
  const Eigen::Index n = x.rows();
  xhat.resize(n, x.cols());
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd[r];
  }
  RowMatrixD y = xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

RowMatrixD layer_norm_backward(const RowMatrixD& dy, const RowMatrixD& xhat, const VectorD& rstd,
                               const RowMatrixD& gain, RowMatrixD& dgain, RowMatrixD& dbias) {
  dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  RowMatrixD dxhat = dy.array().rowwise() * gain.row(0).array();
  RowMatrixD dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).mean();
    const double m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
    dx.row(r) = rstd[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
  }
  return dx;
}

void softmax_rows(RowMatrixD& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    s.row(r).array() -= s.row(r).maxCoeff();
    s.row(r) = s.row(r).array().exp();
    s.row(r) /= s.row(r).sum();
  }
}

}  // namespace

double gelu(double z) { return 0.5 * z * (1.0 + std::tanh(kGeluC * (z + kGeluA * z * z * z))); }

double gelu_derivative(double z) {
  const double t = std::tanh(kGeluC * (z + kGeluA * z * z * z));
  return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * z * z);
}

void EncoderConfig::validate() const {
  if (dim < 1) throw UsageError("encoder dim must be positive");
  if (variant == EncoderVariant::kIdentity) return;
  if (variant != EncoderVariant::kAttention) throw UsageError("unknown encoder variant");
  if (heads < 1 || layers < 1 || ff_dim < 1) {
    throw UsageError("encoder heads, layers and ff_dim must be positive");
  }
  if (dim % heads != 0) {
    throw UsageError("encoder heads (" + std::to_string(heads) + ") must divide dim (" +
                     std::to_string(dim) + ")");
  }
}

EncoderWeights EncoderWeights::zeros(const EncoderConfig& config) {
  config.validate();
  EncoderWeights w;
  if (config.variant == EncoderVariant::kIdentity) return w;
  const std::size_t f = config.dim, ff = config.ff_dim;
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayer layer;
    layer.ln1_gain = row_zeros(f);
    layer.ln1_bias = row_zeros(f);
    layer.wq = mat_zeros(f, f);
    layer.bq = row_zeros(f);
    layer.wk = mat_zeros(f, f);
    layer.bk = row_zeros(f);
    layer.wv = mat_zeros(f, f);
    layer.bv = row_zeros(f);
    layer.wo = mat_zeros(f, f);
    layer.bo = row_zeros(f);
    layer.ln2_gain = row_zeros(f);
    layer.ln2_bias = row_zeros(f);
    layer.w1 = mat_zeros(f, ff);
    layer.b1 = row_zeros(ff);
    layer.w2 = mat_zeros(ff, f);
    layer.b2 = row_zeros(f);
    w.layers.push_back(std::move(layer));
  }
  return w;
}

EncoderWeights EncoderWeights::random(const EncoderConfig& config, double scale,
                                      std::mt19937_64& rng) {
  EncoderWeights w = zeros(config);
  for (auto& layer : w.layers) {
    layer.ln1_gain = row_ones(config.dim);
    layer.ln2_gain = row_ones(config.dim);
    for (RowMatrixD* m : {&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w1, &layer.w2}) {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = scale * standard_normal(rng);
    }
  }
  return w;
}

RowMatrixD encoder_forward(const EncoderConfig& config, const EncoderWeights& weights,
                           const RowMatrixD& tokens, EncoderCache* cache) {
  if (static_cast<std::size_t>(tokens.cols()) != config.dim) {
    throw DataError("encoder shape mismatch: tokens have " + std::to_string(tokens.cols()) +
                    " columns, encoder dim is " + std::to_string(config.dim));
  }
  if (config.variant == EncoderVariant::kIdentity) return tokens;
  if (weights.layers.size() != config.layers) throw DataError("encoder weights do not match config");

  const std::size_t heads = config.heads;
  const Eigen::Index dh = static_cast<Eigen::Index>(config.dim / heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (cache) cache->layers.assign(config.layers, {});
  RowMatrixD x = tokens;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const EncoderLayer& w = weights.layers[l];
    LayerCache local;
    LayerCache& c = cache ? cache->layers[l] : local;
    c.x_in = x;

    c.h1 = layer_norm(x, w.ln1_gain, w.ln1_bias, c.xhat1, c.rstd1);
    c.q = affine(c.h1, w.wq, w.bq);
    c.k = affine(c.h1, w.wk, w.bk);
    c.v = affine(c.h1, w.wv, w.bv);
    c.o.resize(x.rows(), x.cols());
    c.attn.resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
      RowMatrixD s = c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose() * scale;
      softmax_rows(s);
      c.o.middleCols(off, dh) = s * c.v.middleCols(off, dh);
      c.attn[h] = std::move(s);
    }
    x += affine(c.o, w.wo, w.bo);
    c.x_mid = x;

    c.h2 = layer_norm(x, w.ln2_gain, w.ln2_bias, c.xhat2, c.rstd2);
    c.z = affine(c.h2, w.w1, w.b1);
    c.g = c.z.unaryExpr([](double v) { return gelu(v); });
    x += affine(c.g, w.w2, w.b2);
  }
  return x;
}

RowMatrixD encoder_backward(const EncoderConfig& config, const EncoderWeights& weights,
                            const EncoderCache& cache, const RowMatrixD& grad_out,
                            EncoderWeights& grads) {
  if (config.variant == EncoderVariant::kIdentity) return grad_out;

  const std::size_t heads = config.heads;
  const Eigen::Index dh = static_cast<Eigen::Index>(config.dim / heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  RowMatrixD dx = grad_out;
  for (std::size_t li = config.layers; li-- > 0;) {
    const EncoderLayer& w = weights.layers[li];
    EncoderLayer& gw = grads.layers[li];
    const LayerCache& c = cache.layers[li];

    // Feed-forward sublayer: x_out = x_mid + gelu(LN2(x_mid) W1 + b1) W2 + b2.
    gw.w2 += c.g.transpose() * dx;
    gw.b2.row(0) += dx.colwise().sum();
    RowMatrixD dz = (dx * w.w2.transpose()).array() *
                    c.z.unaryExpr([](double v) { return gelu_derivative(v); }).array();
    gw.w1 += c.h2.transpose() * dz;
    gw.b1.row(0) += dz.colwise().sum();
    RowMatrixD dh2 = dz * w.w1.transpose();
    dx += layer_norm_backward(dh2, c.xhat2, c.rstd2, w.ln2_gain, gw.ln2_gain, gw.ln2_bias);

    // Attention sublayer: x_mid = x_in + MHA(LN1(x_in)) Wo + bo.
    gw.wo += c.o.transpose() * dx;
    gw.bo.row(0) += dx.colwise().sum();
    RowMatrixD d_o = dx * w.wo.transpose();
    RowMatrixD dq(dx.rows(), dx.cols()), dk(dx.rows(), dx.cols()), dv(dx.rows(), dx.cols());
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
      const RowMatrixD& a = c.attn[h];
      RowMatrixD da = d_o.middleCols(off, dh) * c.v.middleCols(off, dh).transpose();
      dv.middleCols(off, dh) = a.transpose() * d_o.middleCols(off, dh);
      RowMatrixD ds = a.array() * (da.colwise() - (da.array() * a.array()).rowwise().sum().matrix()).array();
      ds *= scale;
      dq.middleCols(off, dh) = ds * c.k.middleCols(off, dh);
      dk.middleCols(off, dh) = ds.transpose() * c.q.middleCols(off, dh);
    }
    gw.wq += c.h1.transpose() * dq;
    gw.bq.row(0) += dq.colwise().sum();
    gw.wk += c.h1.transpose() * dk;
    gw.bk.row(0) += dk.colwise().sum();
    gw.wv += c.h1.transpose() * dv;
    gw.bv.row(0) += dv.colwise().sum();
    RowMatrixD dh1 = dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
    dx += layer_norm_backward(dh1, c.xhat1, c.rstd1, w.ln1_gain, gw.ln1_gain, gw.ln1_bias);
  }
  return dx;
}

}  // namespace gqe
