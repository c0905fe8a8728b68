#include "gqe/aggregator.hpp"

#include <cmath>
#include <fstream>

namespace gqe {

namespace {

constexpr std::uint32_t kParamsVersion = 1;
constexpr std::uint32_t kFlagTemperature = 1u;
constexpr std::uint32_t kFlagPassthrough = 2u;

}  // namespace

AggregatorParams AggregatorParams::zeros(const EncoderConfig& encoder, std::size_t k) {
  encoder.validate();
  if (k < 1) throw UsageError("aggregator k must be >= 1");
  AggregatorParams p;
  p.encoder = encoder;
  p.k = k;
  p.positional = RowMatrixD::Zero(static_cast<Eigen::Index>(k + 1), static_cast<Eigen::Index>(encoder.dim));
  p.weights = EncoderWeights::zeros(encoder);
  return p;
}

AggregatorParams AggregatorParams::random(const EncoderConfig& encoder, std::size_t k, double scale,
                                          std::mt19937_64& rng) {
  AggregatorParams p = zeros(encoder, k);
  for (Eigen::Index i = 0; i < p.positional.size(); ++i) p.positional.data()[i] = scale * standard_normal(rng);
  p.weights = EncoderWeights::random(encoder, scale, rng);
  return p;
}

AggregatorParams AggregatorParams::zeros_like() const {
  AggregatorParams g = *this;
  g.for_each_tensor([](const std::string&, RowMatrixD& t) { t.setZero(); });
  return g;
}

std::size_t AggregatorParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&n](const std::string&, const RowMatrixD& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

void AggregatorParams::quantize() {
  for_each_tensor([](const std::string&, RowMatrixD& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(t.data()[i]);
  });
  if (temperature) temperature = static_cast<float>(*temperature);
}

void AggregatorParams::check_finite() const {
  for_each_tensor([](const std::string& name, const RowMatrixD& t) {
    if (!t.allFinite()) throw DataError("non-finite value in parameter " + name);
  });
}

AggregateResult aggregate(const AggregatorParams& params, const RowMatrixD& inputs,
                          AggregateCache* cache) {
  const Eigen::Index m1 = inputs.rows();  // node + neighbours
  if (static_cast<std::size_t>(inputs.cols()) != params.dim()) {
    throw DataError("dimension mismatch: aggregator expects F=" + std::to_string(params.dim()) +
                    ", inputs have F=" + std::to_string(inputs.cols()));
  }
  if (m1 < 1 || static_cast<std::size_t>(m1) > params.k + 1) {
    throw DataError("aggregator called with " + std::to_string(m1 - 1) + " neighbours, k=" +
                    std::to_string(params.k));
  }

  AggregateCache local;
  AggregateCache& c = cache ? *cache : local;
  c.inputs = inputs;
  c.raw_sims = VectorD::Zero(m1);
  c.raw_sims[0] = 1.0;

  if (params.passthrough) {
    c.weights = c.raw_sims;
    c.sum = inputs.row(0).transpose();
  } else {
    RowMatrixD tokens = inputs + params.positional.topRows(m1);
    c.encoded = encoder_forward(params.encoder, params.weights, tokens, cache ? &c.encoder : nullptr);
    if (!c.encoded.allFinite()) throw DataError("non-finite encoder output");
    const double n0 = c.encoded.row(0).norm();
    for (Eigen::Index i = 1; i < m1; ++i) {
      c.raw_sims[i] = c.encoded.row(0).dot(c.encoded.row(i)) / (n0 * c.encoded.row(i).norm());
    }
    if (!c.raw_sims.allFinite()) throw DataError("non-finite similarity from encoder output");

    if (params.temperature) {
      VectorD z = c.raw_sims / *params.temperature;
      z.array() -= z.maxCoeff();
      z = z.array().exp();
      c.weights = z / z.sum();
    } else {
      c.weights = c.raw_sims;
    }
    c.sum = inputs.transpose() * c.weights;
  }

  const double norm = c.sum.norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) throw DataError("aggregation produced a zero or non-finite vector");
  c.output = c.sum / norm;

  AggregateResult result;
  result.output = c.output;
  result.trace.sims.assign(c.weights.data(), c.weights.data() + c.weights.size());
  result.trace.norm = norm;
  return result;
}

AggregateResult aggregate(const AggregatorParams& params, const VectorD& node,
                          const std::vector<VectorD>& neighbors) {
  RowMatrixD inputs(static_cast<Eigen::Index>(neighbors.size() + 1), node.size());
  inputs.row(0) = node.transpose();
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    if (neighbors[i].size() != node.size()) throw DataError("dimension mismatch among aggregator inputs");
    inputs.row(static_cast<Eigen::Index>(i + 1)) = neighbors[i].transpose();
  }
  return aggregate(params, inputs);
}

RowMatrixD aggregate_backward(const AggregatorParams& params, const AggregateCache& c,
                              const VectorD& grad_output, AggregatorParams& grads) {
  const Eigen::Index m1 = c.inputs.rows();
  const double norm = c.sum.norm();

  // output = sum / |sum|
  const VectorD d_sum = (grad_output - c.output * c.output.dot(grad_output)) / norm;

  // sum = inputs^T weights
  RowMatrixD d_inputs = c.weights * d_sum.transpose();
  if (params.passthrough) return d_inputs;

  const VectorD d_weights = c.inputs * d_sum;
  VectorD d_raw;
  if (params.temperature) {
    const double mean = c.weights.dot(d_weights);
    d_raw = c.weights.array() * (d_weights.array() - mean) / *params.temperature;
  } else {
    d_raw = d_weights;
  }

  // raw_sims[i] = cos(e0, ei) for i >= 1; raw_sims[0] is the constant 1.
  RowMatrixD d_encoded = RowMatrixD::Zero(m1, c.encoded.cols());
  const auto e0 = c.encoded.row(0);
  const double n0 = e0.norm();
  for (Eigen::Index i = 1; i < m1; ++i) {
    const auto ei = c.encoded.row(i);
    const double ni = ei.norm();
    const double cos = c.raw_sims[i];
    d_encoded.row(0) += d_raw[i] * (ei / (n0 * ni) - cos * e0 / (n0 * n0));
    d_encoded.row(i) += d_raw[i] * (e0 / (n0 * ni) - cos * ei / (ni * ni));
  }

  const RowMatrixD d_tokens = encoder_backward(params.encoder, params.weights, c.encoder, d_encoded, grads.weights);
  grads.positional.topRows(m1) += d_tokens;
  d_inputs += d_tokens;
  return d_inputs;
}

void write_params(std::ostream& out, const AggregatorParams& params) {
  out.write("AGG1", 4);
  binio::write_u32(out, kParamsVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(params.encoder.dim));
  binio::write_u32(out, static_cast<std::uint32_t>(params.encoder.heads));
  binio::write_u32(out, static_cast<std::uint32_t>(params.encoder.layers));
  binio::write_u32(out, static_cast<std::uint32_t>(params.encoder.ff_dim));
  binio::write_u32(out, static_cast<std::uint32_t>(params.encoder.variant));
  binio::write_u32(out, static_cast<std::uint32_t>(params.k));
  std::uint32_t flags = 0;
  if (params.temperature) flags |= kFlagTemperature;
  if (params.passthrough) flags |= kFlagPassthrough;
  binio::write_u32(out, flags);
  binio::write_f32(out, params.temperature ? static_cast<float>(*params.temperature) : 0.0f);

  std::uint32_t count = 0;
  params.for_each_tensor([&count](const std::string&, const RowMatrixD&) { ++count; });
  binio::write_u32(out, count);
  params.for_each_tensor([&out](const std::string&, const RowMatrixD& t) {
    binio::write_u32(out, static_cast<std::uint32_t>(t.rows()));
    binio::write_u32(out, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) binio::write_f32(out, static_cast<float>(t.data()[i]));
  });
}

AggregatorParams read_params(std::istream& in, std::string_view what) {
  binio::expect_magic(in, "AGG1", what);
  const std::uint32_t version = binio::read_u32(in, what);
  if (version != kParamsVersion) {
    throw DataError("incompatible parameter file version " + std::to_string(version) + " in " +
                    std::string(what));
  }
  EncoderConfig enc;
  enc.dim = binio::read_u32(in, what);
  enc.heads = binio::read_u32(in, what);
  enc.layers = binio::read_u32(in, what);
  enc.ff_dim = binio::read_u32(in, what);
  const std::uint32_t variant = binio::read_u32(in, what);
  if (variant > 1) throw DataError("unknown encoder variant in " + std::string(what));
  enc.variant = static_cast<EncoderVariant>(variant);
  const std::uint32_t k = binio::read_u32(in, what);
  const std::uint32_t flags = binio::read_u32(in, what);
  const float temperature = binio::read_f32(in, what);

  AggregatorParams p;
  try {
    p = AggregatorParams::zeros(enc, k);
  } catch (const UsageError& e) {
    throw DataError("invalid aggregator header in " + std::string(what) + ": " + e.what());
  }
  if (flags & kFlagTemperature) {
    if (!(temperature > 0.0f)) throw DataError("non-positive temperature in " + std::string(what));
    p.temperature = temperature;
  }
  p.passthrough = (flags & kFlagPassthrough) != 0;

  std::uint32_t expected = 0;
  p.for_each_tensor([&expected](const std::string&, const RowMatrixD&) { ++expected; });
  const std::uint32_t count = binio::read_u32(in, what);
  if (count != expected) {
    throw DataError("shape mismatch in " + std::string(what) + ": expected " + std::to_string(expected) +
                    " tensors, found " + std::to_string(count));
  }
  p.for_each_tensor([&](const std::string& name, RowMatrixD& t) {
    const std::uint32_t rows = binio::read_u32(in, what);
    const std::uint32_t cols = binio::read_u32(in, what);
    if (rows != t.rows() || cols != t.cols()) {
      throw DataError("shape mismatch for tensor " + name + " in " + std::string(what));
    }
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = binio::read_f32(in, what);
  });
  p.check_finite();
  return p;
}

void save_params(const AggregatorParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write parameter file " + path);
  write_params(out, params);
  out.close();
  if (!out) throw IoError("failed writing " + path);
}

AggregatorParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open parameter file " + path);
  return read_params(in, path);
}

}  // namespace gqe
