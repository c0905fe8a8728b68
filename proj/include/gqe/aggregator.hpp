#pragma once

#include "gqe/encoder.hpp"

#include <iosfwd>
#include <optional>
#include <string>

namespace gqe {

/// Learnable state of one aggregation level.
struct AggregatorParams {
  EncoderConfig encoder;
  std::size_t k = 0;
  RowMatrixD positional;  // (k + 1) x F; row p is added to the item at rank p (0 = the node)
  EncoderWeights weights;
  std::optional<double> temperature;  // tempered softmax over the similarity weights
  bool passthrough = false;           // return the node unchanged (collapsed level)

  static AggregatorParams zeros(const EncoderConfig& encoder, std::size_t k);
  /// Positional rows and projections ~ N(0, scale^2); biases zero, norm gains one.
  static AggregatorParams random(const EncoderConfig& encoder, std::size_t k, double scale,
                                 std::mt19937_64& rng);

  std::size_t dim() const { return encoder.dim; }

  /// Zero tensors of the same shapes, used as a gradient accumulator.
  AggregatorParams zeros_like() const;

  template <typename F>
  void for_each_tensor(F&& f) {
    f(std::string("positional"), positional);
    weights.for_each(f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    f(std::string("positional"), positional);
    weights.for_each(f);
  }

  std::size_t parameter_count() const;
  /// Rounds every value to the nearest float32 so that the on-disk form is exact.
  void quantize();
  void check_finite() const;
};

struct AggregationTrace {
  std::vector<double> sims;  // final weights applied to node (index 0) and neighbours
  double norm = 0.0;         // L2 norm of the weighted sum before normalisation
};

/// Intermediate values of one aggregate() call kept for the backward pass.
struct AggregateCache {
  RowMatrixD inputs;   // original node + neighbours
  RowMatrixD encoded;  // encoder output on the shifted tokens
  EncoderCache encoder;
  VectorD raw_sims;    // 1, cos(e0, e1), ...
  VectorD weights;     // raw_sims or their tempered softmax
  VectorD sum;         // weighted sum before normalisation
  VectorD output;
};

struct AggregateResult {
  VectorD output;
  AggregationTrace trace;
};

/// Aggregates a node with its ranked neighbours. `inputs` row 0 is the node,
/// rows 1..m its neighbours in rank order (m <= params.k). Positional rows shift
/// only the encoder input; the weighted sum is over the original rows.
AggregateResult aggregate(const AggregatorParams& params, const RowMatrixD& inputs,
                          AggregateCache* cache = nullptr);

AggregateResult aggregate(const AggregatorParams& params, const VectorD& node,
                          const std::vector<VectorD>& neighbors);

/// dL/d(inputs) for a cached aggregate() call; parameter gradients are added
/// into `grads` (shaped like `params`).
RowMatrixD aggregate_backward(const AggregatorParams& params, const AggregateCache& cache,
                              const VectorD& grad_output, AggregatorParams& grads);

void write_params(std::ostream& out, const AggregatorParams& params);
AggregatorParams read_params(std::istream& in, std::string_view what);

void save_params(const AggregatorParams& params, const std::string& path);
AggregatorParams load_params(const std::string& path);

}  // namespace gqe
