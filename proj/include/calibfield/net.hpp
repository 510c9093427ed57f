#pragma once

#include "calibfield/types.hpp"

#include <filesystem>
#include <vector>

namespace calibfield {

/// Shape of the representation map: L hidden affine+GELU layers of width h,
/// then an affine projection to d_out, optionally row-normalized.
struct NetArch {
  Index input_dim = 2;
  Index hidden_width = 256;
  Index hidden_layers = 2;
  Index output_dim = 64;
  double dropout = 0.1;
  bool normalize_output = true;

  /// Low-dimensional synthetic inputs.
  static NetArch synthetic(Index input_dim) { return {input_dim, 256, 2, 64, 0.1, true}; }
  /// Frozen language-model hidden states.
  static NetArch embedding(Index input_dim) { return {input_dim, 512, 2, 128, 0.1, true}; }

  Index num_layers() const { return hidden_layers + 1; }
  Index fan_in(Index layer) const { return layer == 0 ? input_dim : hidden_width; }
  Index fan_out(Index layer) const { return layer == hidden_layers ? output_dim : hidden_width; }

  void validate() const;
  bool operator==(const NetArch&) const = default;
};

/// Per-layer weights (fan_in x fan_out) and biases. Gradient buffers use the
/// same type so optimizer arithmetic stays layer-aligned.
template <typename Scalar>
struct NetParams {
  NetArch arch;
  std::vector<Matrix<Scalar>> weights;
  std::vector<RowVector<Scalar>> biases;

  static NetParams zeros(const NetArch& arch);

  Index num_parameters() const;
  Scalar squared_norm() const;
  bool all_finite() const;
  Scalar max_abs() const;

  NetParams& operator+=(const NetParams& other);
  NetParams& operator*=(Scalar s);

  template <typename Other>
  NetParams<Other> cast() const {
    NetParams<Other> out;
    out.arch = arch;
    for (const auto& w : weights) out.weights.push_back(w.template cast<Other>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<Other>());
    return out;
  }

  bool operator==(const NetParams& other) const;
};

/// Weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
template <typename Scalar>
NetParams<Scalar> init_params(const NetArch& arch, std::uint64_t seed);

enum class Mode { Train, Eval };

/// Intermediate values kept by a forward pass for the reverse sweep.
template <typename Scalar>
struct ForwardTape {
  Matrix<Scalar> input;
  std::vector<Matrix<Scalar>> pre_activations;
  std::vector<Matrix<Scalar>> masks;  // inverted-dropout scale per entry; empty when inactive
  std::vector<Matrix<Scalar>> activations;  // inputs to layer l+1
  Matrix<Scalar> projection;
  Vector<Scalar> norms;
  Matrix<Scalar> output;
};

inline constexpr double kNormFloor = 1e-12;

template <typename Scalar>
Scalar gelu(Scalar x);
template <typename Scalar>
Scalar gelu_derivative(Scalar x);

/// Rows of x are examples. Train mode applies inverted dropout after every
/// hidden activation with masks drawn from `seed`; eval mode ignores the seed.
template <typename Scalar>
Matrix<Scalar> forward(const NetParams<Scalar>& params, const Eigen::Ref<const Matrix<Scalar>>& x, Mode mode,
                       std::uint64_t seed = 0, ForwardTape<Scalar>* tape = nullptr);

/// Exact reverse-mode gradient of a scalar loss given dLoss/dOutput, through
/// the normalization Jacobian and the sampled dropout masks.
template <typename Scalar>
NetParams<Scalar> backward(const NetParams<Scalar>& params, const ForwardTape<Scalar>& tape,
                           const Eigen::Ref<const Matrix<Scalar>>& grad_output);

template <typename Scalar>
void save_checkpoint(const NetParams<Scalar>& params, const std::filesystem::path& path);

template <typename Scalar>
NetParams<Scalar> load_checkpoint(const std::filesystem::path& path);

}  // namespace calibfield
