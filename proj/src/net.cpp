#include "calibfield/net.hpp"

#include "calibfield/rng.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

namespace calibfield {

void NetArch::validate() const {
  if (input_dim < 1 || hidden_width < 1 || hidden_layers < 1 || output_dim < 1) {
    throw ConfigError("network dimensions must all be >= 1");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout rate must lie in [0,1)");
}

template <typename Scalar>
NetParams<Scalar> NetParams<Scalar>::zeros(const NetArch& arch) {
  arch.validate();
  NetParams out;
  out.arch = arch;
  for (Index l = 0; l < arch.num_layers(); ++l) {
    out.weights.push_back(Matrix<Scalar>::Zero(arch.fan_in(l), arch.fan_out(l)));
    out.biases.push_back(RowVector<Scalar>::Zero(arch.fan_out(l)));
  }
  return out;
}

template <typename Scalar>
Index NetParams<Scalar>::num_parameters() const {
  Index count = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) count += weights[l].size() + biases[l].size();
  return count;
}

template <typename Scalar>
Scalar NetParams<Scalar>::squared_norm() const {
  Scalar total(0);
  for (std::size_t l = 0; l < weights.size(); ++l) total += weights[l].squaredNorm() + biases[l].squaredNorm();
  return total;
}

template <typename Scalar>
bool NetParams<Scalar>::all_finite() const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
  }
  return true;
}

template <typename Scalar>
Scalar NetParams<Scalar>::max_abs() const {
  Scalar m(0);
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].size() > 0) m = std::max(m, weights[l].cwiseAbs().maxCoeff());
    if (biases[l].size() > 0) m = std::max(m, biases[l].cwiseAbs().maxCoeff());
  }
  return m;
}

template <typename Scalar>
NetParams<Scalar>& NetParams<Scalar>::operator+=(const NetParams& other) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] += other.weights[l];
    biases[l] += other.biases[l];
  }
  return *this;
}

template <typename Scalar>
NetParams<Scalar>& NetParams<Scalar>::operator*=(Scalar s) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] *= s;
    biases[l] *= s;
  }
  return *this;
}

template <typename Scalar>
bool NetParams<Scalar>::operator==(const NetParams& other) const {
  if (!(arch == other.arch) || weights.size() != other.weights.size()) return false;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l] != other.weights[l] || biases[l] != other.biases[l]) return false;
  }
  return true;
}

template <typename Scalar>
NetParams<Scalar> init_params(const NetArch& arch, std::uint64_t seed) {
  auto params = NetParams<Scalar>::zeros(arch);
  for (Index l = 0; l < arch.num_layers(); ++l) {
    Rng rng(seed, Stream::Init, static_cast<std::uint64_t>(l));
    const double bound = 1.0 / std::sqrt(static_cast<double>(arch.fan_in(l)));
    auto& w = params.weights[static_cast<std::size_t>(l)];
    for (Index j = 0; j < w.cols(); ++j)
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
  }
  return params;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Scalar> /
                     std::numbers::sqrt2_v<Scalar>;
  return cdf + x * pdf;
}

namespace {

template <typename Scalar>
Matrix<Scalar> gelu_array(const Matrix<Scalar>& h) {
  const auto a = h.array();
  return (Scalar(0.5) * a * (Scalar(1) + (a * Scalar(std::numbers::sqrt2 / 2.0)).erf())).matrix();
}

template <typename Scalar>
Matrix<Scalar> gelu_derivative_array(const Matrix<Scalar>& h) {
  const auto a = h.array();
  const Scalar inv_sqrt_2pi = Scalar(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  const auto cdf = Scalar(0.5) * (Scalar(1) + (a * Scalar(std::numbers::sqrt2 / 2.0)).erf());
  const auto pdf = (Scalar(-0.5) * a.square()).exp() * inv_sqrt_2pi;
  return (cdf + a * pdf).matrix();
}

}  // namespace

template <typename Scalar>
Matrix<Scalar> forward(const NetParams<Scalar>& params, const Eigen::Ref<const Matrix<Scalar>>& x, Mode mode,
                       std::uint64_t seed, ForwardTape<Scalar>* tape) {
  const auto& arch = params.arch;
  if (x.cols() != arch.input_dim) {
    throw ConfigError("forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                      std::to_string(arch.input_dim));
  }
  if (!x.allFinite()) throw DataError("forward: non-finite input");

  const bool dropout_active = mode == Mode::Train && arch.dropout > 0.0;
  const Scalar keep_scale = Scalar(1.0 / (1.0 - arch.dropout));
  if (tape) {
    tape->input = x;
    tape->pre_activations.clear();
    tape->masks.clear();
    tape->activations.clear();
  }

  Matrix<Scalar> a = x;
  for (Index l = 0; l < arch.hidden_layers; ++l) {
    const auto ul = static_cast<std::size_t>(l);
    Matrix<Scalar> h = a * params.weights[ul];
    h.rowwise() += params.biases[ul];
    a = gelu_array<Scalar>(h);
    if (dropout_active) {
      Rng rng(seed, Stream::Dropout, static_cast<std::uint64_t>(l));
      Matrix<Scalar> mask(a.rows(), a.cols());
      for (Index j = 0; j < mask.cols(); ++j)
        for (Index i = 0; i < mask.rows(); ++i)
          mask(i, j) = rng.uniform() < arch.dropout ? Scalar(0) : keep_scale;
      a.array() *= mask.array();
      if (tape) tape->masks.push_back(std::move(mask));
    }
    if (tape) {
      tape->pre_activations.push_back(std::move(h));
      tape->activations.push_back(a);
    }
  }

  const auto last = static_cast<std::size_t>(arch.hidden_layers);
  Matrix<Scalar> p = a * params.weights[last];
  p.rowwise() += params.biases[last];

  Matrix<Scalar> out;
  Vector<Scalar> norms;
  if (arch.normalize_output) {
    norms = p.rowwise().norm().cwiseMax(Scalar(kNormFloor));
    out = norms.cwiseInverse().asDiagonal() * p;
  } else {
    out = p;
  }
  if (tape) {
    tape->projection = std::move(p);
    tape->norms = std::move(norms);
    tape->output = out;
  }
  return out;
}

template <typename Scalar>
NetParams<Scalar> backward(const NetParams<Scalar>& params, const ForwardTape<Scalar>& tape,
                           const Eigen::Ref<const Matrix<Scalar>>& grad_output) {
  const auto& arch = params.arch;
  if (grad_output.rows() != tape.output.rows() || grad_output.cols() != arch.output_dim ||
      static_cast<Index>(tape.pre_activations.size()) != arch.hidden_layers) {
    throw ConfigError("backward: gradient or tape shape does not match the forward pass");
  }
  auto grads = NetParams<Scalar>::zeros(arch);

  Matrix<Scalar> dp;
  if (arch.normalize_output) {
    // d(p/|p|) = (I - z z^T) dz / |p|; below the floor the map is p / floor.
    const Vector<Scalar> radial = tape.output.cwiseProduct(grad_output).rowwise().sum();
    dp = grad_output - radial.asDiagonal() * tape.output;
    const Vector<Scalar> raw_norms = tape.projection.rowwise().norm();
    for (Index i = 0; i < dp.rows(); ++i) {
      if (raw_norms(i) < Scalar(kNormFloor)) dp.row(i) = grad_output.row(i);
    }
    dp = tape.norms.cwiseInverse().asDiagonal() * dp;
  } else {
    dp = grad_output;
  }

  const auto last = static_cast<std::size_t>(arch.hidden_layers);
  const Matrix<Scalar>& a_last = arch.hidden_layers > 0 ? tape.activations.back() : tape.input;
  grads.weights[last].noalias() = a_last.transpose() * dp;
  grads.biases[last] = dp.colwise().sum();
  Matrix<Scalar> da = dp * params.weights[last].transpose();

  for (Index l = arch.hidden_layers - 1; l >= 0; --l) {
    const auto ul = static_cast<std::size_t>(l);
    if (!tape.masks.empty()) da.array() *= tape.masks[ul].array();
    Matrix<Scalar> dh = (da.array() * gelu_derivative_array<Scalar>(tape.pre_activations[ul]).array()).matrix();
    const Matrix<Scalar>& a_in = l == 0 ? tape.input : tape.activations[ul - 1];
    grads.weights[ul].noalias() = a_in.transpose() * dh;
    grads.biases[ul] = dh.colwise().sum();
    if (l > 0) da = dh * params.weights[ul].transpose();
  }
  return grads;
}

namespace {

constexpr char kCheckpointMagic[5] = {'C', 'F', 'N', 'E', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_bytes(std::ostream& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_bytes(std::istream& in, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw DataError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

template <typename Scalar>
void put_scalar(std::ostream& out, Scalar v) {
  if constexpr (sizeof(Scalar) == 4) {
    put_bytes(out, std::bit_cast<std::uint32_t>(v), 4);
  } else {
    put_bytes(out, std::bit_cast<std::uint64_t>(v), 8);
  }
}

template <typename Scalar>
Scalar get_scalar(std::istream& in) {
  if constexpr (sizeof(Scalar) == 4) {
    return std::bit_cast<Scalar>(static_cast<std::uint32_t>(get_bytes(in, 4)));
  } else {
    return std::bit_cast<Scalar>(get_bytes(in, 8));
  }
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const NetParams<Scalar>& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const auto& arch = params.arch;
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_bytes(out, kCheckpointVersion, 4);
  put_bytes(out, sizeof(Scalar), 1);
  put_bytes(out, static_cast<std::uint64_t>(arch.input_dim), 8);
  put_bytes(out, static_cast<std::uint64_t>(arch.hidden_width), 8);
  put_bytes(out, static_cast<std::uint64_t>(arch.hidden_layers), 8);
  put_bytes(out, static_cast<std::uint64_t>(arch.output_dim), 8);
  put_bytes(out, std::bit_cast<std::uint64_t>(arch.dropout), 8);
  put_bytes(out, arch.normalize_output ? 1 : 0, 1);
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    const auto& w = params.weights[l];
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) put_scalar(out, w(i, j));
    for (Index j = 0; j < params.biases[l].size(); ++j) put_scalar(out, params.biases[l](j));
  }
}

template <typename Scalar>
NetParams<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[5] = {};
  in.read(magic, 5);
  if (!in || !std::equal(magic, magic + 5, kCheckpointMagic)) throw DataError("not a checkpoint: " + path.string());
  if (get_bytes(in, 4) != kCheckpointVersion) throw DataError("unsupported checkpoint version");
  if (get_bytes(in, 1) != sizeof(Scalar)) throw DataError("checkpoint scalar width does not match");
  NetArch arch;
  arch.input_dim = static_cast<Index>(get_bytes(in, 8));
  arch.hidden_width = static_cast<Index>(get_bytes(in, 8));
  arch.hidden_layers = static_cast<Index>(get_bytes(in, 8));
  arch.output_dim = static_cast<Index>(get_bytes(in, 8));
  arch.dropout = std::bit_cast<double>(get_bytes(in, 8));
  arch.normalize_output = get_bytes(in, 1) != 0;
  auto params = NetParams<Scalar>::zeros(arch);
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    auto& w = params.weights[l];
    for (Index i = 0; i < w.rows(); ++i)
      for (Index j = 0; j < w.cols(); ++j) w(i, j) = get_scalar<Scalar>(in);
    for (Index j = 0; j < params.biases[l].size(); ++j) params.biases[l](j) = get_scalar<Scalar>(in);
  }
  return params;
}

#define CALIBFIELD_INSTANTIATE_NET(S)                                                                       \
  template struct NetParams<S>;                                                                             \
  template NetParams<S> init_params<S>(const NetArch&, std::uint64_t);                                      \
  template S gelu<S>(S);                                                                                    \
  template S gelu_derivative<S>(S);                                                                         \
  template Matrix<S> forward<S>(const NetParams<S>&, const Eigen::Ref<const Matrix<S>>&, Mode, std::uint64_t, \
                                ForwardTape<S>*);                                                           \
  template NetParams<S> backward<S>(const NetParams<S>&, const ForwardTape<S>&,                             \
                                    const Eigen::Ref<const Matrix<S>>&);                                    \
  template void save_checkpoint<S>(const NetParams<S>&, const std::filesystem::path&);                      \
  template NetParams<S> load_checkpoint<S>(const std::filesystem::path&);

CALIBFIELD_INSTANTIATE_NET(float)
CALIBFIELD_INSTANTIATE_NET(double)

}  // namespace calibfield
