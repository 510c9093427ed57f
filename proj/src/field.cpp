#include "calibfield/field.hpp"

#include "calibfield/rng.hpp"
#include "calibfield/selection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace calibfield {

void KernelConfig::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("kernel bandwidth sigma must be > 0");
}

void LossConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
  if (!(m_min > 0.0) || !std::isfinite(m_min)) throw ConfigError("m_min must be > 0");
}

Index FieldEstimate::starved_count() const {
  return static_cast<Index>(std::count(starved.begin(), starved.end(), true));
}

namespace {

constexpr Index kQueryTile = 8;

Index padded(Index b) { return (b + 7) / 8 * 8; }

constexpr int kLanes = 8;
using Lane = Eigen::Array<double, kLanes, 1>;

// Bank rows regrouped into panels of kLanes rows, each panel stored
// coordinate-major so the distance loop reads memory sequentially.
struct PackedBank {
  std::vector<double> panels;
  Index rows = 0;
  Index dim = 0;
  Index full = 0;  // rows covered by complete panels

  explicit PackedBank(const Eigen::Ref<const Eigen::MatrixXd>& bank)
      : rows(bank.rows()), dim(bank.cols()), full(bank.rows() / kLanes * kLanes) {
    panels.resize(static_cast<std::size_t>(full * dim));
    for (Index j = 0; j < full; j += kLanes) {
      double* panel = panels.data() + j * dim;
      for (Index k = 0; k < dim; ++k)
        for (int u = 0; u < kLanes; ++u) panel[k * kLanes + u] = bank(j + u, k);
    }
  }
};

// Squared distances of nq consecutive queries to every bank row, written to
// rows of `out` with stride padded(b). Each entry sums coordinates 0..d-1 in
// order with the same operations whatever the grouping, so the value does not
// depend on which queries share a tile.
void squared_distances(const Eigen::Ref<const Eigen::MatrixXd>& query, Index first, Index nq,
                       const Eigen::Ref<const Eigen::MatrixXd>& bank, const PackedBank& packed, double* out) {
  constexpr Index kGroup = 4;
  const Index b = packed.rows;
  const Index d = packed.dim;
  const Index stride = padded(b);
  // Query coordinates, row t at q[t * d].
  std::vector<double> q(static_cast<std::size_t>(nq * d));
  for (Index t = 0; t < nq; ++t)
    for (Index k = 0; k < d; ++k) q[static_cast<std::size_t>(t * d + k)] = query(first + t, k);

  Index t = 0;
  for (; t + kGroup <= nq; t += kGroup) {
    const double* q0 = q.data() + t * d;
    const double* q1 = q0 + d;
    const double* q2 = q1 + d;
    const double* q3 = q2 + d;
    for (Index j = 0; j < packed.full; j += kLanes) {
      const double* panel = packed.panels.data() + j * d;
      Lane a0 = Lane::Zero(), a1 = Lane::Zero(), a2 = Lane::Zero(), a3 = Lane::Zero();
      for (Index k = 0; k < d; ++k) {
        const Lane p = Eigen::Map<const Lane>(panel + k * kLanes);
        a0 += (p - q0[k]).square();
        a1 += (p - q1[k]).square();
        a2 += (p - q2[k]).square();
        a3 += (p - q3[k]).square();
      }
      Eigen::Map<Lane>(out + t * stride + j) = a0;
      Eigen::Map<Lane>(out + (t + 1) * stride + j) = a1;
      Eigen::Map<Lane>(out + (t + 2) * stride + j) = a2;
      Eigen::Map<Lane>(out + (t + 3) * stride + j) = a3;
    }
  }
  for (; t < nq; ++t) {
    const double* q0 = q.data() + t * d;
    for (Index j = 0; j < packed.full; j += kLanes) {
      const double* panel = packed.panels.data() + j * d;
      Lane a0 = Lane::Zero();
      for (Index k = 0; k < d; ++k) a0 += (Eigen::Map<const Lane>(panel + k * kLanes) - q0[k]).square();
      Eigen::Map<Lane>(out + t * stride + j) = a0;
    }
  }
  for (t = 0; t < nq; ++t) {
    for (Index j = packed.full; j < b; ++j) {
      Eigen::Array<double, 1, 1> acc = Eigen::Array<double, 1, 1>::Zero();
      for (Index k = 0; k < d; ++k) acc += (Eigen::Array<double, 1, 1>(bank(j, k)) - q[static_cast<std::size_t>(t * d + k)]).square();
      out[t * stride + j] = acc(0);
    }
  }
}

void check_kernel_inputs(const Eigen::Ref<const Eigen::MatrixXd>& query, const Eigen::Ref<const Eigen::MatrixXd>& bank,
                         double sigma) {
  KernelConfig{sigma}.validate();
  if (query.cols() != bank.cols()) {
    throw ConfigError("kernel: query dimension " + std::to_string(query.cols()) + " != bank dimension " +
                      std::to_string(bank.cols()));
  }
}

}  // namespace

Eigen::MatrixXd kernel_weights(const Eigen::Ref<const Eigen::MatrixXd>& query,
                               const Eigen::Ref<const Eigen::MatrixXd>& bank, double sigma) {
  check_kernel_inputs(query, bank, sigma);
  const Index q = query.rows();
  const Index b = bank.rows();
  const Index stride = padded(b);
  const double scale = -1.0 / (sigma * sigma);
  const PackedBank packed(bank);
  Eigen::MatrixXd out(q, b);
  Eigen::VectorXd buffer(kQueryTile * stride);
  for (Index i0 = 0; i0 < q; i0 += kQueryTile) {
    const Index nq = std::min(kQueryTile, q - i0);
    squared_distances(query, i0, nq, bank, packed, buffer.data());
    for (Index t = 0; t < nq; ++t) {
      Eigen::Map<Eigen::ArrayXd> row(buffer.data() + t * stride, b);
      out.row(i0 + t) = (row * scale).exp().matrix().transpose();
    }
  }
  return out;
}

FieldEstimate estimate_field(const Eigen::Ref<const Eigen::MatrixXd>& query,
                             const Eigen::Ref<const Eigen::MatrixXd>& bank_embeddings,
                             const Eigen::Ref<const Eigen::VectorXd>& bank_residuals, const KernelConfig& kernel,
                             Index chunk) {
  if (bank_embeddings.rows() == 0) throw DataError("estimate_field: empty neighbour bank");
  if (bank_residuals.size() != bank_embeddings.rows()) {
    throw ConfigError("estimate_field: bank residual count does not match bank embeddings");
  }
  if (chunk < 1) throw ConfigError("estimate_field: chunk must be >= 1");
  check_kernel_inputs(query, bank_embeddings, kernel.sigma);

  const Index q = query.rows();
  const Index b = bank_embeddings.rows();
  const Index stride = padded(b);
  const double scale = -1.0 / (kernel.sigma * kernel.sigma);

  FieldEstimate est;
  est.values.setZero(q);
  est.masses.setZero(q);
  est.starved.assign(static_cast<std::size_t>(q), false);
  est.sigma = kernel.sigma;
  est.bank_size = b;

  const PackedBank packed(bank_embeddings);
  Eigen::VectorXd buffer(kQueryTile * stride);
  Eigen::ArrayXd weights(stride);
  const double* r = bank_residuals.data();
  for (Index c0 = 0; c0 < q; c0 += chunk) {
    const Index c1 = std::min(q, c0 + chunk);
    for (Index i0 = c0; i0 < c1; i0 += kQueryTile) {
      const Index nq = std::min(kQueryTile, c1 - i0);
      squared_distances(query, i0, nq, bank_embeddings, packed, buffer.data());
      for (Index t = 0; t < nq; ++t) {
        weights.head(b) = (Eigen::Map<const Eigen::ArrayXd>(buffer.data() + t * stride, b) * scale).exp();
        double lane_mass[8] = {};
        double lane_num[8] = {};
        for (Index j = 0; j < b; ++j) {
          lane_mass[j & 7] += weights[j];
          lane_num[j & 7] += weights[j] * r[j];
        }
        const double mass = ((lane_mass[0] + lane_mass[1]) + (lane_mass[2] + lane_mass[3])) +
                            ((lane_mass[4] + lane_mass[5]) + (lane_mass[6] + lane_mass[7]));
        const double num = ((lane_num[0] + lane_num[1]) + (lane_num[2] + lane_num[3])) +
                           ((lane_num[4] + lane_num[5]) + (lane_num[6] + lane_num[7]));
        const Index i = i0 + t;
        est.masses[i] = mass;
        if (mass < kStarvationMass) {
          est.starved[static_cast<std::size_t>(i)] = true;
        } else {
          est.values[i] = num / mass;
        }
      }
    }
  }
  return est;
}

FieldEstimate estimate_field(const Eigen::Ref<const Eigen::MatrixXd>& query, const NeighbourBank& bank,
                             const KernelConfig& kernel, Index chunk) {
  return estimate_field(query, bank.embeddings, bank.residuals, kernel, chunk);
}

template <typename Scalar>
LossResult<Scalar> discovery_loss(const Eigen::Ref<const Matrix<Scalar>>& z,
                                  const Eigen::Ref<const Vector<Scalar>>& r, const KernelConfig& kernel,
                                  const LossConfig& loss) {
  kernel.validate();
  loss.validate();
  const Index n = z.rows();
  if (n < 2) throw ConfigError("discovery_loss: batch must contain at least 2 points");
  if (r.size() != n) throw ConfigError("discovery_loss: residual count does not match batch");

  const Scalar inv_s2 = Scalar(1.0 / (kernel.sigma * kernel.sigma));
  const Vector<Scalar> sq = z.rowwise().squaredNorm();
  Matrix<Scalar> k(n, n);
  k.noalias() = z * z.transpose();
  k = ((Scalar(-2) * k).colwise() + sq).rowwise() + sq.transpose();
  k = k.cwiseMax(Scalar(0));
  k.diagonal().setZero();
  k = (k.array() * -inv_s2).exp().matrix();

  const Vector<Scalar> mass = k * Vector<Scalar>::Ones(n);
  const Vector<Scalar> delta = (k * r).cwiseQuotient(mass);
  const Vector<Scalar> hinge = (Scalar(loss.m_min) - mass.array()).cwiseMax(Scalar(0)).matrix();

  LossResult<Scalar> out;
  double fit = 0.0;
  double penalty = 0.0;
  for (Index i = 0; i < n; ++i) {
    fit += static_cast<double>(delta[i]) * static_cast<double>(delta[i]);
    penalty += static_cast<double>(hinge[i]) * static_cast<double>(hinge[i]);
  }
  const double nd = static_cast<double>(n);
  out.loss = -fit / nd + loss.lambda * penalty / nd;
  out.mean_mass = static_cast<double>(mass.sum()) / nd;

  // dL/dK_ij = a_i (r_j - delta_i) + c_i
  const Vector<Scalar> a = (Scalar(-2.0 / nd) * delta.array() / mass.array()).matrix();
  const Vector<Scalar> c = (Scalar(-2.0 * loss.lambda / nd) * hinge.array()).matrix();
  const Vector<Scalar> offset = c - a.cwiseProduct(delta);
  // M_ij = K_ij (a_i r_j + c_i - a_i delta_i)
  Matrix<Scalar> m(n, n);
  for (Index j = 0; j < n; ++j) {
    m.col(j).array() = k.col(j).array() * (a.array() * r[j] + offset.array());
  }
  // With S = M + M^T: dL/dZ = (-2/sigma^2) (diag(S 1) Z - S Z).
  const Vector<Scalar> row_sums = m * Vector<Scalar>::Ones(n) + m.colwise().sum().transpose();
  Matrix<Scalar> sz(n, z.cols());
  sz.noalias() = m * z;
  sz.noalias() += m.transpose() * z;
  out.grad = Scalar(-2) * inv_s2 * (row_sums.asDiagonal() * z - sz);
  return out;
}

template LossResult<float> discovery_loss<float>(const Eigen::Ref<const Matrix<float>>&,
                                                 const Eigen::Ref<const Vector<float>>&, const KernelConfig&,
                                                 const LossConfig&);
template LossResult<double> discovery_loss<double>(const Eigen::Ref<const Matrix<double>>&,
                                                   const Eigen::Ref<const Vector<double>>&, const KernelConfig&,
                                                   const LossConfig&);

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write history " + path.string());
  out << "epoch,train_loss,mean_mass,val_proxy\n";
  char line[160];
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.mean_mass, e.val_proxy);
    out << line;
  }
}

Eigen::MatrixXd embed(const NetParams<float>& params, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  constexpr Index kEmbedChunk = 4096;
  Eigen::MatrixXd out(x.rows(), params.arch.output_dim);
  for (Index i0 = 0; i0 < x.rows(); i0 += kEmbedChunk) {
    const Index rows = std::min(kEmbedChunk, x.rows() - i0);
    const Matrix<float> xf = x.middleRows(i0, rows).cast<float>();
    out.middleRows(i0, rows) = forward<float>(params, xf, Mode::Eval).cast<double>();
  }
  return out;
}

namespace {

// Far-apart points give kernel values below the normal range; denormal
// arithmetic is orders of magnitude slower and changes nothing measurable.
class FlushDenormals {
 public:
  FlushDenormals() {
#if defined(__SSE2__)
    saved_ = _mm_getcsr();
    _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
    _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
  }
  ~FlushDenormals() {
#if defined(__SSE2__)
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned int saved_ = 0;
};

}  // namespace

TrainResult train_field(const Dataset& train, const Dataset& val, const NetArch& arch, const KernelConfig& kernel,
                        const LossConfig& loss, const TrainConfig& config) {
  arch.validate();
  kernel.validate();
  loss.validate();
  config.validate();
  if (train.size() < 2) throw DataError("train split needs at least 2 rows");
  if (val.size() < 1) throw DataError("validation split is empty");
  if (train.dim() != arch.input_dim || val.dim() != arch.input_dim) {
    throw ConfigError("network input_dim " + std::to_string(arch.input_dim) + " does not match data dimension " +
                      std::to_string(train.dim()));
  }

  const FlushDenormals flush;
  const Index n = train.size();
  const Matrix<float> x = train.embeddings.cast<float>();
  const Vector<float> r = train.residuals().cast<float>();
  const NeighbourBank bank = sample_bank(train, config.bank_cap, config.seed);

  auto proxy_of = [&](const NetParams<float>& p) {
    const Eigen::MatrixXd bank_z = embed(p, bank.embeddings);
    const Eigen::MatrixXd val_z = embed(p, val.embeddings);
    const FieldEstimate est = estimate_field(val_z, bank_z, bank.residuals, kernel);
    return proxy_brier(val.confidences, val.outcomes, est);
  };

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const Index batch = config.batch_size;
  const auto batch_count = static_cast<int>((n + batch - 1) / batch);

  Matrix<float> xb;
  Vector<float> rb;
  auto gather = [&](Index start, Index size) {
    xb.resize(size, x.cols());
    rb.resize(size);
    for (Index t = 0; t < size; ++t) {
      const Index src = order[static_cast<std::size_t>(start + t)];
      xb.row(t) = x.row(src);
      rb[t] = r[src];
    }
  };

  TrainResult result;
  result.params = init_params<float>(arch, config.seed);
  NetParams<float> params = result.params;

  {
    // Epoch 0: the untrained map, scored without dropout.
    double total = 0.0;
    double mass = 0.0;
    int counted = 0;
    for (Index start = 0; start < n; start += batch) {
      const Index size = std::min(batch, n - start);
      if (size < 2) continue;
      gather(start, size);
      const Matrix<float> z = forward<float>(params, xb, Mode::Eval);
      const auto lr = discovery_loss<float>(z, rb, kernel, loss);
      total += lr.loss;
      mass += lr.mean_mass;
      ++counted;
    }
    const double proxy = proxy_of(params);
    result.history.epochs.push_back({0, total / counted, mass / counted, proxy});
    result.history.best_epoch = 0;
    result.history.best_proxy = proxy;
  }

  Adam adam(arch, config);
  ForwardTape<float> tape;
  int since_best = 0;
  long step = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng shuffler(config.seed, Stream::Shuffle, static_cast<std::uint64_t>(epoch));
    shuffler.shuffle(order.begin(), order.end());
    double total = 0.0;
    double mass = 0.0;
    int counted = 0;
    for (int b = 0; b < batch_count; ++b) {
      const Index start = static_cast<Index>(b) * batch;
      const Index size = std::min(batch, n - start);
      if (size < 2) continue;
      gather(start, size);
      forward<float>(params, xb, Mode::Train, mix_seed(config.seed, static_cast<std::uint64_t>(step)), &tape);
      ++step;
      const auto lr = discovery_loss<float>(tape.output, rb, kernel, loss);
      NetParams<float> grads = backward<float>(params, tape, lr.grad);
      if (!std::isfinite(lr.loss) || !grads.all_finite()) {
        char msg[200];
        std::snprintf(msg, sizeof(msg), "non-finite training loss at epoch %d, batch %d (max |grad| = %g)", epoch, b,
                      static_cast<double>(grads.max_abs()));
        throw NumericalError(msg);
      }
      adam.step(params, std::move(grads));
      total += lr.loss;
      mass += lr.mean_mass;
      ++counted;
    }
    const double proxy = proxy_of(params);
    result.history.epochs.push_back({epoch, total / std::max(counted, 1), mass / std::max(counted, 1), proxy});
    if (proxy < result.history.best_proxy) {
      result.history.best_proxy = proxy;
      result.history.best_epoch = epoch;
      result.params = params;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

FieldModel::FieldModel(NetParams<float> p, NeighbourBank b, KernelConfig k)
    : params(std::move(p)), bank(std::move(b)), kernel(k) {
  kernel.validate();
  if (bank.size() == 0) throw DataError("field model needs a nonempty neighbour bank");
  bank_embedded_ = embed(params, bank.embeddings);
}

FieldEstimate FieldModel::predict(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
  return estimate_field(embed(params, x), bank_embedded_, bank.residuals, kernel);
}

}  // namespace calibfield
