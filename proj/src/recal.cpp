#include "calibfield/recal.hpp"

#include "calibfield/metrics.hpp"
#include "calibfield/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace calibfield {

void CorrectionConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("correction alpha must be a finite value > 0");
  if (alpha_grid.empty()) throw ConfigError("alpha_grid must not be empty");
  for (double a : alpha_grid) {
    if (!(a > 0.0) || !std::isfinite(a)) throw ConfigError("alpha_grid entries must be finite and > 0");
  }
}

Eigen::VectorXd range_aware_correct(const Eigen::Ref<const Eigen::VectorXd>& f,
                                    const Eigen::Ref<const Eigen::VectorXd>& delta, double alpha) {
  if (f.size() != delta.size()) throw ConfigError("range_aware_correct: length mismatch");
  if (!(alpha > 0.0)) throw ConfigError("range_aware_correct: alpha must be > 0");
  Eigen::VectorXd out(f.size());
  for (Index i = 0; i < f.size(); ++i) {
    if (!(f[i] >= 0.0 && f[i] <= 1.0)) {
      throw DataError("range_aware_correct: confidence " + std::to_string(f[i]) + " at index " + std::to_string(i) +
                      " outside [0,1]");
    }
    const double t = std::tanh(alpha * std::abs(delta[i]));
    out[i] = delta[i] < 0.0 ? f[i] - f[i] * t : f[i] + (1.0 - f[i]) * t;
  }
  return out;
}

AlphaSelection select_alpha(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                            const Eigen::Ref<const Eigen::VectorXd>& delta, const std::vector<double>& alpha_grid) {
  CorrectionConfig{alpha_grid.empty() ? 1.0 : alpha_grid.front(), alpha_grid}.validate();
  AlphaSelection sel;
  for (double a : alpha_grid) {
    const Eigen::VectorXd corrected = range_aware_correct(f, delta, a);
    sel.scores.push_back({a, smece(corrected, y).value, brier(corrected, y)});
  }
  const auto best = std::min_element(sel.scores.begin(), sel.scores.end(), [](const AlphaScore& l, const AlphaScore& r) {
    if (l.smece != r.smece) return l.smece < r.smece;
    if (l.brier != r.brier) return l.brier < r.brier;
    return l.alpha < r.alpha;
  });
  sel.alpha = best->alpha;
  return sel;
}

namespace {

double clamp_probability(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

double logit_clamped(double p) {
  const double q = clamp_probability(p);
  return std::log(q) - std::log1p(-q);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

TempScaler fit_temperature(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y) {
  if (f.size() != y.size()) throw ConfigError("fit_temperature: length mismatch");
  if (f.size() == 0) throw ConfigError("fit_temperature: empty input");
  const double positives = y.sum();
  if (positives == 0.0 || positives == static_cast<double>(y.size())) return {1.0, true};

  Eigen::VectorXd logits(f.size());
  for (Index i = 0; i < f.size(); ++i) logits[i] = logit_clamped(f[i]);
  auto nll = [&](double log_t) {
    const double inv_t = std::exp(-log_t);
    double total = 0.0;
    for (Index i = 0; i < logits.size(); ++i) {
      const double s = logits[i] * inv_t;
      total += y[i] > 0.5 ? softplus(-s) : softplus(s);
    }
    return total / static_cast<double>(logits.size());
  };

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(0.05);
  double b = std::log(20.0);
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = nll(c);
  double fd = nll(d);
  while (b - a > 1e-6) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = nll(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = nll(d);
    }
  }
  return {std::exp(0.5 * (a + b)), false};
}

Eigen::VectorXd apply_temperature(const Eigen::Ref<const Eigen::VectorXd>& f, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("apply_temperature: temperature must be > 0");
  if (temperature == 1.0) return f;
  Eigen::VectorXd out(f.size());
  for (Index i = 0; i < f.size(); ++i) {
    const double s = logit_clamped(f[i]) / temperature;
    out[i] = 1.0 / (1.0 + std::exp(-s));
  }
  return out;
}

IsotonicMap fit_isotonic(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y) {
  if (f.size() != y.size()) throw ConfigError("fit_isotonic: length mismatch");
  if (f.size() == 0) throw ConfigError("fit_isotonic: needs at least one point");
  std::vector<Index> order(static_cast<std::size_t>(f.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return f[a] < f[b]; });

  std::vector<double> level_x;
  std::vector<double> level_sum;
  std::vector<double> level_weight;
  for (Index i : order) {
    if (level_x.empty() || f[i] != level_x.back()) {
      level_x.push_back(f[i]);
      level_sum.push_back(0.0);
      level_weight.push_back(0.0);
    }
    level_sum.back() += y[i];
    level_weight.back() += 1.0;
  }

  struct Block {
    double sum;
    double weight;
    std::size_t levels;
  };
  std::vector<Block> blocks;
  for (std::size_t l = 0; l < level_x.size(); ++l) {
    blocks.push_back({level_sum[l], level_weight[l], 1});
    while (blocks.size() > 1) {
      const Block& last = blocks.back();
      const Block& prev = blocks[blocks.size() - 2];
      if (prev.sum * last.weight <= last.sum * prev.weight) break;
      Block merged{prev.sum + last.sum, prev.weight + last.weight, prev.levels + last.levels};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }

  IsotonicMap map;
  const auto count = static_cast<Index>(level_x.size());
  map.breakpoints = Eigen::Map<const Eigen::VectorXd>(level_x.data(), count);
  map.values.resize(count);
  Index pos = 0;
  for (const auto& b : blocks) {
    const double mean = b.sum / b.weight;
    for (std::size_t k = 0; k < b.levels; ++k) map.values[pos++] = mean;
  }
  return map;
}

Eigen::VectorXd apply_isotonic(const IsotonicMap& map, const Eigen::Ref<const Eigen::VectorXd>& f) {
  const Index m = map.breakpoints.size();
  if (m == 0 || map.values.size() != m) throw ConfigError("apply_isotonic: malformed map");
  const double* xs = map.breakpoints.data();
  Eigen::VectorXd out(f.size());
  for (Index i = 0; i < f.size(); ++i) {
    const double x = f[i];
    if (x <= xs[0]) {
      out[i] = map.values[0];
    } else if (x >= xs[m - 1]) {
      out[i] = map.values[m - 1];
    } else {
      const Index k = std::upper_bound(xs, xs + m, x) - xs;
      const double x0 = xs[k - 1];
      const double x1 = xs[k];
      const double v0 = map.values[k - 1];
      const double v1 = map.values[k];
      out[i] = v0 + (v1 - v0) * (x - x0) / (x1 - x0);
    }
  }
  return out;
}

NetArch resreg_arch(Index input_dim, Index hidden_width, Index hidden_layers) {
  return {input_dim, hidden_width, hidden_layers, 1, 0.1, false};
}

TrainConfig resreg_train_config() {
  TrainConfig config;
  config.max_epochs = 300;
  return config;
}

namespace {

double val_mse(const NetParams<float>& params, const Matrix<float>& x, const Eigen::VectorXd& r) {
  const Eigen::VectorXd g = forward<float>(params, x, Mode::Eval).col(0).cast<double>().cwiseMax(-1.0).cwiseMin(1.0);
  return (r - g).squaredNorm() / static_cast<double>(r.size());
}

}  // namespace

ResRegModel train_resreg(const Dataset& train, const Dataset& val, const NetArch& arch, const TrainConfig& config) {
  arch.validate();
  config.validate();
  if (arch.output_dim != 1 || arch.normalize_output) {
    throw ConfigError("residual regression needs a scalar, unnormalized output head");
  }
  if (train.size() < 2) throw DataError("train split needs at least 2 rows");
  if (val.size() < 1) throw DataError("validation split is empty");
  if (train.dim() != arch.input_dim || val.dim() != arch.input_dim) {
    throw ConfigError("residual regression input_dim does not match data dimension");
  }

  const Index n = train.size();
  const Matrix<float> x = train.embeddings.cast<float>();
  const Vector<float> r = train.residuals().cast<float>();
  const Matrix<float> xv = val.embeddings.cast<float>();
  const Eigen::VectorXd rv = val.residuals();

  ResRegModel best;
  NetParams<float> params = init_params<float>(arch, config.seed);
  best.params = params;
  best.best_val_mse = val_mse(params, xv, rv);

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Adam adam(arch, config);
  ForwardTape<float> tape;
  Matrix<float> xb;
  Vector<float> rb;
  long step = 0;
  int since_best = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng shuffler(config.seed, Stream::Shuffle, static_cast<std::uint64_t>(epoch));
    shuffler.shuffle(order.begin(), order.end());
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index size = std::min(config.batch_size, n - start);
      xb.resize(size, x.cols());
      rb.resize(size);
      for (Index t = 0; t < size; ++t) {
        const Index src = order[static_cast<std::size_t>(start + t)];
        xb.row(t) = x.row(src);
        rb[t] = r[src];
      }
      forward<float>(params, xb, Mode::Train, mix_seed(config.seed, static_cast<std::uint64_t>(step)), &tape);
      ++step;
      const Matrix<float> grad_out = (tape.output.col(0) - rb) * (2.0f / static_cast<float>(size));
      NetParams<float> grads = backward<float>(params, tape, grad_out);
      if (!grads.all_finite()) {
        throw NumericalError("non-finite residual-regression gradient at epoch " + std::to_string(epoch));
      }
      adam.step(params, std::move(grads));
    }
    const double mse = val_mse(params, xv, rv);
    if (!std::isfinite(mse)) throw NumericalError("non-finite validation MSE at epoch " + std::to_string(epoch));
    if (mse < best.best_val_mse) {
      best.best_val_mse = mse;
      best.best_epoch = epoch;
      best.params = params;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  return best;
}

Eigen::VectorXd predict_resreg(const ResRegModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  const Matrix<float> xf = x.cast<float>();
  return forward<float>(model.params, xf, Mode::Eval).col(0).cast<double>().cwiseMax(-1.0).cwiseMin(1.0);
}

nlohmann::json to_json(const TempScaler& t) {
  return {{"type", "temperature"}, {"temperature", t.temperature}, {"fallback", t.fallback}};
}

nlohmann::json to_json(const IsotonicMap& m) {
  return {{"type", "isotonic"},
          {"breakpoints", std::vector<double>(m.breakpoints.data(), m.breakpoints.data() + m.breakpoints.size())},
          {"values", std::vector<double>(m.values.data(), m.values.data() + m.values.size())}};
}

nlohmann::json range_aware_json(double alpha) { return {{"type", "range_aware"}, {"alpha", alpha}}; }

namespace {

void expect_type(const nlohmann::json& j, const char* type) {
  if (!j.is_object() || !j.contains("type") || j.at("type") != type) {
    throw ConfigError(std::string("expected a recalibrator of type ") + type);
  }
}

}  // namespace

TempScaler temperature_from_json(const nlohmann::json& j) {
  expect_type(j, "temperature");
  TempScaler t{j.at("temperature").get<double>(), j.value("fallback", false)};
  if (!(t.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  return t;
}

IsotonicMap isotonic_from_json(const nlohmann::json& j) {
  expect_type(j, "isotonic");
  const auto bp = j.at("breakpoints").get<std::vector<double>>();
  const auto vals = j.at("values").get<std::vector<double>>();
  if (bp.empty() || bp.size() != vals.size()) throw ConfigError("isotonic map needs matching nonempty arrays");
  IsotonicMap m;
  m.breakpoints = Eigen::Map<const Eigen::VectorXd>(bp.data(), static_cast<Index>(bp.size()));
  m.values = Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<Index>(vals.size()));
  return m;
}

double range_aware_alpha_from_json(const nlohmann::json& j) {
  expect_type(j, "range_aware");
  const double alpha = j.at("alpha").get<double>();
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  return alpha;
}

}  // namespace calibfield
