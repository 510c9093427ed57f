#pragma once

#include "calibfield/dataset.hpp"
#include "calibfield/net.hpp"
#include "calibfield/optim.hpp"

#include <json.hpp>

#include <filesystem>
#include <vector>

namespace calibfield {

struct CorrectionConfig {
  double alpha = 1.0;
  std::vector<double> alpha_grid{0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0};

  void validate() const;
};

/// f + Delta with Delta = -f tanh(alpha |d|) for d < 0 and (1 - f) tanh(alpha |d|)
/// otherwise; the result stays inside [0,1] without clipping.
Eigen::VectorXd range_aware_correct(const Eigen::Ref<const Eigen::VectorXd>& f,
                                    const Eigen::Ref<const Eigen::VectorXd>& delta, double alpha);

struct AlphaScore {
  double alpha = 0.0;
  double smece = 0.0;
  double brier = 0.0;
};

struct AlphaSelection {
  double alpha = 0.0;
  std::vector<AlphaScore> scores;
};

/// Smallest validation smECE of the corrected confidences; ties go to the
/// lower Brier score, then the smaller alpha.
AlphaSelection select_alpha(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                            const Eigen::Ref<const Eigen::VectorXd>& delta, const std::vector<double>& alpha_grid);

inline constexpr double kProbabilityClamp = 1e-6;

struct TempScaler {
  double temperature = 1.0;
  // Set when the fit split holds a single class and T = 1 was kept.
  bool fallback = false;
};

/// Mean binary NLL minimized over log T in [log 0.05, log 20] by golden-section
/// search; confidences are clamped to [1e-6, 1 - 1e-6] before taking logits.
TempScaler fit_temperature(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y);
Eigen::VectorXd apply_temperature(const Eigen::Ref<const Eigen::VectorXd>& f, double temperature);

struct IsotonicMap {
  Eigen::VectorXd breakpoints;  // strictly increasing
  Eigen::VectorXd values;       // nondecreasing
};

/// Pool-adjacent-violators on the confidence-sorted outcomes; tied
/// confidences are merged into one weighted level first.
IsotonicMap fit_isotonic(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y);
/// Linear interpolation between breakpoints, constant beyond either end.
Eigen::VectorXd apply_isotonic(const IsotonicMap& map, const Eigen::Ref<const Eigen::VectorXd>& f);

struct ResRegModel {
  NetParams<float> params;
  int best_epoch = 0;
  double best_val_mse = 0.0;
};

/// Scalar-output MLP head (no output normalization) for residual regression.
NetArch resreg_arch(Index input_dim, Index hidden_width = 256, Index hidden_layers = 2);

/// TrainConfig defaults apart from the longer epoch budget used for this head.
TrainConfig resreg_train_config();

/// Minimizes mean (r - g(x))^2 with the shared optimizer contract and
/// validation-MSE early stopping.
ResRegModel train_resreg(const Dataset& train, const Dataset& val, const NetArch& arch, const TrainConfig& config);
/// Predictions clamped to [-1, 1].
Eigen::VectorXd predict_resreg(const ResRegModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x);

nlohmann::json to_json(const TempScaler& t);
nlohmann::json to_json(const IsotonicMap& m);
nlohmann::json range_aware_json(double alpha);
TempScaler temperature_from_json(const nlohmann::json& j);
IsotonicMap isotonic_from_json(const nlohmann::json& j);
double range_aware_alpha_from_json(const nlohmann::json& j);

}  // namespace calibfield
