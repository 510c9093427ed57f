#include "calibfield/optim.hpp"

#include <cmath>

namespace calibfield {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("grad_clip_norm must be > 0");
  if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (bank_cap < 1) throw ConfigError("bank_cap must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0,1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
}

Adam::Adam(const NetArch& arch, const TrainConfig& config)
    : config_(config), m_(NetParams<float>::zeros(arch)), v_(NetParams<float>::zeros(arch)) {}

namespace {

template <typename Block>
void adam_update(Block& theta, Block& mom, Block& vel, const Block& g, float lr_t, float b1, float b2, float eps) {
  mom.array() = b1 * mom.array() + (1.0f - b1) * g.array();
  vel.array() = b2 * vel.array() + (1.0f - b2) * g.array().square();
  theta.array() -= lr_t * mom.array() / (vel.array().sqrt() + eps);
}

}  // namespace

double Adam::step(NetParams<float>& params, NetParams<float> grads) {
  const double norm = std::sqrt(static_cast<double>(grads.squared_norm()));
  if (norm > config_.grad_clip_norm) grads *= static_cast<float>(config_.grad_clip_norm / (norm + 1e-6));
  if (config_.weight_decay > 0.0) {
    const auto wd = static_cast<float>(config_.weight_decay);
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
      grads.weights[l] += wd * params.weights[l];
      grads.biases[l] += wd * params.biases[l];
    }
  }

  ++step_;
  // lr * mhat / (sqrt(vhat) + eps), with the bias corrections folded in.
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  const auto lr_t = static_cast<float>(config_.learning_rate * std::sqrt(bc2) / bc1);
  const auto eps_t = static_cast<float>(config_.adam_eps * std::sqrt(bc2));
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    adam_update(params.weights[l], m_.weights[l], v_.weights[l], grads.weights[l], lr_t, b1, b2, eps_t);
    adam_update(params.biases[l], m_.biases[l], v_.biases[l], grads.biases[l], lr_t, b1, b2, eps_t);
  }
  return norm;
}

}  // namespace calibfield
