#pragma once

#include "calibfield/dataset.hpp"
#include "calibfield/net.hpp"

namespace calibfield {

struct TrainConfig {
  double learning_rate = 3e-5;
  double weight_decay = 7e-6;
  Index batch_size = 1024;
  double grad_clip_norm = 1.0;
  int max_epochs = 100;
  int patience = 20;
  std::uint64_t seed = 0;
  Index bank_cap = kDefaultBankCap;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Adam with coupled L2 weight decay and global gradient-norm clipping. The
/// raw gradient is clipped first, then decay is added, then the moment update
/// runs with bias-corrected step size.
class Adam {
 public:
  Adam(const NetArch& arch, const TrainConfig& config);

  /// Updates `params` in place and returns the pre-clip gradient norm.
  double step(NetParams<float>& params, NetParams<float> grads);

  long steps_taken() const { return step_; }

 private:
  TrainConfig config_;
  NetParams<float> m_;
  NetParams<float> v_;
  long step_ = 0;
};

}  // namespace calibfield
