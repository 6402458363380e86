#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "migkit/denoiser.hpp"
#include "migkit/diffusion.hpp"

namespace migkit {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  // Global L2 norm clip; <= 0 disables.
  double grad_clip = 1.0;
};

// Decoupled weight decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const AdamWConfig& cfg);

  // Applies one update from the accumulated gradients. Returns the global
  // gradient norm before clipping.
  double step();
  void zero_grad();
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

struct TrainSample {
  Tensor latent;  // clean x0
  Layout layout;
};

enum class TrainPhase { kBase, kLayout };
const char* to_string(TrainPhase p);

struct PhaseConfig {
  int steps = 1000;
  int batch = 1;  // gradient accumulation over this many samples
  AdamWConfig opt;
  // Linear warmup, then cosine decay to lr * final_lr_fraction.
  int warmup = 100;
  double final_lr_fraction = 0.1;
  // Base phase: probability of training on the null caption.
  double null_text_prob = 0.1;
};

struct LossRecord {
  TrainPhase phase = TrainPhase::kBase;
  int step = 0;
  double loss = 0.0;  // mean over the logging window
  double grad_norm = 0.0;
  double lr = 0.0;
};

struct TrainHooks {
  int log_every = 50;
  std::function<void(const LossRecord&)> on_log;
  int checkpoint_every = 0;  // 0 disables
  std::function<void(TrainPhase, int step)> on_checkpoint;
};

// Base phase trains every base weight on the conditioning caption with the
// guidance path off. Layout phase trains only layout-branch and LoRA
// weights with guidance on; the model must already carry adapters.
// Returns the mean loss of the final logging window.
double train_phase(Denoiser& model, const NoiseSchedule& sched, const std::vector<TrainSample>& data, TrainPhase phase,
                   const PhaseConfig& cfg, uint64_t seed, const TrainHooks& hooks = {});

}  // namespace migkit
