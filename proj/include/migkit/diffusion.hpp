#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "migkit/denoiser.hpp"

namespace migkit {

// Linear beta schedule; t = 0 is the clean sample (alpha_bar(0) = 1) and
// t = 1..T are noise levels.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

  int steps() const { return steps_; }
  double beta(int t) const;       // t in 1..T
  double alpha_bar(int t) const;  // t in 0..T

 private:
  void check(int t, int lo) const;
  int steps_;
  std::vector<double> beta_, alpha_bar_;  // index t
};

// z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps
Tensor add_noise(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& eps);

struct GuidanceSchedule {
  double tau = 0.7;
  int steps = 50;
};

// 1 iff iteration i (1-based, i = 1 is the noisiest step) satisfies
// i <= ceil(tau * steps).
bool beta_gate(int i, const GuidanceSchedule& g);

// steps + 1 descending training timesteps: T, ..., 0.
std::vector<int> sampling_timesteps(const NoiseSchedule& sched, int steps);

struct SamplerConfig {
  double cfg_scale = 7.5;
  // false adds DDPM-strength noise (eta = 1) each step.
  bool deterministic = true;
  uint64_t seed = 0;
  // Clamp the predicted clean latent to [-1, 1] inside each update.
  bool clip_x0 = true;
  FusionStrategy fusion = FusionStrategy::kMask;
  // Inverse-area fusion weights at inference.
  bool area_weights = true;
};

// w_i = (1/area_i) / sum_j (1/area_j)
std::vector<double> instance_weights(const std::vector<BBox>& boxes);

// Noise prediction used at one sampling step: the layout-guided network
// when gate is set, else the base network; CFG against the base network's
// null-text prediction.
Tensor guided_eps(const Denoiser& model, const Tensor& z_t, int t, const Layout& layout, bool gate,
                  const SamplerConfig& cfg);

// DDIM move from t to t_prev given eps. noise may be undefined when eta = 0.
Tensor ddim_update(const NoiseSchedule& sched, const Tensor& z_t, int t, int t_prev, const Tensor& eps, bool clip_x0,
                   double eta = 0.0, const Tensor& noise = {});

using EpsFn = std::function<Tensor(const Tensor& z_t, int t, bool gate)>;

struct SampleTrace {
  std::vector<bool> gates;  // per iteration
  std::vector<int> timesteps;
};

// Full chain from z_T ~ N(0, I) drawn from cfg.seed. The result is the final
// latent clamped to [-1, 1].
Tensor sample_with(const EpsFn& eps, const NoiseSchedule& sched, const Shape& latent_shape, const SamplerConfig& cfg,
                   const GuidanceSchedule& g, SampleTrace* trace = nullptr);

Tensor sample(const Denoiser& model, const NoiseSchedule& sched, const Layout& layout, const SamplerConfig& cfg,
              const GuidanceSchedule& g, SampleTrace* trace = nullptr);

// One step of the chain: iteration i (1-based) of g.steps.
Tensor denoise_step(const Denoiser& model, const NoiseSchedule& sched, const Tensor& z_t, int i, const Layout& layout,
                    bool gate, const SamplerConfig& cfg, int total_steps);

// Epsilon-prediction loss at a given timestep and noise draw.
Tensor diffusion_loss(const Denoiser& model, const NoiseSchedule& sched, const Tensor& x0, const Layout& layout, int t,
                      const Tensor& eps, const ForwardOptions& opt);

}  // namespace migkit
