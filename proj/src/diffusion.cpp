#include "migkit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace migkit {

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end) : steps_(steps) {
  if (steps < 1) throw std::invalid_argument("noise schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
    throw std::invalid_argument("betas must satisfy 0 < beta_start <= beta_end < 1");
  beta_.assign(static_cast<size_t>(steps) + 1, 0.0);
  alpha_bar_.assign(static_cast<size_t>(steps) + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    beta_[t] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (steps - 1);
    alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta_[t]);
  }
}

void NoiseSchedule::check(int t, int lo) const {
  if (t < lo || t > steps_)
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + "," +
                            std::to_string(steps_) + "]");
}

double NoiseSchedule::beta(int t) const {
  check(t, 1);
  return beta_[t];
}

double NoiseSchedule::alpha_bar(int t) const {
  check(t, 0);
  return alpha_bar_[t];
}

Tensor add_noise(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& eps) {
  if (x0.shape() != eps.shape()) throw ShapeError("add_noise: noise shape does not match x0");
  const double ab = sched.alpha_bar(t);
  if (ab == 1.0) return x0;
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

bool beta_gate(int i, const GuidanceSchedule& g) {
  if (g.steps < 1) throw std::invalid_argument("sampling steps must be >= 1");
  if (!(g.tau >= 0.0 && g.tau <= 1.0)) throw std::invalid_argument("tau must lie in [0,1]");
  if (i < 1 || i > g.steps)
    throw std::out_of_range("sampling iteration " + std::to_string(i) + " outside [1," + std::to_string(g.steps) + "]");
  // 0.7*50 evaluates to 35.000000000000004
  const double raw = g.tau * g.steps;
  const double cut = std::ceil(std::round(raw * 1e9) / 1e9);
  return i <= static_cast<int>(cut);
}

std::vector<int> sampling_timesteps(const NoiseSchedule& sched, int steps) {
  if (steps < 1 || steps > sched.steps()) throw std::invalid_argument("sampling steps must be in [1, T]");
  std::vector<int> ts;
  for (int i = 0; i <= steps; ++i)
    ts.push_back(static_cast<int>(std::llround(static_cast<double>(sched.steps()) * (steps - i) / steps)));
  return ts;
}

std::vector<double> instance_weights(const std::vector<BBox>& boxes) {
  if (boxes.empty()) return {};
  std::vector<double> inv;
  double total = 0.0;
  for (const BBox& b : boxes) {
    if (auto v = validate_bbox(b); !v)
      throw std::invalid_argument(std::string("instance_weights: ") + to_string(v.violation));
    inv.push_back(1.0 / b.area());
    total += inv.back();
  }
  for (double& w : inv) w /= total;
  return inv;
}

Tensor guided_eps(const Denoiser& model, const Tensor& z_t, int t, const Layout& layout, bool gate,
                  const SamplerConfig& cfg) {
  if (cfg.cfg_scale < 0.0) throw std::invalid_argument("cfg_scale must be >= 0");
  ForwardOptions uncond;
  uncond.guidance_on = false;
  uncond.null_text = true;
  if (cfg.cfg_scale == 0.0) return model.forward(z_t, t, layout, uncond);

  ForwardOptions cond;
  cond.guidance_on = gate && layout.active_count() > 0;
  if (cond.guidance_on) {
    cond.fusion = cfg.fusion;
    if (cfg.area_weights) {
      std::vector<BBox> boxes;
      for (const auto* inst : layout.active()) boxes.push_back(inst->bbox);
      cond.instance_weights = instance_weights(boxes);
    }
  }
  Tensor ec = model.forward(z_t, t, layout, cond);
  if (cfg.cfg_scale == 1.0) return ec;
  Tensor eu = model.forward(z_t, t, layout, uncond);
  return add(eu, scale(sub(ec, eu), cfg.cfg_scale));
}

Tensor ddim_update(const NoiseSchedule& sched, const Tensor& z_t, int t, int t_prev, const Tensor& eps, bool clip_x0,
                   double eta, const Tensor& noise) {
  if (t_prev >= t) throw std::invalid_argument("ddim_update: t_prev must be below t");
  const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
  const double sa = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
  const auto z = z_t.data();
  const auto e = eps.data();
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  if (sigma > 0.0 && (!noise.defined() || noise.shape() != z_t.shape()))
    throw std::invalid_argument("ddim_update: stochastic step needs a noise tensor of latent shape");
  std::vector<double> out(z.size());
  for (size_t k = 0; k < z.size(); ++k) {
    double x0 = (z[k] - s1 * e[k]) / sa;
    double ek = e[k];
    if (clip_x0 && (x0 > 1.0 || x0 < -1.0)) {
      x0 = std::clamp(x0, -1.0, 1.0);
      ek = (z[k] - sa * x0) / s1;
    }
    out[k] = std::sqrt(ab_prev) * x0 + dir * ek;
    if (sigma > 0.0) out[k] += sigma * noise.data()[k];
  }
  return Tensor::from_data(z_t.shape(), std::move(out));
}

Tensor sample_with(const EpsFn& eps_fn, const NoiseSchedule& sched, const Shape& latent_shape, const SamplerConfig& cfg,
                   const GuidanceSchedule& g, SampleTrace* trace) {
  NoGradGuard ng;
  Rng rng(cfg.seed);
  Tensor z = Tensor::randn(latent_shape, rng);
  const auto ts = sampling_timesteps(sched, g.steps);
  const double eta = cfg.deterministic ? 0.0 : 1.0;
  if (trace) trace->timesteps = ts;
  for (int i = 1; i <= g.steps; ++i) {
    const bool gate = beta_gate(i, g);
    if (trace) trace->gates.push_back(gate);
    Tensor e = eps_fn(z, ts[i - 1], gate);
    Tensor noise = eta > 0.0 ? Tensor::randn(latent_shape, rng) : Tensor{};
    z = ddim_update(sched, z, ts[i - 1], ts[i], e, cfg.clip_x0, eta, noise);
  }
  std::vector<double> out(z.data().begin(), z.data().end());
  for (double& v : out) v = std::clamp(v, -1.0, 1.0);
  return Tensor::from_data(latent_shape, std::move(out));
}

Tensor sample(const Denoiser& model, const NoiseSchedule& sched, const Layout& layout, const SamplerConfig& cfg,
              const GuidanceSchedule& g, SampleTrace* trace) {
  return sample_with([&](const Tensor& z, int t, bool gate) { return guided_eps(model, z, t, layout, gate, cfg); },
                     sched, model.latent_shape(), cfg, g, trace);
}

Tensor denoise_step(const Denoiser& model, const NoiseSchedule& sched, const Tensor& z_t, int i, const Layout& layout,
                    bool gate, const SamplerConfig& cfg, int total_steps) {
  const auto ts = sampling_timesteps(sched, total_steps);
  if (i < 1 || i > total_steps) throw std::out_of_range("denoise_step: iteration out of range");
  NoGradGuard ng;
  Tensor e = guided_eps(model, z_t, ts[i - 1], layout, gate, cfg);
  return ddim_update(sched, z_t, ts[i - 1], ts[i], e, cfg.clip_x0);
}

Tensor diffusion_loss(const Denoiser& model, const NoiseSchedule& sched, const Tensor& x0, const Layout& layout, int t,
                      const Tensor& eps, const ForwardOptions& opt) {
  if (t < 1) throw std::out_of_range("training timestep must be >= 1");
  Tensor zt = add_noise(sched, x0, t, eps);
  return mse_loss(model.forward(zt, t, layout, opt), eps);
}

}  // namespace migkit
