#include "migkit/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "migkit/lora.hpp"
#include "migkit/rng.hpp"

namespace migkit {

AdamW::AdamW(std::vector<Tensor> params, const AdamWConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  if (params_.empty()) throw std::invalid_argument("optimizer has no parameters");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw std::invalid_argument("optimizer parameter does not require grad");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

double AdamW::step() {
  double norm2 = 0.0;
  for (const Tensor& p : params_)
    if (p.has_grad())
      for (double g : p.grad()) norm2 += g * g;
  const double norm = std::sqrt(norm2);
  const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      w[i] -= cfg_.lr * (cfg_.weight_decay * w[i] + (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps));
    }
  }
  return norm;
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

const char* to_string(TrainPhase p) { return p == TrainPhase::kBase ? "base" : "layout"; }

namespace {

double scheduled_lr(const PhaseConfig& cfg, int step) {
  if (step <= cfg.warmup) return cfg.opt.lr * step / std::max(1, cfg.warmup);
  const double span = std::max(1, cfg.steps - cfg.warmup);
  const double progress = std::min(1.0, (step - cfg.warmup) / span);
  const double lo = cfg.opt.lr * cfg.final_lr_fraction;
  return lo + (cfg.opt.lr - lo) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace

double train_phase(Denoiser& model, const NoiseSchedule& sched, const std::vector<TrainSample>& data, TrainPhase phase,
                   const PhaseConfig& cfg, uint64_t seed, const TrainHooks& hooks) {
  if (data.empty()) throw std::invalid_argument("training set is empty");
  if (cfg.steps < 1 || cfg.batch < 1) throw std::invalid_argument("steps and batch must be >= 1");
  const bool base = phase == TrainPhase::kBase;
  if (!base && param_count(model).adapter == 0)
    throw std::logic_error("layout phase needs LoRA adapters attached to the model");
  model.set_trainable(base, !base, !base);
  AdamW opt(model.trainable_parameters(), cfg.opt);
  Rng rng(seed);
  const Shape shape = model.latent_shape();
  for (const auto& s : data)
    if (s.latent.shape() != shape) throw ShapeError("training latent " + shape_str(s.latent.shape()) + " != model " + shape_str(shape));

  double window = 0.0, last_mean = 0.0, last_norm = 0.0;
  int in_window = 0;
  const int log_every = hooks.log_every > 0 ? hooks.log_every : cfg.steps;
  for (int step = 1; step <= cfg.steps; ++step) {
    opt.set_lr(scheduled_lr(cfg, step));
    opt.zero_grad();
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const TrainSample& s = data[rng.integer(0, static_cast<int64_t>(data.size()) - 1)];
      const int t = static_cast<int>(rng.integer(1, sched.steps()));
      Tensor eps = Tensor::randn(shape, rng);
      ForwardOptions fo;
      if (base) {
        fo.guidance_on = false;
        fo.null_text = rng.uniform() < cfg.null_text_prob;
      } else {
        std::vector<BBox> boxes;
        for (const auto* inst : s.layout.active()) boxes.push_back(inst->bbox);
        fo.instance_weights = instance_weights(boxes);
      }
      Tensor loss = diffusion_loss(model, sched, s.latent, s.layout, t, eps, fo);
      batch_loss += loss.item();
      scale(loss, 1.0 / cfg.batch).backward();
    }
    last_norm = opt.step();
    window += batch_loss / cfg.batch;
    ++in_window;
    if (step % log_every == 0 || step == cfg.steps) {
      last_mean = window / in_window;
      if (hooks.on_log) hooks.on_log({phase, step, last_mean, last_norm, opt.lr()});
      window = 0.0;
      in_window = 0;
    }
    if (hooks.checkpoint_every > 0 && hooks.on_checkpoint && step % hooks.checkpoint_every == 0)
      hooks.on_checkpoint(phase, step);
  }
  model.set_trainable(false, false, false);
  return last_mean;
}

}  // namespace migkit
