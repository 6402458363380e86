#pragma once

#include <memory>
#include <string>
#include <vector>

#include "migkit/fusion.hpp"
#include "migkit/layout.hpp"
#include "migkit/nn.hpp"
#include "migkit/text_embedder.hpp"

namespace migkit {

struct BackboneConfig {
  std::string kind = "unet";  // unet | dit
  int latent_channels = 3;
  int latent_h = 16, latent_w = 16;
  int n_max = 10;
  int d_text = 32;
  int d_time = 64;

  // unet
  int width0 = 32, width1 = 64;
  bool rel_pos_bias = true;

  // dit
  int patch = 2;
  int d_model = 64;
  int depth = 2;
  int d_ffn = 128;

  // Empty means ToyTextEmbedder::default_vocabulary().
  std::vector<std::string> vocabulary;
};

struct ForwardOptions {
  // false runs the untouched base network on the global caption: no layout
  // branch, adapters bypassed.
  bool guidance_on = true;
  // Replace every caption with the <null> token (unconditional pass).
  bool null_text = false;
  FusionStrategy fusion = FusionStrategy::kMask;
  // One weight per active instance, or empty for all ones.
  std::vector<double> instance_weights;
};

// Caption used by the base path: the global caption, else the sub-captions
// joined with " and ", else empty (null token).
std::string conditioning_caption(const Layout& layout);

// Sinusoidal timestep features [1, dim]; dim must be even.
Tensor timestep_features(double t, int dim);

// Noise predictor eps(z_t, t, layout). Subclasses register all weights, the
// caption embedder table included, so state_dict() captures everything.
class Denoiser : public nn::Module {
 public:
  Denoiser(const BackboneConfig& cfg, Rng& rng);

  virtual Tensor forward(const Tensor& z_t, double t, const Layout& layout, const ForwardOptions& opt) const = 0;

  // Linear-name globs that receive LoRA by default.
  virtual std::vector<std::string> default_lora_targets() const = 0;

  const BackboneConfig& config() const { return cfg_; }
  const ToyTextEmbedder& text() const { return text_; }
  Shape latent_shape() const { return {cfg_.latent_channels, cfg_.latent_h, cfg_.latent_w}; }

 protected:
  // Caption tokens [n, d_text], or the null token.
  Tensor caption_tokens(const std::string& caption, bool null_text) const;
  void check_latent(const Tensor& z_t) const;

  BackboneConfig cfg_;
  ToyTextEmbedder text_;
};

std::unique_ptr<Denoiser> make_denoiser(const BackboneConfig& cfg, Rng& rng);

}  // namespace migkit
