#include "migkit/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "migkit/dit.hpp"
#include "migkit/unet.hpp"

namespace migkit {

std::string conditioning_caption(const Layout& layout) {
  if (!layout.global_caption.empty()) return layout.global_caption;
  std::string out;
  for (const auto* inst : layout.active()) {
    if (inst->caption.empty()) continue;
    if (!out.empty()) out += " and ";
    out += inst->caption;
  }
  return out;
}

Tensor timestep_features(double t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep feature dim must be even");
  const int half = dim / 2;
  std::vector<double> v(static_cast<size_t>(dim));
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    v[static_cast<size_t>(k)] = std::sin(t * freq);
    v[static_cast<size_t>(k + half)] = std::cos(t * freq);
  }
  return Tensor::from_data({1, dim}, std::move(v));
}

Denoiser::Denoiser(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.latent_channels < 1 || cfg.latent_h < 1 || cfg.latent_w < 1)
    throw std::invalid_argument("latent extents must be positive");
  if (cfg.n_max < 1) throw std::invalid_argument("n_max must be positive");
  text_ = ToyTextEmbedder("text.embed", cfg.vocabulary.empty() ? ToyTextEmbedder::default_vocabulary() : cfg.vocabulary,
                          cfg.d_text, rng);
  add_tensor("text.embed.table", text_.table(), nn::Role::kBase);
}

Tensor Denoiser::caption_tokens(const std::string& caption, bool null_text) const {
  if (null_text || caption.empty()) return text_.null_tokens();
  return text_.tokens(caption);
}

void Denoiser::check_latent(const Tensor& z_t) const {
  if (z_t.shape() != latent_shape())
    throw ShapeError("latent shape " + shape_str(z_t.shape()) + " does not match backbone " +
                     shape_str(latent_shape()));
}

std::unique_ptr<Denoiser> make_denoiser(const BackboneConfig& cfg, Rng& rng) {
  if (cfg.kind == "unet") return std::make_unique<ToyUNet>(cfg, rng);
  if (cfg.kind == "dit") return std::make_unique<ToyDiT>(cfg, rng);
  throw std::invalid_argument("unknown backbone '" + cfg.kind + "' (expected unet|dit)");
}

}  // namespace migkit
