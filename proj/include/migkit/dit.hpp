#pragma once

#include <string>
#include <vector>

#include "migkit/denoiser.hpp"
#include "migkit/mask_encoder.hpp"

namespace migkit {

// n_max layout tokens; padded slots are zero rows with mask == false.
struct LayoutTokens {
  Tensor tokens;           // [n_max, d_model]
  std::vector<bool> mask;  // true = attendable
  int active_count() const;
};

// Single-stream transformer over [text | layout | image] tokens.
//
// Image tokens come from 2x2 patches of the latent. Layout token i is a
// projection of the flattened slot plus a projection of the pooled
// sub-caption plus a layout type embedding; pooled sub-captions are also
// appended to the text sequence. Masked layout slots are removed before the
// blocks run, so they cannot influence any output.
class ToyDiT : public Denoiser {
 public:
  ToyDiT(const BackboneConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& z_t, double t, const Layout& layout, const ForwardOptions& opt) const override;
  std::vector<std::string> default_lora_targets() const override;

  // Adapted pass over explicit text rows [m, d_text] and layout tokens;
  // masked token rows are discarded whatever their contents.
  Tensor forward_tokens(const Tensor& z_t, double t, const Tensor& text, const LayoutTokens& layout) const;

  LayoutTokens build_layout_tokens(const Layout& layout, const LayoutLatent& latent, bool null_text = false) const;

  int image_tokens() const { return (cfg_.latent_h / cfg_.patch) * (cfg_.latent_w / cfg_.patch); }

 private:
  struct Block {
    nn::Linear q, k, v, out, fc1, fc2;
  };

  Tensor run(const Tensor& z_t, double t, const Tensor& text, const Tensor& layout, bool adapters) const;

  nn::Linear patch_in_, time1_, time2_, text_in_, out_;
  Tensor pos_, type_;  // [n_img, d], [3, d] (text, layout, image)
  std::vector<Block> blocks_;

  nn::Linear slot_proj_, cap_proj_;
  Tensor layout_type_;  // [d]
};

}  // namespace migkit
