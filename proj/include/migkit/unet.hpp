#pragma once

#include <string>
#include <vector>

#include "migkit/denoiser.hpp"
#include "migkit/mask_encoder.hpp"

namespace migkit {

// One conquer input: the noisy latent with the instance's layout slot
// appended as an extra channel.
struct DividedInput {
  Tensor input;  // [C+1, h, w]
  BBox bbox;
  std::string caption;
  int slot = 0;  // index in the padded layout
};

// Two-level convolutional denoiser with a per-instance encoder pass.
//
//   base path : conv_in -> encoder -> decoder on the global caption
//   MIG path  : divide -> encoder per instance (LoRA, layout channel, box
//               embedding, sub-caption) -> combine at every pyramid level ->
//               fusion projections -> shared decoder
//
// Pyramid levels: s0 [w0,h,w], s1 [w1,h/2,w/2], mid [w1,h/4,w/4].
class ToyUNet : public Denoiser {
 public:
  ToyUNet(const BackboneConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& z_t, double t, const Layout& layout, const ForwardOptions& opt) const override;
  std::vector<std::string> default_lora_targets() const override;

  std::vector<DividedInput> divide(const Layout& layout, const Tensor& z_t) const;
  std::vector<FeaturePyramid> conquer(const std::vector<DividedInput>& inputs, double t, bool null_text = false) const;
  // Fuses the pyramids and applies the fusion projections.
  FeaturePyramid combine(const std::vector<FeaturePyramid>& features, const std::vector<DividedInput>& inputs,
                         const std::vector<double>& weights, FusionStrategy strategy) const;
  Tensor decode(const FeaturePyramid& pyramid, double t, const Tensor& text_tokens) const;

  // Frozen base encoder on a bare latent (no layout branch, no adapters).
  FeaturePyramid encode_base(const Tensor& z_t, double t, const Tensor& text_tokens) const;

  const MaskEncoder& mask_encoder() const { return mask_enc_; }

 private:
  struct ResBlock {
    nn::Conv2d c1, c2;
    nn::Linear temb;
  };
  struct CrossAttn {
    nn::Linear q, k, v, out;
  };
  struct SelfAttn {
    nn::Linear q, k, v, out;
    Tensor relpos;           // [(2h-1)(2w-1), 1] or undefined
    std::vector<int> index;  // h*w*h*w lookups into relpos
  };

  ResBlock make_res(const std::string& name, int c, Rng& rng);
  CrossAttn make_xattn(const std::string& name, int c, Rng& rng);
  SelfAttn make_sattn(const std::string& name, int c, int h, int w, Rng& rng);

  Tensor time_embedding(double t) const;
  Tensor res(const ResBlock& b, const Tensor& x, const Tensor& temb) const;
  Tensor xattn(const CrossAttn& a, const Tensor& x, const Tensor& text, bool adapters) const;
  Tensor sattn(const SelfAttn& a, const Tensor& x, bool adapters) const;
  FeaturePyramid encode(const Tensor& h0, const Tensor& temb, const Tensor& text, bool adapters) const;
  Tensor decode_with(const FeaturePyramid& p, const Tensor& temb, const Tensor& text) const;

  nn::Linear time1_, time2_;
  nn::Conv2d conv_in_;
  ResBlock enc_res0_, enc_res1_, mid_res_, dec_res1_, dec_res0_;
  CrossAttn enc_x0_, enc_x1_, mid_x_, dec_x1_, dec_x0_;
  SelfAttn enc_s1_, mid_s_;
  nn::Conv2d down0_, down1_, up1_, up0_, conv_out_;

  // layout branch
  nn::Conv2d layout_in_;
  MaskEncoder mask_enc_;
  nn::Linear bbox_proj_;
  std::vector<nn::Linear> fuse_;  // one per pyramid level
};

}  // namespace migkit
