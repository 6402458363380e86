#include "migkit/dit.hpp"

#include <algorithm>
#include <stdexcept>

namespace migkit {

using nn::Linear;
using nn::Role;

int LayoutTokens::active_count() const { return static_cast<int>(std::count(mask.begin(), mask.end(), true)); }

ToyDiT::ToyDiT(const BackboneConfig& cfg, Rng& rng) : Denoiser(cfg, rng) {
  const int p = cfg.patch, d = cfg.d_model;
  if (p < 1 || cfg.latent_h % p != 0 || cfg.latent_w % p != 0)
    throw std::invalid_argument("dit latent extents must be divisible by the patch size");
  if (d < 2 || d % 2 != 0) throw std::invalid_argument("dit d_model must be even");
  if (cfg.depth < 1) throw std::invalid_argument("dit depth must be >= 1");
  const int c = cfg.latent_channels;

  patch_in_ = add_layer(Linear("dit.patch_in", c * p * p, d, true, rng));
  pos_ = add_tensor("dit.pos", Tensor::uniform({image_tokens(), d}, -0.1, 0.1, rng), Role::kBase);
  time1_ = add_layer(Linear("dit.time.l1", d, d, true, rng));
  time2_ = add_layer(Linear("dit.time.l2", d, d, true, rng));
  text_in_ = add_layer(Linear("dit.text_in", cfg.d_text, d, true, rng));
  type_ = add_tensor("dit.type", Tensor::uniform({3, d}, -0.1, 0.1, rng), Role::kBase);
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string b = "dit.b" + std::to_string(l);
    blocks_.push_back({add_layer(Linear(b + ".attn.q", d, d, false, rng)), add_layer(Linear(b + ".attn.k", d, d, false, rng)),
                       add_layer(Linear(b + ".attn.v", d, d, false, rng)), add_layer(Linear(b + ".attn.out", d, d, true, rng)),
                       add_layer(Linear(b + ".ffn.fc1", d, cfg.d_ffn, true, rng)),
                       add_layer(Linear(b + ".ffn.fc2", cfg.d_ffn, d, true, rng))});
  }
  out_ = add_layer(Linear("dit.out", d, c * p * p, true, rng));

  slot_proj_ = add_layer(Linear("mig.dit.slot_proj", cfg.latent_h * cfg.latent_w, d, true, rng, Role::kLayout));
  cap_proj_ = add_layer(Linear("mig.dit.cap_proj", cfg.d_text, d, false, rng, Role::kLayout));
  layout_type_ = add_tensor("mig.dit.layout_type", Tensor::uniform({d}, -0.1, 0.1, rng), Role::kLayout);
}

std::vector<std::string> ToyDiT::default_lora_targets() const {
  return {"dit.*.attn.q", "dit.*.attn.k", "dit.*.attn.v", "dit.*.attn.out", "dit.*.ffn.*"};
}

LayoutTokens ToyDiT::build_layout_tokens(const Layout& layout, const LayoutLatent& latent, bool null_text) const {
  const int n = cfg_.n_max, hw = cfg_.latent_h * cfg_.latent_w, d = cfg_.d_model;
  if (latent.slots.shape() != Shape{n, cfg_.latent_h, cfg_.latent_w})
    throw ShapeError("layout latent " + shape_str(latent.slots.shape()) + " does not match the backbone");
  Layout sized = layout;
  sized.n_max = n;
  const Layout padded = sized.padded();
  Tensor flat = reshape(latent.slots, {n, hw});
  Tensor zero_row = Tensor::zeros({1, d});
  std::vector<Tensor> rows;
  LayoutTokens out;
  for (int i = 0; i < n; ++i) {
    const InstanceSpec& inst = padded.instances[static_cast<size_t>(i)];
    out.mask.push_back(inst.active);
    if (!inst.active) {
      rows.push_back(zero_row);
      continue;
    }
    if (!null_text && inst.caption.empty())
      throw std::invalid_argument("layout tokens: active instance " + std::to_string(i) + " has an empty caption");
    Tensor tok = slot_proj_.forward(slice_rows(flat, i, i + 1));
    Tensor cap = mean_rows(caption_tokens(inst.caption, null_text));
    tok = add(tok, cap_proj_.forward(cap));
    rows.push_back(add_row_bias(tok, layout_type_));
  }
  out.tokens = concat_rows(rows);
  return out;
}

Tensor ToyDiT::run(const Tensor& z_t, double t, const Tensor& text, const Tensor& layout, bool adapters) const {
  const int p = cfg_.patch;
  Tensor temb = time2_.forward(silu(time1_.forward(timestep_features(t, cfg_.d_model), adapters)), adapters);
  Tensor img = add(patch_in_.forward(patchify(z_t, p), adapters), pos_);
  img = add_row_bias(add_row_bias(img, reshape(temb, {cfg_.d_model})), reshape(slice_rows(type_, 2, 3), {cfg_.d_model}));
  Tensor txt = add_row_bias(text_in_.forward(text, adapters), reshape(slice_rows(type_, 0, 1), {cfg_.d_model}));

  std::vector<Tensor> parts{txt};
  if (layout.defined()) parts.push_back(add_row_bias(layout, reshape(slice_rows(type_, 1, 2), {cfg_.d_model})));
  parts.push_back(img);
  Tensor x = concat_rows(parts);
  const int n_img = img.dim(0), n_all = x.dim(0);

  for (const Block& b : blocks_) {
    Tensor a = attention(b.q.forward(x, adapters), b.k.forward(x, adapters), b.v.forward(x, adapters));
    x = add(x, b.out.forward(a, adapters));
    x = add(x, b.fc2.forward(silu(b.fc1.forward(x, adapters)), adapters));
  }
  Tensor img_out = slice_rows(x, n_all - n_img, n_all);
  return unpatchify(out_.forward(img_out, adapters), cfg_.latent_channels, cfg_.latent_h, cfg_.latent_w, p);
}

Tensor ToyDiT::forward(const Tensor& z_t, double t, const Layout& layout, const ForwardOptions& opt) const {
  check_latent(z_t);
  const Tensor global = caption_tokens(conditioning_caption(layout), opt.null_text);
  if (!opt.guidance_on) return run(z_t, t, global, {}, false);

  Layout sized = layout;
  sized.n_max = cfg_.n_max;
  const LayoutLatent lat = build_layout_latent(sized, cfg_.latent_h, cfg_.latent_w);
  const LayoutTokens lt = build_layout_tokens(sized, lat, opt.null_text);
  const Layout padded = sized.padded();

  std::vector<Tensor> text_parts{global};
  for (int i = 0; i < cfg_.n_max; ++i)
    if (lt.mask[static_cast<size_t>(i)])
      text_parts.push_back(mean_rows(caption_tokens(padded.instances[static_cast<size_t>(i)].caption, opt.null_text)));
  return forward_tokens(z_t, t, concat_rows(text_parts), lt);
}

Tensor ToyDiT::forward_tokens(const Tensor& z_t, double t, const Tensor& text, const LayoutTokens& layout) const {
  check_latent(z_t);
  if (layout.tokens.defined() && static_cast<int>(layout.mask.size()) != layout.tokens.dim(0))
    throw ShapeError("layout token mask length does not match the token count");
  std::vector<Tensor> kept;
  for (size_t i = 0; i < layout.mask.size(); ++i)
    if (layout.mask[i]) kept.push_back(slice_rows(layout.tokens, static_cast<int>(i), static_cast<int>(i) + 1));
  return run(z_t, t, text, kept.empty() ? Tensor{} : concat_rows(kept), true);
}

}  // namespace migkit
