#include "migkit/unet.hpp"

#include <stdexcept>

namespace migkit {

using nn::Conv2d;
using nn::Linear;
using nn::Role;

namespace {

Tensor to_rows(const Tensor& x) { return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)})); }

Tensor from_rows(const Tensor& rows, int h, int w) { return reshape(transpose(rows), {rows.dim(1), h, w}); }

}  // namespace

ToyUNet::ResBlock ToyUNet::make_res(const std::string& name, int c, Rng& rng) {
  ResBlock b;
  b.c1 = add_layer(Conv2d(name + ".conv1", c, c, 1, rng));
  b.c2 = add_layer(Conv2d(name + ".conv2", c, c, 1, rng));
  b.temb = add_layer(Linear(name + ".temb", cfg_.d_time, c, true, rng));
  return b;
}

ToyUNet::CrossAttn ToyUNet::make_xattn(const std::string& name, int c, Rng& rng) {
  CrossAttn a;
  a.q = add_layer(Linear(name + ".q", c, c, false, rng));
  a.k = add_layer(Linear(name + ".k", cfg_.d_text, c, false, rng));
  a.v = add_layer(Linear(name + ".v", cfg_.d_text, c, false, rng));
  a.out = add_layer(Linear(name + ".out", c, c, true, rng));
  return a;
}

ToyUNet::SelfAttn ToyUNet::make_sattn(const std::string& name, int c, int h, int w, Rng& rng) {
  SelfAttn a;
  a.q = add_layer(Linear(name + ".q", c, c, false, rng));
  a.k = add_layer(Linear(name + ".k", c, c, false, rng));
  a.v = add_layer(Linear(name + ".v", c, c, false, rng));
  a.out = add_layer(Linear(name + ".out", c, c, true, rng));
  if (cfg_.rel_pos_bias) {
    a.relpos = add_tensor(name + ".relpos", Tensor::zeros({(2 * h - 1) * (2 * w - 1), 1}), Role::kBase);
    a.index.reserve(static_cast<size_t>(h) * w * h * w);
    for (int i = 0; i < h * w; ++i)
      for (int j = 0; j < h * w; ++j) {
        const int dy = i / w - j / w + h - 1, dx = i % w - j % w + w - 1;
        a.index.push_back(dy * (2 * w - 1) + dx);
      }
  }
  return a;
}

ToyUNet::ToyUNet(const BackboneConfig& cfg, Rng& rng) : Denoiser(cfg, rng), mask_enc_("mig.bbox", rng) {
  if (cfg.latent_h % 4 != 0 || cfg.latent_w % 4 != 0)
    throw std::invalid_argument("unet latent extents must be divisible by 4");
  if (cfg.width0 < 1 || cfg.width1 < 1) throw std::invalid_argument("unet widths must be positive");
  const int c = cfg.latent_channels, w0 = cfg.width0, w1 = cfg.width1;
  const int h1 = cfg.latent_h / 2, wd1 = cfg.latent_w / 2, h2 = cfg.latent_h / 4, wd2 = cfg.latent_w / 4;

  time1_ = add_layer(Linear("unet.time.l1", cfg.d_time, cfg.d_time, true, rng));
  time2_ = add_layer(Linear("unet.time.l2", cfg.d_time, cfg.d_time, true, rng));

  conv_in_ = add_layer(Conv2d("unet.enc.conv_in", c, w0, 1, rng));
  enc_res0_ = make_res("unet.enc.b0.res", w0, rng);
  enc_x0_ = make_xattn("unet.enc.b0.xattn", w0, rng);
  down0_ = add_layer(Conv2d("unet.enc.down0", w0, w1, 2, rng));
  enc_res1_ = make_res("unet.enc.b1.res", w1, rng);
  enc_s1_ = make_sattn("unet.enc.b1.attn", w1, h1, wd1, rng);
  enc_x1_ = make_xattn("unet.enc.b1.xattn", w1, rng);
  down1_ = add_layer(Conv2d("unet.enc.down1", w1, w1, 2, rng));
  mid_res_ = make_res("unet.enc.mid.res", w1, rng);
  mid_s_ = make_sattn("unet.enc.mid.attn", w1, h2, wd2, rng);
  mid_x_ = make_xattn("unet.enc.mid.xattn", w1, rng);

  up1_ = add_layer(Conv2d("unet.dec.up1.conv", 2 * w1, w1, 1, rng));
  dec_res1_ = make_res("unet.dec.b1.res", w1, rng);
  dec_x1_ = make_xattn("unet.dec.b1.xattn", w1, rng);
  up0_ = add_layer(Conv2d("unet.dec.up0.conv", w1 + w0, w0, 1, rng));
  dec_res0_ = make_res("unet.dec.b0.res", w0, rng);
  dec_x0_ = make_xattn("unet.dec.b0.xattn", w0, rng);
  conv_out_ = add_layer(Conv2d("unet.dec.conv_out", w0, c, 1, rng));

  layout_in_ = add_layer(Conv2d::zeros("mig.layout_in", 1, w0, 1, Role::kLayout, false));
  add_child(&mask_enc_);
  bbox_proj_ = add_layer(Linear("mig.bbox.proj", MaskEncoder::kChannels, w0, false, rng, Role::kLayout));
  fuse_.push_back(add_layer(Linear::identity("mig.fuse.s0", w0, Role::kBase)));
  fuse_.push_back(add_layer(Linear::identity("mig.fuse.s1", w1, Role::kBase)));
  fuse_.push_back(add_layer(Linear::identity("mig.fuse.mid", w1, Role::kBase)));
}

std::vector<std::string> ToyUNet::default_lora_targets() const {
  return {"unet.enc.*.q", "unet.enc.*.k", "unet.enc.*.v", "unet.enc.*.out", "mig.fuse.*"};
}

Tensor ToyUNet::time_embedding(double t) const {
  Tensor e = time1_.forward(timestep_features(t, cfg_.d_time));
  return silu(time2_.forward(silu(e)));
}

Tensor ToyUNet::res(const ResBlock& b, const Tensor& x, const Tensor& temb) const {
  Tensor h = b.c1.forward(silu(x));
  h = add_channel_bias(h, reshape(b.temb.forward(temb), {x.dim(0)}));
  h = b.c2.forward(silu(h));
  return add(x, h);
}

Tensor ToyUNet::xattn(const CrossAttn& a, const Tensor& x, const Tensor& text, bool adapters) const {
  Tensor rows = to_rows(x);
  Tensor o = attention(a.q.forward(rows, adapters), a.k.forward(text, adapters), a.v.forward(text, adapters));
  return add(x, from_rows(a.out.forward(o, adapters), x.dim(1), x.dim(2)));
}

Tensor ToyUNet::sattn(const SelfAttn& a, const Tensor& x, bool adapters) const {
  Tensor rows = to_rows(x);
  const int n = rows.dim(0);
  Tensor bias;
  if (a.relpos.defined()) bias = reshape(gather_rows(a.relpos, a.index), {n, n});
  Tensor o = attention(a.q.forward(rows, adapters), a.k.forward(rows, adapters), a.v.forward(rows, adapters), {}, bias);
  return add(x, from_rows(a.out.forward(o, adapters), x.dim(1), x.dim(2)));
}

FeaturePyramid ToyUNet::encode(const Tensor& h0, const Tensor& temb, const Tensor& text, bool adapters) const {
  Tensor s0 = xattn(enc_x0_, res(enc_res0_, h0, temb), text, adapters);
  Tensor h = down0_.forward(s0);
  Tensor s1 = xattn(enc_x1_, sattn(enc_s1_, res(enc_res1_, h, temb), adapters), text, adapters);
  h = down1_.forward(s1);
  Tensor mid = xattn(mid_x_, sattn(mid_s_, res(mid_res_, h, temb), adapters), text, adapters);
  return {s0, s1, mid};
}

Tensor ToyUNet::decode_with(const FeaturePyramid& p, const Tensor& temb, const Tensor& text) const {
  Tensor u = bilinear_interp(p[2], p[1].dim(1), p[1].dim(2));
  u = up1_.forward(concat_channels({u, p[1]}));
  u = xattn(dec_x1_, res(dec_res1_, u, temb), text, false);
  u = bilinear_interp(u, p[0].dim(1), p[0].dim(2));
  u = up0_.forward(concat_channels({u, p[0]}));
  u = xattn(dec_x0_, res(dec_res0_, u, temb), text, false);
  return conv_out_.forward(silu(u));
}

FeaturePyramid ToyUNet::encode_base(const Tensor& z_t, double t, const Tensor& text_tokens) const {
  check_latent(z_t);
  return encode(conv_in_.forward(z_t), time_embedding(t), text_tokens, false);
}

Tensor ToyUNet::decode(const FeaturePyramid& pyramid, double t, const Tensor& text_tokens) const {
  if (pyramid.size() != 3) throw ShapeError("unet decoder expects a 3-level pyramid");
  return decode_with(pyramid, time_embedding(t), text_tokens);
}

std::vector<DividedInput> ToyUNet::divide(const Layout& layout, const Tensor& z_t) const {
  check_latent(z_t);
  Layout sized = layout;
  sized.n_max = cfg_.n_max;
  const Layout padded = sized.padded();
  const LayoutLatent lat = build_layout_latent(padded, cfg_.latent_h, cfg_.latent_w);
  std::vector<DividedInput> out;
  for (int i = 0; i < padded.n_max; ++i) {
    const InstanceSpec& inst = padded.instances[static_cast<size_t>(i)];
    if (!inst.active) continue;
    Tensor slot = reshape(slice_channels(lat.slots, i, i + 1), {1, cfg_.latent_h, cfg_.latent_w});
    out.push_back({concat_channels({z_t, slot}), inst.bbox, inst.caption, i});
  }
  return out;
}

std::vector<FeaturePyramid> ToyUNet::conquer(const std::vector<DividedInput>& inputs, double t, bool null_text) const {
  const int c = cfg_.latent_channels;
  const Tensor temb = time_embedding(t);
  std::vector<FeaturePyramid> out;
  out.reserve(inputs.size());
  for (const DividedInput& in : inputs) {
    if (in.input.ndim() != 3 || in.input.dim(0) != c + 1)
      throw ShapeError("conquer input must have " + std::to_string(c + 1) + " channels");
    if (!null_text && in.caption.empty()) throw std::invalid_argument("conquer: active instance has an empty caption");
    Tensor z = slice_channels(in.input, 0, c);
    Tensor slot = slice_channels(in.input, c, c + 1);
    Tensor ebox = mask_enc_.encode(rasterize_mask(in.bbox, 8 * cfg_.latent_h, 8 * cfg_.latent_w));
    Tensor h0 = add(add(conv_in_.forward(z), layout_in_.forward(slot)), nn::pixelwise(bbox_proj_, ebox));
    out.push_back(encode(h0, temb, caption_tokens(in.caption, null_text), true));
  }
  return out;
}

FeaturePyramid ToyUNet::combine(const std::vector<FeaturePyramid>& features, const std::vector<DividedInput>& inputs,
                                const std::vector<double>& weights, FusionStrategy strategy) const {
  std::vector<Tensor> slots;
  for (const DividedInput& in : inputs) slots.push_back(slice_channels(in.input, cfg_.latent_channels, cfg_.latent_channels + 1));
  FeaturePyramid fused = migkit::combine(features, slots, weights, strategy);
  for (size_t l = 0; l < fused.size(); ++l) fused[l] = nn::pixelwise(fuse_[l], fused[l]);
  return fused;
}

Tensor ToyUNet::forward(const Tensor& z_t, double t, const Layout& layout, const ForwardOptions& opt) const {
  check_latent(z_t);
  const Tensor global = caption_tokens(conditioning_caption(layout), opt.null_text);
  if (!opt.guidance_on || layout.active_count() == 0) {
    const Tensor temb = time_embedding(t);
    return decode_with(encode(conv_in_.forward(z_t), temb, global, false), temb, global);
  }
  const auto inputs = divide(layout, z_t);
  const auto feats = conquer(inputs, t, opt.null_text);
  return decode(combine(feats, inputs, opt.instance_weights, opt.fusion), t, global);
}

}  // namespace migkit
