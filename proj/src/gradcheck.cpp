#include "migkit/gradcheck.hpp"

#include <functional>

#include "migkit/denoiser.hpp"
#include "migkit/diffusion.hpp"
#include "migkit/fusion.hpp"
#include "migkit/lora.hpp"
#include "migkit/mask_encoder.hpp"
#include "migkit/rng.hpp"
#include "migkit/tensor.hpp"

namespace migkit {

namespace {

Tensor leaf(const Shape& s, Rng& rng) { return Tensor::randn(s, rng).set_requires_grad(true); }

// Scalar probe <y, r> with a fixed random r.
std::function<Tensor()> probed(std::function<Tensor()> f, Rng& rng) {
  Tensor y;
  {
    NoGradGuard ng;
    y = f();
  }
  Tensor r = Tensor::randn(y.shape(), rng);
  return [f = std::move(f), r] { return sum(mul(f(), r)); };
}

struct OpCase {
  std::string name;
  std::function<Tensor()> f;
  std::vector<Tensor> params;
};

std::vector<OpCase> op_cases(Rng& rng) {
  std::vector<OpCase> cs;
  auto add_case = [&](std::string name, std::function<Tensor()> f, std::vector<Tensor> ps) {
    cs.push_back({std::move(name), probed(std::move(f), rng), std::move(ps)});
  };
  Tensor a = leaf({3, 4}, rng), b = leaf({3, 4}, rng);
  add_case("add", [=] { return add(a, b); }, {a, b});
  add_case("sub", [=] { return sub(a, b); }, {a, b});
  add_case("mul", [=] { return mul(a, b); }, {a, b});
  add_case("scale", [=] { return scale(a, -1.7); }, {a});
  add_case("divide", [=] { return divide(a, 3.0); }, {a});
  add_case("silu", [=] { return silu(a); }, {a});
  add_case("square", [=] { return square(a); }, {a});
  add_case("sum", [=] { return sum(a); }, {a});
  add_case("mean", [=] { return mean(a); }, {a});
  add_case("mse_loss", [=] { return mse_loss(a, b); }, {a, b});
  add_case("reshape", [=] { return reshape(a, {2, 6}); }, {a});
  add_case("transpose", [=] { return transpose(a); }, {a});
  Tensor c = leaf({2, 4}, rng);
  add_case("concat_rows", [=] { return concat_rows({a, c}); }, {a, c});
  add_case("slice_rows", [=] { return slice_rows(a, 1, 3); }, {a});
  add_case("mean_rows", [=] { return mean_rows(a); }, {a});
  Tensor table = leaf({5, 4}, rng);
  add_case("gather_rows", [=] { return gather_rows(table, {0, 3, 3, 1}); }, {table});
  Tensor bias4 = leaf({4}, rng);
  add_case("add_row_bias", [=] { return add_row_bias(a, bias4); }, {a, bias4});

  Tensor x = leaf({2, 6, 6}, rng), y = leaf({3, 6, 6}, rng);
  add_case("concat_channels", [=] { return concat_channels({x, y}); }, {x, y});
  add_case("slice_channels", [=] { return slice_channels(y, 1, 3); }, {y});
  Tensor bias2 = leaf({2}, rng);
  add_case("add_channel_bias", [=] { return add_channel_bias(x, bias2); }, {x, bias2});
  std::vector<double> map(36);
  for (double& m : map) m = rng.uniform();
  add_case("modulate", [=] { return modulate(x, map); }, {x});

  Tensor m1 = leaf({3, 5}, rng), m2 = leaf({5, 2}, rng);
  add_case("matmul", [=] { return matmul(m1, m2); }, {m1, m2});
  Tensor w = leaf({3, 4}, rng), wb = leaf({3}, rng);
  add_case("linear", [=] { return linear(a, w, wb); }, {a, w, wb});
  add_case("softmax_rows", [=] { return softmax_rows(a); }, {a});

  Tensor k = leaf({3, 2, 3, 3}, rng), kb = leaf({3}, rng);
  add_case("conv2d_stride1", [=] { return conv2d(x, k, kb, 1, 1); }, {x, k, kb});
  add_case("conv2d_stride2", [=] { return conv2d(x, k, kb, 2, 1); }, {x, k, kb});
  add_case("bilinear_up", [=] { return bilinear_interp(x, 9, 11); }, {x});
  add_case("bilinear_down", [=] { return bilinear_interp(x, 4, 3); }, {x});

  Tensor q = leaf({4, 3}, rng), kk = leaf({5, 3}, rng), v = leaf({5, 2}, rng), ab = leaf({4, 5}, rng);
  add_case("attention", [=] { return attention(q, kk, v); }, {q, kk, v});
  add_case("attention_masked_bias", [=] { return attention(q, kk, v, {true, false, true, true, false}, ab); },
           {q, kk, v, ab});

  Tensor lat = leaf({3, 4, 4}, rng);
  add_case("patchify", [=] { return patchify(lat, 2); }, {lat});
  Tensor toks = leaf({4, 12}, rng);
  add_case("unpatchify", [=] { return unpatchify(toks, 3, 4, 4, 2); }, {toks});

  Tensor f1 = leaf({2, 4, 4}, rng), f2 = leaf({2, 4, 4}, rng);
  Tensor s1 = layout_slot({0.0, 0.0, 0.7, 0.6}, 4, 4), s2 = layout_slot({0.3, 0.2, 1.0, 1.0}, 4, 4);
  std::vector<std::vector<double>> masks{{s1.data().begin(), s1.data().end()}, {s2.data().begin(), s2.data().end()}};
  for (auto strat : {FusionStrategy::kSum, FusionStrategy::kAvg, FusionStrategy::kMask})
    add_case(std::string("fusion_") + to_string(strat),
             [=] { return combine_level({f1, f2}, masks, {0.4, 0.6}, strat); }, {f1, f2});
  return cs;
}

void perturb(nn::Module& m, Rng& rng) {
  for (auto& p : m.parameters())
    for (double& v : p.tensor.mutable_data()) v += 0.05 * rng.normal();
}

GradCheckCase model_case(const std::string& name, const std::string& kind, bool guided, const GradCheckOptions& opt,
                         Rng& rng) {
  BackboneConfig cfg;
  cfg.kind = kind;
  cfg.latent_h = cfg.latent_w = 8;
  cfg.d_text = 8;
  cfg.d_time = 16;
  cfg.width0 = 8;
  cfg.width1 = 16;
  cfg.d_model = 16;
  cfg.depth = 1;
  cfg.d_ffn = 24;
  auto model = make_denoiser(cfg, rng);
  LoraConfig lc;
  lc.rank = 2;
  lc.targets = model->default_lora_targets();
  attach_lora(*model, lc, rng);
  perturb(*model, rng);
  model->set_trainable(true, true, true);

  Layout layout{"red square and blue circle",
                {{"red square", {0.1, 0.1, 0.5, 0.6}}, {"blue circle", {0.4, 0.3, 0.9, 0.9}}}};
  Tensor z = Tensor::randn(model->latent_shape(), rng), target = Tensor::randn(model->latent_shape(), rng);
  ForwardOptions fo;
  fo.guidance_on = guided;
  if (guided) fo.instance_weights = instance_weights({layout.instances[0].bbox, layout.instances[1].bbox});
  auto f = [&] { return mse_loss(model->forward(z, 400.0, layout, fo), target); };
  Rng coords = rng.fork();
  auto r = finite_diff_check(f, model->trainable_parameters(), 1e-5, opt.model_coords, &coords);
  return {name, true, r.max_rel_error, opt.model_tolerance, r.checked};
}

}  // namespace

std::vector<GradCheckCase> run_grad_check_suite(const GradCheckOptions& opt) {
  Rng rng(opt.seed);
  std::vector<GradCheckCase> out;
  for (auto& c : op_cases(rng)) {
    auto r = finite_diff_check(c.f, c.params);
    out.push_back({c.name, false, r.max_rel_error, opt.op_tolerance, r.checked});
  }
  {
    // LoRA-adapted linear, both factors and the input.
    nn::Linear l("probe", 5, 4, true, rng);
    l.attach_adapter(2, 4.0, rng);
    for (double& v : l.adapter()->b.mutable_data()) v = rng.normal();
    l.adapter()->a.set_requires_grad(true);
    l.adapter()->b.set_requires_grad(true);
    l.weight().set_requires_grad(true);
    Tensor x = leaf({3, 5}, rng);
    auto f = probed([=] { return l.forward(x); }, rng);
    auto r = finite_diff_check(f, {x, l.weight(), l.adapter()->a, l.adapter()->b});
    out.push_back({"lora_linear", false, r.max_rel_error, opt.op_tolerance, r.checked});
  }
  {
    MaskEncoder enc("probe.enc", rng);
    perturb(enc, rng);
    enc.set_trainable(true, true, true);
    Tensor mask = layout_slot({0.2, 0.1, 0.7, 0.8}, 16, 16);
    auto f = probed([&] { return enc.encode(mask); }, rng);
    Rng coords = rng.fork();
    auto r = finite_diff_check(f, enc.trainable_parameters(), 1e-5, 20, &coords);
    out.push_back({"mask_encoder", false, r.max_rel_error, opt.op_tolerance, r.checked});
  }
  out.push_back(model_case("unet_guided_loss", "unet", true, opt, rng));
  out.push_back(model_case("unet_base_loss", "unet", false, opt, rng));
  out.push_back(model_case("dit_guided_loss", "dit", true, opt, rng));
  out.push_back(model_case("dit_base_loss", "dit", false, opt, rng));
  return out;
}

nlohmann::json grad_check_to_json(const std::vector<GradCheckCase>& cases) {
  nlohmann::json arr = nlohmann::json::array();
  bool ok = true;
  for (const auto& c : cases) {
    arr.push_back({{"name", c.name},
                   {"kind", c.end_to_end ? "model" : "op"},
                   {"max_rel_error", c.max_rel_error},
                   {"tolerance", c.tolerance},
                   {"checked", c.checked},
                   {"passed", c.passed()}});
    ok = ok && c.passed();
  }
  return {{"passed", ok}, {"cases", arr}};
}

}  // namespace migkit
