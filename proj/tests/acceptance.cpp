// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "migkit/curation.hpp"
#include "migkit/diffusion.hpp"
#include "migkit/dit.hpp"
#include "migkit/eval.hpp"
#include "migkit/fusion.hpp"
#include "migkit/gradcheck.hpp"
#include "migkit/image.hpp"
#include "migkit/layout.hpp"
#include "migkit/lora.hpp"
#include "migkit/mask_encoder.hpp"
#include "migkit/pipeline.hpp"
#include "migkit/train.hpp"

using namespace migkit;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
  json metrics = json::object();

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

void randomize(nn::Module& m, nn::Role role, Rng& rng, double scale = 0.1) {
  for (auto& p : m.parameters())
    if (p.role == role)
      for (double& v : p.tensor.mutable_data()) v = scale * rng.normal();
}

Layout random_shape_layout(Rng& rng, int max_n) {
  static const char* colors[] = {"red", "green", "blue", "yellow"};
  static const char* shapes[] = {"square", "circle"};
  Layout l;
  const int n = static_cast<int>(rng.integer(1, max_n));
  for (int i = 0; i < n; ++i) {
    const double x1 = rng.uniform(0, 0.7), y1 = rng.uniform(0, 0.7);
    l.instances.push_back({std::string(colors[rng.integer(0, 3)]) + " " + shapes[rng.integer(0, 1)],
                           {x1, y1, rng.uniform(x1 + 0.1, 1.0), rng.uniform(y1 + 0.1, 1.0)}});
  }
  if (rng.uniform() < 0.5) l.global_caption = "a scene";
  return l;
}

ModelSpec default_spec(const std::string& kind) {
  ModelSpec s;
  s.backbone.kind = kind;
  return s;
}

// ---- 1 ---------------------------------------------------------------------------

Outcome scoring_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  // 700x100 images: area fractions 0.1/0.2/0.1/0.6/0.5 and pair IoUs 0.05, 0.4
  std::vector<AnnotationRecord> recs(3);
  for (auto& r : recs) {
    r.width = 700;
    r.height = 100;
  }
  recs[0].instances = {{"a", {0, 0, 70, 100}, 1.0}};
  recs[1].instances = {{"a", {0, 0, 140, 100}, 0.9}, {"b", {130, 0, 200, 100}, 0.8}};
  recs[2].instances = {{"a", {0, 0, 420, 100}, 0.5}, {"b", {200, 0, 550, 100}, 0.4}};
  const double expected[] = {97.0, 78.75, 14.5};
  int kept = 0;
  for (int i = 0; i < 3; ++i) {
    const ScoreReport s = score_record(recs[i]);
    o.metrics["totals"].push_back(s.total);
    o.require(std::abs(s.total - expected[i]) < 1e-9, "record " + std::to_string(i + 1) + " total " + fmt(s.total, 17));
    kept += s.high_quality;
  }
  o.require(kept == 2, "threshold kept " + std::to_string(kept));
  const double sec = seconds_since(t0);
  o.require(sec < 1.0, "runtime " + fmt(sec) + " s");
  o.detail = o.pass ? "totals 97 / 78.75 / 14.5, kept 2 of 3, " + fmt(sec * 1e3, 3) + " ms" : o.detail;
  return o;
}

// ---- 2 ---------------------------------------------------------------------------

Outcome plug_and_play() {
  Outcome o;
  for (const std::string kind : {"unet", "dit"}) {
    ModelSpec adapted_spec = default_spec(kind), base_spec = default_spec(kind);
    base_spec.lora = false;
    auto adapted = build_model(adapted_spec, 31);
    auto base = build_model(base_spec, 31);
    bool fresh = true;
    int64_t adapters = 0;
    for (const auto& p : adapted->parameters()) {
      if (p.role != nn::Role::kAdapter) continue;
      ++adapters;
      if (p.name.size() > 2 && p.name.compare(p.name.size() - 2, 2, ".B") == 0)
        for (double v : p.tensor.data()) fresh = fresh && v == 0.0;
    }
    o.require(adapters > 0 && fresh, kind + ": adapters missing or B not zero");
    Rng data(32);
    ForwardOptions off;
    off.guidance_on = false;
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const Tensor z = Tensor::randn(base->latent_shape(), data);
      const double t = static_cast<double>(data.integer(1, 1000));
      const Layout l = random_shape_layout(data, 3);
      off.null_text = i % 4 == 0;
      worst = std::max(worst, max_abs_diff(base->forward(z, t, l, off), adapted->forward(z, t, l, off)));
    }
    o.metrics[kind] = worst;
    o.require(worst <= 1e-10, kind + " max diff " + fmt(worst));
  }
  if (o.pass)
    o.detail = "100 inputs per backbone, max |diff| unet " + fmt(o.metrics["unet"].get<double>()) + ", dit " +
               fmt(o.metrics["dit"].get<double>());
  return o;
}

// ---- 3 ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto cases = run_grad_check_suite();
  const double sec = seconds_since(t0);
  double worst_op = 0.0, worst_model = 0.0;
  int ops = 0, models = 0;
  for (const auto& c : cases) {
    (c.end_to_end ? worst_model : worst_op) = std::max(c.end_to_end ? worst_model : worst_op, c.max_rel_error);
    ++(c.end_to_end ? models : ops);
    const double tol = c.end_to_end ? 1e-4 : 1e-6;
    o.require(c.max_rel_error < tol && c.checked > 0, c.name + " rel err " + fmt(c.max_rel_error));
  }
  o.require(models > 0 && ops > 0, "suite is missing op or end-to-end cases");
  o.require(sec < 120.0, "runtime " + fmt(sec) + " s");
  o.metrics = {{"op_cases", ops}, {"model_cases", models}, {"worst_op", worst_op}, {"worst_model", worst_model},
               {"seconds", sec}};
  if (o.pass)
    o.detail = std::to_string(ops) + " op cases (max " + fmt(worst_op, 2) + "), " + std::to_string(models) +
               " end-to-end (max " + fmt(worst_model, 2) + "), " + fmt(sec, 3) + " s";
  return o;
}

// ---- 4 ---------------------------------------------------------------------------

// DDIM with classifier-free guidance over the base network only.
Tensor layout_free_sample(const Denoiser& m, const NoiseSchedule& sched, const std::string& caption, double cfg_scale,
                          uint64_t seed, int steps) {
  NoGradGuard ng;
  Rng rng(seed);
  const Shape shape = m.latent_shape();
  Tensor z = Tensor::randn(shape, rng);
  const Layout bare{caption, {}};
  ForwardOptions cond, uncond;
  cond.guidance_on = uncond.guidance_on = false;
  uncond.null_text = true;
  const int T = sched.steps();
  for (int i = 1; i <= steps; ++i) {
    const int t = static_cast<int>(std::llround(static_cast<double>(T) * (steps - i + 1) / steps));
    const int tp = static_cast<int>(std::llround(static_cast<double>(T) * (steps - i) / steps));
    const Tensor ec = m.forward(z, t, bare, cond), eu = m.forward(z, t, bare, uncond);
    const double ab = sched.alpha_bar(t), abp = sched.alpha_bar(tp);
    const double sa = std::sqrt(ab), s1 = std::sqrt(1.0 - ab), dir = std::sqrt(1.0 - abp);
    std::vector<double> next(static_cast<size_t>(z.numel()));
    for (int64_t k = 0; k < z.numel(); ++k) {
      double e = eu.at(k) + (ec.at(k) - eu.at(k)) * cfg_scale;
      double x0 = (z.at(k) - s1 * e) / sa;
      if (x0 > 1.0 || x0 < -1.0) {
        x0 = std::clamp(x0, -1.0, 1.0);
        e = (z.at(k) - sa * x0) / s1;
      }
      next[k] = std::sqrt(abp) * x0 + dir * e;
    }
    z = Tensor::from_data(shape, std::move(next));
  }
  std::vector<double> out(z.data().begin(), z.data().end());
  for (double& v : out) v = std::clamp(v, -1.0, 1.0);
  return Tensor::from_data(shape, std::move(out));
}

Outcome gating() {
  Outcome o;
  const NoiseSchedule sched(1000);
  for (const std::string kind : {"unet", "dit"}) {
    auto m = build_model(default_spec(kind), 41);
    Rng rr(42);
    randomize(*m, nn::Role::kLayout, rr);
    randomize(*m, nn::Role::kAdapter, rr);
    Rng data(43);
    for (int trial = 0; trial < 3; ++trial) {
      const Layout l = random_shape_layout(data, 3);
      SamplerConfig cfg;
      cfg.seed = 100 + trial;
      SampleTrace trace;
      const Tensor guided = sample(*m, sched, l, cfg, {0.0, 50}, &trace);
      const Tensor plain = layout_free_sample(*m, sched, conditioning_caption(l), cfg.cfg_scale, cfg.seed, 50);
      o.require(std::none_of(trace.gates.begin(), trace.gates.end(), [](bool b) { return b; }),
                kind + ": gate active at tau = 0");
      o.require(bit_equal(guided, plain) && decode_latent(guided) == decode_latent(plain),
                kind + ": tau = 0 differs from the layout-free sampler, max diff " + fmt(max_abs_diff(guided, plain)));
      if (trial == 0) {
        const Tensor on = sample(*m, sched, l, cfg, {0.5, 50});
        o.require(!bit_equal(on, guided), kind + ": layout guidance had no effect at tau = 0.5");
      }
    }
  }
  auto m = build_model(default_spec("unet"), 44);
  SampleTrace trace;
  sample(*m, sched, Layout{"", {{"red square", {0.1, 0.1, 0.6, 0.6}}}}, {}, {0.5, 50}, &trace);
  std::vector<int> active;
  for (size_t i = 0; i < trace.gates.size(); ++i)
    if (trace.gates[i]) active.push_back(static_cast<int>(i) + 1);
  o.require(trace.gates.size() == 50 && active.size() == 25 && active.front() == 1 && active.back() == 25,
            "tau = 0.5 gate set is not iterations 1..25");
  for (int i = 1; i <= 50; ++i) o.require(beta_gate(i, {0.5, 50}) == (i <= 25), "beta_gate(" + std::to_string(i) + ")");
  if (o.pass) o.detail = "tau = 0 bit-identical for unet and dit (3 seeds each); tau = 0.5 gates iterations 1-25 of 50";
  return o;
}

// ---- 5 ---------------------------------------------------------------------------

std::vector<double> box_mask(const BBox& b, int h, int w) {
  const Tensor s = layout_slot(b, h, w);
  return {s.data().begin(), s.data().end()};
}

Outcome fusion_checks() {
  Outcome o;
  Rng rng(51);
  // sum vs n * avg
  int exact_sets = 0, near_sets = 0;
  double worst_ulps = 0.0;
  for (int n = 1; n <= 10; ++n) {
    for (int rep = 0; rep < 5; ++rep) {
      std::vector<Tensor> fs;
      for (int i = 0; i < n; ++i) fs.push_back(Tensor::randn({4, 6, 6}, rng));
      const Tensor s = combine_level(fs, {}, {}, FusionStrategy::kSum);
      const Tensor a = combine_level(fs, {}, {}, FusionStrategy::kAvg);
      const bool pow2 = (n & (n - 1)) == 0;
      bool exact = true;
      for (int64_t i = 0; i < s.numel(); ++i) {
        const double prod = n * a.at(i);
        exact = exact && prod == s.at(i);
        if (s.at(i) != 0.0)
          worst_ulps = std::max(worst_ulps, std::abs(prod - s.at(i)) /
                                                (std::numeric_limits<double>::epsilon() * std::abs(s.at(i))));
      }
      if (pow2) {
        o.require(exact, "sum != n*avg for n = " + std::to_string(n));
        ++exact_sets;
      } else {
        ++near_sets;
      }
    }
  }
  o.require(worst_ulps <= 2.0, "sum vs n*avg off by " + fmt(worst_ulps) + " ulp");

  // mask fusion against a per-pixel loop
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const bool disjoint = trial % 2 == 0;
    const int h = static_cast<int>(rng.integer(4, 16)), w = static_cast<int>(rng.integer(4, 16));
    const int n = static_cast<int>(rng.integer(1, disjoint ? 4 : 5));
    std::vector<Tensor> fs;
    std::vector<std::vector<double>> ms;
    std::vector<double> ws;
    for (int i = 0; i < n; ++i) {
      fs.push_back(Tensor::randn({3, h, w}, rng));
      BBox b;
      if (disjoint) {
        // one quadrant each
        const double qx = (i % 2) * 0.5, qy = (i / 2) * 0.5;
        const double x1 = qx + rng.uniform(0, 0.2), y1 = qy + rng.uniform(0, 0.2);
        b = {x1, y1, rng.uniform(x1 + 0.05, qx + 0.5), rng.uniform(y1 + 0.05, qy + 0.5)};
      } else {
        const double x1 = rng.uniform(0, 0.5), y1 = rng.uniform(0, 0.5);
        b = {x1, y1, rng.uniform(x1 + 0.3, 1.0), rng.uniform(y1 + 0.3, 1.0)};
      }
      ms.push_back(box_mask(b, h, w));
      ws.push_back(rng.uniform(0.1, 1.0));
    }
    const Tensor out = combine_level(fs, ms, ws, FusionStrategy::kMask);
    const int64_t hw = int64_t{h} * w;
    for (int64_t idx = 0; idx < out.numel(); ++idx) {
      const int64_t p = idx % hw;
      double num = 0.0, den = 0.0, plain = 0.0;
      for (int i = 0; i < n; ++i) {
        num += ms[i][p] * ws[i] * fs[i].at(idx);
        den += ms[i][p] * ws[i];
        plain += fs[i].at(idx);
      }
      const double ref = den > 0.0 ? num / den : plain / n;
      worst = std::max(worst, std::abs(out.at(idx) - ref));
    }
  }
  o.require(worst < 1e-12, "mask fusion off by " + fmt(worst));

  // single full mask
  bool identity = true;
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor f = Tensor::randn({5, 8, 8}, rng);
    const Tensor out = combine_level({f}, {box_mask({0, 0, 1, 1}, 8, 8)}, {rng.uniform(0.1, 2.0)}, FusionStrategy::kMask);
    identity = identity && bit_equal(out, f);
  }
  o.require(identity, "single full mask is not the identity");
  o.metrics = {{"mask_max_abs_err", worst}, {"sum_vs_n_avg_max_ulps", worst_ulps}};
  if (o.pass)
    o.detail = "sum == n*avg exact for n in {1,2,4,8} (" + std::to_string(exact_sets) + " sets), within " +
               fmt(worst_ulps, 2) + " ulp otherwise; mask fusion max err " + fmt(worst, 2) +
               " over 50 sets; full-mask identity exact";
  return o;
}

// ---- 6 ---------------------------------------------------------------------------

Outcome padding_inertness() {
  Outcome o;
  auto m = build_model(default_spec("dit"), 61);
  auto& dit = dynamic_cast<ToyDiT&>(*m);
  Rng rr(62);
  randomize(dit, nn::Role::kLayout, rr);
  randomize(dit, nn::Role::kAdapter, rr);
  const int h = dit.latent_shape()[1], w = dit.latent_shape()[2];
  Rng data(63);
  double pad_diff = 0.0, perm_diff = 0.0;
  for (int i = 0; i < 50; ++i) {
    Layout l = random_shape_layout(data, 5);
    const Tensor z = Tensor::randn(dit.latent_shape(), data);
    const double t = static_cast<double>(data.integer(1, 1000));
    const Tensor y = dit.forward(z, t, l, {});
    pad_diff = std::max(pad_diff, max_abs_diff(y, dit.forward(z, t, l.padded(), {})));

    // explicit tokens: active rows only vs. the same rows plus masked junk rows
    const LayoutTokens full = dit.build_layout_tokens(l.padded(), build_layout_latent(l.padded(), h, w));
    const Tensor text = dit.text().tokens("a scene");
    const int d = full.tokens.dim(1);
    std::vector<double> active_rows, padded_rows;
    std::vector<bool> padded_mask;
    for (size_t s = 0; s < full.mask.size(); ++s) {
      const auto row = full.tokens.data().subspan(s * d, d);
      if (full.mask[s]) active_rows.insert(active_rows.end(), row.begin(), row.end());
    }
    for (size_t s = 0; s < full.mask.size(); ++s) {
      const auto row = full.tokens.data().subspan(s * d, d);
      padded_rows.insert(padded_rows.end(), row.begin(), row.end());
      padded_mask.push_back(full.mask[s]);
      // extra masked slot after every real one
      for (int k = 0; k < d; ++k) padded_rows.push_back(1e3 * data.normal());
      padded_mask.push_back(false);
    }
    const int na = full.active_count();
    const LayoutTokens compact{Tensor::from_data({na, d}, active_rows), std::vector<bool>(na, true)};
    const LayoutTokens noisy{Tensor::from_data({static_cast<int>(padded_mask.size()), d}, padded_rows), padded_mask};
    pad_diff = std::max(pad_diff, max_abs_diff(dit.forward_tokens(z, t, text, compact),
                                               dit.forward_tokens(z, t, text, noisy)));

    Layout p = l;
    std::shuffle(p.instances.begin(), p.instances.end(), data.engine());
    perm_diff = std::max(perm_diff, max_abs_diff(y, dit.forward(z, t, p, {})));
  }
  o.require(pad_diff == 0.0, "padding changed outputs by " + fmt(pad_diff));
  o.require(perm_diff < 1e-12, "permutation changed outputs by " + fmt(perm_diff));
  o.metrics = {{"padding_max_abs_diff", pad_diff}, {"permutation_max_abs_diff", perm_diff}};
  if (o.pass) o.detail = "50 layouts: padding diff 0, permutation diff " + fmt(perm_diff, 2);
  return o;
}

// ---- 7 ---------------------------------------------------------------------------

Outcome parameter_efficiency() {
  Outcome o;
  for (const std::string kind : {"unet", "dit"}) {
    for (int r : {8, 64, 128, 256}) {
      ModelSpec spec = default_spec(kind);
      spec.lora_cfg.rank = r;
      auto m = build_model(spec, 71);
      // hand count from the adapted layers' weight shapes
      std::map<std::string, Shape> weights;
      int64_t base = 0, adapter = 0;
      std::set<std::string> adapted;
      for (const auto& p : m->parameters()) {
        if (p.role == nn::Role::kBase) {
          base += p.tensor.numel();
          weights[p.name] = p.tensor.shape();
        } else if (p.role == nn::Role::kAdapter) {
          adapter += p.tensor.numel();
          // lora.<layer>.A / .B
          adapted.insert(p.name.substr(5, p.name.size() - 7));
        }
      }
      int64_t hand = 0;
      for (const auto& layer : adapted) {
        const auto it = weights.find(layer + ".weight");
        if (it == weights.end()) {
          o.require(false, "no base weight for adapted layer " + layer);
          continue;
        }
        hand += int64_t{r} * (it->second[0] + it->second[1]);
      }
      const ParamCount pc = param_count(*m);
      o.require(hand == adapter && pc.adapter == adapter && pc.base == base,
                kind + " rank " + std::to_string(r) + ": hand " + std::to_string(hand) + " vs " + std::to_string(adapter));
      const double ratio = static_cast<double>(adapter) / static_cast<double>(base);
      o.metrics[kind][std::to_string(r)] = {{"base", base}, {"adapter", adapter}, {"ratio", ratio}};
      if (kind == "unet" && r == 8) o.require(ratio < 0.15, "unet rank-8 ratio " + fmt(ratio));
    }
  }
  if (o.pass)
    o.detail = "unet rank-8 ratio " + fmt(o.metrics["unet"]["8"]["ratio"].get<double>(), 3) + " (dit " +
               fmt(o.metrics["dit"]["8"]["ratio"].get<double>(), 3) +
               "); r(d_in+d_out) matches for ranks 8/64/128/256 on both backbones";
  return o;
}

// ---- 8 ---------------------------------------------------------------------------

Outcome end_to_end() {
  Outcome o;
  const auto t_all = Clock::now();

  // harness ceiling first
  SceneSpec ceiling_spec;
  ceiling_spec.seed = 3;
  const auto ceiling_scenes = generate_synthetic_dataset(ceiling_spec, 500);
  std::vector<Layout> ceiling_layouts;
  for (const auto& s : ceiling_scenes) ceiling_layouts.push_back(s.layout);
  const EvalReport ceiling =
      layout_adherence([&](const Layout&, int i) { return ceiling_scenes[i].image; }, ceiling_layouts);
  o.metrics["ceiling_mean_iou"] = ceiling.mean_iou;
  if (ceiling.mean_iou < 0.9) {
    o.require(false, "harness ceiling " + fmt(ceiling.mean_iou) + " < 0.9; criterion not evaluable");
    return o;
  }

  SceneSpec train_spec;
  train_spec.seed = 1;
  const auto scenes = generate_synthetic_dataset(train_spec, 2000);
  const auto samples = to_train_samples(scenes, 4);
  SceneSpec eval_spec;
  eval_spec.seed = 2;
  std::vector<Layout> held_out;
  for (auto& s : generate_synthetic_dataset(eval_spec, 200)) held_out.push_back(s.layout);
  int overlap = 0;
  for (const auto& l : held_out)
    for (const auto& s : scenes) overlap += l == s.layout;
  o.require(overlap == 0, std::to_string(overlap) + " held-out layouts also appear in training");

  ModelSpec spec = default_spec("unet");
  auto model = build_model(spec, 0);
  const NoiseSchedule sched(1000);
  PhaseConfig base_cfg;
  base_cfg.steps = 4000;
  base_cfg.opt.lr = 2e-3;
  PhaseConfig layout_cfg;
  layout_cfg.steps = 6000;
  layout_cfg.opt.lr = 1e-3;
  TrainHooks hooks;
  hooks.log_every = 1000;
  const auto t_train = Clock::now();
  hooks.on_log = [&](const LossRecord& r) {
    std::printf("      [%s] step %d loss %.4f (%.0f s)\n", to_string(r.phase), r.step, r.loss, seconds_since(t_train));
    std::fflush(stdout);
  };
  const double base_loss = train_phase(*model, sched, samples, TrainPhase::kBase, base_cfg, 1, hooks);
  const double layout_loss = train_phase(*model, sched, samples, TrainPhase::kLayout, layout_cfg, 2, hooks);
  const double train_sec = seconds_since(t_train);
  const int total_steps = base_cfg.steps + layout_cfg.steps;

  SamplerConfig sc;
  sc.seed = 100;
  const auto t_eval = Clock::now();
  const EvalReport guided = layout_adherence(make_image_sampler(*model, sched, sc, {0.7, 50}), held_out);
  const EvalReport baseline = layout_adherence(make_image_sampler(*model, sched, sc, {0.0, 50}), held_out);
  const double eval_sec = seconds_since(t_eval);

  o.metrics.update({{"train_scenes", scenes.size()},
                    {"held_out_layouts", held_out.size()},
                    {"steps", total_steps},
                    {"base_final_loss", base_loss},
                    {"layout_final_loss", layout_loss},
                    {"train_seconds", train_sec},
                    {"eval_seconds", eval_sec},
                    {"guided", {{"tau", 0.7}, {"mean_iou", guided.mean_iou}, {"success_at_50", guided.success_at_50}}},
                    {"baseline",
                     {{"tau", 0.0}, {"mean_iou", baseline.mean_iou}, {"success_at_50", baseline.success_at_50}}},
                    {"guided_per_complexity", guided.to_json()["per_complexity"]}});
  o.require(total_steps <= 20000, "too many steps");
  o.require(train_sec < 3600.0, "training took " + fmt(train_sec) + " s");
  o.require(guided.mean_iou >= 0.5, "guided mean IoU " + fmt(guided.mean_iou));
  o.require(guided.success_at_50 >= 0.5, "guided success@0.5 " + fmt(guided.success_at_50));
  o.require(baseline.mean_iou <= 0.2, "baseline mean IoU " + fmt(baseline.mean_iou));

  std::vector<Image> tiles;
  const ImageSampler show = make_image_sampler(*model, sched, sc, {0.7, 50});
  for (int i = 0; i < 8; ++i) {
    tiles.push_back(overlay_layout(render_layout(held_out[i]), held_out[i]));
    tiles.push_back(overlay_layout(show(held_out[i], i), held_out[i]));
  }
  write_png(contact_sheet(tiles, 4), "acceptance_samples.png");

  const std::string summary = "ceiling " + fmt(ceiling.mean_iou, 3) + "; guided mean IoU " + fmt(guided.mean_iou, 3) +
                              ", success@0.5 " + fmt(guided.success_at_50, 3) + "; tau=0 baseline " +
                              fmt(baseline.mean_iou, 3) + "; " + std::to_string(total_steps) + " steps in " +
                              fmt(train_sec / 60.0, 3) + " min (total " + fmt(seconds_since(t_all) / 60.0, 3) + " min)";
  o.detail = o.pass ? summary : o.detail + " | " + summary;
  return o;
}

// ---- 9 ---------------------------------------------------------------------------

AnnotationRecord random_record(Rng& rng) {
  AnnotationRecord r;
  r.width = static_cast<int>(rng.integer(32, 1024));
  r.height = static_cast<int>(rng.integer(32, 1024));
  const int n = static_cast<int>(rng.integer(1, 12));
  for (int i = 0; i < n; ++i) {
    const double x1 = std::floor(rng.uniform(0, r.width - 2)), y1 = std::floor(rng.uniform(0, r.height - 2));
    const double x2 = std::floor(rng.uniform(x1 + 1, r.width + 1)), y2 = std::floor(rng.uniform(y1 + 1, r.height + 1));
    r.instances.push_back({"obj", {x1, y1, std::min<double>(x2, r.width), std::min<double>(y2, r.height)},
                           rng.uniform(0.05, 0.95)});
  }
  return r;
}

// Boxes each confined to a private cell of a 3x3 grid on a 900x900 canvas.
AnnotationRecord grid_record(Rng& rng) {
  AnnotationRecord r;
  r.width = r.height = 900;
  const int n = static_cast<int>(rng.integer(2, 9));
  for (int i = 0; i < n; ++i) {
    const double cx = (i % 3) * 300.0, cy = (i / 3) * 300.0;
    const double x1 = cx + rng.integer(0, 100), y1 = cy + rng.integer(0, 100);
    r.instances.push_back(
        {"obj", {x1, y1, x1 + rng.integer(20, 150), y1 + rng.integer(20, 150)}, rng.uniform(0.05, 0.95)});
  }
  return r;
}

Outcome curation_properties() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(91);
  int64_t conf_checks = 0, area_checks = 0, overlap_checks = 0, scale_checks = 0;
  double worst_scale = 0.0;
  bool conf_ok = true, area_ok = true, overlap_ok = true, scale_exact = true;
  for (int i = 0; i < 10000; ++i) {
    // confidence and scale on unconstrained records
    const AnnotationRecord r = random_record(rng);
    const double base = score_record(r).total;
    AnnotationRecord up = r;
    const size_t k = static_cast<size_t>(rng.integer(0, static_cast<int64_t>(r.instances.size()) - 1));
    up.instances[k].confidence = *r.instances[k].confidence + rng.uniform(0.001, 0.04);
    conf_ok = conf_ok && score_record(up).total > base;
    ++conf_checks;

    static const int factors[] = {2, 3, 4, 10};
    const int s = factors[i % 4];
    AnnotationRecord scaled = r;
    scaled.width *= s;
    scaled.height *= s;
    for (auto& inst : scaled.instances)
      for (double& v : inst.bbox) v *= s;
    const double d = std::abs(score_record(scaled).total - base);
    worst_scale = std::max(worst_scale, d);
    if ((s & (s - 1)) == 0) scale_exact = scale_exact && d == 0.0;
    ++scale_checks;

    // area and overlap on records whose geometry isolates one term
    AnnotationRecord g = grid_record(rng);
    const double g0 = score_record(g).total;
    const size_t j = static_cast<size_t>(rng.integer(0, static_cast<int64_t>(g.instances.size()) - 1));
    AnnotationRecord wide = g;
    wide.instances[j].bbox[2] += rng.integer(1, 40);  // stays inside its cell
    area_ok = area_ok && score_record(wide).total < g0;
    ++area_checks;

    // two equal boxes in cell 0 sliding apart: areas fixed, IoU falls
    AnnotationRecord pair = g;
    const double side = static_cast<double>(rng.integer(20, 100));
    const double dx1 = static_cast<double>(rng.integer(0, 50)), dx2 = dx1 + static_cast<double>(rng.integer(1, 50));
    pair.instances[0].bbox = {0, 0, side, side};
    AnnotatedInstance second{"obj", {dx1, 0, dx1 + side, side}, 0.5};
    AnnotationRecord near = pair, far = pair;
    near.instances.push_back(second);
    second.bbox[0] = dx2;
    second.bbox[2] = dx2 + side;
    far.instances.push_back(second);
    const double sn = score_record(near).total, sf = score_record(far).total;
    overlap_ok = overlap_ok && (dx1 < side ? sn < sf : sn == sf);
    ++overlap_checks;
  }
  const double sec = seconds_since(t0);
  o.require(conf_ok, "score did not rise with confidence");
  o.require(area_ok, "score did not fall with area");
  o.require(overlap_ok, "score did not fall with overlap");
  o.require(scale_exact, "power-of-two scaling changed a score");
  o.require(worst_scale < 1e-9, "scaling changed a score by " + fmt(worst_scale));
  o.require(sec < 30.0, "runtime " + fmt(sec) + " s");
  o.metrics = {{"confidence_checks", conf_checks}, {"area_checks", area_checks}, {"overlap_checks", overlap_checks},
               {"scale_checks", scale_checks}, {"worst_scale_diff", worst_scale}, {"seconds", sec}};
  if (o.pass)
    o.detail = "10k records each: confidence, area, overlap monotone; scale x2/x4 exact, x3/x10 within " +
               fmt(worst_scale, 2) + "; " + fmt(sec, 3) + " s";
  return o;
}

// ---- 10 --------------------------------------------------------------------------

Layout random_dsl_layout(Rng& rng) {
  static const char* words[] = {"red", "green", "blue", "square", "circle", "cat", "dog", "a", "big", "small"};
  Layout l;
  if (rng.uniform() < 0.5) l.global_caption = "a photo of things";
  const int n = static_cast<int>(rng.integer(1, 10));
  for (int i = 0; i < n; ++i) {
    std::string cap = words[rng.integer(0, 9)];
    for (int k = static_cast<int>(rng.integer(0, 2)); k > 0; --k) cap += std::string(" ") + words[rng.integer(0, 9)];
    // coordinates on a grid that survives 3-decimal rounding as a valid box
    const double x1 = rng.integer(0, 900) / 1000.0 + rng.uniform(0, 4e-4), y1 = rng.integer(0, 900) / 1000.0;
    const double x2 = x1 + rng.integer(2, 100) / 1000.0 + rng.uniform(0, 4e-4), y2 = y1 + rng.integer(2, 100) / 1000.0;
    l.instances.push_back({cap, {x1, y1, std::min(x2, 1.0), std::min(y2, 1.0)}});
  }
  return l;
}

Outcome dsl_round_trip() {
  Outcome o;
  Rng rng(101);
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    const Layout l = random_dsl_layout(rng);
    const std::string text = serialize_layout(l);
    const Layout back = parse_layout_text(text);
    const bool ok = back == quantize_layout(l) && serialize_layout(back) == text;
    if (!ok) o.require(false, "round trip failed for: " + text);
    ++checked;
  }
  auto code_of = [](const std::string& text) -> std::string {
    try {
      parse_layout_text(text);
    } catch (const LayoutError& e) {
      return to_string(e.code());
    }
    return "none";
  };
  const std::string ok_inst = "<scap>a</scap><bbox>0.1,0.1,0.2,0.2</bbox>";
  const std::vector<std::pair<std::string, LayoutErrorCode>> errors{
      {"no tags at all", LayoutErrorCode::kSyntax},
      {"<layout>" + ok_inst, LayoutErrorCode::kSyntax},
      {"<layout>" + ok_inst + "</layout> trailing", LayoutErrorCode::kSyntax},
      {"<layout><scap>a</scap><bbox>0.1,x,0.2,0.2</bbox></layout>", LayoutErrorCode::kSyntax},
      {"<layout><scap>a</scap><bbox>0.1,0.1,0.2</bbox></layout>", LayoutErrorCode::kCoordinateCount},
      {"<layout><scap>a</scap><bbox>0.1,0.1,0.2,0.2,0.3</bbox></layout>", LayoutErrorCode::kCoordinateCount},
      {"<layout><scap>a</scap><bbox>0.3,0.1,0.2,0.2</bbox></layout>", LayoutErrorCode::kInvalidBBox},
      {"<layout><scap>a</scap><bbox>0.1,0.1,0.2,1.2</bbox></layout>", LayoutErrorCode::kInvalidBBox},
      {"<layout></layout>", LayoutErrorCode::kEmptyLayout},
  };
  for (const auto& [text, code] : errors) {
    const std::string got = code_of(text);
    o.require(got == to_string(code), "'" + text + "' gave " + got + ", expected " + to_string(code));
  }
  Layout big;
  for (int i = 0; i < 11; ++i) big.instances.push_back({"x", {0, 0, 1, 1}});
  std::string got = "none";
  try {
    big.padded();
  } catch (const LayoutError& e) {
    got = to_string(e.code());
  }
  o.require(got == to_string(LayoutErrorCode::kTooManyInstances), "11 instances gave " + got);
  if (o.pass)
    o.detail = std::to_string(checked) + " layouts round-trip; " + std::to_string(errors.size() + 1) +
               " error inputs give their codes";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{
      {1, "scoring oracle on the worked records", scoring_oracle},
      {2, "plug-and-play: guidance off equals the base network", plug_and_play},
      {3, "gradient suite", gradient_suite},
      {4, "guidance gate exactness", gating},
      {5, "fusion correctness", fusion_checks},
      {6, "DiT padding inertness and permutation invariance", padding_inertness},
      {7, "adapter parameter efficiency", parameter_efficiency},
      {8, "end-to-end layout adherence on synthetic scenes", end_to_end},
      {9, "curation score properties", curation_properties},
      {10, "layout DSL round trip and error codes", dsl_round_trip},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  json report = json::object();
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    std::printf("  ... [%d] %s\n", c.id, c.name);
    std::fflush(stdout);
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double sec = seconds_since(t0);
    failures += !o.pass;
    std::printf("%s [%d] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), sec);
    std::fflush(stdout);
    report[std::to_string(c.id)] = {{"name", c.name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", sec},
                                    {"metrics", o.metrics}};
  }
  std::ofstream("acceptance_report.json") << report.dump(2) << '\n';
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
