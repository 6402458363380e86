#include "migkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "migkit/curation.hpp"
#include "migkit/rng.hpp"

namespace fs = std::filesystem;

namespace migkit {

const std::vector<PaletteColor>& default_palette() {
  static const std::vector<PaletteColor> p{
      {"red", {220, 40, 40}}, {"green", {30, 200, 60}}, {"blue", {40, 60, 230}}, {"yellow", {230, 210, 40}}};
  return p;
}

void SceneSpec::validate() const {
  if (canvas < 8) throw std::invalid_argument("canvas must be at least 8 pixels");
  if (min_instances < 1 || max_instances < min_instances)
    throw std::invalid_argument("instance count range must satisfy 1 <= min <= max");
  if (distinct_colors && max_instances > static_cast<int>(default_palette().size()))
    throw std::invalid_argument("distinct colors allow at most " + std::to_string(default_palette().size()) +
                                " instances");
  if (min_side < 3 || max_side < min_side || max_side > canvas)
    throw std::invalid_argument("box sides must satisfy 3 <= min_side <= max_side <= canvas");
  if (!(max_pair_iou >= 0.0 && max_pair_iou <= 1.0)) throw std::invalid_argument("max_pair_iou must lie in [0,1]");
  if (max_rejections < 1) throw std::invalid_argument("max_rejections must be >= 1");
}

namespace {

const PaletteColor* find_color(const std::string& name) {
  for (const auto& p : default_palette())
    if (p.name == name) return &p;
  return nullptr;
}

int to_px(double v, int n) { return static_cast<int>(std::lround(v * n)); }

void paint(Image& img, const InstanceSpec& inst) {
  const auto space = inst.caption.find(' ');
  const std::string color = inst.caption.substr(0, space);
  const std::string shape = space == std::string::npos ? "" : inst.caption.substr(space + 1);
  const PaletteColor* pc = find_color(color);
  if (!pc) throw std::invalid_argument("unknown color in caption '" + inst.caption + "'");
  if (shape != "square" && shape != "circle") throw std::invalid_argument("unknown shape in caption '" + inst.caption + "'");
  const int c1 = to_px(inst.bbox.x1, img.width), c2 = to_px(inst.bbox.x2, img.width);
  const int r1 = to_px(inst.bbox.y1, img.height), r2 = to_px(inst.bbox.y2, img.height);
  const double mx = 0.5 * (c1 + c2), my = 0.5 * (r1 + r2);
  const double rx = 0.5 * (c2 - c1), ry = 0.5 * (r2 - r1);
  for (int r = std::max(r1, 0); r < std::min(r2, img.height); ++r)
    for (int c = std::max(c1, 0); c < std::min(c2, img.width); ++c) {
      if (shape == "circle") {
        const double dx = (c + 0.5 - mx) / rx, dy = (r + 0.5 - my) / ry;
        if (dx * dx + dy * dy > 1.0) continue;
      }
      img.set(r, c, pc->rgb);
    }
}

std::string join_captions(const Layout& l) {
  std::string s;
  for (const auto& inst : l.instances) s += (s.empty() ? "" : " and ") + inst.caption;
  return s;
}

}  // namespace

Image render_layout(const Layout& layout, int canvas) {
  Image img(canvas, canvas, kBackground);
  for (const auto* inst : layout.active()) paint(img, *inst);
  return img;
}

std::vector<Scene> generate_synthetic_dataset(const SceneSpec& spec, int n) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  spec.validate();
  Rng rng(spec.seed);
  const auto& palette = default_palette();
  std::vector<Scene> out;
  out.reserve(n);
  for (int s = 0; s < n; ++s) {
    Layout l;
    const int count = static_cast<int>(rng.integer(spec.min_instances, spec.max_instances));
    std::vector<int> colors(palette.size());
    std::iota(colors.begin(), colors.end(), 0);
    std::shuffle(colors.begin(), colors.end(), rng.engine());
    for (int i = 0; i < count; ++i) {
      const int ci = spec.distinct_colors ? colors[i] : static_cast<int>(rng.integer(0, palette.size() - 1));
      const std::string& shape = kShapes[rng.integer(0, kShapes.size() - 1)];
      BBox box;
      int rejections = 0;
      for (;;) {
        const int side = static_cast<int>(rng.integer(spec.min_side, spec.max_side));
        const int x = static_cast<int>(rng.integer(0, spec.canvas - side));
        const int y = static_cast<int>(rng.integer(0, spec.canvas - side));
        const double inv = 1.0 / spec.canvas;
        box = {x * inv, y * inv, (x + side) * inv, (y + side) * inv};
        const bool ok = std::all_of(l.instances.begin(), l.instances.end(),
                                    [&](const InstanceSpec& o) { return bbox_iou(o.bbox, box) <= spec.max_pair_iou; });
        if (ok) break;
        if (++rejections >= spec.max_rejections)
          throw std::runtime_error("placement failed after " + std::to_string(spec.max_rejections) +
                                   " rejections: max pairwise IoU " + std::to_string(spec.max_pair_iou) +
                                   " cannot be met for scene " + std::to_string(s));
      }
      l.instances.push_back({palette[ci].name + " " + shape, box});
    }
    l.global_caption = join_captions(l);
    out.push_back({render_layout(l, spec.canvas), std::move(l)});
  }
  return out;
}

void save_dataset(const std::vector<Scene>& scenes, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream jl(fs::path(dir) / "layouts.jsonl");
  if (!jl) throw std::runtime_error("cannot write " + (fs::path(dir) / "layouts.jsonl").string());
  for (size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.png", i);
    write_png(scenes[i].image, (fs::path(dir) / name).string());
    nlohmann::json j = layout_to_json(scenes[i].layout);
    j["image"] = name;
    jl << j.dump() << '\n';
  }
}

std::vector<Scene> load_dataset(const std::string& dir) {
  std::ifstream jl(fs::path(dir) / "layouts.jsonl");
  if (!jl) throw std::runtime_error("cannot open " + (fs::path(dir) / "layouts.jsonl").string());
  std::vector<Scene> out;
  std::string line;
  while (std::getline(jl, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({read_png((fs::path(dir) / j.at("image").get<std::string>()).string()), layout_from_json(j)});
  }
  return out;
}

std::vector<Detection> oracle_detect(const Image& img, const DetectorConfig& cfg) {
  std::vector<Detection> out;
  const int H = img.height, W = img.width;
  std::vector<uint8_t> hit(static_cast<size_t>(H) * W);
  std::vector<int> stack;
  const double d2max = cfg.max_distance * cfg.max_distance;
  for (const auto& pc : cfg.palette) {
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const Rgb px = img.at(r, c);
        double d2 = 0.0;
        for (int k = 0; k < 3; ++k) d2 += (px[k] - pc.rgb[k]) * static_cast<double>(px[k] - pc.rgb[k]);
        hit[static_cast<size_t>(r) * W + c] = d2 <= d2max;
      }
    for (int start = 0; start < H * W; ++start) {
      if (!hit[start]) continue;
      hit[start] = 0;
      stack.assign(1, start);
      int count = 0, rmin = H, rmax = -1, cmin = W, cmax = -1;
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int r = p / W, c = p % W;
        ++count;
        rmin = std::min(rmin, r), rmax = std::max(rmax, r);
        cmin = std::min(cmin, c), cmax = std::max(cmax, c);
        const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
        for (const auto& q : nb) {
          if (q[0] < 0 || q[0] >= H || q[1] < 0 || q[1] >= W) continue;
          const int qi = q[0] * W + q[1];
          if (hit[qi]) {
            hit[qi] = 0;
            stack.push_back(qi);
          }
        }
      }
      if (count < cfg.min_pixels) continue;
      out.push_back({pc.name,
                     {static_cast<double>(cmin) / W, static_cast<double>(rmin) / H, static_cast<double>(cmax + 1) / W,
                      static_cast<double>(rmax + 1) / H},
                     count});
    }
  }
  return out;
}

std::string caption_color(const std::string& caption) {
  const auto b = caption.find_first_not_of(' ');
  if (b == std::string::npos) return "";
  return caption.substr(b, caption.find(' ', b) - b);
}

std::vector<double> match_instances(const Layout& layout, const std::vector<Detection>& dets) {
  const auto act = layout.active();
  struct Pair {
    double iou;
    size_t gt, det;
  };
  std::vector<Pair> pairs;
  for (size_t i = 0; i < act.size(); ++i) {
    const std::string color = caption_color(act[i]->caption);
    for (size_t d = 0; d < dets.size(); ++d) {
      if (dets[d].color != color) continue;
      const double iou = bbox_iou(act[i]->bbox, dets[d].bbox);
      if (iou > 0.0) pairs.push_back({iou, i, d});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::vector<double> out(act.size(), 0.0);
  std::vector<bool> gt_used(act.size()), det_used(dets.size());
  for (const Pair& p : pairs) {
    if (gt_used[p.gt] || det_used[p.det]) continue;
    gt_used[p.gt] = det_used[p.det] = true;
    out[p.gt] = p.iou;
  }
  return out;
}

EvalReport EvalReport::aggregate(int layouts, std::vector<InstanceScore> instances) {
  EvalReport r;
  r.layouts = layouts;
  r.instances = std::move(instances);
  std::map<std::string, std::pair<double, int64_t>> sums;  // iou sum, successes
  double total = 0.0;
  int64_t hits = 0;
  for (const auto& s : r.instances) {
    total += s.iou;
    hits += s.iou >= 0.5;
    auto& b = r.per_complexity[s.complexity];
    ++b.instances;
    sums[s.complexity].first += s.iou;
    sums[s.complexity].second += s.iou >= 0.5;
  }
  if (!r.instances.empty()) {
    r.mean_iou = total / r.instances.size();
    r.success_at_50 = static_cast<double>(hits) / r.instances.size();
  }
  for (auto& [k, b] : r.per_complexity) {
    b.mean_iou = sums[k].first / b.instances;
    b.success_at_50 = static_cast<double>(sums[k].second) / b.instances;
  }
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json inst = nlohmann::json::array();
  for (const auto& s : instances)
    inst.push_back({{"layout", s.layout}, {"instance", s.instance}, {"color", s.color}, {"complexity", s.complexity},
                    {"iou", s.iou}});
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [k, b] : per_complexity)
    classes[k] = {{"instances", b.instances}, {"mean_iou", b.mean_iou}, {"success_at_50", b.success_at_50}};
  return {{"layouts", layouts},
          {"mean_iou", mean_iou},
          {"success_at_50", success_at_50},
          {"per_complexity", classes},
          {"instances", inst}};
}

EvalReport layout_adherence(const ImageSampler& sampler, const std::vector<Layout>& layouts,
                            const DetectorConfig& cfg) {
  std::vector<InstanceScore> scores;
  for (size_t li = 0; li < layouts.size(); ++li) {
    const Layout& l = layouts[li];
    const Image img = sampler(l, static_cast<int>(li));
    const auto ious = match_instances(l, oracle_detect(img, cfg));
    const std::string cls = to_string(classify_complexity(l.active_count()));
    const auto act = l.active();
    for (size_t i = 0; i < act.size(); ++i)
      scores.push_back({static_cast<int>(li), static_cast<int>(i), caption_color(act[i]->caption), cls, ious[i]});
  }
  return EvalReport::aggregate(static_cast<int>(layouts.size()), std::move(scores));
}

Image overlay_layout(const Image& img, const Layout& layout) {
  Image out = img;
  for (const auto* inst : layout.active()) {
    const PaletteColor* pc = find_color(caption_color(inst->caption));
    draw_box(out, inst->bbox, pc ? pc->rgb : Rgb{255, 255, 255});
  }
  return out;
}

}  // namespace migkit
