#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "migkit/image.hpp"
#include "migkit/layout.hpp"

namespace migkit {

struct PaletteColor {
  std::string name;
  Rgb rgb;
};

// red, green, blue, yellow
const std::vector<PaletteColor>& default_palette();
inline constexpr Rgb kBackground{128, 128, 128};
inline const std::vector<std::string> kShapes{"square", "circle"};

struct SceneSpec {
  int canvas = 64;  // square canvas, pixels
  int min_instances = 1;
  int max_instances = 3;
  int min_side = 12;  // pixels
  int max_side = 28;
  double max_pair_iou = 0.05;
  bool distinct_colors = true;
  int max_rejections = 1000;  // per instance
  uint64_t seed = 0;

  void validate() const;
};

struct Scene {
  Image image;
  Layout layout;
};

// Paints each "<color> <shape>" instance in order over a gray background.
// Unknown colors or shapes throw std::invalid_argument.
Image render_layout(const Layout& layout, int canvas = 64);

std::vector<Scene> generate_synthetic_dataset(const SceneSpec& spec, int n);

// images/NNNNNN.png plus layouts.jsonl with an "image" field per line.
void save_dataset(const std::vector<Scene>& scenes, const std::string& dir);
std::vector<Scene> load_dataset(const std::string& dir);

struct DetectorConfig {
  double max_distance = 64.0;  // Euclidean RGB distance to the palette color
  int min_pixels = 9;
  std::vector<PaletteColor> palette = default_palette();
};

struct Detection {
  std::string color;
  BBox bbox;
  int pixels = 0;
};

// Connected components (4-neighbourhood) per palette color, tight
// normalized boxes, ordered by palette then scan position.
std::vector<Detection> oracle_detect(const Image& img, const DetectorConfig& cfg = {});

// First word of an instance caption.
std::string caption_color(const std::string& caption);

// IoU of each active instance with its matched detection, 0 when unmatched.
// Matching is keyed by color, then greedy by descending IoU; a detection is
// used at most once.
std::vector<double> match_instances(const Layout& layout, const std::vector<Detection>& dets);

struct InstanceScore {
  int layout = 0;
  int instance = 0;
  std::string color;
  std::string complexity;
  double iou = 0.0;
};

struct ClassBreakdown {
  int64_t instances = 0;
  double mean_iou = 0.0;
  double success_at_50 = 0.0;
};

struct EvalReport {
  int layouts = 0;
  double mean_iou = 0.0;
  double success_at_50 = 0.0;
  std::vector<InstanceScore> instances;
  std::map<std::string, ClassBreakdown> per_complexity;

  // Rebuilds every aggregate from the per-instance list.
  static EvalReport aggregate(int layouts, std::vector<InstanceScore> instances);
  nlohmann::json to_json() const;
};

using ImageSampler = std::function<Image(const Layout& layout, int index)>;

EvalReport layout_adherence(const ImageSampler& sampler, const std::vector<Layout>& layouts,
                            const DetectorConfig& cfg = {});

// Image with each instance box outlined in its caption color.
Image overlay_layout(const Image& img, const Layout& layout);

}  // namespace migkit
