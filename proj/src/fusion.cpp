#include "migkit/fusion.hpp"

#include <stdexcept>
#include <string>

namespace migkit {

FusionStrategy parse_fusion(std::string_view s) {
  if (s == "sum") return FusionStrategy::kSum;
  if (s == "avg" || s == "average") return FusionStrategy::kAvg;
  if (s == "mask") return FusionStrategy::kMask;
  throw std::invalid_argument("unknown fusion strategy '" + std::string(s) + "' (expected sum|avg|mask)");
}

const char* to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::kSum: return "sum";
    case FusionStrategy::kAvg: return "avg";
    case FusionStrategy::kMask: return "mask";
  }
  return "unknown";
}

Tensor combine_level(const std::vector<Tensor>& features, const std::vector<std::vector<double>>& masks,
                     const std::vector<double>& weights, FusionStrategy strategy, const CombineOptions& opt) {
  if (features.empty()) throw std::invalid_argument("combine: empty feature list");
  const std::size_t n = features.size();
  for (const Tensor& f : features)
    if (f.shape() != features[0].shape())
      throw ShapeError("combine: feature shape mismatch " + shape_str(f.shape()) + " vs " +
                       shape_str(features[0].shape()));
  if (!weights.empty() && weights.size() != n) throw std::invalid_argument("combine: one weight per instance required");
  for (double w : weights)
    if (!(w > 0.0)) throw std::invalid_argument("combine: weights must be positive");
  auto weight = [&](std::size_t i) { return weights.empty() ? 1.0 : weights[i]; };

  auto weighted_sum = [&] {
    Tensor acc;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor term = weight(i) == 1.0 ? features[i] : scale(features[i], weight(i));
      acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
  };

  switch (strategy) {
    case FusionStrategy::kSum:
      return n == 1 && weight(0) == 1.0 ? features[0] : weighted_sum();
    case FusionStrategy::kAvg: {
      if (n == 1) return features[0];
      Tensor acc = features[0];
      for (std::size_t i = 1; i < n; ++i) acc = add(acc, features[i]);
      return divide(acc, static_cast<double>(n));
    }
    case FusionStrategy::kMask:
      break;
  }

  const int64_t hw = static_cast<int64_t>(features[0].dim(1)) * features[0].dim(2);
  if (masks.size() != n) throw std::invalid_argument("combine: one mask per instance required");
  for (const auto& m : masks)
    if (static_cast<int64_t>(m.size()) != hw) throw ShapeError("combine: mask extent does not match features");

  if (opt.literal_product) {
    Tensor acc;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> m(masks[i]);
      for (double& v : m) v *= weight(i);
      Tensor term = modulate(features[i], m);
      acc = acc.defined() ? mul(acc, term) : term;
    }
    return acc;
  }

  std::vector<double> cover(static_cast<std::size_t>(hw), 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < hw; ++p) cover[p] += masks[i][p] * weight(i);
  Tensor acc;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> m(static_cast<std::size_t>(hw));
    for (int64_t p = 0; p < hw; ++p)
      m[p] = cover[p] > 0.0 ? masks[i][p] * weight(i) / cover[p] : 1.0 / static_cast<double>(n);
    Tensor term = modulate(features[i], m);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

FeaturePyramid combine(const std::vector<FeaturePyramid>& features, const std::vector<Tensor>& slots,
                       const std::vector<double>& weights, FusionStrategy strategy, const CombineOptions& opt) {
  if (features.empty()) throw std::invalid_argument("combine: empty feature list");
  const std::size_t levels = features[0].size();
  for (const auto& f : features)
    if (f.size() != levels) throw ShapeError("combine: pyramids have different depths");
  if (strategy == FusionStrategy::kMask && slots.size() != features.size())
    throw std::invalid_argument("combine: mask fusion needs one layout slot per instance");

  FeaturePyramid out;
  for (std::size_t l = 0; l < levels; ++l) {
    std::vector<Tensor> level;
    for (const auto& f : features) level.push_back(f[l]);
    std::vector<std::vector<double>> masks;
    if (strategy == FusionStrategy::kMask) {
      const int h = level[0].dim(1), w = level[0].dim(2);
      for (const Tensor& s : slots) {
        Tensor m = (s.dim(1) == h && s.dim(2) == w) ? s : bilinear_interp(s, h, w);
        masks.emplace_back(m.data().begin(), m.data().end());
      }
    }
    out.push_back(combine_level(level, masks, weights, strategy, opt));
  }
  return out;
}

}  // namespace migkit
