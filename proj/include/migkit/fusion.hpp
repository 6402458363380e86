#pragma once

#include <string_view>
#include <vector>

#include "migkit/tensor.hpp"

namespace migkit {

enum class FusionStrategy { kSum, kAvg, kMask };

FusionStrategy parse_fusion(std::string_view s);
const char* to_string(FusionStrategy s);

// Instance i's features at every pyramid level, coarse-to-fine order is the
// caller's choice but must agree across instances.
using FeaturePyramid = std::vector<Tensor>;

struct CombineOptions {
  // Literal Hadamard product across instances instead of the normalized
  // masked sum. Kept for comparison; zero wherever masks are disjoint.
  bool literal_product = false;
};

// Fuses one level. features[i] is [C,H,W]; masks[i] holds H*W coverage
// values in [0,1]; weights may be empty (all ones).
//   sum : sum_i w_i F_i
//   avg : (1/n) sum_i F_i
//   mask: sum_i m_i w_i F_i / sum_j m_j w_j where covered, avg elsewhere
Tensor combine_level(const std::vector<Tensor>& features, const std::vector<std::vector<double>>& masks,
                     const std::vector<double>& weights, FusionStrategy strategy, const CombineOptions& opt = {});

// Fuses every level; masks are the per-instance [1,h,w] layout slots, which
// are bilinearly resampled to each level's extent.
FeaturePyramid combine(const std::vector<FeaturePyramid>& features, const std::vector<Tensor>& slots,
                       const std::vector<double>& weights, FusionStrategy strategy, const CombineOptions& opt = {});

}  // namespace migkit
