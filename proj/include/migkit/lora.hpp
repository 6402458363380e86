#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "migkit/nn.hpp"

namespace migkit {

struct LoraConfig {
  int rank = 8;
  // Scale numerator; the delta is multiplied by alpha / rank. <= 0 means alpha = rank.
  double alpha = 0.0;
  // Glob patterns over Linear layer names; '*' matches any run of characters
  // (dots included) and '?' a single character.
  std::vector<std::string> targets;

  double effective_alpha() const { return alpha > 0.0 ? alpha : static_cast<double>(rank); }
};

bool glob_match(std::string_view pattern, std::string_view name);

// Names of layers that received an adapter, in model order.
struct AdapterRegistry {
  std::vector<std::string> layers;
  std::size_t size() const { return layers.size(); }
};

// Attaches a zero-initialized LoRA delta to every Linear matching a target,
// then freezes base weights. Throws std::invalid_argument if any pattern
// matches nothing.
AdapterRegistry attach_lora(nn::Module& model, const LoraConfig& cfg, Rng& rng);

// Folds (alpha/r) B A into each adapted weight. Throws std::logic_error if
// there is nothing to merge or any adapter is already merged.
void merge_lora(nn::Module& model);

// Removes unmerged adapters. Throws std::logic_error after a merge.
void detach_lora(nn::Module& model);

struct LayerParamCount {
  std::string layer;
  int d_in = 0, d_out = 0, rank = 0;
  int64_t params = 0;  // rank * (d_in + d_out)
};

struct ParamCount {
  int64_t base = 0;
  int64_t adapter = 0;
  int64_t layout = 0;
  double ratio = 0.0;  // adapter / base
  std::vector<LayerParamCount> per_layer;
};

ParamCount param_count(const nn::Module& model);

// Piecewise rank table: <=1e4 -> 8, <=1e5 -> 64, <=1e6 -> 128, else 256.
int select_rank(int64_t dataset_size);

}  // namespace migkit
