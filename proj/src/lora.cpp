#include "migkit/lora.hpp"

#include <stdexcept>

namespace migkit {

bool glob_match(std::string_view pattern, std::string_view name) {
  // Iterative wildcard matcher with single-star backtracking.
  std::size_t p = 0, n = 0, star = std::string_view::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

AdapterRegistry attach_lora(nn::Module& model, const LoraConfig& cfg, Rng& rng) {
  if (cfg.rank < 1) throw std::invalid_argument("LoRA rank must be >= 1");
  if (cfg.targets.empty()) throw std::invalid_argument("LoRA config has no target patterns");
  auto layers = model.linears();
  std::vector<bool> selected(layers.size(), false);
  for (const std::string& pat : cfg.targets) {
    bool hit = false;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (glob_match(pat, layers[i].name())) {
        selected[i] = true;
        hit = true;
      }
    if (!hit) throw std::invalid_argument("LoRA target pattern '" + pat + "' matches no linear layer");
  }
  AdapterRegistry reg;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!selected[i]) continue;
    layers[i].attach_adapter(cfg.rank, cfg.effective_alpha(), rng);
    reg.layers.push_back(layers[i].name());
  }
  for (nn::NamedTensor& p : model.parameters())
    if (p.role == nn::Role::kBase) p.tensor.set_requires_grad(false);
  return reg;
}

void merge_lora(nn::Module& model) {
  auto layers = model.linears();
  bool any = false;
  for (auto& l : layers)
    if (l.has_adapter()) {
      if (l.merged()) throw std::logic_error("LoRA adapters are already merged");
      any = true;
    }
  if (!any) throw std::logic_error("no LoRA adapters attached");
  for (auto& l : layers)
    if (l.has_adapter()) l.merge_adapter();
}

void detach_lora(nn::Module& model) {
  auto layers = model.linears();
  for (auto& l : layers)
    if (l.has_adapter() && l.merged()) throw std::logic_error("cannot detach LoRA adapters after merge");
  for (auto& l : layers)
    if (l.has_adapter()) l.detach_adapter();
}

ParamCount param_count(const nn::Module& model) {
  ParamCount pc;
  pc.base = model.count_parameters(nn::Role::kBase);
  pc.adapter = model.count_parameters(nn::Role::kAdapter);
  pc.layout = model.count_parameters(nn::Role::kLayout);
  for (const auto& l : model.linears())
    if (const auto* ad = l.adapter())
      pc.per_layer.push_back({l.name(), l.d_in(), l.d_out(), ad->rank, ad->a.numel() + ad->b.numel()});
  pc.ratio = pc.base > 0 ? static_cast<double>(pc.adapter) / static_cast<double>(pc.base) : 0.0;
  return pc;
}

int select_rank(int64_t dataset_size) {
  if (dataset_size < 1) throw std::invalid_argument("dataset size must be >= 1");
  if (dataset_size <= 10'000) return 8;
  if (dataset_size <= 100'000) return 64;
  if (dataset_size <= 1'000'000) return 128;
  return 256;
}

}  // namespace migkit
