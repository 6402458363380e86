#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace migkit {

struct GradCheckCase {
  std::string name;
  bool end_to_end = false;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int64_t checked = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  uint64_t seed = 0;
  double op_tolerance = 1e-6;
  double model_tolerance = 1e-4;
  // Coordinates probed per parameter tensor in the end-to-end slices.
  int model_coords = 6;
};

// Central differences against reverse mode for every differentiable op and
// for loss slices through small UNet and DiT models (layout branch and
// adapters included).
std::vector<GradCheckCase> run_grad_check_suite(const GradCheckOptions& opt = {});

nlohmann::json grad_check_to_json(const std::vector<GradCheckCase>& cases);

}  // namespace migkit
