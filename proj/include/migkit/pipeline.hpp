#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "migkit/denoiser.hpp"
#include "migkit/diffusion.hpp"
#include "migkit/eval.hpp"
#include "migkit/lora.hpp"
#include "migkit/train.hpp"

namespace migkit {

// Everything needed to rebuild a model before loading its weights.
struct ModelSpec {
  BackboneConfig backbone;
  bool lora = true;
  LoraConfig lora_cfg;  // empty targets mean the backbone defaults

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

// Fresh model; adapters attached when spec.lora is set.
std::unique_ptr<Denoiser> build_model(const ModelSpec& spec, uint64_t seed);

// Binary container:
//   "MIGKCKPT" | u32 version | u32 meta_len | meta JSON |
//   u32 count | count x (u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 data[])
// little-endian. A human-readable manifest is written to path + ".manifest".
struct Checkpoint {
  nlohmann::json meta;
  nn::StateDict tensors;
};

void save_checkpoint(const nn::Module& model, const nlohmann::json& meta, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

// meta["model"] holds the ModelSpec.
void save_model(const Denoiser& model, const ModelSpec& spec, const std::string& path,
                nlohmann::json extra_meta = nlohmann::json::object());
struct LoadedModel {
  ModelSpec spec;
  std::unique_ptr<Denoiser> model;
  nlohmann::json meta;
};
LoadedModel load_model(const std::string& path);

std::vector<TrainSample> to_train_samples(const std::vector<Scene>& scenes, int latent_factor = 4);

// Layout -> decoded image. Layout k draws its initial noise from cfg.seed + k.
ImageSampler make_image_sampler(const Denoiser& model, const NoiseSchedule& sched, const SamplerConfig& cfg,
                                const GuidanceSchedule& g, int latent_factor = 4);

}  // namespace migkit
