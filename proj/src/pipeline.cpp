#include "migkit/pipeline.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "migkit/image.hpp"
#include "migkit/rng.hpp"

namespace migkit {

nlohmann::json ModelSpec::to_json() const {
  const BackboneConfig& b = backbone;
  nlohmann::json j;
  j["backbone"] = {{"kind", b.kind},         {"latent_channels", b.latent_channels},
                   {"latent_h", b.latent_h}, {"latent_w", b.latent_w},
                   {"n_max", b.n_max},       {"d_text", b.d_text},
                   {"d_time", b.d_time},     {"width0", b.width0},
                   {"width1", b.width1},     {"rel_pos_bias", b.rel_pos_bias},
                   {"patch", b.patch},       {"d_model", b.d_model},
                   {"depth", b.depth},       {"d_ffn", b.d_ffn},
                   {"vocabulary", b.vocabulary}};
  j["lora"] = lora;
  j["rank"] = lora_cfg.rank;
  j["alpha"] = lora_cfg.alpha;
  j["targets"] = lora_cfg.targets;
  return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  const auto& b = j.at("backbone");
  BackboneConfig& c = s.backbone;
  c.kind = b.at("kind").get<std::string>();
  c.latent_channels = b.at("latent_channels").get<int>();
  c.latent_h = b.at("latent_h").get<int>();
  c.latent_w = b.at("latent_w").get<int>();
  c.n_max = b.at("n_max").get<int>();
  c.d_text = b.at("d_text").get<int>();
  c.d_time = b.at("d_time").get<int>();
  c.width0 = b.at("width0").get<int>();
  c.width1 = b.at("width1").get<int>();
  c.rel_pos_bias = b.at("rel_pos_bias").get<bool>();
  c.patch = b.at("patch").get<int>();
  c.d_model = b.at("d_model").get<int>();
  c.depth = b.at("depth").get<int>();
  c.d_ffn = b.at("d_ffn").get<int>();
  c.vocabulary = b.at("vocabulary").get<std::vector<std::string>>();
  s.lora = j.at("lora").get<bool>();
  s.lora_cfg.rank = j.at("rank").get<int>();
  s.lora_cfg.alpha = j.at("alpha").get<double>();
  s.lora_cfg.targets = j.at("targets").get<std::vector<std::string>>();
  return s;
}

std::unique_ptr<Denoiser> build_model(const ModelSpec& spec, uint64_t seed) {
  Rng rng(seed);
  auto model = make_denoiser(spec.backbone, rng);
  if (spec.lora) {
    LoraConfig lc = spec.lora_cfg;
    if (lc.targets.empty()) lc.targets = model->default_lora_targets();
    attach_lora(*model, lc, rng);
  }
  model->set_trainable(false, false, false);
  return model;
}

namespace {

constexpr char kMagic[8] = {'M', 'I', 'G', 'K', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("truncated checkpoint " + path);
  return v;
}

std::string get_string(std::istream& is, uint32_t n, const std::string& path) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw std::runtime_error("truncated checkpoint " + path);
  return s;
}

const char* role_name(nn::Role r) {
  switch (r) {
    case nn::Role::kBase: return "base";
    case nn::Role::kLayout: return "layout";
    case nn::Role::kAdapter: return "adapter";
  }
  return "?";
}

}  // namespace

void save_checkpoint(const nn::Module& model, const nlohmann::json& meta, const std::string& path) {
  for (const auto& l : model.linears())
    if (l.merged()) throw std::logic_error("cannot checkpoint a model with merged adapters");
  const auto params = model.parameters();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(kMagic, sizeof kMagic);
  put<uint32_t>(os, kVersion);
  const std::string m = meta.dump();
  put<uint32_t>(os, static_cast<uint32_t>(m.size()));
  os.write(m.data(), static_cast<std::streamsize>(m.size()));
  put<uint32_t>(os, static_cast<uint32_t>(params.size()));
  std::ofstream man(path + ".manifest");
  man << "# name role shape\n";
  for (const auto& p : params) {
    put<uint32_t>(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<uint32_t>(os, static_cast<uint32_t>(p.tensor.ndim()));
    for (int d = 0; d < p.tensor.ndim(); ++d) put<uint64_t>(os, static_cast<uint64_t>(p.tensor.dim(d)));
    const auto data = p.tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    man << p.name << ' ' << role_name(p.role) << ' ' << shape_str(p.tensor.shape()) << '\n';
  }
  if (!os) throw std::runtime_error("write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw std::runtime_error(path + " is not a migkit checkpoint");
  const auto version = get<uint32_t>(is, path);
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.meta = nlohmann::json::parse(get_string(is, get<uint32_t>(is, path), path));
  const auto count = get<uint32_t>(is, path);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(is, get<uint32_t>(is, path), path);
    const auto ndim = get<uint32_t>(is, path);
    Shape shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(get<uint64_t>(is, path)));
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
      throw std::runtime_error("truncated checkpoint " + path);
    ck.tensors.emplace(std::move(name), Tensor::from_data(shape, std::move(data)));
  }
  return ck;
}

void save_model(const Denoiser& model, const ModelSpec& spec, const std::string& path, nlohmann::json extra_meta) {
  extra_meta["model"] = spec.to_json();
  save_checkpoint(model, extra_meta, path);
}

LoadedModel load_model(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  if (!ck.meta.contains("model")) throw std::runtime_error(path + " carries no model description");
  LoadedModel out;
  out.spec = ModelSpec::from_json(ck.meta["model"]);
  out.model = build_model(out.spec, 0);
  out.model->load_state_dict(ck.tensors);
  out.meta = std::move(ck.meta);
  return out;
}

std::vector<TrainSample> to_train_samples(const std::vector<Scene>& scenes, int latent_factor) {
  std::vector<TrainSample> out;
  out.reserve(scenes.size());
  for (const Scene& s : scenes) out.push_back({encode_latent(s.image, latent_factor), s.layout});
  return out;
}

ImageSampler make_image_sampler(const Denoiser& model, const NoiseSchedule& sched, const SamplerConfig& cfg,
                                const GuidanceSchedule& g, int latent_factor) {
  return [&model, &sched, cfg, g, latent_factor](const Layout& layout, int index) {
    SamplerConfig c = cfg;
    c.seed = cfg.seed + static_cast<uint64_t>(index);
    return decode_latent(sample(model, sched, layout, c, g), latent_factor);
  };
}

}  // namespace migkit
