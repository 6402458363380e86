#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "migkit/config.hpp"
#include "migkit/curation.hpp"
#include "migkit/eval.hpp"
#include "migkit/gradcheck.hpp"
#include "migkit/layout.hpp"
#include "migkit/lora.hpp"
#include "migkit/pipeline.hpp"
#include "migkit/text_embedder.hpp"
#include "migkit/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace migkit::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<OptionSpec> backbone_options() {
  return {
      {"backbone", "Denoiser family: unet or dit", "unet"},
      {"widths", "UNet channel widths at the two resolutions", "32,64"},
      {"d_model", "DiT token width", "64"},
      {"depth", "DiT block count", "2"},
      {"d_ffn", "DiT feed-forward width", "128"},
      {"patch", "DiT patch size", "2"},
      {"n_max", "Maximum instances per layout", "10"},
      {"d_text", "Caption embedding width", "32"},
      {"d_time", "Timestep embedding width", "64"},
      {"latent_size", "Latent side length (canvas / 4)", "16"},
      {"rel_pos_bias", "UNet self-attention relative position bias", "true", true},
      {"vocab", "Vocabulary file, one word per line (default: built-in shapes vocabulary)", ""},
  };
}

std::vector<OptionSpec> with(std::vector<OptionSpec> a, const std::vector<OptionSpec>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

const std::vector<OptionSpec>& curation_options() {
  static const std::vector<OptionSpec> o{
      {"threshold", "Keep records scoring at least this", "60"},
      {"lambda_a", "Area penalty weight", "0.3"},
      {"lambda_o", "Overlap penalty weight", "0.7"},
      {"pair_normalization", "Divide the pairwise IoU sum by the pair count instead of N(N-1)", "false", true},
  };
  return o;
}

const std::vector<OptionSpec>& sampler_options() {
  static const std::vector<OptionSpec> o{
      {"tau", "Fraction of sampling steps with layout guidance", "0.7"},
      {"cfg_scale", "Classifier-free guidance scale", "7.5"},
      {"sampling_steps", "DDIM steps", "50"},
      {"fusion", "Instance fusion: sum, avg or mask", "mask"},
      {"stochastic", "Add fresh noise at each step (eta = 1)", "false", true},
      {"area_weights", "Weight instances by inverse box area", "true", true},
      {"seed", "Random seed (falls back to MIGKIT_SEED)", "0"},
  };
  return o;
}

}  // namespace

std::string flag_for(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

const std::vector<CommandSpec>& command_specs() {
  static const std::vector<CommandSpec> specs{
      {"parse",
       "Convert a layout between the token DSL and JSON and report its validity",
       {{"in", "Input file holding DSL text or a JSON layout", ""},
        {"text", "Inline DSL or JSON instead of --in", ""},
        {"out", "Output file (default: embed the result in the stdout report)", ""}}},
      {"score",
       "Score JSON-lines annotation records",
       with({{"in", "JSON-lines records ('-' for stdin)", "-"}, {"out", "Output JSON-lines reports (default stdout)", ""}},
            curation_options())},
      {"filter",
       "Partition JSON-lines records by score into kept and rejected streams",
       with({{"in", "JSON-lines records ('-' for stdin)", "-"}, {"out_dir", "Directory for kept/rejected/stats", "filtered"}},
            curation_options())},
      {"gen-data",
       "Render a synthetic shapes dataset (PNG images plus layouts.jsonl)",
       {{"out_dir", "Dataset directory", "data"},
        {"count", "Number of scenes", "2000"},
        {"canvas", "Canvas side in pixels", "64"},
        {"min_instances", "Fewest instances per scene", "1"},
        {"max_instances", "Most instances per scene", "3"},
        {"min_side", "Smallest box side in pixels", "12"},
        {"max_side", "Largest box side in pixels", "28"},
        {"max_pair_iou", "Placement bound on pairwise IoU", "0.05"},
        {"distinct_colors", "Never repeat a color within a scene", "true", true},
        {"contact_sheet", "Tiles in an optional contact.png (0 disables)", "0"},
        {"seed", "Random seed (falls back to MIGKIT_SEED)", "0"}}},
      {"train",
       "Train the base denoiser, then the layout branch and LoRA adapters",
       with(backbone_options(),
            {{"data", "Dataset directory from gen-data", ""},
             {"out_dir", "Run directory", "run"},
             {"init", "Start from this checkpoint instead of a fresh model", ""},
             {"rank", "LoRA rank", "8"},
             {"alpha", "LoRA alpha (<= 0 means alpha = rank)", "0"},
             {"targets", "LoRA target globs (default: backbone attention/fusion layers)", ""},
             {"base_steps", "Base phase optimizer steps", "8000"},
             {"steps", "Layout phase optimizer steps", "10000"},
             {"batch", "Samples per optimizer step", "1"},
             {"base_lr", "Base phase peak learning rate", "0.002"},
             {"lr", "Layout phase peak learning rate", "0.001"},
             {"warmup", "Warmup steps per phase", "100"},
             {"weight_decay", "AdamW decoupled weight decay", "0.01"},
             {"grad_clip", "Global gradient norm clip (<= 0 disables)", "1.0"},
             {"null_prob", "Base phase null-caption probability", "0.1"},
             {"noise_steps", "Diffusion timesteps T", "1000"},
             {"log_every", "Steps per loss.csv row", "100"},
             {"checkpoint_every", "Steps between checkpoints (0 disables)", "0"},
             {"seed", "Random seed (falls back to MIGKIT_SEED)", "0"}})},
      {"sample",
       "Sample one image for a layout; writes PNG plus a sidecar JSON",
       with({{"checkpoint", "Trained model", ""},
             {"layout", "Layout file (DSL or JSON)", ""},
             {"text", "Inline DSL layout instead of --layout", ""},
             {"out", "Output PNG", "sample.png"}},
            sampler_options())},
      {"eval",
       "Layout adherence of a model measured by the color detector",
       with({{"checkpoint", "Trained model (not needed with --ground-truth)", ""},
             {"data", "Dataset directory whose layouts are evaluated (default: generate)", ""},
             {"count", "Layouts to evaluate", "200"},
             {"scene_seed", "Seed of generated evaluation layouts", "2"},
             {"min_instances", "Fewest instances in generated layouts", "1"},
             {"max_instances", "Most instances in generated layouts", "3"},
             {"ground_truth", "Evaluate rendered layouts instead of samples (harness ceiling)", "false", true},
             {"out_dir", "Report directory", "eval"},
             {"contact_sheet", "Layout/sample pairs in an optional contact.png (0 disables)", "0"}},
            sampler_options())},
      {"grad-check",
       "Finite-difference gradient suite over ops and model loss slices",
       {{"op_tolerance", "Relative error bound for single ops", "1e-6"},
        {"model_tolerance", "Relative error bound for model slices", "1e-4"},
        {"model_coords", "Coordinates probed per model tensor", "6"},
        {"out", "Optional JSON report", ""},
        {"seed", "Random seed (falls back to MIGKIT_SEED)", "0"}}},
      {"param-count",
       "Base, layout and adapter parameter counts across LoRA ranks",
       with(backbone_options(),
            {{"ranks", "Comma-separated LoRA ranks", "8,64,128,256"},
             {"alpha", "LoRA alpha (<= 0 means alpha = rank)", "0"},
             {"targets", "LoRA target globs (default: backbone attention/fusion layers)", ""},
             {"out", "Optional JSON report", ""}})},
  };
  return specs;
}

namespace {

struct Ctx {
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
};

std::string require(const RunConfig& cfg, const std::string& key) {
  if (!cfg.has(key) || cfg.get(key).empty()) throw UsageError("missing required option " + flag_for(key));
  return cfg.get(key);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

// Config lives next to a single-file output as <stem>.config.
std::string config_path_for(const std::string& out) {
  fs::path p(out);
  return (p.parent_path() / (p.stem().string() + ".config")).string();
}

bool looks_like_json(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  return b != std::string::npos && s[b] == '{';
}

Layout read_layout(const std::string& text) {
  if (looks_like_json(text)) return layout_from_json(json::parse(text));
  return parse_layout_text(text);
}

BackboneConfig backbone_from(const RunConfig& cfg) {
  BackboneConfig b;
  b.kind = cfg.get_string("backbone", "unet");
  if (b.kind != "unet" && b.kind != "dit") throw ConfigError("backbone must be unet or dit, got '" + b.kind + "'");
  const auto widths = cfg.get_int_list("widths");
  if (widths.size() != 2) throw ConfigError("widths expects two integers");
  b.width0 = widths[0];
  b.width1 = widths[1];
  b.d_model = cfg.get_int("d_model", b.d_model);
  b.depth = cfg.get_int("depth", b.depth);
  b.d_ffn = cfg.get_int("d_ffn", b.d_ffn);
  b.patch = cfg.get_int("patch", b.patch);
  b.n_max = cfg.get_int("n_max", b.n_max);
  b.d_text = cfg.get_int("d_text", b.d_text);
  b.d_time = cfg.get_int("d_time", b.d_time);
  b.latent_h = b.latent_w = cfg.get_int("latent_size", 16);
  b.rel_pos_bias = cfg.get_bool("rel_pos_bias", true);
  if (cfg.has("vocab") && !cfg.get("vocab").empty()) b.vocabulary = load_vocabulary(cfg.get("vocab"));
  return b;
}

ScoreWeights weights_from(const RunConfig& cfg) {
  ScoreWeights w;
  w.lambda_a = cfg.get_double("lambda_a", w.lambda_a);
  w.lambda_o = cfg.get_double("lambda_o", w.lambda_o);
  w.pair_count_normalization = cfg.get_bool("pair_normalization", false);
  return w;
}

SamplerConfig sampler_from(const RunConfig& cfg) {
  SamplerConfig s;
  s.cfg_scale = cfg.get_double("cfg_scale", s.cfg_scale);
  s.deterministic = !cfg.get_bool("stochastic", false);
  s.seed = static_cast<uint64_t>(cfg.get_int64("seed", 0));
  s.fusion = parse_fusion(cfg.get_string("fusion", "mask"));
  s.area_weights = cfg.get_bool("area_weights", true);
  return s;
}

GuidanceSchedule guidance_from(const RunConfig& cfg) {
  return {cfg.get_double("tau", 0.7), cfg.get_int("sampling_steps", 50)};
}

// ---- subcommands ---------------------------------------------------------------

int cmd_parse(Ctx& c) {
  const std::string text = c.cfg.has("text") && !c.cfg.get("text").empty() ? c.cfg.get("text")
                           : c.cfg.has("in")                              ? read_file(c.cfg.get("in"))
                                                                          : throw UsageError("parse needs --in or --text");
  const bool from_json = looks_like_json(text);
  const Layout l = read_layout(text);
  json report{{"input_format", from_json ? "json" : "dsl"},
              {"output_format", from_json ? "dsl" : "json"},
              {"instances", l.active_count()},
              {"validity_score", layout_validity_score(l)}};
  const std::string converted = from_json ? serialize_layout(l) + "\n" : layout_to_json(l).dump(2) + "\n";
  if (c.cfg.has("out")) {
    write_file(c.cfg.get("out"), converted);
    c.cfg.save(config_path_for(c.cfg.get("out")));
    report["out"] = c.cfg.get("out");
  } else if (from_json) {
    report["dsl"] = serialize_layout(l);
  } else {
    report["layout"] = layout_to_json(l);
  }
  c.out << report.dump() << '\n';
  return kOk;
}

struct Input {
  std::ifstream file;
  std::istream* stream = nullptr;
};

void open_input(Input& in, const std::string& path) {
  if (path == "-") {
    in.stream = &std::cin;
    return;
  }
  in.file.open(path);
  if (!in.file) throw std::runtime_error("cannot open " + path);
  in.stream = &in.file;
}

int cmd_score(Ctx& c) {
  Input in;
  open_input(in, c.cfg.get("in"));
  const ScoreWeights w = weights_from(c.cfg);
  const double threshold = c.cfg.get_double("threshold", 60.0);
  std::ofstream file;
  std::ostream* os = &c.out;
  if (c.cfg.has("out")) {
    file.open(c.cfg.get("out"));
    if (!file) throw std::runtime_error("cannot write " + c.cfg.get("out"));
    os = &file;
    c.cfg.save(config_path_for(c.cfg.get("out")));
  }
  std::string line;
  int64_t n = 0;
  while (std::getline(*in.stream, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row{{"line", n}};
    try {
      const json j = json::parse(line);
      const AnnotationRecord rec = record_from_json(j);
      row["image_id"] = rec.image_id;
      row.update(report_to_json(score_record(rec, w, threshold)));
    } catch (const json::parse_error& e) {
      row["error"] = "malformed";
      row["detail"] = e.what();
    } catch (const RecordError& e) {
      row["error"] = e.reason();
      row["detail"] = e.what();
    }
    *os << row.dump() << '\n';
  }
  return kOk;
}

int cmd_filter(Ctx& c) {
  Input in;
  open_input(in, c.cfg.get("in"));
  const fs::path dir = c.cfg.get("out_dir");
  fs::create_directories(dir);
  std::ofstream kept(dir / "kept.jsonl"), rejected(dir / "rejected.jsonl");
  if (!kept || !rejected) throw std::runtime_error("cannot write into " + dir.string());
  FilterOptions opt;
  opt.threshold = c.cfg.get_double("threshold", 60.0);
  opt.weights = weights_from(c.cfg);
  const FilterStats st = filter_dataset(*in.stream, kept, rejected, opt);
  write_file((dir / "stats.json").string(), st.to_json().dump(2) + "\n");
  c.cfg.save((dir / "config.resolved").string());
  c.out << st.to_json().dump() << '\n';
  return kOk;
}

SceneSpec scene_spec_from(const RunConfig& cfg) {
  SceneSpec s;
  s.canvas = cfg.get_int("canvas", s.canvas);
  s.min_instances = cfg.get_int("min_instances", s.min_instances);
  s.max_instances = cfg.get_int("max_instances", s.max_instances);
  s.min_side = cfg.get_int("min_side", s.min_side);
  s.max_side = cfg.get_int("max_side", s.max_side);
  s.max_pair_iou = cfg.get_double("max_pair_iou", s.max_pair_iou);
  s.distinct_colors = cfg.get_bool("distinct_colors", s.distinct_colors);
  s.seed = static_cast<uint64_t>(cfg.get_int64("seed", 0));
  return s;
}

int cmd_gen_data(Ctx& c) {
  const SceneSpec spec = scene_spec_from(c.cfg);
  const int count = c.cfg.get_int("count", 2000);
  const auto scenes = generate_synthetic_dataset(spec, count);
  const std::string dir = c.cfg.get("out_dir");
  save_dataset(scenes, dir);
  if (const int n = c.cfg.get_int("contact_sheet", 0); n > 0) {
    std::vector<Image> tiles;
    for (int i = 0; i < std::min<int>(n, static_cast<int>(scenes.size())); ++i) tiles.push_back(scenes[i].image);
    write_png(contact_sheet(tiles, 8), (fs::path(dir) / "contact.png").string());
  }
  c.cfg.save((fs::path(dir) / "config.resolved").string());
  std::map<std::string, int> classes;
  for (const auto& s : scenes) ++classes[to_string(classify_complexity(s.layout.active_count()))];
  c.out << json{{"scenes", scenes.size()}, {"out_dir", dir}, {"per_complexity", classes}}.dump() << '\n';
  return kOk;
}

int cmd_train(Ctx& c) {
  const std::string data_dir = require(c.cfg, "data");
  const fs::path dir = c.cfg.get("out_dir");
  fs::create_directories(dir);
  const uint64_t seed = static_cast<uint64_t>(c.cfg.get_int64("seed", 0));

  ModelSpec spec;
  std::unique_ptr<Denoiser> model;
  if (c.cfg.has("init") && !c.cfg.get("init").empty()) {
    LoadedModel lm = load_model(c.cfg.get("init"));
    spec = lm.spec;
    model = std::move(lm.model);
  } else {
    spec.backbone = backbone_from(c.cfg);
    spec.lora_cfg.rank = c.cfg.get_int("rank", 8);
    spec.lora_cfg.alpha = c.cfg.get_double("alpha", 0.0);
    spec.lora_cfg.targets = c.cfg.get_list("targets");
    model = build_model(spec, seed);
  }
  const auto scenes = load_dataset(data_dir);
  if (scenes.empty()) throw ConfigError("dataset " + data_dir + " is empty");
  const int factor = scenes[0].image.width / spec.backbone.latent_w;
  if (factor * spec.backbone.latent_w != scenes[0].image.width)
    throw ConfigError("image width is not a multiple of latent_size");
  const auto samples = to_train_samples(scenes, factor);
  const NoiseSchedule sched(c.cfg.get_int("noise_steps", 1000));

  auto phase_cfg = [&](const char* steps_key, const char* lr_key) {
    PhaseConfig p;
    p.steps = c.cfg.get_int(steps_key, 1000);
    p.batch = c.cfg.get_int("batch", 1);
    p.opt.lr = c.cfg.get_double(lr_key, 1e-3);
    p.opt.weight_decay = c.cfg.get_double("weight_decay", 0.01);
    p.opt.grad_clip = c.cfg.get_double("grad_clip", 1.0);
    p.warmup = c.cfg.get_int("warmup", 100);
    p.null_text_prob = c.cfg.get_double("null_prob", 0.1);
    return p;
  };

  c.cfg.save((dir / "config.resolved").string());
  std::ofstream csv(dir / "loss.csv");
  csv << "phase,step,loss,grad_norm,lr\n";
  const auto t0 = std::chrono::steady_clock::now();
  TrainHooks hooks;
  hooks.log_every = c.cfg.get_int("log_every", 100);
  hooks.on_log = [&](const LossRecord& r) {
    char row[160];
    std::snprintf(row, sizeof row, "%s,%d,%.8g,%.6g,%.6g\n", to_string(r.phase), r.step, r.loss, r.grad_norm, r.lr);
    csv << row << std::flush;
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.out << "[" << to_string(r.phase) << "] step " << r.step << " loss " << r.loss << " (" << sec << " s)\n"
          << std::flush;
  };
  hooks.checkpoint_every = c.cfg.get_int("checkpoint_every", 0);
  fs::create_directories(dir / "checkpoints");
  json meta{{"noise_steps", sched.steps()}, {"latent_factor", factor}};
  hooks.on_checkpoint = [&](TrainPhase ph, int step) {
    save_model(*model, spec, (dir / "checkpoints" / (std::string(to_string(ph)) + "_" + std::to_string(step) + ".ckpt")).string(),
               meta);
  };

  json summary{{"train_scenes", samples.size()}};
  const PhaseConfig base = phase_cfg("base_steps", "base_lr");
  if (c.cfg.get_int("base_steps", 0) > 0)
    summary["base_final_loss"] = train_phase(*model, sched, samples, TrainPhase::kBase, base, seed + 1, hooks);
  const PhaseConfig layout = phase_cfg("steps", "lr");
  if (c.cfg.get_int("steps", 0) > 0)
    summary["layout_final_loss"] = train_phase(*model, sched, samples, TrainPhase::kLayout, layout, seed + 2, hooks);
  save_model(*model, spec, (dir / "model.ckpt").string(), meta);
  const ParamCount pc = param_count(*model);
  summary["params"] = {{"base", pc.base}, {"layout", pc.layout}, {"adapter", pc.adapter}, {"ratio", pc.ratio}};
  summary["checkpoint"] = (dir / "model.ckpt").string();
  write_file((dir / "train.json").string(), summary.dump(2) + "\n");
  c.out << summary.dump() << '\n';
  return kOk;
}

int cmd_sample(Ctx& c) {
  LoadedModel lm = load_model(require(c.cfg, "checkpoint"));
  const std::string text = c.cfg.has("text") && !c.cfg.get("text").empty() ? c.cfg.get("text")
                           : c.cfg.has("layout")                          ? read_file(c.cfg.get("layout"))
                                                                          : throw UsageError("sample needs --layout or --text");
  const Layout layout = read_layout(text);
  const NoiseSchedule sched(lm.meta.value("noise_steps", 1000));
  const SamplerConfig sc = sampler_from(c.cfg);
  const GuidanceSchedule g = guidance_from(c.cfg);
  SampleTrace trace;
  const Tensor z = sample(*lm.model, sched, layout, sc, g, &trace);
  const Image img = decode_latent(z, lm.meta.value("latent_factor", 4));
  const fs::path out = c.cfg.get("out");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_png(img, out.string());
  fs::path side = out;
  side.replace_extension(".json");
  int gated = 0;
  for (bool b : trace.gates) gated += b;
  json sidecar{{"image", out.filename().string()},
               {"layout", layout_to_json(layout)},
               {"dsl", serialize_layout(layout)},
               {"seed", sc.seed},
               {"tau", g.tau},
               {"cfg_scale", sc.cfg_scale},
               {"sampling_steps", g.steps},
               {"guided_steps", gated}};
  write_file(side.string(), sidecar.dump(2) + "\n");
  c.cfg.save(config_path_for(out.string()));
  c.out << json{{"image", out.string()}, {"sidecar", side.string()}, {"guided_steps", gated}}.dump() << '\n';
  return kOk;
}

int cmd_eval(Ctx& c) {
  const bool gt = c.cfg.get_bool("ground_truth", false);
  const int count = c.cfg.get_int("count", 200);
  if (count < 1) throw ConfigError("count must be >= 1");
  std::vector<Layout> layouts;
  if (c.cfg.has("data") && !c.cfg.get("data").empty()) {
    for (auto& s : load_dataset(c.cfg.get("data"))) {
      if (static_cast<int>(layouts.size()) == count) break;
      layouts.push_back(std::move(s.layout));
    }
  } else {
    SceneSpec spec;
    spec.seed = static_cast<uint64_t>(c.cfg.get_int64("scene_seed", 2));
    spec.min_instances = c.cfg.get_int("min_instances", 1);
    spec.max_instances = c.cfg.get_int("max_instances", 3);
    for (auto& s : generate_synthetic_dataset(spec, count)) layouts.push_back(std::move(s.layout));
  }
  LoadedModel lm;
  std::unique_ptr<NoiseSchedule> sched;
  ImageSampler sampler;
  if (gt) {
    sampler = [](const Layout& l, int) { return render_layout(l); };
  } else {
    lm = load_model(require(c.cfg, "checkpoint"));
    sched = std::make_unique<NoiseSchedule>(lm.meta.value("noise_steps", 1000));
    sampler = make_image_sampler(*lm.model, *sched, sampler_from(c.cfg), guidance_from(c.cfg),
                                 lm.meta.value("latent_factor", 4));
  }
  const fs::path dir = c.cfg.get("out_dir");
  fs::create_directories(dir);
  const int sheet = c.cfg.get_int("contact_sheet", 0);
  std::vector<Image> tiles;
  const ImageSampler recording = [&](const Layout& l, int i) {
    Image img = sampler(l, i);
    if (i < sheet) {
      tiles.push_back(overlay_layout(render_layout(l, img.width), l));
      tiles.push_back(overlay_layout(img, l));
    }
    return img;
  };
  const EvalReport r = layout_adherence(recording, layouts);
  write_file((dir / "report.json").string(), r.to_json().dump(2) + "\n");
  if (!tiles.empty()) write_png(contact_sheet(tiles, 8), (dir / "contact.png").string());
  c.cfg.save((dir / "config.resolved").string());
  c.out << json{{"layouts", r.layouts}, {"mean_iou", r.mean_iou}, {"success_at_50", r.success_at_50}}.dump() << '\n';
  return kOk;
}

int cmd_grad_check(Ctx& c) {
  GradCheckOptions opt;
  opt.seed = static_cast<uint64_t>(c.cfg.get_int64("seed", 0));
  opt.op_tolerance = c.cfg.get_double("op_tolerance", opt.op_tolerance);
  opt.model_tolerance = c.cfg.get_double("model_tolerance", opt.model_tolerance);
  opt.model_coords = c.cfg.get_int("model_coords", opt.model_coords);
  const auto cases = run_grad_check_suite(opt);
  std::vector<std::string> failed;
  for (const auto& k : cases) {
    char row[200];
    std::snprintf(row, sizeof row, "%-24s %-5s max_rel_err %.3e  tol %.0e  coords %lld  %s\n", k.name.c_str(),
                  k.end_to_end ? "model" : "op", k.max_rel_error, k.tolerance, static_cast<long long>(k.checked),
                  k.passed() ? "ok" : "FAIL");
    c.out << row;
    if (!k.passed()) failed.push_back(k.name);
  }
  if (c.cfg.has("out")) {
    write_file(c.cfg.get("out"), grad_check_to_json(cases).dump(2) + "\n");
    c.cfg.save(config_path_for(c.cfg.get("out")));
  }
  if (!failed.empty()) {
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    throw ConfigError("gradient check failed: " + names);
  }
  return kOk;
}

int cmd_param_count(Ctx& c) {
  ModelSpec spec;
  spec.backbone = backbone_from(c.cfg);
  spec.lora_cfg.alpha = c.cfg.get_double("alpha", 0.0);
  spec.lora_cfg.targets = c.cfg.get_list("targets");
  const auto ranks = c.cfg.get_int_list("ranks");
  if (ranks.empty()) throw ConfigError("ranks expects at least one integer");
  json rows = json::array();
  char line[200];
  std::snprintf(line, sizeof line, "%6s %12s %12s %12s %9s %s\n", "rank", "base", "layout", "adapter", "ratio",
                "r(d_in+d_out)");
  c.out << "backbone: " << spec.backbone.kind << "\n" << line;
  for (int r : ranks) {
    spec.lora_cfg.rank = r;
    const auto model = build_model(spec, 0);
    const ParamCount pc = param_count(*model);
    int64_t formula = 0;
    for (const auto& l : pc.per_layer) formula += static_cast<int64_t>(l.rank) * (l.d_in + l.d_out);
    std::snprintf(line, sizeof line, "%6d %12lld %12lld %12lld %9.4f %s\n", r, static_cast<long long>(pc.base),
                  static_cast<long long>(pc.layout), static_cast<long long>(pc.adapter), pc.ratio,
                  formula == pc.adapter ? "match" : "MISMATCH");
    c.out << line;
    rows.push_back({{"rank", r},
                    {"base", pc.base},
                    {"layout", pc.layout},
                    {"adapter", pc.adapter},
                    {"ratio", pc.ratio},
                    {"adapted_layers", pc.per_layer.size()},
                    {"formula_match", formula == pc.adapter}});
  }
  if (c.cfg.has("out")) {
    write_file(c.cfg.get("out"), json{{"backbone", spec.backbone.kind}, {"ranks", rows}}.dump(2) + "\n");
    c.cfg.save(config_path_for(c.cfg.get("out")));
  }
  return kOk;
}

using Handler = int (*)(Ctx&);

Handler handler_for(const std::string& name) {
  static const std::map<std::string, Handler> h{
      {"parse", cmd_parse},   {"score", cmd_score},   {"filter", cmd_filter},         {"gen-data", cmd_gen_data},
      {"train", cmd_train},   {"sample", cmd_sample}, {"eval", cmd_eval},             {"grad-check", cmd_grad_check},
      {"param-count", cmd_param_count}};
  return h.at(name);
}

int fail(std::ostream& err, int code, const std::string& message, json extra = json::object()) {
  static const char* kinds[] = {"ok", "usage", "validation", "runtime"};
  json j{{"error", kinds[code]}, {"exit_code", code}, {"message", message}};
  j.update(extra);
  err << j.dump() << '\n';
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"migkit: layout-guided diffusion toolkit", "migkit"};
  app.require_subcommand(1);
  struct Bound {
    const CommandSpec* spec;
    CLI::App* app;
    std::string config_file;
    std::map<std::string, std::string> text;
    std::map<std::string, bool> flags;
    std::map<std::string, CLI::Option*> opts;
  };
  std::vector<std::unique_ptr<Bound>> bound;
  for (const auto& spec : command_specs()) {
    auto b = std::make_unique<Bound>();
    b->spec = &spec;
    b->app = app.add_subcommand(spec.name, spec.help);
    b->app->add_option("--config", b->config_file, "Read settings from a 'key = value' file; flags override it");
    for (const auto& o : spec.options) {
      std::string desc = o.help + " [config: " + o.key + "]";
      if (!o.fallback.empty()) desc += " (default: " + o.fallback + ")";
      if (o.boolean)
        b->opts[o.key] = b->app->add_flag(flag_for(o.key), b->flags[o.key], desc);
      else
        b->opts[o.key] = b->app->add_option(flag_for(o.key), b->text[o.key], desc);
    }
    bound.push_back(std::move(b));
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, kUsage, e.what());
  }

  Bound* b = nullptr;
  for (auto& x : bound)
    if (x->app->parsed()) b = x.get();
  if (!b) return fail(err, kUsage, "no subcommand given");

  try {
    Ctx c{RunConfig{}, out, err};
    if (!b->config_file.empty()) c.cfg = RunConfig::load(b->config_file);
    for (const auto& [key, _] : c.cfg.values()) {
      const bool known = std::any_of(b->spec->options.begin(), b->spec->options.end(),
                                     [&](const OptionSpec& o) { return o.key == key; });
      if (!known) err << json{{"warning", "unused config key"}, {"key", key}}.dump() << '\n';
    }
    for (const auto& o : b->spec->options) {
      if (b->opts[o.key]->count() == 0) continue;
      c.cfg.set(o.key, o.boolean ? (b->flags[o.key] ? "true" : "false") : b->text[o.key]);
    }
    const bool has_seed = std::any_of(b->spec->options.begin(), b->spec->options.end(),
                                      [](const OptionSpec& o) { return o.key == "seed"; });
    if (has_seed && !c.cfg.has("seed"))
      if (const char* env = std::getenv("MIGKIT_SEED"); env && *env) c.cfg.set("seed", env);
    for (const auto& o : b->spec->options)
      if (!c.cfg.has(o.key) && !o.fallback.empty()) c.cfg.set(o.key, o.fallback);
    return handler_for(b->spec->name)(c);
  } catch (const UsageError& e) {
    return fail(err, kUsage, e.what());
  } catch (const LayoutError& e) {
    json extra{{"layout_error", to_string(e.code())}, {"offset", e.offset()}};
    if (e.instance() >= 0) extra["instance"] = e.instance();
    return fail(err, kValidation, e.what(), extra);
  } catch (const RecordError& e) {
    return fail(err, kValidation, e.what(), {{"reason", e.reason()}});
  } catch (const json::exception& e) {
    return fail(err, kValidation, e.what());
  } catch (const std::logic_error& e) {
    return fail(err, kValidation, e.what());
  } catch (const std::exception& e) {
    return fail(err, kRuntime, e.what());
  }
}

}  // namespace migkit::cli
