#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "migkit/config.hpp"
#include "migkit/curation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace migkit;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json last_json_line(const std::string& s) {
  std::istringstream in(s);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return json::parse(last);
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("migkit_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

}  // namespace

TEST_CASE("every config key is documented in --help with its flag") {
  for (const auto& spec : cli::command_specs()) {
    CAPTURE(spec.name);
    const Result r = call({spec.name, "--help"});
    CHECK(r.code == cli::kOk);
    CHECK(r.out.find("--config") != std::string::npos);
    for (const auto& o : spec.options) {
      CAPTURE(o.key);
      CHECK(r.out.find(cli::flag_for(o.key)) != std::string::npos);
      CHECK(r.out.find("[config: " + o.key + "]") != std::string::npos);
    }
  }
  CHECK(cli::flag_for("lambda_a") == "--lambda-a");
  CHECK(call({"--help"}).code == cli::kOk);
}

TEST_CASE("parse converts between DSL and JSON") {
  const std::string dsl = "a cat <layout> <scap>cat</scap> <bbox>0.1,0.2,0.5,0.6</bbox> </layout>";
  Result r = call({"parse", "--text", dsl});
  REQUIRE(r.code == cli::kOk);
  json j = json::parse(r.out);
  CHECK(j["instances"] == 1);
  CHECK(j["input_format"] == "dsl");
  CHECK(j["layout"]["instances"][0]["caption"] == "cat");
  r = call({"parse", "--text", j["layout"].dump()});
  REQUIRE(r.code == cli::kOk);
  CHECK(json::parse(r.out)["dsl"] == "a cat <layout><scap>cat</scap><bbox>0.100,0.200,0.500,0.600</bbox></layout>");
}

TEST_CASE("exit codes and error JSON") {
  Result r = call({"parse"});
  CHECK(r.code == cli::kUsage);
  CHECK(json::parse(r.err)["error"] == "usage");
  CHECK(call({"no-such-command"}).code == cli::kUsage);
  CHECK(call({"parse", "--bogus-flag", "1"}).code == cli::kUsage);
  CHECK(call({}).code == cli::kUsage);

  r = call({"parse", "--text", "<layout> <scap>cat</scap> <bbox>0.5,0.2,0.1,0.6</bbox> </layout>"});
  CHECK(r.code == cli::kValidation);
  json e = json::parse(r.err);
  CHECK(e["error"] == "validation");
  CHECK(e["exit_code"] == 2);
  CHECK(e.contains("layout_error"));
  CHECK(e["instance"] == 0);

  r = call({"parse", "--text", "<layout> <scap>cat</scap> <bbox>0.1,0.2</bbox>"});
  CHECK(r.code == cli::kValidation);
  CHECK(json::parse(r.err).contains("offset"));

  CHECK(call({"gen-data", "--count", "abc"}).code == cli::kValidation);

  r = call({"parse", "--in", "/nonexistent/dir/layout.txt"});
  CHECK(r.code == cli::kRuntime);
  CHECK(json::parse(r.err)["error"] == "runtime");
}

TEST_CASE("filter over the worked records") {
  TempDir d("filter");
  {
    std::ofstream f(d / "in.jsonl");
    f << R"({"image_id":"one","width":700,"height":100,"instances":[{"caption":"cat","bbox":[0,0,70,100],"confidence":1.0}]})"
      << "\n"
      << R"({"image_id":"two","width":700,"height":100,"instances":[{"caption":"a","bbox":[0,0,140,100],"confidence":0.9},{"caption":"b","bbox":[130,0,200,100],"confidence":0.8}]})"
      << "\n"
      << R"({"image_id":"three","width":700,"height":100,"instances":[{"caption":"a","bbox":[0,0,420,100],"confidence":0.5},{"caption":"b","bbox":[200,0,550,100],"confidence":0.4}]})"
      << "\n";
  }
  const Result r = call({"filter", "--in", d / "in.jsonl", "--out-dir", d / "out"});
  REQUIRE(r.code == cli::kOk);
  const json st = json::parse(slurp(d / "out/stats.json"));
  CHECK(st["kept"] == 2);
  CHECK(st["rejected"] == 1);
  CHECK(fs::exists(d / "out/config.resolved"));
  const RunConfig cfg = RunConfig::load(d / "out/config.resolved");
  CHECK(cfg.get("threshold") == "60");

  // a stricter threshold from a config file, overridden by a flag
  {
    std::ofstream f(d / "run.cfg");
    f << "threshold = 99\nlambda_a = 0.3\n";
  }
  Result strict = call({"filter", "--config", d / "run.cfg", "--in", d / "in.jsonl", "--out-dir", d / "s"});
  CHECK(json::parse(slurp(d / "s/stats.json"))["kept"] == 0);
  strict = call({"filter", "--config", d / "run.cfg", "--threshold", "10", "--in", d / "in.jsonl", "--out-dir", d / "t"});
  CHECK(json::parse(slurp(d / "t/stats.json"))["kept"] == 3);

  const Result scored = call({"score", "--in", d / "in.jsonl"});
  REQUIRE(scored.code == cli::kOk);
  std::istringstream lines(scored.out);
  std::string line;
  std::getline(lines, line);
  CHECK(std::abs(json::parse(line)["total"].get<double>() - 97.0) < 1e-9);
}

TEST_CASE("unknown config keys warn") {
  TempDir d("warn");
  {
    std::ofstream f(d / "run.cfg");
    f << "not_a_key = 1\n";
  }
  const Result r = call({"param-count", "--config", d / "run.cfg", "--ranks", "2", "--widths", "8,16"});
  CHECK(r.code == cli::kOk);
  CHECK(r.err.find("unused config key") != std::string::npos);
}

TEST_CASE("param-count reports the low-rank formula") {
  TempDir d("params");
  const Result r = call({"param-count", "--out", d / "p.json"});
  REQUIRE(r.code == cli::kOk);
  CHECK(r.out.find("MISMATCH") == std::string::npos);
  const json p = json::parse(slurp(d / "p.json"));
  REQUIRE(p["ranks"].size() == 4);
  for (size_t i = 0; i < 4; ++i) CHECK(p["ranks"][i]["formula_match"] == true);
  for (size_t i = 1; i < 4; ++i) CHECK(p["ranks"][i]["adapter"] > p["ranks"][i - 1]["adapter"]);
  CHECK(p["ranks"][0]["base"] == p["ranks"][3]["base"]);
}

TEST_CASE("gen-data is byte-reproducible and honors MIGKIT_SEED") {
  TempDir d("gen");
  const std::vector<std::string> common{"--count", "5", "--contact-sheet", "5"};
  auto gen = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> args{"gen-data", "--out-dir", d / out};
    args.insert(args.end(), common.begin(), common.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return call(args);
  };
  REQUIRE(gen("a", {"--seed", "9"}).code == cli::kOk);
  REQUIRE(gen("b", {"--seed", "9"}).code == cli::kOk);
  for (const char* f : {"layouts.jsonl", "images/000004.png", "contact.png"})
    CHECK(slurp(d / (std::string("a/") + f)) == slurp(d / (std::string("b/") + f)));

  setenv("MIGKIT_SEED", "9", 1);
  REQUIRE(gen("env", {}).code == cli::kOk);
  REQUIRE(gen("flag", {"--seed", "4"}).code == cli::kOk);
  unsetenv("MIGKIT_SEED");
  CHECK(RunConfig::load(d / "env/config.resolved").get("seed") == "9");
  CHECK(slurp(d / "env/layouts.jsonl") == slurp(d / "a/layouts.jsonl"));
  CHECK(RunConfig::load(d / "flag/config.resolved").get("seed") == "4");
  CHECK(slurp(d / "flag/layouts.jsonl") != slurp(d / "a/layouts.jsonl"));
}

TEST_CASE("tiny train, sample and eval through the CLI") {
  TempDir d("train");
  REQUIRE(call({"gen-data", "--out-dir", d / "data", "--count", "6", "--canvas", "32", "--min-side", "8", "--max-side",
                "14", "--seed", "1"})
              .code == cli::kOk);
  const std::vector<std::string> model_flags{"--widths", "8,16", "--latent-size", "8", "--d-text", "8", "--d-time", "16",
                                             "--rank", "2", "--noise-steps", "50"};
  std::vector<std::string> train{"train",         "--data",  d / "data", "--out-dir", d / "run", "--base-steps", "6",
                                 "--steps",       "6",       "--warmup", "2",         "--log-every", "3",
                                 "--checkpoint-every", "3"};
  train.insert(train.end(), model_flags.begin(), model_flags.end());
  const Result t = call(train);
  REQUIRE_MESSAGE(t.code == cli::kOk, t.err);
  CHECK(fs::exists(d / "run/model.ckpt"));
  CHECK(fs::exists(d / "run/model.ckpt.manifest"));
  CHECK(fs::exists(d / "run/checkpoints/base_3.ckpt"));
  CHECK(fs::exists(d / "run/checkpoints/layout_6.ckpt"));
  const std::string csv = slurp(d / "run/loss.csv");
  CHECK(csv.rfind("phase,step,loss,grad_norm,lr\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  const std::string layout = "<layout> <scap>red square</scap> <bbox>0.25,0.25,0.75,0.75</bbox> </layout>";
  const std::vector<std::string> sample{"sample", "--checkpoint", d / "run/model.ckpt", "--text", layout,
                                        "--sampling-steps", "4", "--seed", "3", "--out", d / "s/one.png"};
  Result s = call(sample);
  REQUIRE_MESSAGE(s.code == cli::kOk, s.err);
  const std::string png = slurp(d / "s/one.png");
  CHECK(json::parse(slurp(d / "s/one.json"))["guided_steps"] == 3);
  CHECK(fs::exists(d / "s/one.config"));
  s = call(sample);
  CHECK(slurp(d / "s/one.png") == png);

  const Result e = call({"eval", "--checkpoint", d / "run/model.ckpt", "--data", d / "data", "--count", "3",
                         "--sampling-steps", "4", "--out-dir", d / "ev", "--contact-sheet", "2"});
  REQUIRE_MESSAGE(e.code == cli::kOk, e.err);
  const json report = json::parse(slurp(d / "ev/report.json"));
  CHECK(report["layouts"] == 3);
  CHECK(fs::exists(d / "ev/contact.png"));

  const Result gt = call({"eval", "--ground-truth", "--count", "20", "--out-dir", d / "gt"});
  REQUIRE(gt.code == cli::kOk);
  CHECK(last_json_line(gt.out)["mean_iou"].get<double>() >= 0.9);

  CHECK(call({"sample", "--checkpoint", d / "missing.ckpt", "--text", layout}).code == cli::kRuntime);
}

TEST_CASE("shipped config files only use known keys") {
  const fs::path dir = fs::path(MIGKIT_SOURCE_DIR) / "configs";
  int files = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".cfg") continue;
    ++files;
    const std::string cmd = entry.path().stem().string();
    CAPTURE(cmd);
    const auto& specs = cli::command_specs();
    const auto it = std::find_if(specs.begin(), specs.end(), [&](const cli::CommandSpec& s) { return s.name == cmd; });
    REQUIRE(it != specs.end());
    const RunConfig cfg = RunConfig::load(entry.path().string());
    for (const auto& [key, value] : cfg.values()) {
      CAPTURE(key);
      CHECK(std::any_of(it->options.begin(), it->options.end(), [&](const cli::OptionSpec& o) { return o.key == key; }));
    }
  }
  CHECK(files >= 5);
}
