#include <doctest.h>

#include <filesystem>
#include <set>

#include "migkit/curation.hpp"
#include "migkit/eval.hpp"

using namespace migkit;

TEST_CASE("generation is deterministic per seed") {
  SceneSpec spec;
  spec.min_instances = spec.max_instances = 1;
  spec.seed = 7;
  auto a = generate_synthetic_dataset(spec, 5), b = generate_synthetic_dataset(spec, 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].layout == b[i].layout);
  }
  spec.seed = 8;
  CHECK_FALSE(generate_synthetic_dataset(spec, 1)[0].layout == a[0].layout);
}

TEST_CASE("generated layouts respect the scene constraints") {
  SceneSpec spec;
  spec.seed = 3;
  spec.min_instances = 2;
  spec.max_instances = 4;
  const auto scenes = generate_synthetic_dataset(spec, 200);
  std::set<int> counts;
  for (const auto& s : scenes) {
    const auto& inst = s.layout.instances;
    counts.insert(static_cast<int>(inst.size()));
    CHECK(layout_validity_score(s.layout) == 1.0);
    const auto cls = classify_complexity(static_cast<int>(inst.size()));
    CHECK(cls == (inst.size() <= 3 ? Complexity::kSimple : Complexity::kModerate));
    std::set<std::string> colors;
    for (size_t i = 0; i < inst.size(); ++i) {
      colors.insert(caption_color(inst[i].caption));
      const double side = inst[i].bbox.width() * 64;
      CHECK(side >= 12);
      CHECK(side <= 28);
      for (size_t j = i + 1; j < inst.size(); ++j) CHECK(bbox_iou(inst[i].bbox, inst[j].bbox) <= 0.05);
    }
    CHECK(colors.size() == inst.size());
  }
  CHECK(counts == std::set<int>{2, 3, 4});
}

TEST_CASE("placement failure names the constraint") {
  SceneSpec spec;
  spec.canvas = 16;
  spec.min_side = spec.max_side = 16;
  spec.min_instances = spec.max_instances = 2;
  spec.max_pair_iou = 0.0;
  try {
    generate_synthetic_dataset(spec, 1);
    FAIL("expected a placement failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("max pairwise IoU") != std::string::npos);
    CHECK(std::string(e.what()).find("1000 rejections") != std::string::npos);
  }
  SceneSpec bad;
  bad.max_instances = 5;
  CHECK_THROWS_AS(generate_synthetic_dataset(bad, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic_dataset(SceneSpec{}, 0), std::invalid_argument);
}

TEST_CASE("blank image has no detections") {
  CHECK(oracle_detect(Image(64, 64, kBackground)).empty());
}

TEST_CASE("rendered red square at the center is recovered") {
  const Layout l{"", {{"red square", {0.25, 0.25, 0.75, 0.75}}}};
  const auto dets = oracle_detect(render_layout(l));
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].color == "red");
  CHECK(bbox_iou(dets[0].bbox, l.instances[0].bbox) >= 0.95);
  CHECK(dets[0].pixels == 32 * 32);
}

TEST_CASE("two disjoint same-color squares give two detections") {
  const Layout l{"", {{"blue square", {0.125, 0.125, 0.375, 0.375}}, {"blue square", {0.625, 0.625, 0.875, 0.875}}}};
  const auto dets = oracle_detect(render_layout(l));
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].color == "blue");
  CHECK(dets[1].color == "blue");
  const auto ious = match_instances(l, dets);
  CHECK(ious[0] == doctest::Approx(1.0));
  CHECK(ious[1] == doctest::Approx(1.0));
}

TEST_CASE("components below the size floor are ignored") {
  Image img(64, 64, kBackground);
  for (int r = 10; r < 12; ++r)
    for (int c = 10; c < 14; ++c) img.set(r, c, {220, 40, 40});  // 8 pixels
  CHECK(oracle_detect(img).empty());
  img.set(12, 10, {220, 40, 40});
  CHECK(oracle_detect(img).size() == 1);
  // diagonal contact is not 4-connected
  Image diag(64, 64, kBackground);
  for (int k = 0; k < 20; ++k) diag.set(k, k, {220, 40, 40});
  CHECK(oracle_detect(diag).empty());
}

TEST_CASE("circles fill their box") {
  for (int side : {12, 17, 28}) {
    const double s = side / 64.0;
    const Layout l{"", {{"green circle", {0.1, 0.2, 0.1 + s, 0.2 + s}}}};
    const auto dets = oracle_detect(render_layout(l));
    REQUIRE(dets.size() == 1);
    CHECK(bbox_iou(dets[0].bbox, l.instances[0].bbox) >= 0.9);
  }
}

TEST_CASE("matching is color-keyed, greedy and injective") {
  const Layout l{"", {{"red square", {0.0, 0.0, 0.5, 0.5}},
                      {"red circle", {0.05, 0.05, 0.5, 0.5}},
                      {"green square", {0.5, 0.5, 1.0, 1.0}}}};
  std::vector<Detection> dets{{"red", {0.0, 0.0, 0.5, 0.5}, 100}, {"blue", {0.5, 0.5, 1.0, 1.0}, 100}};
  const auto ious = match_instances(l, dets);
  CHECK(ious[0] == 1.0);
  CHECK(ious[1] == 0.0);  // the only red detection is taken
  CHECK(ious[2] == 0.0);  // wrong color
  CHECK(match_instances(l, {}) == std::vector<double>{0, 0, 0});
  CHECK(caption_color("  yellow circle") == "yellow");
}

TEST_CASE("report aggregates from the per-instance list") {
  std::vector<InstanceScore> s{{0, 0, "red", "simple", 0.9},
                               {0, 1, "blue", "simple", 0.2},
                               {1, 0, "red", "moderate", 0.5},
                               {1, 1, "red", "moderate", 0.0}};
  const EvalReport r = EvalReport::aggregate(2, s);
  CHECK(r.mean_iou == doctest::Approx(0.4));
  CHECK(r.success_at_50 == 0.5);
  CHECK(r.per_complexity.at("simple").mean_iou == doctest::Approx(0.55));
  CHECK(r.per_complexity.at("moderate").success_at_50 == 0.5);
  const auto j = r.to_json();
  CHECK(j["instances"].size() == 4);
  const EvalReport again = EvalReport::aggregate(2, r.instances);
  CHECK(again.mean_iou == r.mean_iou);
  CHECK(again.success_at_50 == r.success_at_50);
  CHECK(EvalReport::aggregate(0, {}).mean_iou == 0.0);
}

TEST_CASE("ground-truth renders reach the harness ceiling") {
  SceneSpec spec;
  spec.seed = 11;
  const auto scenes = generate_synthetic_dataset(spec, 100);
  std::vector<Layout> layouts;
  for (const auto& s : scenes) layouts.push_back(s.layout);
  const EvalReport r = layout_adherence([&](const Layout&, int i) { return scenes[i].image; }, layouts);
  CHECK(r.mean_iou >= 0.9);
  CHECK(r.layouts == 100);
  const EvalReport again = layout_adherence([&](const Layout&, int i) { return scenes[i].image; }, layouts);
  CHECK(again.to_json() == r.to_json());
  // a blank sampler scores zero everywhere
  const EvalReport blank = layout_adherence([](const Layout&, int) { return Image(64, 64, kBackground); }, layouts);
  CHECK(blank.mean_iou == 0.0);
}

TEST_CASE("dataset save and load") {
  SceneSpec spec;
  spec.seed = 12;
  const auto scenes = generate_synthetic_dataset(spec, 4);
  const std::string dir = "eval_dataset_roundtrip";
  save_dataset(scenes, dir);
  const auto back = load_dataset(dir);
  REQUIRE(back.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(back[i].image == scenes[i].image);
    CHECK(back[i].layout == scenes[i].layout);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS(load_dataset(dir));
}

TEST_CASE("render rejects captions outside the palette") {
  CHECK_THROWS_AS(render_layout(Layout{"", {{"purple square", {0, 0, 0.5, 0.5}}}}), std::invalid_argument);
  CHECK_THROWS_AS(render_layout(Layout{"", {{"red triangle", {0, 0, 0.5, 0.5}}}}), std::invalid_argument);
}
