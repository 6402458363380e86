#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "migkit/mask_encoder.hpp"

using namespace migkit;

namespace {

BBox random_box(Rng& rng) {
  const double x1 = rng.uniform(0.0, 0.8), y1 = rng.uniform(0.0, 0.8);
  return {x1, y1, rng.uniform(x1 + 0.05, 1.0), rng.uniform(y1 + 0.05, 1.0)};
}

bool center_in(const BBox& b, int r, int c, int h, int w) {
  const double cx = (c + 0.5) / w, cy = (r + 0.5) / h;
  const bool in_x = cx >= b.x1 && (cx < b.x2 || b.x2 == 1.0);
  const bool in_y = cy >= b.y1 && (cy < b.y2 || b.y2 == 1.0);
  return in_x && in_y;
}

}  // namespace

TEST_CASE("rasterize worked examples") {
  BinaryMask m = rasterize_mask({0.25, 0.25, 0.75, 0.75}, 8, 8);
  CHECK(m.count() == 16);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) CHECK(m.at(r, c) == ((r >= 2 && r <= 5 && c >= 2 && c <= 5) ? 1 : 0));

  for (auto [h, w] : {std::pair{1, 1}, std::pair{7, 13}, std::pair{64, 64}})
    CHECK(rasterize_mask({0, 0, 1, 1}, h, w).count() == int64_t{h} * w);

  BinaryMask thin = rasterize_mask({0.13, 0.1, 0.14, 0.9}, 8, 8);
  CHECK(thin.count() == 0);
  CHECK(thin.empty_warning);
  CHECK_THROWS_AS(rasterize_mask({0.5, 0, 0.5, 1}, 8, 8), std::invalid_argument);
  CHECK_THROWS_AS(rasterize_mask({0, 0, 1, 1}, 0, 8), std::invalid_argument);
}

TEST_CASE("rasterize matches per-pixel oracle, translation and nesting") {
  Rng rng(21);
  for (int i = 0; i < 200; ++i) {
    const BBox b = random_box(rng);
    const int h = static_cast<int>(rng.integer(4, 40)), w = static_cast<int>(rng.integer(4, 40));
    BinaryMask m = rasterize_mask(b, h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) REQUIRE(m.at(r, c) == (center_in(b, r, c, h, w) ? 1 : 0));

    // nesting: grow the box
    const BBox big{b.x1 * 0.5, b.y1 * 0.5, std::min(1.0, b.x2 + 0.1), std::min(1.0, b.y2 + 0.1)};
    BinaryMask mb = rasterize_mask(big, h, w);
    for (std::size_t p = 0; p < m.bits.size(); ++p) CHECK(m.bits[p] <= mb.bits[p]);
  }

  // shift by exactly k pixels on a 32 grid (box edges at dyadic positions)
  const int n = 32;
  const BBox b{4.0 / n, 6.0 / n, 12.0 / n, 15.0 / n};
  BinaryMask base = rasterize_mask(b, n, n);
  for (int k = 1; k <= 5; ++k) {
    const BBox s{b.x1 + double(k) / n, b.y1 + double(k) / n, b.x2 + double(k) / n, b.y2 + double(k) / n};
    BinaryMask shifted = rasterize_mask(s, n, n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const uint8_t expect = (r - k >= 0 && c - k >= 0) ? base.at(r - k, c - k) : 0;
        CHECK(shifted.at(r, c) == expect);
      }
  }
}

TEST_CASE("encoder shapes, zero init and gradients") {
  Rng rng(22);
  MaskEncoder enc("mig.bbox", rng);
  Tensor e = enc.encode(rasterize_mask({0.1, 0.2, 0.6, 0.9}, 64, 64));
  CHECK(e.shape() == Shape{64, 8, 8});
  for (double v : e.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(enc.encode(Tensor::zeros({1, 20, 16})), ShapeError);

  // give the last layer some weight so every conv contributes a gradient
  for (auto& p : enc.parameters())
    if (p.name.find("conv3") != std::string::npos)
      for (double& v : p.tensor.mutable_data()) v = rng.uniform(-0.3, 0.3);
  enc.set_trainable(true, true, true);
  Tensor mask = rasterize_mask({0.2, 0.1, 0.7, 0.8}, 16, 16).to_tensor();
  std::vector<Tensor> ps;
  for (auto& p : enc.parameters()) ps.push_back(p.tensor);
  Rng probe_rng(5);
  Tensor w = Tensor::randn({64, 2, 2}, probe_rng);
  auto r = finite_diff_check([&] { return sum(mul(enc.encode(mask), w)); }, ps, 1e-5, 40, &rng);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("layout latent slots") {
  Layout l{"", {{"a", {0, 0, 1, 1}}, {"b", {0.25, 0.25, 0.75, 0.75}}, {"c", {0.1, 0.5, 0.3, 0.9}}}};
  LayoutLatent z = build_layout_latent(l, 16, 16);
  CHECK(z.slots.shape() == Shape{10, 16, 16});
  CHECK(z.active_count == 3);
  for (int p = 0; p < 256; ++p) CHECK(z.slots.at(p) == 1.0);
  for (int64_t p = 3 * 256; p < z.slots.numel(); ++p) CHECK(z.slots.at(p) == 0.0);
  Tensor slot1 = layout_slot(l.instances[1].bbox, 16, 16);
  for (int p = 0; p < 256; ++p) CHECK(z.slots.at(256 + p) == slot1.at(p));
  for (double v : z.slots.data()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("slot mass approximates box area") {
  Rng rng(23);
  for (int i = 0; i < 100; ++i) {
    const BBox b = random_box(rng);
    Tensor s = layout_slot(b, 16, 16);
    double m = 0.0;
    for (double v : s.data()) m += v;
    m /= 256.0;
    CHECK(std::abs(m - b.area()) <= 2.0 / 16.0);
  }
}

TEST_CASE("pgm dump") {
  BinaryMask m = rasterize_mask({0, 0, 0.5, 0.5}, 4, 6);
  const std::string path = "test_mask_dump.pgm";
  write_pgm(m, path);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, mx = 0;
  in >> magic >> w >> h >> mx;
  in.get();
  CHECK(magic == "P5");
  CHECK(w == 6);
  CHECK(h == 4);
  CHECK(mx == 255);
  std::vector<char> px(24);
  in.read(px.data(), 24);
  CHECK(static_cast<unsigned char>(px[0]) == 255);
  CHECK(static_cast<unsigned char>(px[5]) == 0);
  std::remove(path.c_str());
}
