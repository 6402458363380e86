#include "migkit/mask_encoder.hpp"

#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace migkit {

int64_t BinaryMask::count() const { return std::accumulate(bits.begin(), bits.end(), int64_t{0}); }

Tensor BinaryMask::to_tensor() const {
  std::vector<double> v(bits.begin(), bits.end());
  return Tensor::from_data({1, h, w}, std::move(v));
}

BinaryMask rasterize_mask(const BBox& b, int h, int w) {
  if (auto v = validate_bbox(b); !v)
    throw std::invalid_argument(std::string("rasterize_mask: invalid box: ") + to_string(v.violation));
  if (h < 1 || w < 1) throw std::invalid_argument("rasterize_mask: grid extents must be >= 1");
  BinaryMask m{h, w, std::vector<uint8_t>(static_cast<size_t>(h) * w, 0), false};
  auto inside = [](double center, double lo, double hi) { return center >= lo && (center < hi || hi >= 1.0); };
  for (int r = 0; r < h; ++r) {
    const double cy = (r + 0.5) / h;
    if (!inside(cy, b.y1, b.y2)) continue;
    for (int c = 0; c < w; ++c)
      if (inside((c + 0.5) / w, b.x1, b.x2)) m.bits[static_cast<size_t>(r) * w + c] = 1;
  }
  if (m.count() == 0) {
    m.empty_warning = true;
    std::cerr << "warning: box (" << b.x1 << "," << b.y1 << "," << b.x2 << "," << b.y2
              << ") covers no pixel center on a " << h << "x" << w << " grid\n";
  }
  return m;
}

void write_pgm(const BinaryMask& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << m.w << " " << m.h << "\n255\n";
  for (uint8_t b : m.bits) out.put(static_cast<char>(b ? 255 : 0));
}

Tensor layout_slot(const BBox& b, int h, int w) {
  return bilinear_interp(rasterize_mask(b, 8 * h, 8 * w).to_tensor(), h, w);
}

LayoutLatent build_layout_latent(const Layout& layout, int h, int w) {
  if (h < 1 || w < 1) throw std::invalid_argument("build_layout_latent: extents must be >= 1");
  const Layout padded = layout.padded();
  std::vector<double> data(static_cast<size_t>(padded.n_max) * h * w, 0.0);
  int active = 0;
  for (int i = 0; i < padded.n_max; ++i) {
    const auto& inst = padded.instances[static_cast<size_t>(i)];
    if (!inst.active) continue;
    ++active;
    Tensor s = layout_slot(inst.bbox, h, w);
    std::copy(s.data().begin(), s.data().end(), data.begin() + static_cast<std::ptrdiff_t>(i) * h * w);
  }
  return {Tensor::from_data({padded.n_max, h, w}, std::move(data)), active};
}

MaskEncoder::MaskEncoder(const std::string& prefix, Rng& rng) {
  conv1_ = add_layer(nn::Conv2d(prefix + ".conv1", 1, 16, 2, rng, nn::Role::kLayout));
  conv2_ = add_layer(nn::Conv2d(prefix + ".conv2", 16, 32, 2, rng, nn::Role::kLayout));
  conv3_ = add_layer(nn::Conv2d::zeros(prefix + ".conv3", 32, kChannels, 2, nn::Role::kLayout));
}

Tensor MaskEncoder::encode(const Tensor& mask) const {
  if (mask.ndim() != 3 || mask.dim(0) != 1) throw ShapeError("encode_bbox expects a [1,H,W] mask");
  if (mask.dim(1) % 8 != 0 || mask.dim(2) % 8 != 0)
    throw ShapeError("encode_bbox: mask extents " + shape_str(mask.shape()) + " must be divisible by 8");
  Tensor h = silu(conv1_.forward(mask));
  h = silu(conv2_.forward(h));
  return conv3_.forward(h);
}

}  // namespace migkit
