#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "migkit/layout.hpp"
#include "migkit/nn.hpp"

namespace migkit {

struct BinaryMask {
  int h = 0, w = 0;
  std::vector<uint8_t> bits;  // row-major, values in {0,1}
  // Set when a valid box covers no pixel center.
  bool empty_warning = false;

  uint8_t at(int r, int c) const { return bits[static_cast<size_t>(r) * w + c]; }
  int64_t count() const;
  Tensor to_tensor() const;  // [1,H,W]
};

// Pixel (r,c) is set iff its center ((c+0.5)/W, (r+0.5)/H) lies in
// [x1,x2) x [y1,y2); an edge at 1.0 is closed.
BinaryMask rasterize_mask(const BBox& b, int h, int w);

// P5 greyscale dump, 0/255.
void write_pgm(const BinaryMask& m, const std::string& path);

// Zero-padded per-instance layout channels at latent resolution.
struct LayoutLatent {
  Tensor slots;  // [n_max, h, w]
  int active_count = 0;
};

// Slot i = bilinear_interp(rasterize_mask(b_i, 8h, 8w), h, w) for active
// instances, zero for padding.
LayoutLatent build_layout_latent(const Layout& layout, int h, int w);

// [1,h,w] interpolated mask of a single box.
Tensor layout_slot(const BBox& b, int h, int w);

// Coordinate embedding: three stride-2 3x3 convolutions (1->16->32->64)
// with SiLU after the first two. The last layer starts at zero, so the
// embedding is identically zero until trained.
class MaskEncoder : public nn::Module {
 public:
  static constexpr int kChannels = 64;

  MaskEncoder(const std::string& prefix, Rng& rng);

  // [1,H,W] mask -> [64,H/8,W/8]. H and W must be divisible by 8.
  Tensor encode(const Tensor& mask) const;
  Tensor encode(const BinaryMask& mask) const { return encode(mask.to_tensor()); }

 private:
  nn::Conv2d conv1_, conv2_, conv3_;
};

}  // namespace migkit
