#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "migkit/layout.hpp"
#include "migkit/tensor.hpp"

namespace migkit {

using Rgb = std::array<uint8_t, 3>;

// 8-bit interleaved RGB raster.
struct Image {
  int width = 0, height = 0;
  std::vector<uint8_t> pixels;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h, Rgb fill = {0, 0, 0});

  Rgb at(int r, int c) const;
  void set(int r, int c, Rgb v);
  bool operator==(const Image&) const = default;
};

void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

// Pixel-space latent: factor x factor average pooling, scaled to [-1,1].
// [3, H/factor, W/factor]
Tensor encode_latent(const Image& img, int factor = 4);
// Bilinear upsampling by factor, mapped back to 0..255.
Image decode_latent(const Tensor& latent, int factor = 4);

// One-pixel rectangle outline of a normalized box.
void draw_box(Image& img, const BBox& b, Rgb color);

// Grid of equally sized tiles, row-major, separated by a 2-pixel border.
Image contact_sheet(const std::vector<Image>& tiles, int columns, Rgb border = {255, 255, 255});

}  // namespace migkit
