#include "migkit/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace migkit {

Image::Image(int w, int h, Rgb fill) : width(w), height(h) {
  if (w < 1 || h < 1) throw std::invalid_argument("image extents must be positive");
  pixels.resize(static_cast<size_t>(w) * h * 3);
  for (size_t i = 0; i < pixels.size(); i += 3) std::copy(fill.begin(), fill.end(), pixels.begin() + i);
}

Rgb Image::at(int r, int c) const {
  const size_t o = (static_cast<size_t>(r) * width + c) * 3;
  return {pixels[o], pixels[o + 1], pixels[o + 2]};
}

void Image::set(int r, int c, Rgb v) {
  const size_t o = (static_cast<size_t>(r) * width + c) * 3;
  pixels[o] = v[0];
  pixels[o + 1] = v[1];
  pixels[o + 2] = v[2];
}

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

void write_png(const Image& img, const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng error while writing " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < img.height; ++r)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(r) * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  Image img;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng error while reading " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<size_t>(img.width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("unsupported PNG layout in " + path);
  }
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  for (int r = 0; r < img.height; ++r) png_read_row(png, img.pixels.data() + static_cast<size_t>(r) * img.width * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

Tensor encode_latent(const Image& img, int factor) {
  if (factor < 1 || img.width % factor != 0 || img.height % factor != 0)
    throw std::invalid_argument("image extents must be divisible by the latent factor");
  const int h = img.height / factor, w = img.width / factor;
  std::vector<double> out(static_cast<size_t>(3) * h * w, 0.0);
  const double norm = 1.0 / (factor * factor);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const Rgb px = img.at(r, c);
      for (int ch = 0; ch < 3; ++ch) out[(static_cast<size_t>(ch) * h + r / factor) * w + c / factor] += px[ch] * norm;
    }
  for (double& v : out) v = v / 255.0 * 2.0 - 1.0;
  return Tensor::from_data({3, h, w}, std::move(out));
}

Image decode_latent(const Tensor& latent, int factor) {
  if (latent.ndim() != 3 || latent.dim(0) != 3) throw ShapeError("decode_latent expects a [3,h,w] latent");
  const int H = latent.dim(1) * factor, W = latent.dim(2) * factor;
  Tensor up;
  {
    NoGradGuard ng;
    up = bilinear_interp(latent, H, W);
  }
  Image img(W, H);
  const auto d = up.data();
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      Rgb px;
      for (int ch = 0; ch < 3; ++ch) {
        const double v = (d[(static_cast<size_t>(ch) * H + r) * W + c] + 1.0) * 0.5 * 255.0;
        px[ch] = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
      img.set(r, c, px);
    }
  return img;
}

void draw_box(Image& img, const BBox& b, Rgb color) {
  const int c1 = std::clamp(static_cast<int>(std::floor(b.x1 * img.width)), 0, img.width - 1);
  const int c2 = std::clamp(static_cast<int>(std::ceil(b.x2 * img.width)) - 1, 0, img.width - 1);
  const int r1 = std::clamp(static_cast<int>(std::floor(b.y1 * img.height)), 0, img.height - 1);
  const int r2 = std::clamp(static_cast<int>(std::ceil(b.y2 * img.height)) - 1, 0, img.height - 1);
  for (int c = c1; c <= c2; ++c) {
    img.set(r1, c, color);
    img.set(r2, c, color);
  }
  for (int r = r1; r <= r2; ++r) {
    img.set(r, c1, color);
    img.set(r, c2, color);
  }
}

Image contact_sheet(const std::vector<Image>& tiles, int columns, Rgb border) {
  if (tiles.empty()) throw std::invalid_argument("contact sheet needs at least one tile");
  if (columns < 1) throw std::invalid_argument("contact sheet needs at least one column");
  const int tw = tiles[0].width, th = tiles[0].height, pad = 2;
  for (const Image& t : tiles)
    if (t.width != tw || t.height != th) throw std::invalid_argument("contact sheet tiles must share one size");
  const int cols = std::min<int>(columns, static_cast<int>(tiles.size()));
  const int rows = (static_cast<int>(tiles.size()) + cols - 1) / cols;
  Image sheet(cols * (tw + pad) + pad, rows * (th + pad) + pad, border);
  for (size_t i = 0; i < tiles.size(); ++i) {
    const int oy = pad + static_cast<int>(i) / cols * (th + pad), ox = pad + static_cast<int>(i) % cols * (tw + pad);
    for (int r = 0; r < th; ++r)
      for (int c = 0; c < tw; ++c) sheet.set(oy + r, ox + c, tiles[i].at(r, c));
  }
  return sheet;
}

}  // namespace migkit
