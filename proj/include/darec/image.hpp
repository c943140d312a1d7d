#ifndef DAREC_IMAGE_HPP_
#define DAREC_IMAGE_HPP_

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "darec/common.hpp"

namespace darec {

/// RGB image with float channels in [0,1], stored channel-major (3 x H x W).
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width)
      : height_(height), width_(width), pixels_(3 * height * width, 0.0f) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels_[(c * height_ + y) * width_ + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels_[(c * height_ + y) * width_ + x];
  }

  std::vector<float>& pixels() { return pixels_; }
  const std::vector<float>& pixels() const { return pixels_; }

  void fill(float r, float g, float b) {
    const std::size_t hw = height_ * width_;
    std::fill(pixels_.begin(), pixels_.begin() + static_cast<std::ptrdiff_t>(hw), r);
    std::fill(pixels_.begin() + static_cast<std::ptrdiff_t>(hw),
              pixels_.begin() + static_cast<std::ptrdiff_t>(2 * hw), g);
    std::fill(pixels_.begin() + static_cast<std::ptrdiff_t>(2 * hw), pixels_.end(), b);
  }

  void clamp01() {
    for (float& v : pixels_) v = std::min(1.0f, std::max(0.0f, v));
  }

  bool in_unit_interval() const {
    for (float v : pixels_)
      if (!(v >= 0.0f && v <= 1.0f)) return false;
    return true;
  }

  /// Byte-level content hash; used to detect identical operands.
  std::uint64_t content_hash() const {
    std::uint64_t h = fnv1a64(&height_, sizeof(height_));
    h = fnv1a64(&width_, sizeof(width_), h);
    return fnv1a64(pixels_.data(), pixels_.size() * sizeof(float), h);
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> pixels_;
};

inline double image_l2_distance(const Image& a, const Image& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw InvalidInputError("image_l2_distance: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.pixels().size(); ++i) {
    const double d = static_cast<double>(a.pixels()[i]) - static_cast<double>(b.pixels()[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// PNG I/O (8-bit RGB). Reads of palette/gray/alpha files are normalized to
// RGB; 16-bit depth is reduced to 8.
// ---------------------------------------------------------------------------

inline void save_png(const Image& img, const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng write failed for " + path);
  }
  png_init_io(png, fp);
  const auto w = static_cast<png_uint_32>(img.width());
  const auto h = static_cast<png_uint_32>(img.height());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(3 * img.width());
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::min(1.0f, std::max(0.0f, img.at(c, y, x)));
        row[3 * x + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Image load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open: " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8)) {
    std::fclose(fp);
    throw IoError("not a PNG file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("libpng read failed for " + path);
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != 3 * w) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("unexpected PNG layout: " + path);
  }
  Image img(h, w);
  std::vector<unsigned char> row(3 * w);
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(row[3 * x + c]) / 255.0f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// ---------------------------------------------------------------------------
// Pixel-space transforms used by the synthetic "natural" domain.
// ---------------------------------------------------------------------------

/// Bilinear sample of channel c at fractional pixel coordinates, clamped to
/// the image border.
inline float bilinear_sample(const Image& img, std::size_t c, double y, double x) {
  const double xc = std::min(std::max(x, 0.0), static_cast<double>(img.width() - 1));
  const double yc = std::min(std::max(y, 0.0), static_cast<double>(img.height() - 1));
  const std::size_t x0 = static_cast<std::size_t>(xc);
  const std::size_t y0 = static_cast<std::size_t>(yc);
  const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
  const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
  const double fx = xc - static_cast<double>(x0);
  const double fy = yc - static_cast<double>(y0);
  const double v00 = img.at(c, y0, x0), v01 = img.at(c, y0, x1);
  const double v10 = img.at(c, y1, x0), v11 = img.at(c, y1, x1);
  const double top = v00 + fx * (v01 - v00);
  const double bot = v10 + fx * (v11 - v10);
  return static_cast<float>(top + fy * (bot - top));
}

/// Crops the window [y0,y0+ch) x [x0,x0+cw) (in source pixels, fractional
/// allowed) and resizes it back to the source size with bilinear sampling.
inline Image crop_resize(const Image& img, double y0, double x0, double ch, double cw) {
  Image out(img.height(), img.width());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x) {
        const double sy = y0 + (static_cast<double>(y) + 0.5) * ch / static_cast<double>(img.height()) - 0.5;
        const double sx = x0 + (static_cast<double>(x) + 0.5) * cw / static_cast<double>(img.width()) - 0.5;
        out.at(c, y, x) = bilinear_sample(img, c, sy, sx);
      }
  return out;
}

/// 3x3 box blur blended with the original: strength 0 is the identity.
inline Image box_blur(const Image& img, double strength) {
  if (strength <= 0.0) return img;
  Image out(img.height(), img.width());
  const long h = static_cast<long>(img.height());
  const long w = static_cast<long>(img.width());
  for (std::size_t c = 0; c < 3; ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long yy = std::min(std::max(y + dy, 0l), h - 1);
            const long xx = std::min(std::max(x + dx, 0l), w - 1);
            acc += img.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          }
        const double blurred = acc / 9.0;
        const double orig = img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            static_cast<float>(orig + strength * (blurred - orig));
      }
  return out;
}

inline Image horizontal_flip(const Image& img) {
  Image out(img.height(), img.width());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x)
        out.at(c, y, x) = img.at(c, y, img.width() - 1 - x);
  return out;
}

}  // namespace darec

#endif  // DAREC_IMAGE_HPP_
