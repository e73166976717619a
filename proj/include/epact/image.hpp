#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace epact {

using Rgb = std::array<std::uint8_t, 3>;

/// Interleaved 8-bit RGB image, row-major, H x W x 3.
struct ImageRGB {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  ImageRGB() = default;
  ImageRGB(int w, int h, Rgb fill = {0, 0, 0});

  std::uint8_t* px(int x, int y) { return data.data() + (std::size_t(y) * width + x) * 3; }
  const std::uint8_t* px(int x, int y) const { return data.data() + (std::size_t(y) * width + x) * 3; }
  Rgb at(int x, int y) const {
    const auto* p = px(x, y);
    return {p[0], p[1], p[2]};
  }
  bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  void set(int x, int y, Rgb c) {
    if (!inside(x, y)) return;
    auto* p = px(x, y);
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
  bool operator==(const ImageRGB&) const = default;
};

// Raster primitives. Coordinates are continuous pixel coordinates with pixel
// (x, y) covering [x, x+1) x [y, y+1); a pixel is painted when its center
// lies inside the shape.
void fill_disc(ImageRGB& img, double cx, double cy, double radius, Rgb color);
void fill_ellipse(ImageRGB& img, double cx, double cy, double a, double b, double angle, Rgb color);
void draw_thick_line(ImageRGB& img, double x0, double y0, double x1, double y1, double width, Rgb color);
/// One-pixel Bresenham line between pixel centers.
void draw_line(ImageRGB& img, int x0, int y0, int x1, int y1, Rgb color);

std::vector<std::uint8_t> encode_png(const ImageRGB& img);
ImageRGB decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const ImageRGB& img, const std::filesystem::path& path);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

}  // namespace epact
