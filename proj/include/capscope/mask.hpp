#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace capscope {

struct BoundingBox {
  std::size_t x0 = 0, y0 = 0;  // inclusive
  std::size_t x1 = 0, y1 = 0;  // exclusive
  bool empty() const noexcept { return x1 <= x0 || y1 <= y0; }
};

/// Binary h x w pixel mask, stored row-major with one byte per pixel.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t height, std::size_t width)
      : height_(height), width_(width), bits_(height * width, 0) {}
  Mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t pixel_count() const noexcept { return bits_.size(); }

  bool get(std::size_t y, std::size_t x) const noexcept {
    return bits_[y * width_ + x] != 0;
  }
  void set(std::size_t y, std::size_t x, bool v = true) noexcept {
    bits_[y * width_ + x] = v ? 1 : 0;
  }

  /// Number of set pixels.
  std::size_t area() const noexcept;
  BoundingBox bounds() const noexcept;

  void fill_rect(std::size_t x, std::size_t y, std::size_t w, std::size_t h);
  void fill_ellipse(double cx, double cy, double rx, double ry);

  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  bool operator==(const Mask&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// A segmenter output tied to the image it came from.
struct RawMask {
  std::string image_id;
  Mask bitmap;

  std::size_t area() const noexcept { return bitmap.area(); }
  bool operator==(const RawMask&) const = default;
};

}  // namespace capscope
