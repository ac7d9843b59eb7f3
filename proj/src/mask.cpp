#include "capscope/mask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "capscope/error.hpp"

namespace capscope {

Mask::Mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits)
    : height_(height), width_(width), bits_(std::move(bits)) {
  if (bits_.size() != height_ * width_) {
    throw ValidationError("mask bitmap size does not match dims");
  }
  for (auto& b : bits_) b = b != 0 ? 1 : 0;
}

std::size_t Mask::area() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(bits_.begin(), bits_.end(), [](std::uint8_t b) { return b != 0; }));
}

BoundingBox Mask::bounds() const noexcept {
  BoundingBox box{width_, height_, 0, 0};
  for (std::size_t y = 0; y < height_; ++y) {
    const auto* row = bits_.data() + y * width_;
    for (std::size_t x = 0; x < width_; ++x) {
      if (row[x] == 0) continue;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
    }
  }
  if (box.x1 == 0) return {};
  return box;
}

void Mask::fill_rect(std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  const std::size_t xe = std::min(width_, x + w);
  const std::size_t ye = std::min(height_, y + h);
  for (std::size_t yy = y; yy < ye; ++yy) {
    for (std::size_t xx = x; xx < xe; ++xx) set(yy, xx);
  }
}

void Mask::fill_ellipse(double cx, double cy, double rx, double ry) {
  if (rx <= 0 || ry <= 0) return;
  for (std::size_t y = 0; y < height_; ++y) {
    const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
    if (std::abs(dy) > 1.0) continue;
    for (std::size_t x = 0; x < width_; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
      if (dx * dx + dy * dy <= 1.0) set(y, x);
    }
  }
}

}  // namespace capscope
