#pragma once

// Fixture builders shared by the unit and acceptance tests.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "capscope/grounding.hpp"
#include "capscope/hash.hpp"
#include "capscope/mask.hpp"
#include "capscope/model_adapter.hpp"
#include "capscope/mock_adapter.hpp"
#include "capscope/random.hpp"

namespace capscope::testing {

/// A random rectangle, ellipse or speckle pattern; can be empty.
inline Mask random_mask(Rng& rng, std::size_t height, std::size_t width) {
  Mask m(height, width);
  switch (rng.below(4)) {
    case 0: {
      const auto x = rng.below(width), y = rng.below(height);
      m.fill_rect(x, y, 1 + rng.below(width - x), 1 + rng.below(height - y));
      break;
    }
    case 1:
      m.fill_ellipse(rng.uniform(0, width), rng.uniform(0, height), rng.uniform(0.5, width / 2.0),
                     rng.uniform(0.5, height / 2.0));
      break;
    case 2: {
      const double p = rng.uniform(0.0, 0.6);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
          if (rng.uniform() < p) m.set(y, x);
      break;
    }
    default:
      break;
  }
  return m;
}

inline Mask non_empty_mask(Rng& rng, std::size_t height, std::size_t width) {
  Mask m = random_mask(rng, height, width);
  while (m.area() == 0) m = random_mask(rng, height, width);
  return m;
}

/// Random non-negative attention and signed gradients of the given shape.
inline AttentionBundle random_bundle(Rng& rng, std::size_t layers, std::size_t heads,
                                     std::size_t grid, std::vector<std::string> tokens,
                                     bool gradients = true,
                                     AttentionSource source = AttentionSource::itm) {
  const std::size_t n = layers * heads * grid * grid * tokens.size();
  std::vector<float> a(n), g;
  for (auto& v : a) v = static_cast<float>(rng.uniform());
  if (gradients) {
    g.resize(n);
    for (auto& v : g) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  return AttentionBundle(source, layers, heads, grid, std::move(tokens), std::move(a),
                         std::move(g), 0.5);
}

inline std::vector<std::string> numbered_tokens(std::size_t n) {
  static const char* words[] = {"dog", "ball", "grass", "tree", "car", "hat", "fish", "boat"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(words[i % 8]);
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    const auto stamp = mix64(reinterpret_cast<std::uintptr_t>(this) ^ ++counter ^
                             static_cast<std::uint64_t>(
                                 std::filesystem::file_time_type::clock::now()
                                     .time_since_epoch()
                                     .count()));
    path_ = std::filesystem::temp_directory_path() / ("capscope-" + tag + "-" + hex64(stamp));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

/// Grounding examples whose attention peak is planted at `layer`: the first
/// `inside` boxes cover the peak's patch cell, the remaining `outside` boxes
/// cover a cell half the grid away in x.
struct PlantedGrounding {
  MockConfig config;
  MockFixtures fixtures;
  std::vector<grounding::GroundingExample> examples;
};

inline PlantedGrounding planted_grounding(std::size_t inside, std::size_t outside,
                                          std::size_t layer, std::uint64_t seed = 1) {
  static const char* phrases[] = {"the red dog on the left", "a small boat", "man in a hat",
                                  "the tree", "two fish near rocks"};
  PlantedGrounding out;
  out.config.seed = seed;
  out.config.grid = {12, 16};
  out.config.layers = 12;
  out.config.heads = 3;
  Rng rng(seed);
  const std::size_t p = out.config.grid.per_side;
  for (std::size_t i = 0; i < inside + outside; ++i) {
    const std::string id = "g" + std::to_string(i);
    const std::size_t w = p * (4 + rng.below(12)), h = p * (4 + rng.below(12));
    out.fixtures.add_image(id, w, h);
    const std::size_t row = rng.below(p), col = rng.below(p);
    out.fixtures.planted[id] = PlantedPeak{layer, row * p + col};
    const std::size_t br = i < inside ? row : p - 1 - row;
    const std::size_t bc = i < inside ? col : (col + p / 2) % p;
    const std::size_t cw = w / p, ch = h / p;
    BoundingBox box{bc * cw, br * ch, (bc + 1) * cw, (br + 1) * ch};
    out.examples.push_back({{id, w, h, ""}, phrases[i % 5], box});
  }
  return out;
}

inline std::filesystem::path fixture_dir() { return CAPSCOPE_FIXTURE_DIR; }

}  // namespace capscope::testing
