#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "capscope/model_adapter.hpp"

namespace capscope {

struct MockConfig {
  std::uint64_t seed = 0;
  PatchGrid grid{};
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t embedding_dim = 8;
  DecodeParams decode{};
  std::size_t max_concurrency = 8;

  static MockConfig from_json(const nlohmann::json& j);
};

struct MockImage {
  std::size_t width = 0;
  std::size_t height = 0;
  bool corrupt = false;  // every call on it fails like an undecodable file
};

/// Patch-weight rule: when every listed patch has weight >= min_weight (or
/// <= max_weight), generate_caption returns `text` instead of the base caption.
struct MockSteerRule {
  std::string image_id;
  std::optional<std::string> prompt;
  std::vector<std::size_t> patches;
  std::optional<double> min_weight;
  std::optional<double> max_weight;
  std::string text;
};

/// Forces one patch to dominate every token column of a layer, in every head
/// and both sources.
struct PlantedPeak {
  std::size_t layer = 0;
  std::size_t patch = 0;
};

struct MockFixtures {
  std::map<std::string, MockImage> images;
  std::map<std::pair<std::string, std::uint64_t>, std::string> captions;  // (id, prompt hash)
  std::vector<MockSteerRule> steering;
  std::map<std::string, std::vector<Mask>> masks;
  std::map<std::string, PlantedPeak> planted;

  void add_image(const std::string& id, std::size_t width, std::size_t height,
                 bool corrupt = false);
  void add_caption(const std::string& id, const std::string& prompt,
                   const std::string& text);
  std::optional<std::string> caption(const std::string& id,
                                     const std::string& prompt) const;

  /// Reads <dir>/fixtures.json.
  static MockFixtures load(const std::filesystem::path& dir);
  static MockFixtures from_json(const nlohmann::json& j);
};

/// Deterministic stand-in for the captioning model and segmenter. Every output
/// is a pure function of (config, fixtures, arguments); tensors come from
/// seeded streams keyed by image id and caption hash.
class MockAdapter final : public ModelAdapter {
 public:
  explicit MockAdapter(MockConfig config = {}, MockFixtures fixtures = {});

  std::string name() const override { return "mock"; }
  PatchGrid patch_grid() const override { return config_.grid; }
  std::size_t embedding_dim() const override { return config_.embedding_dim; }
  std::size_t max_concurrency() const override { return config_.max_concurrency; }

  CaptionResult generate_caption(
      const ImageRef& image, const std::string& prompt,
      std::optional<std::span<const double>> patch_weights = std::nullopt) override;
  AttentionBundle score_and_attend(const ImageRef& image, const std::string& caption,
                                   AttentionSource source,
                                   AttendOptions options = {}) override;
  std::vector<RawMask> segment_image(const ImageRef& image) override;
  std::vector<double> embed_segment(const ImageRef& image, const RawMask& mask) override;

  const MockConfig& config() const noexcept { return config_; }
  const MockFixtures& fixtures() const noexcept { return fixtures_; }

  // Access records, for tests that must prove which tensors were produced.
  std::size_t gradient_requests() const noexcept { return gradient_requests_.load(); }
  std::size_t attend_calls() const noexcept { return attend_calls_.load(); }
  std::size_t caption_calls() const noexcept { return caption_calls_.load(); }

 private:
  const MockImage& check_image(const ImageRef& image) const;
  std::string base_caption(const ImageRef& image, const std::string& prompt) const;

  MockConfig config_;
  MockFixtures fixtures_;
  std::atomic<std::size_t> gradient_requests_{0};
  std::atomic<std::size_t> attend_calls_{0};
  std::atomic<std::size_t> caption_calls_{0};
};

}  // namespace capscope
