#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "capscope/mask.hpp"

namespace capscope {

struct ImageRef {
  std::string id;
  std::size_t width = 0;
  std::size_t height = 0;
  std::string source_path;

  bool operator==(const ImageRef&) const = default;
};

/// Throws ValidationError unless width/height are positive and the id is
/// usable as a store path component.
void validate_image(const ImageRef& image);

struct DecodeParams {
  std::string strategy = "greedy";
  std::size_t max_length = 30;
  std::uint64_t seed = 0;

  bool operator==(const DecodeParams&) const = default;
};

struct CaptionResult {
  std::string text;
  std::vector<std::string> tokens;  // whitespace split; joined by ' ' == text
  std::string prompt;
  DecodeParams decode;

  bool operator==(const CaptionResult&) const = default;
};

enum class AttentionSource { itm, lm };

std::string_view to_string(AttentionSource s) noexcept;
AttentionSource parse_attention_source(std::string_view s);

/// Per-layer, per-head cross-attention and gradient stacks for one
/// image-caption pair. Each head matrix is p^2 x t, row = patch (row-major
/// over the p x p grid), column = caption token. Gradients may be absent when
/// the caller asked for attention only.
class AttentionBundle {
 public:
  AttentionBundle() = default;
  AttentionBundle(AttentionSource source, std::size_t layers,
                  std::size_t heads, std::size_t grid, std::vector<std::string> tokens,
                  std::vector<float> attention, std::vector<float> gradients,
                  std::optional<double> itm_score);

  AttentionSource source() const noexcept { return source_; }
  std::size_t layers() const noexcept { return layers_; }
  std::size_t heads() const noexcept { return heads_; }
  std::size_t grid() const noexcept { return grid_; }
  std::size_t patches() const noexcept { return grid_ * grid_; }
  std::size_t token_count() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  std::optional<double> itm_score() const noexcept { return itm_score_; }
  bool has_gradients() const noexcept { return !gradients_.empty(); }

  /// Row-major p^2 x t view of one head.
  std::span<const float> attention(std::size_t layer, std::size_t head) const;
  /// Throws DataError when the bundle carries no gradients.
  std::span<const float> gradient(std::size_t layer, std::size_t head) const;

  /// Flat [L, H, p^2, t] storage.
  const std::vector<float>& attention_data() const noexcept { return attention_; }
  const std::vector<float>& gradient_data() const noexcept { return gradients_; }

  bool operator==(const AttentionBundle&) const = default;

 private:
  std::size_t head_stride() const noexcept { return patches() * token_count(); }
  std::size_t offset(std::size_t layer, std::size_t head) const;

  AttentionSource source_ = AttentionSource::itm;
  std::size_t layers_ = 0;
  std::size_t heads_ = 0;
  std::size_t grid_ = 0;
  std::vector<std::string> tokens_;
  std::vector<float> attention_;
  std::vector<float> gradients_;
  std::optional<double> itm_score_;
};

struct AttendOptions {
  bool gradients = true;
};

struct PatchGrid {
  std::size_t per_side = 24;
  std::size_t patch_pixels = 16;
};

/// Contract every captioning/ITM/segmenter backend implements. The analytics
/// modules only ever see the values returned here.
class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual std::string name() const = 0;
  virtual PatchGrid patch_grid() const = 0;
  virtual std::size_t embedding_dim() const = 0;
  /// Maximum concurrent inferences callers may issue.
  virtual std::size_t max_concurrency() const = 0;

  /// `patch_weights`, when present, has one non-negative entry per patch.
  virtual CaptionResult generate_caption(
      const ImageRef& image, const std::string& prompt,
      std::optional<std::span<const double>> patch_weights = std::nullopt) = 0;

  virtual AttentionBundle score_and_attend(const ImageRef& image,
                                           const std::string& caption,
                                           AttentionSource source,
                                           AttendOptions options = {}) = 0;

  virtual std::vector<RawMask> segment_image(const ImageRef& image) = 0;

  virtual std::vector<double> embed_segment(const ImageRef& image,
                                            const RawMask& mask) = 0;
};

/// Shared argument checks for generate_caption implementations.
void validate_patch_weights(std::span<const double> weights,
                            std::size_t patches);
bool is_identity_weights(std::span<const double> weights) noexcept;

/// Builds an adapter from a configuration object of the form
/// {"name": "...", ...parameters}. Relative paths resolve against `base_dir`.
std::unique_ptr<ModelAdapter> make_adapter(const nlohmann::json& config,
                                           const std::string& base_dir = ".");

}  // namespace capscope
