#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "capscope/mask.hpp"
#include "capscope/matrix.hpp"
#include "capscope/model_adapter.hpp"

namespace capscope::grounding {

enum class Variant { itm_gradcam, itm_ca, lm_gradcam, lm_ca };

inline constexpr Variant kAllVariants[] = {Variant::itm_gradcam, Variant::itm_ca,
                                           Variant::lm_gradcam, Variant::lm_ca};

std::string_view to_string(Variant v) noexcept;
/// Accepts "ITM_GradCAM", "itm_gradcam", "itm-gradcam" and the like.
Variant parse_variant(std::string_view s);
AttentionSource source_of(Variant v) noexcept;
bool uses_gradients(Variant v) noexcept;

using Region = std::variant<BoundingBox, Mask>;

struct GroundingExample {
  ImageRef image;
  std::string referring_text;
  Region region;
};

/// Throws ValidationError for empty text, an empty region or one that does
/// not fit the image.
void validate_example(const GroundingExample& example);

bool region_contains(const Region& region, std::size_t x, std::size_t y);

/// p^2-cell map for one layer: the per-word maps (stop words removed) are
/// summed; when every token is a stop word all tokens are used. Heads are
/// averaged unless `head` is given. Gradients are only read by the Grad-CAM
/// variants.
MatrixD association_grid(const AttentionBundle& bundle, Variant variant, std::size_t layer,
                         std::optional<std::size_t> head = std::nullopt);

struct Pixel {
  std::size_t x = 0;
  std::size_t y = 0;
  bool operator==(const Pixel&) const = default;
};

/// Argmax of a height x width map; ties go to the lowest (y, x).
Pixel argmax_pixel(const MatrixD& map);

/// Pointing game on an already computed bundle.
bool hit_from_bundle(const GroundingExample& example, const AttentionBundle& bundle,
                     Variant variant, std::size_t layer,
                     std::optional<std::size_t> head = std::nullopt);

bool ground_one(const GroundingExample& example, Variant variant, std::size_t layer,
                std::optional<std::size_t> head, ModelAdapter& adapter);

struct GroundingReport {
  Variant variant = Variant::itm_gradcam;
  std::size_t example_count = 0;
  std::vector<std::int64_t> per_layer_hits;
  std::vector<double> per_layer_accuracy;
  std::optional<std::size_t> head_layer;  // layer of the per-head drilldown
  std::vector<std::int64_t> per_head_hits;
  std::vector<double> per_head_accuracy;
};

struct EvaluateOptions {
  std::optional<std::size_t> head_layer;
};

/// Accuracy of every layer, hits / |dataset|. Examples run in parallel up to
/// the adapter's concurrency, one adapter call each.
GroundingReport evaluate(std::span<const GroundingExample> dataset, Variant variant,
                         ModelAdapter& adapter, EvaluateOptions options = {});

/// Argmax over per-layer accuracy, ties to the lowest index.
std::size_t best_layer(const GroundingReport& report);

nlohmann::json report_to_json(const GroundingReport& report);
/// Tab-separated table with one row per (variant, layer).
std::string reports_to_table(std::span<const GroundingReport> reports);

/// Annotated examples: [{"image", "width", "height", "path"?, "text",
/// "box": [x, y, w, h] | "mask": {"size", "counts"}}], or {"examples": [...]}.
std::vector<GroundingExample> examples_from_json(const nlohmann::json& j);
std::vector<GroundingExample> load_examples(const std::filesystem::path& path);
nlohmann::json example_to_json(const GroundingExample& example);

}  // namespace capscope::grounding
