#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "capscope/mask.hpp"
#include "capscope/model_adapter.hpp"

namespace capscope::steer {

inline constexpr std::string_view kDefaultPrompt = "a picture of";

struct Pixel {
  std::size_t x = 0;
  std::size_t y = 0;
};

/// Patch index of every pixel: floor(y / (h/p)) * p + floor(x / (w/p)),
/// evaluated in exact integer arithmetic. Throws ValidationError for pixels
/// outside the image.
std::set<std::size_t> pixels_to_patches(const std::vector<Pixel>& pixels,
                                        const ImageRef& image, std::size_t grid);

/// Patches with at least `min_overlap_frac` of their pixels set. Patch cells
/// use the same tiling as pixels_to_patches; cells with no pixels (images
/// smaller than the grid) are never selected.
std::set<std::size_t> mask_to_patches(const Mask& mask, std::size_t grid,
                                      double min_overlap_frac = 0.5);

struct SteerRequest {
  std::string image_id;
  std::string prompt{kDefaultPrompt};
  std::vector<double> patch_weights;  // p^2 entries
  std::set<std::size_t> selected_patches;
  double weight = 1.0;

  /// Weights are `weight` on the selected patches and 1 elsewhere.
  static SteerRequest from_selection(std::string image_id, std::string prompt,
                                     std::set<std::size_t> selected, double weight,
                                     std::size_t patches);
};

struct SteerResult {
  std::string baseline_caption;
  std::string steered_caption;
  bool changed = false;
  std::map<std::string, bool> target_hits;
};

/// Baseline: default prompt, identity weights. Steered: the request's prompt
/// and weights. Target hits are checked on the normalized steered words.
SteerResult steer(const SteerRequest& request, const ImageRef& image, ModelAdapter& adapter,
                  const std::set<std::string>& target_words = {},
                  std::string_view default_prompt = kDefaultPrompt);

/// Exact success ratio.
struct Rate {
  std::int64_t numerator = 0;
  std::int64_t denominator = 0;
  double value() const noexcept {
    return denominator == 0 ? 0.0
                            : static_cast<double>(numerator) / static_cast<double>(denominator);
  }
};

struct BatchItem {
  std::string image_id;
  std::optional<SteerResult> result;
  bool success = false;
  std::string error;          // adapter failure, result absent
  std::string weights_digest;  // hex digest of the weights used
};

struct BatchReport {
  std::vector<BatchItem> items;  // input order
  std::int64_t success_count = 0;
  std::int64_t failure_count = 0;  // adapter errors, excluded from the rate
  Rate success_rate;
};

/// Steers every image with `prompt` (and optional per-image weights), fanning
/// out up to the adapter's concurrency. Success = any normalized target word
/// in the steered caption.
BatchReport steer_batch(const std::vector<ImageRef>& images, const std::string& prompt,
                        const std::set<std::string>& target_words, ModelAdapter& adapter,
                        const std::map<std::string, std::vector<double>>& per_image_weights = {},
                        std::string_view default_prompt = kDefaultPrompt);

std::string weights_digest(const std::vector<double>& weights);

nlohmann::json result_to_json(const SteerResult& r);
nlohmann::json report_to_json(const BatchReport& r);

}  // namespace capscope::steer
