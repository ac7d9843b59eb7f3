#include "capscope/steering.hpp"

#include <algorithm>
#include <cstring>

#include "capscope/error.hpp"
#include "capscope/hash.hpp"
#include "capscope/text.hpp"

namespace capscope::steer {

std::set<std::size_t> pixels_to_patches(const std::vector<Pixel>& pixels,
                                        const ImageRef& image, std::size_t grid) {
  if (grid == 0) throw ValidationError("patch grid must be positive");
  if (image.width == 0 || image.height == 0) throw ValidationError("image has zero size");
  std::set<std::size_t> out;
  for (const auto& px : pixels) {
    if (px.x >= image.width || px.y >= image.height) {
      throw ValidationError("pixel (" + std::to_string(px.x) + ", " + std::to_string(px.y) +
                            ") is outside the image");
    }
    const std::size_t row = px.y * grid / image.height;
    const std::size_t col = px.x * grid / image.width;
    out.insert(row * grid + col);
  }
  return out;
}

std::set<std::size_t> mask_to_patches(const Mask& mask, std::size_t grid,
                                      double min_overlap_frac) {
  if (grid == 0) throw ValidationError("patch grid must be positive");
  const std::size_t h = mask.height();
  const std::size_t w = mask.width();
  // First pixel coordinate of cell i along an axis of n pixels: ceil(i*n/p).
  auto start = [grid](std::size_t i, std::size_t n) { return (i * n + grid - 1) / grid; };

  std::vector<std::uint8_t> selected(grid * grid, 0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(grid); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const std::size_t y0 = start(i, h);
    const std::size_t y1 = start(i + 1, h);
    for (std::size_t j = 0; j < grid; ++j) {
      const std::size_t x0 = start(j, w);
      const std::size_t x1 = start(j + 1, w);
      const std::size_t total = (y1 - y0) * (x1 - x0);
      if (total == 0) continue;
      std::size_t set = 0;
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) set += mask.get(y, x) ? 1 : 0;
      }
      if (static_cast<double>(set) >= min_overlap_frac * static_cast<double>(total) && set > 0) {
        selected[i * grid + j] = 1;
      }
    }
  }
  std::set<std::size_t> out;
  for (std::size_t k = 0; k < selected.size(); ++k) {
    if (selected[k]) out.insert(k);
  }
  return out;
}

SteerRequest SteerRequest::from_selection(std::string image_id, std::string prompt,
                                          std::set<std::size_t> selected, double weight,
                                          std::size_t patches) {
  SteerRequest r;
  r.image_id = std::move(image_id);
  r.prompt = std::move(prompt);
  r.weight = weight;
  r.patch_weights.assign(patches, 1.0);
  for (auto p : selected) {
    if (p >= patches) throw ValidationError("patch index " + std::to_string(p) + " out of range");
    r.patch_weights[p] = weight;
  }
  r.selected_patches = std::move(selected);
  return r;
}

SteerResult steer(const SteerRequest& request, const ImageRef& image, ModelAdapter& adapter,
                  const std::set<std::string>& target_words, std::string_view default_prompt) {
  if (request.image_id != image.id) throw ValidationError("request image differs from image ref");
  const auto grid = adapter.patch_grid().per_side;
  std::vector<double> weights = request.patch_weights;
  if (weights.empty()) weights.assign(grid * grid, 1.0);
  validate_patch_weights(weights, grid * grid);

  SteerResult result;
  result.baseline_caption = adapter.generate_caption(image, std::string(default_prompt)).text;
  result.steered_caption =
      adapter.generate_caption(image, request.prompt, std::span<const double>(weights)).text;
  result.changed = result.baseline_caption != result.steered_caption;

  const auto words = text::tokenize_caption(result.steered_caption, request.prompt);
  for (const auto& t : target_words) {
    result.target_hits[t] = words.contains(text::normalize_word(t));
  }
  return result;
}

std::string weights_digest(const std::vector<double>& weights) {
  std::uint64_t h = kFnvOffset;
  for (double w : weights) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &w, sizeof(double));
    h = fnv1a_bytes(std::as_bytes(std::span(bytes)), h);
  }
  return hex64(h);
}

BatchReport steer_batch(const std::vector<ImageRef>& images, const std::string& prompt,
                        const std::set<std::string>& target_words, ModelAdapter& adapter,
                        const std::map<std::string, std::vector<double>>& per_image_weights,
                        std::string_view default_prompt) {
  if (images.empty()) throw ValidationError("batch steering needs at least one image");
  const std::size_t patches = adapter.patch_grid().per_side * adapter.patch_grid().per_side;
  BatchReport report;
  report.items.resize(images.size());
  const int threads =
      static_cast<int>(std::max<std::size_t>(1, std::min(adapter.max_concurrency(), images.size())));

#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(images.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const ImageRef& image = images[i];
    BatchItem& item = report.items[i];
    item.image_id = image.id;
    try {
      SteerRequest req;
      req.image_id = image.id;
      req.prompt = prompt;
      if (auto it = per_image_weights.find(image.id); it != per_image_weights.end()) {
        req.patch_weights = it->second;
      } else {
        req.patch_weights.assign(patches, 1.0);
      }
      item.weights_digest = weights_digest(req.patch_weights);
      item.result = steer(req, image, adapter, target_words, default_prompt);
      item.success = std::any_of(item.result->target_hits.begin(), item.result->target_hits.end(),
                                 [](const auto& kv) { return kv.second; });
    } catch (const Error& e) {
      item.result.reset();
      item.error = e.what();
    }
  }

  for (const auto& item : report.items) {
    if (!item.result) {
      ++report.failure_count;
    } else if (item.success) {
      ++report.success_count;
    }
  }
  report.success_rate = Rate{report.success_count,
                             static_cast<std::int64_t>(images.size()) - report.failure_count};
  return report;
}

nlohmann::json result_to_json(const SteerResult& r) {
  return {{"baseline", r.baseline_caption},
          {"steered", r.steered_caption},
          {"changed", r.changed},
          {"target_hits", r.target_hits}};
}

nlohmann::json report_to_json(const BatchReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& item : r.items) {
    nlohmann::json j = {{"image_id", item.image_id}, {"weights_digest", item.weights_digest}};
    if (item.result) {
      j["baseline"] = item.result->baseline_caption;
      j["steered"] = item.result->steered_caption;
      j["changed"] = item.result->changed;
      j["hits"] = item.result->target_hits;
      j["success"] = item.success;
    } else {
      j["error"] = item.error;
    }
    items.push_back(std::move(j));
  }
  return {{"items", std::move(items)},
          {"success_count", r.success_count},
          {"failure_count", r.failure_count},
          {"success_rate", r.success_rate.value()},
          {"success_rate_exact",
           {{"numerator", r.success_rate.numerator}, {"denominator", r.success_rate.denominator}}}};
}

}  // namespace capscope::steer
