#include "capscope/model_adapter.hpp"

#include <cmath>
#include <filesystem>

#include "capscope/error.hpp"
#include "capscope/mock_adapter.hpp"
#include "capscope/store.hpp"

namespace capscope {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::validation: return "validation";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::conflict: return "conflict";
    case ErrorKind::parse: return "parse";
    case ErrorKind::io: return "io";
    case ErrorKind::data: return "data";
    case ErrorKind::adapter: return "adapter";
  }
  return "unknown";
}

void validate_image(const ImageRef& image) {
  if (image.width == 0 || image.height == 0) {
    throw ValidationError("image '" + image.id + "' has zero size");
  }
  if (!store::is_safe_component(image.id)) {
    throw ValidationError("image id '" + image.id + "' must match [A-Za-z0-9._-]+");
  }
}

std::string_view to_string(AttentionSource s) noexcept {
  return s == AttentionSource::itm ? "itm" : "lm";
}

AttentionSource parse_attention_source(std::string_view s) {
  if (s == "itm" || s == "ITM") return AttentionSource::itm;
  if (s == "lm" || s == "LM") return AttentionSource::lm;
  throw ValidationError("unknown attention source '" + std::string(s) + "'");
}

AttentionBundle::AttentionBundle(AttentionSource source, std::size_t layers,
                                 std::size_t heads, std::size_t grid,
                                 std::vector<std::string> tokens,
                                 std::vector<float> attention,
                                 std::vector<float> gradients,
                                 std::optional<double> itm_score)
    : source_(source),
      layers_(layers),
      heads_(heads),
      grid_(grid),
      tokens_(std::move(tokens)),
      attention_(std::move(attention)),
      gradients_(std::move(gradients)),
      itm_score_(itm_score) {
  const std::size_t expected = layers_ * heads_ * head_stride();
  if (attention_.size() != expected) {
    throw ValidationError("attention stack does not match L x H x p^2 x t");
  }
  if (!gradients_.empty() && gradients_.size() != expected) {
    throw ValidationError("gradient stack shape differs from attention");
  }
  if (itm_score_ && !(*itm_score_ >= 0.0 && *itm_score_ <= 1.0)) {
    throw ValidationError("itm score outside [0, 1]");
  }
}

std::size_t AttentionBundle::offset(std::size_t layer, std::size_t head) const {
  if (layer >= layers_) {
    throw ValidationError("layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(layers_) + ")");
  }
  if (head >= heads_) {
    throw ValidationError("head " + std::to_string(head) + " out of range");
  }
  return (layer * heads_ + head) * head_stride();
}

std::span<const float> AttentionBundle::attention(std::size_t layer,
                                                  std::size_t head) const {
  return {attention_.data() + offset(layer, head), head_stride()};
}

std::span<const float> AttentionBundle::gradient(std::size_t layer,
                                                 std::size_t head) const {
  if (gradients_.empty()) throw DataError("bundle carries no gradient tensors");
  return {gradients_.data() + offset(layer, head), head_stride()};
}

void validate_patch_weights(std::span<const double> weights, std::size_t patches) {
  if (weights.size() != patches) {
    throw ValidationError("patch weights have " + std::to_string(weights.size()) +
                          " entries, expected " + std::to_string(patches));
  }
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) {
      throw ValidationError("patch weights must be finite and non-negative");
    }
  }
}

bool is_identity_weights(std::span<const double> weights) noexcept {
  for (double w : weights) {
    if (w != 1.0) return false;
  }
  return true;
}

std::unique_ptr<ModelAdapter> make_adapter(const nlohmann::json& config,
                                           const std::string& base_dir) {
  const std::string name = config.value("name", std::string("mock"));
  if (name == "mock") {
    MockConfig mc = MockConfig::from_json(config);
    MockFixtures fixtures;
    if (config.contains("fixtures")) {
      std::filesystem::path dir = config["fixtures"].get<std::string>();
      if (dir.is_relative()) dir = std::filesystem::path(base_dir) / dir;
      fixtures = MockFixtures::load(dir);
    }
    return std::make_unique<MockAdapter>(mc, std::move(fixtures));
  }
  throw AdapterError("adapter '" + name +
                     "' is not available in this build (only 'mock' is linked)");
}

}  // namespace capscope
