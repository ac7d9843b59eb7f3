#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capscope/mask.hpp"
#include "capscope/model_adapter.hpp"

namespace capscope::segments {

struct SegmentRecord {
  std::string segment_id;
  std::string image_id;
  Mask mask;
  double area_fraction = 0.0;
  std::vector<double> embedding;
  std::array<double, 2> xy{0.0, 0.0};
  std::int64_t coverage = 0;
};

/// "<image_id>_s<index>"
std::string segment_id(const std::string& image_id, std::size_t index);

/// |a & b| / |a | b|. Throws ValidationError on a dims mismatch or when both
/// masks are empty.
double mask_iou(const Mask& a, const Mask& b);
double mask_iou(const RawMask& a, const RawMask& b);

struct FilterParams {
  double min_area_frac = 0.01;
  double iou_thresh = 0.85;
};

/// Drops masks smaller than min_area_frac * w * h, then deduplicates: masks
/// are visited by descending area (ties by input index) and a mask is kept
/// unless its IoU with an already kept mask exceeds iou_thresh. Survivors
/// keep their input order. Pairwise IoUs are computed in parallel.
std::vector<RawMask> filter_segments(std::span<const RawMask> masks,
                                     const ImageRef& image,
                                     FilterParams params = {});

/// Indices into `masks` of the retained masks, ascending.
std::vector<std::size_t> filter_segment_indices(std::span<const RawMask> masks,
                                                const ImageRef& image,
                                                FilterParams params = {});

using Point2 = std::array<double, 2>;

/// Dimensionality reduction to 2D; implementations must be deterministic for a
/// fixed seed.
class Projector {
 public:
  virtual ~Projector() = default;
  virtual std::string name() const = 0;
  virtual std::vector<Point2> project(std::span<const std::vector<double>> points,
                                      std::uint64_t seed) const = 0;
};

struct TsneParams {
  double perplexity = 30.0;
  std::size_t iterations = 750;
  std::size_t exaggeration_iterations = 250;
  double exaggeration = 12.0;
  double learning_rate = 200.0;
};

/// Exact (O(n^2)) t-SNE. Perplexity is clamped to (n - 1) / 3 for small n.
class TsneProjector final : public Projector {
 public:
  explicit TsneProjector(TsneParams params = {}) : params_(params) {}
  std::string name() const override { return "tsne"; }
  std::vector<Point2> project(std::span<const std::vector<double>> points,
                              std::uint64_t seed) const override;

 private:
  TsneParams params_;
};

/// Projection onto the top two principal axes (power iteration).
class PcaProjector final : public Projector {
 public:
  std::string name() const override { return "pca"; }
  std::vector<Point2> project(std::span<const std::vector<double>> points,
                              std::uint64_t seed) const override;
};

std::unique_ptr<Projector> make_projector(const std::string& name);

/// Validates the input and delegates to `projector` (t-SNE by default).
std::vector<Point2> project_embeddings(std::span<const std::vector<double>> embeddings,
                                       std::uint64_t seed,
                                       const Projector* projector = nullptr);

}  // namespace capscope::segments
