#pragma once

// Serial, deliberately naive reimplementations used as oracles by the tests
// and as the baseline by the benchmarks. Nothing here is parallel or clever.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "capscope/association.hpp"
#include "capscope/corpus.hpp"
#include "capscope/grounding.hpp"
#include "capscope/mask.hpp"
#include "capscope/matrix.hpp"
#include "capscope/model_adapter.hpp"
#include "capscope/segments.hpp"

namespace capscope::ref {

// corpus
using PairCounts = std::map<std::pair<std::string, std::string>, std::int64_t>;
struct GraphCounts {
  std::map<std::string, std::int64_t> nodes;
  PairCounts edges;
};
GraphCounts cooccurrence(const std::vector<std::set<std::string>>& captions);
std::vector<std::int64_t> histogram(const std::vector<double>& scores, std::size_t bins);
std::map<std::string, double> portions(const std::vector<corpus::CaptionRecord>& captions,
                                       double lo, double hi);

// masks and segments
double iou(const Mask& a, const Mask& b);
std::vector<std::size_t> filter_dedup(const std::vector<RawMask>& masks, const ImageRef& image,
                                      double min_area_frac, double iou_thresh);

// association
MatrixD gradcam(const AttentionBundle& bundle, std::size_t layer, bool clamp);
MatrixD gradcam_head(const AttentionBundle& bundle, std::size_t layer, std::size_t head,
                     bool clamp);
MatrixD mean_attention(const AttentionBundle& bundle, std::size_t layer,
                       std::optional<std::size_t> head);
MatrixD resize(const MatrixD& grid, std::size_t width, std::size_t height);
double segment_score(const MatrixD& map, const Mask& mask);

struct DenseAssociation {
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  MatrixD values;
};
/// Grad-CAM -> stop-word columns -> resize -> masked sum / sqrt(area).
DenseAssociation association(const ImageRef& image, const corpus::CaptionRecord& caption,
                             const std::vector<segments::SegmentRecord>& segments,
                             const AttentionBundle& bundle, std::size_t layer, bool clamp);

std::map<std::string, std::int64_t> coverage(const std::vector<assoc::AssociationMatrix>& ms,
                                             std::size_t k);
std::vector<std::pair<std::string, double>> top_words(const assoc::AssociationMatrix& m,
                                                      std::size_t row, std::size_t k);

// steering
std::size_t pixel_patch(std::size_t x, std::size_t y, std::size_t width, std::size_t height,
                        std::size_t grid);
std::set<std::size_t> mask_patches(const Mask& mask, std::size_t grid, double min_overlap_frac);

// grounding
bool pointing_hit(const grounding::GroundingExample& example, const AttentionBundle& bundle,
                  grounding::Variant variant, std::size_t layer,
                  std::optional<std::size_t> head);
std::size_t argmax_scan(const std::vector<double>& values);

}  // namespace capscope::ref
