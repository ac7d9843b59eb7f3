#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "capscope/corpus.hpp"
#include "capscope/mask.hpp"
#include "capscope/matrix.hpp"
#include "capscope/model_adapter.hpp"
#include "capscope/segments.hpp"

namespace capscope::assoc {

/// Layer with the best grounding for the reference captioning model.
inline constexpr std::size_t kDefaultLayer = 7;
inline constexpr std::size_t kDefaultCoverageK = 3;

/// p^2 x t Grad-CAM of one layer:
///   C = mean_h A[layer][h] * g(G[layer][h]),  g = max(., 0) when clamping.
/// Throws ValidationError for a bad layer, DataError without gradients.
MatrixD compute_gradcam(const AttentionBundle& bundle, std::size_t layer,
                        bool clamp_gradients = true);
/// Single-head Grad-CAM, for per-head drilldowns.
MatrixD compute_gradcam_head(const AttentionBundle& bundle, std::size_t layer,
                             std::size_t head, bool clamp_gradients = true);
/// Cross-attention only (mean over heads, or one head). Never touches gradients.
MatrixD mean_attention(const AttentionBundle& bundle, std::size_t layer,
                       std::optional<std::size_t> head = std::nullopt);

struct WordColumns {
  MatrixD values;                  // p^2 x n
  std::vector<std::string> words;  // n normalized words, sorted
};

/// Removes prompt-prefix tokens and stop-word tokens, normalizes the rest and
/// sums columns that normalize to the same word.
WordColumns drop_stopword_columns(const MatrixD& c, std::span<const std::string> tokens,
                                  std::string_view prompt = {});

/// Column `col` of a p^2 x n matrix as a p x p grid (patch index = row * p + col).
MatrixD column_grid(const MatrixD& c, std::size_t col, std::size_t grid);

/// Corner-aligned bilinear resize of a grid to height x width (rows x cols).
/// A constant grid stays exactly constant.
MatrixD resize_map(const MatrixD& grid, std::size_t width, std::size_t height);

/// Sum of the map inside the mask over sqrt(mask area). Throws
/// ValidationError on an empty mask or a dims mismatch.
double segment_score(const MatrixD& resized_map, const Mask& mask);

enum class Scope { per_image, union_all };

/// Segment x word score table. Cells can be missing (union of matrices from
/// different images); per-image matrices are dense.
class AssociationMatrix {
 public:
  AssociationMatrix() = default;
  AssociationMatrix(Scope scope, std::vector<std::string> rows,
                    std::vector<std::string> row_images, std::vector<std::string> cols);

  Scope scope() const noexcept { return scope_; }
  const std::vector<std::string>& rows() const noexcept { return rows_; }
  const std::vector<std::string>& row_images() const noexcept { return row_images_; }
  const std::vector<std::string>& cols() const noexcept { return cols_; }
  std::size_t row_count() const noexcept { return rows_.size(); }
  std::size_t col_count() const noexcept { return cols_.size(); }

  /// The single image of a per-image matrix (empty for union or no rows).
  std::string image_id() const;

  std::optional<double> at(std::size_t r, std::size_t c) const;
  void set(std::size_t r, std::size_t c, double v);

  std::optional<std::size_t> row_index(std::string_view segment_id) const;
  std::optional<std::size_t> col_index(std::string_view word) const;

  const std::vector<double>& values() const noexcept { return values_; }
  const std::vector<std::uint8_t>& present() const noexcept { return present_; }

  bool operator==(const AssociationMatrix&) const = default;

 private:
  Scope scope_ = Scope::per_image;
  std::vector<std::string> rows_;
  std::vector<std::string> row_images_;
  std::vector<std::string> cols_;
  std::vector<double> values_;
  std::vector<std::uint8_t> present_;
};

/// Per-image M: Grad-CAM of `layer`, stop-word columns dropped, each word map
/// resized to the image and scored against every segment mask.
AssociationMatrix build_association(const ImageRef& image,
                                    const corpus::CaptionRecord& caption,
                                    std::span<const segments::SegmentRecord> segments,
                                    const AttentionBundle& bundle,
                                    std::size_t layer = kDefaultLayer,
                                    bool clamp_gradients = true);

/// M-union over rows and columns. Cells from different images stay missing.
/// Throws ValidationError on duplicate segment ids or a non-per-image input.
AssociationMatrix union_associations(std::span<const AssociationMatrix> matrices);

/// Within each per-image matrix, the top-k segments of every word column are
/// covered by that word; a segment's coverage sums over all matrices of its
/// image. Ties rank the earlier row first. Every row appears in the result.
std::map<std::string, std::int64_t> coverage(std::span<const AssociationMatrix> matrices,
                                             std::size_t k = kDefaultCoverageK);

using RankedWord = std::pair<std::string, double>;

/// Highest-scoring words of a segment, ties broken lexicographically.
/// Throws NotFoundError for an unknown segment.
std::vector<RankedWord> top_words_for_segment(std::string_view segment_id,
                                              const AssociationMatrix& matrix,
                                              std::size_t k);

/// segment id -> score for every present cell of `word`; empty when the word
/// is not a column.
std::map<std::string, double> word_attention_colors(std::string_view word,
                                                    const AssociationMatrix& matrix);

using Rgb = std::array<std::uint8_t, 3>;

/// Linear ramp: `hi` maps to red, `lo` to blue.
Rgb heat_color(double value, double lo, double hi);

/// 24-bit BMP of the map over the mask's bounding box; pixels outside the
/// mask are black. Colors span the in-mask min..max.
std::vector<std::byte> render_heatmap_bmp(const MatrixD& resized_map, const Mask& mask);

nlohmann::json index_to_json(const AssociationMatrix& m, std::size_t layer);

}  // namespace capscope::assoc
