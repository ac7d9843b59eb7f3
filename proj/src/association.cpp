#include "capscope/association.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "capscope/error.hpp"
#include "capscope/text.hpp"

namespace capscope::assoc {
namespace {

void check_layer(const AttentionBundle& bundle, std::size_t layer) {
  if (layer >= bundle.layers()) {
    throw ValidationError("layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(bundle.layers()) + ")");
  }
}

// Neumaier-compensated sum of the map over the mask's pixels inside `box`.
double masked_sum(const MatrixD& map, const Mask& mask, const BoundingBox& box) {
  double sum = 0.0;
  double comp = 0.0;
  const auto& bits = mask.bits();
  const std::size_t w = mask.width();
  for (std::size_t y = box.y0; y < box.y1; ++y) {
    const auto row = map.row(y);
    const std::uint8_t* mrow = bits.data() + y * w;
    for (std::size_t x = box.x0; x < box.x1; ++x) {
      if (!mrow[x]) continue;
      const double v = row[x];
      const double t = sum + v;
      if (std::abs(sum) >= std::abs(v)) {
        comp += (sum - t) + v;
      } else {
        comp += (v - t) + sum;
      }
      sum = t;
    }
  }
  return sum + comp;
}

}  // namespace

MatrixD compute_gradcam(const AttentionBundle& bundle, std::size_t layer,
                        bool clamp_gradients) {
  check_layer(bundle, layer);
  if (!bundle.has_gradients()) throw DataError("Grad-CAM needs gradient tensors");
  const std::size_t P = bundle.patches();
  const std::size_t T = bundle.token_count();
  const std::size_t H = bundle.heads();
  std::vector<std::span<const float>> a(H), g(H);
  for (std::size_t h = 0; h < H; ++h) {
    a[h] = bundle.attention(layer, h);
    g[h] = bundle.gradient(layer, h);
  }
  MatrixD c(P, T);
  const auto heads = static_cast<double>(H);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t rr = 0; rr < static_cast<std::ptrdiff_t>(P); ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    auto out = c.row(r);
    for (std::size_t h = 0; h < H; ++h) {
      const float* ar = a[h].data() + r * T;
      const float* gr = g[h].data() + r * T;
      for (std::size_t j = 0; j < T; ++j) {
        double grad = gr[j];
        if (clamp_gradients && grad < 0.0) grad = 0.0;
        out[j] += static_cast<double>(ar[j]) * grad;
      }
    }
    if (H != 1) {
      for (std::size_t j = 0; j < T; ++j) out[j] /= heads;
    }
  }
  return c;
}

MatrixD compute_gradcam_head(const AttentionBundle& bundle, std::size_t layer,
                             std::size_t head, bool clamp_gradients) {
  check_layer(bundle, layer);
  const auto a = bundle.attention(layer, head);
  const auto g = bundle.gradient(layer, head);
  MatrixD c(bundle.patches(), bundle.token_count());
  auto& out = c.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(out.size()); ++i) {
    double grad = g[static_cast<std::size_t>(i)];
    if (clamp_gradients && grad < 0.0) grad = 0.0;
    out[static_cast<std::size_t>(i)] = static_cast<double>(a[static_cast<std::size_t>(i)]) * grad;
  }
  return c;
}

MatrixD mean_attention(const AttentionBundle& bundle, std::size_t layer,
                       std::optional<std::size_t> head) {
  check_layer(bundle, layer);
  const std::size_t P = bundle.patches();
  const std::size_t T = bundle.token_count();
  MatrixD c(P, T);
  auto& out = c.data();
  if (head) {
    const auto a = bundle.attention(layer, *head);
    std::copy(a.begin(), a.end(), out.begin());
    return c;
  }
  const std::size_t H = bundle.heads();
  for (std::size_t h = 0; h < H; ++h) {
    const auto a = bundle.attention(layer, h);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(out.size()); ++i) {
      out[static_cast<std::size_t>(i)] += a[static_cast<std::size_t>(i)];
    }
  }
  if (H != 1) {
    for (auto& v : out) v /= static_cast<double>(H);
  }
  return c;
}

WordColumns drop_stopword_columns(const MatrixD& c, std::span<const std::string> tokens,
                                  std::string_view prompt) {
  if (tokens.size() != c.cols()) {
    throw ValidationError("token list length differs from matrix columns");
  }
  const auto prompt_words = text::lex_words(prompt);
  std::size_t skip = 0;
  if (!prompt_words.empty() && prompt_words.size() <= tokens.size() &&
      std::equal(prompt_words.begin(), prompt_words.end(), tokens.begin(),
                 [](const std::string& p, const std::string& t) {
                   const auto lexed = text::lex_words(t);
                   return lexed.size() == 1 && lexed.front() == p;
                 })) {
    skip = prompt_words.size();
  }

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t j = skip; j < tokens.size(); ++j) {
    const auto lexed = text::lex_words(tokens[j]);
    if (lexed.size() != 1) continue;  // pure punctuation or special tokens
    const auto& raw = lexed.front();
    if (text::is_stop_word(raw)) continue;
    auto word = text::normalize_word(raw);
    if (word.empty() || text::is_stop_word(word)) continue;
    groups[word].push_back(j);
  }

  WordColumns out;
  out.values = MatrixD(c.rows(), groups.size());
  std::size_t col = 0;
  for (const auto& [word, cols] : groups) {
    out.words.push_back(word);
    for (std::size_t r = 0; r < c.rows(); ++r) {
      double s = 0.0;
      for (auto j : cols) s += c(r, j);
      out.values(r, col) = s;
    }
    ++col;
  }
  return out;
}

MatrixD column_grid(const MatrixD& c, std::size_t col, std::size_t grid) {
  if (c.rows() != grid * grid) throw ValidationError("matrix rows are not p^2");
  if (col >= c.cols()) throw ValidationError("column out of range");
  MatrixD g(grid, grid);
  for (std::size_t r = 0; r < c.rows(); ++r) g.data()[r] = c(r, col);
  return g;
}

MatrixD resize_map(const MatrixD& grid, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw ValidationError("resize target must be non-empty");
  if (grid.empty()) throw ValidationError("cannot resize an empty grid");
  const std::size_t gh = grid.rows();
  const std::size_t gw = grid.cols();
  const double sy = height > 1 ? static_cast<double>(gh - 1) / static_cast<double>(height - 1) : 0.0;
  const double sx = width > 1 ? static_cast<double>(gw - 1) / static_cast<double>(width - 1) : 0.0;

  // Horizontal sample positions are shared by every output row.
  std::vector<std::size_t> x0(width), x1(width);
  std::vector<double> fx(width);
  for (std::size_t x = 0; x < width; ++x) {
    const double src = static_cast<double>(x) * sx;
    x0[x] = std::min(static_cast<std::size_t>(src), gw - 1);
    x1[x] = std::min(x0[x] + 1, gw - 1);
    fx[x] = src - static_cast<double>(x0[x]);
  }

  MatrixD out(height, width);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t yy = 0; yy < static_cast<std::ptrdiff_t>(height); ++yy) {
    const auto y = static_cast<std::size_t>(yy);
    const double src = static_cast<double>(y) * sy;
    const std::size_t y0 = std::min(static_cast<std::size_t>(src), gh - 1);
    const std::size_t y1 = std::min(y0 + 1, gh - 1);
    const double fy = src - static_cast<double>(y0);
    const auto top = grid.row(y0);
    const auto bottom = grid.row(y1);
    auto row = out.row(y);
    for (std::size_t x = 0; x < width; ++x) {
      // a + f * (b - a) is exact when a == b.
      const double t = top[x0[x]] + fx[x] * (top[x1[x]] - top[x0[x]]);
      const double b = bottom[x0[x]] + fx[x] * (bottom[x1[x]] - bottom[x0[x]]);
      row[x] = t + fy * (b - t);
    }
  }
  return out;
}

double segment_score(const MatrixD& resized_map, const Mask& mask) {
  if (resized_map.rows() != mask.height() || resized_map.cols() != mask.width()) {
    throw ValidationError("map and mask dims differ");
  }
  const std::size_t area = mask.area();
  if (area == 0) throw ValidationError("segment mask is empty");
  return masked_sum(resized_map, mask, mask.bounds()) / std::sqrt(static_cast<double>(area));
}

AssociationMatrix::AssociationMatrix(Scope scope, std::vector<std::string> rows,
                                     std::vector<std::string> row_images,
                                     std::vector<std::string> cols)
    : scope_(scope),
      rows_(std::move(rows)),
      row_images_(std::move(row_images)),
      cols_(std::move(cols)),
      values_(rows_.size() * cols_.size(), 0.0),
      present_(rows_.size() * cols_.size(), 0) {
  if (row_images_.size() != rows_.size()) {
    throw ValidationError("row image list length differs from rows");
  }
  if (scope_ == Scope::per_image && !row_images_.empty() &&
      std::any_of(row_images_.begin(), row_images_.end(),
                  [&](const std::string& s) { return s != row_images_.front(); })) {
    throw ValidationError("per-image matrix rows span several images");
  }
}

std::string AssociationMatrix::image_id() const {
  if (scope_ != Scope::per_image || row_images_.empty()) return {};
  return row_images_.front();
}

std::optional<double> AssociationMatrix::at(std::size_t r, std::size_t c) const {
  const std::size_t i = r * cols_.size() + c;
  if (!present_.at(i)) return std::nullopt;
  return values_[i];
}

void AssociationMatrix::set(std::size_t r, std::size_t c, double v) {
  const std::size_t i = r * cols_.size() + c;
  values_.at(i) = v;
  present_[i] = 1;
}

std::optional<std::size_t> AssociationMatrix::row_index(std::string_view segment_id) const {
  const auto it = std::find(rows_.begin(), rows_.end(), segment_id);
  if (it == rows_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - rows_.begin());
}

std::optional<std::size_t> AssociationMatrix::col_index(std::string_view word) const {
  const auto it = std::find(cols_.begin(), cols_.end(), word);
  if (it == cols_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - cols_.begin());
}

AssociationMatrix build_association(const ImageRef& image,
                                    const corpus::CaptionRecord& caption,
                                    std::span<const segments::SegmentRecord> segments,
                                    const AttentionBundle& bundle, std::size_t layer,
                                    bool clamp_gradients) {
  if (caption.image_id != image.id) {
    throw ValidationError("caption belongs to image '" + caption.image_id + "'");
  }
  if (text::lex_words(caption.text) != bundle.tokens()) {
    throw ValidationError("attention bundle was not scored on this caption");
  }
  for (const auto& s : segments) {
    if (s.image_id != image.id) {
      throw ValidationError("segment '" + s.segment_id + "' belongs to another image");
    }
    if (s.mask.height() != image.height || s.mask.width() != image.width) {
      throw ValidationError("segment '" + s.segment_id + "' dims differ from image");
    }
  }

  const MatrixD c = compute_gradcam(bundle, layer, clamp_gradients);
  const WordColumns cols = drop_stopword_columns(c, bundle.tokens(), caption.prompt);

  std::vector<std::string> rows, row_images;
  for (const auto& s : segments) {
    rows.push_back(s.segment_id);
    row_images.push_back(s.image_id);
  }
  AssociationMatrix m(Scope::per_image, rows, row_images, cols.words);
  if (segments.empty() || cols.words.empty()) return m;

  std::vector<BoundingBox> boxes(segments.size());
  std::vector<double> norms(segments.size());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    boxes[s] = segments[s].mask.bounds();
    const auto area = segments[s].mask.area();
    if (area == 0) throw ValidationError("segment '" + segments[s].segment_id + "' is empty");
    norms[s] = std::sqrt(static_cast<double>(area));
  }

  for (std::size_t w = 0; w < cols.words.size(); ++w) {
    const MatrixD resized =
        resize_map(column_grid(cols.values, w, bundle.grid()), image.width, image.height);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t ss = 0; ss < static_cast<std::ptrdiff_t>(segments.size()); ++ss) {
      const auto s = static_cast<std::size_t>(ss);
      m.set(s, w, masked_sum(resized, segments[s].mask, boxes[s]) / norms[s]);
    }
  }
  return m;
}

AssociationMatrix union_associations(std::span<const AssociationMatrix> matrices) {
  std::vector<std::string> rows, row_images;
  std::set<std::string> seen;
  std::set<std::string> words;
  for (const auto& m : matrices) {
    if (m.scope() != Scope::per_image) {
      throw ValidationError("union takes per-image matrices only");
    }
    for (std::size_t r = 0; r < m.row_count(); ++r) {
      if (!seen.insert(m.rows()[r]).second) {
        throw ValidationError("duplicate segment id '" + m.rows()[r] + "' in union");
      }
      rows.push_back(m.rows()[r]);
      row_images.push_back(m.row_images()[r]);
    }
    words.insert(m.cols().begin(), m.cols().end());
  }
  std::vector<std::string> cols(words.begin(), words.end());
  AssociationMatrix u(Scope::union_all, rows, row_images, cols);

  std::size_t row_offset = 0;
  for (const auto& m : matrices) {
    std::vector<std::size_t> col_map(m.col_count());
    for (std::size_t c = 0; c < m.col_count(); ++c) {
      col_map[c] = static_cast<std::size_t>(
          std::lower_bound(cols.begin(), cols.end(), m.cols()[c]) - cols.begin());
    }
    for (std::size_t r = 0; r < m.row_count(); ++r) {
      for (std::size_t c = 0; c < m.col_count(); ++c) {
        if (auto v = m.at(r, c)) u.set(row_offset + r, col_map[c], *v);
      }
    }
    row_offset += m.row_count();
  }
  return u;
}

std::map<std::string, std::int64_t> coverage(std::span<const AssociationMatrix> matrices,
                                             std::size_t k) {
  if (k == 0) throw ValidationError("coverage k must be at least 1");
  std::map<std::string, std::int64_t> out;
  std::vector<std::size_t> candidates;
  for (const auto& m : matrices) {
    for (const auto& id : m.rows()) out.try_emplace(id, 0);
    for (std::size_t c = 0; c < m.col_count(); ++c) {
      candidates.clear();
      for (std::size_t r = 0; r < m.row_count(); ++r) {
        if (m.at(r, c)) candidates.push_back(r);
      }
      const std::size_t take = std::min(k, candidates.size());
      std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                        candidates.end(), [&](std::size_t a, std::size_t b) {
                          const double va = *m.at(a, c);
                          const double vb = *m.at(b, c);
                          if (va != vb) return va > vb;
                          return a < b;
                        });
      for (std::size_t i = 0; i < take; ++i) ++out[m.rows()[candidates[i]]];
    }
  }
  return out;
}

std::vector<RankedWord> top_words_for_segment(std::string_view segment_id,
                                              const AssociationMatrix& matrix, std::size_t k) {
  const auto r = matrix.row_index(segment_id);
  if (!r) throw NotFoundError("unknown segment '" + std::string(segment_id) + "'");
  std::vector<RankedWord> words;
  for (std::size_t c = 0; c < matrix.col_count(); ++c) {
    if (auto v = matrix.at(*r, c)) words.emplace_back(matrix.cols()[c], *v);
  }
  std::sort(words.begin(), words.end(), [](const RankedWord& a, const RankedWord& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (words.size() > k) words.resize(k);
  return words;
}

std::map<std::string, double> word_attention_colors(std::string_view word,
                                                    const AssociationMatrix& matrix) {
  std::map<std::string, double> out;
  const auto c = matrix.col_index(word);
  if (!c) return out;
  for (std::size_t r = 0; r < matrix.row_count(); ++r) {
    if (auto v = matrix.at(r, *c)) out.emplace(matrix.rows()[r], *v);
  }
  return out;
}

Rgb heat_color(double value, double lo, double hi) {
  double t = hi > lo ? (value - lo) / (hi - lo) : 1.0;
  t = std::clamp(t, 0.0, 1.0);
  return {static_cast<std::uint8_t>(std::lround(255.0 * t)), 0,
          static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - t)))};
}

std::vector<std::byte> render_heatmap_bmp(const MatrixD& resized_map, const Mask& mask) {
  if (resized_map.rows() != mask.height() || resized_map.cols() != mask.width()) {
    throw ValidationError("map and mask dims differ");
  }
  BoundingBox box = mask.bounds();
  if (box.empty()) throw ValidationError("segment mask is empty");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t y = box.y0; y < box.y1; ++y) {
    for (std::size_t x = box.x0; x < box.x1; ++x) {
      if (!mask.get(y, x)) continue;
      lo = std::min(lo, resized_map(y, x));
      hi = std::max(hi, resized_map(y, x));
    }
  }
  const std::size_t w = box.x1 - box.x0;
  const std::size_t h = box.y1 - box.y0;
  const std::size_t stride = (w * 3 + 3) & ~std::size_t{3};
  const std::size_t size = 54 + stride * h;
  std::vector<std::byte> out(size, std::byte{0});
  auto put = [&](std::size_t at, std::uint32_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out[at + i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
  };
  out[0] = std::byte{'B'};
  out[1] = std::byte{'M'};
  put(2, static_cast<std::uint32_t>(size), 4);
  put(10, 54, 4);
  put(14, 40, 4);
  put(18, static_cast<std::uint32_t>(w), 4);
  put(22, static_cast<std::uint32_t>(h), 4);
  put(26, 1, 2);
  put(28, 24, 2);
  put(34, static_cast<std::uint32_t>(stride * h), 4);
  for (std::size_t y = 0; y < h; ++y) {
    // BMP rows run bottom-up, pixels are BGR.
    const std::size_t row_at = 54 + (h - 1 - y) * stride;
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask.get(box.y0 + y, box.x0 + x)) continue;
      const Rgb c = heat_color(resized_map(box.y0 + y, box.x0 + x), lo, hi);
      out[row_at + 3 * x] = static_cast<std::byte>(c[2]);
      out[row_at + 3 * x + 1] = static_cast<std::byte>(c[1]);
      out[row_at + 3 * x + 2] = static_cast<std::byte>(c[0]);
    }
  }
  return out;
}

nlohmann::json index_to_json(const AssociationMatrix& m, std::size_t layer) {
  return {{"image_id", m.image_id()}, {"rows", m.rows()}, {"cols", m.cols()}, {"layer", layer}};
}

}  // namespace capscope::assoc
