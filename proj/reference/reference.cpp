#include "capscope_ref/reference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <variant>

#include "capscope/text.hpp"

namespace capscope::ref {

GraphCounts cooccurrence(const std::vector<std::set<std::string>>& captions) {
  GraphCounts g;
  for (const auto& words : captions) {
    const std::vector<std::string> w(words.begin(), words.end());
    for (std::size_t i = 0; i < w.size(); ++i) {
      g.nodes[w[i]] += 1;
      for (std::size_t j = i + 1; j < w.size(); ++j) g.edges[{w[i], w[j]}] += 1;
    }
  }
  return g;
}

std::vector<std::int64_t> histogram(const std::vector<double>& scores, std::size_t bins) {
  std::vector<std::int64_t> counts(bins, 0);
  for (double s : scores) {
    // Largest bin whose lower edge i/bins is <= s.
    std::size_t b = 0;
    for (std::size_t i = 0; i < bins; ++i) {
      if (static_cast<double>(i) / static_cast<double>(bins) <= s) b = i;
    }
    counts[b] += 1;
  }
  return counts;
}

std::map<std::string, double> portions(const std::vector<corpus::CaptionRecord>& captions,
                                       double lo, double hi) {
  std::map<std::string, std::pair<int, int>> counts;
  for (const auto& c : captions) {
    for (const auto& w : c.normalized_words) {
      counts[w].second += 1;
      if (c.itm_score >= lo && c.itm_score <= hi) counts[w].first += 1;
    }
  }
  std::map<std::string, double> out;
  for (const auto& [w, c] : counts) out[w] = static_cast<double>(c.first) / c.second;
  return out;
}

double iou(const Mask& a, const Mask& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t y = 0; y < a.height(); ++y) {
    for (std::size_t x = 0; x < a.width(); ++x) {
      const bool pa = a.get(y, x), pb = b.get(y, x);
      inter += (pa && pb) ? 1 : 0;
      uni += (pa || pb) ? 1 : 0;
    }
  }
  if (uni == 0) throw std::invalid_argument("both masks empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::size_t> filter_dedup(const std::vector<RawMask>& masks, const ImageRef& image,
                                      double min_area_frac, double iou_thresh) {
  const double min_area =
      min_area_frac * static_cast<double>(image.width) * static_cast<double>(image.height);
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto a = masks[i].area();
    if (a > 0 && static_cast<double>(a) >= min_area) cand.push_back(i);
  }
  // Selection order: larger area first, then lower index.
  std::vector<std::size_t> order;
  std::vector<bool> used(cand.size(), false);
  for (std::size_t n = 0; n < cand.size(); ++n) {
    std::size_t best = cand.size();
    for (std::size_t c = 0; c < cand.size(); ++c) {
      if (used[c]) continue;
      if (best == cand.size() || masks[cand[c]].area() > masks[cand[best]].area()) best = c;
    }
    used[best] = true;
    order.push_back(cand[best]);
  }
  std::vector<std::size_t> kept;
  for (auto i : order) {
    bool dup = false;
    for (auto k : kept) {
      if (iou(masks[i].bitmap, masks[k].bitmap) > iou_thresh) dup = true;
    }
    if (!dup) kept.push_back(i);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

MatrixD gradcam(const AttentionBundle& bundle, std::size_t layer, bool clamp) {
  MatrixD c(bundle.patches(), bundle.token_count());
  for (std::size_t r = 0; r < c.rows(); ++r) {
    for (std::size_t j = 0; j < c.cols(); ++j) {
      double s = 0.0;
      for (std::size_t h = 0; h < bundle.heads(); ++h) {
        const double a = bundle.attention(layer, h)[r * c.cols() + j];
        double g = bundle.gradient(layer, h)[r * c.cols() + j];
        if (clamp) g = std::max(g, 0.0);
        s += a * g;
      }
      c(r, j) = s / static_cast<double>(bundle.heads());
    }
  }
  return c;
}

MatrixD gradcam_head(const AttentionBundle& bundle, std::size_t layer, std::size_t head,
                     bool clamp) {
  MatrixD c(bundle.patches(), bundle.token_count());
  const auto a = bundle.attention(layer, head);
  const auto g = bundle.gradient(layer, head);
  for (std::size_t i = 0; i < c.size(); ++i) {
    c.data()[i] = a[i] * (clamp ? std::max<double>(g[i], 0.0) : g[i]);
  }
  return c;
}

MatrixD mean_attention(const AttentionBundle& bundle, std::size_t layer,
                       std::optional<std::size_t> head) {
  MatrixD c(bundle.patches(), bundle.token_count());
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (head) {
      c.data()[i] = bundle.attention(layer, *head)[i];
      continue;
    }
    double s = 0.0;
    for (std::size_t h = 0; h < bundle.heads(); ++h) s += bundle.attention(layer, h)[i];
    c.data()[i] = s / static_cast<double>(bundle.heads());
  }
  return c;
}

MatrixD resize(const MatrixD& grid, std::size_t width, std::size_t height) {
  MatrixD out(height, width);
  const std::size_t gh = grid.rows(), gw = grid.cols();
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      // Corner-aligned: output corners land exactly on grid corners.
      const double sy = height == 1 ? 0.0 : static_cast<double>(y) * (gh - 1) / (height - 1.0);
      const double sx = width == 1 ? 0.0 : static_cast<double>(x) * (gw - 1) / (width - 1.0);
      const auto y0 = std::min<std::size_t>(static_cast<std::size_t>(std::floor(sy)), gh - 1);
      const auto x0 = std::min<std::size_t>(static_cast<std::size_t>(std::floor(sx)), gw - 1);
      const auto y1 = std::min(y0 + 1, gh - 1);
      const auto x1 = std::min(x0 + 1, gw - 1);
      const double fy = sy - y0, fx = sx - x0;
      out(y, x) = (1 - fy) * (1 - fx) * grid(y0, x0) + (1 - fy) * fx * grid(y0, x1) +
                  fy * (1 - fx) * grid(y1, x0) + fy * fx * grid(y1, x1);
    }
  }
  return out;
}

double segment_score(const MatrixD& map, const Mask& mask) {
  double s = 0.0;
  std::size_t area = 0;
  for (std::size_t y = 0; y < mask.height(); ++y) {
    for (std::size_t x = 0; x < mask.width(); ++x) {
      if (mask.get(y, x)) {
        s += map(y, x);
        ++area;
      }
    }
  }
  if (area == 0) throw std::invalid_argument("empty mask");
  return s / std::sqrt(static_cast<double>(area));
}

namespace {

// word -> summed column over the p^2 patches, stop words and prompt removed.
std::map<std::string, std::vector<double>> word_columns(const MatrixD& c,
                                                        const std::vector<std::string>& tokens,
                                                        const std::string& prompt) {
  const auto pw = text::lex_words(prompt);
  std::size_t start = 0;
  if (!pw.empty() && pw.size() <= tokens.size()) {
    bool match = true;
    for (std::size_t i = 0; i < pw.size(); ++i) {
      if (text::lex_words(tokens[i]) != std::vector<std::string>{pw[i]}) match = false;
    }
    if (match) start = pw.size();
  }
  std::map<std::string, std::vector<double>> out;
  for (std::size_t j = start; j < tokens.size(); ++j) {
    const auto lw = text::lex_words(tokens[j]);
    if (lw.size() != 1 || text::is_stop_word(lw[0])) continue;
    const auto w = text::normalize_word(lw[0]);
    if (w.empty() || text::is_stop_word(w)) continue;
    auto& col = out[w];
    col.resize(c.rows(), 0.0);
    for (std::size_t r = 0; r < c.rows(); ++r) col[r] += c(r, j);
  }
  return out;
}

MatrixD as_grid(const std::vector<double>& col, std::size_t p) {
  MatrixD g(p, p);
  for (std::size_t i = 0; i < col.size(); ++i) g(i / p, i % p) = col[i];
  return g;
}

}  // namespace

DenseAssociation association(const ImageRef& image, const corpus::CaptionRecord& caption,
                             const std::vector<segments::SegmentRecord>& segments,
                             const AttentionBundle& bundle, std::size_t layer, bool clamp) {
  const MatrixD c = gradcam(bundle, layer, clamp);
  const auto cols = word_columns(c, bundle.tokens(), caption.prompt);
  DenseAssociation out;
  for (const auto& s : segments) out.rows.push_back(s.segment_id);
  for (const auto& [w, col] : cols) out.cols.push_back(w);
  out.values = MatrixD(segments.size(), cols.size());
  std::size_t j = 0;
  for (const auto& [w, col] : cols) {
    const MatrixD map = resize(as_grid(col, bundle.grid()), image.width, image.height);
    for (std::size_t i = 0; i < segments.size(); ++i) {
      out.values(i, j) = segment_score(map, segments[i].mask);
    }
    ++j;
  }
  return out;
}

std::map<std::string, std::int64_t> coverage(const std::vector<assoc::AssociationMatrix>& ms,
                                             std::size_t k) {
  std::map<std::string, std::int64_t> out;
  for (const auto& m : ms) {
    for (std::size_t r = 0; r < m.row_count(); ++r) out[m.rows()[r]] += 0;
    for (std::size_t c = 0; c < m.col_count(); ++c) {
      std::vector<std::pair<double, std::size_t>> col;
      for (std::size_t r = 0; r < m.row_count(); ++r) {
        if (auto v = m.at(r, c)) col.push_back({*v, r});
      }
      std::sort(col.begin(), col.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      for (std::size_t i = 0; i < std::min(k, col.size()); ++i) out[m.rows()[col[i].second]] += 1;
    }
  }
  return out;
}

std::vector<std::pair<std::string, double>> top_words(const assoc::AssociationMatrix& m,
                                                      std::size_t row, std::size_t k) {
  std::vector<std::pair<std::string, double>> all;
  for (std::size_t c = 0; c < m.col_count(); ++c) {
    if (auto v = m.at(row, c)) all.push_back({m.cols()[c], *v});
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

std::size_t pixel_patch(std::size_t x, std::size_t y, std::size_t width, std::size_t height,
                        std::size_t grid) {
  // Cell i along an axis of n pixels covers [i*n/p, (i+1)*n/p); find it by
  // scanning instead of dividing.
  std::size_t row = 0, col = 0;
  while ((row + 1) * height <= y * grid) ++row;
  while ((col + 1) * width <= x * grid) ++col;
  return row * grid + col;
}

std::set<std::size_t> mask_patches(const Mask& mask, std::size_t grid, double min_overlap_frac) {
  std::vector<std::size_t> set(grid * grid, 0), total(grid * grid, 0);
  for (std::size_t y = 0; y < mask.height(); ++y) {
    for (std::size_t x = 0; x < mask.width(); ++x) {
      const auto p = pixel_patch(x, y, mask.width(), mask.height(), grid);
      total[p] += 1;
      set[p] += mask.get(y, x) ? 1 : 0;
    }
  }
  std::set<std::size_t> out;
  for (std::size_t p = 0; p < set.size(); ++p) {
    if (total[p] > 0 && set[p] > 0 &&
        static_cast<double>(set[p]) >= min_overlap_frac * static_cast<double>(total[p])) {
      out.insert(p);
    }
  }
  return out;
}

std::size_t argmax_scan(const std::vector<double>& values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

bool pointing_hit(const grounding::GroundingExample& example, const AttentionBundle& bundle,
                  grounding::Variant variant, std::size_t layer,
                  std::optional<std::size_t> head) {
  MatrixD c;
  if (grounding::uses_gradients(variant)) {
    c = head ? gradcam_head(bundle, layer, *head, true) : gradcam(bundle, layer, true);
  } else {
    c = mean_attention(bundle, layer, head);
  }
  const auto cols = word_columns(c, bundle.tokens(), "");
  std::vector<double> summed(c.rows(), 0.0);
  if (cols.empty()) {
    for (std::size_t r = 0; r < c.rows(); ++r) {
      for (std::size_t j = 0; j < c.cols(); ++j) summed[r] += c(r, j);
    }
  } else {
    for (const auto& [w, col] : cols) {
      for (std::size_t r = 0; r < c.rows(); ++r) summed[r] += col[r];
    }
  }
  const MatrixD map = resize(as_grid(summed, bundle.grid()), example.image.width,
                             example.image.height);
  const std::size_t i = argmax_scan(map.data());
  const std::size_t x = i % map.cols(), y = i / map.cols();
  if (const auto* box = std::get_if<BoundingBox>(&example.region)) {
    return x >= box->x0 && x < box->x1 && y >= box->y0 && y < box->y1;
  }
  return std::get<Mask>(example.region).get(y, x);
}

}  // namespace capscope::ref
