#include "capscope/segments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "capscope/error.hpp"
#include "capscope/random.hpp"

namespace capscope::segments {
namespace {

struct MaskStats {
  std::size_t area = 0;
  BoundingBox box;
};

MaskStats stats_of(const Mask& m) { return {m.area(), m.bounds()}; }

std::size_t intersection_in_box(const Mask& a, const MaskStats& sa, const Mask& b,
                                const MaskStats& sb) {
  const std::size_t x0 = std::max(sa.box.x0, sb.box.x0);
  const std::size_t y0 = std::max(sa.box.y0, sb.box.y0);
  const std::size_t x1 = std::min(sa.box.x1, sb.box.x1);
  const std::size_t y1 = std::min(sa.box.y1, sb.box.y1);
  if (x1 <= x0 || y1 <= y0) return 0;
  const std::size_t w = a.width();
  const auto& ab = a.bits();
  const auto& bb = b.bits();
  std::size_t inter = 0;
  for (std::size_t y = y0; y < y1; ++y) {
    const std::uint8_t* ra = ab.data() + y * w;
    const std::uint8_t* rb = bb.data() + y * w;
    for (std::size_t x = x0; x < x1; ++x) inter += ra[x] & rb[x];
  }
  return inter;
}

double iou_from_stats(const Mask& a, const MaskStats& sa, const Mask& b,
                      const MaskStats& sb) {
  const std::size_t inter = intersection_in_box(a, sa, b, sb);
  const std::size_t uni = sa.area + sb.area - inter;
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

void check_same_dims(const Mask& a, const Mask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ValidationError("mask dims differ");
  }
}

std::size_t check_points(std::span<const std::vector<double>> points) {
  if (points.empty()) throw ValidationError("projection needs at least one point");
  const std::size_t d = points.front().size();
  if (d == 0) throw ValidationError("embeddings must have positive dimension");
  for (const auto& p : points) {
    if (p.size() != d) throw ValidationError("embeddings have inconsistent dimensions");
    for (double v : p) {
      if (!std::isfinite(v)) throw ValidationError("embedding has non-finite value");
    }
  }
  return d;
}

}  // namespace

std::string segment_id(const std::string& image_id, std::size_t index) {
  return image_id + "_s" + std::to_string(index);
}

double mask_iou(const Mask& a, const Mask& b) {
  check_same_dims(a, b);
  const MaskStats sa = stats_of(a);
  const MaskStats sb = stats_of(b);
  if (sa.area == 0 && sb.area == 0) {
    throw ValidationError("IoU of two empty masks is undefined");
  }
  return iou_from_stats(a, sa, b, sb);
}

double mask_iou(const RawMask& a, const RawMask& b) { return mask_iou(a.bitmap, b.bitmap); }

std::vector<std::size_t> filter_segment_indices(std::span<const RawMask> masks,
                                                const ImageRef& image,
                                                FilterParams params) {
  if (!(params.min_area_frac >= 0.0) || !(params.iou_thresh >= 0.0)) {
    throw ValidationError("filter thresholds must be non-negative");
  }
  for (const auto& m : masks) {
    if (m.bitmap.height() != image.height || m.bitmap.width() != image.width) {
      throw ValidationError("mask dims differ from image '" + image.id + "'");
    }
  }
  const std::size_t n = masks.size();
  std::vector<MaskStats> stats(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    stats[static_cast<std::size_t>(i)] = stats_of(masks[static_cast<std::size_t>(i)].bitmap);
  }

  const double min_area = params.min_area_frac * static_cast<double>(image.width) *
                          static_cast<double>(image.height);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    if (stats[i].area > 0 && static_cast<double>(stats[i].area) >= min_area) {
      order.push_back(i);
    }
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return stats[a].area > stats[b].area;
  });

  // Upper-triangular IoU table over the survivors, in visiting order.
  const std::size_t m = order.size();
  std::vector<double> iou(m * m, 0.0);
  const auto pairs = static_cast<std::ptrdiff_t>(m * m);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t k = 0; k < pairs; ++k) {
    const auto i = static_cast<std::size_t>(k) / m;
    const auto j = static_cast<std::size_t>(k) % m;
    if (j <= i) continue;
    const auto a = order[i];
    const auto b = order[j];
    iou[k] = iou_from_stats(masks[a].bitmap, stats[a], masks[b].bitmap, stats[b]);
  }

  std::vector<std::size_t> kept_pos;
  for (std::size_t j = 0; j < m; ++j) {
    const bool duplicate = std::any_of(kept_pos.begin(), kept_pos.end(), [&](std::size_t i) {
      return iou[i * m + j] > params.iou_thresh;
    });
    if (!duplicate) kept_pos.push_back(j);
  }
  std::vector<std::size_t> kept;
  for (auto pos : kept_pos) kept.push_back(order[pos]);
  std::sort(kept.begin(), kept.end());
  return kept;
}

std::vector<RawMask> filter_segments(std::span<const RawMask> masks, const ImageRef& image,
                                     FilterParams params) {
  std::vector<RawMask> out;
  for (auto i : filter_segment_indices(masks, image, params)) out.push_back(masks[i]);
  return out;
}

std::vector<Point2> TsneProjector::project(std::span<const std::vector<double>> points,
                                           std::uint64_t seed) const {
  const std::size_t d = check_points(points);
  const std::size_t n = points.size();
  if (n == 1) return {Point2{0.0, 0.0}};
  const auto ni = static_cast<std::ptrdiff_t>(n);

  std::vector<double> dist(n * n, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < ni; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = points[static_cast<std::size_t>(i)][k] - points[j][k];
        s += diff * diff;
      }
      dist[static_cast<std::size_t>(i) * n + j] = s;
    }
  }

  // Conditional affinities with a per-point bandwidth matching the perplexity.
  const double perplexity =
      std::max(1.0, std::min(params_.perplexity, static_cast<double>(n - 1) / 3.0));
  const double target_entropy = std::log(perplexity);
  std::vector<double> cond(n * n, 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < ni; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double beta = 1.0;
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    double* row = cond.data() + i * n;
    for (int iter = 0; iter < 200; ++iter) {
      double min_d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) min_d = std::min(min_d, dist[i * n + j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = j == i ? 0.0 : std::exp(-beta * (dist[i * n + j] - min_d));
        sum += row[j];
      }
      double entropy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] /= sum;
        if (row[j] > 1e-300) entropy -= row[j] * std::log(row[j]);
      }
      const double diff = entropy - target_entropy;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
  }
  std::vector<double> p(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      p[i * n + j] = std::max((cond[i * n + j] + cond[j * n + i]) / (2.0 * static_cast<double>(n)),
                              1e-12);
    }
  }

  Rng rng(seed);
  std::vector<double> y(2 * n), update(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n);
  for (auto& v : y) v = 1e-4 * rng.normal();

  std::vector<double> num(n * n), row_sum(n);
  for (std::size_t iter = 0; iter < params_.iterations; ++iter) {
    const double exaggeration =
        iter < params_.exaggeration_iterations ? params_.exaggeration : 1.0;
    const double momentum = iter < params_.exaggeration_iterations ? 0.5 : 0.8;

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < ni; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          num[i * n + j] = 0.0;
          continue;
        }
        const double dx = y[2 * i] - y[2 * j];
        const double dy = y[2 * i + 1] - y[2 * j + 1];
        num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
        s += num[i * n + j];
      }
      row_sum[i] = s;
    }
    // Serial reduction keeps the result independent of the thread count.
    double z = 0.0;
    for (double s : row_sum) z += s;

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < ni; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = num[i * n + j] / z;
        const double mult = (exaggeration * p[i * n + j] - q) * num[i * n + j];
        gx += mult * (y[2 * i] - y[2 * j]);
        gy += mult * (y[2 * i + 1] - y[2 * j + 1]);
      }
      grad[2 * i] = 4.0 * gx;
      grad[2 * i + 1] = 4.0 * gy;
    }

    for (std::size_t k = 0; k < 2 * n; ++k) {
      const bool same_sign = (grad[k] > 0) == (update[k] > 0);
      gains[k] = same_sign ? std::max(gains[k] * 0.8, 0.01) : gains[k] + 0.2;
      update[k] = momentum * update[k] - params_.learning_rate * gains[k] * grad[k];
      y[k] += update[k];
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
  }

  std::vector<Point2> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {y[2 * i], y[2 * i + 1]};
  return out;
}

std::vector<Point2> PcaProjector::project(std::span<const std::vector<double>> points,
                                          std::uint64_t seed) const {
  const std::size_t d = check_points(points);
  const std::size_t n = points.size();
  std::vector<double> mean(d, 0.0);
  for (const auto& p : points) {
    for (std::size_t k = 0; k < d; ++k) mean[k] += p[k] / static_cast<double>(n);
  }
  std::vector<double> cov(d * d, 0.0);
  for (const auto& p : points) {
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        cov[a * d + b] += (p[a] - mean[a]) * (p[b] - mean[b]);
      }
    }
  }

  Rng rng(seed);
  std::vector<std::vector<double>> axes;
  for (int component = 0; component < 2 && component < static_cast<int>(d); ++component) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    double lambda = 0.0;
    for (int iter = 0; iter < 500; ++iter) {
      std::vector<double> next(d, 0.0);
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = 0; b < d; ++b) next[a] += cov[a * d + b] * v[b];
      }
      double norm = 0.0;
      for (double x : next) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-300) break;
      for (auto& x : next) x /= norm;
      v = std::move(next);
      lambda = norm;
    }
    // Sign convention: largest-magnitude component positive.
    const auto big = std::max_element(v.begin(), v.end(), [](double a, double b) {
      return std::abs(a) < std::abs(b);
    });
    if (*big < 0) {
      for (auto& x : v) x = -x;
    }
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= lambda * v[a] * v[b];
    }
    axes.push_back(std::move(v));
  }

  std::vector<Point2> out(n, Point2{0.0, 0.0});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < axes.size(); ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += (points[i][k] - mean[k]) * axes[c][k];
      out[i][c] = s;
    }
  }
  return out;
}

std::unique_ptr<Projector> make_projector(const std::string& name) {
  if (name == "tsne") return std::make_unique<TsneProjector>();
  if (name == "pca") return std::make_unique<PcaProjector>();
  throw ValidationError("unknown projector '" + name + "'");
}

std::vector<Point2> project_embeddings(std::span<const std::vector<double>> embeddings,
                                       std::uint64_t seed, const Projector* projector) {
  check_points(embeddings);
  if (projector) return projector->project(embeddings, seed);
  return TsneProjector{}.project(embeddings, seed);
}

}  // namespace capscope::segments
