#include "capscope/grounding.hpp"

#include <algorithm>
#include <cctype>
#include <exception>
#include <fstream>
#include <sstream>

#include "capscope/association.hpp"
#include "capscope/error.hpp"
#include "capscope/rle.hpp"

namespace capscope::grounding {

std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::itm_gradcam: return "ITM_GradCAM";
    case Variant::itm_ca: return "ITM_CA";
    case Variant::lm_gradcam: return "LM_GradCAM";
    case Variant::lm_ca: return "LM_CA";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  std::string key;
  for (char c : s) {
    if (c == '-' || c == '_') continue;
    key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  if (key == "itmgradcam") return Variant::itm_gradcam;
  if (key == "itmca") return Variant::itm_ca;
  if (key == "lmgradcam") return Variant::lm_gradcam;
  if (key == "lmca") return Variant::lm_ca;
  throw ValidationError("unknown grounding variant '" + std::string(s) + "'");
}

AttentionSource source_of(Variant v) noexcept {
  return v == Variant::itm_gradcam || v == Variant::itm_ca ? AttentionSource::itm
                                                           : AttentionSource::lm;
}

bool uses_gradients(Variant v) noexcept {
  return v == Variant::itm_gradcam || v == Variant::lm_gradcam;
}

void validate_example(const GroundingExample& example) {
  validate_image(example.image);
  if (example.referring_text.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw ValidationError("referring text is empty");
  }
  const auto& img = example.image;
  if (const auto* box = std::get_if<BoundingBox>(&example.region)) {
    if (box->empty()) throw ValidationError("ground-truth box is empty");
    if (box->x1 > img.width || box->y1 > img.height) {
      throw ValidationError("ground-truth box exceeds image '" + img.id + "'");
    }
  } else {
    const auto& mask = std::get<Mask>(example.region);
    if (mask.width() != img.width || mask.height() != img.height) {
      throw ValidationError("ground-truth mask dims differ from image '" + img.id + "'");
    }
    if (mask.area() == 0) throw ValidationError("ground-truth mask is empty");
  }
}

bool region_contains(const Region& region, std::size_t x, std::size_t y) {
  if (const auto* box = std::get_if<BoundingBox>(&region)) {
    return x >= box->x0 && x < box->x1 && y >= box->y0 && y < box->y1;
  }
  const auto& mask = std::get<Mask>(region);
  return x < mask.width() && y < mask.height() && mask.get(y, x);
}

MatrixD association_grid(const AttentionBundle& bundle, Variant variant, std::size_t layer,
                         std::optional<std::size_t> head) {
  if (source_of(variant) != bundle.source()) {
    throw ValidationError("bundle source does not match variant " +
                          std::string(to_string(variant)));
  }
  if (head && *head >= bundle.heads()) {
    throw ValidationError("head " + std::to_string(*head) + " out of range");
  }
  MatrixD c;
  if (uses_gradients(variant)) {
    c = head ? assoc::compute_gradcam_head(bundle, layer, *head)
             : assoc::compute_gradcam(bundle, layer);
  } else {
    c = assoc::mean_attention(bundle, layer, head);
  }

  const auto words = assoc::drop_stopword_columns(c, bundle.tokens());
  const MatrixD& src = words.values.cols() > 0 ? words.values : c;
  MatrixD grid(bundle.grid(), bundle.grid());
  for (std::size_t r = 0; r < src.rows(); ++r) {
    double s = 0.0;
    for (double v : src.row(r)) s += v;
    grid.data()[r] = s;
  }
  return grid;
}

Pixel argmax_pixel(const MatrixD& map) {
  if (map.empty()) throw ValidationError("argmax of an empty map");
  const auto& d = map.data();
  // First maximum in row-major order is the lowest (y, x).
  const auto it = std::max_element(d.begin(), d.end());
  const auto i = static_cast<std::size_t>(it - d.begin());
  return {i % map.cols(), i / map.cols()};
}

bool hit_from_bundle(const GroundingExample& example, const AttentionBundle& bundle,
                     Variant variant, std::size_t layer, std::optional<std::size_t> head) {
  const MatrixD grid = association_grid(bundle, variant, layer, head);
  const MatrixD map = assoc::resize_map(grid, example.image.width, example.image.height);
  const Pixel p = argmax_pixel(map);
  return region_contains(example.region, p.x, p.y);
}

namespace {

AttentionBundle attend(const GroundingExample& example, Variant variant, ModelAdapter& adapter) {
  return adapter.score_and_attend(example.image, example.referring_text, source_of(variant),
                                  AttendOptions{.gradients = uses_gradients(variant)});
}

}  // namespace

bool ground_one(const GroundingExample& example, Variant variant, std::size_t layer,
                std::optional<std::size_t> head, ModelAdapter& adapter) {
  validate_example(example);
  const auto bundle = attend(example, variant, adapter);
  return hit_from_bundle(example, bundle, variant, layer, head);
}

GroundingReport evaluate(std::span<const GroundingExample> dataset, Variant variant,
                         ModelAdapter& adapter, EvaluateOptions options) {
  if (dataset.empty()) throw ValidationError("grounding dataset is empty");
  for (const auto& ex : dataset) validate_example(ex);

  const std::size_t n = dataset.size();
  std::vector<std::vector<std::uint8_t>> layer_hits(n), head_hits(n);
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::exception_ptr failure;
  const int threads =
      static_cast<int>(std::max<std::size_t>(1, std::min(adapter.max_concurrency(), n)));

#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    try {
      const auto& ex = dataset[i];
      const auto bundle = attend(ex, variant, adapter);
#pragma omp critical(grounding_shape)
      {
        if (layers == 0) {
          layers = bundle.layers();
          heads = bundle.heads();
        }
      }
      if (bundle.layers() != layers || bundle.heads() != heads) {
        throw DataError("attention bundles disagree on layer/head counts");
      }
      for (std::size_t l = 0; l < bundle.layers(); ++l) {
        layer_hits[i].push_back(hit_from_bundle(ex, bundle, variant, l) ? 1 : 0);
      }
      if (options.head_layer) {
        if (*options.head_layer >= bundle.layers()) {
          throw ValidationError("drilldown layer out of range");
        }
        for (std::size_t h = 0; h < bundle.heads(); ++h) {
          head_hits[i].push_back(hit_from_bundle(ex, bundle, variant, *options.head_layer, h));
        }
      }
    } catch (const Error&) {
#pragma omp critical(grounding_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  GroundingReport report;
  report.variant = variant;
  report.example_count = n;
  report.per_layer_hits.assign(layers, 0);
  for (const auto& hits : layer_hits) {
    for (std::size_t l = 0; l < layers; ++l) report.per_layer_hits[l] += hits[l];
  }
  for (auto h : report.per_layer_hits) {
    report.per_layer_accuracy.push_back(static_cast<double>(h) / static_cast<double>(n));
  }
  if (options.head_layer) {
    report.head_layer = options.head_layer;
    report.per_head_hits.assign(heads, 0);
    for (const auto& hits : head_hits) {
      for (std::size_t h = 0; h < heads; ++h) report.per_head_hits[h] += hits[h];
    }
    for (auto h : report.per_head_hits) {
      report.per_head_accuracy.push_back(static_cast<double>(h) / static_cast<double>(n));
    }
  }
  return report;
}

std::size_t best_layer(const GroundingReport& report) {
  if (report.per_layer_accuracy.empty()) throw ValidationError("report has no layers");
  const auto& a = report.per_layer_accuracy;
  return static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin());
}

nlohmann::json report_to_json(const GroundingReport& report) {
  nlohmann::json j = {{"variant", to_string(report.variant)},
                      {"examples", report.example_count},
                      {"per_layer_hits", report.per_layer_hits},
                      {"per_layer_accuracy", report.per_layer_accuracy},
                      {"best_layer", best_layer(report)}};
  if (report.head_layer) {
    j["head_layer"] = *report.head_layer;
    j["per_head_hits"] = report.per_head_hits;
    j["per_head_accuracy"] = report.per_head_accuracy;
  }
  return j;
}

std::string reports_to_table(std::span<const GroundingReport> reports) {
  std::ostringstream out;
  out << "variant\tlayer\thits\texamples\taccuracy\n";
  for (const auto& r : reports) {
    for (std::size_t l = 0; l < r.per_layer_accuracy.size(); ++l) {
      out << to_string(r.variant) << '\t' << l << '\t' << r.per_layer_hits[l] << '\t'
          << r.example_count << '\t' << r.per_layer_accuracy[l] << '\n';
    }
  }
  return out.str();
}

std::vector<GroundingExample> examples_from_json(const nlohmann::json& j) {
  const nlohmann::json& list = j.is_object() ? j.at("examples") : j;
  if (!list.is_array()) throw ParseError("grounding examples must be an array");
  std::vector<GroundingExample> out;
  try {
    for (const auto& e : list) {
      GroundingExample ex;
      ex.image.id = e.at("image").get<std::string>();
      ex.image.width = e.at("width").get<std::size_t>();
      ex.image.height = e.at("height").get<std::size_t>();
      ex.image.source_path = e.value("path", std::string{});
      ex.referring_text = e.at("text").get<std::string>();
      if (e.contains("box")) {
        const auto b = e.at("box").get<std::vector<std::size_t>>();
        if (b.size() != 4) throw ParseError("box must be [x, y, w, h]");
        ex.region = BoundingBox{b[0], b[1], b[0] + b[2], b[1] + b[3]};
      } else if (e.contains("mask")) {
        ex.region = store::rle_from_json(e.at("mask"));
      } else {
        throw ParseError("example for '" + ex.image.id + "' has neither box nor mask");
      }
      validate_example(ex);
      out.push_back(std::move(ex));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed grounding example: ") + e.what());
  }
  return out;
}

std::vector<GroundingExample> load_examples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return examples_from_json(j);
}

nlohmann::json example_to_json(const GroundingExample& example) {
  nlohmann::json j = {{"image", example.image.id},
                      {"width", example.image.width},
                      {"height", example.image.height},
                      {"text", example.referring_text}};
  if (!example.image.source_path.empty()) j["path"] = example.image.source_path;
  if (const auto* box = std::get_if<BoundingBox>(&example.region)) {
    j["box"] = {box->x0, box->y0, box->x1 - box->x0, box->y1 - box->y0};
  } else {
    j["mask"] = store::rle_to_json(std::get<Mask>(example.region));
  }
  return j;
}

}  // namespace capscope::grounding
