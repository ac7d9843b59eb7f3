#include "capscope/mock_adapter.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "capscope/error.hpp"
#include "capscope/hash.hpp"
#include "capscope/random.hpp"
#include "capscope/rle.hpp"
#include "capscope/text.hpp"

namespace capscope {
namespace {

constexpr std::uint64_t kAttentionStream = 0xa77e;
constexpr std::uint64_t kGradientStream = 0x96ad;
constexpr std::uint64_t kScoreStream = 0x5c0e;
constexpr std::uint64_t kSegmentStream = 0x5e91;
constexpr std::uint64_t kEmbedStream = 0xe4bd;
constexpr std::uint64_t kCaptionStream = 0xca97;

constexpr double kPlantedMass = 0.9;

std::vector<std::string> split_spaces(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

std::string synthesize_body(std::uint64_t key) {
  static const std::array<const char*, 8> subjects = {
      "man", "woman", "boy", "girl", "person", "fisherman", "dog", "child"};
  static const std::array<const char*, 6> verbs = {
      "holding", "wearing", "standing next to", "sitting on", "looking at",
      "carrying"};
  static const std::array<const char*, 6> adjectives = {
      "large", "small", "white", "black", "red", "green"};
  static const std::array<const char*, 10> objects = {
      "fish", "hat", "boat", "lake", "tree", "bench", "umbrella", "handbag",
      "net", "rock"};
  Rng rng(key);
  std::string body = "a ";
  body += subjects[rng.below(subjects.size())];
  body += " ";
  body += verbs[rng.below(verbs.size())];
  body += " a ";
  if (rng.uniform() < 0.5) {
    body += adjectives[rng.below(adjectives.size())];
    body += " ";
  }
  body += objects[rng.below(objects.size())];
  return body;
}

Mask parse_shape(const nlohmann::json& shape, std::size_t h, std::size_t w) {
  Mask m(h, w);
  if (shape.contains("rect")) {
    const auto r = shape["rect"].get<std::vector<std::size_t>>();
    if (r.size() != 4) throw ParseError("rect needs [x, y, w, h]");
    m.fill_rect(r[0], r[1], r[2], r[3]);
  } else if (shape.contains("ellipse")) {
    const auto e = shape["ellipse"].get<std::vector<double>>();
    if (e.size() != 4) throw ParseError("ellipse needs [cx, cy, rx, ry]");
    m.fill_ellipse(e[0], e[1], e[2], e[3]);
  } else if (shape.contains("rle")) {
    m = store::rle_from_json(shape["rle"]);
  } else {
    throw ParseError("mask shape needs rect, ellipse or rle");
  }
  return m;
}

}  // namespace

MockConfig MockConfig::from_json(const nlohmann::json& j) {
  MockConfig c;
  c.seed = j.value("seed", c.seed);
  c.grid.per_side = j.value("patch_grid", c.grid.per_side);
  c.grid.patch_pixels = j.value("patch_pixels", c.grid.patch_pixels);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.decode.max_length = j.value("max_length", c.decode.max_length);
  c.decode.strategy = j.value("strategy", c.decode.strategy);
  c.decode.seed = c.seed;
  c.max_concurrency = j.value("max_concurrency", c.max_concurrency);
  if (c.grid.per_side == 0 || c.layers == 0 || c.heads == 0 ||
      c.embedding_dim == 0 || c.max_concurrency == 0) {
    throw ValidationError("mock adapter sizes must be positive");
  }
  return c;
}

void MockFixtures::add_image(const std::string& id, std::size_t width,
                             std::size_t height, bool corrupt) {
  images[id] = MockImage{width, height, corrupt};
}

void MockFixtures::add_caption(const std::string& id, const std::string& prompt,
                               const std::string& text) {
  captions[{id, fnv1a(prompt)}] = text;
}

std::optional<std::string> MockFixtures::caption(const std::string& id,
                                                 const std::string& prompt) const {
  if (auto it = captions.find({id, fnv1a(prompt)}); it != captions.end()) {
    return it->second;
  }
  return std::nullopt;
}

MockFixtures MockFixtures::load(const std::filesystem::path& dir) {
  const auto file = dir / "fixtures.json";
  std::ifstream in(file);
  if (!in) throw IoError("cannot read mock fixtures " + file.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("mock fixtures " + file.string() + ": " + e.what());
  }
}

MockFixtures MockFixtures::from_json(const nlohmann::json& j) {
  MockFixtures f;
  for (const auto& img : j.value("images", nlohmann::json::array())) {
    f.add_image(img.at("id").get<std::string>(), img.value("width", 0u),
                img.value("height", 0u), img.value("corrupt", false));
  }
  for (const auto& c : j.value("captions", nlohmann::json::array())) {
    f.add_caption(c.at("image").get<std::string>(), c.value("prompt", std::string()),
                  c.at("text").get<std::string>());
  }
  for (const auto& r : j.value("steering", nlohmann::json::array())) {
    MockSteerRule rule;
    rule.image_id = r.at("image").get<std::string>();
    if (r.contains("prompt")) rule.prompt = r["prompt"].get<std::string>();
    rule.patches = r.at("patches").get<std::vector<std::size_t>>();
    if (r.contains("min_weight")) rule.min_weight = r["min_weight"].get<double>();
    if (r.contains("max_weight")) rule.max_weight = r["max_weight"].get<double>();
    rule.text = r.at("text").get<std::string>();
    f.steering.push_back(std::move(rule));
  }
  for (const auto& m : j.value("masks", nlohmann::json::array())) {
    const auto id = m.at("image").get<std::string>();
    const auto it = f.images.find(id);
    if (it == f.images.end() || it->second.width == 0) {
      throw ParseError("mask fixtures for '" + id + "' need a sized image entry");
    }
    auto& list = f.masks[id];
    for (const auto& shape : m.at("shapes")) {
      list.push_back(parse_shape(shape, it->second.height, it->second.width));
    }
  }
  for (const auto& p : j.value("planted", nlohmann::json::array())) {
    f.planted[p.at("image").get<std::string>()] =
        PlantedPeak{p.at("layer").get<std::size_t>(), p.at("patch").get<std::size_t>()};
  }
  return f;
}

MockAdapter::MockAdapter(MockConfig config, MockFixtures fixtures)
    : config_(std::move(config)), fixtures_(std::move(fixtures)) {
  for (const auto& [id, peak] : fixtures_.planted) {
    if (peak.layer >= config_.layers ||
        peak.patch >= config_.grid.per_side * config_.grid.per_side) {
      throw ValidationError("planted peak for '" + id + "' is outside the grid");
    }
  }
}

const MockImage& MockAdapter::check_image(const ImageRef& image) const {
  const auto it = fixtures_.images.find(image.id);
  if (it == fixtures_.images.end()) {
    throw NotFoundError("unknown image '" + image.id + "'");
  }
  if (it->second.corrupt) {
    throw IoError("cannot decode image '" + image.id + "'");
  }
  if (image.width == 0 || image.height == 0) {
    throw ValidationError("image '" + image.id + "' has zero size");
  }
  if (it->second.width != 0 &&
      (it->second.width != image.width || it->second.height != image.height)) {
    throw ValidationError("image '" + image.id + "' dims differ from fixture");
  }
  return it->second;
}

std::string MockAdapter::base_caption(const ImageRef& image,
                                      const std::string& prompt) const {
  if (auto text = fixtures_.caption(image.id, prompt)) return *text;
  const auto key = combine(combine(config_.seed ^ kCaptionStream, fnv1a(image.id)),
                           fnv1a(prompt));
  const std::string body = synthesize_body(key);
  return prompt.empty() ? body : prompt + " " + body;
}

CaptionResult MockAdapter::generate_caption(
    const ImageRef& image, const std::string& prompt,
    std::optional<std::span<const double>> patch_weights) {
  check_image(image);
  const std::size_t patches = config_.grid.per_side * config_.grid.per_side;
  if (patch_weights) validate_patch_weights(*patch_weights, patches);
  caption_calls_.fetch_add(1);

  std::string text = base_caption(image, prompt);
  if (patch_weights && !is_identity_weights(*patch_weights)) {
    const auto& w = *patch_weights;
    for (const auto& rule : fixtures_.steering) {
      if (rule.image_id != image.id) continue;
      if (rule.prompt && *rule.prompt != prompt) continue;
      const bool hit = !rule.patches.empty() &&
                       std::all_of(rule.patches.begin(), rule.patches.end(),
                                   [&](std::size_t p) {
                                     if (p >= w.size()) return false;
                                     if (rule.min_weight && w[p] < *rule.min_weight) return false;
                                     if (rule.max_weight && w[p] > *rule.max_weight) return false;
                                     return true;
                                   });
      if (hit) {
        text = rule.text;
        break;
      }
    }
  }

  CaptionResult result;
  result.tokens = split_spaces(text);
  if (result.tokens.size() > config_.decode.max_length) {
    result.tokens.resize(config_.decode.max_length);
  }
  result.text = join(result.tokens);
  result.prompt = prompt;
  result.decode = config_.decode;
  return result;
}

AttentionBundle MockAdapter::score_and_attend(const ImageRef& image,
                                              const std::string& caption,
                                              AttentionSource source,
                                              AttendOptions options) {
  check_image(image);
  if (caption.empty()) throw ValidationError("caption is empty");
  auto tokens = text::lex_words(caption);
  if (tokens.empty()) throw ValidationError("caption has no tokens");
  attend_calls_.fetch_add(1);
  if (options.gradients) gradient_requests_.fetch_add(1);

  const std::size_t L = config_.layers;
  const std::size_t H = config_.heads;
  const std::size_t P = config_.grid.per_side * config_.grid.per_side;
  const std::size_t T = tokens.size();
  const std::size_t stride = P * T;
  const std::uint64_t key =
      combine(combine(combine(config_.seed, fnv1a(image.id)), fnv1a(caption)),
              static_cast<std::uint64_t>(source));

  std::optional<PlantedPeak> planted;
  if (auto it = fixtures_.planted.find(image.id); it != fixtures_.planted.end()) {
    planted = it->second;
  }

  std::vector<float> attention(L * H * stride);
  std::vector<float> gradients(options.gradients ? L * H * stride : 0);
  std::vector<double> column(P);

  for (std::size_t l = 0; l < L; ++l) {
    const bool plant = planted && planted->layer == l;
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t head_index = l * H + h;
      float* a = attention.data() + head_index * stride;
      // Cross-attention is a softmax over image patches, so each token column
      // sums to one.
      Rng rng(combine(key ^ kAttentionStream, head_index));
      for (std::size_t j = 0; j < T; ++j) {
        double sum = 0.0;
        for (std::size_t r = 0; r < P; ++r) {
          const double u = rng.uniform();
          column[r] = u * u * u + 1e-6;
          if (plant && r == planted->patch) column[r] = 0.0;
          sum += column[r];
        }
        const double rest = plant ? 1.0 - kPlantedMass : 1.0;
        for (std::size_t r = 0; r < P; ++r) {
          double v = column[r] / sum * rest;
          if (plant && r == planted->patch) v = kPlantedMass;
          a[r * T + j] = static_cast<float>(v);
        }
      }
      if (options.gradients) {
        float* g = gradients.data() + head_index * stride;
        Rng grng(combine(key ^ kGradientStream, head_index));
        for (std::size_t i = 0; i < stride; ++i) {
          g[i] = static_cast<float>(plant ? grng.uniform(0.5, 1.0)
                                          : grng.uniform(-1.0, 1.0));
        }
      }
    }
  }

  std::optional<double> score;
  if (source == AttentionSource::itm) {
    score = Rng(combine(key, kScoreStream)).uniform();
  }
  return AttentionBundle(source, L, H, config_.grid.per_side, std::move(tokens),
                         std::move(attention), std::move(gradients), score);
}

std::vector<RawMask> MockAdapter::segment_image(const ImageRef& image) {
  check_image(image);
  std::vector<RawMask> out;
  if (auto it = fixtures_.masks.find(image.id); it != fixtures_.masks.end()) {
    for (const auto& m : it->second) {
      if (m.height() != image.height || m.width() != image.width) {
        throw DataError("fixture mask dims differ from image '" + image.id + "'");
      }
      out.push_back(RawMask{image.id, m});
    }
    return out;
  }

  const double w = static_cast<double>(image.width);
  const double h = static_cast<double>(image.height);
  Rng rng(combine(config_.seed ^ kSegmentStream, fnv1a(image.id)));
  auto make = [&] { return Mask(image.height, image.width); };

  // Main object, a near-duplicate of it, a mid-sized box, a speck, and a
  // couple of random regions.
  Mask main = make();
  const double cx = rng.uniform(0.3, 0.7) * w;
  const double cy = rng.uniform(0.3, 0.7) * h;
  const double rx = rng.uniform(0.15, 0.3) * w;
  const double ry = rng.uniform(0.15, 0.3) * h;
  main.fill_ellipse(cx, cy, rx, ry);
  Mask dup = make();
  dup.fill_ellipse(cx, cy, rx * 0.97, ry * 0.97);

  Mask box = make();
  box.fill_rect(static_cast<std::size_t>(rng.uniform(0.0, 0.6) * w),
                static_cast<std::size_t>(rng.uniform(0.0, 0.6) * h),
                static_cast<std::size_t>(rng.uniform(0.15, 0.35) * w) + 1,
                static_cast<std::size_t>(rng.uniform(0.15, 0.35) * h) + 1);

  Mask speck = make();
  speck.fill_rect(static_cast<std::size_t>(rng.uniform(0.0, 0.9) * w),
                  static_cast<std::size_t>(rng.uniform(0.0, 0.9) * h),
                  std::max<std::size_t>(1, image.width / 30),
                  std::max<std::size_t>(1, image.height / 30));

  for (Mask* m : {&main, &dup, &box, &speck}) {
    out.push_back(RawMask{image.id, std::move(*m)});
  }
  const auto extras = 1 + rng.below(2);
  for (std::uint64_t e = 0; e < extras; ++e) {
    Mask m = make();
    m.fill_ellipse(rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h,
                   rng.uniform(0.05, 0.2) * w, rng.uniform(0.05, 0.2) * h);
    out.push_back(RawMask{image.id, std::move(m)});
  }
  return out;
}

std::vector<double> MockAdapter::embed_segment(const ImageRef& image,
                                               const RawMask& mask) {
  check_image(image);
  if (mask.image_id != image.id) {
    throw ValidationError("mask belongs to image '" + mask.image_id + "'");
  }
  if (mask.bitmap.height() != image.height || mask.bitmap.width() != image.width) {
    throw ValidationError("mask dims differ from image dims");
  }
  const double w = static_cast<double>(image.width);
  const double h = static_cast<double>(image.height);
  double sx = 0.0, sy = 0.0;
  std::size_t area = 0;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      if (!mask.bitmap.get(y, x)) continue;
      sx += static_cast<double>(x) + 0.5;
      sy += static_cast<double>(y) + 0.5;
      ++area;
    }
  }
  const BoundingBox box = mask.bitmap.bounds();
  const double a = static_cast<double>(area) / (w * h);
  const double cx = area ? sx / static_cast<double>(area) / w : 0.5;
  const double cy = area ? sy / static_cast<double>(area) / h : 0.5;
  const double bw = static_cast<double>(box.x1 - box.x0) / w;
  const double bh = static_cast<double>(box.y1 - box.y0) / h;
  const double fill = box.empty() ? 0.0
                                  : static_cast<double>(area) /
                                        static_cast<double>((box.x1 - box.x0) * (box.y1 - box.y0));

  const std::array<double, 7> features = {
      cx - 0.5, cy - 0.5, std::sqrt(a) - 0.3, bw - 0.3, bh - 0.3, bw - bh, fill - 0.7};
  const std::uint64_t mask_hash = fnv1a_bytes(std::as_bytes(std::span(mask.bitmap.bits())));
  Rng rng(combine(combine(config_.seed ^ kEmbedStream, fnv1a(image.id)), mask_hash));
  std::vector<double> e(config_.embedding_dim);
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double base = i < features.size() ? features[i] : 0.0;
    e[i] = base + 0.01 * rng.normal();
  }
  return e;
}

}  // namespace capscope
