#include "capscope/rle.hpp"

#include "capscope/error.hpp"

namespace capscope::store {

std::vector<std::uint32_t> rle_runs(const Mask& mask) {
  const std::size_t h = mask.height();
  const std::size_t w = mask.width();
  std::vector<std::uint32_t> runs;
  bool current = false;
  std::uint32_t run = 0;
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) {
      const bool v = mask.get(y, x);
      if (v != current) {
        runs.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  }
  runs.push_back(run);
  return runs;
}

Mask mask_from_runs(const std::vector<std::uint32_t>& runs, std::size_t height,
                    std::size_t width) {
  std::uint64_t total = 0;
  for (auto r : runs) total += r;
  if (total != static_cast<std::uint64_t>(height) * width) {
    throw ParseError("rle runs cover " + std::to_string(total) +
                     " pixels, expected " + std::to_string(height * width));
  }
  Mask mask(height, width);
  std::size_t pos = 0;
  bool value = false;
  for (auto r : runs) {
    if (value) {
      for (std::size_t k = pos; k < pos + r; ++k) {
        mask.set(k % height, k / height);
      }
    }
    pos += r;
    value = !value;
  }
  return mask;
}

std::string rle_encode(const Mask& mask) {
  const auto runs = rle_runs(mask);
  std::string out;
  out.reserve(runs.size() * 2);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    long long x = runs[i];
    if (i > 2) x -= static_cast<long long>(runs[i - 2]);
    bool more = true;
    while (more) {
      char c = static_cast<char>(x & 0x1f);
      x >>= 5;
      more = (c & 0x10) ? x != -1 : x != 0;
      if (more) c |= 0x20;
      out.push_back(static_cast<char>(c + 48));
    }
  }
  return out;
}

Mask rle_decode(std::string_view counts, std::size_t height, std::size_t width) {
  std::vector<std::uint32_t> runs;
  std::size_t p = 0;
  while (p < counts.size()) {
    long long x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= counts.size()) throw ParseError("rle string ends mid-value");
      const int c = static_cast<unsigned char>(counts[p]) - 48;
      if (c < 0 || c > 63) throw ParseError("rle string has invalid character");
      if (k >= 12) throw ParseError("rle value too long");
      x |= static_cast<long long>(c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -1LL << (5 * k);
    }
    if (runs.size() > 2) x += runs[runs.size() - 2];
    if (x < 0 || x > 0xffffffffLL) throw ParseError("rle run out of range");
    runs.push_back(static_cast<std::uint32_t>(x));
  }
  return mask_from_runs(runs, height, width);
}

nlohmann::json rle_to_json(const Mask& mask) {
  return {{"size", {mask.height(), mask.width()}}, {"counts", rle_encode(mask)}};
}

Mask rle_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("size") || !j.contains("counts") ||
      !j["size"].is_array() || j["size"].size() != 2) {
    throw ParseError("rle object needs size:[h,w] and counts");
  }
  const auto h = j["size"][0].get<std::size_t>();
  const auto w = j["size"][1].get<std::size_t>();
  const auto& counts = j["counts"];
  if (counts.is_string()) return rle_decode(counts.get<std::string>(), h, w);
  if (counts.is_array()) {
    std::vector<std::uint32_t> runs;
    for (const auto& c : counts) {
      if (!c.is_number_integer() || c.get<std::int64_t>() < 0) {
        throw ParseError("rle counts must be non-negative integers");
      }
      runs.push_back(c.get<std::uint32_t>());
    }
    return mask_from_runs(runs, h, w);
  }
  throw ParseError("rle counts must be a string or integer list");
}

}  // namespace capscope::store
