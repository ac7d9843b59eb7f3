#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "capscope/mask.hpp"

namespace capscope::store {

/// Alternating zero/one run lengths over the column-major pixel order,
/// starting with a (possibly empty) run of zeros.
std::vector<std::uint32_t> rle_runs(const Mask& mask);
Mask mask_from_runs(const std::vector<std::uint32_t>& runs, std::size_t height,
                    std::size_t width);

/// Compact ASCII run encoding (the COCO "compressed counts" form), so masks
/// interoperate with the usual mask tooling.
std::string rle_encode(const Mask& mask);
/// Throws ParseError on malformed input or when the runs do not cover
/// exactly height*width pixels.
Mask rle_decode(std::string_view counts, std::size_t height, std::size_t width);

/// {"size": [h, w], "counts": "..."}
nlohmann::json rle_to_json(const Mask& mask);
/// Accepts string counts or an uncompressed integer list.
Mask rle_from_json(const nlohmann::json& j);

}  // namespace capscope::store
