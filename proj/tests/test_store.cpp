#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"

#include "capscope/error.hpp"
#include "capscope/rle.hpp"
#include "capscope/store.hpp"
#include "support.hpp"

using namespace capscope;
using namespace capscope::store;
using capscope::testing::random_mask;
using capscope::testing::TempDir;

namespace {

TensorBlob random_blob(Rng& rng) {
  TensorBlob b;
  const auto nd = rng.below(4) + 1;
  std::uint64_t n = 1;
  for (std::size_t i = 0; i < nd; ++i) {
    b.dims.push_back(rng.below(6));
    n *= b.dims.back();
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t bits = static_cast<std::uint32_t>(rng.next());
    float f;
    std::memcpy(&f, &bits, 4);
    if (f != f) f = static_cast<float>(rng.normal());  // NaN payloads do not compare equal
    b.values.push_back(f);
  }
  return b;
}

bool same_bits(const TensorBlob& a, const TensorBlob& b) {
  return a.dims == b.dims && a.values.size() == b.values.size() &&
         std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("tensor blob round trip") {
  Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    const auto blob = random_blob(rng);
    const auto bytes = encode_tensor(blob);
    CHECK(bytes.size() == 7 + 8 * blob.dims.size() + 4 * blob.values.size());
    CHECK(same_bits(decode_tensor(bytes), blob));
  }
}

TEST_CASE("tensor decode rejects damaged input") {
  TensorBlob blob{{2, 3}, {1, 2, 3, 4, 5, 6}};
  auto bytes = encode_tensor(blob);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_tensor(truncated), ParseError);
  auto longer = bytes;
  longer.push_back(std::byte{0});
  CHECK_THROWS_AS(decode_tensor(longer), ParseError);
  auto magic = bytes;
  magic[0] = std::byte{'X'};
  CHECK_THROWS_AS(decode_tensor(magic), ParseError);
  auto version = bytes;
  version[4] = std::byte{9};
  CHECK_THROWS_AS(decode_tensor(version), ParseError);
  CHECK_THROWS_AS(decode_tensor(std::vector<std::byte>{}), ParseError);
}

TEST_CASE("rle round trip and format") {
  Rng rng(32);
  for (int i = 0; i < 300; ++i) {
    const auto h = 1 + rng.below(30), w = 1 + rng.below(30);
    const Mask m = random_mask(rng, h, w);
    CHECK(rle_decode(rle_encode(m), h, w) == m);
    CHECK(mask_from_runs(rle_runs(m), h, w) == m);
    CHECK(rle_from_json(rle_to_json(m)) == m);
    std::uint64_t total = 0;
    for (auto r : rle_runs(m)) total += r;
    CHECK(total == h * w);
  }
  // Column-major runs: a 2x2 mask with only the top-right pixel set.
  Mask m(2, 2);
  m.set(0, 1);
  CHECK(rle_runs(m) == std::vector<std::uint32_t>{2, 1, 1});
  const nlohmann::json uncompressed = {{"size", {2, 2}}, {"counts", {2, 1, 1}}};
  CHECK(rle_from_json(uncompressed) == m);
  CHECK_THROWS_AS(rle_decode(rle_encode(m), 3, 3), ParseError);
}

TEST_CASE("store keys and write-once") {
  TempDir dir("store");
  ArtifactStore s(dir.path());
  CHECK_THROWS_AS(s.path_for("ds/bogus/x"), ValidationError);
  CHECK_THROWS_AS(s.path_for("ds/captions/../x"), ValidationError);
  CHECK_THROWS_AS(s.path_for("ds/captions"), ValidationError);
  CHECK(s.path_for("ds/reports/steer/a.json") ==
        dir.path() / "datasets" / "ds" / "reports" / "steer" / "a.json");

  const nlohmann::json v = {{"b", 1}, {"a", 2}};
  CHECK(s.put_json("ds/captions/a.json", v) == "ds/captions/a.json");
  CHECK(s.exists("ds/captions/a.json"));
  CHECK(s.get_json("ds/captions/a.json") == v);
  CHECK_THROWS_AS(s.put_json("ds/captions/a.json", {{"c", 3}}), ConflictError);
  CHECK(s.get_json("ds/captions/a.json") == v);
  CHECK(s.writes() == 1);
  CHECK_THROWS_AS(s.get_json("ds/captions/missing.json"), NotFoundError);

  std::ifstream in(s.path_for("ds/captions/a.json"));
  const std::string text((std::istreambuf_iterator<char>(in)), {});
  CHECK(text.back() == '\n');
  CHECK(text.find("\"a\"") < text.find("\"b\""));
  CHECK(nlohmann::json::parse(text) == v);

  s.put_json("ds/captions/b.json", 1);
  CHECK(s.list("ds", "captions") == std::vector<std::string>{"a.json", "b.json"});
  CHECK(s.list("ds", "masks").empty());
}

TEST_CASE("store tensors and slices") {
  TempDir dir("slices");
  ArtifactStore s(dir.path());
  TensorBlob blob{{3, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
  s.put_tensor("ds/tensors/t", blob);
  CHECK(s.get_tensor("ds/tensors/t") == blob);
  const auto mid = s.get_tensor_slice("ds/tensors/t", 1);
  CHECK(mid.dims == std::vector<std::uint64_t>{2, 2});
  CHECK(mid.values == std::vector<float>{4, 5, 6, 7});
  CHECK_THROWS(s.get_tensor_slice("ds/tensors/t", 3));
  CHECK_THROWS_AS(s.put_tensor("ds/tensors/t", blob), ConflictError);
}

TEST_CASE("manifests") {
  TempDir dir("manifest");
  ArtifactStore s(dir.path());
  CHECK(s.datasets().empty());
  CHECK_FALSE(s.has_manifest("ds"));
  s.put_manifest("ds", {{"dataset_id", "ds"}});
  CHECK(s.has_manifest("ds"));
  CHECK(s.datasets() == std::vector<std::string>{"ds"});
  CHECK_THROWS_AS(s.put_manifest("ds", {{"dataset_id", "ds"}}), ConflictError);
  CHECK_THROWS_AS(s.get_manifest("nope"), NotFoundError);
}

TEST_CASE("safe components") {
  CHECK(is_safe_component("tench_001.json"));
  CHECK_FALSE(is_safe_component(""));
  CHECK_FALSE(is_safe_component(".hidden"));
  CHECK_FALSE(is_safe_component("a/b"));
  CHECK_FALSE(is_safe_component("a b"));
}
