#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace capscope::store {

/// Binary tensor container:
///   "CSTB" | version u8 | dtype u8 (0 = f32) | ndim u8 | dims u64 LE x ndim |
///   payload f32 LE, row-major.
struct TensorBlob {
  std::vector<std::uint64_t> dims;
  std::vector<float> values;

  std::uint64_t element_count() const noexcept;
  bool operator==(const TensorBlob&) const = default;
};

inline constexpr char kTensorMagic[4] = {'C', 'S', 'T', 'B'};
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

std::vector<std::byte> encode_tensor(const TensorBlob& blob);
/// Throws ParseError on a bad header or a payload of the wrong length.
TensorBlob decode_tensor(std::span<const std::byte> bytes);

/// Reads slice `index` along the leading dimension of a stored tensor without
/// loading the rest of the payload. Result dims drop the leading axis.
TensorBlob read_tensor_slice(const std::filesystem::path& file,
                             std::uint64_t index);

/// Stage directories a key may address.
inline constexpr std::string_view kStages[] = {
    "captions", "masks", "tensors", "matrices", "graphs", "reports"};

/// Write-once artifact store rooted at a directory:
///   <root>/datasets/<dataset>/manifest.json
///   <root>/datasets/<dataset>/<stage>/[<sub>/]<name>
/// Keys are "dataset/stage/name" or "dataset/stage/sub/name"; the key is the
/// artifact id. Writes are atomic and never replace an existing artifact.
class ArtifactStore {
 public:
  explicit ArtifactStore(std::filesystem::path root);

  const std::filesystem::path& root() const noexcept { return root_; }

  /// Throws ValidationError for malformed keys.
  std::filesystem::path path_for(std::string_view key) const;
  bool exists(std::string_view key) const;

  /// Throws ConflictError if the key is already committed.
  std::string put_bytes(std::string_view key, std::span<const std::byte> bytes);
  std::vector<std::byte> get_bytes(std::string_view key) const;

  /// JSON is written with sorted keys and a trailing newline.
  std::string put_json(std::string_view key, const nlohmann::json& value);
  nlohmann::json get_json(std::string_view key) const;

  std::string put_tensor(std::string_view key, const TensorBlob& blob);
  TensorBlob get_tensor(std::string_view key) const;
  TensorBlob get_tensor_slice(std::string_view key, std::uint64_t index) const;

  /// Names (last key component) under dataset/stage[/sub], sorted.
  std::vector<std::string> list(std::string_view dataset,
                                std::string_view stage,
                                std::string_view sub = {}) const;

  // Dataset manifests live outside the stage directories.
  std::vector<std::string> datasets() const;
  bool has_manifest(std::string_view dataset) const;
  void put_manifest(std::string_view dataset, const nlohmann::json& manifest);
  nlohmann::json get_manifest(std::string_view dataset) const;

  /// Count of successful put_* calls on this instance.
  std::size_t writes() const noexcept { return writes_.load(); }

 private:
  void write_once(const std::filesystem::path& target,
                  std::span<const std::byte> bytes, std::string_view what);

  std::filesystem::path root_;
  std::atomic<std::size_t> writes_{0};
};

/// True when `s` is a safe single path component: [A-Za-z0-9._-], not
/// starting with '.'.
bool is_safe_component(std::string_view s) noexcept;

std::string dump_json(const nlohmann::json& value);

}  // namespace capscope::store
