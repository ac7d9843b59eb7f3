#include "capscope/store.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <system_error>
#include <unistd.h>

#include "capscope/error.hpp"

namespace fs = std::filesystem;

namespace capscope::store {
namespace {

constexpr std::size_t kHeaderFixed = 7;  // magic + version + dtype + ndim

void put_u64(std::vector<std::byte>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
  }
}

std::uint64_t get_u64(std::span<const std::byte> in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  }
  return v;
}

void put_f32(std::byte* out, float f) {
  const auto v = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) {
    out[i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
  }
}

float get_f32(const std::byte* in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(in[i]) << (8 * i);
  }
  return std::bit_cast<float>(v);
}

struct Header {
  std::vector<std::uint64_t> dims;
  std::size_t size = 0;  // header bytes
};

Header parse_header(std::span<const std::byte> bytes) {
  if (bytes.size() < kHeaderFixed) throw ParseError("tensor blob truncated");
  for (int i = 0; i < 4; ++i) {
    if (static_cast<char>(bytes[i]) != kTensorMagic[i]) {
      throw ParseError("tensor blob has bad magic");
    }
  }
  if (static_cast<std::uint8_t>(bytes[4]) != kTensorVersion) {
    throw ParseError("unsupported tensor blob version");
  }
  if (static_cast<std::uint8_t>(bytes[5]) != kDtypeF32) {
    throw ParseError("unsupported tensor dtype");
  }
  const auto ndim = static_cast<std::size_t>(bytes[6]);
  Header h;
  h.size = kHeaderFixed + 8 * ndim;
  if (bytes.size() < h.size) throw ParseError("tensor blob header truncated");
  for (std::size_t i = 0; i < ndim; ++i) {
    h.dims.push_back(get_u64(bytes.subspan(kHeaderFixed + 8 * i, 8)));
  }
  return h;
}

std::uint64_t product(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<std::byte> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> data(size);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("short read on " + p.string());
  return data;
}

bool is_stage(std::string_view s) {
  return std::find(std::begin(kStages), std::end(kStages), s) != std::end(kStages);
}

std::vector<std::string_view> split_key(std::string_view key) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto slash = key.find('/', start);
    parts.push_back(key.substr(start, slash - start));
    if (slash == std::string_view::npos) break;
    start = slash + 1;
  }
  return parts;
}

}  // namespace

std::uint64_t TensorBlob::element_count() const noexcept { return product(dims); }

std::vector<std::byte> encode_tensor(const TensorBlob& blob) {
  if (blob.dims.size() > 255) throw ValidationError("tensor has too many dims");
  if (blob.element_count() != blob.values.size()) {
    throw ValidationError("tensor values do not match dims");
  }
  std::vector<std::byte> out;
  out.reserve(kHeaderFixed + 8 * blob.dims.size() + 4 * blob.values.size());
  for (char c : kTensorMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(static_cast<std::byte>(kTensorVersion));
  out.push_back(static_cast<std::byte>(kDtypeF32));
  out.push_back(static_cast<std::byte>(blob.dims.size()));
  for (auto d : blob.dims) put_u64(out, d);
  const std::size_t payload_at = out.size();
  out.resize(payload_at + 4 * blob.values.size());
  for (std::size_t i = 0; i < blob.values.size(); ++i) {
    put_f32(out.data() + payload_at + 4 * i, blob.values[i]);
  }
  return out;
}

TensorBlob decode_tensor(std::span<const std::byte> bytes) {
  const Header h = parse_header(bytes);
  const std::uint64_t n = product(h.dims);
  if (bytes.size() - h.size != n * 4) {
    throw ParseError("tensor payload length does not match dims");
  }
  TensorBlob blob;
  blob.dims = h.dims;
  blob.values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    blob.values[i] = get_f32(bytes.data() + h.size + 4 * i);
  }
  return blob;
}

TensorBlob read_tensor_slice(const fs::path& file, std::uint64_t index) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<std::byte> head(kHeaderFixed);
  in.read(reinterpret_cast<char*>(head.data()), kHeaderFixed);
  if (!in) throw ParseError("tensor blob truncated");
  const auto ndim = static_cast<std::size_t>(head[6]);
  head.resize(kHeaderFixed + 8 * ndim);
  in.read(reinterpret_cast<char*>(head.data() + kHeaderFixed),
          static_cast<std::streamsize>(8 * ndim));
  if (!in) throw ParseError("tensor blob header truncated");
  const Header h = parse_header(head);
  if (h.dims.empty()) throw ValidationError("cannot slice a scalar tensor");
  if (index >= h.dims[0]) throw ValidationError("tensor slice index out of range");

  TensorBlob blob;
  blob.dims.assign(h.dims.begin() + 1, h.dims.end());
  const std::uint64_t n = product(blob.dims);
  std::vector<std::byte> payload(n * 4);
  in.seekg(static_cast<std::streamoff>(h.size + index * n * 4));
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!in) throw ParseError("tensor payload truncated");
  blob.values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) blob.values[i] = get_f32(payload.data() + 4 * i);
  return blob;
}

bool is_safe_component(std::string_view s) noexcept {
  if (s.empty() || s.front() == '.') return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
           (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
  });
}

std::string dump_json(const nlohmann::json& value) { return value.dump(2) + "\n"; }

ArtifactStore::ArtifactStore(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_ / "datasets", ec);
  if (ec) throw IoError("cannot create store root " + root_.string() + ": " + ec.message());
}

fs::path ArtifactStore::path_for(std::string_view key) const {
  const auto parts = split_key(key);
  if (parts.size() < 3 || parts.size() > 4) {
    throw ValidationError("artifact key must be dataset/stage/[sub/]name: " +
                          std::string(key));
  }
  for (auto p : parts) {
    if (!is_safe_component(p)) {
      throw ValidationError("artifact key has unsafe component: " + std::string(key));
    }
  }
  if (!is_stage(parts[1])) {
    throw ValidationError("unknown artifact stage '" + std::string(parts[1]) + "'");
  }
  fs::path p = root_ / "datasets";
  for (auto part : parts) p /= std::string(part);
  return p;
}

bool ArtifactStore::exists(std::string_view key) const {
  return fs::exists(path_for(key));
}

void ArtifactStore::write_once(const fs::path& target,
                               std::span<const std::byte> bytes,
                               std::string_view what) {
  std::error_code ec;
  fs::create_directories(target.parent_path(), ec);
  if (ec) throw IoError("cannot create " + target.parent_path().string());
  if (fs::exists(target)) {
    throw ConflictError("artifact already committed: " + std::string(what));
  }
  static std::atomic<std::uint64_t> counter{0};
  const fs::path tmp = target.parent_path() /
                       ("." + target.filename().string() + ".tmp." +
                        std::to_string(::getpid()) + "." +
                        std::to_string(counter.fetch_add(1)));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write on " + tmp.string());
  }
  // A hard link fails if the target exists, which makes commit atomic and
  // write-once even against concurrent writers.
  fs::create_hard_link(tmp, target, ec);
  fs::remove(tmp);
  if (ec) {
    if (ec == std::errc::file_exists) {
      throw ConflictError("artifact already committed: " + std::string(what));
    }
    throw IoError("cannot commit " + target.string() + ": " + ec.message());
  }
  ++writes_;
}

std::string ArtifactStore::put_bytes(std::string_view key,
                                     std::span<const std::byte> bytes) {
  write_once(path_for(key), bytes, key);
  return std::string(key);
}

std::vector<std::byte> ArtifactStore::get_bytes(std::string_view key) const {
  const auto p = path_for(key);
  if (!fs::exists(p)) throw NotFoundError("no artifact " + std::string(key));
  return read_file(p);
}

std::string ArtifactStore::put_json(std::string_view key, const nlohmann::json& value) {
  const std::string text = dump_json(value);
  return put_bytes(key, std::as_bytes(std::span(text.data(), text.size())));
}

nlohmann::json ArtifactStore::get_json(std::string_view key) const {
  const auto bytes = get_bytes(key);
  try {
    return nlohmann::json::parse(reinterpret_cast<const char*>(bytes.data()),
                                 reinterpret_cast<const char*>(bytes.data()) + bytes.size());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("artifact " + std::string(key) + ": " + e.what());
  }
}

std::string ArtifactStore::put_tensor(std::string_view key, const TensorBlob& blob) {
  const auto bytes = encode_tensor(blob);
  return put_bytes(key, bytes);
}

TensorBlob ArtifactStore::get_tensor(std::string_view key) const {
  return decode_tensor(get_bytes(key));
}

TensorBlob ArtifactStore::get_tensor_slice(std::string_view key,
                                           std::uint64_t index) const {
  const auto p = path_for(key);
  if (!fs::exists(p)) throw NotFoundError("no artifact " + std::string(key));
  return read_tensor_slice(p, index);
}

std::vector<std::string> ArtifactStore::list(std::string_view dataset,
                                             std::string_view stage,
                                             std::string_view sub) const {
  if (!is_safe_component(dataset) || !is_stage(stage) ||
      (!sub.empty() && !is_safe_component(sub))) {
    throw ValidationError("bad list arguments");
  }
  fs::path dir = root_ / "datasets" / std::string(dataset) / std::string(stage);
  if (!sub.empty()) dir /= std::string(sub);
  std::vector<std::string> names;
  if (!fs::is_directory(dir)) return names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && !name.starts_with(".")) names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<std::string> ArtifactStore::datasets() const {
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(root_ / "datasets")) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) {
      ids.push_back(entry.path().filename().string());
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

bool ArtifactStore::has_manifest(std::string_view dataset) const {
  if (!is_safe_component(dataset)) return false;
  return fs::exists(root_ / "datasets" / std::string(dataset) / "manifest.json");
}

void ArtifactStore::put_manifest(std::string_view dataset, const nlohmann::json& manifest) {
  if (!is_safe_component(dataset)) {
    throw ValidationError("bad dataset id '" + std::string(dataset) + "'");
  }
  const std::string text = dump_json(manifest);
  write_once(root_ / "datasets" / std::string(dataset) / "manifest.json",
             std::as_bytes(std::span(text.data(), text.size())),
             std::string(dataset) + "/manifest");
}

nlohmann::json ArtifactStore::get_manifest(std::string_view dataset) const {
  if (!has_manifest(dataset)) {
    throw NotFoundError("no dataset '" + std::string(dataset) + "'");
  }
  const auto bytes = read_file(root_ / "datasets" / std::string(dataset) / "manifest.json");
  return nlohmann::json::parse(reinterpret_cast<const char*>(bytes.data()),
                               reinterpret_cast<const char*>(bytes.data()) + bytes.size());
}

}  // namespace capscope::store
