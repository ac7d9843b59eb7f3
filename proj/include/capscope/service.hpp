#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "capscope/error.hpp"
#include "capscope/model_adapter.hpp"
#include "capscope/segments.hpp"
#include "capscope/steering.hpp"
#include "capscope/store.hpp"

namespace capscope::service {

/// Negative, non-finite or wrongly sized steering weights (HTTP 422).
class InvalidWeightsError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct PipelineConfig {
  segments::FilterParams filter{};
  std::size_t layer = 7;
  std::size_t coverage_k = 3;
  bool clamp_gradients = true;
  std::string prompt{steer::kDefaultPrompt};
  std::string projector = "tsne";
  std::uint64_t seed = 0;
  std::size_t histogram_bins = 20;

  static PipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct ServiceConfig {
  std::filesystem::path store_root = "store";
  nlohmann::json adapter = {{"name", "mock"}};
  std::filesystem::path base_dir = ".";  // relative adapter paths resolve here
  PipelineConfig pipeline{};
  std::string host = "127.0.0.1";
  int port = 8080;

  static ServiceConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  /// Reads `path` (or $CAPSCOPE_CONFIG when empty; defaults when neither is
  /// set), then applies $CAPSCOPE_STORE.
  static ServiceConfig load(const std::filesystem::path& path = {});
};

struct ManifestRecord {
  std::string image_id;
  std::string path;
  std::size_t width = 0;
  std::size_t height = 0;
  std::string label;
  std::string split;

  ImageRef image() const { return {image_id, width, height, path}; }
};

/// records plus the configuration snapshot every artifact of the dataset is
/// computed under.
struct DatasetManifest {
  std::string dataset_id;
  std::vector<ManifestRecord> records;
  PipelineConfig config{};
  std::string adapter_name = "mock";
  std::string stop_words_version;

  /// Throws ValidationError on duplicate image ids or invalid images.
  void validate() const;
  const ManifestRecord& record(const std::string& image_id) const;
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Writes the manifest (write-once). Throws ConflictError when the dataset
/// already has one.
void register_dataset(store::ArtifactStore& store, DatasetManifest manifest);
DatasetManifest load_manifest(const store::ArtifactStore& store, const std::string& dataset);

inline constexpr const char* kStageNames[] = {"caption", "score",     "segment",
                                              "embed",   "associate", "graph"};
inline constexpr std::size_t kStageCount = 6;

enum class JobState { pending, running, done, failed };
std::string_view to_string(JobState s) noexcept;

struct ImageFailure {
  std::string image_id;
  std::string stage;
  std::string kind;
  std::string message;
};

/// Progress of one ingest run. Stages run in order; counts only grow.
class IngestJob {
 public:
  IngestJob(std::string job_id, std::string dataset_id);

  const std::string& job_id() const noexcept { return job_id_; }
  const std::string& dataset_id() const noexcept { return dataset_id_; }

  JobState state() const;
  void set_state(JobState s, std::string error = {});
  void set_total(std::size_t stage, std::size_t total);
  void advance(std::size_t stage);
  void add_failure(ImageFailure f);
  void add_writes(std::size_t n);

  std::vector<ImageFailure> failures() const;
  std::size_t writes() const;
  nlohmann::json to_json() const;

 private:
  mutable std::mutex mu_;
  std::string job_id_;
  std::string dataset_id_;
  JobState state_ = JobState::pending;
  std::string error_;
  std::array<std::size_t, kStageCount> done_{};
  std::array<std::size_t, kStageCount> total_{};
  std::vector<ImageFailure> failures_;
  std::size_t writes_ = 0;
};

/// Runs caption -> score -> segment -> embed -> associate -> graph over the
/// manifest's images, committing each artifact once. Already committed
/// artifacts are skipped, so a re-run writes nothing. Per-image failures are
/// logged to reports/ingest-failures.json and the image is skipped by later
/// stages. The job ends failed only on a dataset-level error or when every
/// image failed.
void run_ingest(store::ArtifactStore& store, const std::string& dataset, ModelAdapter& adapter,
                IngestJob& job);
std::shared_ptr<IngestJob> run_ingest(store::ArtifactStore& store, const std::string& dataset,
                                      ModelAdapter& adapter);

/// Loads a stored attention bundle for one layer only.
AttentionBundle load_bundle_layer(const store::ArtifactStore& store, const std::string& dataset,
                                  const std::string& image_id, std::size_t layer);

// Read-side queries shared by the HTTP API and the command line. All throw
// NotFoundError for unknown datasets, segments or missing artifacts and
// ValidationError for bad parameters.

nlohmann::json list_datasets(const store::ArtifactStore& store);
nlohmann::json graph_query(const store::ArtifactStore& store, const std::string& dataset,
                           std::int64_t min_node, std::int64_t min_edge);
nlohmann::json histogram_query(const store::ArtifactStore& store, const std::string& dataset,
                               std::optional<std::size_t> bins);
nlohmann::json portions_query(const store::ArtifactStore& store, const std::string& dataset,
                              double lo, double hi);
/// color = "coverage" | "attention"; attention needs `word`.
nlohmann::json segments_query(const store::ArtifactStore& store, const std::string& dataset,
                              const std::string& color, const std::string& word);
/// Union association matrix; cells of other images are null.
nlohmann::json association_query(const store::ArtifactStore& store, const std::string& dataset);
nlohmann::json coverage_query(const store::ArtifactStore& store, const std::string& dataset,
                              std::size_t k);

struct SegmentDetail {
  nlohmann::json body;               // everything but the image
  std::vector<std::byte> heatmap;   // BMP, empty when no word applies
};

/// Mask, caption with highlight spans for the segment's top words, and the
/// heat map of `word` (or of its top word) over the segment.
SegmentDetail segment_detail(const store::ArtifactStore& store, const std::string& segment_id,
                             const std::string& word);

/// POST /steer body: {image_id, dataset?, prompt?, selected_patches?, weight?,
/// patch_weights?, pixels?, target_words?}. Stores the result under the
/// dataset's reports and returns it.
nlohmann::json steer_query(store::ArtifactStore& store, ModelAdapter& adapter,
                           const nlohmann::json& body);
/// POST /steer/batch body: {image_ids?, dataset?, prompt, target_words, weights?}.
nlohmann::json steer_batch_query(store::ArtifactStore& store, ModelAdapter& adapter,
                                 const nlohmann::json& body);

/// Finds the dataset whose manifest lists `image_id`.
std::string dataset_of_image(const store::ArtifactStore& store, const std::string& image_id);

}  // namespace capscope::service
