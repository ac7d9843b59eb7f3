#include "capscope/service.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "capscope/association.hpp"
#include "capscope/corpus.hpp"
#include "capscope/hash.hpp"
#include "capscope/rle.hpp"
#include "capscope/text.hpp"

namespace capscope::service {

using nlohmann::json;
using store::ArtifactStore;

namespace {

std::string key(const std::string& dataset, std::string_view stage, const std::string& name) {
  return dataset + "/" + std::string(stage) + "/" + name;
}

enum StageIndex : std::size_t { kCaption, kScore, kSegment, kEmbed, kAssociate, kGraph };

void check_finite_weights(std::span<const double> w, std::size_t patches) {
  if (w.size() != patches) {
    throw InvalidWeightsError("patch_weights has " + std::to_string(w.size()) +
                              " entries, expected " + std::to_string(patches));
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i]) || w[i] < 0.0) {
      throw InvalidWeightsError("patch weight " + std::to_string(i) +
                                " must be a finite non-negative number");
    }
  }
}

template <typename T>
T field(const json& j, const char* name) {
  try {
    return j.at(name).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("field '") + name + "': " + e.what());
  }
}

template <typename T>
T field_or(const json& j, const char* name, T fallback) {
  if (!j.contains(name) || j[name].is_null()) return fallback;
  return field<T>(j, name);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and manifests

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  c.filter.min_area_frac = field_or(j, "min_area_frac", c.filter.min_area_frac);
  c.filter.iou_thresh = field_or(j, "iou_thresh", c.filter.iou_thresh);
  c.layer = field_or(j, "layer", c.layer);
  c.coverage_k = field_or(j, "coverage_k", c.coverage_k);
  c.clamp_gradients = field_or(j, "clamp_gradients", c.clamp_gradients);
  c.prompt = field_or(j, "prompt", c.prompt);
  c.projector = field_or(j, "projector", c.projector);
  c.seed = field_or(j, "seed", c.seed);
  c.histogram_bins = field_or(j, "histogram_bins", c.histogram_bins);
  if (c.coverage_k == 0) throw ValidationError("coverage_k must be at least 1");
  if (c.histogram_bins == 0) throw ValidationError("histogram_bins must be at least 1");
  if (c.filter.min_area_frac < 0.0 || c.filter.min_area_frac > 1.0) {
    throw ValidationError("min_area_frac must lie in [0, 1]");
  }
  if (c.filter.iou_thresh < 0.0 || c.filter.iou_thresh > 1.0) {
    throw ValidationError("iou_thresh must lie in [0, 1]");
  }
  segments::make_projector(c.projector);
  return c;
}

json PipelineConfig::to_json() const {
  return {{"min_area_frac", filter.min_area_frac},
          {"iou_thresh", filter.iou_thresh},
          {"layer", layer},
          {"coverage_k", coverage_k},
          {"clamp_gradients", clamp_gradients},
          {"prompt", prompt},
          {"projector", projector},
          {"seed", seed},
          {"histogram_bins", histogram_bins}};
}

ServiceConfig ServiceConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  ServiceConfig c;
  c.base_dir = base_dir;
  if (j.contains("store")) {
    c.store_root = field<std::string>(j, "store");
    if (c.store_root.is_relative()) c.store_root = base_dir / c.store_root;
  }
  if (j.contains("adapter")) c.adapter = j["adapter"];
  if (j.contains("pipeline")) c.pipeline = PipelineConfig::from_json(j["pipeline"]);
  if (j.contains("server")) {
    c.host = field_or(j["server"], "host", c.host);
    c.port = field_or(j["server"], "port", c.port);
  }
  return c;
}

ServiceConfig ServiceConfig::load(const std::filesystem::path& path) {
  std::filesystem::path file = path;
  if (file.empty()) {
    if (const char* env = std::getenv("CAPSCOPE_CONFIG"); env && *env) file = env;
  }
  ServiceConfig c;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config " + file.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ParseError("config " + file.string() + ": " + e.what());
    }
    c = from_json(j, file.parent_path().empty() ? "." : file.parent_path());
  }
  if (const char* env = std::getenv("CAPSCOPE_STORE"); env && *env) c.store_root = env;
  return c;
}

void DatasetManifest::validate() const {
  if (!store::is_safe_component(dataset_id)) {
    throw ValidationError("invalid dataset id '" + dataset_id + "'");
  }
  std::set<std::string> seen;
  for (const auto& r : records) {
    validate_image(r.image());
    if (!seen.insert(r.image_id).second) {
      throw ValidationError("duplicate image id '" + r.image_id + "' in manifest");
    }
  }
}

const ManifestRecord& DatasetManifest::record(const std::string& image_id) const {
  for (const auto& r : records) {
    if (r.image_id == image_id) return r;
  }
  throw NotFoundError("image '" + image_id + "' is not in dataset '" + dataset_id + "'");
}

json DatasetManifest::to_json() const {
  json recs = json::array();
  for (const auto& r : records) {
    recs.push_back({{"image_id", r.image_id},
                    {"path", r.path},
                    {"width", r.width},
                    {"height", r.height},
                    {"label", r.label},
                    {"split", r.split}});
  }
  json cfg = config.to_json();
  cfg["adapter"] = adapter_name;
  cfg["stop_words_version"] = stop_words_version;
  return {{"dataset_id", dataset_id}, {"records", recs}, {"config", cfg}};
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.dataset_id = field<std::string>(j, "dataset_id");
  for (const auto& r : j.value("records", json::array())) {
    ManifestRecord rec;
    rec.image_id = field<std::string>(r, "image_id");
    rec.path = field_or<std::string>(r, "path", "");
    rec.width = field<std::size_t>(r, "width");
    rec.height = field<std::size_t>(r, "height");
    rec.label = field_or<std::string>(r, "label", "");
    rec.split = field_or<std::string>(r, "split", "");
    m.records.push_back(std::move(rec));
  }
  const json cfg = j.value("config", json::object());
  m.config = PipelineConfig::from_json(cfg);
  m.adapter_name = field_or<std::string>(cfg, "adapter", m.adapter_name);
  m.stop_words_version = field_or<std::string>(cfg, "stop_words_version", "");
  m.validate();
  return m;
}

void register_dataset(ArtifactStore& store, DatasetManifest manifest) {
  if (manifest.stop_words_version.empty()) {
    manifest.stop_words_version = std::string(text::kStopWordsVersion);
  }
  manifest.validate();
  store.put_manifest(manifest.dataset_id, manifest.to_json());
}

DatasetManifest load_manifest(const ArtifactStore& store, const std::string& dataset) {
  if (!store::is_safe_component(dataset) || !store.has_manifest(dataset)) {
    throw NotFoundError("unknown dataset '" + dataset + "'");
  }
  return DatasetManifest::from_json(store.get_manifest(dataset));
}

// ---------------------------------------------------------------------------
// Jobs

std::string_view to_string(JobState s) noexcept {
  switch (s) {
    case JobState::pending: return "pending";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "?";
}

IngestJob::IngestJob(std::string job_id, std::string dataset_id)
    : job_id_(std::move(job_id)), dataset_id_(std::move(dataset_id)) {}

JobState IngestJob::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

void IngestJob::set_state(JobState s, std::string error) {
  std::lock_guard lock(mu_);
  state_ = s;
  error_ = std::move(error);
}

void IngestJob::set_total(std::size_t stage, std::size_t total) {
  std::lock_guard lock(mu_);
  total_.at(stage) = total;
}

void IngestJob::advance(std::size_t stage) {
  std::lock_guard lock(mu_);
  ++done_.at(stage);
}

void IngestJob::add_failure(ImageFailure f) {
  std::lock_guard lock(mu_);
  failures_.push_back(std::move(f));
}

void IngestJob::add_writes(std::size_t n) {
  std::lock_guard lock(mu_);
  writes_ += n;
}

std::vector<ImageFailure> IngestJob::failures() const {
  std::lock_guard lock(mu_);
  return failures_;
}

std::size_t IngestJob::writes() const {
  std::lock_guard lock(mu_);
  return writes_;
}

json IngestJob::to_json() const {
  std::lock_guard lock(mu_);
  json stages = json::array();
  for (std::size_t s = 0; s < kStageCount; ++s) {
    stages.push_back({{"stage", kStageNames[s]}, {"done", done_[s]}, {"total", total_[s]}});
  }
  json failures = json::array();
  for (const auto& f : failures_) {
    failures.push_back(
        {{"image_id", f.image_id}, {"stage", f.stage}, {"kind", f.kind}, {"message", f.message}});
  }
  json j = {{"job_id", job_id_},     {"dataset_id", dataset_id_}, {"state", to_string(state_)},
            {"stages", stages},      {"failures", failures},      {"writes", writes_}};
  if (!error_.empty()) j["error"] = error_;
  return j;
}

// ---------------------------------------------------------------------------
// Ingest

namespace {

class Ingest {
 public:
  Ingest(ArtifactStore& store, DatasetManifest manifest, ModelAdapter& adapter, IngestJob& job)
      : store_(store), m_(std::move(manifest)), adapter_(adapter), job_(job),
        ok_(m_.records.size(), 1) {}

  void run() {
    const std::size_t n = m_.records.size();
    for (std::size_t s = 0; s < kStageCount; ++s) job_.set_total(s, s == kGraph ? 1 : n);

    per_image(kCaption, [this](const ManifestRecord& r) { caption(r); });
    per_image(kScore, [this](const ManifestRecord& r) { score(r); });
    per_image(kSegment, [this](const ManifestRecord& r) { segment(r); });
    per_image(kEmbed, [this](const ManifestRecord& r) { embed(r); });
    project();
    per_image(kAssociate, [this](const ManifestRecord& r) { associate(r); });
    segments_report();
    graph();
    job_.advance(kGraph);
    failures_report();
  }

  bool any_succeeded() const {
    return std::any_of(ok_.begin(), ok_.end(), [](auto v) { return v != 0; });
  }

 private:
  std::string k(std::string_view stage, const std::string& name) const {
    return key(m_.dataset_id, stage, name);
  }

  void put_json(const std::string& key, const json& v) {
    store_.put_json(key, v);
    job_.add_writes(1);
  }
  void put_tensor(const std::string& key, const store::TensorBlob& t) {
    store_.put_tensor(key, t);
    job_.add_writes(1);
  }

  template <typename F>
  void per_image(std::size_t stage, F&& fn) {
    const std::size_t n = m_.records.size();
    const int threads =
        static_cast<int>(std::max<std::size_t>(1, std::min(adapter_.max_concurrency(), n)));
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      if (!ok_[i]) continue;
      const auto& r = m_.records[i];
      try {
        fn(r);
        job_.advance(stage);
      } catch (const Error& e) {
        ok_[i] = 0;
        job_.add_failure({r.image_id, kStageNames[stage], std::string(to_string(e.kind())),
                          e.what()});
      }
    }
  }

  void caption(const ManifestRecord& r) {
    const auto kc = k("captions", r.image_id + ".json");
    if (store_.exists(kc)) return;
    const auto c = adapter_.generate_caption(r.image(), m_.config.prompt);
    put_json(kc, {{"image_id", r.image_id},
                  {"text", c.text},
                  {"tokens", c.tokens},
                  {"prompt", c.prompt},
                  {"decode",
                   {{"strategy", c.decode.strategy},
                    {"max_length", c.decode.max_length},
                    {"seed", c.decode.seed}}}});
  }

  void score(const ManifestRecord& r) {
    const auto ka = k("tensors", r.image_id + ".attention");
    const auto kg = k("tensors", r.image_id + ".gradient");
    const auto km = k("tensors", r.image_id + ".json");
    if (store_.exists(ka) && store_.exists(kg) && store_.exists(km)) return;
    const auto text = store_.get_json(k("captions", r.image_id + ".json")).at("text").get<std::string>();
    const auto b = adapter_.score_and_attend(r.image(), text, AttentionSource::itm);
    const std::vector<std::uint64_t> dims = {b.layers(), b.heads(), b.patches(), b.token_count()};
    if (!store_.exists(ka)) put_tensor(ka, {dims, b.attention_data()});
    if (!store_.exists(kg)) put_tensor(kg, {dims, b.gradient_data()});
    if (!store_.exists(km)) {
      put_json(km, {{"image_id", r.image_id},
                    {"source", to_string(b.source())},
                    {"layers", b.layers()},
                    {"heads", b.heads()},
                    {"grid", b.grid()},
                    {"tokens", b.tokens()},
                    {"itm_score", b.itm_score().value_or(0.0)}});
    }
  }

  void segment(const ManifestRecord& r) {
    const auto km = k("masks", r.image_id + ".json");
    if (store_.exists(km)) return;
    const auto image = r.image();
    const auto raw = adapter_.segment_image(image);
    const auto kept = segments::filter_segment_indices(raw, image, m_.config.filter);
    json segs = json::array();
    const double total = static_cast<double>(image.width) * static_cast<double>(image.height);
    for (std::size_t s = 0; s < kept.size(); ++s) {
      const auto& mask = raw[kept[s]].bitmap;
      segs.push_back({{"segment_id", segments::segment_id(r.image_id, s)},
                      {"raw_index", kept[s]},
                      {"area", mask.area()},
                      {"area_fraction", static_cast<double>(mask.area()) / total},
                      {"mask", store::rle_to_json(mask)}});
    }
    put_json(km, {{"image_id", r.image_id},
                  {"width", image.width},
                  {"height", image.height},
                  {"raw_count", raw.size()},
                  {"segments", segs}});
  }

  std::vector<segments::SegmentRecord> load_segments(const ManifestRecord& r) const {
    const auto j = store_.get_json(k("masks", r.image_id + ".json"));
    std::vector<segments::SegmentRecord> out;
    for (const auto& s : j.at("segments")) {
      segments::SegmentRecord rec;
      rec.segment_id = s.at("segment_id").get<std::string>();
      rec.image_id = r.image_id;
      rec.mask = store::rle_from_json(s.at("mask"));
      rec.area_fraction = s.at("area_fraction").get<double>();
      out.push_back(std::move(rec));
    }
    return out;
  }

  void embed(const ManifestRecord& r) {
    const auto ke = k("tensors", r.image_id + ".embedding");
    if (store_.exists(ke)) return;
    const auto segs = load_segments(r);
    const auto image = r.image();
    const std::size_t d = adapter_.embedding_dim();
    store::TensorBlob t{{segs.size(), d}, {}};
    for (const auto& s : segs) {
      const auto e = adapter_.embed_segment(image, RawMask{r.image_id, s.mask});
      if (e.size() != d) throw AdapterError("embedding has the wrong dimension");
      for (double v : e) t.values.push_back(static_cast<float>(v));
    }
    put_tensor(ke, t);
  }

  void project() {
    const auto kp = k("reports", "projection.json");
    if (store_.exists(kp)) return;
    std::vector<std::string> ids;
    std::vector<std::vector<double>> points;
    for (std::size_t i = 0; i < m_.records.size(); ++i) {
      if (!ok_[i]) continue;
      const auto& r = m_.records[i];
      const auto t = store_.get_tensor(k("tensors", r.image_id + ".embedding"));
      const auto segs = load_segments(r);
      const std::size_t d = t.dims.at(1);
      for (std::size_t s = 0; s < segs.size(); ++s) {
        ids.push_back(segs[s].segment_id);
        points.emplace_back(t.values.begin() + static_cast<std::ptrdiff_t>(s * d),
                            t.values.begin() + static_cast<std::ptrdiff_t>((s + 1) * d));
      }
    }
    json pts = json::array();
    if (!points.empty()) {
      const auto projector = segments::make_projector(m_.config.projector);
      const auto xy = segments::project_embeddings(points, m_.config.seed, projector.get());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        pts.push_back({{"segment_id", ids[i]}, {"x", xy[i][0]}, {"y", xy[i][1]}});
      }
    }
    put_json(kp, {{"projector", m_.config.projector}, {"seed", m_.config.seed}, {"points", pts}});
  }

  corpus::CaptionRecord caption_record(const ManifestRecord& r) const {
    const auto c = store_.get_json(k("captions", r.image_id + ".json"));
    const auto meta = store_.get_json(k("tensors", r.image_id + ".json"));
    return corpus::CaptionRecord::make(r.image_id, c.at("text").get<std::string>(),
                                       c.at("prompt").get<std::string>(),
                                       meta.at("itm_score").get<double>());
  }

  void associate(const ManifestRecord& r) {
    const auto ks = k("matrices", r.image_id + ".scores");
    const auto ki = k("matrices", r.image_id + ".json");
    if (store_.exists(ks) && store_.exists(ki)) return;
    const auto segs = load_segments(r);
    const auto bundle = load_bundle_layer(store_, m_.dataset_id, r.image_id, m_.config.layer);
    const auto m = assoc::build_association(r.image(), caption_record(r), segs, bundle, 0,
                                            m_.config.clamp_gradients);
    store::TensorBlob t{{m.row_count(), m.col_count()}, {}};
    for (double v : m.values()) t.values.push_back(static_cast<float>(v));
    if (!store_.exists(ks)) put_tensor(ks, t);
    if (!store_.exists(ki)) {
      auto index = assoc::index_to_json(m, m_.config.layer);
      index["image_id"] = r.image_id;
      put_json(ki, index);
    }
  }

  void segments_report() {
    const auto kr = k("reports", "segments.json");
    if (store_.exists(kr)) return;
    std::vector<assoc::AssociationMatrix> matrices;
    std::vector<segments::SegmentRecord> all;
    for (std::size_t i = 0; i < m_.records.size(); ++i) {
      if (!ok_[i]) continue;
      const auto& r = m_.records[i];
      matrices.push_back(load_matrix(r.image_id));
      for (auto& s : load_segments(r)) all.push_back(std::move(s));
    }
    const auto cov = assoc::coverage(matrices, m_.config.coverage_k);
    std::map<std::string, std::array<double, 2>> xy;
    const auto projection = store_.get_json(k("reports", "projection.json"));
    for (const auto& p : projection.at("points")) {
      xy[p.at("segment_id").get<std::string>()] = {p.at("x").get<double>(), p.at("y").get<double>()};
    }
    json list = json::array();
    for (const auto& s : all) {
      const auto p = xy.count(s.segment_id) ? xy.at(s.segment_id) : std::array<double, 2>{0, 0};
      const auto c = cov.count(s.segment_id) ? cov.at(s.segment_id) : 0;
      list.push_back({{"segment_id", s.segment_id},
                      {"image_id", s.image_id},
                      {"area_fraction", s.area_fraction},
                      {"x", p[0]},
                      {"y", p[1]},
                      {"coverage", c}});
    }
    put_json(kr, {{"coverage_k", m_.config.coverage_k}, {"segments", list}});
  }

  assoc::AssociationMatrix load_matrix(const std::string& image_id) const;

  void graph() {
    const auto kc = k("graphs", "corpus.json");
    const auto kg = k("graphs", "cooccurrence.json");
    if (store_.exists(kc) && store_.exists(kg)) return;
    std::vector<corpus::CaptionRecord> records;
    for (std::size_t i = 0; i < m_.records.size(); ++i) {
      if (ok_[i]) records.push_back(caption_record(m_.records[i]));
    }
    if (!store_.exists(kc)) {
      json recs = json::array();
      for (const auto& r : records) recs.push_back(corpus::record_to_json(r));
      put_json(kc, {{"records", recs}});
    }
    if (!store_.exists(kg)) put_json(kg, corpus::graph_to_json(corpus::build_cooccurrence(records)));
  }

  void failures_report() {
    const auto failures = job_.failures();
    const auto kf = k("reports", "ingest-failures.json");
    if (failures.empty() || store_.exists(kf)) return;
    json list = json::array();
    for (const auto& f : failures) {
      list.push_back(
          {{"image_id", f.image_id}, {"stage", f.stage}, {"kind", f.kind}, {"message", f.message}});
    }
    put_json(kf, {{"failures", list}});
  }

  ArtifactStore& store_;
  DatasetManifest m_;
  ModelAdapter& adapter_;
  IngestJob& job_;
  std::vector<std::uint8_t> ok_;
};

assoc::AssociationMatrix load_stored_matrix(const ArtifactStore& store, const std::string& dataset,
                                            const std::string& image_id) {
  const auto ki = key(dataset, "matrices", image_id + ".json");
  if (!store.exists(ki)) throw NotFoundError("no association matrix for '" + image_id + "'");
  const auto index = store.get_json(ki);
  const auto rows = index.at("rows").get<std::vector<std::string>>();
  const auto cols = index.at("cols").get<std::vector<std::string>>();
  assoc::AssociationMatrix m(assoc::Scope::per_image, rows,
                             std::vector<std::string>(rows.size(), image_id), cols);
  const auto t = store.get_tensor(key(dataset, "matrices", image_id + ".scores"));
  if (t.values.size() != rows.size() * cols.size()) {
    throw DataError("stored matrix for '" + image_id + "' does not match its index");
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) m.set(r, c, t.values[r * cols.size() + c]);
  }
  return m;
}

assoc::AssociationMatrix Ingest::load_matrix(const std::string& image_id) const {
  return load_stored_matrix(store_, m_.dataset_id, image_id);
}

}  // namespace

void run_ingest(ArtifactStore& store, const std::string& dataset, ModelAdapter& adapter,
                IngestJob& job) {
  job.set_state(JobState::running);
  try {
    Ingest ingest(store, load_manifest(store, dataset), adapter, job);
    ingest.run();
    if (!ingest.any_succeeded() && !job.failures().empty()) {
      job.set_state(JobState::failed, "every image failed");
    } else {
      job.set_state(JobState::done);
    }
  } catch (const std::exception& e) {
    job.set_state(JobState::failed, e.what());
  }
}

std::shared_ptr<IngestJob> run_ingest(ArtifactStore& store, const std::string& dataset,
                                      ModelAdapter& adapter) {
  auto job = std::make_shared<IngestJob>(dataset + "-ingest", dataset);
  run_ingest(store, dataset, adapter, *job);
  return job;
}

AttentionBundle load_bundle_layer(const ArtifactStore& store, const std::string& dataset,
                                  const std::string& image_id, std::size_t layer) {
  const auto km = key(dataset, "tensors", image_id + ".json");
  if (!store.exists(km)) throw NotFoundError("no attention tensors for '" + image_id + "'");
  const auto meta = store.get_json(km);
  const auto layers = meta.at("layers").get<std::size_t>();
  if (layer >= layers) {
    throw ValidationError("layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(layers) + ")");
  }
  auto a = store.get_tensor_slice(key(dataset, "tensors", image_id + ".attention"), layer);
  auto g = store.get_tensor_slice(key(dataset, "tensors", image_id + ".gradient"), layer);
  return AttentionBundle(parse_attention_source(meta.at("source").get<std::string>()), 1,
                         meta.at("heads").get<std::size_t>(), meta.at("grid").get<std::size_t>(),
                         meta.at("tokens").get<std::vector<std::string>>(), std::move(a.values),
                         std::move(g.values), meta.at("itm_score").get<double>());
}

// ---------------------------------------------------------------------------
// Queries

namespace {

json get_artifact(const ArtifactStore& store, const std::string& dataset, std::string_view stage,
                  const std::string& name) {
  const auto k = key(dataset, stage, name);
  if (!store.exists(k)) {
    throw NotFoundError("dataset '" + dataset + "' has no " + std::string(stage) + "/" + name +
                        " (not ingested?)");
  }
  return store.get_json(k);
}

std::vector<corpus::CaptionRecord> load_records(const ArtifactStore& store,
                                                const std::string& dataset) {
  load_manifest(store, dataset);
  std::vector<corpus::CaptionRecord> out;
  const auto corpus_json = get_artifact(store, dataset, "graphs", "corpus.json");
  for (const auto& r : corpus_json.at("records")) {
    out.push_back(corpus::record_from_json(r));
  }
  return out;
}

std::vector<assoc::AssociationMatrix> load_matrices(const ArtifactStore& store,
                                                    const std::string& dataset) {
  const auto manifest = load_manifest(store, dataset);
  std::vector<assoc::AssociationMatrix> out;
  for (const auto& r : manifest.records) {
    if (store.exists(key(dataset, "matrices", r.image_id + ".json"))) {
      out.push_back(load_stored_matrix(store, dataset, r.image_id));
    }
  }
  return out;
}

json optional_cell(const assoc::AssociationMatrix& m, std::size_t r, std::size_t c) {
  const auto v = m.at(r, c);
  return v ? json(*v) : json(nullptr);
}

}  // namespace

json list_datasets(const ArtifactStore& store) {
  json out = json::array();
  for (const auto& id : store.datasets()) {
    if (!store.has_manifest(id)) continue;
    const auto m = load_manifest(store, id);
    out.push_back({{"dataset_id", id},
                   {"images", m.records.size()},
                   {"ingested", store.exists(key(id, "graphs", "cooccurrence.json"))},
                   {"config", m.to_json().at("config")}});
  }
  return out;
}

json graph_query(const ArtifactStore& store, const std::string& dataset, std::int64_t min_node,
                 std::int64_t min_edge) {
  load_manifest(store, dataset);
  if (min_node < 0 || min_edge < 0) throw ValidationError("filter thresholds must be >= 0");
  const auto graph =
      corpus::graph_from_json(get_artifact(store, dataset, "graphs", "cooccurrence.json"));
  return corpus::graph_to_json(corpus::filter_graph(graph, min_node, min_edge));
}

json histogram_query(const ArtifactStore& store, const std::string& dataset,
                     std::optional<std::size_t> bins) {
  const auto manifest = load_manifest(store, dataset);
  const auto records = load_records(store, dataset);
  std::vector<double> scores;
  for (const auto& r : records) scores.push_back(r.itm_score);
  return corpus::histogram_to_json(
      corpus::itm_histogram(scores, bins.value_or(manifest.config.histogram_bins)));
}

json portions_query(const ArtifactStore& store, const std::string& dataset, double lo, double hi) {
  const auto records = load_records(store, dataset);
  return {{"lo", lo}, {"hi", hi}, {"portions", corpus::word_portions_in_range(records, lo, hi)}};
}

json segments_query(const ArtifactStore& store, const std::string& dataset,
                    const std::string& color, const std::string& word) {
  load_manifest(store, dataset);
  const auto report = get_artifact(store, dataset, "reports", "segments.json");
  std::map<std::string, double> colors;
  if (color == "attention") {
    if (word.empty()) throw ValidationError("color=attention needs a word");
    const auto matrices = load_matrices(store, dataset);
    colors = assoc::word_attention_colors(text::normalize_word(word),
                                          assoc::union_associations(matrices));
  } else if (color != "coverage" && !color.empty()) {
    throw ValidationError("color must be 'coverage' or 'attention'");
  }
  json list = json::array();
  for (auto s : report.at("segments")) {
    if (color == "attention") {
      const auto it = colors.find(s.at("segment_id").get<std::string>());
      s["value"] = it == colors.end() ? json(nullptr) : json(it->second);
    } else {
      s["value"] = s.at("coverage");
    }
    list.push_back(std::move(s));
  }
  return {{"dataset_id", dataset},
          {"color", color.empty() ? "coverage" : color},
          {"word", word},
          {"segments", list}};
}

json association_query(const ArtifactStore& store, const std::string& dataset) {
  const auto matrices = load_matrices(store, dataset);
  const auto u = assoc::union_associations(matrices);
  json values = json::array();
  for (std::size_t r = 0; r < u.row_count(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < u.col_count(); ++c) row.push_back(optional_cell(u, r, c));
    values.push_back(std::move(row));
  }
  return {{"dataset_id", dataset},
          {"rows", u.rows()},
          {"row_images", u.row_images()},
          {"cols", u.cols()},
          {"values", values}};
}

json coverage_query(const ArtifactStore& store, const std::string& dataset, std::size_t k) {
  if (k == 0) throw ValidationError("k must be at least 1");
  const auto matrices = load_matrices(store, dataset);
  return {{"dataset_id", dataset}, {"k", k}, {"coverage", assoc::coverage(matrices, k)}};
}

SegmentDetail segment_detail(const ArtifactStore& store, const std::string& segment_id,
                             const std::string& word) {
  std::string dataset;
  json seg;
  for (const auto& id : store.datasets()) {
    const auto k = key(id, "reports", "segments.json");
    if (!store.exists(k)) continue;
    const auto report = store.get_json(k);
    for (const auto& s : report.at("segments")) {
      if (s.at("segment_id") == segment_id) {
        dataset = id;
        seg = s;
        break;
      }
    }
    if (!dataset.empty()) break;
  }
  if (dataset.empty()) throw NotFoundError("unknown segment '" + segment_id + "'");

  const auto manifest = load_manifest(store, dataset);
  const auto image_id = seg.at("image_id").get<std::string>();
  const auto image = manifest.record(image_id).image();

  Mask mask;
  const auto masks = get_artifact(store, dataset, "masks", image_id + ".json");
  for (const auto& s : masks.at("segments")) {
    if (s.at("segment_id") == segment_id) mask = store::rle_from_json(s.at("mask"));
  }
  const auto caption = get_artifact(store, dataset, "captions", image_id + ".json");
  const auto text = caption.at("text").get<std::string>();
  const auto prompt = caption.at("prompt").get<std::string>();

  const auto matrix = load_stored_matrix(store, dataset, image_id);
  const auto top = assoc::top_words_for_segment(segment_id, matrix, manifest.config.coverage_k);
  std::map<std::string, double> top_scores(top.begin(), top.end());

  const auto rest = text::strip_prompt(text, prompt);
  const std::size_t offset = static_cast<std::size_t>(rest.data() - text.data());
  json highlights = json::array();
  for (const auto& tok : text::lex(text)) {
    if (tok.begin < offset || text::is_stop_word(tok.word)) continue;
    const auto norm = text::normalize_word(tok.word);
    if (const auto it = top_scores.find(norm); it != top_scores.end()) {
      highlights.push_back(
          {{"begin", tok.begin}, {"end", tok.end}, {"word", norm}, {"score", it->second}});
    }
  }
  json top_json = json::array();
  for (const auto& [w, s] : top) top_json.push_back({{"word", w}, {"score", s}});

  SegmentDetail out;
  std::string heat_word = word.empty() ? std::string() : text::normalize_word(word);
  if (heat_word.empty() && !top.empty()) heat_word = top.front().first;
  if (!heat_word.empty()) {
    const auto bundle = load_bundle_layer(store, dataset, image_id, manifest.config.layer);
    const auto c = assoc::compute_gradcam(bundle, 0, manifest.config.clamp_gradients);
    const auto cols = assoc::drop_stopword_columns(c, bundle.tokens(), prompt);
    const auto it = std::find(cols.words.begin(), cols.words.end(), heat_word);
    if (it == cols.words.end()) {
      throw NotFoundError("word '" + heat_word + "' is not in the caption of '" + image_id + "'");
    }
    const auto col = static_cast<std::size_t>(it - cols.words.begin());
    const auto resized =
        assoc::resize_map(assoc::column_grid(cols.values, col, bundle.grid()), image.width,
                          image.height);
    out.heatmap = assoc::render_heatmap_bmp(resized, mask);
  }

  out.body = {{"segment_id", segment_id},
              {"dataset_id", dataset},
              {"image_id", image_id},
              {"area_fraction", seg.at("area_fraction")},
              {"x", seg.at("x")},
              {"y", seg.at("y")},
              {"coverage", seg.at("coverage")},
              {"mask", store::rle_to_json(mask)},
              {"caption", {{"text", text}, {"prompt", prompt}, {"highlights", highlights}}},
              {"top_words", top_json},
              {"heatmap_word", heat_word.empty() ? json(nullptr) : json(heat_word)}};
  return out;
}

std::string dataset_of_image(const ArtifactStore& store, const std::string& image_id) {
  for (const auto& id : store.datasets()) {
    if (!store.has_manifest(id)) continue;
    for (const auto& r : load_manifest(store, id).records) {
      if (r.image_id == image_id) return id;
    }
  }
  throw NotFoundError("image '" + image_id + "' is not in any dataset");
}

namespace {

std::vector<double> request_weights(const json& body, std::size_t patches) {
  if (!body.contains("patch_weights")) return {};
  std::vector<double> w;
  try {
    w = body["patch_weights"].get<std::vector<double>>();
  } catch (const json::exception&) {
    throw InvalidWeightsError("patch_weights must be an array of numbers");
  }
  check_finite_weights(w, patches);
  return w;
}

std::set<std::string> target_set(const json& body) {
  return field_or<std::set<std::string>>(body, "target_words", {});
}

std::string store_report(ArtifactStore& store, const std::string& dataset, const std::string& sub,
                         const std::string& name, const json& value) {
  const auto k = dataset + "/reports/" + sub + "/" + name;
  if (!store.exists(k)) store.put_json(k, value);
  return k;
}

}  // namespace

json steer_query(ArtifactStore& store, ModelAdapter& adapter, const json& body) {
  if (!body.is_object()) throw ValidationError("request body must be an object");
  const auto image_id = field<std::string>(body, "image_id");
  auto dataset = field_or<std::string>(body, "dataset", "");
  if (dataset.empty()) dataset = dataset_of_image(store, image_id);
  const auto manifest = load_manifest(store, dataset);
  const auto image = manifest.record(image_id).image();
  const std::size_t p = adapter.patch_grid().per_side;

  const auto prompt = field_or<std::string>(body, "prompt", manifest.config.prompt);
  const double weight = field_or<double>(body, "weight", 1.0);
  if (!std::isfinite(weight) || weight < 0.0) {
    throw InvalidWeightsError("weight must be a finite non-negative number");
  }

  steer::SteerRequest req;
  if (auto w = request_weights(body, p * p); !w.empty()) {
    req.image_id = image_id;
    req.prompt = prompt;
    req.patch_weights = std::move(w);
    req.weight = weight;
  } else {
    auto selected = field_or<std::set<std::size_t>>(body, "selected_patches", {});
    if (body.contains("pixels")) {
      std::vector<steer::Pixel> pixels;
      for (const auto& px : body["pixels"]) {
        const auto xy = px.get<std::vector<std::size_t>>();
        if (xy.size() != 2) throw ValidationError("pixels must be [x, y] pairs");
        pixels.push_back({xy[0], xy[1]});
      }
      const auto more = steer::pixels_to_patches(pixels, image, p);
      selected.insert(more.begin(), more.end());
    }
    for (auto s : selected) {
      if (s >= p * p) throw InvalidWeightsError("selected patch " + std::to_string(s) + " out of range");
    }
    req = steer::SteerRequest::from_selection(image_id, prompt, selected, weight, p * p);
  }

  const auto targets = target_set(body);
  const auto result = steer::steer(req, image, adapter, targets, manifest.config.prompt);
  const auto digest = steer::weights_digest(req.patch_weights);

  json out = steer::result_to_json(result);
  out["image_id"] = image_id;
  out["dataset_id"] = dataset;
  out["prompt"] = prompt;
  out["weights_digest"] = digest;
  out["selected_patches"] = req.selected_patches;
  out["weight"] = req.weight;
  const auto name =
      image_id + "-" + hex64(fnv1a(prompt + "\n" + digest + "\n" + json(targets).dump())) + ".json";
  out["artifact"] = store_report(store, dataset, "steer", name, out);
  return out;
}

json steer_batch_query(ArtifactStore& store, ModelAdapter& adapter, const json& body) {
  if (!body.is_object()) throw ValidationError("request body must be an object");
  std::vector<std::string> ids = field_or<std::vector<std::string>>(body, "image_ids", {});
  std::string dataset = field_or<std::string>(body, "dataset", "");
  if (dataset.empty()) {
    if (ids.empty()) throw ValidationError("steer/batch needs image_ids or a dataset");
    dataset = dataset_of_image(store, ids.front());
  }
  const auto manifest = load_manifest(store, dataset);
  if (ids.empty()) {
    for (const auto& r : manifest.records) ids.push_back(r.image_id);
  }
  std::vector<ImageRef> images;
  for (const auto& id : ids) images.push_back(manifest.record(id).image());

  const std::size_t patches = adapter.patch_grid().per_side * adapter.patch_grid().per_side;
  std::map<std::string, std::vector<double>> weights;
  if (body.contains("weights")) {
    for (const auto& [id, w] : body["weights"].items()) {
      weights[id] = request_weights(json{{"patch_weights", w}}, patches);
    }
  }
  const auto prompt = field_or<std::string>(body, "prompt", manifest.config.prompt);
  const auto targets = target_set(body);
  const auto report =
      steer::steer_batch(images, prompt, targets, adapter, weights, manifest.config.prompt);

  json out = steer::report_to_json(report);
  out["dataset_id"] = dataset;
  out["prompt"] = prompt;
  out["target_words"] = targets;
  std::string digests;
  for (const auto& item : report.items) digests += item.image_id + ":" + item.weights_digest + ";";
  const auto name = hex64(fnv1a(prompt + "\n" + digests + "\n" + json(targets).dump())) + ".json";
  out["artifact"] = store_report(store, dataset, "steer-batch", name, out);
  return out;
}

}  // namespace capscope::service
