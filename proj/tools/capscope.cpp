// capscope: command-line front end over the artifact store and the HTTP API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "capscope/error.hpp"
#include "capscope/grounding.hpp"
#include "capscope/hash.hpp"
#include "capscope/server.hpp"
#include "capscope/service.hpp"
#include "capscope/store.hpp"

namespace {

using capscope::service::ServiceConfig;
using nlohmann::json;

struct Common {
  std::string dataset;
  std::string config;
  std::string out;
  std::string store;
};

void add_common(CLI::App* cmd, Common& c, bool dataset_required) {
  auto* d = cmd->add_option("--dataset,-d", c.dataset, "Dataset id");
  if (dataset_required) d->required();
  cmd->add_option("--config,-c", c.config, "Service config (JSON); default $CAPSCOPE_CONFIG");
  cmd->add_option("--out,-o", c.out, "Write the result here instead of stdout");
  cmd->add_option("--store", c.store, "Store root; overrides config and $CAPSCOPE_STORE");
}

ServiceConfig load_config(const Common& c) {
  auto cfg = ServiceConfig::load(c.config);
  if (!c.store.empty()) cfg.store_root = c.store;
  return cfg;
}

void emit(const Common& c, const std::string& text) {
  if (c.out.empty()) {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << '\n';
    return;
  }
  std::ofstream f(c.out, std::ios::binary);
  if (!f) throw capscope::IoError("cannot write " + c.out);
  f << text;
  if (!text.empty() && text.back() != '\n') f << '\n';
}

void emit(const Common& c, const json& j) { emit(c, j.dump(2)); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int exit_code(const capscope::Error& e) {
  switch (e.kind()) {
    case capscope::ErrorKind::adapter:
    case capscope::ErrorKind::io: return 2;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capscope: caption corpus analytics, segment association and caption steering"};
  app.require_subcommand(1);

  // ingest
  Common ingest_c;
  std::string manifest_path;
  auto* ingest = app.add_subcommand("ingest", "Run the ingest pipeline for a dataset");
  add_common(ingest, ingest_c, false);
  ingest->add_option("--manifest,-m", manifest_path,
                     "Register this manifest first (its dataset_id is used)");

  // graph
  Common graph_c;
  std::int64_t min_node = 1, min_edge = 1;
  auto* graph = app.add_subcommand("graph", "Co-occurrence graph with node/edge filters");
  add_common(graph, graph_c, true);
  graph->add_option("--min-node", min_node, "Drop nodes with a smaller count");
  graph->add_option("--min-edge", min_edge, "Drop edges with a smaller count");

  // histogram
  Common hist_c;
  std::size_t bins = 0;
  auto* histogram = app.add_subcommand("histogram", "ITM score histogram");
  add_common(histogram, hist_c, true);
  histogram->add_option("--bins", bins, "Bin count (default from the dataset config)");

  // portions
  Common port_c;
  double lo = 0.0, hi = 1.0;
  auto* portions = app.add_subcommand("portions", "Per-word portion of captions in a score range");
  add_common(portions, port_c, true);
  portions->add_option("--lo", lo, "Range start");
  portions->add_option("--hi", hi, "Range end");

  // segments
  Common seg_c;
  std::string color = "coverage", word, segment;
  auto* segs = app.add_subcommand("segments", "Segment scatterplot data, or one segment's detail");
  add_common(segs, seg_c, false);
  segs->add_option("--color", color, "coverage | attention");
  segs->add_option("--word", word, "Word for attention coloring or the heat map");
  segs->add_option("--segment", segment, "Show the detail of this segment id");
  std::string heatmap_out;
  segs->add_option("--heatmap", heatmap_out, "With --segment: write the heat map BMP here");

  // associate
  Common assoc_c;
  auto* associate = app.add_subcommand("associate", "Union segment x word association matrix");
  add_common(associate, assoc_c, true);

  // coverage
  Common cov_c;
  std::size_t k = 3;
  auto* coverage = app.add_subcommand("coverage", "Per-segment coverage for a given k");
  add_common(coverage, cov_c, true);
  coverage->add_option("--k", k, "Top-k segments per word");

  // ground-eval
  Common ground_c;
  std::string examples_path, variants = "all", format = "table";
  std::optional<std::size_t> head_layer;
  auto* ground = app.add_subcommand("ground-eval", "Pointing-game grounding accuracy per layer");
  add_common(ground, ground_c, false);
  ground->add_option("--examples,-e", examples_path, "Annotated examples (JSON)")->required();
  ground->add_option("--variant", variants,
                     "Comma list of ITM_GradCAM, ITM_CA, LM_GradCAM, LM_CA, or all");
  ground->add_option("--head-layer", head_layer, "Also report per-head accuracy at this layer");
  ground->add_option("--format", format, "table | json")->check(CLI::IsMember({"table", "json"}));

  // steer
  Common steer_c;
  std::string image, prompt, patches, pixels, targets;
  double weight = 1.0;
  auto* steer = app.add_subcommand("steer", "Generate a steered caption for one image");
  add_common(steer, steer_c, false);
  steer->add_option("--image,-i", image, "Image id")->required();
  steer->add_option("--prompt,-p", prompt, "Prompt (default from the dataset config)");
  steer->add_option("--patches", patches, "Comma list of patch indices");
  steer->add_option("--pixels", pixels, "Comma list of x:y pixels; their patches are selected");
  steer->add_option("--weight,-w", weight, "Weight of the selected patches");
  steer->add_option("--targets", targets, "Comma list of target words");

  // steer-batch
  Common batch_c;
  std::string images, batch_prompt, batch_targets;
  auto* batch = app.add_subcommand("steer-batch", "Steer many images and report the success rate");
  add_common(batch, batch_c, true);
  batch->add_option("--images", images, "Comma list of image ids (default: whole dataset)");
  batch->add_option("--prompt,-p", batch_prompt, "Prompt");
  batch->add_option("--targets", batch_targets, "Comma list of target words")->required();

  // serve
  Common serve_c;
  std::string host;
  int port = 0;
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
  add_common(serve, serve_c, false);
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      auto cfg = load_config(ingest_c);
      capscope::store::ArtifactStore store(cfg.store_root);
      std::string dataset = ingest_c.dataset;
      if (!manifest_path.empty()) {
        std::ifstream in(manifest_path);
        if (!in) throw capscope::IoError("cannot open " + manifest_path);
        json mj;
        try {
          mj = json::parse(in);
        } catch (const json::exception& e) {
          throw capscope::ParseError(manifest_path + ": " + e.what());
        }
        if (!mj.contains("config")) mj["config"] = cfg.pipeline.to_json();
        if (!mj["config"].contains("adapter")) {
          mj["config"]["adapter"] = cfg.adapter.value("name", std::string("mock"));
        }
        if (!dataset.empty()) mj["dataset_id"] = dataset;
        auto manifest = capscope::service::DatasetManifest::from_json(mj);
        dataset = manifest.dataset_id;
        if (!store.has_manifest(dataset)) {
          capscope::service::register_dataset(store, std::move(manifest));
        }
      }
      if (dataset.empty()) throw capscope::ValidationError("ingest needs --dataset or --manifest");
      auto adapter = capscope::make_adapter(cfg.adapter, cfg.base_dir.string());
      const auto job = capscope::service::run_ingest(store, dataset, *adapter);
      emit(ingest_c, job->to_json());
      return job->state() == capscope::service::JobState::done ? 0 : 2;
    }
    if (*graph) {
      capscope::store::ArtifactStore store(load_config(graph_c).store_root);
      emit(graph_c, capscope::service::graph_query(store, graph_c.dataset, min_node, min_edge));
      return 0;
    }
    if (*histogram) {
      capscope::store::ArtifactStore store(load_config(hist_c).store_root);
      std::optional<std::size_t> b;
      if (bins > 0) b = bins;
      emit(hist_c, capscope::service::histogram_query(store, hist_c.dataset, b));
      return 0;
    }
    if (*portions) {
      capscope::store::ArtifactStore store(load_config(port_c).store_root);
      emit(port_c, capscope::service::portions_query(store, port_c.dataset, lo, hi));
      return 0;
    }
    if (*segs) {
      capscope::store::ArtifactStore store(load_config(seg_c).store_root);
      if (!segment.empty()) {
        auto detail = capscope::service::segment_detail(store, segment, word);
        if (!heatmap_out.empty() && !detail.heatmap.empty()) {
          std::ofstream f(heatmap_out, std::ios::binary);
          f.write(reinterpret_cast<const char*>(detail.heatmap.data()),
                  static_cast<std::streamsize>(detail.heatmap.size()));
          if (!f) throw capscope::IoError("cannot write " + heatmap_out);
          detail.body["heatmap_file"] = heatmap_out;
        }
        emit(seg_c, detail.body);
        return 0;
      }
      if (seg_c.dataset.empty()) throw capscope::ValidationError("segments needs --dataset or --segment");
      emit(seg_c, capscope::service::segments_query(store, seg_c.dataset, color, word));
      return 0;
    }
    if (*associate) {
      capscope::store::ArtifactStore store(load_config(assoc_c).store_root);
      emit(assoc_c, capscope::service::association_query(store, assoc_c.dataset));
      return 0;
    }
    if (*coverage) {
      capscope::store::ArtifactStore store(load_config(cov_c).store_root);
      emit(cov_c, capscope::service::coverage_query(store, cov_c.dataset, k));
      return 0;
    }
    if (*ground) {
      namespace g = capscope::grounding;
      auto cfg = load_config(ground_c);
      auto adapter = capscope::make_adapter(cfg.adapter, cfg.base_dir.string());
      const auto examples = g::load_examples(examples_path);
      std::vector<g::Variant> vs;
      if (variants == "all") {
        vs.assign(std::begin(g::kAllVariants), std::end(g::kAllVariants));
      } else {
        for (const auto& v : split_list(variants)) vs.push_back(g::parse_variant(v));
      }
      std::vector<g::GroundingReport> reports;
      for (auto v : vs) reports.push_back(g::evaluate(examples, v, *adapter, {head_layer}));
      json j = json::array();
      for (const auto& r : reports) j.push_back(g::report_to_json(r));
      if (!ground_c.dataset.empty()) {
        capscope::store::ArtifactStore store(cfg.store_root);
        const auto key = ground_c.dataset + "/reports/grounding/" +
                         capscope::hex64(capscope::fnv1a(j.dump())) + ".json";
        if (!store.exists(key)) store.put_json(key, {{"reports", j}});
      }
      if (format == "json") {
        emit(ground_c, j);
      } else {
        emit(ground_c, g::reports_to_table(reports));
      }
      return 0;
    }
    if (*steer) {
      auto cfg = load_config(steer_c);
      capscope::store::ArtifactStore store(cfg.store_root);
      auto adapter = capscope::make_adapter(cfg.adapter, cfg.base_dir.string());
      json body = {{"image_id", image}, {"weight", weight}};
      if (!steer_c.dataset.empty()) body["dataset"] = steer_c.dataset;
      if (!prompt.empty()) body["prompt"] = prompt;
      json sel = json::array();
      for (const auto& p : split_list(patches)) sel.push_back(std::stoull(p));
      body["selected_patches"] = sel;
      json px = json::array();
      for (const auto& p : split_list(pixels)) {
        const auto colon = p.find(':');
        if (colon == std::string::npos) throw capscope::ValidationError("pixels must be x:y");
        px.push_back({std::stoull(p.substr(0, colon)), std::stoull(p.substr(colon + 1))});
      }
      if (!px.empty()) body["pixels"] = px;
      body["target_words"] = split_list(targets);
      emit(steer_c, capscope::service::steer_query(store, *adapter, body));
      return 0;
    }
    if (*batch) {
      auto cfg = load_config(batch_c);
      capscope::store::ArtifactStore store(cfg.store_root);
      auto adapter = capscope::make_adapter(cfg.adapter, cfg.base_dir.string());
      json body = {{"dataset", batch_c.dataset}, {"target_words", split_list(batch_targets)}};
      if (!images.empty()) body["image_ids"] = split_list(images);
      if (!batch_prompt.empty()) body["prompt"] = batch_prompt;
      emit(batch_c, capscope::service::steer_batch_query(store, *adapter, body));
      return 0;
    }
    if (*serve) {
      auto cfg = load_config(serve_c);
      if (!host.empty()) cfg.host = host;
      if (port != 0) cfg.port = port;
      return capscope::service::serve(cfg);
    }
  } catch (const capscope::Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", std::string(capscope::to_string(e.kind())).c_str(),
                 e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
