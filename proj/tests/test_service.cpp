#include <chrono>
#include <fstream>
#include <memory>
#include <set>
#include <thread>

#include "doctest.h"
#include "httplib.h"

#include "capscope/error.hpp"
#include "capscope/mock_adapter.hpp"
#include "capscope/server.hpp"
#include "capscope/service.hpp"
#include "capscope/text.hpp"
#include "support.hpp"

using namespace capscope;
using namespace capscope::service;
using nlohmann::json;
using capscope::testing::TempDir;

namespace {

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::filesystem::path demo_dir() { return capscope::testing::fixture_dir() / "demo"; }

std::unique_ptr<ModelAdapter> demo_adapter() {
  const auto cfg = read_json(demo_dir() / "config.json");
  return make_adapter(cfg.at("adapter"), demo_dir().string());
}

DatasetManifest demo_manifest() {
  return DatasetManifest::from_json(read_json(demo_dir() / "manifest.json"));
}

struct Ingested {
  TempDir dir{"svc"};
  store::ArtifactStore store{dir.path()};
  std::unique_ptr<ModelAdapter> adapter = demo_adapter();
  std::shared_ptr<IngestJob> job;

  Ingested() {
    register_dataset(store, demo_manifest());
    job = run_ingest(store, "demo", *adapter);
  }
};

}  // namespace

TEST_CASE("pipeline config validation") {
  const auto c = PipelineConfig::from_json({{"layer", 3}, {"coverage_k", 2}});
  CHECK(c.layer == 3);
  CHECK(c.coverage_k == 2);
  CHECK(PipelineConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(PipelineConfig::from_json({{"coverage_k", 0}}), ValidationError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"projector", "umap"}}), ValidationError);
  CHECK_THROWS_AS(PipelineConfig::from_json({{"histogram_bins", 0}}), ValidationError);
}

TEST_CASE("service config resolves the store next to the file") {
  const auto cfg = ServiceConfig::from_json(read_json(demo_dir() / "config.json"), demo_dir());
  CHECK(cfg.store_root.lexically_normal() == (demo_dir() / "../../store").lexically_normal());
  CHECK(cfg.port == 8080);
  CHECK(cfg.adapter.at("name") == "mock");
}

TEST_CASE("manifest validation and write-once registration") {
  TempDir dir("manifest");
  store::ArtifactStore s(dir.path());
  auto m = demo_manifest();
  CHECK_NOTHROW(m.validate());
  auto dup = m;
  dup.records.push_back(dup.records.front());
  CHECK_THROWS_AS(dup.validate(), ValidationError);
  register_dataset(s, m);
  CHECK_THROWS_AS(register_dataset(s, m), ConflictError);
  const auto back = load_manifest(s, "demo");
  CHECK(back.records.size() == 5);
  CHECK(back.stop_words_version == text::kStopWordsVersion);
  CHECK_THROWS_AS(load_manifest(s, "other"), NotFoundError);
  CHECK_THROWS_AS(back.record("nope"), NotFoundError);
}

TEST_CASE("ingest commits every stage and is idempotent") {
  Ingested env;
  CHECK(env.job->state() == JobState::done);
  CHECK(env.job->failures().empty());
  const auto& s = env.store;
  for (const char* stage : {"captions", "masks", "tensors", "matrices", "graphs", "reports"}) {
    CAPTURE(stage);
    CHECK_FALSE(s.list("demo", stage).empty());
  }
  CHECK(s.list("demo", "captions").size() == 5);
  CHECK(s.exists("demo/graphs/cooccurrence.json"));
  CHECK(s.exists("demo/reports/segments.json"));
  const auto j = env.job->to_json();
  for (const auto& st : j.at("stages")) CHECK(st.at("done") == st.at("total"));

  const auto first_writes = env.job->writes();
  CHECK(first_writes > 0);
  const auto again = run_ingest(env.store, "demo", *env.adapter);
  CHECK(again->state() == JobState::done);
  CHECK(again->writes() == 0);

  // Association rows resolve to stored segments.
  const auto segs = s.get_json("demo/reports/segments.json").at("segments");
  std::set<std::string> ids;
  for (const auto& seg : segs) ids.insert(seg.at("segment_id").get<std::string>());
  const auto a = association_query(s, "demo");
  for (const auto& r : a.at("rows")) CHECK(ids.count(r.get<std::string>()));
}

TEST_CASE("per-image failures are logged and skipped") {
  TempDir dir("fail");
  store::ArtifactStore s(dir.path());
  MockFixtures fx;
  fx.add_image("ok1", 64, 48);
  fx.add_image("ok2", 64, 64);
  fx.add_image("bad", 64, 64, true);
  MockConfig cfg;
  cfg.grid = {8, 8};
  cfg.layers = 8;
  cfg.heads = 2;
  MockAdapter adapter(cfg, fx);
  DatasetManifest m;
  m.dataset_id = "mixed";
  m.records = {{"ok1", "", 64, 48, "", ""}, {"bad", "", 64, 64, "", ""}, {"ok2", "", 64, 64, "", ""}};
  register_dataset(s, m);
  const auto job = run_ingest(s, "mixed", adapter);
  CHECK(job->state() == JobState::done);
  REQUIRE(job->failures().size() == 1);
  CHECK(job->failures()[0].image_id == "bad");
  CHECK(job->failures()[0].stage == "caption");
  CHECK(s.exists("mixed/reports/ingest-failures.json"));
  CHECK(s.list("mixed", "captions").size() == 2);

  DatasetManifest all_bad;
  all_bad.dataset_id = "allbad";
  all_bad.records = {{"bad", "", 64, 64, "", ""}};
  register_dataset(s, all_bad);
  CHECK(run_ingest(s, "allbad", adapter)->state() == JobState::failed);
}

TEST_CASE("read queries over an ingested dataset") {
  Ingested env;
  const auto& s = env.store;
  const auto ds = list_datasets(s);
  REQUIRE(ds.size() == 1);
  CHECK(ds[0].at("ingested") == true);

  const auto g = graph_query(s, "demo", 1, 1);
  std::set<std::string> nodes;
  for (const auto& n : g.at("nodes")) nodes.insert(n.at("word").get<std::string>());
  for (const auto& e : g.at("edges")) {
    CHECK(nodes.count(e.at("a").get<std::string>()));
    CHECK(nodes.count(e.at("b").get<std::string>()));
  }
  const auto g2 = graph_query(s, "demo", 2, 2);
  CHECK(g2.at("nodes").size() <= g.at("nodes").size());
  CHECK(graph_query(s, "demo", 1, 1) == g);
  CHECK_THROWS_AS(graph_query(s, "demo", -1, 1), ValidationError);
  CHECK_THROWS_AS(graph_query(s, "nope", 1, 1), NotFoundError);

  const auto h = histogram_query(s, "demo", 10);
  std::int64_t total = 0;
  for (const auto& c : h.at("counts")) total += c.get<std::int64_t>();
  CHECK(total == 5);
  CHECK(histogram_query(s, "demo", std::nullopt).at("counts").size() == 20);

  const auto p = portions_query(s, "demo", 0.0, 1.0);
  for (const auto& [w, v] : p.at("portions").items()) CHECK(v == 1.0);

  const auto cov = segments_query(s, "demo", "coverage", "");
  CHECK(cov.at("segments").size() > 0);
  for (const auto& seg : cov.at("segments")) {
    CHECK(seg.at("x").is_number());
    CHECK(seg.at("y").is_number());
    CHECK(seg.at("value") == seg.at("coverage"));
  }
  CHECK_THROWS_AS(segments_query(s, "demo", "attention", ""), ValidationError);
  CHECK_THROWS_AS(segments_query(s, "demo", "rainbow", ""), ValidationError);
  const auto word = g.at("nodes")[0].at("word").get<std::string>();
  const auto att = segments_query(s, "demo", "attention", word);
  bool any = false;
  for (const auto& seg : att.at("segments")) any = any || !seg.at("value").is_null();
  CHECK(any);

  const auto c3 = coverage_query(s, "demo", 3);
  const auto c1 = coverage_query(s, "demo", 1);
  for (const auto& [id, v] : c1.at("coverage").items()) CHECK(v <= c3.at("coverage").at(id));
  CHECK_THROWS_AS(coverage_query(s, "demo", 0), ValidationError);

  const auto seg_id = cov.at("segments")[0].at("segment_id").get<std::string>();
  const auto detail = segment_detail(s, seg_id, "");
  CHECK(detail.body.at("segment_id") == seg_id);
  CHECK(detail.body.contains("mask"));
  CHECK(detail.body.at("caption").contains("highlights"));
  for (const auto& hl : detail.body.at("caption").at("highlights")) {
    const auto text = detail.body.at("caption").at("text").get<std::string>();
    const auto b = hl.at("begin").get<std::size_t>(), e = hl.at("end").get<std::size_t>();
    CHECK(text::normalize_word(text.substr(b, e - b)) == hl.at("word"));
  }
  CHECK_FALSE(detail.heatmap.empty());
  CHECK_THROWS_AS(segment_detail(s, "tench_001_s999", ""), NotFoundError);

  const auto layer = load_bundle_layer(s, "demo", "tench_001", 7);
  CHECK(layer.layers() == 1);
  CHECK(layer.grid() == 24);
}

TEST_CASE("steer queries") {
  Ingested env;
  json body = {{"image_id", "tench_001"},
               {"selected_patches", {100, 101, 124, 125}},
               {"weight", 2.0},
               {"target_words", {"hat"}}};
  const auto r = steer_query(env.store, *env.adapter, body);
  CHECK(r.at("changed") == true);
  CHECK(r.at("target_hits").at("hat") == true);
  CHECK(r.at("dataset_id") == "demo");
  CHECK(env.store.exists(r.at("artifact").get<std::string>()));
  CHECK(steer_query(env.store, *env.adapter, body) == r);

  body["weight"] = 1.0;
  CHECK(steer_query(env.store, *env.adapter, body).at("changed") == false);
  body["weight"] = -2.0;
  CHECK_THROWS_AS(steer_query(env.store, *env.adapter, body), InvalidWeightsError);
  body["weight"] = 2.0;
  body["selected_patches"] = {576};
  CHECK_THROWS_AS(steer_query(env.store, *env.adapter, body), InvalidWeightsError);
  CHECK_THROWS_AS(steer_query(env.store, *env.adapter, {{"image_id", "ghost"}}), NotFoundError);

  const auto pix = steer_query(env.store, *env.adapter,
                               {{"image_id", "tench_001"}, {"pixels", {{64, 64}}}, {"weight", 2.0}});
  CHECK(pix.at("selected_patches") == json::array({100}));

  const auto batch = steer_batch_query(
      env.store, *env.adapter,
      {{"dataset", "demo"}, {"prompt", "the person is wearing"}, {"target_words", {"hat"}}});
  CHECK(batch.at("items").size() == 5);
  CHECK(batch.at("success_rate_exact").at("denominator") == 5);
}

TEST_CASE("http status mapping") {
  CHECK(http_status(ValidationError("x")) == 400);
  CHECK(http_status(ParseError("x")) == 400);
  CHECK(http_status(NotFoundError("x")) == 404);
  CHECK(http_status(ConflictError("x")) == 409);
  CHECK(http_status(InvalidWeightsError("x")) == 422);
  CHECK(http_status(AdapterError("x")) == 502);
  CHECK(http_status(IoError("x")) == 502);
  CHECK(http_status(DataError("x")) == 500);
}

TEST_CASE("http api end to end") {
  TempDir dir("http");
  store::ArtifactStore store(dir.path());
  auto adapter = demo_adapter();
  register_dataset(store, demo_manifest());

  httplib::Server server;
  Api api(store, *adapter);
  api.install(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);

  auto start = client.Post("/datasets/demo/ingest", "", "application/json");
  REQUIRE(start);
  CHECK(start->status == 202);
  const auto job_id = json::parse(start->body).at("job_id").get<std::string>();
  auto second = client.Post("/datasets/demo/ingest", "", "application/json");
  REQUIRE(second);
  CHECK((second->status == 409 || second->status == 202));

  json status;
  for (int i = 0; i < 600; ++i) {
    auto res = client.Get("/jobs/" + job_id);
    REQUIRE(res);
    status = json::parse(res->body);
    if (status.at("state") == "done" || status.at("state") == "failed") break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  api.jobs().wait_all();
  status = json::parse(client.Get("/jobs/" + job_id)->body);
  CHECK(status.at("state") == "done");
  CHECK(client.Get("/jobs/job-999")->status == 404);

  auto graph = client.Get("/datasets/demo/graph?min_node=1&min_edge=1");
  REQUIRE(graph);
  CHECK(graph->status == 200);
  CHECK(client.Get("/datasets/demo/graph?min_node=1&min_edge=1")->body == graph->body);
  CHECK(client.Get("/datasets/demo/graph?min_node=abc")->status == 400);
  CHECK(client.Get("/datasets/nope/graph")->status == 404);
  CHECK(client.Get("/datasets")->status == 200);
  CHECK(client.Get("/datasets/demo/itm-histogram?bins=5")->status == 200);
  CHECK(client.Get("/datasets/demo/graph/portions?lo=0&hi=0.5")->status == 200);

  auto segs = client.Get("/datasets/demo/segments?color=coverage");
  REQUIRE(segs);
  CHECK(segs->status == 200);
  const auto sid = json::parse(segs->body).at("segments")[0].at("segment_id").get<std::string>();
  auto detail = client.Get("/segments/" + sid);
  REQUIRE(detail);
  CHECK(detail->status == 200);
  CHECK(json::parse(detail->body).at("heatmap").at("format") == "bmp");

  const json steer_body = {{"image_id", "tench_001"},
                           {"selected_patches", {100, 101, 124, 125}},
                           {"weight", 2.0},
                           {"target_words", {"hat"}}};
  auto steer = client.Post("/steer", steer_body.dump(), "application/json");
  REQUIRE(steer);
  CHECK(steer->status == 200);
  CHECK(json::parse(steer->body).at("target_hits").at("hat") == true);
  json bad = steer_body;
  bad["weight"] = -1;
  CHECK(client.Post("/steer", bad.dump(), "application/json")->status == 422);
  CHECK(client.Post("/steer", "{nope", "application/json")->status == 400);
  auto batch = client.Post(
      "/steer/batch",
      json({{"dataset", "demo"}, {"prompt", "the person is wearing"}, {"target_words", {"hat"}}})
          .dump(),
      "application/json");
  REQUIRE(batch);
  CHECK(batch->status == 200);

  server.stop();
  loop.join();
}
