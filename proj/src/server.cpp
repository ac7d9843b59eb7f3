#include "capscope/server.hpp"

#include <charconv>
#include <cstdio>
#include <functional>

#include "httplib.h"
#include "json.hpp"

namespace capscope::service {

using nlohmann::json;

int http_status(const Error& e) noexcept {
  if (dynamic_cast<const InvalidWeightsError*>(&e) != nullptr) return 422;
  switch (e.kind()) {
    case ErrorKind::validation:
    case ErrorKind::parse: return 400;
    case ErrorKind::not_found: return 404;
    case ErrorKind::conflict: return 409;
    case ErrorKind::adapter:
    case ErrorKind::io: return 502;
    case ErrorKind::data: return 500;
  }
  return 500;
}

void ConcurrencyGate::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [this] { return free_ > 0; });
  --free_;
}

void ConcurrencyGate::release() {
  {
    std::lock_guard lock(mu_);
    ++free_;
  }
  cv_.notify_one();
}

JobRegistry::~JobRegistry() { wait_all(); }

std::shared_ptr<IngestJob> JobRegistry::start(store::ArtifactStore& store,
                                              const std::string& dataset, ModelAdapter& adapter) {
  load_manifest(store, dataset);
  std::lock_guard lock(mu_);
  if (active_.count(dataset)) {
    throw ConflictError("an ingest job for '" + dataset + "' is already running");
  }
  auto job = std::make_shared<IngestJob>("job-" + std::to_string(next_++), dataset);
  jobs_[job->job_id()] = job;
  active_.insert(dataset);
  threads_.emplace_back([this, job, &store, &adapter] {
    run_ingest(store, job->dataset_id(), adapter, *job);
    std::lock_guard done(mu_);
    active_.erase(job->dataset_id());
  });
  return job;
}

std::shared_ptr<IngestJob> JobRegistry::get(const std::string& job_id) const {
  std::lock_guard lock(mu_);
  const auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw NotFoundError("unknown job '" + job_id + "'");
  return it->second;
}

void JobRegistry::wait_all() {
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(mu_);
    threads.swap(threads_);
  }
  for (auto& t : threads) {
    if (t.joinable()) t.join();
  }
}

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void handle(httplib::Response& res, const std::function<json()>& fn, int ok_status = 200) {
  try {
    send_json(res, ok_status, fn());
  } catch (const Error& e) {
    send_json(res, http_status(e), {{"error", e.what()}, {"kind", to_string(e.kind())}});
  } catch (const json::exception& e) {
    send_json(res, 400, {{"error", e.what()}, {"kind", "parse"}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", e.what()}, {"kind", "internal"}});
  }
}

template <typename T>
T number_param(const httplib::Request& req, const char* name, T fallback) {
  if (!req.has_param(name)) return fallback;
  const std::string s = req.get_param_value(name);
  T v{};
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    v = static_cast<T>(std::strtod(s.c_str(), &end));
    if (s.empty() || end != s.c_str() + s.size()) {
      throw ValidationError(std::string("parameter '") + name + "' is not a number");
    }
  } else {
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ValidationError(std::string("parameter '") + name + "' is not an integer");
    }
  }
  return v;
}

std::string string_param(const httplib::Request& req, const char* name) {
  return req.has_param(name) ? req.get_param_value(name) : std::string();
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw ParseError(std::string("request body is not valid JSON: ") + e.what());
  }
}

}  // namespace

Api::Api(store::ArtifactStore& store, ModelAdapter& adapter)
    : store_(store), adapter_(adapter), gate_(adapter.max_concurrency()) {}

Api::~Api() { jobs_.wait_all(); }

void Api::install(httplib::Server& server) {
  const std::string id = "([A-Za-z0-9._-]+)";

  server.Get("/datasets", [this](const httplib::Request&, httplib::Response& res) {
    handle(res, [&] { return list_datasets(store_); });
  });

  server.Get("/datasets/" + id + "/graph",
             [this](const httplib::Request& req, httplib::Response& res) {
               handle(res, [&] {
                 return graph_query(store_, req.matches[1], number_param<std::int64_t>(req, "min_node", 1),
                                    number_param<std::int64_t>(req, "min_edge", 1));
               });
             });

  server.Get("/datasets/" + id + "/graph/portions",
             [this](const httplib::Request& req, httplib::Response& res) {
               handle(res, [&] {
                 return portions_query(store_, req.matches[1], number_param(req, "lo", 0.0),
                                       number_param(req, "hi", 1.0));
               });
             });

  server.Get("/datasets/" + id + "/itm-histogram",
             [this](const httplib::Request& req, httplib::Response& res) {
               handle(res, [&] {
                 std::optional<std::size_t> bins;
                 if (req.has_param("bins")) bins = number_param<std::size_t>(req, "bins", 0);
                 return histogram_query(store_, req.matches[1], bins);
               });
             });

  server.Get("/datasets/" + id + "/segments",
             [this](const httplib::Request& req, httplib::Response& res) {
               handle(res, [&] {
                 return segments_query(store_, req.matches[1], string_param(req, "color"),
                                       string_param(req, "word"));
               });
             });

  server.Get("/segments/" + id, [this](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] {
      auto detail = segment_detail(store_, req.matches[1], string_param(req, "word"));
      json body = std::move(detail.body);
      if (!detail.heatmap.empty()) {
        const std::string raw(reinterpret_cast<const char*>(detail.heatmap.data()),
                              detail.heatmap.size());
        body["heatmap"] = {{"format", "bmp"}, {"base64", httplib::detail::base64_encode(raw)}};
      } else {
        body["heatmap"] = nullptr;
      }
      return body;
    });
  });

  server.Post("/steer", [this](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] {
      const json body = parse_body(req);
      gate_.acquire();
      try {
        auto out = steer_query(store_, adapter_, body);
        gate_.release();
        return out;
      } catch (...) {
        gate_.release();
        throw;
      }
    });
  });

  server.Post("/steer/batch", [this](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] {
      const json body = parse_body(req);
      gate_.acquire();
      try {
        auto out = steer_batch_query(store_, adapter_, body);
        gate_.release();
        return out;
      } catch (...) {
        gate_.release();
        throw;
      }
    });
  });

  server.Post("/datasets/" + id + "/ingest",
              [this](const httplib::Request& req, httplib::Response& res) {
                handle(
                    res, [&] { return jobs_.start(store_, req.matches[1], adapter_)->to_json(); },
                    202);
              });

  server.Get("/jobs/" + id, [this](const httplib::Request& req, httplib::Response& res) {
    handle(res, [&] { return jobs_.get(req.matches[1])->to_json(); });
  });
}

int serve(const ServiceConfig& config) {
  store::ArtifactStore store(config.store_root);
  auto adapter = make_adapter(config.adapter, config.base_dir.string());
  Api api(store, *adapter);
  httplib::Server server;
  api.install(server);
  std::fprintf(stderr, "serving %s on http://%s:%d\n", config.store_root.string().c_str(),
               config.host.c_str(), config.port);
  if (!server.listen(config.host, config.port)) {
    throw IoError("cannot listen on " + config.host + ":" + std::to_string(config.port));
  }
  return 0;
}

}  // namespace capscope::service
