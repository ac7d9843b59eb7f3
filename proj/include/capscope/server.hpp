#pragma once

#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "capscope/error.hpp"
#include "capscope/service.hpp"

namespace httplib {
class Server;
}

namespace capscope::service {

/// HTTP status for a library error: 400 bad input, 404 unknown id, 409
/// conflict, 422 invalid steering weights, 502 adapter or image failure.
int http_status(const Error& e) noexcept;

/// Counting gate that bounds concurrent adapter use.
class ConcurrencyGate {
 public:
  explicit ConcurrencyGate(std::size_t slots) : free_(slots == 0 ? 1 : slots) {}
  void acquire();
  void release();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t free_;
};

/// Async ingest jobs, at most one running per dataset.
class JobRegistry {
 public:
  JobRegistry() = default;
  JobRegistry(const JobRegistry&) = delete;
  JobRegistry& operator=(const JobRegistry&) = delete;
  ~JobRegistry();

  /// Starts `dataset` in the background. Throws ConflictError while another
  /// job for the same dataset is pending or running.
  std::shared_ptr<IngestJob> start(store::ArtifactStore& store, const std::string& dataset,
                                   ModelAdapter& adapter);
  std::shared_ptr<IngestJob> get(const std::string& job_id) const;
  void wait_all();

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<IngestJob>> jobs_;
  std::set<std::string> active_;
  std::vector<std::thread> threads_;
  std::size_t next_ = 1;
};

/// The HTTP API over one store and one adapter.
class Api {
 public:
  Api(store::ArtifactStore& store, ModelAdapter& adapter);
  ~Api();

  /// Registers every route on `server`.
  void install(httplib::Server& server);

  JobRegistry& jobs() noexcept { return jobs_; }

 private:
  store::ArtifactStore& store_;
  ModelAdapter& adapter_;
  ConcurrencyGate gate_;
  JobRegistry jobs_;
};

/// Blocks serving `config` until the process is stopped.
int serve(const ServiceConfig& config);

}  // namespace capscope::service
