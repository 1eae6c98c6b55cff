#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "dynaclr/analytics.hpp"
#include "dynaclr/dataset_store.hpp"
#include "dynaclr/embedding_table.hpp"
#include "dynaclr/patch_pipeline.hpp"
#include "dynaclr/probe.hpp"

namespace dynaclr::service {

struct ServiceOptions {
    std::filesystem::path dataset;
    std::filesystem::path embeddings;
    /// Optional probe model JSON; enables predicted labels.
    std::optional<std::filesystem::path> probe;
    /// Optional external 2D projection CSV (fov_id,track_id,t,x,y).
    std::optional<std::filesystem::path> projection;
    std::string host = "127.0.0.1";
    int port = 8080;
};

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

/// Request handling independent of the transport, so routes can be tested
/// without sockets. Thread-safe.
class Api {
public:
    explicit Api(const ServiceOptions& options);

    Response meta() const;
    Response projection(const std::string& method, int dims) const;
    Response track(const std::string& fov, std::int64_t id) const;
    Response patch(const std::string& fov, std::int64_t track, int t, const std::string& channel,
                   const std::string& view) const;
    Response get_annotations() const;
    Response post_annotations(const std::string& body);

    const Dataset& dataset() const noexcept { return dataset_; }

private:
    const analytics::ProjectionResult& pca(int dims) const;

    Dataset dataset_;
    EmbeddingTable table_;
    std::optional<probe::ProbeModel> probe_;
    std::map<NodeKey, probe::Prediction> predictions_;
    std::optional<analytics::KeyedRows> external_;
    std::unique_ptr<patch::PatchSource> patches_;
    mutable std::mutex cache_mutex_;
    mutable std::map<int, std::shared_ptr<const analytics::ProjectionResult>> pca_cache_;
};

/// HTTP front end over Api. `start` binds (throwing when the port is busy)
/// and serves on a background thread until `stop`.
class Server {
public:
    explicit Server(const ServiceOptions& options);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds and returns the bound port (useful with port 0).
    int start();
    /// Blocks until the server stops.
    void wait();
    void stop();
    Api& api() noexcept { return *api_; }

private:
    struct Impl;
    ServiceOptions options_;
    std::unique_ptr<Api> api_;
    std::unique_ptr<Impl> impl_;
};

}  // namespace dynaclr::service
