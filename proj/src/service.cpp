#include "dynaclr/service.hpp"

#include <algorithm>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dynaclr/errors.hpp"
#include "dynaclr/image.hpp"

using nlohmann::json;

namespace dynaclr::service {

namespace {

Response json_response(const json& j, int status = 200) { return {status, "application/json", j.dump()}; }

Response error_response(int status, const std::string& message) { return json_response({{"error", message}}, status); }

json key_json(const NodeKey& k) { return {{"fov_id", k.fov}, {"track_id", k.track}, {"t", k.t}}; }

json record_json(const AnnotationRecord& r) { return json::parse(annotation_to_json(r)); }

patch::PatchSpec spec_from_table(const EmbeddingTable& table) {
    try {
        const auto cfg = json::parse(table.config_json);
        if (cfg.contains("patch")) return patch::PatchSpec::from_json(cfg["patch"].dump());
    } catch (const json::exception&) {
    }
    return patch::PatchSpec::desk();
}

}  // namespace

Api::Api(const ServiceOptions& options) : dataset_(Dataset::open(options.dataset)) {
    table_ = load_embeddings(options.embeddings);
    const auto& tracks = dataset_.tracks();
    for (const auto& k : table_.keys)
        if (!tracks.contains(k)) throw IntegrityError("embedding key " + to_string(k) + " is not a node of the dataset");
    if (options.probe) {
        probe_ = probe::ProbeModel::from_json(read_text_file(*options.probe));
        for (const auto& p : probe::predict_states(*probe_, table_)) predictions_.emplace(p.key, p);
    }
    if (options.projection) external_ = analytics::align_rows(analytics::load_projection_csv(*options.projection), table_.keys);
    auto spec = spec_from_table(table_);
    for (const auto& c : spec.channels) dataset_.meta().channel_index(c);
    patches_ = std::make_unique<patch::PatchSource>(dataset_, spec);
}

Response Api::meta() const {
    const auto& m = dataset_.meta();
    json j = json::parse(meta_to_json(m));
    j["embeddings"] = {{"rows", table_.rows()},
                       {"feature_dim", table_.feature_dim},
                       {"projection_dim", table_.projection_dim},
                       {"model_checksum", table_.model_checksum}};
    j["probe"] = probe_ ? json{{"label_type", to_string(probe_->label_type)}, {"status", probe::to_string(probe_->status)}}
                        : json(nullptr);
    json methods = json::array({"pca"});
    if (external_) methods.push_back("external");
    j["projection_methods"] = methods;
    j["patch_channels"] = patches_->spec().channels;
    j["views"] = {"center_slice", "max_proj"};
    return json_response(j);
}

const analytics::ProjectionResult& Api::pca(int dims) const {
    std::lock_guard lock(cache_mutex_);
    auto& slot = pca_cache_[dims];
    if (!slot) slot = std::make_shared<const analytics::ProjectionResult>(analytics::pca_project(table_, dims));
    return *slot;
}

Response Api::projection(const std::string& method, int dims) const {
    if (table_.rows() == 0) return error_response(404, "no embeddings loaded");
    const analytics::Matrix* coords = nullptr;
    json extra = json::object();
    if (method == "pca" || method.empty()) {
        const int limit = static_cast<int>(std::min<std::size_t>(table_.rows(), static_cast<std::size_t>(table_.feature_dim)));
        if (dims < 1 || dims > limit)
            return error_response(400, "dims must lie in [1, " + std::to_string(limit) + "]");
        const auto& p = pca(dims);
        coords = &p.scores;
        extra["explained_variance_ratio"] = p.explained_variance_ratio;
    } else if (method == "external") {
        if (!external_) return error_response(400, "no external projection loaded");
        if (dims < 1 || dims > external_->values.cols())
            return error_response(400, "external projection has " + std::to_string(external_->values.cols()) + " dims");
        coords = &external_->values;
    } else {
        return error_response(400, "unknown projection method '" + method + "'");
    }
    const auto& meta = dataset_.meta();
    json points = json::array();
    for (std::size_t i = 0; i < table_.rows(); ++i) {
        const auto& k = table_.keys[i];
        json p = key_json(k);
        json c = json::array();
        for (int d = 0; d < dims; ++d) c.push_back((*coords)(static_cast<Eigen::Index>(i), d));
        p["coords"] = c;
        p["x"] = c[0];
        p["y"] = dims > 1 ? c[1] : json(0.0);
        p["time"] = k.t;
        p["hpi_minutes"] = meta.t0_hpi_minutes + k.t * meta.dt_minutes;
        p["condition"] = meta.condition_of(k.fov);
        if (auto it = predictions_.find(k); it != predictions_.end()) {
            p["predicted_label"] = it->second.label;
            p["predicted_probability"] = it->second.probability;
        }
        points.push_back(std::move(p));
    }
    extra["method"] = method.empty() ? "pca" : method;
    extra["dims"] = dims;
    extra["points"] = std::move(points);
    return json_response(extra);
}

Response Api::track(const std::string& fov, std::int64_t id) const {
    const auto& tracks = dataset_.tracks();
    const auto nodes = tracks.track(fov, id);
    if (nodes.empty()) return error_response(404, "no track " + fov + "/" + std::to_string(id));
    std::map<NodeKey, json> labels;
    for (const auto& r : dataset_.read_annotations()) {
        if (r.fov != fov || r.track != id) continue;
        labels[r.key()][to_string(r.label_type)][to_string(r.source)] = r.value;
    }
    json out{{"fov_id", fov}, {"track_id", id}};
    const auto parent = tracks.parent_of(fov, id);
    out["parent"] = parent ? json(*parent) : json(nullptr);
    out["children"] = tracks.children_of(fov, id);
    out["condition"] = dataset_.meta().condition_of(fov);
    json arr = json::array();
    for (const auto* n : nodes) {
        const auto k = n->key();
        json j{{"t", n->t}, {"centroid", {{"z", n->centroid.z}, {"y", n->centroid.y}, {"x", n->centroid.x}}}};
        const auto row = table_.find(k);
        j["embedding_row"] = row ? json(*row) : json(nullptr);
        j["embedding_key"] = row ? key_json(k) : json(nullptr);
        j["patch_valid"] = patches_->valid(k);
        auto it = labels.find(k);
        j["labels"] = it != labels.end() ? it->second : json::object();
        if (auto p = predictions_.find(k); p != predictions_.end())
            j["prediction"] = {{"label", p->second.label}, {"probability", p->second.probability}};
        arr.push_back(std::move(j));
    }
    out["nodes"] = std::move(arr);
    return json_response(out);
}

Response Api::patch(const std::string& fov, std::int64_t track, int t, const std::string& channel,
                    const std::string& view) const {
    image::View v;
    try {
        v = image::view_from_string(view.empty() ? "center_slice" : view);
    } catch (const ConfigError& e) {
        return error_response(400, e.what());
    }
    const auto& channels = patches_->spec().channels;
    const std::string name = channel.empty() ? channels.front() : channel;
    const auto it = std::find(channels.begin(), channels.end(), name);
    if (it == channels.end()) return error_response(400, "unknown channel '" + name + "'");
    const NodeKey key{fov, track, t};
    if (!dataset_.tracks().contains(key)) return error_response(404, "no node " + to_string(key));
    const auto p = patches_->final_patch(key);
    if (!p.valid) return error_response(404, "patch for " + to_string(key) + " leaves the volume");
    const auto plane = image::plane(p.data, static_cast<int>(it - channels.begin()), v);
    const auto img = image::gray_auto(plane, p.data.shape.x, p.data.shape.y);
    const auto bytes = image::encode_png(img);
    return {200, "image/png", std::string(bytes.begin(), bytes.end())};
}

Response Api::get_annotations() const {
    json arr = json::array();
    for (const auto& r : dataset_.read_annotations()) arr.push_back(record_json(r));
    return json_response(arr);
}

Response Api::post_annotations(const std::string& body) {
    json doc;
    try {
        doc = json::parse(body);
    } catch (const json::parse_error& e) {
        return json_response({{"errors", {{{"index", nullptr}, {"field", "body"}, {"message", e.what()}}}}}, 422);
    }
    if (doc.is_object() && doc.contains("records")) doc = doc["records"];
    if (doc.is_object()) doc = json::array({doc});
    if (!doc.is_array() || doc.empty())
        return json_response(
            {{"errors", {{{"index", nullptr}, {"field", "body"}, {"message", "expected a record, an array, or {records: [...]}"}}}}},
            422);

    json errors = json::array();
    std::vector<AnnotationRecord> records;
    const auto& tracks = dataset_.tracks();
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& j = doc[i];
        auto fail = [&](const std::string& field, const std::string& message) {
            errors.push_back({{"index", i}, {"field", field}, {"message", message}});
        };
        if (!j.is_object()) {
            fail("record", "must be an object");
            continue;
        }
        AnnotationRecord r;
        r.source = LabelSource::human;
        bool ok = true;
        if (!j.contains("fov_id") || !j["fov_id"].is_string()) ok = false, fail("fov_id", "required string");
        else r.fov = j["fov_id"];
        if (!j.contains("track_id") || !j["track_id"].is_number_integer()) ok = false, fail("track_id", "required integer");
        else r.track = j["track_id"];
        if (!j.contains("t") || !j["t"].is_number_integer()) ok = false, fail("t", "required integer");
        else r.t = j["t"];
        if (!j.contains("label_type") || !j["label_type"].is_string()) {
            ok = false, fail("label_type", "required string");
        } else {
            try {
                r.label_type = label_type_from_string(j["label_type"]);
            } catch (const ValidationError&) {
                ok = false, fail("label_type", "must be infection or division");
            }
        }
        if (!j.contains("value") || !j["value"].is_number_integer()) ok = false, fail("value", "required integer 0 or 1");
        else r.value = j["value"];
        if (j.contains("source") && j["source"] != "human") ok = false, fail("source", "must be \"human\"");
        if (!ok) continue;
        for (const auto& msg : annotation_field_errors(r, tracks)) {
            const auto colon = msg.find(':');
            fail(msg.substr(0, colon), colon == std::string::npos ? msg : msg.substr(colon + 2));
            ok = false;
        }
        if (ok) records.push_back(r);
    }
    if (!errors.empty()) return json_response({{"errors", errors}}, 422);
    dataset_.write_annotations(records);
    json written = json::array();
    for (const auto& r : records) written.push_back(record_json(r));
    return json_response({{"written", records.size()}, {"records", written}});
}

struct Server::Impl {
    httplib::Server http;
    std::thread thread;
    int port = 0;
};

Server::Server(const ServiceOptions& options)
    : options_(options), api_(std::make_unique<Api>(options)), impl_(std::make_unique<Impl>()) {
    auto& http = impl_->http;
    // A busy port must fail to bind instead of being shared.
    http.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
    });
    auto send = [](httplib::Response& res, const Response& r) {
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    };
    auto guarded = [send](auto fn) {
        return [send, fn](const httplib::Request& req, httplib::Response& res) {
            try {
                send(res, fn(req));
            } catch (const ValidationError& e) {
                send(res, error_response(400, e.what()));
            } catch (const std::exception& e) {
                send(res, error_response(500, e.what()));
            }
        };
    };
    Api* api = api_.get();
    http.Get("/api/meta", guarded([api](const httplib::Request&) { return api->meta(); }));
    http.Get("/api/projection", guarded([api](const httplib::Request& req) {
                 const std::string method = req.has_param("method") ? req.get_param_value("method") : "pca";
                 int dims = 2;
                 if (req.has_param("dims")) {
                     try {
                         dims = std::stoi(req.get_param_value("dims"));
                     } catch (const std::exception&) {
                         return error_response(400, "dims must be an integer");
                     }
                 }
                 return api->projection(method, dims);
             }));
    http.Get(R"(/api/track/([^/]+)/(-?\d+))", guarded([api](const httplib::Request& req) {
                 return api->track(req.matches[1], std::stoll(req.matches[2]));
             }));
    http.Get(R"(/api/patch/([^/]+)/(-?\d+)/(\d+))", guarded([api](const httplib::Request& req) {
                 return api->patch(req.matches[1], std::stoll(req.matches[2]), std::stoi(req.matches[3]),
                                   req.get_param_value("channel"), req.get_param_value("view"));
             }));
    http.Get("/api/annotations", guarded([api](const httplib::Request&) { return api->get_annotations(); }));
    http.Post("/api/annotations", guarded([api](const httplib::Request& req) { return api->post_annotations(req.body); }));
}

Server::~Server() { stop(); }

int Server::start() {
    auto& http = impl_->http;
    int port = options_.port;
    if (port == 0) {
        port = http.bind_to_any_port(options_.host);
        if (port < 0) throw Error("cannot bind " + options_.host);
    } else if (!http.bind_to_port(options_.host, port)) {
        throw Error("cannot bind " + options_.host + ":" + std::to_string(port) + " (port busy?)");
    }
    impl_->port = port;
    impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
    http.wait_until_ready();
    return port;
}

void Server::wait() {
    if (impl_->thread.joinable()) impl_->thread.join();
}

void Server::stop() {
    if (!impl_) return;
    impl_->http.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace dynaclr::service
