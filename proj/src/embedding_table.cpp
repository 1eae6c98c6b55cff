#include "dynaclr/embedding_table.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/errors.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace dynaclr {

std::optional<std::size_t> EmbeddingTable::find(const NodeKey& key) const {
    auto it = std::lower_bound(keys.begin(), keys.end(), key);
    if (it == keys.end() || *it != key) return std::nullopt;
    return static_cast<std::size_t>(it - keys.begin());
}

void EmbeddingTable::validate() const {
    if (feature_dim < 1 || projection_dim < 1) throw IntegrityError("embedding dimensions must be positive");
    if (features.size() != rows() * feature_dim || projections.size() != rows() * projection_dim)
        throw IntegrityError("embedding arrays do not match the row count");
    for (std::size_t i = 1; i < keys.size(); ++i)
        if (!(keys[i - 1] < keys[i])) throw IntegrityError("embedding rows are not in strictly increasing key order at row " + std::to_string(i));
    for (std::size_t i = 0; i < features.size(); ++i)
        if (!std::isfinite(features[i]))
            throw IntegrityError("non-finite feature at row " + std::to_string(i / feature_dim));
    for (std::size_t i = 0; i < projections.size(); ++i)
        if (!std::isfinite(projections[i]))
            throw IntegrityError("non-finite projection at row " + std::to_string(i / projection_dim));
}

EmbeddingTable EmbeddingTable::select_fovs(const std::vector<std::string>& fovs) const {
    EmbeddingTable out;
    out.feature_dim = feature_dim;
    out.projection_dim = projection_dim;
    out.model_checksum = model_checksum;
    out.config_json = config_json;
    out.dataset = dataset;
    for (std::size_t i = 0; i < rows(); ++i) {
        if (std::find(fovs.begin(), fovs.end(), keys[i].fov) == fovs.end()) continue;
        out.keys.push_back(keys[i]);
        auto f = feature(i);
        auto z = projection(i);
        out.features.insert(out.features.end(), f.begin(), f.end());
        out.projections.insert(out.projections.end(), z.begin(), z.end());
    }
    return out;
}

namespace {

void write_floats(const fs::path& path, const std::vector<float>& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

std::vector<float> read_floats(const fs::path& path, std::size_t n) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw ParseError(path.filename().string(), "missing");
    const auto bytes = static_cast<std::size_t>(is.tellg());
    if (bytes != n * sizeof(float))
        throw IntegrityError(path.filename().string() + " has " + std::to_string(bytes) + " bytes, expected " +
                             std::to_string(n * sizeof(float)));
    std::vector<float> v(n);
    is.seekg(0);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
    return v;
}

}  // namespace

void save_embeddings(const fs::path& dir, const EmbeddingTable& table) {
    table.validate();
    fs::create_directories(dir);
    std::ostringstream idx;
    idx << "fov_id,track_id,t,row\n";
    for (std::size_t i = 0; i < table.rows(); ++i)
        idx << table.keys[i].fov << ',' << table.keys[i].track << ',' << table.keys[i].t << ',' << i << '\n';
    write_text_file(dir / "index.csv", idx.str());
    write_floats(dir / "features.bin", table.features);
    write_floats(dir / "projections.bin", table.projections);
    json meta{{"rows", table.rows()},
              {"feature_dim", table.feature_dim},
              {"projection_dim", table.projection_dim},
              {"dtype", "float32"},
              {"model_checksum", table.model_checksum},
              {"dataset", table.dataset},
              {"config", json::parse(table.config_json)}};
    write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

EmbeddingTable load_embeddings(const fs::path& dir) {
    if (!fs::exists(dir / "meta.json")) throw ParseError("meta.json", "no embedding table at " + dir.string());
    EmbeddingTable t;
    std::size_t rows = 0;
    try {
        const json meta = json::parse(read_text_file(dir / "meta.json"));
        rows = meta.at("rows").get<std::size_t>();
        t.feature_dim = meta.at("feature_dim").get<int>();
        t.projection_dim = meta.at("projection_dim").get<int>();
        t.model_checksum = meta.value("model_checksum", "");
        t.dataset = meta.value("dataset", "");
        t.config_json = meta.contains("config") ? meta["config"].dump() : "{}";
    } catch (const json::exception& e) {
        throw ParseError("meta.json", e.what());
    }
    std::istringstream idx(read_text_file(dir / "index.csv"));
    std::string line;
    std::getline(idx, line);
    if (line != "fov_id,track_id,t,row") throw ParseError("index.csv", "unexpected header '" + line + "'");
    std::size_t lineno = 1;
    while (std::getline(idx, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string fov, track, tt, row;
        if (!std::getline(ls, fov, ',') || !std::getline(ls, track, ',') || !std::getline(ls, tt, ',') ||
            !std::getline(ls, row))
            throw ParseError("index.csv", "line " + std::to_string(lineno) + " has fewer than 4 fields");
        try {
            if (std::stoul(row) != t.keys.size())
                throw ParseError("index.csv", "line " + std::to_string(lineno) + ": rows must be consecutive");
            t.keys.push_back({fov, std::stoll(track), std::stoi(tt)});
        } catch (const std::logic_error&) {
            throw ParseError("index.csv", "line " + std::to_string(lineno) + " is not numeric");
        }
    }
    if (t.keys.size() != rows) throw IntegrityError("index.csv row count does not match meta.json");
    t.features = read_floats(dir / "features.bin", rows * t.feature_dim);
    t.projections = read_floats(dir / "projections.bin", rows * t.projection_dim);
    t.validate();
    return t;
}

}  // namespace dynaclr
