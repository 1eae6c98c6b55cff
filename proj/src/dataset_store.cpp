#include "dynaclr/dataset_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dynaclr/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dynaclr {

static_assert(std::endian::native == std::endian::little, "volume files are little-endian float32");

std::string to_string(const NodeKey& key) {
    return key.fov + "/" + std::to_string(key.track) + "/" + std::to_string(key.t);
}

// ---------------------------------------------------------------- meta.json

void DatasetMeta::validate() const {
    if (channels.empty()) throw ParseError("channels", "must be non-empty");
    if (!(dt_minutes > 0.0)) throw ParseError("dt_minutes", "must be > 0");
    if (fov_ids.empty()) throw ParseError("fov_ids", "must be non-empty");
    if (volume_shape.c < 1 || volume_shape.z < 1 || volume_shape.y < 1 || volume_shape.x < 1)
        throw ParseError("volume_shape", "all components must be >= 1");
    if (volume_shape.c != static_cast<int>(channels.size()))
        throw ParseError("volume_shape", "C must equal the number of channels");
    if (dtype != "float32") throw ParseError("dtype", "only float32 is supported");
    if (n_timepoints < 1) throw ParseError("n_timepoints", "must be >= 1");
    std::set<std::string> seen;
    for (const auto& f : fov_ids) {
        if (f.empty() || f.find('/') != std::string::npos || f.find(',') != std::string::npos)
            throw ParseError("fov_ids", "invalid fov id '" + f + "'");
        if (!seen.insert(f).second) throw ParseError("fov_ids", "duplicate fov id '" + f + "'");
        if (!conditions.contains(f)) throw ParseError("conditions", "no condition for fov '" + f + "'");
    }
}

int DatasetMeta::channel_index(const std::string& name) const {
    auto it = std::find(channels.begin(), channels.end(), name);
    if (it == channels.end()) throw ValidationError("unknown channel '" + name + "'");
    return static_cast<int>(it - channels.begin());
}

const std::string& DatasetMeta::condition_of(const std::string& fov) const {
    auto it = conditions.find(fov);
    if (it == conditions.end()) throw ValidationError("unknown fov '" + fov + "'");
    return it->second;
}

std::string meta_to_json(const DatasetMeta& meta) {
    json j;
    j["channels"] = meta.channels;
    j["dt_minutes"] = meta.dt_minutes;
    j["fov_ids"] = meta.fov_ids;
    j["volume_shape"] = {meta.volume_shape.c, meta.volume_shape.z, meta.volume_shape.y, meta.volume_shape.x};
    j["dtype"] = meta.dtype;
    j["conditions"] = meta.conditions;
    j["t0_hpi_minutes"] = meta.t0_hpi_minutes;
    j["n_timepoints"] = meta.n_timepoints;
    return j.dump(2) + "\n";
}

namespace {

template <class T>
T field(const json& j, const char* name) {
    if (!j.contains(name)) throw ParseError(name, "missing");
    try {
        return j.at(name).get<T>();
    } catch (const json::exception& e) {
        throw ParseError(name, e.what());
    }
}

}  // namespace

DatasetMeta meta_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError("meta.json", e.what());
    }
    if (!j.is_object()) throw ParseError("meta.json", "top level must be an object");
    DatasetMeta m;
    m.channels = field<std::vector<std::string>>(j, "channels");
    m.dt_minutes = field<double>(j, "dt_minutes");
    m.fov_ids = field<std::vector<std::string>>(j, "fov_ids");
    auto shape = field<std::vector<int>>(j, "volume_shape");
    if (shape.size() != 4) throw ParseError("volume_shape", "expected [C, Z, Y, X]");
    m.volume_shape = {shape[0], shape[1], shape[2], shape[3]};
    m.dtype = field<std::string>(j, "dtype");
    m.conditions = field<std::map<std::string, std::string>>(j, "conditions");
    m.t0_hpi_minutes = j.contains("t0_hpi_minutes") ? field<double>(j, "t0_hpi_minutes") : 0.0;
    m.n_timepoints = field<int>(j, "n_timepoints");
    m.validate();
    return m;
}

// ---------------------------------------------------------------- tracks

TrackTable TrackTable::from_nodes(std::vector<TrackNode> nodes) {
    TrackTable table;
    table.nodes_ = std::move(nodes);
    for (std::size_t i = 0; i < table.nodes_.size(); ++i) {
        const auto& n = table.nodes_[i];
        if (n.parent && *n.parent == n.track)
            throw ValidationError("row " + std::to_string(i + 1) + ": parent_track_id equals track_id");
        if (n.t < 0) throw ValidationError("row " + std::to_string(i + 1) + ": negative frame index");
        if (!std::isfinite(n.centroid.z) || !std::isfinite(n.centroid.y) || !std::isfinite(n.centroid.x))
            throw ValidationError("row " + std::to_string(i + 1) + ": non-finite centroid");
        auto [it, inserted] = table.by_key_.emplace(n.key(), i);
        if (!inserted)
            throw ValidationError("row " + std::to_string(i + 1) + ": duplicate (fov, track, t) " + to_string(n.key()) +
                                  " first seen at row " + std::to_string(it->second + 1));
        table.index_[{n.fov, n.track}].push_back(i);
    }
    for (auto& [id, rows] : table.index_) {
        std::sort(rows.begin(), rows.end(),
                  [&](std::size_t a, std::size_t b) { return table.nodes_[a].t < table.nodes_[b].t; });
        std::optional<std::int64_t> parent;
        for (std::size_t r : rows) {
            const auto& p = table.nodes_[r].parent;
            if (!p) continue;
            if (parent && *parent != *p)
                throw ValidationError("row " + std::to_string(r + 1) + ": track " + id.first + "/" +
                                      std::to_string(id.second) + " has more than one parent");
            parent = p;
        }
    }
    return table;
}

void TrackTable::validate_against(const DatasetMeta& meta) const {
    std::set<std::string> fovs(meta.fov_ids.begin(), meta.fov_ids.end());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const auto& n = nodes_[i];
        const std::string row = "row " + std::to_string(i + 1) + ": ";
        if (!fovs.contains(n.fov)) throw ValidationError(row + "unknown fov '" + n.fov + "'");
        if (n.t >= meta.n_timepoints) throw ValidationError(row + "t outside dataset time range");
        const auto& s = meta.volume_shape;
        const auto& c = n.centroid;
        if (c.z < 0 || c.z > s.z - 1 || c.y < 0 || c.y > s.y - 1 || c.x < 0 || c.x > s.x - 1)
            throw ValidationError(row + "centroid outside volume bounds");
    }
}

std::vector<const TrackNode*> TrackTable::track(const std::string& fov, std::int64_t id) const {
    std::vector<const TrackNode*> out;
    auto it = index_.find({fov, id});
    if (it == index_.end()) return out;
    for (std::size_t r : it->second) out.push_back(&nodes_[r]);
    return out;
}

const TrackNode* TrackTable::find(const NodeKey& key) const {
    auto it = by_key_.find(key);
    return it == by_key_.end() ? nullptr : &nodes_[it->second];
}

std::optional<std::int64_t> TrackTable::parent_of(const std::string& fov, std::int64_t id) const {
    for (const auto* n : track(fov, id))
        if (n->parent) return n->parent;
    return std::nullopt;
}

std::vector<std::int64_t> TrackTable::children_of(const std::string& fov, std::int64_t id) const {
    std::vector<std::int64_t> out;
    for (const auto& [tid, rows] : index_) {
        if (tid.first != fov) continue;
        if (parent_of(fov, tid.second) == id) out.push_back(tid.second);
    }
    return out;
}

std::vector<TrackNode> TrackTable::flatten() const {
    std::vector<TrackNode> out;
    out.reserve(nodes_.size());
    for (const auto& [id, rows] : index_)
        for (std::size_t r : rows) out.push_back(nodes_[r]);
    return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

std::string format_coord(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

std::string tracks_to_csv(const TrackTable& table) {
    std::ostringstream os;
    os << "fov_id,track_id,t,z,y,x,parent_track_id\n";
    for (const auto& n : table.flatten()) {
        os << n.fov << ',' << n.track << ',' << n.t << ',' << format_coord(n.centroid.z) << ','
           << format_coord(n.centroid.y) << ',' << format_coord(n.centroid.x) << ',';
        if (n.parent) os << *n.parent;
        os << '\n';
    }
    return os.str();
}

TrackTable tracks_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw ParseError("tracks.csv", "empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);
    const std::vector<std::string> expected{"fov_id", "track_id", "t", "z", "y", "x", "parent_track_id"};
    if (header != expected) throw ParseError("tracks.csv", "header must be " + std::string("fov_id,track_id,t,z,y,x,parent_track_id"));
    std::vector<TrackNode> nodes;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != 7)
            throw ValidationError("tracks.csv row " + std::to_string(row) + ": expected 7 columns");
        try {
            TrackNode n;
            n.fov = cells[0];
            std::size_t pos = 0;
            n.track = std::stoll(cells[1], &pos);
            n.t = std::stoi(cells[2]);
            n.centroid = {std::stod(cells[3]), std::stod(cells[4]), std::stod(cells[5])};
            if (!cells[6].empty()) n.parent = std::stoll(cells[6]);
            nodes.push_back(std::move(n));
        } catch (const std::logic_error&) {
            throw ValidationError("tracks.csv row " + std::to_string(row) + ": malformed number");
        }
    }
    try {
        return TrackTable::from_nodes(std::move(nodes));
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("tracks.csv ") + e.what());
    }
}

DivisionScan division_events(const TrackTable& table) {
    // (fov, parent) -> daughter tracks
    std::map<TrackId, std::set<std::int64_t>> daughters;
    for (const auto& [id, rows] : table.tracks()) {
        if (auto p = table.parent_of(id.first, id.second)) daughters[{id.first, *p}].insert(id.second);
    }
    DivisionScan scan;
    for (const auto& [parent, kids] : daughters) {
        const auto nodes = table.track(parent.first, parent.second);
        if (nodes.empty()) {
            scan.warnings.push_back("parent track " + parent.first + "/" + std::to_string(parent.second) +
                                    " referenced but absent");
            continue;
        }
        if (kids.size() < 2) {
            scan.warnings.push_back("parent track " + parent.first + "/" + std::to_string(parent.second) +
                                    " has a single daughter " + std::to_string(*kids.begin()) +
                                    "; treated as a relink, not a division");
            continue;
        }
        scan.events.push_back({parent.first, parent.second, nodes.back()->t});
    }
    std::sort(scan.events.begin(), scan.events.end());
    return scan;
}

// ---------------------------------------------------------------- annotations

std::string to_string(LabelType t) { return t == LabelType::infection ? "infection" : "division"; }
std::string to_string(LabelSource s) { return s == LabelSource::ground_truth ? "ground_truth" : "human"; }

LabelType label_type_from_string(const std::string& s) {
    if (s == "infection") return LabelType::infection;
    if (s == "division") return LabelType::division;
    throw ParseError("label_type", "expected 'infection' or 'division', got '" + s + "'");
}

LabelSource label_source_from_string(const std::string& s) {
    if (s == "ground_truth") return LabelSource::ground_truth;
    if (s == "human") return LabelSource::human;
    throw ParseError("source", "expected 'ground_truth' or 'human', got '" + s + "'");
}

std::string annotation_to_json(const AnnotationRecord& r) {
    json j;
    j["fov_id"] = r.fov;
    j["track_id"] = r.track;
    j["t"] = r.t;
    j["label_type"] = to_string(r.label_type);
    j["value"] = r.value;
    j["source"] = to_string(r.source);
    return j.dump();
}

AnnotationRecord annotation_from_json(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError("annotation", e.what());
    }
    AnnotationRecord r;
    r.fov = field<std::string>(j, "fov_id");
    r.track = field<std::int64_t>(j, "track_id");
    r.t = field<int>(j, "t");
    r.label_type = label_type_from_string(field<std::string>(j, "label_type"));
    r.value = field<int>(j, "value");
    r.source = label_source_from_string(field<std::string>(j, "source"));
    return r;
}

std::vector<std::string> annotation_field_errors(const AnnotationRecord& r, const TrackTable& table) {
    std::vector<std::string> errors;
    if (r.value != 0 && r.value != 1) errors.push_back("value: must be 0 or 1");
    const auto nodes = table.track(r.fov, r.track);
    if (nodes.empty()) {
        errors.push_back("track_id: no track " + r.fov + "/" + std::to_string(r.track));
    } else if (!table.contains(r.key())) {
        errors.push_back("t: frame " + std::to_string(r.t) + " outside track extent [" +
                         std::to_string(nodes.front()->t) + ", " + std::to_string(nodes.back()->t) + "]");
    }
    return errors;
}

// ---------------------------------------------------------------- files

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw Error("write failed for '" + path.string() + "'");
}

std::string read_text_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_volume_file(const fs::path& path, const Volume& v) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(float)));
    if (!os) throw Error("write failed for '" + path.string() + "'");
}

Volume read_volume_file(const fs::path& path, Shape4 shape) {
    std::error_code ec;
    const auto bytes = fs::file_size(path, ec);
    if (ec) throw IntegrityError("missing volume file '" + path.string() + "'");
    if (bytes != shape.size() * sizeof(float))
        throw IntegrityError("volume file '" + path.string() + "' has " + std::to_string(bytes) + " bytes, expected " +
                             std::to_string(shape.size() * sizeof(float)));
    Volume v(shape);
    std::ifstream is(path, std::ios::binary);
    is.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(bytes));
    if (!is) throw IntegrityError("short read on '" + path.string() + "'");
    return v;
}

// ---------------------------------------------------------------- handle

Dataset::Dataset(Dataset&&) noexcept = default;
Dataset& Dataset::operator=(Dataset&&) noexcept = default;
Dataset::~Dataset() = default;

Dataset Dataset::open(const fs::path& root) {
    const auto meta_path = root / "meta.json";
    if (!fs::exists(meta_path)) throw ParseError("meta.json", "not found in '" + root.string() + "'");
    Dataset ds;
    ds.root_ = root;
    ds.meta_ = meta_from_json(read_text_file(meta_path));
    ds.mutex_ = std::make_unique<std::mutex>();
    ds.write_mutex_ = std::make_unique<std::mutex>();

    std::vector<std::string> missing;
    for (const auto& fov : ds.meta_.fov_ids)
        if (!fs::is_directory(root / "fovs" / fov)) missing.push_back(fov);
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw IntegrityError("fov directories missing on disk: " + list);
    }
    // Size checks are cheap and catch meta/volume disagreement up front without reading data.
    const auto expected = ds.meta_.volume_shape.size() * sizeof(float);
    for (const auto& fov : ds.meta_.fov_ids) {
        for (int t = 0; t < ds.meta_.n_timepoints; ++t) {
            const auto p = ds.volume_path(fov, t);
            std::error_code ec;
            const auto bytes = fs::file_size(p, ec);
            if (ec) throw IntegrityError("missing volume file '" + p.string() + "'");
            if (bytes != expected)
                throw IntegrityError("shape mismatch: '" + p.string() + "' has " + std::to_string(bytes) +
                                     " bytes, meta.volume_shape implies " + std::to_string(expected));
        }
    }
    return ds;
}

fs::path Dataset::volume_path(const std::string& fov, int t) const {
    return root_ / "fovs" / fov / ("t" + std::to_string(t) + ".bin");
}

Volume Dataset::read_volume(const std::string& fov, int t) const {
    if (std::find(meta_.fov_ids.begin(), meta_.fov_ids.end(), fov) == meta_.fov_ids.end())
        throw RangeError("unknown fov '" + fov + "'");
    if (t < 0 || t >= meta_.n_timepoints)
        throw RangeError("frame " + std::to_string(t) + " outside [0, " + std::to_string(meta_.n_timepoints) + ")");
    return read_volume_file(volume_path(fov, t), meta_.volume_shape);
}

const TrackTable& Dataset::tracks() const {
    std::lock_guard lock(*mutex_);
    if (!tracks_) {
        const auto path = root_ / "tracks.csv";
        if (!fs::exists(path)) throw ParseError("tracks.csv", "not found");
        auto table = tracks_from_csv(read_text_file(path));
        table.validate_against(meta_);
        tracks_ = std::move(table);
    }
    return *tracks_;
}

std::vector<AnnotationRecord> Dataset::read_annotations() const {
    std::lock_guard lock(*mutex_);
    std::vector<AnnotationRecord> out;
    const auto path = root_ / "annotations.jsonl";
    if (!fs::exists(path)) return out;
    std::istringstream is(read_text_file(path));
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(annotation_from_json(line));
    }
    return out;
}

std::vector<AnnotationRecord> Dataset::write_annotations(const std::vector<AnnotationRecord>& records) {
    std::lock_guard writer(*write_mutex_);
    const auto& table = tracks();
    for (const auto& r : records) {
        auto errs = annotation_field_errors(r, table);
        if (!errs.empty()) throw ValidationError("annotation " + to_string(r.key()) + ": " + errs.front());
    }
    auto all = read_annotations();
    using Key = std::tuple<std::string, std::int64_t, int, int, int>;
    auto key_of = [](const AnnotationRecord& r) {
        return Key{r.fov, r.track, r.t, static_cast<int>(r.label_type), static_cast<int>(r.source)};
    };
    std::map<Key, std::size_t> position;
    for (std::size_t i = 0; i < all.size(); ++i) position[key_of(all[i])] = i;
    for (const auto& r : records) {
        auto it = position.find(key_of(r));
        if (it != position.end()) {
            all[it->second] = r;
        } else {
            position[key_of(r)] = all.size();
            all.push_back(r);
        }
    }
    std::string text;
    for (const auto& r : all) text += annotation_to_json(r) + "\n";
    const auto path = root_ / "annotations.jsonl";
    const auto tmp = root_ / "annotations.jsonl.tmp";
    write_text_file(tmp, text);
    fs::rename(tmp, path);
    return all;
}

}  // namespace dynaclr
