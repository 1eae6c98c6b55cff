#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "dynaclr/types.hpp"

namespace dynaclr {

struct DatasetMeta {
    std::vector<std::string> channels;
    double dt_minutes = 30.0;
    std::vector<std::string> fov_ids;
    Shape4 volume_shape;
    std::string dtype = "float32";
    std::map<std::string, std::string> conditions;
    double t0_hpi_minutes = 0.0;
    int n_timepoints = 0;

    /// Throws ParseError naming the first field that breaks an invariant.
    void validate() const;
    int channel_index(const std::string& name) const;
    const std::string& condition_of(const std::string& fov) const;
};

std::string meta_to_json(const DatasetMeta& meta);
DatasetMeta meta_from_json(const std::string& text);

struct TrackNode {
    std::string fov;
    std::int64_t track = 0;
    int t = 0;
    Centroid centroid;
    std::optional<std::int64_t> parent;

    NodeKey key() const { return {fov, track, t}; }
    bool operator==(const TrackNode&) const = default;
};

using TrackId = std::pair<std::string, std::int64_t>;

/// Validated collection of track nodes with a (fov, track) -> time-sorted index.
class TrackTable {
public:
    TrackTable() = default;

    /// Validates frame ordering, duplicates and lineage. Does not check
    /// volume bounds; use validate_against() for that.
    static TrackTable from_nodes(std::vector<TrackNode> nodes);

    void validate_against(const DatasetMeta& meta) const;

    const std::vector<TrackNode>& nodes() const noexcept { return nodes_; }
    const std::map<TrackId, std::vector<std::size_t>>& tracks() const noexcept { return index_; }

    /// Time-sorted nodes of one track, empty if unknown.
    std::vector<const TrackNode*> track(const std::string& fov, std::int64_t id) const;
    const TrackNode* find(const NodeKey& key) const;
    bool contains(const NodeKey& key) const { return find(key) != nullptr; }
    std::optional<std::int64_t> parent_of(const std::string& fov, std::int64_t id) const;
    std::vector<std::int64_t> children_of(const std::string& fov, std::int64_t id) const;

    /// Nodes flattened back out of the index, ordered by key.
    std::vector<TrackNode> flatten() const;

private:
    std::vector<TrackNode> nodes_;
    std::map<TrackId, std::vector<std::size_t>> index_;
    std::map<NodeKey, std::size_t> by_key_;
};

std::string tracks_to_csv(const TrackTable& table);
TrackTable tracks_from_csv(const std::string& text);

struct DivisionEvent {
    std::string fov;
    std::int64_t parent = 0;
    int t_division = 0;
    auto operator<=>(const DivisionEvent&) const = default;
};

struct DivisionScan {
    std::vector<DivisionEvent> events;
    /// One message per single-daughter parent link (treated as a relabel).
    std::vector<std::string> warnings;
};

DivisionScan division_events(const TrackTable& table);

enum class LabelType { infection, division };
enum class LabelSource { ground_truth, human };

std::string to_string(LabelType t);
std::string to_string(LabelSource s);
LabelType label_type_from_string(const std::string& s);
LabelSource label_source_from_string(const std::string& s);

struct AnnotationRecord {
    std::string fov;
    std::int64_t track = 0;
    int t = 0;
    LabelType label_type = LabelType::infection;
    int value = 0;
    LabelSource source = LabelSource::ground_truth;

    NodeKey key() const { return {fov, track, t}; }
    bool operator==(const AnnotationRecord&) const = default;
};

std::string annotation_to_json(const AnnotationRecord& r);
AnnotationRecord annotation_from_json(const std::string& line);

/// Field-level problems with one record; empty when the record is acceptable.
std::vector<std::string> annotation_field_errors(const AnnotationRecord& r, const TrackTable& table);

/// Handle to an on-disk dataset directory. Volumes are read lazily; tracks
/// and annotations are loaded on demand. Reads are safe from many threads,
/// annotation writes are serialized internally.
class Dataset {
public:
    static Dataset open(const std::filesystem::path& root);

    Dataset(const Dataset&) = delete;
    Dataset& operator=(const Dataset&) = delete;
    Dataset(Dataset&&) noexcept;
    Dataset& operator=(Dataset&&) noexcept;
    ~Dataset();

    const DatasetMeta& meta() const noexcept { return meta_; }
    const std::filesystem::path& root() const noexcept { return root_; }

    Volume read_volume(const std::string& fov, int t) const;

    /// Parsed and validated track table (cached after the first call).
    const TrackTable& tracks() const;

    std::vector<AnnotationRecord> read_annotations() const;
    /// Upsert keyed by (fov, track, t, label_type, source); returns all records.
    std::vector<AnnotationRecord> write_annotations(const std::vector<AnnotationRecord>& records);

    std::filesystem::path volume_path(const std::string& fov, int t) const;

private:
    Dataset() = default;

    std::filesystem::path root_;
    DatasetMeta meta_;
    mutable std::unique_ptr<std::mutex> mutex_;
    std::unique_ptr<std::mutex> write_mutex_;
    mutable std::optional<TrackTable> tracks_;
};

/// Write helpers shared by the generator and tests.
void write_volume_file(const std::filesystem::path& path, const Volume& v);
Volume read_volume_file(const std::filesystem::path& path, Shape4 shape);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace dynaclr
