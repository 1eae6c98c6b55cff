#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynaclr/types.hpp"

namespace dynaclr {

/// Per-node features h and projections z, rows in key order.
struct EmbeddingTable {
    std::vector<NodeKey> keys;
    int feature_dim = 0;
    int projection_dim = 0;
    std::vector<float> features;     // [rows, feature_dim]
    std::vector<float> projections;  // [rows, projection_dim]
    std::string model_checksum;
    std::string config_json = "{}";
    std::string dataset;

    std::size_t rows() const noexcept { return keys.size(); }
    std::span<const float> feature(std::size_t row) const {
        return {features.data() + row * feature_dim, static_cast<std::size_t>(feature_dim)};
    }
    std::span<const float> projection(std::size_t row) const {
        return {projections.data() + row * projection_dim, static_cast<std::size_t>(projection_dim)};
    }

    std::optional<std::size_t> find(const NodeKey& key) const;

    /// Sorted unique keys, consistent sizes, finite values.
    void validate() const;

    /// Rows restricted to the given FOVs, order preserved.
    EmbeddingTable select_fovs(const std::vector<std::string>& fovs) const;
};

/// Directory layout: index.csv, features.bin, projections.bin, meta.json.
void save_embeddings(const std::filesystem::path& dir, const EmbeddingTable& table);
EmbeddingTable load_embeddings(const std::filesystem::path& dir);

}  // namespace dynaclr
