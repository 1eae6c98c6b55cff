#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/embedding_table.hpp"
#include "dynaclr/types.hpp"

namespace dynaclr::analytics {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Space { features, projection2d };
std::string to_string(Space s);
Space space_from_string(const std::string& s);

/// Rows keyed like an EmbeddingTable, in key order.
struct KeyedRows {
    std::vector<NodeKey> keys;
    Matrix values;
};

KeyedRows feature_rows(const EmbeddingTable& table);
KeyedRows projection_rows(const EmbeddingTable& table);

/// d_i = | z_0/|z_0| - z_i/|z_i| | for time-ordered rows of one track.
std::vector<double> distance_from_start(const Matrix& track_rows);

struct LagStats {
    int tau = 0;
    std::size_t pairs = 0;
    /// Absent when no (track, t) pair spans this lag.
    std::optional<double> mean, stddev;

    double standard_error() const;
};

struct SmoothnessCurve {
    Space space = Space::features;
    int tau_max = 0;
    std::vector<LagStats> lags;  // tau = 0 .. tau_max
};

/// Pools |x_t/|x_t| - x_{t+tau}/|x_{t+tau}|| over every (track, t) with both
/// endpoints present. Standard deviation is the population form.
SmoothnessCurve displacement_at_lag(const KeyedRows& rows, int tau_max, Space space = Space::features);
SmoothnessCurve displacement_at_lag(const EmbeddingTable& table, int tau_max);

struct ProjectionResult {
    Matrix components;  // [k, dim], orthonormal rows
    Matrix scores;      // [n, k]
    std::vector<double> explained_variance_ratio;
    std::vector<double> mean;  // [dim]
    std::vector<NodeKey> keys;
};

/// Mean-centered SVD; each component's largest-magnitude loading is positive.
ProjectionResult pca_project(const KeyedRows& rows, int k);
ProjectionResult pca_project(const EmbeddingTable& table, int k);

struct RankResult {
    int rank = 0;
    double rel_tol = 1e-6;
    std::vector<double> singular_values;
};

/// Count of singular values of the centered matrix above sigma_max * rel_tol.
RankResult embedding_rank(const Matrix& rows, double rel_tol = 1e-6);
RankResult embedding_rank(const EmbeddingTable& table, double rel_tol = 1e-6);

inline constexpr double fluor_area_threshold = 0.5;

struct ImageFeatures {
    double fluor_radial_slope = 0;
    double fluor_area = 0;
    double phase_iqr = 0;
    double phase_std = 0;
};

inline const std::vector<std::string>& image_feature_names() {
    static const std::vector<std::string> names{"fluor_radial_slope", "fluor_area", "phase_iqr", "phase_std"};
    return names;
}

/// Radial profile: voxels binned by floor of lateral distance to the patch
/// center (bins inside the inscribed circle), slope of bin means against the
/// bins' mean radii by least squares.
ImageFeatures compute_image_features(const Volume& patch, const std::vector<std::string>& channels,
                                     const std::string& phase_channel = "phase",
                                     const std::string& fluor_channel = "rfp");

/// Average ranks for ties, 1-based.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman correlation of every feature column with every score column;
/// nullopt marks an undefined correlation (a constant column).
std::vector<std::vector<std::optional<double>>> correlate_features_with_pcs(const Matrix& features, const Matrix& scores);

struct LabeledNode {
    NodeKey key;
    int label = 0;
};

struct FractionPoint {
    int t = 0;
    double hpi_minutes = 0;
    std::size_t labeled = 0;
    std::size_t infected = 0;
    double fraction = 0;
};

/// Per condition, frames with at least one labeled node.
std::map<std::string, std::vector<FractionPoint>> infection_fraction_timeseries(const std::vector<LabeledNode>& labels,
                                                                                const DatasetMeta& meta);

/// External 2D coordinates: CSV with header fov_id,track_id,t,x,y.
KeyedRows load_projection_csv(const std::filesystem::path& path);

/// Rows of `coords` aligned to `keys`; a missing key is an IntegrityError.
KeyedRows align_rows(const KeyedRows& coords, const std::vector<NodeKey>& keys);

}  // namespace dynaclr::analytics
