#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dynaclr/dataset_store.hpp"

namespace dynaclr::synth {

/// Infection onset model for one condition. Onset frames follow a logistic
/// distribution; `susceptible_fraction` of cells ever become infected.
struct OnsetModel {
    bool infected = false;
    double midpoint_frames = 8.0;
    double scale_frames = 1.5;
    double susceptible_fraction = 0.85;
};

struct SynthConfig {
    int fovs_per_condition = 2;
    std::vector<std::string> conditions{"mock", "moi5"};
    std::map<std::string, OnsetModel> onset{{"mock", {}}, {"moi5", {true, 8.0, 1.5, 0.85}}};
    int cells_per_fov = 50;
    int n_timepoints = 20;
    Shape4 volume_shape{2, 5, 256, 256};
    double dt_minutes = 30.0;
    double t0_hpi_minutes = 180.0;
    double division_rate = 0.01;
    double motion_sigma = 1.0;
    /// Scales the frame-to-frame drift of cell shape and internal texture.
    double shape_drift = 1.0;
    /// Per-frame probability that a granule relocates to a fresh position.
    double granule_turnover = 0.3;
    /// Minimum centroid distance between live cells (voxels).
    double min_spacing = 16.0;
    /// Cells start at least this far (voxels) from the lateral border.
    double start_margin = 34.0;
    std::uint64_t seed = 7;

    void validate() const;
    std::string to_json() const;
    static SynthConfig from_json(const std::string& text);
    std::vector<std::string> fov_ids() const;
    const std::string& condition_of_fov(const std::string& fov) const;
};

/// Internal per-cell state, exposed so tests can compare generated labels
/// against the generator's own onset times.
struct CellTruth {
    std::string fov;
    std::int64_t track = 0;
    /// First infected frame; INT32_MAX when the cell never becomes infected.
    int onset_frame = 0;
};

struct GenerationResult {
    DatasetMeta meta;
    std::vector<CellTruth> cells;
};

/// Writes a complete dataset in the dataset-store layout. Refuses to write
/// into a directory that already holds a dataset unless `overwrite`.
GenerationResult generate_dataset(const SynthConfig& config, const std::filesystem::path& out, bool overwrite = false);

/// Mitotic window length in frames; the window is {t_division, t_division + 1}.
inline constexpr int mitotic_window_frames = 2;
/// Frames over which the sensor moves from the ring to the nucleus.
inline constexpr int translocation_frames = 3;

}  // namespace dynaclr::synth
