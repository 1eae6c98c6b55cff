#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/types.hpp"

namespace dynaclr::patch {

enum class ChannelKind { phase, fluorescence };

/// "phase" is quantitative phase; every other channel is treated as fluorescence.
ChannelKind channel_kind(const std::string& name);

using dynaclr::Size3;

struct Range {
    double lo = 0, hi = 0;
};

/// Augmentation parameters. Every transform is gated by its
/// own Bernoulli draw; intensity transforms are drawn per channel.
struct AugmentationConfig {
    Range spatial_scale{-0.3, 0.3};
    double p_spatial_scale = 0.8;
    Range rotation{0.0, 3.141592653589793};
    double p_rotation = 0.8;
    Range shear{0.0, 0.01};
    double p_shear = 0.8;
    Range gamma{0.8, 1.2};
    double p_gamma = 0.5;
    Range intensity_scale{-0.5, 0.5};
    double p_intensity_scale_phase = 0.5;
    double p_intensity_scale_fluorescence = 0.7;
    Range smooth_sigma{0.25, 0.75};
    double p_smooth = 0.5;
    Range noise_sigma_phase{0.0, 0.2};
    Range noise_sigma_fluorescence{0.0, 0.5};
    double p_noise = 0.5;

    /// All probabilities zero and every range collapsed onto the identity.
    static AugmentationConfig identity();

    void validate() const;
    /// Largest |scale - 1| the spatial transform can produce.
    double max_scale() const;
    double max_shear() const;

    std::string to_json() const;
    static AugmentationConfig from_json(const std::string& text);
};

struct PatchSpec {
    Size3 final_size{5, 32, 32};
    Size3 source_crop{5, 64, 64};
    std::vector<std::string> channels{"phase", "rfp"};

    static PatchSpec desk();
    static PatchSpec full_scale();

    /// Throws ConfigError when a spatial augmentation under `aug` could
    /// sample outside the source crop.
    void validate(const AugmentationConfig& aug) const;

    std::string to_json() const;
    static PatchSpec from_json(const std::string& text);
};

struct Patch {
    Volume data;
    NodeKey key;
    bool valid = false;
};

/// Median and 99th percentile (linear interpolation between order statistics).
struct FluorescenceStats {
    double median = 0, p99 = 0;
};
struct PhaseStats {
    double mean = 0, std = 0;
};

double percentile(std::vector<float> values, double q);
FluorescenceStats fluorescence_stats(std::span<const float> values);
PhaseStats phase_stats(std::span<const std::span<const float>> series);

/// Fluorescence: (v - median) / (p99 - median) from the volume itself.
/// Phase: (v - mean) / std with per-FOV statistics supplied by the caller.
std::vector<float> normalize_channel(std::span<const float> values, ChannelKind kind,
                                     std::optional<PhaseStats> fov_stats = std::nullopt,
                                     const std::string& channel_name = "");

/// Crop `spec.source_crop` around the rounded centroid; invalid when the crop
/// leaves the volume.
Patch extract_patch(const Volume& volume, const Centroid& centroid, const PatchSpec& spec, const NodeKey& key = {});

/// Central `size` region of a patch.
Patch center_crop(const Patch& patch, Size3 size);

/// Spatial transforms (scale, rotation, shear; shared by all channels) followed
/// by per-channel intensity transforms (gamma, scaling, smoothing, noise). The
/// output is sampled directly on the centered final grid.
Patch augment_patch(const Patch& patch, const AugmentationConfig& cfg, const PatchSpec& spec, std::uint64_t seed);

/// Lazily normalizes dataset volumes and serves patches. Phase statistics are
/// per FOV over the full series, fluorescence statistics per volume. Thread-safe.
class PatchSource {
public:
    PatchSource(const Dataset& dataset, PatchSpec spec);

    const PatchSpec& spec() const noexcept { return spec_; }
    const Dataset& dataset() const noexcept { return *dataset_; }

    /// Normalized source-crop patch, or an invalid patch.
    Patch source_patch(const NodeKey& key) const;
    /// Normalized, un-augmented, center-cropped patch at final size.
    Patch final_patch(const NodeKey& key) const;
    bool valid(const NodeKey& key) const;

    std::shared_ptr<const Volume> normalized_volume(const std::string& fov, int t) const;
    PhaseStats fov_phase_stats(const std::string& fov, int channel) const;

private:
    const Dataset* dataset_;
    PatchSpec spec_;
    std::vector<int> channel_index_;
    std::vector<ChannelKind> kinds_;
    mutable std::mutex mutex_;
    mutable std::map<std::pair<std::string, int>, std::shared_ptr<const Volume>> volumes_;
    mutable std::map<std::pair<std::string, int>, PhaseStats> phase_stats_;
};

}  // namespace dynaclr::patch
