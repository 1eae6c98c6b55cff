#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dynaclr/image.hpp"
#include "dynaclr/nn/encoder.hpp"
#include "dynaclr/probe.hpp"
#include "dynaclr/types.hpp"

namespace dynaclr::attribution {

enum class Method { occlusion, integrated_gradients };
std::string to_string(Method m);

/// Scalar score of a patch. `gradient` is empty for black-box scores.
struct ScoreFunction {
    std::function<double(const Volume&)> value;
    /// Returns the score and writes d(score)/d(input) into `grad` (same shape).
    std::function<double(const Volume&, Volume& grad)> gradient;
};

/// f(x) = w . x + b over the flattened patch.
ScoreFunction linear_score(std::vector<double> weights, double bias);
/// Logit of a linear probe applied to the encoder's feature vector h.
ScoreFunction probe_score(std::shared_ptr<const nn::Encoder<double>> encoder, const probe::ProbeModel& probe);

struct AttributionMap {
    Volume values;
    Method method = Method::occlusion;
    std::string head = "infection";
    std::optional<double> predicted_probability;
    std::optional<int> true_class;
    double score = 0;           // f(x)
    double baseline_score = 0;  // f(baseline)
    std::string settings_json = "{}";

    double total() const;
};

struct OcclusionConfig {
    Size3 window{15, 8, 8};
    Size3 stride{15, 4, 4};
    float baseline = 0;
    /// Occlude one channel at a time instead of all channels jointly.
    bool per_channel = false;

    /// Full z extent, lateral window size/16 and stride size/32 (at least 1).
    static OcclusionConfig scaled_for(Size3 patch);
    void validate(const Shape4& patch) const;
};

/// Per-voxel mean score drop over all window placements covering the voxel.
AttributionMap occlusion_map(const ScoreFunction& score, const Volume& patch, const OcclusionConfig& cfg = {});

struct IgConfig {
    float baseline = 0;
    int steps = 32;
    bool multiply_inputs = false;

    void validate() const;
};

/// Integrated gradients along the straight path from a constant baseline (midpoint rule).
AttributionMap integrated_gradients_map(const ScoreFunction& score, const Volume& patch, const IgConfig& cfg = {});

struct ClippedMap {
    Volume values;
    double low_pct = 1, high_pct = 99;
    double low_value = 0, high_value = 0;
};

ClippedMap clip_for_display(const Volume& map, double low_pct = 1, double high_pct = 99);

/// Raw float volume at `<stem>.bin` plus a JSON sidecar at `<stem>.json`.
void save_map(const std::filesystem::path& stem, const AttributionMap& map);
AttributionMap load_map(const std::filesystem::path& stem);

/// Center-slice panel: each input channel in gray above its clipped attribution.
image::Image render_panel(const Volume& patch, const AttributionMap& map, int scale = 4);

}  // namespace dynaclr::attribution
