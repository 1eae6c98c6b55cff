#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/patch_pipeline.hpp"
#include "dynaclr/rng.hpp"

namespace dynaclr::sampler {

enum class Strategy { classical, cell_aware, cell_time_aware };

std::string to_string(Strategy s);
/// Accepts "classical", "cell_aware"/"cell", "cell_time_aware"/"cell-time".
Strategy strategy_from_string(const std::string& s);

struct SamplerConfig {
    Strategy strategy = Strategy::cell_time_aware;
    int tau_frames = 1;
    int batch_size = 64;
    std::uint64_t seed = 0;
    /// Restrict sampling to these FOVs; empty means all.
    std::vector<std::string> fovs;

    void validate() const;
    std::string to_json() const;
    static SamplerConfig from_json(const std::string& text);
};

/// A triplet of node references; `positive` empty means "augment the anchor".
struct TripletIndex {
    NodeKey anchor;
    std::optional<NodeKey> positive;
    NodeKey negative;

    bool augment_anchor() const { return !positive.has_value(); }
};

using PatchValidity = std::function<bool(const NodeKey&)>;

/// Precomputed eligibility sets over a track table.
class TripletSampler {
public:
    TripletSampler(const TrackTable& table, SamplerConfig cfg, PatchValidity validity);

    const SamplerConfig& config() const noexcept { return cfg_; }

    /// Anchors in key order. Throws EmptyAnchorSetError when none qualify.
    const std::vector<NodeKey>& anchors() const noexcept { return anchors_; }

    TripletIndex sample(const NodeKey& anchor, Rng& rng) const;

    /// Candidate negatives for an anchor (for tests and audits), in key order.
    std::vector<NodeKey> eligible_negatives(const NodeKey& anchor) const;

private:
    SamplerConfig cfg_;
    std::vector<NodeKey> anchors_;
    std::vector<NodeKey> valid_nodes_;             // all valid nodes, key order
    std::map<int, std::vector<NodeKey>> by_frame_;  // valid nodes per frame
};

std::vector<NodeKey> enumerate_anchors(const TrackTable& table, const SamplerConfig& cfg, const PatchValidity& validity);

TripletIndex sample_triplet(const NodeKey& anchor, const TripletSampler& sampler, Rng& rng);

/// Aligned [B, C, Z, Y, X] stacks.
struct TripletBatch {
    int batch = 0;
    Shape4 patch_shape;
    std::vector<float> anchor, positive, negative;
    std::vector<TripletIndex> indices;
};

/// Builds augmented stacks. Anchor and positive are augmented independently;
/// an "augment_anchor" positive is a second augmentation of the anchor patch.
/// A triplet touching an invalid patch is replaced by `resample` up to
/// `max_retries` times.
TripletBatch build_triplet_batch(const std::vector<TripletIndex>& indices, const patch::PatchSource& source,
                                 const patch::AugmentationConfig& aug, std::uint64_t seed,
                                 const std::function<TripletIndex(Rng&)>& resample = {}, int max_retries = 5);

/// CSV audit log of sampled triplets.
std::string triplets_to_csv(const std::vector<TripletIndex>& triplets);

}  // namespace dynaclr::sampler
