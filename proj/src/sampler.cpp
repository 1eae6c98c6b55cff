#include "dynaclr/sampler.hpp"

#include <algorithm>
#include <cstdint>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dynaclr/errors.hpp"

using nlohmann::json;

namespace dynaclr::sampler {

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::classical: return "classical";
        case Strategy::cell_aware: return "cell_aware";
        case Strategy::cell_time_aware: return "cell_time_aware";
    }
    return "unknown";
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "classical") return Strategy::classical;
    if (s == "cell_aware" || s == "cell" || s == "cell-aware") return Strategy::cell_aware;
    if (s == "cell_time_aware" || s == "cell-time" || s == "cell-time-aware") return Strategy::cell_time_aware;
    throw ConfigError("unknown sampling strategy '" + s + "'");
}

void SamplerConfig::validate() const {
    if (strategy == Strategy::cell_time_aware && tau_frames < 1) throw ConfigError("tau_frames must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

std::string SamplerConfig::to_json() const {
    json j{{"strategy", to_string(strategy)},
           {"tau_frames", tau_frames},
           {"batch_size", batch_size},
           {"seed", seed},
           {"fovs", fovs}};
    return j.dump(2);
}

SamplerConfig SamplerConfig::from_json(const std::string& text) {
    SamplerConfig c;
    try {
        const json j = json::parse(text);
        if (j.contains("strategy")) c.strategy = strategy_from_string(j["strategy"].get<std::string>());
        if (j.contains("tau_frames")) c.tau_frames = j["tau_frames"].get<int>();
        if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("fovs")) c.fovs = j["fovs"].get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("sampler config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

bool fov_selected(const SamplerConfig& cfg, const std::string& fov) {
    return cfg.fovs.empty() || std::find(cfg.fovs.begin(), cfg.fovs.end(), fov) != cfg.fovs.end();
}

}  // namespace

std::vector<NodeKey> enumerate_anchors(const TrackTable& table, const SamplerConfig& cfg, const PatchValidity& validity) {
    cfg.validate();
    std::vector<NodeKey> anchors;
    for (const auto& [id, rows] : table.tracks()) {
        if (!fov_selected(cfg, id.first)) continue;
        for (std::size_t r : rows) {
            const auto key = table.nodes()[r].key();
            if (!validity(key)) continue;
            if (cfg.strategy == Strategy::cell_time_aware) {
                const NodeKey next{key.fov, key.track, key.t + cfg.tau_frames};
                if (!table.contains(next) || !validity(next)) continue;
            }
            anchors.push_back(key);
        }
    }
    std::sort(anchors.begin(), anchors.end());
    if (anchors.empty())
        throw EmptyAnchorSetError("no anchors for strategy " + to_string(cfg.strategy) +
                                  (cfg.strategy == Strategy::cell_time_aware
                                       ? " (no track has a valid node at t + " + std::to_string(cfg.tau_frames) + ")"
                                       : std::string(" (no valid patches)")));
    return anchors;
}

TripletSampler::TripletSampler(const TrackTable& table, SamplerConfig cfg, PatchValidity validity)
    : cfg_(std::move(cfg)) {
    anchors_ = enumerate_anchors(table, cfg_, validity);
    for (const auto& n : table.nodes()) {
        if (!fov_selected(cfg_, n.fov)) continue;
        const auto key = n.key();
        if (validity(key)) valid_nodes_.push_back(key);
    }
    std::sort(valid_nodes_.begin(), valid_nodes_.end());
    for (const auto& k : valid_nodes_) by_frame_[k.t].push_back(k);
}

std::vector<NodeKey> TripletSampler::eligible_negatives(const NodeKey& anchor) const {
    std::vector<NodeKey> out;
    switch (cfg_.strategy) {
        case Strategy::classical:
            for (const auto& k : valid_nodes_)
                if (k != anchor) out.push_back(k);
            break;
        case Strategy::cell_aware:
            for (const auto& k : valid_nodes_)
                if (k.fov != anchor.fov || k.track != anchor.track) out.push_back(k);
            break;
        case Strategy::cell_time_aware: {
            auto it = by_frame_.find(anchor.t + cfg_.tau_frames);
            if (it == by_frame_.end()) break;
            for (const auto& k : it->second)
                if (k.fov != anchor.fov || k.track != anchor.track) out.push_back(k);
            break;
        }
    }
    return out;
}

namespace {

/// Uniform draw from `pool` (sorted) skipping the contiguous run [skip_begin, skip_end).
const NodeKey& draw_skipping(const std::vector<NodeKey>& pool, std::size_t skip_begin, std::size_t skip_end, Rng& rng) {
    const std::size_t n = pool.size() - (skip_end - skip_begin);
    std::size_t j = uniform_index(rng, n);
    if (j >= skip_begin) j += skip_end - skip_begin;
    return pool[j];
}

/// Range of `pool` (sorted by key) covering one track.
std::pair<std::size_t, std::size_t> track_run(const std::vector<NodeKey>& pool, const std::string& fov, std::int64_t track) {
    auto lo = std::lower_bound(pool.begin(), pool.end(), NodeKey{fov, track, INT32_MIN});
    auto hi = std::upper_bound(pool.begin(), pool.end(), NodeKey{fov, track, INT32_MAX});
    return {static_cast<std::size_t>(lo - pool.begin()), static_cast<std::size_t>(hi - pool.begin())};
}

}  // namespace

TripletIndex TripletSampler::sample(const NodeKey& anchor, Rng& rng) const {
    TripletIndex tri;
    tri.anchor = anchor;
    switch (cfg_.strategy) {
        case Strategy::classical: {
            auto it = std::lower_bound(valid_nodes_.begin(), valid_nodes_.end(), anchor);
            const std::size_t pos = static_cast<std::size_t>(it - valid_nodes_.begin());
            const bool present = it != valid_nodes_.end() && *it == anchor;
            if (valid_nodes_.size() - (present ? 1 : 0) == 0)
                throw SamplingError("no eligible negative for anchor " + to_string(anchor));
            tri.negative = draw_skipping(valid_nodes_, pos, present ? pos + 1 : pos, rng);
            break;
        }
        case Strategy::cell_aware: {
            const auto [b, e] = track_run(valid_nodes_, anchor.fov, anchor.track);
            if (valid_nodes_.size() - (e - b) == 0)
                throw SamplingError("no eligible negative for anchor " + to_string(anchor) + ": single track");
            tri.negative = draw_skipping(valid_nodes_, b, e, rng);
            break;
        }
        case Strategy::cell_time_aware: {
            const int target = anchor.t + cfg_.tau_frames;
            const NodeKey positive{anchor.fov, anchor.track, target};
            if (!std::binary_search(valid_nodes_.begin(), valid_nodes_.end(), positive))
                throw SamplingError("anchor " + to_string(anchor) + " has no valid node at t + tau");
            tri.positive = positive;
            auto it = by_frame_.find(target);
            const auto& pool = it->second;
            const auto [b, e] = track_run(pool, anchor.fov, anchor.track);
            if (pool.size() - (e - b) == 0)
                throw SamplingError("no eligible negative at frame " + std::to_string(target) + " for anchor " +
                                    to_string(anchor));
            tri.negative = draw_skipping(pool, b, e, rng);
            break;
        }
    }
    return tri;
}

TripletIndex sample_triplet(const NodeKey& anchor, const TripletSampler& sampler, Rng& rng) {
    return sampler.sample(anchor, rng);
}

TripletBatch build_triplet_batch(const std::vector<TripletIndex>& indices, const patch::PatchSource& source,
                                 const patch::AugmentationConfig& aug, std::uint64_t seed,
                                 const std::function<TripletIndex(Rng&)>& resample, int max_retries) {
    const auto& spec = source.spec();
    TripletBatch batch;
    batch.batch = static_cast<int>(indices.size());
    batch.patch_shape = {static_cast<int>(spec.channels.size()), spec.final_size.z, spec.final_size.y, spec.final_size.x};
    const std::size_t n = batch.patch_shape.size();
    batch.anchor.resize(n * indices.size());
    batch.positive.resize(n * indices.size());
    batch.negative.resize(n * indices.size());
    batch.indices.reserve(indices.size());

    for (std::size_t i = 0; i < indices.size(); ++i) {
        TripletIndex tri = indices[i];
        patch::Patch a, p, ng;
        for (int attempt = 0;; ++attempt) {
            a = source.source_patch(tri.anchor);
            p = tri.augment_anchor() ? a : source.source_patch(*tri.positive);
            ng = source.source_patch(tri.negative);
            if (a.valid && p.valid && ng.valid) break;
            if (!resample || attempt >= max_retries)
                throw SamplingError("triplet " + std::to_string(i) + " references an invalid patch (anchor " +
                                    to_string(tri.anchor) + ") after " + std::to_string(attempt) + " retries");
            Rng rr(derive_seed(seed, {i, 1000 + static_cast<std::uint64_t>(attempt)}));
            tri = resample(rr);
        }
        const auto aa = patch::augment_patch(a, aug, spec, derive_seed(seed, {i, 1}));
        const auto pa = patch::augment_patch(p, aug, spec, derive_seed(seed, {i, 2}));
        const auto na = patch::augment_patch(ng, aug, spec, derive_seed(seed, {i, 3}));
        std::copy(aa.data.data.begin(), aa.data.data.end(), batch.anchor.begin() + static_cast<std::ptrdiff_t>(i * n));
        std::copy(pa.data.data.begin(), pa.data.data.end(), batch.positive.begin() + static_cast<std::ptrdiff_t>(i * n));
        std::copy(na.data.data.begin(), na.data.data.end(), batch.negative.begin() + static_cast<std::ptrdiff_t>(i * n));
        batch.indices.push_back(tri);
    }
    return batch;
}

std::string triplets_to_csv(const std::vector<TripletIndex>& triplets) {
    std::ostringstream os;
    os << "anchor_fov,anchor_track,anchor_t,positive_fov,positive_track,positive_t,negative_fov,negative_track,negative_t\n";
    for (const auto& t : triplets) {
        os << t.anchor.fov << ',' << t.anchor.track << ',' << t.anchor.t << ',';
        if (t.positive)
            os << t.positive->fov << ',' << t.positive->track << ',' << t.positive->t << ',';
        else
            os << "augment_anchor,,,";
        os << t.negative.fov << ',' << t.negative.track << ',' << t.negative.t << '\n';
    }
    return os.str();
}

}  // namespace dynaclr::sampler
