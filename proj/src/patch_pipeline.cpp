#include "dynaclr/patch_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dynaclr/errors.hpp"
#include "dynaclr/rng.hpp"

using nlohmann::json;

namespace dynaclr::patch {

ChannelKind channel_kind(const std::string& name) {
    return name == "phase" ? ChannelKind::phase : ChannelKind::fluorescence;
}

// ---------------------------------------------------------------- config

AugmentationConfig AugmentationConfig::identity() {
    AugmentationConfig c;
    c.spatial_scale = {0, 0};
    c.p_spatial_scale = 0;
    c.rotation = {0, 0};
    c.p_rotation = 0;
    c.shear = {0, 0};
    c.p_shear = 0;
    c.gamma = {1, 1};
    c.p_gamma = 0;
    c.intensity_scale = {0, 0};
    c.p_intensity_scale_phase = 0;
    c.p_intensity_scale_fluorescence = 0;
    c.smooth_sigma = {0.25, 0.25};
    c.p_smooth = 0;
    c.noise_sigma_phase = {0, 0};
    c.noise_sigma_fluorescence = {0, 0};
    c.p_noise = 0;
    return c;
}

void AugmentationConfig::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augmentation probability ") + name + " outside [0, 1]");
    };
    auto ordered = [](Range r, const char* name) {
        if (!(r.lo <= r.hi)) throw ConfigError(std::string("augmentation range ") + name + " is not ordered");
    };
    prob(p_spatial_scale, "spatial_scale");
    prob(p_rotation, "rotation");
    prob(p_shear, "shear");
    prob(p_gamma, "adjust_contrast");
    prob(p_intensity_scale_phase, "intensity_scale.p_phase");
    prob(p_intensity_scale_fluorescence, "intensity_scale.p_fluorescence");
    prob(p_smooth, "gaussian_smooth");
    prob(p_noise, "gaussian_noise");
    ordered(spatial_scale, "spatial_scale");
    ordered(rotation, "rotation");
    ordered(shear, "shear");
    ordered(gamma, "adjust_contrast");
    ordered(intensity_scale, "intensity_scale");
    ordered(smooth_sigma, "gaussian_smooth");
    ordered(noise_sigma_phase, "gaussian_noise.sigma_phase");
    ordered(noise_sigma_fluorescence, "gaussian_noise.sigma_fluorescence");
    if (spatial_scale.lo <= -1.0) throw ConfigError("spatial_scale must stay above -1");
    if (gamma.lo <= 0.0) throw ConfigError("adjust_contrast gamma must be positive");
    if (smooth_sigma.lo <= 0.0) throw ConfigError("gaussian_smooth sigma must be positive");
    if (noise_sigma_phase.lo < 0.0 || noise_sigma_fluorescence.lo < 0.0)
        throw ConfigError("gaussian_noise sigma must be non-negative");
}

double AugmentationConfig::max_scale() const {
    return p_spatial_scale > 0 ? std::max(std::abs(spatial_scale.lo), std::abs(spatial_scale.hi)) : 0.0;
}

double AugmentationConfig::max_shear() const {
    return p_shear > 0 ? std::max(std::abs(shear.lo), std::abs(shear.hi)) : 0.0;
}

namespace {

json range_json(Range r) { return json::array({r.lo, r.hi}); }

Range range_from(const json& j, const char* name) {
    if (!j.is_array() || j.size() != 2) throw ConfigError(std::string(name) + " must be a [lo, hi] pair");
    return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

std::string AugmentationConfig::to_json() const {
    json j;
    j["spatial_scale"] = {{"alpha", range_json(spatial_scale)}, {"p", p_spatial_scale}};
    j["rotation"] = {{"theta_z", range_json(rotation)}, {"p", p_rotation}};
    j["shear"] = {{"s", range_json(shear)}, {"p", p_shear}};
    j["adjust_contrast"] = {{"gamma", range_json(gamma)}, {"p", p_gamma}};
    j["intensity_scale"] = {{"alpha", range_json(intensity_scale)},
                            {"p_phase", p_intensity_scale_phase},
                            {"p_fluorescence", p_intensity_scale_fluorescence}};
    j["gaussian_smooth"] = {{"sigma", range_json(smooth_sigma)}, {"p", p_smooth}};
    j["gaussian_noise"] = {{"sigma_phase", range_json(noise_sigma_phase)},
                           {"sigma_fluorescence", range_json(noise_sigma_fluorescence)},
                           {"p", p_noise}};
    return j.dump(2);
}

AugmentationConfig AugmentationConfig::from_json(const std::string& text) {
    AugmentationConfig c;
    try {
        const json j = json::parse(text);
        if (j.contains("spatial_scale")) {
            c.spatial_scale = range_from(j["spatial_scale"].at("alpha"), "spatial_scale.alpha");
            c.p_spatial_scale = j["spatial_scale"].at("p").get<double>();
        }
        if (j.contains("rotation")) {
            c.rotation = range_from(j["rotation"].at("theta_z"), "rotation.theta_z");
            c.p_rotation = j["rotation"].at("p").get<double>();
        }
        if (j.contains("shear")) {
            c.shear = range_from(j["shear"].at("s"), "shear.s");
            c.p_shear = j["shear"].at("p").get<double>();
        }
        if (j.contains("adjust_contrast")) {
            c.gamma = range_from(j["adjust_contrast"].at("gamma"), "adjust_contrast.gamma");
            c.p_gamma = j["adjust_contrast"].at("p").get<double>();
        }
        if (j.contains("intensity_scale")) {
            const auto& s = j["intensity_scale"];
            c.intensity_scale = range_from(s.at("alpha"), "intensity_scale.alpha");
            c.p_intensity_scale_phase = s.at("p_phase").get<double>();
            c.p_intensity_scale_fluorescence = s.at("p_fluorescence").get<double>();
        }
        if (j.contains("gaussian_smooth")) {
            c.smooth_sigma = range_from(j["gaussian_smooth"].at("sigma"), "gaussian_smooth.sigma");
            c.p_smooth = j["gaussian_smooth"].at("p").get<double>();
        }
        if (j.contains("gaussian_noise")) {
            const auto& s = j["gaussian_noise"];
            c.noise_sigma_phase = range_from(s.at("sigma_phase"), "gaussian_noise.sigma_phase");
            c.noise_sigma_fluorescence = range_from(s.at("sigma_fluorescence"), "gaussian_noise.sigma_fluorescence");
            c.p_noise = s.at("p").get<double>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("augmentation config: ") + e.what());
    }
    c.validate();
    return c;
}

PatchSpec PatchSpec::desk() { return {}; }

std::string PatchSpec::to_json() const {
    json j{{"final_size", {final_size.z, final_size.y, final_size.x}},
           {"source_crop", {source_crop.z, source_crop.y, source_crop.x}},
           {"channels", channels}};
    return j.dump(2);
}

PatchSpec PatchSpec::from_json(const std::string& text) {
    PatchSpec s;
    try {
        const json j = json::parse(text);
        auto size3 = [&](const char* k, Size3& out) {
            if (!j.contains(k)) return;
            const auto& v = j[k];
            if (!v.is_array() || v.size() != 3) throw ConfigError(std::string(k) + " must be [z, y, x]");
            out = {v[0].get<int>(), v[1].get<int>(), v[2].get<int>()};
        };
        size3("final_size", s.final_size);
        size3("source_crop", s.source_crop);
        if (j.contains("channels")) s.channels = j["channels"].get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("patch spec: ") + e.what());
    }
    return s;
}

PatchSpec PatchSpec::full_scale() {
    PatchSpec s;
    s.final_size = {15, 128, 128};
    s.source_crop = {15, 240, 240};
    return s;
}

void PatchSpec::validate(const AugmentationConfig& aug) const {
    if (channels.empty()) throw ConfigError("patch spec needs at least one channel");
    if (final_size.z < 1 || final_size.y < 1 || final_size.x < 1) throw ConfigError("final_size must be positive");
    if (source_crop.z < final_size.z || source_crop.y < final_size.y || source_crop.x < final_size.x)
        throw ConfigError("source_crop must be at least final_size on every axis");
    // Worst-case footprint of the final grid under rotation, scaling and shear,
    // plus one voxel for the interpolation stencil.
    const double stretch = (1.0 + aug.max_scale()) * (1.0 + aug.max_shear());
    const bool rotates = aug.p_rotation > 0 && std::max(std::abs(aug.rotation.lo), std::abs(aug.rotation.hi)) > 0;
    const double turn = rotates ? std::sqrt(2.0) : 1.0;
    for (auto [fin, src, axis] : {std::tuple{final_size.y, source_crop.y, "y"}, std::tuple{final_size.x, source_crop.x, "x"}}) {
        const double needed = std::ceil(fin * turn * (1.0 + aug.max_scale()));
        const double half_fin = (std::max(final_size.y, final_size.x) - 1) / 2.0;
        const double reach = half_fin * turn * stretch + 1.0;
        if (src < needed || reach > (src - 1) / 2.0)
            throw ConfigError(std::string("source_crop.") + axis + " = " + std::to_string(src) +
                              " is too small for final size " + std::to_string(fin) +
                              " under the configured spatial augmentation");
    }
}

// ---------------------------------------------------------------- normalization

double percentile(std::vector<float> values, double q) {
    if (values.empty()) throw ValidationError("percentile of an empty array");
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double a = values[lo];
    double b = a;
    if (hi != lo) b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
    return a + (pos - static_cast<double>(lo)) * (b - a);
}

FluorescenceStats fluorescence_stats(std::span<const float> values) {
    std::vector<float> v(values.begin(), values.end());
    return {percentile(v, 50.0), percentile(std::move(v), 99.0)};
}

PhaseStats phase_stats(std::span<const std::span<const float>> series) {
    double sum = 0;
    std::size_t n = 0;
    for (auto s : series) {
        for (float v : s) sum += v;
        n += s.size();
    }
    if (n == 0) throw ValidationError("phase statistics of an empty series");
    const double mean = sum / static_cast<double>(n);
    double ss = 0;
    for (auto s : series)
        for (float v : s) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(n))};
}

std::vector<float> normalize_channel(std::span<const float> values, ChannelKind kind, std::optional<PhaseStats> fov_stats,
                                     const std::string& channel_name) {
    double center = 0, scale = 1;
    if (kind == ChannelKind::fluorescence) {
        const auto st = fluorescence_stats(values);
        if (!(st.p99 > st.median)) throw DegenerateStatsError(channel_name.empty() ? "fluorescence" : channel_name, "p99 equals median");
        center = st.median;
        scale = st.p99 - st.median;
    } else {
        const PhaseStats st = fov_stats ? *fov_stats : phase_stats(std::array{values});
        if (!(st.std > 0)) throw DegenerateStatsError(channel_name.empty() ? "phase" : channel_name, "standard deviation is zero");
        center = st.mean;
        scale = st.std;
    }
    std::vector<float> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>((values[i] - center) / scale);
    return out;
}

// ---------------------------------------------------------------- extraction

Patch extract_patch(const Volume& volume, const Centroid& centroid, const PatchSpec& spec, const NodeKey& key) {
    Patch p;
    p.key = key;
    const auto& s = volume.shape;
    const Size3 crop = spec.source_crop;
    const int cz = static_cast<int>(std::lround(centroid.z));
    const int cy = static_cast<int>(std::lround(centroid.y));
    const int cx = static_cast<int>(std::lround(centroid.x));
    const int z0 = cz - crop.z / 2, y0 = cy - crop.y / 2, x0 = cx - crop.x / 2;
    if (z0 < 0 || y0 < 0 || x0 < 0 || z0 + crop.z > s.z || y0 + crop.y > s.y || x0 + crop.x > s.x) return p;
    p.valid = true;
    p.data = Volume({s.c, crop.z, crop.y, crop.x});
    for (int c = 0; c < s.c; ++c)
        for (int z = 0; z < crop.z; ++z)
            for (int y = 0; y < crop.y; ++y) {
                const float* src = &volume.data[volume.index(c, z0 + z, y0 + y, x0)];
                std::copy(src, src + crop.x, &p.data.at(c, z, y, 0));
            }
    return p;
}

Patch center_crop(const Patch& patch, Size3 size) {
    if (!patch.valid) return patch;
    const auto& s = patch.data.shape;
    if (size.z > s.z || size.y > s.y || size.x > s.x) throw ConfigError("center crop larger than patch");
    Patch out;
    out.key = patch.key;
    out.valid = true;
    out.data = Volume({s.c, size.z, size.y, size.x});
    const int z0 = (s.z - size.z) / 2, y0 = (s.y - size.y) / 2, x0 = (s.x - size.x) / 2;
    for (int c = 0; c < s.c; ++c)
        for (int z = 0; z < size.z; ++z)
            for (int y = 0; y < size.y; ++y) {
                const float* src = patch.data.data.data() + patch.data.index(c, z0 + z, y0 + y, x0);
                std::copy(src, src + size.x, &out.data.at(c, z, y, 0));
            }
    return out;
}

// ---------------------------------------------------------------- augmentation

namespace {

void gaussian_smooth_plane(float* data, int ny, int nx, double sigma_y, double sigma_x, std::vector<float>& scratch) {
    auto kernel = [](double sigma) {
        const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
        std::vector<double> k(2 * r + 1);
        double sum = 0;
        for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
        for (auto& v : k) v /= sum;
        return k;
    };
    const auto ky = kernel(sigma_y), kx = kernel(sigma_x);
    const int ry = static_cast<int>(ky.size() / 2), rx = static_cast<int>(kx.size() / 2);
    scratch.assign(static_cast<std::size_t>(ny) * nx, 0.0f);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            double acc = 0;
            for (int i = -rx; i <= rx; ++i) acc += kx[i + rx] * data[y * nx + std::clamp(x + i, 0, nx - 1)];
            scratch[y * nx + x] = static_cast<float>(acc);
        }
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            double acc = 0;
            for (int i = -ry; i <= ry; ++i) acc += ky[i + ry] * scratch[std::clamp(y + i, 0, ny - 1) * nx + x];
            data[y * nx + x] = static_cast<float>(acc);
        }
}

}  // namespace

Patch augment_patch(const Patch& patch, const AugmentationConfig& cfg, const PatchSpec& spec, std::uint64_t seed) {
    if (!patch.valid) throw ValidationError("cannot augment an invalid patch " + to_string(patch.key));
    const auto& in = patch.data;
    const Size3 fin = spec.final_size;
    if (in.shape.z < fin.z || in.shape.y < fin.y || in.shape.x < fin.x)
        throw ConfigError("patch smaller than final_size");
    if (static_cast<std::size_t>(in.shape.c) != spec.channels.size())
        throw ConfigError("patch channel count does not match the patch spec");

    Rng rng(seed);
    // Spatial parameters, one draw per transform, shared by all channels.
    double scale_y = 1, scale_x = 1, theta = 0, shear_x = 0, shear_y = 0;
    if (bernoulli(rng, cfg.p_spatial_scale)) {
        scale_y = 1 + uniform(rng, cfg.spatial_scale.lo, cfg.spatial_scale.hi);
        scale_x = 1 + uniform(rng, cfg.spatial_scale.lo, cfg.spatial_scale.hi);
    }
    if (bernoulli(rng, cfg.p_rotation)) theta = uniform(rng, cfg.rotation.lo, cfg.rotation.hi);
    if (bernoulli(rng, cfg.p_shear)) {
        shear_x = uniform(rng, cfg.shear.lo, cfg.shear.hi);
        shear_y = uniform(rng, cfg.shear.lo, cfg.shear.hi);
    }
    // Sampling map: source offset = R(theta) * Shear * Scale * output offset.
    const double c = std::cos(theta), s = std::sin(theta);
    const double m00 = (c - s * shear_y) * scale_x, m01 = (c * shear_x - s) * scale_y;
    const double m10 = (s + c * shear_y) * scale_x, m11 = (s * shear_x + c) * scale_y;

    Patch out;
    out.key = patch.key;
    out.valid = true;
    out.data = Volume({in.shape.c, fin.z, fin.y, fin.x});
    const int z0 = (in.shape.z - fin.z) / 2;
    const double ocy = (fin.y - 1) / 2.0, ocx = (fin.x - 1) / 2.0;
    const double icy = (in.shape.y - 1) / 2.0, icx = (in.shape.x - 1) / 2.0;
    const bool identity_map = theta == 0 && scale_y == 1 && scale_x == 1 && shear_x == 0 && shear_y == 0;
    for (int y = 0; y < fin.y; ++y) {
        for (int x = 0; x < fin.x; ++x) {
            const double oy = y - ocy, ox = x - ocx;
            double sy = icy + m10 * ox + m11 * oy;
            double sx = icx + m00 * ox + m01 * oy;
            if (identity_map) {
                sy = y + (in.shape.y - fin.y) / 2;
                sx = x + (in.shape.x - fin.x) / 2;
            }
            sy = std::clamp(sy, 0.0, in.shape.y - 1.0);
            sx = std::clamp(sx, 0.0, in.shape.x - 1.0);
            const int iy = std::min(static_cast<int>(std::floor(sy)), in.shape.y - 2 < 0 ? 0 : in.shape.y - 2);
            const int ix = std::min(static_cast<int>(std::floor(sx)), in.shape.x - 2 < 0 ? 0 : in.shape.x - 2);
            const double fy = sy - iy, fx = sx - ix;
            const int iy1 = std::min(iy + 1, in.shape.y - 1), ix1 = std::min(ix + 1, in.shape.x - 1);
            const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
            for (int ch = 0; ch < in.shape.c; ++ch)
                for (int z = 0; z < fin.z; ++z) {
                    const double v = w00 * in.at(ch, z0 + z, iy, ix) + w01 * in.at(ch, z0 + z, iy, ix1) +
                                     w10 * in.at(ch, z0 + z, iy1, ix) + w11 * in.at(ch, z0 + z, iy1, ix1);
                    out.data.at(ch, z, y, x) = static_cast<float>(v);
                }
        }
    }

    std::vector<float> scratch;
    const std::size_t n = out.data.channel_size();
    for (int ch = 0; ch < in.shape.c; ++ch) {
        const ChannelKind kind = channel_kind(spec.channels[static_cast<std::size_t>(ch)]);
        float* v = out.data.channel(ch);
        Rng crng(derive_seed(seed, {static_cast<std::uint64_t>(ch) + 1}));

        if (bernoulli(crng, cfg.p_gamma)) {
            const double gamma = uniform(crng, cfg.gamma.lo, cfg.gamma.hi);
            const auto [mn, mx] = std::minmax_element(v, v + n);
            const double lo = *mn, range = *mx - *mn;
            for (std::size_t i = 0; i < n; ++i)
                v[i] = static_cast<float>(std::pow((v[i] - lo) / (range + 1e-7), gamma) * range + lo);
        }
        const double p_scale =
            kind == ChannelKind::phase ? cfg.p_intensity_scale_phase : cfg.p_intensity_scale_fluorescence;
        if (bernoulli(crng, p_scale)) {
            const double factor = 1 + uniform(crng, cfg.intensity_scale.lo, cfg.intensity_scale.hi);
            for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(v[i] * factor);
        }
        if (bernoulli(crng, cfg.p_smooth)) {
            const double sy = uniform(crng, cfg.smooth_sigma.lo, cfg.smooth_sigma.hi);
            const double sx = uniform(crng, cfg.smooth_sigma.lo, cfg.smooth_sigma.hi);
            for (int z = 0; z < fin.z; ++z)
                gaussian_smooth_plane(v + static_cast<std::size_t>(z) * fin.y * fin.x, fin.y, fin.x, sy, sx, scratch);
        }
        if (bernoulli(crng, cfg.p_noise)) {
            const Range r = kind == ChannelKind::phase ? cfg.noise_sigma_phase : cfg.noise_sigma_fluorescence;
            const double sigma = uniform(crng, r.lo, r.hi);
            for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(v[i] + sigma * normal(crng));
        }
    }
    return out;
}

// ---------------------------------------------------------------- source

PatchSource::PatchSource(const Dataset& dataset, PatchSpec spec) : dataset_(&dataset), spec_(std::move(spec)) {
    for (const auto& name : spec_.channels) {
        channel_index_.push_back(dataset.meta().channel_index(name));
        kinds_.push_back(channel_kind(name));
    }
    const auto& vs = dataset.meta().volume_shape;
    if (spec_.source_crop.z > vs.z || spec_.source_crop.y > vs.y || spec_.source_crop.x > vs.x)
        throw ConfigError("source_crop exceeds the dataset volume shape");
}

PhaseStats PatchSource::fov_phase_stats(const std::string& fov, int channel) const {
    {
        std::lock_guard lock(mutex_);
        auto it = phase_stats_.find({fov, channel});
        if (it != phase_stats_.end()) return it->second;
    }
    const auto& meta = dataset_->meta();
    double sum = 0, sq = 0;
    std::size_t n = 0;
    // Two passes keep the variance numerically stable without holding the series.
    for (int t = 0; t < meta.n_timepoints; ++t) {
        const auto v = dataset_->read_volume(fov, t);
        const float* p = v.channel(channel);
        for (std::size_t i = 0; i < v.channel_size(); ++i) sum += p[i];
        n += v.channel_size();
    }
    const double mean = sum / static_cast<double>(n);
    for (int t = 0; t < meta.n_timepoints; ++t) {
        const auto v = dataset_->read_volume(fov, t);
        const float* p = v.channel(channel);
        for (std::size_t i = 0; i < v.channel_size(); ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    PhaseStats st{mean, std::sqrt(sq / static_cast<double>(n))};
    std::lock_guard lock(mutex_);
    phase_stats_[{fov, channel}] = st;
    return st;
}

std::shared_ptr<const Volume> PatchSource::normalized_volume(const std::string& fov, int t) const {
    {
        std::lock_guard lock(mutex_);
        auto it = volumes_.find({fov, t});
        if (it != volumes_.end()) return it->second;
    }
    const auto raw = dataset_->read_volume(fov, t);
    const auto& s = raw.shape;
    auto vol = std::make_shared<Volume>(Shape4{static_cast<int>(channel_index_.size()), s.z, s.y, s.x});
    for (std::size_t k = 0; k < channel_index_.size(); ++k) {
        const int src = channel_index_[k];
        std::span<const float> values(raw.channel(src), raw.channel_size());
        std::optional<PhaseStats> st;
        if (kinds_[k] == ChannelKind::phase) st = fov_phase_stats(fov, src);
        const auto norm = normalize_channel(values, kinds_[k], st, spec_.channels[k]);
        std::copy(norm.begin(), norm.end(), vol->channel(static_cast<int>(k)));
    }
    std::lock_guard lock(mutex_);
    return volumes_.emplace(std::pair{fov, t}, std::move(vol)).first->second;
}

bool PatchSource::valid(const NodeKey& key) const {
    const auto* node = dataset_->tracks().find(key);
    if (!node) return false;
    const auto& s = dataset_->meta().volume_shape;
    const Size3 crop = spec_.source_crop;
    const int cz = static_cast<int>(std::lround(node->centroid.z));
    const int cy = static_cast<int>(std::lround(node->centroid.y));
    const int cx = static_cast<int>(std::lround(node->centroid.x));
    const int z0 = cz - crop.z / 2, y0 = cy - crop.y / 2, x0 = cx - crop.x / 2;
    return z0 >= 0 && y0 >= 0 && x0 >= 0 && z0 + crop.z <= s.z && y0 + crop.y <= s.y && x0 + crop.x <= s.x;
}

Patch PatchSource::source_patch(const NodeKey& key) const {
    const auto* node = dataset_->tracks().find(key);
    if (!node) throw ValidationError("unknown node " + to_string(key));
    if (!valid(key)) return Patch{{}, key, false};
    const auto vol = normalized_volume(key.fov, key.t);
    return extract_patch(*vol, node->centroid, spec_, key);
}

Patch PatchSource::final_patch(const NodeKey& key) const {
    return center_crop(source_patch(key), spec_.final_size);
}

}  // namespace dynaclr::patch
