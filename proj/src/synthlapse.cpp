#include "dynaclr/synthlapse.hpp"

#include <algorithm>
#include <array>
#include <climits>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>

#include <nlohmann/json.hpp>

#include "dynaclr/errors.hpp"
#include "dynaclr/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dynaclr::synth {

void SynthConfig::validate() const {
    if (fovs_per_condition < 1) throw ConfigError("fovs_per_condition must be >= 1");
    if (conditions.empty()) throw ConfigError("conditions must be non-empty");
    for (const auto& c : conditions)
        if (!onset.contains(c)) throw ConfigError("no onset model for condition '" + c + "'");
    for (const auto& [c, m] : onset) {
        if (m.susceptible_fraction < 0.0 || m.susceptible_fraction > 1.0)
            throw ConfigError("susceptible_fraction of '" + c + "' must lie in [0, 1]");
        if (m.infected && !(m.scale_frames > 0.0)) throw ConfigError("scale_frames of '" + c + "' must be > 0");
    }
    if (cells_per_fov < 1) throw ConfigError("cells_per_fov must be >= 1");
    if (n_timepoints < 1) throw ConfigError("n_timepoints must be >= 1");
    if (volume_shape.c != 2) throw ConfigError("volume_shape must have 2 channels (phase, rfp)");
    if (volume_shape.z < 1 || volume_shape.y < 1 || volume_shape.x < 1) throw ConfigError("volume_shape must be positive");
    if (!(dt_minutes > 0.0)) throw ConfigError("dt_minutes must be > 0");
    if (division_rate < 0.0 || division_rate > 1.0) throw ConfigError("division_rate must lie in [0, 1]");
    if (motion_sigma < 0.0) throw ConfigError("motion_sigma must be >= 0");
    if (shape_drift < 0.0) throw ConfigError("shape_drift must be >= 0");
    if (granule_turnover < 0.0 || granule_turnover > 1.0) throw ConfigError("granule_turnover must lie in [0, 1]");
    if (min_spacing < 0.0) throw ConfigError("min_spacing must be >= 0");
    if (2 * start_margin >= std::min(volume_shape.y, volume_shape.x))
        throw ConfigError("start_margin leaves no room for cells");
}

std::string SynthConfig::to_json() const {
    json j;
    j["fovs_per_condition"] = fovs_per_condition;
    j["conditions"] = conditions;
    json onsets = json::object();
    for (const auto& [c, m] : onset)
        onsets[c] = {{"infected", m.infected},
                     {"midpoint_frames", m.midpoint_frames},
                     {"scale_frames", m.scale_frames},
                     {"susceptible_fraction", m.susceptible_fraction}};
    j["infection_onset_distribution"] = onsets;
    j["cells_per_fov"] = cells_per_fov;
    j["n_timepoints"] = n_timepoints;
    j["volume_shape"] = {volume_shape.c, volume_shape.z, volume_shape.y, volume_shape.x};
    j["dt_minutes"] = dt_minutes;
    j["t0_hpi_minutes"] = t0_hpi_minutes;
    j["division_rate"] = division_rate;
    j["motion_sigma"] = motion_sigma;
    j["shape_drift"] = shape_drift;
    j["granule_turnover"] = granule_turnover;
    j["min_spacing"] = min_spacing;
    j["start_margin"] = start_margin;
    j["seed"] = seed;
    return j.dump(2);
}

SynthConfig SynthConfig::from_json(const std::string& text) {
    SynthConfig c;
    json j;
    try {
        j = json::parse(text);
        if (j.contains("fovs_per_condition")) c.fovs_per_condition = j["fovs_per_condition"].get<int>();
        if (j.contains("conditions")) c.conditions = j["conditions"].get<std::vector<std::string>>();
        if (j.contains("infection_onset_distribution")) {
            c.onset.clear();
            for (const auto& [name, m] : j["infection_onset_distribution"].items()) {
                OnsetModel om;
                om.infected = m.value("infected", false);
                om.midpoint_frames = m.value("midpoint_frames", om.midpoint_frames);
                om.scale_frames = m.value("scale_frames", om.scale_frames);
                om.susceptible_fraction = m.value("susceptible_fraction", om.susceptible_fraction);
                c.onset[name] = om;
            }
        }
        if (j.contains("cells_per_fov")) c.cells_per_fov = j["cells_per_fov"].get<int>();
        if (j.contains("n_timepoints")) c.n_timepoints = j["n_timepoints"].get<int>();
        if (j.contains("volume_shape")) {
            auto s = j["volume_shape"].get<std::vector<int>>();
            if (s.size() != 4) throw ConfigError("volume_shape must be [C, Z, Y, X]");
            c.volume_shape = {s[0], s[1], s[2], s[3]};
        }
        if (j.contains("dt_minutes")) c.dt_minutes = j["dt_minutes"].get<double>();
        if (j.contains("t0_hpi_minutes")) c.t0_hpi_minutes = j["t0_hpi_minutes"].get<double>();
        if (j.contains("division_rate")) c.division_rate = j["division_rate"].get<double>();
        if (j.contains("motion_sigma")) c.motion_sigma = j["motion_sigma"].get<double>();
        if (j.contains("shape_drift")) c.shape_drift = j["shape_drift"].get<double>();
        if (j.contains("granule_turnover")) c.granule_turnover = j["granule_turnover"].get<double>();
        if (j.contains("min_spacing")) c.min_spacing = j["min_spacing"].get<double>();
        if (j.contains("start_margin")) c.start_margin = j["start_margin"].get<double>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<std::string> SynthConfig::fov_ids() const {
    std::vector<std::string> ids;
    for (std::size_t c = 0; c < conditions.size(); ++c)
        for (int f = 0; f < fovs_per_condition; ++f)
            ids.push_back(std::string(1, static_cast<char>('A' + c)) + std::to_string(f + 1));
    return ids;
}

const std::string& SynthConfig::condition_of_fov(const std::string& fov) const {
    const auto c = static_cast<std::size_t>(fov.at(0) - 'A');
    if (c >= conditions.size()) throw ConfigError("fov '" + fov + "' has no condition");
    return conditions[c];
}

namespace {

constexpr int granule_count = 4;

struct Granule {
    double u = 0, v = 0, sigma = 1.5, amplitude = 0.5;
};

struct Cell {
    std::int64_t track = 0;
    std::optional<std::int64_t> parent;
    int first_frame = 0;
    int last_frame = INT_MAX;  // inclusive; set when the cell divides
    double y = 0, x = 0, z = 0;
    double sigma_major = 5, sigma_minor = 3.5, orientation = 0;
    double phase_amplitude = 1.0;
    double ring_radius = 6, ring_width = 1.2, disk_radius = 3.5;
    double ring_intensity = 1.0, disk_intensity = 1.6;
    /// Phase-dense granules in the cell frame (u along the major axis).
    std::array<Granule, granule_count> granules{};
    /// Slow log-scale shape fluctuation around sigma_major / sigma_minor.
    double wobble_major = 0, wobble_minor = 0;
    int onset = INT_MAX;
    int born_mitotic_frame = -1;  // daughters are mitotic on their first frame
};

constexpr double phase_noise = 0.08;
constexpr double fluor_baseline = 0.1;
constexpr double fluor_noise = 0.03;
constexpr double z_sigma = 1.3;

bool is_mitotic(const Cell& c, int t) {
    return t == c.last_frame || t == c.born_mitotic_frame;
}

double translocation(const Cell& c, int t) {
    if (c.onset == INT_MAX) return 0.0;
    return std::clamp((t - c.onset + 1) / static_cast<double>(translocation_frames), 0.0, 1.0);
}

void render_cell(const Cell& c, int t, Volume& vol) {
    const auto& s = vol.shape;
    const bool mitotic = is_mitotic(c, t);
    double sa = c.sigma_major * std::exp(c.wobble_major), sb = c.sigma_minor * std::exp(c.wobble_minor);
    double amp = c.phase_amplitude;
    if (mitotic) {
        // Rounded and denser while chromosomes separate.
        const double r = std::sqrt(sa * sb) * 0.8;
        sa = sb = r;
        amp *= 1.8;
    }
    const double mix = translocation(c, t);
    const double reach = std::max(3.5 * sa, c.ring_radius + 4 * c.ring_width);
    const int y0 = std::max(0, static_cast<int>(std::floor(c.y - reach)));
    const int y1 = std::min(s.y - 1, static_cast<int>(std::ceil(c.y + reach)));
    const int x0 = std::max(0, static_cast<int>(std::floor(c.x - reach)));
    const int x1 = std::min(s.x - 1, static_cast<int>(std::ceil(c.x + reach)));
    const double ca = std::cos(c.orientation), sn = std::sin(c.orientation);
    for (int z = 0; z < s.z; ++z) {
        const double dz = z - c.z;
        const double zprof = std::exp(-dz * dz / (2 * z_sigma * z_sigma));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dy = y - c.y, dx = x - c.x;
                const double u = ca * dx + sn * dy;
                const double v = -sn * dx + ca * dy;
                double phase = amp * std::exp(-(u * u) / (2 * sa * sa) - (v * v) / (2 * sb * sb));
                if (!mitotic)
                    for (const auto& g : c.granules) {
                        const double gu = u - g.u * sa, gv = v - g.v * sb;
                        phase += amp * g.amplitude * std::exp(-(gu * gu + gv * gv) / (2 * g.sigma * g.sigma));
                    }
                phase *= zprof;
                vol.at(0, z, y, x) += static_cast<float>(phase);

                const double r = std::sqrt(dx * dx + dy * dy);
                const double ring = c.ring_intensity *
                                    std::exp(-(r - c.ring_radius) * (r - c.ring_radius) / (2 * c.ring_width * c.ring_width));
                const double disk = c.disk_intensity / (1.0 + std::exp((r - c.disk_radius) / 0.7));
                const double fl = ((1.0 - mix) * ring + mix * disk) * zprof;
                float& dst = vol.at(1, z, y, x);
                dst = std::max(dst, static_cast<float>(fluor_baseline + fl));
            }
        }
    }
}

double reflect(double v, double hi) {
    // Reflect into [0, hi].
    if (hi <= 0) return 0;
    const double period = 2 * hi;
    v = std::fmod(v, period);
    if (v < 0) v += period;
    return v > hi ? period - v : v;
}

struct FovSimulation {
    std::vector<Cell> cells;
    std::vector<TrackNode> nodes;
    /// Cell state at each node, parallel to `nodes`.
    std::vector<Cell> states;
};

FovSimulation simulate_fov(const SynthConfig& cfg, const std::string& fov) {
    Rng rng(derive_seed(cfg.seed, {hash_string(fov), 1}));
    const auto& onset = cfg.onset.at(cfg.condition_of_fov(fov));
    const auto& s = cfg.volume_shape;
    const double zc = (s.z - 1) / 2.0;

    FovSimulation sim;
    std::int64_t next_id = 1;
    auto draw_onset = [&](Cell& c) {
        c.onset = INT_MAX;
        if (!onset.infected || !bernoulli(rng, onset.susceptible_fraction)) return;
        double u = uniform01(rng);
        u = std::clamp(u, 1e-9, 1 - 1e-9);
        const double frame = onset.midpoint_frames + onset.scale_frames * std::log(u / (1 - u));
        c.onset = std::max(0, static_cast<int>(std::ceil(frame)));
    };
    // Granule offsets are in units of the current axis lengths.
    auto draw_granule = [&](Granule& g) {
        const double r = std::sqrt(uniform01(rng)) * 0.9, a = uniform(rng, 0, 2 * std::numbers::pi);
        g = {r * std::cos(a), r * std::sin(a), uniform(rng, 1.0, 1.6), uniform(rng, 0.4, 0.7)};
    };
    auto draw_granules = [&](Cell& c) {
        for (auto& g : c.granules) draw_granule(g);
    };
    // Cells in a monolayer do not overlap.
    auto crowded = [&](const Cell& c, int t) {
        for (const auto& o : sim.cells) {
            if (o.track == c.track || t < o.first_frame || t > o.last_frame) continue;
            if (std::hypot(o.y - c.y, o.x - c.x) < cfg.min_spacing) return true;
        }
        return false;
    };
    for (int i = 0; i < cfg.cells_per_fov; ++i) {
        Cell c;
        c.track = next_id++;
        for (int attempt = 0; attempt < 200; ++attempt) {
            c.y = uniform(rng, cfg.start_margin, s.y - 1 - cfg.start_margin);
            c.x = uniform(rng, cfg.start_margin, s.x - 1 - cfg.start_margin);
            if (!crowded(c, 0)) break;
        }
        c.z = zc;
        c.sigma_major = uniform(rng, 4.5, 6.5);
        c.sigma_minor = c.sigma_major * uniform(rng, 0.5, 0.8);
        c.orientation = uniform(rng, 0, std::numbers::pi);
        c.phase_amplitude = uniform(rng, 0.8, 1.2);
        c.ring_radius = uniform(rng, 5.5, 7.5);
        c.ring_width = uniform(rng, 1.0, 1.5);
        c.disk_radius = uniform(rng, 3.0, 4.5);
        c.ring_intensity = uniform(rng, 0.8, 1.2);
        c.disk_intensity = uniform(rng, 1.4, 2.0);
        draw_granules(c);
        draw_onset(c);
        sim.cells.push_back(c);
    }

    for (int t = 0; t < cfg.n_timepoints; ++t) {
        const std::size_t alive_count = sim.cells.size();
        for (std::size_t i = 0; i < alive_count; ++i) {
            Cell& c = sim.cells[i];
            if (t < c.first_frame || t > c.last_frame) continue;
            if (t > c.first_frame) {
                const double y = c.y, x = c.x;
                for (int attempt = 0; attempt < 5; ++attempt) {
                    c.y = reflect(y + cfg.motion_sigma * normal(rng), s.y - 1);
                    c.x = reflect(x + cfg.motion_sigma * normal(rng), s.x - 1);
                    if (!crowded(c, t)) break;
                    c.y = y;
                    c.x = x;
                }
                c.orientation += cfg.shape_drift * 0.15 * normal(rng);
                c.wobble_major = 0.9 * c.wobble_major + cfg.shape_drift * 0.05 * normal(rng);
                c.wobble_minor = 0.9 * c.wobble_minor + cfg.shape_drift * 0.05 * normal(rng);
                for (auto& g : c.granules) {
                    if (cfg.granule_turnover > 0.0 && bernoulli(rng, cfg.granule_turnover)) {
                        draw_granule(g);
                        continue;
                    }
                    g.u += cfg.shape_drift * 0.12 * normal(rng);
                    g.v += cfg.shape_drift * 0.12 * normal(rng);
                    const double r = std::hypot(g.u, g.v);
                    if (r > 0.9) {
                        // Reflect back inside the cell body.
                        const double k = (1.8 - r) / r;
                        g.u *= k;
                        g.v *= k;
                    }
                }
            }
            sim.nodes.push_back({fov, c.track, t, {c.z, c.y, c.x}, c.parent});
            sim.states.push_back(c);
            const bool can_divide = t + 1 < cfg.n_timepoints && t - c.first_frame >= 4;
            if (can_divide && bernoulli(rng, cfg.division_rate)) {
                c.last_frame = t;
                const Cell parent = c;
                const double ca = std::cos(parent.orientation), sn = std::sin(parent.orientation);
                for (int side : {-1, 1}) {
                    Cell d = parent;
                    d.track = next_id++;
                    d.parent = parent.track;
                    d.first_frame = t + 1;
                    d.last_frame = INT_MAX;
                    d.born_mitotic_frame = t + 1;
                    d.y = reflect(parent.y + side * 0.5 * cfg.min_spacing * sn, s.y - 1);
                    d.x = reflect(parent.x + side * 0.5 * cfg.min_spacing * ca, s.x - 1);
                    d.sigma_major = c.sigma_major * uniform(rng, 0.85, 1.0);
                    d.sigma_minor = d.sigma_major * uniform(rng, 0.5, 0.8);
                    d.orientation = parent.orientation + uniform(rng, -0.3, 0.3);
                    d.wobble_major = d.wobble_minor = 0;
                    draw_granules(d);
                    sim.cells.push_back(d);
                }
            }
        }
    }
    std::map<std::int64_t, int> last_frame;
    for (const auto& c : sim.cells) last_frame[c.track] = c.last_frame;
    for (auto& st : sim.states) st.last_frame = last_frame.at(st.track);
    return sim;
}

void render_frame(const SynthConfig& cfg, const std::string& fov, const FovSimulation& sim, int t, Volume& vol) {
    Rng noise(derive_seed(cfg.seed, {hash_string(fov), 2, static_cast<std::uint64_t>(t)}));
    const std::size_t n = vol.channel_size();
    float* phase = vol.channel(0);
    float* fluor = vol.channel(1);
    for (std::size_t i = 0; i < n; ++i) phase[i] = static_cast<float>(phase_noise * normal(noise));
    std::vector<float> fl_noise(n);
    for (std::size_t i = 0; i < n; ++i) fl_noise[i] = static_cast<float>(fluor_noise * normal(noise));
    std::fill(fluor, fluor + n, static_cast<float>(fluor_baseline));
    for (std::size_t i = 0; i < sim.nodes.size(); ++i)
        if (sim.nodes[i].t == t) render_cell(sim.states[i], t, vol);
    for (std::size_t i = 0; i < n; ++i) fluor[i] += fl_noise[i];
}

}  // namespace

GenerationResult generate_dataset(const SynthConfig& config, const fs::path& out, bool overwrite) {
    config.validate();
    if (fs::exists(out / "meta.json") || fs::exists(out / "fovs")) {
        if (!overwrite)
            throw ValidationError("'" + out.string() + "' already contains a dataset; pass overwrite to replace it");
        fs::remove_all(out / "fovs");
        for (const char* f : {"meta.json", "tracks.csv", "annotations.jsonl"}) fs::remove(out / f);
    }
    fs::create_directories(out / "fovs");

    GenerationResult result;
    DatasetMeta& meta = result.meta;
    meta.channels = {"phase", "rfp"};
    meta.dt_minutes = config.dt_minutes;
    meta.fov_ids = config.fov_ids();
    meta.volume_shape = config.volume_shape;
    meta.t0_hpi_minutes = config.t0_hpi_minutes;
    meta.n_timepoints = config.n_timepoints;
    for (const auto& f : meta.fov_ids) meta.conditions[f] = config.condition_of_fov(f);
    meta.validate();

    std::vector<TrackNode> all_nodes;
    std::string annotations;
    for (const auto& fov : meta.fov_ids) {
        const auto sim = simulate_fov(config, fov);
        Volume vol(config.volume_shape);
        for (int t = 0; t < config.n_timepoints; ++t) {
            render_frame(config, fov, sim, t, vol);
            write_volume_file(out / "fovs" / fov / ("t" + std::to_string(t) + ".bin"), vol);
        }
        std::map<std::int64_t, const Cell*> by_track;
        for (const auto& c : sim.cells) {
            by_track[c.track] = &c;
            result.cells.push_back({fov, c.track, c.onset});
        }
        for (const auto& n : sim.nodes) {
            const Cell& c = *by_track.at(n.track);
            AnnotationRecord inf{fov, n.track, n.t, LabelType::infection, n.t >= c.onset ? 1 : 0, LabelSource::ground_truth};
            AnnotationRecord div{fov, n.track, n.t, LabelType::division, is_mitotic(c, n.t) ? 1 : 0,
                                 LabelSource::ground_truth};
            annotations += annotation_to_json(inf) + "\n";
            annotations += annotation_to_json(div) + "\n";
        }
        all_nodes.insert(all_nodes.end(), sim.nodes.begin(), sim.nodes.end());
    }
    const auto table = TrackTable::from_nodes(std::move(all_nodes));
    table.validate_against(meta);
    write_text_file(out / "tracks.csv", tracks_to_csv(table));
    write_text_file(out / "annotations.jsonl", annotations);
    write_text_file(out / "meta.json", meta_to_json(meta));
    return result;
}

}  // namespace dynaclr::synth
