#include "dynaclr/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/errors.hpp"
#include "dynaclr/patch_pipeline.hpp"

using nlohmann::json;

namespace dynaclr::attribution {

std::string to_string(Method m) { return m == Method::occlusion ? "occlusion" : "integrated_gradients"; }

namespace {

Method method_from_string(const std::string& s) {
    if (s == "occlusion") return Method::occlusion;
    if (s == "integrated_gradients") return Method::integrated_gradients;
    throw ParseError("attribution map", "unknown method '" + s + "'");
}

void require_finite(const Volume& v, const char* what) {
    for (float x : v.data)
        if (!std::isfinite(x)) throw IntegrityError(std::string(what) + " contains non-finite values");
}

}  // namespace

double AttributionMap::total() const {
    double s = 0;
    for (float v : values.data) s += v;
    return s;
}

ScoreFunction linear_score(std::vector<double> weights, double bias) {
    auto w = std::make_shared<const std::vector<double>>(std::move(weights));
    ScoreFunction f;
    f.value = [w, bias](const Volume& x) {
        if (x.data.size() != w->size()) throw ConfigError("patch size does not match the linear score");
        double s = bias;
        for (std::size_t i = 0; i < w->size(); ++i) s += (*w)[i] * x.data[i];
        return s;
    };
    f.gradient = [w, value = f.value](const Volume& x, Volume& grad) {
        const double s = value(x);
        grad = Volume(x.shape);
        for (std::size_t i = 0; i < w->size(); ++i) grad.data[i] = static_cast<float>((*w)[i]);
        return s;
    };
    return f;
}

ScoreFunction probe_score(std::shared_ptr<const nn::Encoder<double>> encoder, const probe::ProbeModel& probe) {
    if (!encoder) throw ConfigError("probe score needs an encoder");
    if (probe.weights.size() != static_cast<std::size_t>(encoder->config().feature_dim()))
        throw ConfigError("probe dimension " + std::to_string(probe.weights.size()) + " does not match encoder feature_dim " +
                          std::to_string(encoder->config().feature_dim()));
    auto w = std::make_shared<const std::vector<double>>(probe.weights);
    const double b = probe.bias;
    auto check = [encoder](const Volume& x) {
        const auto& c = encoder->config();
        if (x.shape != Shape4{c.in_channels, c.input_size.z, c.input_size.y, c.input_size.x})
            throw ConfigError("patch shape does not match the encoder input");
        return std::vector<double>(x.data.begin(), x.data.end());
    };
    ScoreFunction f;
    f.value = [encoder, w, b, check](const Volume& x) {
        const auto in = check(x);
        nn::Encoder<double>::Trace tr;
        encoder->forward(in, tr);
        double s = b;
        for (std::size_t j = 0; j < w->size(); ++j) s += (*w)[j] * tr.h[j];
        return s;
    };
    f.gradient = [encoder, w, b, check](const Volume& x, Volume& grad) {
        const auto in = check(x);
        nn::Encoder<double>::Trace tr;
        encoder->forward(in, tr);
        double s = b;
        for (std::size_t j = 0; j < w->size(); ++j) s += (*w)[j] * tr.h[j];
        std::vector<double> dx(in.size());
        encoder->backward(tr, *w, {}, {}, dx);
        grad = Volume(x.shape);
        for (std::size_t i = 0; i < dx.size(); ++i) grad.data[i] = static_cast<float>(dx[i]);
        return s;
    };
    return f;
}

OcclusionConfig OcclusionConfig::scaled_for(Size3 patch) {
    OcclusionConfig c;
    c.window = {patch.z, std::max(1, patch.y / 16), std::max(1, patch.x / 16)};
    c.stride = {patch.z, std::max(1, patch.y / 32), std::max(1, patch.x / 32)};
    return c;
}

void OcclusionConfig::validate(const Shape4& patch) const {
    if (window.z < 1 || window.y < 1 || window.x < 1) throw ConfigError("occlusion window must be positive");
    if (stride.z < 1 || stride.y < 1 || stride.x < 1) throw ConfigError("occlusion stride must be positive");
    if (window.z > patch.z || window.y > patch.y || window.x > patch.x)
        throw ConfigError("occlusion window (" + std::to_string(window.z) + "," + std::to_string(window.y) + "," +
                          std::to_string(window.x) + ") exceeds the patch (" + std::to_string(patch.z) + "," +
                          std::to_string(patch.y) + "," + std::to_string(patch.x) + ")");
}

AttributionMap occlusion_map(const ScoreFunction& score, const Volume& patch, const OcclusionConfig& cfg) {
    if (!score.value) throw ConfigError("occlusion needs a score function");
    if (patch.data.empty()) throw ConfigError("empty patch");
    cfg.validate(patch.shape);
    const auto& s = patch.shape;
    auto starts = [](int n, int w, int st) {
        std::vector<int> out;
        for (int p = 0; p + w <= n; p += st) out.push_back(p);
        return out;
    };
    const auto zs = starts(s.z, cfg.window.z, cfg.stride.z);
    const auto ys = starts(s.y, cfg.window.y, cfg.stride.y);
    const auto xs = starts(s.x, cfg.window.x, cfg.stride.x);

    const double base = score.value(patch);
    std::vector<double> sum(patch.data.size(), 0.0), count(patch.data.size(), 0.0);
    Volume work = patch;
    const int groups = cfg.per_channel ? s.c : 1;
    for (int g = 0; g < groups; ++g) {
        const int c0 = cfg.per_channel ? g : 0, c1 = cfg.per_channel ? g + 1 : s.c;
        for (int z0 : zs)
            for (int y0 : ys)
                for (int x0 : xs) {
                    auto region = [&](auto&& fn) {
                        for (int c = c0; c < c1; ++c)
                            for (int z = z0; z < z0 + cfg.window.z; ++z)
                                for (int y = y0; y < y0 + cfg.window.y; ++y)
                                    for (int x = x0; x < x0 + cfg.window.x; ++x) fn(patch.index(c, z, y, x));
                    };
                    region([&](std::size_t i) { work.data[i] = cfg.baseline; });
                    const double drop = base - score.value(work);
                    region([&](std::size_t i) {
                        work.data[i] = patch.data[i];
                        sum[i] += drop;
                        count[i] += 1;
                    });
                }
    }
    AttributionMap m;
    m.method = Method::occlusion;
    m.values = Volume(s);
    for (std::size_t i = 0; i < sum.size(); ++i) m.values.data[i] = count[i] > 0 ? static_cast<float>(sum[i] / count[i]) : 0.0f;
    m.score = base;
    Volume b(s);
    std::fill(b.data.begin(), b.data.end(), cfg.baseline);
    m.baseline_score = score.value(b);
    m.settings_json = json{{"window", {cfg.window.z, cfg.window.y, cfg.window.x}},
                           {"stride", {cfg.stride.z, cfg.stride.y, cfg.stride.x}},
                           {"baseline", cfg.baseline},
                           {"per_channel", cfg.per_channel},
                           {"placements", zs.size() * ys.size() * xs.size() * groups}}
                          .dump();
    require_finite(m.values, "occlusion map");
    return m;
}

void IgConfig::validate() const {
    if (steps < 2) throw ConfigError("integrated gradients needs steps >= 2 (got " + std::to_string(steps) + ")");
}

AttributionMap integrated_gradients_map(const ScoreFunction& score, const Volume& patch, const IgConfig& cfg) {
    if (!score.gradient) throw CapabilityError("score function is not differentiable; integrated gradients unavailable");
    cfg.validate();
    if (patch.data.empty()) throw ConfigError("empty patch");
    const std::size_t n = patch.data.size();
    std::vector<double> acc(n, 0.0);
    Volume point(patch.shape), grad;
    for (int k = 0; k < cfg.steps; ++k) {
        const double alpha = (k + 0.5) / cfg.steps;
        for (std::size_t i = 0; i < n; ++i)
            point.data[i] = static_cast<float>(cfg.baseline + alpha * (patch.data[i] - cfg.baseline));
        score.gradient(point, grad);
        if (grad.data.size() != n) throw ConfigError("score gradient has the wrong size");
        for (std::size_t i = 0; i < n; ++i) acc[i] += grad.data[i];
    }
    AttributionMap m;
    m.method = Method::integrated_gradients;
    m.values = Volume(patch.shape);
    for (std::size_t i = 0; i < n; ++i) {
        double v = (patch.data[i] - cfg.baseline) * acc[i] / cfg.steps;
        if (cfg.multiply_inputs) v *= patch.data[i];
        m.values.data[i] = static_cast<float>(v);
    }
    m.score = score.value ? score.value(patch) : score.gradient(patch, grad);
    Volume b(patch.shape);
    std::fill(b.data.begin(), b.data.end(), cfg.baseline);
    m.baseline_score = score.value ? score.value(b) : score.gradient(b, grad);
    m.settings_json =
        json{{"baseline", cfg.baseline}, {"steps", cfg.steps}, {"rule", "midpoint"}, {"multiply_inputs", cfg.multiply_inputs}}
            .dump();
    require_finite(m.values, "integrated gradients map");
    return m;
}

ClippedMap clip_for_display(const Volume& map, double low_pct, double high_pct) {
    if (map.data.empty()) throw ConfigError("cannot clip an empty map");
    if (!(low_pct < high_pct)) throw ConfigError("clip percentiles need low < high");
    if (low_pct < 0 || high_pct > 100) throw ConfigError("clip percentiles must lie in [0, 100]");
    ClippedMap out;
    out.low_pct = low_pct;
    out.high_pct = high_pct;
    out.low_value = patch::percentile(map.data, low_pct);
    out.high_value = patch::percentile(map.data, high_pct);
    out.values = map;
    const auto lo = static_cast<float>(out.low_value), hi = static_cast<float>(out.high_value);
    for (float& v : out.values.data) v = std::clamp(v, lo, hi);
    return out;
}

void save_map(const std::filesystem::path& stem, const AttributionMap& map) {
    auto bin = stem;
    bin += ".bin";
    auto side = stem;
    side += ".json";
    write_volume_file(bin, map.values);
    const auto& s = map.values.shape;
    json j{{"method", to_string(map.method)},
           {"head", map.head},
           {"shape", {s.c, s.z, s.y, s.x}},
           {"dtype", "float32"},
           {"score", map.score},
           {"baseline_score", map.baseline_score},
           {"total", map.total()},
           {"settings", json::parse(map.settings_json)}};
    j["predicted_probability"] = map.predicted_probability ? json(*map.predicted_probability) : json(nullptr);
    j["true_class"] = map.true_class ? json(*map.true_class) : json(nullptr);
    std::ofstream os(side);
    if (!os) throw Error("cannot write " + side.string());
    os << j.dump(2) << "\n";
}

AttributionMap load_map(const std::filesystem::path& stem) {
    auto bin = stem;
    bin += ".bin";
    auto side = stem;
    side += ".json";
    std::ifstream is(side);
    if (!is) throw ParseError(side.string(), "cannot open sidecar");
    AttributionMap m;
    Shape4 shape;
    try {
        std::stringstream ss;
        ss << is.rdbuf();
        const json j = json::parse(ss.str());
        m.method = method_from_string(j.at("method").get<std::string>());
        m.head = j.at("head").get<std::string>();
        const auto sh = j.at("shape").get<std::vector<int>>();
        if (sh.size() != 4) throw ParseError(side.string(), "shape must have 4 entries");
        shape = {sh[0], sh[1], sh[2], sh[3]};
        m.score = j.value("score", 0.0);
        m.baseline_score = j.value("baseline_score", 0.0);
        m.settings_json = j.at("settings").dump();
        if (!j.at("predicted_probability").is_null()) m.predicted_probability = j["predicted_probability"].get<double>();
        if (!j.at("true_class").is_null()) m.true_class = j["true_class"].get<int>();
    } catch (const json::exception& e) {
        throw ParseError(side.string(), e.what());
    }
    m.values = read_volume_file(bin, shape);
    require_finite(m.values, "attribution map");
    return m;
}

image::Image render_panel(const Volume& patch, const AttributionMap& map, int scale) {
    if (patch.shape != map.values.shape) throw ConfigError("map and patch shapes differ");
    const auto clipped = clip_for_display(map.values);
    const double bound = std::max(std::abs(clipped.low_value), std::abs(clipped.high_value));
    const int w = patch.shape.x, h = patch.shape.y;
    std::vector<image::Image> columns;
    for (int c = 0; c < patch.shape.c; ++c) {
        const auto top = image::gray_auto(image::plane(patch, c, image::View::center_slice), w, h);
        const auto bottom = image::diverging(image::plane(clipped.values, c, image::View::center_slice), w, h, bound);
        columns.push_back(image::vstack({image::upscale(top, scale), image::upscale(bottom, scale)}));
    }
    return image::hstack(columns);
}

}  // namespace dynaclr::attribution
