#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "dynaclr/attribution.hpp"
#include "dynaclr/errors.hpp"
#include "dynaclr/rng.hpp"
#include "support.hpp"

using namespace dynaclr;
namespace dt = dynaclr::testing;
using namespace dynaclr::attribution;

namespace {

Volume random_volume(Shape4 s, Rng& rng) {
    Volume v(s);
    for (auto& x : v.data) x = static_cast<float>(normal(rng));
    return v;
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    for (auto& x : w) x = static_cast<float>(normal(rng));
    return w;
}

ScoreFunction constant_score(double c) {
    ScoreFunction f;
    f.value = [c](const Volume&) { return c; };
    f.gradient = [c](const Volume& x, Volume& g) {
        g = Volume(x.shape);
        return c;
    };
    return f;
}

/// Smooth nonlinear score with a closed-form gradient.
ScoreFunction tanh_score(std::vector<double> w) {
    ScoreFunction f;
    f.value = [w](const Volume& x) {
        double s = 0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x.data[i];
        return std::tanh(0.3 * s);
    };
    f.gradient = [w](const Volume& x, Volume& g) {
        double s = 0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x.data[i];
        const double t = std::tanh(0.3 * s);
        g = Volume(x.shape);
        for (std::size_t i = 0; i < w.size(); ++i) g.data[i] = static_cast<float>(0.3 * (1 - t * t) * w[i]);
        return t;
    };
    return f;
}

}  // namespace

TEST(IntegratedGradients, LinearScoreEqualsWeightTimesInput) {
    Rng rng(1);
    const Shape4 s{2, 5, 8, 8};
    const auto x = random_volume(s, rng);
    const auto w = random_weights(s.size(), rng);
    for (int steps : {2, 32, 128}) {
        const auto m = integrated_gradients_map(linear_score(w, 0.25), x, {.steps = steps});
        for (std::size_t i = 0; i < w.size(); ++i)
            ASSERT_EQ(m.values.data[i], static_cast<float>(static_cast<double>(x.data[i]) * w[i])) << "steps " << steps;
        EXPECT_NEAR(m.score - m.baseline_score, m.total(), 1e-3);
        EXPECT_DOUBLE_EQ(m.baseline_score, 0.25);
    }
}

TEST(IntegratedGradients, CompletenessOnSmoothScore) {
    Rng rng(2);
    const Shape4 s{1, 3, 6, 6};
    const auto x = random_volume(s, rng);
    auto w = random_weights(s.size(), rng);
    for (auto& v : w) v *= 0.1;
    const auto f = tanh_score(w);
    double prev = 1e9;
    for (int steps : {8, 16, 32, 64, 128}) {
        const auto m = integrated_gradients_map(f, x, {.steps = steps});
        const double diff = m.score - m.baseline_score;
        const double err = std::abs(m.total() - diff);
        EXPECT_LE(err, prev * 1.05 + 1e-7) << "steps " << steps;
        prev = err;
        if (steps == 128) EXPECT_LE(err, 0.01 * std::abs(diff));
    }
}

TEST(IntegratedGradients, NonZeroBaselineAndMultiplyFlag) {
    Rng rng(3);
    const Shape4 s{1, 2, 4, 4};
    const auto x = random_volume(s, rng);
    const auto w = random_weights(s.size(), rng);
    const auto m = integrated_gradients_map(linear_score(w, 0), x, {.baseline = 0.5f, .steps = 4});
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(m.values.data[i], (x.data[i] - 0.5) * w[i], 1e-5);
    const auto mm = integrated_gradients_map(linear_score(w, 0), x, {.steps = 4, .multiply_inputs = true});
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(mm.values.data[i], x.data[i] * x.data[i] * w[i], 1e-5);
    const auto settings = nlohmann::json::parse(mm.settings_json);
    EXPECT_TRUE(settings.at("multiply_inputs").get<bool>());
    EXPECT_EQ(settings.at("rule"), "midpoint");
}

TEST(IntegratedGradients, Rejections) {
    Rng rng(4);
    const auto x = random_volume({1, 1, 4, 4}, rng);
    ScoreFunction black_box;
    black_box.value = [](const Volume&) { return 1.0; };
    EXPECT_THROW(integrated_gradients_map(black_box, x), CapabilityError);
    EXPECT_THROW(integrated_gradients_map(constant_score(0), x, {.steps = 1}), ConfigError);
    EXPECT_THROW(integrated_gradients_map(linear_score({1.0, 2.0}, 0), x), ConfigError);
}

TEST(Attribution, ConstantModelGivesZeroMaps) {
    Rng rng(5);
    const auto x = random_volume({2, 5, 16, 16}, rng);
    const auto f = constant_score(3.5);
    const auto occ = occlusion_map(f, x, OcclusionConfig::scaled_for({5, 16, 16}));
    const auto ig = integrated_gradients_map(f, x, {.steps = 16});
    for (float v : occ.values.data) ASSERT_EQ(v, 0.0f);
    for (float v : ig.values.data) ASSERT_EQ(v, 0.0f);
}

TEST(Occlusion, LinearScoreOracle) {
    // With non-overlapping windows covering the patch, each voxel carries its
    // window's total contribution w . x.
    Rng rng(6);
    const Shape4 s{1, 2, 8, 8};
    const auto x = random_volume(s, rng);
    const auto w = random_weights(s.size(), rng);
    OcclusionConfig cfg{.window = {2, 4, 4}, .stride = {2, 4, 4}};
    const auto m = occlusion_map(linear_score(w, 0), x, cfg);
    for (int y0 = 0; y0 < 8; y0 += 4)
        for (int x0 = 0; x0 < 8; x0 += 4) {
            double block = 0;
            for (int z = 0; z < 2; ++z)
                for (int y = y0; y < y0 + 4; ++y)
                    for (int xx = x0; xx < x0 + 4; ++xx) block += w[x.index(0, z, y, xx)] * x.at(0, z, y, xx);
            for (int z = 0; z < 2; ++z)
                for (int y = y0; y < y0 + 4; ++y)
                    for (int xx = x0; xx < x0 + 4; ++xx) EXPECT_NEAR(m.values.at(0, z, y, xx), block, 1e-4);
        }
    EXPECT_EQ(nlohmann::json::parse(m.settings_json).at("placements"), 4);
}

TEST(Occlusion, UncoveredVoxelsStayZero) {
    Rng rng(7);
    const Shape4 s{1, 1, 10, 10};
    const auto x = random_volume(s, rng);
    std::vector<double> w(s.size(), 1.0);
    OcclusionConfig cfg{.window = {1, 4, 4}, .stride = {1, 4, 4}};
    const auto m = occlusion_map(linear_score(w, 0), x, cfg);
    for (int i = 0; i < 10; ++i) {
        EXPECT_EQ(m.values.at(0, 0, 8, i), 0.0f);
        EXPECT_EQ(m.values.at(0, 0, i, 9), 0.0f);
    }
    EXPECT_NE(m.values.at(0, 0, 0, 0), 0.0f);
}

TEST(Occlusion, OverlappingWindowsAverage) {
    const Shape4 s{1, 1, 1, 4};
    Volume x(s);
    x.data = {1, 2, 3, 4};
    const auto m = occlusion_map(linear_score({1, 1, 1, 1}, 0), x, {.window = {1, 1, 2}, .stride = {1, 1, 1}});
    // Placements cover {0,1}, {1,2}, {2,3} with drops 3, 5, 7.
    EXPECT_FLOAT_EQ(m.values.data[0], 3);
    EXPECT_FLOAT_EQ(m.values.data[1], 4);
    EXPECT_FLOAT_EQ(m.values.data[2], 6);
    EXPECT_FLOAT_EQ(m.values.data[3], 7);
}

TEST(Occlusion, PerChannelSeparatesChannels) {
    Rng rng(8);
    const Shape4 s{2, 1, 4, 4};
    const auto x = random_volume(s, rng);
    std::vector<double> w(s.size(), 0.0);
    for (std::size_t i = 0; i < 16; ++i) w[i] = 1.0;  // only channel 0 matters
    const auto m = occlusion_map(linear_score(w, 0), x, {.window = {1, 2, 2}, .stride = {1, 2, 2}, .per_channel = true});
    for (std::size_t i = 16; i < 32; ++i) EXPECT_EQ(m.values.data[i], 0.0f);
    EXPECT_EQ(nlohmann::json::parse(m.settings_json).at("placements"), 8);
}

TEST(Occlusion, ConfigValidation) {
    const auto c = OcclusionConfig::scaled_for({5, 32, 32});
    EXPECT_EQ(c.window.z, 5);
    EXPECT_EQ(c.window.y, 2);
    EXPECT_EQ(c.stride.y, 1);
    const auto t = OcclusionConfig::scaled_for({15, 128, 128});
    EXPECT_EQ(t.window.y, 8);
    EXPECT_EQ(t.stride.x, 4);
    const OcclusionConfig too_deep{.window = {6, 2, 2}};
    EXPECT_THROW(too_deep.validate({1, 5, 32, 32}), ConfigError);
    const OcclusionConfig zero_stride{.window = {1, 2, 2}, .stride = {0, 1, 1}};
    EXPECT_THROW(zero_stride.validate({1, 5, 32, 32}), ConfigError);
    Volume x({1, 1, 4, 4});
    ScoreFunction none;
    EXPECT_THROW(occlusion_map(none, x), ConfigError);
}

TEST(Attribution, ClipForDisplay) {
    Volume v({1, 1, 1, 101});
    for (int i = 0; i <= 100; ++i) v.data[i] = static_cast<float>(i);
    const auto c = clip_for_display(v, 10, 90);
    EXPECT_DOUBLE_EQ(c.low_value, 10);
    EXPECT_DOUBLE_EQ(c.high_value, 90);
    EXPECT_EQ(c.values.data[0], 10.0f);
    EXPECT_EQ(c.values.data[50], 50.0f);
    EXPECT_EQ(c.values.data[100], 90.0f);
    EXPECT_THROW(clip_for_display(v, 50, 50), ConfigError);
    EXPECT_THROW(clip_for_display(v, -1, 50), ConfigError);
    EXPECT_THROW(clip_for_display(Volume{}, 1, 99), ConfigError);
}

TEST(Attribution, SaveLoadRoundtrip) {
    dt::TempDir dir;
    Rng rng(9);
    AttributionMap m;
    m.values = random_volume({2, 5, 8, 8}, rng);
    m.method = Method::integrated_gradients;
    m.head = "division";
    m.predicted_probability = 0.75;
    m.true_class = 1;
    m.score = 1.5;
    m.baseline_score = -0.5;
    m.settings_json = R"({"steps":32})";
    save_map(dir / "map", m);
    const auto r = load_map(dir / "map");
    EXPECT_EQ(r.values.shape, m.values.shape);
    EXPECT_EQ(r.values.data, m.values.data);
    EXPECT_EQ(r.method, Method::integrated_gradients);
    EXPECT_EQ(r.head, "division");
    EXPECT_EQ(r.predicted_probability, 0.75);
    EXPECT_EQ(r.true_class, 1);
    EXPECT_DOUBLE_EQ(r.score, 1.5);
    EXPECT_EQ(nlohmann::json::parse(r.settings_json).at("steps"), 32);
    EXPECT_THROW(load_map(dir / "missing"), ParseError);
}

TEST(Attribution, RenderPanelLayout) {
    Rng rng(10);
    const auto x = random_volume({2, 5, 8, 8}, rng);
    AttributionMap m;
    m.values = random_volume({2, 5, 8, 8}, rng);
    const auto img = render_panel(x, m, 2);
    EXPECT_EQ(img.channels, 3);
    EXPECT_EQ(img.width, 2 * 16 + 4);
    EXPECT_EQ(img.height, 2 * 16 + 4);
    m.values = Volume({1, 5, 8, 8});
    EXPECT_THROW(render_panel(x, m), ConfigError);
}

TEST(ProbeScore, GradientMatchesFiniteDifferences) {
    auto enc = std::make_shared<nn::Encoder<double>>(nn::ModelConfig::desk(), 3);
    Rng rng(11);
    for (auto& v : enc->params().values()) v += 0.05 * normal(rng);
    probe::ProbeModel pm;
    pm.weights = random_weights(192, rng);
    pm.bias = 0.1;
    const auto f = probe_score(enc, pm);
    Volume x = random_volume({2, 5, 32, 32}, rng);
    Volume g;
    const double s = f.gradient(x, g);
    EXPECT_DOUBLE_EQ(s, f.value(x));
    // Float inputs limit the step; compare directional derivatives.
    for (int probe = 0; probe < 3; ++probe) {
        Volume dir = random_volume(x.shape, rng);
        const double eps = 1e-2;
        Volume xp = x, xm = x;
        double analytic = 0;
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            xp.data[i] += static_cast<float>(eps * dir.data[i]);
            xm.data[i] -= static_cast<float>(eps * dir.data[i]);
        }
        double actual_step = 0, norm = 0;
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            const double d = (static_cast<double>(xp.data[i]) - xm.data[i]) / 2;
            analytic += g.data[i] * d;
            actual_step += d * dir.data[i];
            norm += static_cast<double>(dir.data[i]) * dir.data[i];
        }
        const double numeric = (f.value(xp) - f.value(xm)) / 2;
        EXPECT_NEAR(numeric, analytic, 1e-3 * std::abs(analytic) + 1e-6) << actual_step / norm;
    }
    probe::ProbeModel wrong;
    wrong.weights.assign(10, 0.0);
    EXPECT_THROW(probe_score(enc, wrong), ConfigError);
    EXPECT_THROW(f.value(Volume({2, 5, 16, 16})), ConfigError);
}
