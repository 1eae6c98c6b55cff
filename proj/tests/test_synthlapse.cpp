#include <gtest/gtest.h>

#include <cmath>

#include <map>
#include <set>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/errors.hpp"
#include "dynaclr/synthlapse.hpp"
#include "support.hpp"

using namespace dynaclr;
using dynaclr::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::map<std::tuple<std::string, std::int64_t, int, LabelType>, int> label_map(const Dataset& ds) {
    std::map<std::tuple<std::string, std::int64_t, int, LabelType>, int> out;
    for (const auto& r : ds.read_annotations()) out[{r.fov, r.track, r.t, r.label_type}] = r.value;
    return out;
}

}  // namespace

TEST(SynthConfig, DefaultsValidateAndRoundTrip) {
    synth::SynthConfig c;
    EXPECT_NO_THROW(c.validate());
    c.granule_turnover = 0.25;
    c.shape_drift = 2.0;
    const auto back = synth::SynthConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(c.fov_ids(), (std::vector<std::string>{"A1", "A2", "B1", "B2"}));
    EXPECT_EQ(c.condition_of_fov("B2"), "moi5");
    EXPECT_THROW(c.condition_of_fov("C1"), ConfigError);
}

TEST(SynthConfig, RejectsInvalidValues) {
    auto bad = [](auto mutate) {
        synth::SynthConfig c;
        mutate(c);
        EXPECT_THROW(c.validate(), ConfigError);
    };
    bad([](auto& c) { c.fovs_per_condition = 0; });
    bad([](auto& c) { c.cells_per_fov = 0; });
    bad([](auto& c) { c.volume_shape.c = 3; });
    bad([](auto& c) { c.division_rate = 1.5; });
    bad([](auto& c) { c.shape_drift = -1; });
    bad([](auto& c) { c.granule_turnover = 2; });
    bad([](auto& c) { c.conditions.push_back("moi9"); });
    bad([](auto& c) { c.onset["moi5"].susceptible_fraction = -0.1; });
    bad([](auto& c) { c.volume_shape = {2, 5, 60, 60}; });
    EXPECT_THROW(synth::SynthConfig::from_json("{\"volume_shape\": [1, 2]}"), ConfigError);
}

TEST(Synthlapse, GenerationIsDeterministicPerSeed) {
    TempDir dir;
    auto cfg = dynaclr::testing::small_config(6, 4);
    synth::generate_dataset(cfg, dir / "a");
    synth::generate_dataset(cfg, dir / "b");
    cfg.seed = 8;
    synth::generate_dataset(cfg, dir / "c");
    for (const char* f : {"tracks.csv", "annotations.jsonl", "meta.json", "fovs/B1/t3.bin"}) {
        EXPECT_EQ(read_text_file(dir / "a" / f), read_text_file(dir / "b" / f)) << f;
    }
    EXPECT_NE(read_text_file(dir / "a" / "fovs/B1/t3.bin"), read_text_file(dir / "c" / "fovs/B1/t3.bin"));
}

TEST(Synthlapse, RefusesToOverwriteWithoutFlag) {
    TempDir dir;
    const auto cfg = dynaclr::testing::small_config(4, 3);
    synth::generate_dataset(cfg, dir / "a");
    EXPECT_THROW(synth::generate_dataset(cfg, dir / "a"), ValidationError);
    EXPECT_NO_THROW(synth::generate_dataset(cfg, dir / "a", true));
}

TEST(Synthlapse, OutputIsAValidDataset) {
    const auto ds = Dataset::open(dynaclr::testing::shared_small_dataset());
    EXPECT_EQ(ds.meta().channels, (std::vector<std::string>{"phase", "rfp"}));
    EXPECT_EQ(ds.meta().fov_ids, (std::vector<std::string>{"A1", "B1"}));
    EXPECT_EQ(ds.meta().n_timepoints, 6);
    EXPECT_NO_THROW(ds.tracks().validate_against(ds.meta()));
    const auto v = ds.read_volume("A1", 0);
    EXPECT_EQ(v.shape, (Shape4{2, 5, 128, 128}));
    // Every node has exactly one ground-truth label of each type.
    const auto labels = label_map(ds);
    EXPECT_EQ(labels.size(), 2 * ds.tracks().nodes().size());
    for (const auto& n : ds.tracks().nodes()) {
        EXPECT_TRUE(labels.contains({n.fov, n.track, n.t, LabelType::infection}));
        EXPECT_TRUE(labels.contains({n.fov, n.track, n.t, LabelType::division}));
    }
}

TEST(Synthlapse, InfectionLabelsFollowOnsetAndAreAbsorbing) {
    TempDir dir;
    auto cfg = dynaclr::testing::small_config(20, 8);
    const auto result = synth::generate_dataset(cfg, dir / "ds");
    const auto ds = Dataset::open(dir / "ds");
    const auto labels = label_map(ds);
    std::map<std::pair<std::string, std::int64_t>, int> onset;
    for (const auto& c : result.cells) onset[{c.fov, c.track}] = c.onset_frame;
    int infected_nodes = 0;
    for (const auto& [id, rows] : ds.tracks().tracks()) {
        int prev = 0;
        for (const auto* n : ds.tracks().track(id.first, id.second)) {
            const int v = labels.at({n->fov, n->track, n->t, LabelType::infection});
            if (ds.meta().condition_of(n->fov) == "mock") EXPECT_EQ(v, 0);
            EXPECT_GE(v, prev) << "infection must not revert";
            EXPECT_EQ(v, n->t >= onset.at(id) ? 1 : 0);
            prev = v;
            infected_nodes += v;
        }
    }
    EXPECT_GT(infected_nodes, 0);
}

TEST(Synthlapse, DivisionLabelsMarkParentLastFrameAndDaughterFirstFrame) {
    TempDir dir;
    auto cfg = dynaclr::testing::small_config(20, 12);
    cfg.division_rate = 0.2;
    synth::generate_dataset(cfg, dir / "ds");
    const auto ds = Dataset::open(dir / "ds");
    const auto labels = label_map(ds);
    const auto scan = division_events(ds.tracks());
    ASSERT_FALSE(scan.events.empty());
    EXPECT_TRUE(scan.warnings.empty());
    std::set<std::tuple<std::string, std::int64_t, int>> mitotic;
    for (const auto& e : scan.events) {
        mitotic.insert({e.fov, e.parent, e.t_division});
        const auto kids = ds.tracks().children_of(e.fov, e.parent);
        EXPECT_EQ(kids.size(), 2u);
        for (auto k : kids) {
            const auto first = ds.tracks().track(e.fov, k).front();
            EXPECT_EQ(first->t, e.t_division + 1);
            mitotic.insert({e.fov, k, first->t});
        }
    }
    for (const auto& n : ds.tracks().nodes())
        EXPECT_EQ(labels.at({n.fov, n.track, n.t, LabelType::division}), mitotic.contains({n.fov, n.track, n.t}) ? 1 : 0)
            << to_string(n.key());
}

TEST(Synthlapse, SensorTranslocatesToTheNucleusAfterOnset) {
    TempDir dir;
    auto cfg = dynaclr::testing::small_config(20, 10);
    const auto result = synth::generate_dataset(cfg, dir / "ds");
    const auto ds = Dataset::open(dir / "ds");
    double infected = 0, clean = 0;
    int ni = 0, nc = 0;
    std::map<std::pair<std::string, std::int64_t>, int> onset;
    for (const auto& c : result.cells) onset[{c.fov, c.track}] = c.onset_frame;
    for (const auto& n : ds.tracks().nodes()) {
        const auto v = ds.read_volume(n.fov, n.t);
        const float center = v.at(1, static_cast<int>(std::lround(n.centroid.z)), static_cast<int>(std::lround(n.centroid.y)),
                                   static_cast<int>(std::lround(n.centroid.x)));
        const int on = onset.at({n.fov, n.track});
        if (static_cast<std::int64_t>(n.t) >= static_cast<std::int64_t>(on) + synth::translocation_frames) {
            infected += center;
            ++ni;
        } else if (n.t < on) {
            clean += center;
            ++nc;
        }
    }
    ASSERT_GT(ni, 0);
    ASSERT_GT(nc, 0);
    EXPECT_GT(infected / ni, clean / nc + 0.8);
}

TEST(Synthlapse, GranuleTurnoverChangesLaterFramesOnly) {
    TempDir dir;
    auto cfg = dynaclr::testing::small_config(6, 4);
    cfg.granule_turnover = 0.0;
    synth::generate_dataset(cfg, dir / "a");
    cfg.granule_turnover = 0.5;
    synth::generate_dataset(cfg, dir / "b");
    EXPECT_NE(read_text_file(dir / "a" / "fovs/A1/t3.bin"), read_text_file(dir / "b" / "fovs/A1/t3.bin"));
    EXPECT_EQ(read_text_file(dir / "a" / "fovs/A1/t0.bin"), read_text_file(dir / "b" / "fovs/A1/t0.bin"));
}
