#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <limits>

#include <fstream>
#include <thread>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/errors.hpp"
#include "support.hpp"

using namespace dynaclr;
using dynaclr::testing::TempDir;
namespace fs = std::filesystem;

namespace {

DatasetMeta sample_meta() {
    DatasetMeta m;
    m.channels = {"phase", "rfp"};
    m.fov_ids = {"A1", "B1"};
    m.volume_shape = {2, 3, 16, 16};
    m.conditions = {{"A1", "mock"}, {"B1", "moi5"}};
    m.n_timepoints = 4;
    m.t0_hpi_minutes = 180;
    return m;
}

TrackNode node(const std::string& fov, std::int64_t track, int t, std::optional<std::int64_t> parent = std::nullopt) {
    return {fov, track, t, {1, 8, 8}, parent};
}

std::string field_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ParseError& e) {
        return e.field();
    }
    return "";
}

}  // namespace

TEST(DatasetMeta, JsonRoundTrip) {
    const auto m = sample_meta();
    const auto back = meta_from_json(meta_to_json(m));
    EXPECT_EQ(back.channels, m.channels);
    EXPECT_EQ(back.fov_ids, m.fov_ids);
    EXPECT_EQ(back.volume_shape, m.volume_shape);
    EXPECT_EQ(back.conditions, m.conditions);
    EXPECT_EQ(back.n_timepoints, 4);
    EXPECT_DOUBLE_EQ(back.dt_minutes, 30.0);
    EXPECT_DOUBLE_EQ(back.t0_hpi_minutes, 180.0);
}

TEST(DatasetMeta, ValidationNamesTheOffendingField) {
    auto m = sample_meta();
    m.channels.clear();
    EXPECT_EQ(field_of([&] { m.validate(); }), "channels");
    m = sample_meta();
    m.dt_minutes = 0;
    EXPECT_EQ(field_of([&] { m.validate(); }), "dt_minutes");
    m = sample_meta();
    m.volume_shape.c = 3;
    EXPECT_EQ(field_of([&] { m.validate(); }), "volume_shape");
    m = sample_meta();
    m.dtype = "uint16";
    EXPECT_EQ(field_of([&] { m.validate(); }), "dtype");
    m = sample_meta();
    m.fov_ids.push_back("A1");
    EXPECT_EQ(field_of([&] { m.validate(); }), "fov_ids");
    m = sample_meta();
    m.conditions.erase("B1");
    EXPECT_EQ(field_of([&] { m.validate(); }), "conditions");
    EXPECT_EQ(field_of([] { meta_from_json("{\"channels\": [\"phase\"]}"); }), "dt_minutes");
    EXPECT_EQ(field_of([] { meta_from_json("[1, 2]"); }), "meta.json");
    EXPECT_EQ(field_of([] { meta_from_json("{not json"); }), "meta.json");
}

TEST(DatasetMeta, ChannelAndConditionLookup) {
    const auto m = sample_meta();
    EXPECT_EQ(m.channel_index("rfp"), 1);
    EXPECT_THROW(m.channel_index("gfp"), ValidationError);
    EXPECT_EQ(m.condition_of("B1"), "moi5");
    EXPECT_THROW(m.condition_of("C1"), ValidationError);
}

TEST(TrackTable, IndexesTracksInTimeOrder) {
    auto t = TrackTable::from_nodes({node("A1", 1, 2), node("A1", 1, 0), node("A1", 1, 1), node("A1", 2, 0)});
    const auto tr = t.track("A1", 1);
    ASSERT_EQ(tr.size(), 3u);
    EXPECT_EQ(tr[0]->t, 0);
    EXPECT_EQ(tr[2]->t, 2);
    EXPECT_TRUE(t.track("A1", 9).empty());
    EXPECT_TRUE(t.contains({"A1", 2, 0}));
    EXPECT_FALSE(t.contains({"A1", 2, 1}));
    const auto flat = t.flatten();
    EXPECT_TRUE(std::is_sorted(flat.begin(), flat.end(), [](auto& a, auto& b) { return a.key() < b.key(); }));
}

TEST(TrackTable, RejectsDuplicatesSelfParentsAndConflictingParents) {
    EXPECT_THROW(TrackTable::from_nodes({node("A1", 1, 0), node("A1", 1, 0)}), ValidationError);
    EXPECT_THROW(TrackTable::from_nodes({node("A1", 1, 0, 1)}), ValidationError);
    EXPECT_THROW(TrackTable::from_nodes({node("A1", 3, 0, 1), node("A1", 3, 1, 2)}), ValidationError);
    EXPECT_THROW(TrackTable::from_nodes({node("A1", 1, -1)}), ValidationError);
    auto bad = node("A1", 1, 0);
    bad.centroid.y = std::nan("");
    EXPECT_THROW(TrackTable::from_nodes({bad}), ValidationError);
}

TEST(TrackTable, ValidatesAgainstMeta) {
    const auto m = sample_meta();
    EXPECT_NO_THROW(TrackTable::from_nodes({node("A1", 1, 3)}).validate_against(m));
    EXPECT_THROW(TrackTable::from_nodes({node("A1", 1, 4)}).validate_against(m), ValidationError);
    EXPECT_THROW(TrackTable::from_nodes({node("C1", 1, 0)}).validate_against(m), ValidationError);
    auto out = node("A1", 1, 0);
    out.centroid.x = 16.5;
    EXPECT_THROW(TrackTable::from_nodes({out}).validate_against(m), ValidationError);
}

TEST(TrackTable, CsvRoundTripIsExact) {
    std::vector<TrackNode> nodes{node("A1", 1, 0), node("A1", 1, 1), node("A1", 2, 2, 1), node("A1", 3, 2, 1)};
    nodes[1].centroid = {1.25, 3.141592653589793, 9.999999999999};
    const auto t = TrackTable::from_nodes(nodes);
    const auto back = tracks_from_csv(tracks_to_csv(t));
    EXPECT_EQ(back.flatten(), t.flatten());
}

TEST(TrackTable, CsvRejectsMalformedInput) {
    EXPECT_THROW(tracks_from_csv(""), ParseError);
    EXPECT_THROW(tracks_from_csv("a,b,c\n"), ParseError);
    EXPECT_THROW(tracks_from_csv("fov_id,track_id,t,z,y,x,parent_track_id\nA1,1,0,1,2\n"), ValidationError);
    EXPECT_THROW(tracks_from_csv("fov_id,track_id,t,z,y,x,parent_track_id\nA1,x,0,1,2,3,\n"), ValidationError);
}

TEST(TrackTable, LineageQueries) {
    const auto t = TrackTable::from_nodes(
        {node("A1", 1, 0), node("A1", 1, 1), node("A1", 2, 2, 1), node("A1", 3, 2, 1), node("A1", 4, 0)});
    EXPECT_EQ(t.parent_of("A1", 2), 1);
    EXPECT_FALSE(t.parent_of("A1", 1).has_value());
    EXPECT_EQ(t.children_of("A1", 1), (std::vector<std::int64_t>{2, 3}));
    EXPECT_TRUE(t.children_of("A1", 4).empty());
}

TEST(Divisions, TwoDaughtersMakeAnEventAtTheParentsLastFrame) {
    const auto t = TrackTable::from_nodes(
        {node("A1", 1, 0), node("A1", 1, 1), node("A1", 2, 2, 1), node("A1", 3, 2, 1), node("A1", 5, 0), node("A1", 6, 1, 5)});
    const auto scan = division_events(t);
    ASSERT_EQ(scan.events.size(), 1u);
    EXPECT_EQ(scan.events[0], (DivisionEvent{"A1", 1, 1}));
    ASSERT_EQ(scan.warnings.size(), 1u);
    EXPECT_NE(scan.warnings[0].find("single daughter"), std::string::npos);
}

TEST(Annotations, JsonRoundTripAndParsing) {
    AnnotationRecord r{"B1", 7, 3, LabelType::division, 1, LabelSource::human};
    EXPECT_EQ(annotation_from_json(annotation_to_json(r)), r);
    EXPECT_THROW(annotation_from_json("{"), ParseError);
    EXPECT_THROW(annotation_from_json(R"({"fov_id":"A1","track_id":1,"t":0,"label_type":"x","value":1,"source":"human"})"),
                 ParseError);
    EXPECT_THROW(annotation_from_json(R"({"fov_id":"A1","track_id":1,"t":0,"label_type":"infection","value":1})"),
                 ParseError);
    EXPECT_THROW(label_source_from_string("robot"), ParseError);
}

TEST(Annotations, FieldErrors) {
    const auto t = TrackTable::from_nodes({node("A1", 1, 0), node("A1", 1, 1)});
    EXPECT_TRUE(annotation_field_errors({"A1", 1, 1, LabelType::infection, 1, LabelSource::human}, t).empty());
    EXPECT_EQ(annotation_field_errors({"A1", 1, 1, LabelType::infection, 2, LabelSource::human}, t).size(), 1u);
    const auto missing = annotation_field_errors({"A1", 9, 0, LabelType::infection, 0, LabelSource::human}, t);
    ASSERT_EQ(missing.size(), 1u);
    EXPECT_EQ(missing[0].rfind("track_id", 0), 0u);
    const auto out = annotation_field_errors({"A1", 1, 5, LabelType::infection, 0, LabelSource::human}, t);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].rfind("t:", 0), 0u);
}

TEST(VolumeFile, RoundTripAndSizeCheck) {
    TempDir dir;
    Volume v({2, 2, 3, 4});
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i) * 0.5f;
    write_volume_file(dir / "v.bin", v);
    EXPECT_EQ(read_volume_file(dir / "v.bin", v.shape).data, v.data);
    EXPECT_THROW(read_volume_file(dir / "v.bin", {2, 2, 3, 5}), IntegrityError);
    EXPECT_THROW(read_volume_file(dir / "none.bin", v.shape), IntegrityError);
}

class DatasetOnDisk : public ::testing::Test {
protected:
    void SetUp() override {
        const auto m = sample_meta();
        write_text_file(dir.path() / "meta.json", meta_to_json(m));
        for (const auto& f : m.fov_ids)
            for (int t = 0; t < m.n_timepoints; ++t) {
                Volume v(m.volume_shape);
                v.data.assign(v.data.size(), static_cast<float>(t + (f == "B1" ? 10 : 0)));
                fs::create_directories(dir.path() / "fovs" / f);
                write_volume_file(dir.path() / "fovs" / f / ("t" + std::to_string(t) + ".bin"), v);
            }
        write_text_file(dir.path() / "tracks.csv",
                        tracks_to_csv(TrackTable::from_nodes({node("A1", 1, 0), node("A1", 1, 1), node("B1", 1, 0)})));
    }
    TempDir dir;
};

TEST_F(DatasetOnDisk, OpensAndReadsVolumesLazily) {
    auto ds = Dataset::open(dir.path());
    EXPECT_EQ(ds.meta().fov_ids.size(), 2u);
    EXPECT_EQ(ds.read_volume("B1", 3).data.front(), 13.0f);
    EXPECT_THROW(ds.read_volume("C1", 0), RangeError);
    EXPECT_THROW(ds.read_volume("A1", 4), RangeError);
    EXPECT_EQ(ds.tracks().nodes().size(), 3u);
    EXPECT_TRUE(ds.read_annotations().empty());
}

TEST_F(DatasetOnDisk, OpenDetectsMissingOrTruncatedFiles) {
    fs::remove(dir.path() / "fovs" / "A1" / "t2.bin");
    EXPECT_THROW(Dataset::open(dir.path()), IntegrityError);
    TempDir empty;
    EXPECT_THROW(Dataset::open(empty.path()), ParseError);
}

TEST_F(DatasetOnDisk, OpenDetectsShapeMismatch) {
    std::ofstream(dir.path() / "fovs" / "B1" / "t0.bin", std::ios::binary) << "short";
    EXPECT_THROW(Dataset::open(dir.path()), IntegrityError);
}

TEST_F(DatasetOnDisk, AnnotationUpsertKeepsLatestValue) {
    auto ds = Dataset::open(dir.path());
    ds.write_annotations({{"A1", 1, 0, LabelType::infection, 0, LabelSource::human},
                          {"A1", 1, 1, LabelType::infection, 1, LabelSource::human}});
    auto all = ds.write_annotations({{"A1", 1, 0, LabelType::infection, 1, LabelSource::human},
                                     {"A1", 1, 0, LabelType::infection, 0, LabelSource::ground_truth}});
    ASSERT_EQ(all.size(), 3u);
    EXPECT_EQ(all[0].value, 1);
    const auto reread = Dataset::open(dir.path()).read_annotations();
    EXPECT_EQ(reread, all);
}

TEST_F(DatasetOnDisk, AnnotationWriteIsAllOrNothing) {
    auto ds = Dataset::open(dir.path());
    EXPECT_THROW(ds.write_annotations({{"A1", 1, 0, LabelType::infection, 1, LabelSource::human},
                                       {"A1", 1, 7, LabelType::infection, 1, LabelSource::human}}),
                 ValidationError);
    EXPECT_TRUE(ds.read_annotations().empty());
}

TEST_F(DatasetOnDisk, ConcurrentReadsAgree) {
    auto ds = Dataset::open(dir.path());
    std::vector<std::thread> threads;
    std::atomic<int> bad{0};
    for (int i = 0; i < 4; ++i)
        threads.emplace_back([&, i] {
            for (int t = 0; t < 4; ++t) {
                if (ds.read_volume(i % 2 ? "B1" : "A1", t).data[5] != static_cast<float>(t + (i % 2 ? 10 : 0))) ++bad;
                if (ds.tracks().nodes().size() != 3u) ++bad;
            }
        });
    for (auto& th : threads) th.join();
    EXPECT_EQ(bad.load(), 0);
}
