#include <gtest/gtest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "dynaclr/errors.hpp"
#include "dynaclr/rng.hpp"
#include "dynaclr/service.hpp"
#include "dynaclr/training.hpp"
#include "support.hpp"

#include <httplib.h>

using namespace dynaclr;
namespace dt = dynaclr::testing;
using namespace dynaclr::service;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// Copy of the shared dataset (annotations are written) plus epoch-0 embeddings and a probe.
class ServiceFixture : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new dt::TempDir("dynaclr_service");
        const auto ds = dir_->path() / "ds";
        fs::copy(dt::shared_small_dataset(), ds, fs::copy_options::recursive);
        const auto dataset = Dataset::open(ds);
        train::TrainSetup setup;
        const auto ck = train::initial_checkpoint(setup);
        save_embeddings(dir_->path() / "emb", train::embed_dataset(ck, dataset));
        probe::ProbeModel pm;
        Rng rng(3);
        for (int i = 0; i < 192; ++i) pm.weights.push_back(normal(rng));
        write_text_file(dir_->path() / "probe.json", pm.to_json());
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }

    ServiceOptions options(bool with_probe = true) const {
        ServiceOptions o;
        o.dataset = dir_->path() / "ds";
        o.embeddings = dir_->path() / "emb";
        if (with_probe) o.probe = dir_->path() / "probe.json";
        return o;
    }

    static NodeKey first_valid_node(const Api& api) {
        const auto m = json::parse(api.projection("pca", 2).body);
        const auto& p = m.at("points").at(0);
        return {p.at("fov_id").get<std::string>(), p.at("track_id").get<std::int64_t>(), p.at("t").get<int>()};
    }

    static dt::TempDir* dir_;
};

dt::TempDir* ServiceFixture::dir_ = nullptr;

}  // namespace

TEST_F(ServiceFixture, Meta) {
    Api api(options());
    const auto r = api.meta();
    EXPECT_EQ(r.status, 200);
    EXPECT_EQ(r.content_type, "application/json");
    const auto j = json::parse(r.body);
    EXPECT_EQ(j.at("embeddings").at("feature_dim"), 192);
    EXPECT_GT(j.at("embeddings").at("rows").get<int>(), 0);
    EXPECT_EQ(j.at("probe").at("label_type"), "infection");
    EXPECT_EQ(j.at("projection_methods"), json::array({"pca"}));
    EXPECT_TRUE(j.contains("channels"));
    const auto bare = json::parse(Api(options(false)).meta().body);
    EXPECT_TRUE(bare.at("probe").is_null());
}

TEST_F(ServiceFixture, Projection) {
    Api api(options());
    const auto j = json::parse(api.projection("pca", 3).body);
    EXPECT_EQ(j.at("method"), "pca");
    EXPECT_EQ(j.at("dims"), 3);
    const auto& pts = j.at("points");
    ASSERT_FALSE(pts.empty());
    EXPECT_EQ(pts[0].at("coords").size(), 3u);
    EXPECT_TRUE(pts[0].contains("predicted_label"));
    EXPECT_TRUE(pts[0].contains("condition"));
    EXPECT_EQ(j.at("explained_variance_ratio").size(), 3u);
    EXPECT_EQ(api.projection("umap", 2).status, 400);
    EXPECT_EQ(api.projection("pca", 0).status, 400);
    EXPECT_EQ(api.projection("pca", 100000).status, 400);
    EXPECT_EQ(api.projection("external", 2).status, 400);
}

TEST_F(ServiceFixture, ExternalProjection) {
    const auto emb = load_embeddings(options().embeddings);
    std::string csv = "fov_id,track_id,t,x,y\n";
    for (const auto& k : emb.keys) csv += k.fov + "," + std::to_string(k.track) + "," + std::to_string(k.t) + ",1.5,-2\n";
    dt::TempDir tmp;
    write_text_file(tmp / "proj.csv", csv);
    auto o = options();
    o.projection = tmp / "proj.csv";
    Api api(o);
    const auto j = json::parse(api.projection("external", 2).body);
    EXPECT_EQ(j.at("points")[0].at("x"), 1.5);
    EXPECT_EQ(j.at("points")[0].at("y"), -2.0);
    EXPECT_EQ(api.projection("external", 3).status, 400);
}

TEST_F(ServiceFixture, Track) {
    Api api(options());
    const auto j = json::parse(api.track("A1", 1).body);
    EXPECT_EQ(j.at("fov_id"), "A1");
    EXPECT_EQ(j.at("track_id"), 1);
    ASSERT_FALSE(j.at("nodes").empty());
    const auto& n = j.at("nodes")[0];
    EXPECT_TRUE(n.contains("centroid"));
    EXPECT_TRUE(n.contains("embedding_key"));
    EXPECT_TRUE(n.at("labels").contains("infection"));
    EXPECT_EQ(n.at("labels").at("infection").at("ground_truth"), 0);
    EXPECT_EQ(api.track("A1", 99999).status, 404);
    EXPECT_EQ(api.track("Z9", 1).status, 404);
}

TEST_F(ServiceFixture, PatchPng) {
    Api api(options());
    const auto k = first_valid_node(api);
    for (const std::string view : {"center_slice", "max_proj"}) {
        const auto r = api.patch(k.fov, k.track, k.t, "", view);
        ASSERT_EQ(r.status, 200) << r.body;
        EXPECT_EQ(r.content_type, "image/png");
        const auto img = dt::decode_png(r.body, false);
        EXPECT_EQ(img.width, 32);
        EXPECT_EQ(img.height, 32);
    }
    const auto channels = json::parse(api.meta().body).at("patch_channels");
    EXPECT_EQ(api.patch(k.fov, k.track, k.t, channels[1], "max_proj").status, 200);
    EXPECT_EQ(api.patch(k.fov, k.track, k.t, "nope", "").status, 400);
    EXPECT_EQ(api.patch(k.fov, k.track, k.t, "", "volume").status, 400);
    EXPECT_EQ(api.patch(k.fov, 99999, 0, "", "").status, 404);
}

TEST_F(ServiceFixture, PostAnnotationsValidation) {
    Api api(options());
    const auto before = api.get_annotations().body;
    const json bad = json::array({
        {{"fov_id", "A1"}, {"track_id", 1}, {"t", 0}, {"label_type", "infection"}, {"value", 1}, {"source", "ground_truth"}},
        {{"fov_id", "A1"}, {"track_id", "x"}, {"t", 0}, {"label_type", "infection"}, {"value", 1}},
        {{"fov_id", "A1"}, {"track_id", 1}, {"t", 0}, {"label_type", "mitosis"}, {"value", 1}},
        {{"fov_id", "A1"}, {"track_id", 1}, {"t", 0}, {"label_type", "infection"}, {"value", 3}},
        {{"fov_id", "A1"}, {"track_id", 99999}, {"t", 0}, {"label_type", "infection"}, {"value", 1}},
    });
    const auto r = api.post_annotations(bad.dump());
    EXPECT_EQ(r.status, 422);
    const auto errors = json::parse(r.body).at("errors");
    std::map<int, std::string> fields;
    for (const auto& e : errors) {
        EXPECT_TRUE(e.contains("message"));
        fields[e.at("index").get<int>()] = e.at("field").get<std::string>();
    }
    EXPECT_EQ(fields[0], "source");
    EXPECT_EQ(fields[1], "track_id");
    EXPECT_EQ(fields[2], "label_type");
    EXPECT_EQ(fields[3], "value");
    EXPECT_EQ(fields[4], "track_id");
    EXPECT_EQ(api.get_annotations().body, before);
    EXPECT_EQ(api.post_annotations("{not json").status, 422);
    EXPECT_EQ(api.post_annotations("[]").status, 422);
}

TEST_F(ServiceFixture, PostAnnotationsWritesHumanLabels) {
    Api api(options());
    const json rec{{"fov_id", "B1"}, {"track_id", 1}, {"t", 1}, {"label_type", "division"}, {"value", 1}};
    const auto r = api.post_annotations(json{{"records", json::array({rec})}}.dump());
    ASSERT_EQ(r.status, 200) << r.body;
    const auto out = json::parse(r.body);
    EXPECT_EQ(out.at("written"), 1);
    EXPECT_EQ(out.at("records")[0].at("source"), "human");
    bool found = false;
    for (const auto& a : json::parse(api.get_annotations().body))
        if (a.at("source") == "human" && a.at("fov_id") == "B1" && a.at("t") == 1) found = true;
    EXPECT_TRUE(found);
    const auto t = json::parse(api.track("B1", 1).body);
    EXPECT_EQ(t.at("nodes")[1].at("labels").at("division").at("human"), 1);
}

TEST_F(ServiceFixture, HttpServerRoutes) {
    auto o = options();
    o.port = 0;
    Server server(o);
    const int port = server.start();
    ASSERT_GT(port, 0);
    httplib::Client cli("127.0.0.1", port);
    auto meta = cli.Get("/api/meta");
    ASSERT_TRUE(meta);
    EXPECT_EQ(meta->status, 200);
    auto proj = cli.Get("/api/projection?method=pca&dims=2");
    ASSERT_TRUE(proj);
    EXPECT_EQ(proj->status, 200);
    EXPECT_EQ(cli.Get("/api/projection?dims=abc")->status, 400);
    EXPECT_EQ(cli.Get("/api/track/A1/1")->status, 200);
    EXPECT_EQ(cli.Get("/api/track/A1/99999")->status, 404);
    const auto k = first_valid_node(server.api());
    auto png = cli.Get("/api/patch/" + k.fov + "/" + std::to_string(k.track) + "/" + std::to_string(k.t) +
                       "?view=max_proj");
    ASSERT_TRUE(png);
    EXPECT_EQ(png->status, 200);
    EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
    EXPECT_EQ(png->body.substr(1, 3), "PNG");
    EXPECT_EQ(cli.Get("/api/annotations")->status, 200);
    auto post = cli.Post("/api/annotations", R"({"fov_id":"A1","track_id":1,"t":0,"label_type":"infection","value":0,"source":"model"})",
                         "application/json");
    ASSERT_TRUE(post);
    EXPECT_EQ(post->status, 422);
    EXPECT_EQ(json::parse(post->body).at("errors")[0].at("field"), "source");

    auto busy = o;
    busy.port = port;
    Server second(busy);
    EXPECT_ANY_THROW(second.start());
    server.stop();
}

TEST_F(ServiceFixture, RejectsForeignEmbeddings) {
    dt::TempDir tmp;
    auto emb = load_embeddings(options().embeddings);
    emb.keys.back().track = 424242;
    save_embeddings(tmp / "emb", emb);
    auto o = options();
    o.embeddings = tmp / "emb";
    EXPECT_THROW(Api{o}, IntegrityError);
}
