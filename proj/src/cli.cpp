#include "dynaclr/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dynaclr/analytics.hpp"
#include "dynaclr/attribution.hpp"
#include "dynaclr/dataset_store.hpp"
#include "dynaclr/errors.hpp"
#include "dynaclr/image.hpp"
#include "dynaclr/probe.hpp"
#include "dynaclr/service.hpp"
#include "dynaclr/synthlapse.hpp"
#include "dynaclr/training.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace dynaclr::cli {

namespace {

constexpr const char* tool_version = "0.1.0";

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string fnv_hex(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// ------------------------------------------------------------ option binding

/// Registers CLI flags that can also be supplied through --config. A value
/// given on the command line wins over the config file.
class Options {
public:
    explicit Options(CLI::App* app) : app_(app) {}

    template <class T>
    CLI::Option* add(const std::string& name, T& ref, const std::string& help) {
        auto* opt = app_->add_option("--" + name, ref, help);
        if constexpr (std::is_same_v<T, std::vector<std::string>> || std::is_same_v<T, std::vector<int>>)
            opt->delimiter(',');
        const auto key = key_of(name);
        keys_.insert(key);
        apply_.push_back([opt, &ref, key](const json& j) {
            if (opt->count() == 0 && j.contains(key)) ref = j.at(key).get<T>();
        });
        dump_.push_back([&ref, key](json& j) { j[key] = ref; });
        return opt;
    }

    CLI::Option* path(const std::string& name, std::string& ref, const std::string& help) {
        auto* opt = add(name, ref, help);
        paths_.push_back(&ref);
        return opt;
    }

    CLI::Option* flag(const std::string& name, bool& ref, const std::string& help) {
        auto* opt = app_->add_flag("--" + name, ref, help);
        const auto key = key_of(name);
        keys_.insert(key);
        apply_.push_back([opt, &ref, key](const json& j) {
            if (opt->count() == 0 && j.contains(key)) ref = j.at(key).get<bool>();
        });
        dump_.push_back([&ref, key](json& j) { j[key] = ref; });
        return opt;
    }

    /// Structured value accepted only through --config.
    void config_only(const std::string& key, json& ref) {
        keys_.insert(key);
        apply_.push_back([&ref, key](const json& j) {
            if (j.contains(key)) ref = j.at(key);
        });
        dump_.push_back([&ref, key](json& j) {
            if (!ref.is_null()) j[key] = ref;
        });
    }

    void apply(const json& cfg) {
        if (!cfg.is_object()) throw ConfigError("--config must hold a JSON object");
        for (const auto& [k, v] : cfg.items())
            if (!keys_.count(k)) throw ConfigError("unknown config key '" + k + "'");
        try {
            for (auto& f : apply_) f(cfg);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config value has the wrong type: ") + e.what());
        }
    }

    void absolutize() {
        for (auto* p : paths_)
            if (!p->empty()) *p = fs::absolute(*p).lexically_normal().string();
    }

    json resolved() const {
        json j = json::object();
        for (const auto& f : dump_) f(j);
        return j;
    }

private:
    static std::string key_of(std::string name) {
        std::replace(name.begin(), name.end(), '-', '_');
        return name;
    }

    CLI::App* app_;
    std::set<std::string> keys_;
    std::vector<std::function<void(const json&)>> apply_;
    std::vector<std::function<void(json&)>> dump_;
    std::vector<std::string*> paths_;
};

// ------------------------------------------------------------ run outputs

enum class Kind { artifact, checkpoint, log };

std::string to_string(Kind k) {
    switch (k) {
        case Kind::artifact: return "artifact";
        case Kind::checkpoint: return "checkpoint";
        case Kind::log: return "log";
    }
    return "artifact";
}

/// Where a command writes. Directory outputs hold manifest.json; a file
/// output `x.json` gets siblings `x.<name>` and `x.manifest.json`.
struct OutputSet {
    fs::path root;
    bool directory = true;
    std::string stem;
    std::vector<std::pair<fs::path, Kind>> files;

    static OutputSet dir(const fs::path& p) {
        OutputSet o;
        o.root = p;
        o.directory = true;
        fs::create_directories(p);
        return o;
    }
    static OutputSet file(const fs::path& p) {
        OutputSet o;
        o.directory = false;
        o.root = p.has_parent_path() ? p.parent_path() : fs::path(".");
        o.stem = p.stem().string();
        fs::create_directories(o.root);
        return o;
    }

    fs::path path(const std::string& name) const { return directory ? root / name : root / (stem + "." + name); }
    fs::path main_file() const { return root / (stem + ".json"); }
    fs::path manifest() const { return directory ? root / "manifest.json" : root / (stem + ".manifest.json"); }

    void add(const fs::path& p, Kind k = Kind::artifact) { files.emplace_back(p, k); }
    void write(const std::string& name, const std::string& text, Kind k = Kind::artifact) {
        write_text_file(path(name), text);
        add(path(name), k);
    }
};

struct Run {
    std::vector<std::string> command;  // subcommand words
    std::vector<std::string> argv;
    json config;
    std::uint64_t seed = 0;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    std::string started_at = utc_now();
    json extra = json::object();
};

void write_manifest(const Run& run, const OutputSet& out) {
    json outputs = json::array();
    auto files = out.files;
    std::sort(files.begin(), files.end());
    for (const auto& [p, kind] : files) {
        json e{{"path", fs::relative(p, out.root).generic_string()}, {"kind", to_string(kind)}};
        e["checksum"] = fnv_hex(read_text_file(p));
        if (kind == Kind::checkpoint) e["params_checksum"] = train::load_checkpoint(p).checksum();
        outputs.push_back(std::move(e));
    }
    json m{{"tool", "dynaclr"},
           {"version", tool_version},
           {"command", run.command},
           {"argv", run.argv},
           {"config", run.config},
           {"seed", run.seed},
           {"out", fs::absolute(out.directory ? out.root : out.main_file()).lexically_normal().string()},
           {"outputs", outputs},
           {"started_at", run.started_at},
           {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count()}};
    for (const auto& [k, v] : run.extra.items()) m[k] = v;
    write_text_file(out.manifest(), m.dump(2) + "\n");
}

/// CSV with a one-line JSON metadata header.
std::string csv_with_header(const json& meta, const std::string& body) { return "# " + meta.dump() + "\n" + body; }

void add_dir_files(OutputSet& out, const std::function<Kind(const fs::path&)>& classify) {
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(out.root))
        if (e.is_regular_file() && e.path() != out.manifest()) paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) out.add(p, classify(p));
}

// ------------------------------------------------------------ helpers

void require(const std::string& value, const std::string& flag) {
    if (value.empty()) throw ConfigError("--" + flag + " is required");
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    try {
        return json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ParseError(path, e.what());
    }
}

json table_meta(const EmbeddingTable& t) {
    return {{"model_checksum", t.model_checksum}, {"rows", t.rows()}, {"feature_dim", t.feature_dim}, {"dataset", t.dataset}};
}

patch::PatchSpec spec_of_table(const EmbeddingTable& t) {
    const auto cfg = json::parse(t.config_json);
    if (!cfg.contains("patch")) throw IntegrityError("embedding table does not record its patch spec");
    return patch::PatchSpec::from_json(cfg["patch"].dump());
}

std::vector<image::Rgb> time_colors(const std::vector<NodeKey>& keys) {
    int tmax = 1;
    for (const auto& k : keys) tmax = std::max(tmax, k.t);
    std::vector<image::Rgb> c;
    for (const auto& k : keys) c.push_back(image::ramp(static_cast<double>(k.t) / tmax));
    return c;
}

// ------------------------------------------------------------ commands

struct Common {
    std::uint64_t seed = 0;
    std::string config;
    std::string out;
};

void add_common(CLI::App* app, Common& c, Options& o, std::uint64_t default_seed) {
    c.seed = default_seed;
    o.add("seed", c.seed, "Seed for all randomness");
    app->add_option("--config", c.config, "JSON file with option values");
    app->add_option("--out", c.out, "Output location");
}

struct SynthArgs {
    Common common;
    int fovs_per_condition = 2, cells_per_fov = 50, timepoints = 20, size = 256, depth = 5;
    double division_rate = 0.01, motion_sigma = 1.0, shape_drift = 1.0, granule_turnover = 0.3, min_spacing = 16.0;
    bool overwrite = false;
};

void cmd_synth(const SynthArgs& a, Run& run) {
    require(a.common.out, "out");
    synth::SynthConfig cfg;
    cfg.fovs_per_condition = a.fovs_per_condition;
    cfg.cells_per_fov = a.cells_per_fov;
    cfg.n_timepoints = a.timepoints;
    cfg.volume_shape = {2, a.depth, a.size, a.size};
    cfg.division_rate = a.division_rate;
    cfg.motion_sigma = a.motion_sigma;
    cfg.shape_drift = a.shape_drift;
    cfg.granule_turnover = a.granule_turnover;
    cfg.min_spacing = a.min_spacing;
    cfg.seed = a.common.seed;
    cfg.validate();
    synth::generate_dataset(cfg, a.common.out, a.overwrite);
    auto out = OutputSet::dir(a.common.out);
    add_dir_files(out, [](const fs::path&) { return Kind::artifact; });
    run.extra["synth_config"] = json::parse(cfg.to_json());
    write_manifest(run, out);
    std::cout << "wrote dataset " << a.common.out << " (" << cfg.fov_ids().size() << " fovs)\n";
}

struct TrainArgs {
    Common common;
    std::string data, strategy = "cell-time", scale = "desk", resume;
    int tau = 1, epochs = 10, batch_size = 64, max_batches = 0, checkpoint_every = 0;
    double lr = 2e-4, weight_decay = 0.05, margin = 0.5;
    std::vector<std::string> fovs;
    json augmentation, model;
};

void cmd_train(const TrainArgs& a, Run& run) {
    require(a.data, "data");
    require(a.common.out, "out");
    auto ds = Dataset::open(a.data);
    train::TrainSetup s;
    const int channels = static_cast<int>(ds.meta().channels.size());
    if (a.scale == "desk") {
        s.model = nn::ModelConfig::desk(channels);
        s.patch = patch::PatchSpec::desk();
    } else if (a.scale == "tiny" || a.scale == "full") {
        s.model = nn::ModelConfig::tiny(channels);
        s.patch = patch::PatchSpec::full_scale();
    } else {
        throw ConfigError("--scale must be desk or tiny");
    }
    s.patch.channels = ds.meta().channels;
    if (!a.model.is_null()) s.model = nn::ModelConfig::from_json(a.model.dump());
    if (!a.augmentation.is_null()) s.augmentation = patch::AugmentationConfig::from_json(a.augmentation.dump());
    s.sampler.strategy = sampler::strategy_from_string(a.strategy);
    s.sampler.tau_frames = a.tau;
    s.sampler.batch_size = a.batch_size;
    s.sampler.seed = a.common.seed;
    s.sampler.fovs = a.fovs;
    s.train.batch_size = a.batch_size;
    s.train.epochs = a.epochs;
    s.train.seed = a.common.seed;
    s.train.margin = a.margin;
    s.train.optimizer.learning_rate = a.lr;
    s.train.optimizer.weight_decay = a.weight_decay;
    s.train.max_batches_per_epoch = a.max_batches;
    s.train.checkpoint_every = a.checkpoint_every;
    s.validate();

    auto out = OutputSet::dir(a.common.out);
    auto on_epoch = [&](const train::Checkpoint& ck, const train::EpochLog& log) {
        std::printf("epoch %d  loss %.5f  active %d/%d  %.1fs\n", log.epoch, log.mean_loss, log.active, log.triplets,
                    log.seconds);
        std::fflush(stdout);
        if (a.checkpoint_every > 0 && ck.epoch % a.checkpoint_every == 0 && ck.epoch < a.epochs) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%03d.ckpt", ck.epoch);
            train::save_checkpoint(out.path(name), ck);
            out.add(out.path(name), Kind::checkpoint);
        }
    };
    train::Checkpoint ck;
    if (!a.resume.empty()) {
        auto start = train::load_checkpoint(a.resume);
        ck = train::resume_training(ds, std::move(start), a.epochs, on_epoch);
    } else {
        ck = train::train_model(ds, s, on_epoch);
    }
    train::save_checkpoint(out.path("model.ckpt"), ck);
    out.add(out.path("model.ckpt"), Kind::checkpoint);
    out.write("loss.csv", train::history_to_csv(ck.history), Kind::log);
    run.extra["model_checksum"] = ck.checksum();
    write_manifest(run, out);
    std::cout << "model checksum " << ck.checksum() << "\n";
}

struct EmbedArgs {
    Common common;
    std::string checkpoint, data;
    std::vector<std::string> fovs;
};

void cmd_embed(const EmbedArgs& a, Run& run) {
    require(a.checkpoint, "checkpoint");
    require(a.data, "data");
    require(a.common.out, "out");
    const auto ck = train::load_checkpoint(a.checkpoint);
    auto ds = Dataset::open(a.data);
    auto table = train::embed_dataset(ck, ds, a.fovs);
    table.dataset = a.data;
    save_embeddings(a.common.out, table);
    auto out = OutputSet::dir(a.common.out);
    add_dir_files(out, [](const fs::path&) { return Kind::artifact; });
    run.extra["model_checksum"] = ck.checksum();
    write_manifest(run, out);
    std::cout << "embedded " << table.rows() << " nodes\n";
}

struct AnalyzeArgs {
    Common common;
    std::string emb, data, space = "features", projection, labels = "ground_truth", label_type = "infection",
                                                            predictions;
    int tau_max = 10, dims = 5;
    double rel_tol = 1e-6;
};

void analyze_smoothness(const AnalyzeArgs& a, OutputSet& out) {
    require(a.emb, "emb");
    const auto table = load_embeddings(a.emb);
    const auto space = analytics::space_from_string(a.space);
    analytics::KeyedRows rows;
    if (space == analytics::Space::features) {
        rows = analytics::feature_rows(table);
    } else if (!a.projection.empty()) {
        rows = analytics::align_rows(analytics::load_projection_csv(a.projection), table.keys);
    } else {
        const auto p = analytics::pca_project(table, 2);
        rows = {p.keys, p.scores};
    }
    const auto curve = analytics::displacement_at_lag(rows, a.tau_max, space);
    json meta = table_meta(table);
    meta["space"] = a.space;
    meta["tau_max"] = a.tau_max;
    meta["projection"] = a.projection.empty() ? json(space == analytics::Space::features ? "none" : "pca") : json(a.projection);
    std::string body = "tau,pairs,mean,std,sem\n";
    image::Series s;
    s.color = image::palette(0);
    for (const auto& l : curve.lags) {
        body += std::to_string(l.tau) + "," + std::to_string(l.pairs) + ",";
        if (l.mean) {
            body += num(*l.mean) + "," + num(*l.stddev) + "," + num(l.standard_error()) + "\n";
            s.x.push_back(l.tau);
            s.y.push_back(*l.mean);
            s.band.push_back(*l.stddev);
        } else {
            body += ",,\n";
        }
    }
    out.write("smoothness.csv", csv_with_header(meta, body));
    image::write_png(out.path("smoothness.png"), image::line_plot({s}));
    out.add(out.path("smoothness.png"));
    if (curve.lags.size() > 1 && curve.lags[1].mean)
        std::cout << "mean d_1 " << num(*curve.lags[1].mean) << " (sem " << num(curve.lags[1].standard_error()) << ")\n";
}

void analyze_pca(const AnalyzeArgs& a, OutputSet& out) {
    require(a.emb, "emb");
    const auto table = load_embeddings(a.emb);
    const auto p = analytics::pca_project(table, a.dims);
    json meta = table_meta(table);
    meta["k"] = a.dims;
    std::string scores = "fov_id,track_id,t";
    for (int k = 0; k < a.dims; ++k) scores += ",pc" + std::to_string(k + 1);
    scores += "\n";
    for (std::size_t i = 0; i < p.keys.size(); ++i) {
        scores += p.keys[i].fov + "," + std::to_string(p.keys[i].track) + "," + std::to_string(p.keys[i].t);
        for (int k = 0; k < a.dims; ++k) scores += "," + num(p.scores(static_cast<Eigen::Index>(i), k));
        scores += "\n";
    }
    std::string var = "component,explained_variance_ratio\n";
    for (std::size_t k = 0; k < p.explained_variance_ratio.size(); ++k)
        var += "pc" + std::to_string(k + 1) + "," + num(p.explained_variance_ratio[k]) + "\n";
    out.write("pca_scores.csv", csv_with_header(meta, scores));
    out.write("pca_variance.csv", csv_with_header(meta, var));
    if (a.dims >= 2) {
        std::vector<double> x, y;
        for (Eigen::Index i = 0; i < p.scores.rows(); ++i) {
            x.push_back(p.scores(i, 0));
            y.push_back(p.scores(i, 1));
        }
        image::write_png(out.path("pca.png"), image::scatter_plot(x, y, time_colors(p.keys)));
        out.add(out.path("pca.png"));
    }
}

void analyze_rank(const AnalyzeArgs& a, OutputSet& out) {
    require(a.emb, "emb");
    const auto table = load_embeddings(a.emb);
    const auto r = analytics::embedding_rank(table, a.rel_tol);
    json j = table_meta(table);
    j["rank"] = r.rank;
    j["rel_tol"] = r.rel_tol;
    j["singular_values"] = r.singular_values;
    out.write("rank.json", j.dump(2) + "\n");
    std::cout << "rank " << r.rank << "\n";
}

void analyze_features(const AnalyzeArgs& a, OutputSet& out) {
    require(a.emb, "emb");
    require(a.data, "data");
    const auto table = load_embeddings(a.emb);
    auto ds = Dataset::open(a.data);
    const auto spec = spec_of_table(table);
    patch::PatchSource source(ds, spec);
    const auto& names = analytics::image_feature_names();
    const std::string fluor = spec.channels.size() > 1 ? spec.channels[1] : spec.channels[0];
    analytics::Matrix feats(static_cast<Eigen::Index>(table.rows()), static_cast<Eigen::Index>(names.size()));
    std::string body = "fov_id,track_id,t";
    for (const auto& n : names) body += "," + n;
    body += "\n";
    for (std::size_t i = 0; i < table.rows(); ++i) {
        const auto p = source.final_patch(table.keys[i]);
        if (!p.valid) throw IntegrityError("embedded node " + to_string(table.keys[i]) + " has no valid patch");
        const auto f = analytics::compute_image_features(p.data, spec.channels, "phase", fluor);
        const double v[] = {f.fluor_radial_slope, f.fluor_area, f.phase_iqr, f.phase_std};
        body += table.keys[i].fov + "," + std::to_string(table.keys[i].track) + "," + std::to_string(table.keys[i].t);
        for (std::size_t j = 0; j < names.size(); ++j) {
            feats(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
            body += "," + num(v[j]);
        }
        body += "\n";
    }
    const auto p = analytics::pca_project(table, a.dims);
    const auto rho = analytics::correlate_features_with_pcs(feats, p.scores);
    std::string corr = "feature";
    for (int k = 0; k < a.dims; ++k) corr += ",pc" + std::to_string(k + 1);
    corr += "\n";
    for (std::size_t j = 0; j < names.size(); ++j) {
        corr += names[j];
        for (const auto& r : rho[j]) corr += "," + (r ? num(*r) : std::string("undefined"));
        corr += "\n";
    }
    json meta = table_meta(table);
    meta["k"] = a.dims;
    meta["fluor_area_threshold"] = analytics::fluor_area_threshold;
    out.write("image_features.csv", csv_with_header(meta, body));
    out.write("feature_pc_correlation.csv", csv_with_header(meta, corr));
}

std::vector<analytics::LabeledNode> read_predictions_csv(const std::string& path) {
    std::vector<analytics::LabeledNode> out;
    std::istringstream is(read_text_file(path));
    std::string line;
    bool header = false;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            header = true;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() < 4) throw ParseError(path, "expected fov_id,track_id,t,label,...");
        try {
            out.push_back({{f[0], std::stoll(f[1]), std::stoi(f[2])}, std::stoi(f[3])});
        } catch (const std::exception&) {
            throw ParseError(path, "malformed row '" + line + "'");
        }
    }
    return out;
}

void analyze_fractions(const AnalyzeArgs& a, OutputSet& out) {
    require(a.data, "data");
    auto ds = Dataset::open(a.data);
    std::vector<analytics::LabeledNode> labels;
    json meta{{"dataset", a.data}};
    if (!a.predictions.empty()) {
        labels = read_predictions_csv(a.predictions);
        meta["source"] = "predictions";
        meta["predictions"] = a.predictions;
    } else {
        labels = probe::labels_from_annotations(ds.read_annotations(), label_type_from_string(a.label_type),
                                                label_source_from_string(a.labels));
        meta["source"] = a.labels;
    }
    meta["label_type"] = a.label_type;
    const auto series = analytics::infection_fraction_timeseries(labels, ds.meta());
    std::string body = "condition,t,hpi_minutes,labeled,infected,fraction\n";
    std::vector<image::Series> plot;
    for (const auto& [cond, pts] : series) {
        image::Series s;
        s.color = image::palette(plot.size());
        for (const auto& p : pts) {
            body += cond + "," + std::to_string(p.t) + "," + num(p.hpi_minutes) + "," + std::to_string(p.labeled) + "," +
                    std::to_string(p.infected) + "," + num(p.fraction) + "\n";
            s.x.push_back(p.hpi_minutes);
            s.y.push_back(p.fraction);
        }
        plot.push_back(s);
    }
    out.write("fractions.csv", csv_with_header(meta, body));
    image::write_png(out.path("fractions.png"), image::line_plot(plot));
    out.add(out.path("fractions.png"));
}

struct ProbeArgs {
    Common common;
    std::string emb, data, labels = "ground_truth", label_type = "infection";
    double split = 0.5, l2 = 1.0;
};

void cmd_probe(const ProbeArgs& a, Run& run) {
    require(a.emb, "emb");
    require(a.data, "data");
    require(a.common.out, "out");
    const auto table = load_embeddings(a.emb);
    auto ds = Dataset::open(a.data);
    const auto type = label_type_from_string(a.label_type);
    std::vector<analytics::LabeledNode> labels;
    for (const auto& l : probe::labels_from_annotations(ds.read_annotations(), type, label_source_from_string(a.labels)))
        if (table.find(l.key)) labels.push_back(l);
    if (labels.empty()) throw ValidationError("no " + a.labels + " " + a.label_type + " labels match the embeddings");
    const auto split = probe::split_annotations(labels, a.split, a.common.seed);
    std::map<NodeKey, int> by_key;
    for (const auto& l : labels) by_key[l.key] = l.label;
    auto pick = [&](const std::vector<NodeKey>& keys) {
        std::vector<analytics::LabeledNode> out;
        for (const auto& k : keys) out.push_back({k, by_key.at(k)});
        return out;
    };
    const auto train_labels = pick(split.train), eval_labels = pick(split.eval);
    probe::ProbeConfig pc;
    pc.l2 = a.l2;
    const auto model = probe::train_probe(probe::gather_features(table, split.train), train_labels, type, pc);
    const auto m = probe::evaluate_probe(model, probe::gather_features(table, split.eval), eval_labels);

    const fs::path outp(a.common.out);
    auto out = outp.extension() == ".json" ? OutputSet::file(outp) : OutputSet::dir(outp);
    json metrics = table_meta(table);
    metrics.update({{"accuracy", m.accuracy},
                    {"f1", m.f1},
                    {"tp", m.tp},
                    {"fp", m.fp},
                    {"tn", m.tn},
                    {"fn", m.fn},
                    {"n_train", split.train.size()},
                    {"n_eval", split.eval.size()},
                    {"split_fraction", a.split},
                    {"split_checksum", probe::split_checksum(split)},
                    {"label_type", a.label_type},
                    {"label_source", a.labels},
                    {"l2", a.l2},
                    {"probe_status", probe::to_string(model.status)},
                    {"probe_iterations", model.iterations},
                    {"probe_gradient_norm", model.gradient_norm}});
    if (out.directory) out.write("metrics.json", metrics.dump(2) + "\n");
    else {
        write_text_file(out.main_file(), metrics.dump(2) + "\n");
        out.add(out.main_file());
    }
    out.write("probe.json", model.to_json() + "\n");
    std::string preds = "fov_id,track_id,t,label,probability\n";
    for (const auto& p : probe::predict_states(model, table))
        preds += p.key.fov + "," + std::to_string(p.key.track) + "," + std::to_string(p.key.t) + "," +
                 std::to_string(p.label) + "," + num(p.probability) + "\n";
    out.write("predictions.csv", csv_with_header(table_meta(table), preds));
    run.extra["model_checksum"] = table.model_checksum;
    write_manifest(run, out);
    std::printf("accuracy %.4f  f1 %.4f  (train %zu, eval %zu, %s)\n", m.accuracy, m.f1, split.train.size(),
                split.eval.size(), probe::to_string(model.status).c_str());
}

struct AttributeArgs {
    Common common;
    std::string checkpoint, probe, data, fov, head = "infection";
    std::int64_t track = 0;
    int t = 0, steps = 32;
    std::vector<int> window, stride;
    bool per_channel = false, multiply_inputs = false;
    double baseline = 0;
};

void cmd_attribute(const std::string& method, const AttributeArgs& a, Run& run) {
    require(a.checkpoint, "checkpoint");
    require(a.probe, "probe");
    require(a.data, "data");
    require(a.fov, "fov");
    require(a.common.out, "out");
    const auto ck = train::load_checkpoint(a.checkpoint);
    const auto model = probe::ProbeModel::from_json(read_text_file(a.probe));
    auto ds = Dataset::open(a.data);
    const NodeKey key{a.fov, a.track, a.t};
    if (!ds.tracks().contains(key)) throw ValidationError("no node " + to_string(key));
    patch::PatchSource source(ds, ck.setup.patch);
    const auto p = source.final_patch(key);
    if (!p.valid) throw ValidationError("patch for " + to_string(key) + " leaves the volume");
    auto enc = std::make_shared<const nn::Encoder<double>>(train::make_encoder(ck).cast<double>());
    const auto score = attribution::probe_score(enc, model);

    attribution::AttributionMap map;
    if (method == "occlusion") {
        const auto& fs = ck.setup.patch.final_size;
        auto cfg = attribution::OcclusionConfig::scaled_for(fs);
        auto size3 = [](const std::vector<int>& v, const char* what) {
            if (v.size() != 3) throw ConfigError(std::string("--") + what + " takes z,y,x");
            return Size3{v[0], v[1], v[2]};
        };
        if (!a.window.empty()) cfg.window = size3(a.window, "window");
        if (!a.stride.empty()) cfg.stride = size3(a.stride, "stride");
        cfg.baseline = static_cast<float>(a.baseline);
        cfg.per_channel = a.per_channel;
        map = attribution::occlusion_map(score, p.data, cfg);
    } else {
        attribution::IgConfig cfg;
        cfg.steps = a.steps;
        cfg.baseline = static_cast<float>(a.baseline);
        cfg.multiply_inputs = a.multiply_inputs;
        map = attribution::integrated_gradients_map(score, p.data, cfg);
    }
    map.head = a.head;
    map.predicted_probability = 1.0 / (1.0 + std::exp(-map.score));
    for (const auto& r : ds.read_annotations())
        if (r.key() == key && r.label_type == model.label_type && r.source == LabelSource::ground_truth) map.true_class = r.value;

    auto out = OutputSet::dir(a.common.out);
    attribution::save_map(out.root / "map", map);
    out.add(out.root / "map.bin");
    out.add(out.root / "map.json");
    image::write_png(out.path("panel.png"), attribution::render_panel(p.data, map));
    out.add(out.path("panel.png"));
    run.extra["model_checksum"] = ck.checksum();
    write_manifest(run, out);
    std::printf("score %.6f  baseline %.6f  sum %.6f  p=%.4f\n", map.score, map.baseline_score, map.total(),
                *map.predicted_probability);
}

struct ServeArgs {
    Common common;
    std::string data, emb, probe, projection, host = "127.0.0.1";
    int port = 8080;
};

std::atomic<bool> stop_requested{false};

void cmd_serve(const ServeArgs& a, Run& run) {
    require(a.data, "data");
    require(a.emb, "emb");
    service::ServiceOptions o;
    o.dataset = a.data;
    o.embeddings = a.emb;
    if (!a.probe.empty()) o.probe = a.probe;
    if (!a.projection.empty()) o.projection = a.projection;
    o.host = a.host;
    o.port = a.port;
    service::Server server(o);
    const int port = server.start();
    if (!a.common.out.empty()) {
        auto out = OutputSet::dir(a.common.out);
        run.extra["port"] = port;
        write_manifest(run, out);
    }
    std::printf("serving on http://%s:%d\n", a.host.c_str(), port);
    std::fflush(stdout);
    stop_requested = false;
    auto handler = [](int) { stop_requested = true; };
    std::signal(SIGINT, handler);
    std::signal(SIGTERM, handler);
    while (!stop_requested) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
}

int cmd_replay(const std::string& manifest_path, const std::string& out_override);

// ------------------------------------------------------------ dispatch

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"Time-aware contrastive learning for cell dynamics", "dynaclr"};
    app.require_subcommand(1);
    Run run;
    run.argv = args;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic time-lapse dataset");
    SynthArgs sa;
    Options so(synth);
    add_common(synth, sa.common, so, 7);
    so.add("fovs-per-condition", sa.fovs_per_condition, "FOVs per condition");
    so.add("cells-per-fov", sa.cells_per_fov, "Cells per FOV");
    so.add("timepoints", sa.timepoints, "Frames");
    so.add("size", sa.size, "Lateral size (Y = X)");
    so.add("depth", sa.depth, "Z slices");
    so.add("division-rate", sa.division_rate, "Per-frame division probability");
    so.add("motion-sigma", sa.motion_sigma, "Random-walk step (voxels)");
    so.add("shape-drift", sa.shape_drift, "Scale of frame-to-frame shape drift");
    so.add("granule-turnover", sa.granule_turnover, "Per-frame probability that a granule relocates");
    so.add("min-spacing", sa.min_spacing, "Minimum distance between cells (voxels)");
    so.flag("overwrite", sa.overwrite, "Replace an existing dataset");

    auto* train = app.add_subcommand("train", "Train an encoder with triplet loss");
    TrainArgs ta;
    Options to(train);
    add_common(train, ta.common, to, 0);
    to.path("data", ta.data, "Dataset directory");
    to.add("strategy", ta.strategy, "classical | cell | cell-time");
    to.add("tau", ta.tau, "Positive offset in frames");
    to.add("scale", ta.scale, "desk | tiny");
    to.add("epochs", ta.epochs, "Epochs");
    to.add("batch-size", ta.batch_size, "Triplets per batch");
    to.add("lr", ta.lr, "Learning rate");
    to.add("weight-decay", ta.weight_decay, "Decoupled weight decay");
    to.add("margin", ta.margin, "Triplet margin");
    to.add("fovs", ta.fovs, "Training FOVs (comma separated)");
    to.add("max-batches", ta.max_batches, "Cap on batches per epoch (0 = all)");
    to.add("checkpoint-every", ta.checkpoint_every, "Intermediate checkpoint period in epochs");
    to.path("resume", ta.resume, "Checkpoint to continue from");
    to.config_only("augmentation", ta.augmentation);
    to.config_only("model", ta.model);

    auto* embed = app.add_subcommand("embed", "Embed every valid node");
    EmbedArgs ea;
    Options eo(embed);
    add_common(embed, ea.common, eo, 0);
    eo.path("checkpoint", ea.checkpoint, "Model checkpoint");
    eo.path("data", ea.data, "Dataset directory");
    eo.add("fovs", ea.fovs, "FOVs to embed (comma separated)");

    auto* analyze = app.add_subcommand("analyze", "Embedding analytics");
    analyze->require_subcommand(1);
    AnalyzeArgs aa;
    std::vector<std::pair<CLI::App*, std::unique_ptr<Options>>> analyses;
    for (const char* name : {"smoothness", "pca", "rank", "features", "fractions"}) {
        auto* sub = analyze->add_subcommand(name);
        auto o = std::make_unique<Options>(sub);
        add_common(sub, aa.common, *o, 0);
        const std::string n = name;
        if (n != "fractions") o->path("emb", aa.emb, "Embedding directory");
        if (n == "features" || n == "fractions") o->path("data", aa.data, "Dataset directory");
        if (n == "smoothness") {
            o->add("tau-max", aa.tau_max, "Largest lag in frames");
            o->add("space", aa.space, "features | projection2d");
            o->path("projection", aa.projection, "External 2D projection CSV");
        }
        if (n == "pca" || n == "features") o->add("dims", aa.dims, "Number of components");
        if (n == "rank") o->add("rel-tol", aa.rel_tol, "Relative singular value threshold");
        if (n == "fractions") {
            o->add("labels", aa.labels, "ground_truth | human");
            o->add("label-type", aa.label_type, "infection | division");
            o->path("predictions", aa.predictions, "Probe predictions CSV (overrides --labels)");
        }
        analyses.emplace_back(sub, std::move(o));
    }

    auto* probe = app.add_subcommand("probe", "Linear probe on frozen embeddings");
    ProbeArgs pa;
    Options po(probe);
    add_common(probe, pa.common, po, 0);
    po.path("emb", pa.emb, "Embedding directory");
    po.path("data", pa.data, "Dataset directory");
    po.add("labels", pa.labels, "ground_truth | human");
    po.add("label-type", pa.label_type, "infection | division");
    po.add("split", pa.split, "Training fraction of annotated tracks");
    po.add("l2", pa.l2, "L2 penalty on weights");

    auto* attribute = app.add_subcommand("attribute", "Input attribution of a probe decision");
    attribute->require_subcommand(1);
    AttributeArgs xa;
    std::vector<std::pair<CLI::App*, std::unique_ptr<Options>>> attributions;
    for (const char* name : {"occlusion", "ig"}) {
        auto* sub = attribute->add_subcommand(name);
        auto o = std::make_unique<Options>(sub);
        add_common(sub, xa.common, *o, 0);
        o->path("checkpoint", xa.checkpoint, "Model checkpoint");
        o->path("probe", xa.probe, "Probe model JSON");
        o->path("data", xa.data, "Dataset directory");
        o->add("fov", xa.fov, "Node FOV");
        o->add("track", xa.track, "Node track id");
        o->add("t", xa.t, "Node frame");
        o->add("head", xa.head, "Label recorded as the head name");
        o->add("baseline", xa.baseline, "Baseline value");
        if (std::string(name) == "occlusion") {
            o->add("window", xa.window, "Window z,y,x");
            o->add("stride", xa.stride, "Stride z,y,x");
            o->flag("per-channel", xa.per_channel, "Occlude channels separately");
        } else {
            o->add("steps", xa.steps, "Path steps");
            o->flag("multiply-inputs", xa.multiply_inputs, "Multiply the map by the input");
        }
        attributions.emplace_back(sub, std::move(o));
    }

    auto* serve = app.add_subcommand("serve", "HTTP API for the explorer");
    ServeArgs va;
    Options vo(serve);
    add_common(serve, va.common, vo, 0);
    vo.path("data", va.data, "Dataset directory");
    vo.path("emb", va.emb, "Embedding directory");
    vo.path("probe", va.probe, "Probe model JSON");
    vo.path("projection", va.projection, "External 2D projection CSV");
    vo.add("host", va.host, "Bind address");
    vo.add("port", va.port, "Port (0 picks a free one)");

    auto* replay = app.add_subcommand("replay", "Re-run a command from its manifest and compare outputs");
    std::string manifest, replay_out;
    replay->add_option("manifest", manifest, "manifest.json of a previous run")->required();
    replay->add_option("--out", replay_out, "Output location (default: <original>.replay)");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n";
        std::cerr << app.help();
        return exit_validation;
    }

    auto finish = [&](Options& o, Common& c, std::vector<std::string> command) {
        o.apply(load_config(c.config));
        o.absolutize();
        if (!c.out.empty()) c.out = fs::absolute(c.out).lexically_normal().string();
        run.command = std::move(command);
        run.config = o.resolved();
        run.seed = c.seed;
    };

    if (replay->parsed()) return cmd_replay(manifest, replay_out);
    if (synth->parsed()) {
        finish(so, sa.common, {"synth"});
        cmd_synth(sa, run);
    } else if (train->parsed()) {
        finish(to, ta.common, {"train"});
        cmd_train(ta, run);
    } else if (embed->parsed()) {
        finish(eo, ea.common, {"embed"});
        cmd_embed(ea, run);
    } else if (probe->parsed()) {
        finish(po, pa.common, {"probe"});
        cmd_probe(pa, run);
    } else if (serve->parsed()) {
        finish(vo, va.common, {"serve"});
        cmd_serve(va, run);
    } else if (analyze->parsed()) {
        for (auto& [sub, o] : analyses) {
            if (!sub->parsed()) continue;
            const std::string name = sub->get_name();
            finish(*o, aa.common, {"analyze", name});
            require(aa.common.out, "out");
            auto out = OutputSet::dir(aa.common.out);
            if (name == "smoothness") analyze_smoothness(aa, out);
            else if (name == "pca") analyze_pca(aa, out);
            else if (name == "rank") analyze_rank(aa, out);
            else if (name == "features") analyze_features(aa, out);
            else analyze_fractions(aa, out);
            write_manifest(run, out);
        }
    } else if (attribute->parsed()) {
        for (auto& [sub, o] : attributions) {
            if (!sub->parsed()) continue;
            finish(*o, xa.common, {"attribute", sub->get_name()});
            cmd_attribute(sub->get_name() == "ig" ? "ig" : "occlusion", xa, run);
        }
    }
    return exit_ok;
}

// ------------------------------------------------------------ replay

int cmd_replay(const std::string& manifest_path, const std::string& out_override) {
    json m;
    try {
        m = json::parse(read_text_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw ParseError(manifest_path, e.what());
    }
    const auto command = m.at("command").get<std::vector<std::string>>();
    const fs::path orig_out = m.at("out").get<std::string>();
    const fs::path manifest_dir = fs::absolute(manifest_path).parent_path();
    const bool is_file = orig_out.has_extension() && orig_out.extension() == ".json" && command.front() == "probe";
    fs::path new_out = out_override.empty() ? fs::path(orig_out.string() + ".replay") : fs::absolute(out_override);
    if (is_file && new_out.extension() != ".json") new_out = new_out.string() + ".json";
    if (is_file && out_override.empty()) new_out = orig_out.parent_path() / (orig_out.stem().string() + ".replay.json");

    const auto snapshot = fs::temp_directory_path() / ("dynaclr_replay_" + fnv_hex(new_out.string()) + ".json");
    write_text_file(snapshot, m.at("config").dump());
    std::vector<std::string> args = command;
    args.insert(args.end(), {"--config", snapshot.string(), "--out", new_out.string()});
    if (command.front() == "synth" && !m["config"].value("overwrite", false)) args.push_back("--overwrite");
    const int code = run(args);
    fs::remove(snapshot);
    if (code != exit_ok) return code;

    const fs::path new_manifest = is_file ? new_out.parent_path() / (new_out.stem().string() + ".manifest.json")
                                          : new_out / "manifest.json";
    const json n = json::parse(read_text_file(new_manifest));
    const fs::path new_root = new_manifest.parent_path();
    auto strip = [&](const std::string& rel, const fs::path& out) {
        if (!is_file) return rel;
        const auto stem = out.stem().string();
        return rel.starts_with(stem) ? rel.substr(stem.size()) : rel;
    };
    std::map<std::string, json> fresh;
    for (const auto& e : n.at("outputs")) fresh[strip(e.at("path"), new_out)] = e;
    bool identical = true;
    json report = json::array();
    for (const auto& e : m.at("outputs")) {
        const std::string rel = e.at("path");
        const std::string kind = e.at("kind");
        json r{{"path", rel}, {"kind", kind}};
        auto it = fresh.find(strip(rel, orig_out));
        if (it == fresh.end()) {
            r["status"] = "missing";
            identical = false;
        } else if (kind == "log") {
            r["status"] = "skipped";
        } else if (kind == "checkpoint") {
            const auto a = train::load_checkpoint(manifest_dir / rel);
            const auto b = train::load_checkpoint(new_root / it->second.at("path").get<std::string>());
            double diff = a.params.size() == b.params.size() ? 0.0 : 1e300;
            for (std::size_t i = 0; i < a.params.size() && i < b.params.size(); ++i)
                diff = std::max(diff, static_cast<double>(std::abs(a.params[i] - b.params[i])));
            r["max_param_diff"] = diff;
            r["status"] = diff <= 1e-5 ? "match" : "differs";
            identical = identical && diff <= 1e-5;
        } else {
            const bool same = e.at("checksum") == it->second.at("checksum");
            r["status"] = same ? "match" : "differs";
            identical = identical && same;
        }
        report.push_back(r);
    }
    std::cout << json{{"replayed", manifest_path}, {"out", new_out.string()}, {"identical", identical}, {"outputs", report}}.dump(2)
              << "\n";
    return identical ? exit_ok : exit_runtime;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    try {
        return dispatch(args);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_validation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
}

int main(int argc, char** argv) { return run(std::vector<std::string>(argv + 1, argv + argc)); }

}  // namespace dynaclr::cli
