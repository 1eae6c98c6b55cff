#include "dynaclr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dynaclr/errors.hpp"
#include "dynaclr/nn/triplet_loss.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace dynaclr::train {

namespace {

constexpr char checkpoint_magic[8] = {'D', 'Y', 'N', 'A', 'C', 'L', 'R', '1'};

// Stream labels for derive_seed.
enum : std::uint64_t { stream_init = 1, stream_shuffle = 2, stream_sample = 3, stream_augment = 4 };

}  // namespace

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(margin > 0)) throw ConfigError("margin must be > 0");
    if (!(optimizer.learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (optimizer.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1) || !(optimizer.beta2 >= 0 && optimizer.beta2 < 1))
        throw ConfigError("betas must lie in [0, 1)");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (max_batches_per_epoch < 0) throw ConfigError("max_batches_per_epoch must be >= 0");
}

std::string TrainConfig::to_json() const {
    json j{{"batch_size", batch_size},
           {"optimizer",
            {{"name", "adamw"},
             {"learning_rate", optimizer.learning_rate},
             {"beta1", optimizer.beta1},
             {"beta2", optimizer.beta2},
             {"eps", optimizer.eps},
             {"weight_decay", optimizer.weight_decay}}},
           {"margin", margin},
           {"epochs", epochs},
           {"seed", seed},
           {"checkpoint_every", checkpoint_every},
           {"max_batches_per_epoch", max_batches_per_epoch}};
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    TrainConfig c;
    try {
        const json j = json::parse(text);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.margin = j.value("margin", c.margin);
        c.epochs = j.value("epochs", c.epochs);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.max_batches_per_epoch = j.value("max_batches_per_epoch", c.max_batches_per_epoch);
        if (j.contains("learning_rate")) c.optimizer.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("optimizer")) {
            const auto& o = j["optimizer"];
            c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
            c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
            c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
            c.optimizer.eps = o.value("eps", c.optimizer.eps);
            c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

void TrainSetup::validate() const {
    model.validate();
    sampler.validate();
    train.validate();
    augmentation.validate();
    patch.validate(augmentation);
    if (static_cast<int>(patch.channels.size()) != model.in_channels)
        throw ConfigError("model expects " + std::to_string(model.in_channels) + " channels, patch spec provides " +
                          std::to_string(patch.channels.size()));
    if (patch.final_size != model.input_size) throw ConfigError("patch final_size does not match model input_size");
}

std::string params_checksum(std::span<const float> params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(params.data());
    for (std::size_t i = 0; i < params.size() * sizeof(float); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string Checkpoint::checksum() const { return params_checksum(params); }

Checkpoint initial_checkpoint(const TrainSetup& setup) {
    setup.validate();
    nn::Encoder<float> enc(setup.model, derive_seed(setup.train.seed, {stream_init}));
    Checkpoint c;
    c.setup = setup;
    c.manifest = enc.params().infos();
    const auto v = enc.params().values();
    c.params.assign(v.begin(), v.end());
    c.adam_m.assign(c.params.size(), 0.0f);
    c.adam_v.assign(c.params.size(), 0.0f);
    return c;
}

nn::Encoder<float> make_encoder(const Checkpoint& ckpt) {
    nn::Encoder<float> enc(ckpt.setup.model);
    if (enc.params().infos().size() != ckpt.manifest.size()) throw ConfigError("checkpoint manifest does not match the model");
    for (std::size_t i = 0; i < ckpt.manifest.size(); ++i) {
        const auto& a = enc.params().infos()[i];
        const auto& b = ckpt.manifest[i];
        if (a.name != b.name || a.shape != b.shape || a.offset != b.offset)
            throw ConfigError("checkpoint parameter '" + b.name + "' does not match the model layout");
    }
    enc.params().assign(ckpt.params);
    return enc;
}

// ---------------------------------------------------------------- checkpoint I/O

namespace {

json history_json(const std::vector<EpochLog>& h) {
    json a = json::array();
    for (const auto& e : h)
        a.push_back({{"epoch", e.epoch},
                     {"mean_loss", e.mean_loss},
                     {"batches", e.batches},
                     {"triplets", e.triplets},
                     {"active", e.active},
                     {"seconds", e.seconds}});
    return a;
}

std::string state_checksum(const Checkpoint& c) {
    return params_checksum(c.adam_m) + params_checksum(c.adam_v);
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    json manifest = json::array();
    for (const auto& p : ckpt.manifest)
        manifest.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", p.offset}, {"size", p.size}, {"decay", p.decay}});
    const bool has_opt = !ckpt.adam_m.empty();
    json header{{"format", "dynaclr-checkpoint"},
                {"version", 1},
                {"model", json::parse(ckpt.setup.model.to_json())},
                {"sampler", json::parse(ckpt.setup.sampler.to_json())},
                {"train", json::parse(ckpt.setup.train.to_json())},
                {"augmentation", json::parse(ckpt.setup.augmentation.to_json())},
                {"patch", json::parse(ckpt.setup.patch.to_json())},
                {"seed", ckpt.setup.train.seed},
                {"epoch", ckpt.epoch},
                {"step", ckpt.step},
                {"checksum", ckpt.checksum()},
                {"state_checksum", has_opt ? state_checksum(ckpt) : ""},
                {"param_count", ckpt.params.size()},
                {"optimizer_state", has_opt},
                {"manifest", manifest},
                {"history", history_json(ckpt.history)}};
    const std::string text = header.dump();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw Error("cannot write checkpoint " + path.string());
        os.write(checkpoint_magic, sizeof checkpoint_magic);
        const std::uint64_t len = text.size();
        os.write(reinterpret_cast<const char*>(&len), sizeof len);
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        auto blob = [&](const std::vector<float>& v) {
            os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
        };
        blob(ckpt.params);
        if (has_opt) {
            blob(ckpt.adam_m);
            blob(ckpt.adam_v);
        }
        if (!os) throw Error("short write to checkpoint " + path.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("checkpoint", "cannot open " + path.string());
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, checkpoint_magic, sizeof magic) != 0)
        throw ParseError("checkpoint", path.string() + " is not a checkpoint file");
    std::uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!is || len > (1ULL << 30)) throw ParseError("checkpoint", "corrupt header length");
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw ParseError("checkpoint", "truncated header");

    Checkpoint c;
    std::size_t count = 0;
    bool has_opt = false;
    std::string checksum, state;
    try {
        const json h = json::parse(text);
        c.setup.model = nn::ModelConfig::from_json(h.at("model").dump());
        c.setup.sampler = sampler::SamplerConfig::from_json(h.at("sampler").dump());
        c.setup.train = TrainConfig::from_json(h.at("train").dump());
        c.setup.augmentation = patch::AugmentationConfig::from_json(h.at("augmentation").dump());
        c.setup.patch = patch::PatchSpec::from_json(h.at("patch").dump());
        c.epoch = h.at("epoch").get<int>();
        c.step = h.at("step").get<std::int64_t>();
        count = h.at("param_count").get<std::size_t>();
        has_opt = h.at("optimizer_state").get<bool>();
        checksum = h.at("checksum").get<std::string>();
        state = h.value("state_checksum", "");
        for (const auto& p : h.at("manifest"))
            c.manifest.push_back({p.at("name").get<std::string>(), p.at("shape").get<std::vector<int>>(),
                                  p.at("offset").get<std::size_t>(), p.at("size").get<std::size_t>(),
                                  p.at("decay").get<bool>()});
        for (const auto& e : h.at("history"))
            c.history.push_back({e.at("epoch").get<int>(), e.at("mean_loss").get<double>(), e.at("batches").get<int>(),
                                 e.at("triplets").get<int>(), e.at("active").get<int>(), e.at("seconds").get<double>()});
    } catch (const json::exception& e) {
        throw ParseError("checkpoint", std::string("header: ") + e.what());
    }
    auto blob = [&](std::vector<float>& v) {
        v.resize(count);
        is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(float)));
        if (!is) throw ParseError("checkpoint", "truncated parameter blob");
    };
    blob(c.params);
    if (has_opt) {
        blob(c.adam_m);
        blob(c.adam_v);
    }
    if (c.checksum() != checksum)
        throw IntegrityError("checkpoint checksum mismatch: header " + checksum + ", blob " + c.checksum());
    if (has_opt && state_checksum(c) != state)
        throw IntegrityError("checkpoint optimizer state checksum mismatch");
    return c;
}

// ---------------------------------------------------------------- training

namespace {

double param_norm(std::span<const float> p) {
    double s = 0;
    for (float v : p) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

EpochLog run_epoch(const patch::PatchSource& source, const sampler::TripletSampler& sampler,
                   nn::Encoder<float>& enc, nn::AdamW<float>& opt, Checkpoint& ckpt) {
    const auto& setup = ckpt.setup;
    const auto& tc = setup.train;
    const int epoch = ckpt.epoch;
    const auto t_start = std::chrono::steady_clock::now();

    auto order = sampler.anchors();
    {
        Rng rng(derive_seed(tc.seed, {stream_shuffle, static_cast<std::uint64_t>(epoch)}));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    }
    int n_batches = static_cast<int>((order.size() + tc.batch_size - 1) / tc.batch_size);
    if (tc.max_batches_per_epoch > 0) n_batches = std::min(n_batches, tc.max_batches_per_epoch);

    const int pdim = setup.model.projection_dim;
    nn::Encoder<float>::Trace ta, tp, tn;
    std::vector<float> grads(enc.params().size());
    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0;

    for (int b = 0; b < n_batches; ++b) {
        const std::size_t lo = static_cast<std::size_t>(b) * tc.batch_size;
        const std::size_t hi = std::min(order.size(), lo + tc.batch_size);
        Rng rng(derive_seed(tc.seed, {stream_sample, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)}));
        std::vector<sampler::TripletIndex> idx;
        idx.reserve(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) idx.push_back(sampler.sample(order[i], rng));
        const auto resample = [&](Rng& r) {
            return sampler.sample(sampler.anchors()[uniform_index(r, sampler.anchors().size())], r);
        };
        const auto batch = sampler::build_triplet_batch(
            idx, source, setup.augmentation,
            derive_seed(tc.seed, {stream_augment, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b)}),
            resample);

        std::fill(grads.begin(), grads.end(), 0.0f);
        const std::size_t n = batch.patch_shape.size();
        double batch_loss = 0;
        for (int i = 0; i < batch.batch; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * n;
            enc.forward(std::span<const float>(batch.anchor).subspan(off, n), ta);
            enc.forward(std::span<const float>(batch.positive).subspan(off, n), tp);
            enc.forward(std::span<const float>(batch.negative).subspan(off, n), tn);
            const auto r = nn::triplet_loss<float>(ta.z, tp.z, tn.z, pdim, tc.margin);
            if (!std::isfinite(r.loss)) {
                std::ostringstream os;
                os << "non-finite loss at epoch " << epoch << ", batch " << b << ", triplet " << i << " (anchor "
                   << to_string(batch.indices[i].anchor) << ", negative " << to_string(batch.indices[i].negative)
                   << "); parameter norm " << param_norm(enc.params().values());
                throw NonFiniteLossError(os.str());
            }
            batch_loss += r.loss;
            if (r.active == 0) continue;
            ++log.active;
            enc.backward(ta, {}, r.grad_anchor, grads, {});
            enc.backward(tp, {}, r.grad_positive, grads, {});
            enc.backward(tn, {}, r.grad_negative, grads, {});
        }
        for (float g : grads)
            if (!std::isfinite(g))
                throw NonFiniteLossError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(b) + "; parameter norm " +
                                         std::to_string(param_norm(enc.params().values())));
        opt.step(enc.params(), grads);
        ++ckpt.step;
        loss_sum += batch_loss;
        log.triplets += batch.batch;
        ++log.batches;
    }
    log.mean_loss = log.triplets > 0 ? loss_sum / log.triplets : 0.0;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return log;
}

}  // namespace

Checkpoint resume_training(const Dataset& dataset, Checkpoint ckpt, int total_epochs, const EpochCallback& on_epoch) {
    ckpt.setup.validate();
    if (total_epochs < ckpt.epoch)
        throw ConfigError("checkpoint already has " + std::to_string(ckpt.epoch) + " epochs, more than the requested " +
                          std::to_string(total_epochs));
    for (const auto& ch : ckpt.setup.patch.channels) dataset.meta().channel_index(ch);
    for (const auto& f : ckpt.setup.sampler.fovs) {
        const auto& ids = dataset.meta().fov_ids;
        if (std::find(ids.begin(), ids.end(), f) == ids.end()) throw ConfigError("unknown fov '" + f + "'");
    }
    if (ckpt.epoch == total_epochs) return ckpt;

    patch::PatchSource source(dataset, ckpt.setup.patch);
    const auto& table = dataset.tracks();
    sampler::TripletSampler sampler(table, ckpt.setup.sampler, [&](const NodeKey& k) { return source.valid(k); });

    auto enc = make_encoder(ckpt);
    nn::AdamW<float> opt(enc.params(), ckpt.setup.train.optimizer);
    if (ckpt.adam_m.size() == ckpt.params.size()) {
        opt.first_moment() = ckpt.adam_m;
        opt.second_moment() = ckpt.adam_v;
    }
    opt.set_steps(ckpt.step);

    while (ckpt.epoch < total_epochs) {
        const auto log = run_epoch(source, sampler, enc, opt, ckpt);
        ++ckpt.epoch;
        ckpt.history.push_back(log);
        const auto v = enc.params().values();
        ckpt.params.assign(v.begin(), v.end());
        ckpt.adam_m = opt.first_moment();
        ckpt.adam_v = opt.second_moment();
        if (on_epoch) on_epoch(ckpt, log);
    }
    ckpt.setup.train.epochs = total_epochs;
    return ckpt;
}

Checkpoint train_model(const Dataset& dataset, const TrainSetup& setup, const EpochCallback& on_epoch) {
    return resume_training(dataset, initial_checkpoint(setup), setup.train.epochs, on_epoch);
}

EmbeddingTable embed_dataset(const Checkpoint& ckpt, const Dataset& dataset, const std::vector<std::string>& fovs) {
    ckpt.setup.model.validate();
    const auto& spec = ckpt.setup.patch;
    if (static_cast<int>(spec.channels.size()) != ckpt.setup.model.in_channels)
        throw ConfigError("checkpoint channel list does not match the model input channels");
    for (const auto& ch : spec.channels) {
        const auto& names = dataset.meta().channels;
        if (std::find(names.begin(), names.end(), ch) == names.end())
            throw ConfigError("model channel '" + ch + "' is not present in the dataset");
    }
    for (const auto& f : fovs) {
        const auto& ids = dataset.meta().fov_ids;
        if (std::find(ids.begin(), ids.end(), f) == ids.end()) throw ConfigError("unknown fov '" + f + "'");
    }
    const auto enc = make_encoder(ckpt);
    patch::PatchSource source(dataset, spec);

    std::vector<NodeKey> keys;
    for (const auto& n : dataset.tracks().nodes())
        if (fovs.empty() || std::find(fovs.begin(), fovs.end(), n.fov) != fovs.end()) keys.push_back(n.key());
    std::sort(keys.begin(), keys.end());

    EmbeddingTable t;
    t.feature_dim = ckpt.setup.model.feature_dim();
    t.projection_dim = ckpt.setup.model.projection_dim;
    t.model_checksum = ckpt.checksum();
    t.dataset = fs::absolute(dataset.root()).lexically_normal().string();
    json cfg{{"model", json::parse(ckpt.setup.model.to_json())},
             {"patch", json::parse(spec.to_json())},
             {"epoch", ckpt.epoch},
             {"fovs", fovs}};
    t.config_json = cfg.dump();
    nn::Encoder<float>::Trace tr;
    for (const auto& k : keys) {
        const auto p = source.final_patch(k);
        if (!p.valid) continue;
        enc.forward(p.data.data, tr);
        t.keys.push_back(k);
        t.features.insert(t.features.end(), tr.h.begin(), tr.h.end());
        t.projections.insert(t.projections.end(), tr.z.begin(), tr.z.end());
    }
    t.validate();
    return t;
}

std::string history_to_csv(const std::vector<EpochLog>& history) {
    std::ostringstream os;
    os << "epoch,mean_loss,batches,triplets,active,seconds\n";
    os.precision(9);
    for (const auto& e : history)
        os << e.epoch << ',' << e.mean_loss << ',' << e.batches << ',' << e.triplets << ',' << e.active << ','
           << e.seconds << '\n';
    return os.str();
}

}  // namespace dynaclr::train
