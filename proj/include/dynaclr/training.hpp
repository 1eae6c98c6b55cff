#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/embedding_table.hpp"
#include "dynaclr/nn/adamw.hpp"
#include "dynaclr/nn/encoder.hpp"
#include "dynaclr/patch_pipeline.hpp"
#include "dynaclr/sampler.hpp"

namespace dynaclr::train {

struct TrainConfig {
    int batch_size = 64;
    nn::AdamWConfig optimizer;
    double margin = 0.5;
    int epochs = 10;
    std::uint64_t seed = 0;
    /// Write an intermediate checkpoint every n epochs; 0 disables.
    int checkpoint_every = 0;
    /// Cap on batches per epoch; 0 means one full pass over the anchors.
    int max_batches_per_epoch = 0;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

/// Everything that determines a training run.
struct TrainSetup {
    nn::ModelConfig model;
    sampler::SamplerConfig sampler;
    TrainConfig train;
    patch::AugmentationConfig augmentation;
    patch::PatchSpec patch;

    void validate() const;
};

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0;  // per triplet
    int batches = 0;
    int triplets = 0;
    int active = 0;
    double seconds = 0;
};

struct Checkpoint {
    TrainSetup setup;
    int epoch = 0;  // completed epochs
    std::int64_t step = 0;
    std::vector<nn::ParamInfo> manifest;
    std::vector<float> params;
    std::vector<float> adam_m, adam_v;
    std::vector<EpochLog> history;

    std::string checksum() const;
};

/// 16-hex-digit FNV-1a hash over the float32 parameter bytes.
std::string params_checksum(std::span<const float> params);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Freshly initialized model with zeroed optimizer state.
Checkpoint initial_checkpoint(const TrainSetup& setup);

nn::Encoder<float> make_encoder(const Checkpoint& ckpt);

using EpochCallback = std::function<void(const Checkpoint&, const EpochLog&)>;

/// Trains from scratch for setup.train.epochs epochs.
Checkpoint train_model(const Dataset& dataset, const TrainSetup& setup, const EpochCallback& on_epoch = {});

/// Continues `ckpt` until `total_epochs` epochs are complete. Batches depend
/// only on (seed, epoch, batch), so a resumed run replays a straight run.
Checkpoint resume_training(const Dataset& dataset, Checkpoint ckpt, int total_epochs, const EpochCallback& on_epoch = {});

/// Un-augmented embeddings of every valid node, rows in key order.
EmbeddingTable embed_dataset(const Checkpoint& ckpt, const Dataset& dataset, const std::vector<std::string>& fovs = {});

/// Loss log as CSV: epoch,mean_loss,batches,triplets,active,seconds.
std::string history_to_csv(const std::vector<EpochLog>& history);

}  // namespace dynaclr::train
