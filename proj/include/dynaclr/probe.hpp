#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dynaclr/analytics.hpp"
#include "dynaclr/dataset_store.hpp"
#include "dynaclr/embedding_table.hpp"

namespace dynaclr::probe {

using analytics::LabeledNode;
using analytics::Matrix;

/// Labels of one type and source, in key order.
std::vector<LabeledNode> labels_from_annotations(const std::vector<AnnotationRecord>& records, LabelType type,
                                                 LabelSource source);

struct Split {
    std::vector<NodeKey> train, eval;
};

/// Stratified by class, grouped by track: a track joins the positive stratum
/// when any of its nodes is positive, and all its nodes land on one side.
Split split_annotations(const std::vector<LabeledNode>& records, double fraction, std::uint64_t seed);

struct ProbeConfig {
    /// Objective: sum of logistic losses + l2 / 2 * |w|^2 (bias unpenalized).
    double l2 = 1.0;
    int max_iterations = 200;
    double tolerance = 1e-6;
};

enum class ProbeStatus { converged, iteration_cap };
std::string to_string(ProbeStatus s);

struct ProbeModel {
    std::vector<double> weights;
    double bias = 0;
    LabelType label_type = LabelType::infection;
    std::vector<NodeKey> train_keys;  // sorted
    double l2 = 1.0;
    int iterations = 0;
    double gradient_norm = 0;
    ProbeStatus status = ProbeStatus::converged;

    double logit(const double* x) const;
    std::string to_json() const;
    static ProbeModel from_json(const std::string& text);
};

/// Rows of `features` aligned with `labels` (same length).
ProbeModel train_probe(const Matrix& features, const std::vector<LabeledNode>& labels, LabelType type,
                       const ProbeConfig& cfg = {});

/// Convenience: looks up each key's feature row in the table.
Matrix gather_features(const EmbeddingTable& table, const std::vector<NodeKey>& keys);

struct Metrics {
    double accuracy = 0;
    double f1 = 0;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t n() const { return tp + fp + tn + fn; }
};

/// Positive class = 1. Throws LeakageError when an evaluation key was used for training.
Metrics evaluate_probe(const ProbeModel& model, const Matrix& features, const std::vector<LabeledNode>& labels);

/// Confusion counts to accuracy and F1 (F1 is 0 when there are no positives at all).
Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn);

struct Prediction {
    NodeKey key;
    int label = 0;
    double probability = 0;
};

std::vector<Prediction> predict_states(const ProbeModel& model, const EmbeddingTable& table);

/// Stable hash of a split, recorded next to metrics.
std::string split_checksum(const Split& split);

}  // namespace dynaclr::probe
