#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dynaclr/errors.hpp"
#include "dynaclr/probe.hpp"
#include "dynaclr/rng.hpp"

using namespace dynaclr;
using namespace dynaclr::probe;

namespace {

struct Toy {
    Matrix x;
    std::vector<LabeledNode> labels;
};

/// Two Gaussian classes; each track holds 4 consecutive frames of one class.
Toy toy(int tracks_per_class, int dim, double separation, std::uint64_t seed) {
    Rng rng(seed);
    Toy t;
    const int n = 2 * tracks_per_class * 4;
    t.x = Matrix(n, dim);
    int row = 0;
    for (int cls : {0, 1})
        for (int tr = 0; tr < tracks_per_class; ++tr)
            for (int f = 0; f < 4; ++f, ++row) {
                for (int k = 0; k < dim; ++k) t.x(row, k) = normal(rng) + (k == 0 ? separation * (cls ? 1 : -1) : 0.0);
                t.labels.push_back({{cls ? "B1" : "A1", tr + 1, f}, cls});
            }
    return t;
}

Matrix rows_of(const Toy& t, const std::vector<NodeKey>& keys) {
    Matrix m(static_cast<Eigen::Index>(keys.size()), t.x.cols());
    for (std::size_t i = 0; i < keys.size(); ++i)
        for (std::size_t j = 0; j < t.labels.size(); ++j)
            if (t.labels[j].key == keys[i]) m.row(static_cast<Eigen::Index>(i)) = t.x.row(static_cast<Eigen::Index>(j));
    return m;
}

std::vector<LabeledNode> labels_of(const Toy& t, const std::vector<NodeKey>& keys) {
    std::vector<LabeledNode> out;
    for (const auto& k : keys)
        for (const auto& l : t.labels)
            if (l.key == k) out.push_back(l);
    return out;
}

}  // namespace

TEST(Labels, FilteredByTypeAndSourceInKeyOrder) {
    const std::vector<AnnotationRecord> recs{{"B1", 1, 0, LabelType::infection, 1, LabelSource::ground_truth},
                                             {"A1", 1, 0, LabelType::infection, 0, LabelSource::ground_truth},
                                             {"A1", 1, 0, LabelType::division, 1, LabelSource::ground_truth},
                                             {"A1", 2, 0, LabelType::infection, 1, LabelSource::human}};
    const auto l = labels_from_annotations(recs, LabelType::infection, LabelSource::ground_truth);
    ASSERT_EQ(l.size(), 2u);
    EXPECT_EQ(l[0].key, (NodeKey{"A1", 1, 0}));
    EXPECT_EQ(l[1].label, 1);
}

TEST(Split, GroupedByTrackStratifiedAndDeterministic) {
    const auto t = toy(10, 3, 1.0, 1);
    const auto s = split_annotations(t.labels, 0.5, 42);
    std::set<std::pair<std::string, std::int64_t>> train_tracks, eval_tracks;
    for (const auto& k : s.train) train_tracks.insert({k.fov, k.track});
    for (const auto& k : s.eval) eval_tracks.insert({k.fov, k.track});
    for (const auto& id : train_tracks) EXPECT_FALSE(eval_tracks.contains(id));
    EXPECT_EQ(s.train.size() + s.eval.size(), t.labels.size());
    int pos_train = 0;
    for (const auto& id : train_tracks) pos_train += id.first == "B1";
    EXPECT_EQ(pos_train, 5);
    EXPECT_EQ(train_tracks.size(), 10u);
    const auto again = split_annotations(t.labels, 0.5, 42);
    EXPECT_EQ(split_checksum(again), split_checksum(s));
    EXPECT_NE(split_checksum(split_annotations(t.labels, 0.5, 43)), split_checksum(s));
    EXPECT_THROW(split_annotations(t.labels, 1.0, 1), ConfigError);
    EXPECT_THROW(split_annotations(t.labels, 0.0, 1), ConfigError);
    EXPECT_THROW(split_annotations({{{"A1", 1, 0}, 0}, {{"A1", 2, 0}, 0}, {{"A1", 3, 0}, 1}}, 0.5, 1), ValidationError);
}

TEST(Probe, SolutionSatisfiesTheOptimalityCondition) {
    const auto t = toy(12, 4, 0.8, 2);
    ProbeConfig cfg;
    cfg.l2 = 1.0;
    const auto m = train_probe(t.x, t.labels, LabelType::infection, cfg);
    EXPECT_EQ(m.status, ProbeStatus::converged);
    // Gradient of sum_i logloss + l2/2 |w|^2 with an unpenalized bias.
    Eigen::VectorXd gw = cfg.l2 * Eigen::Map<const Eigen::VectorXd>(m.weights.data(), 4);
    double gb = 0;
    for (Eigen::Index i = 0; i < t.x.rows(); ++i) {
        double z = m.bias;
        for (int k = 0; k < 4; ++k) z += m.weights[k] * t.x(i, k);
        const double p = 1 / (1 + std::exp(-z));
        const double r = p - t.labels[i].label;
        gw += r * t.x.row(i).transpose();
        gb += r;
    }
    EXPECT_LT(gw.norm(), 1e-5);
    EXPECT_LT(std::abs(gb), 1e-5);
    EXPECT_GT(m.weights[0], 0.0);
}

TEST(Probe, SeparableDataIsClassifiedAndMetricsAreConsistent) {
    const auto t = toy(20, 5, 3.0, 3);
    const auto s = split_annotations(t.labels, 0.5, 1);
    const auto m = train_probe(rows_of(t, s.train), labels_of(t, s.train), LabelType::infection);
    EXPECT_EQ(m.train_keys, s.train);
    const auto met = evaluate_probe(m, rows_of(t, s.eval), labels_of(t, s.eval));
    EXPECT_EQ(met.n(), s.eval.size());
    EXPECT_GT(met.accuracy, 0.95);
    EXPECT_GT(met.f1, 0.95);
    EXPECT_THROW(evaluate_probe(m, rows_of(t, s.train), labels_of(t, s.train)), LeakageError);
}

TEST(Probe, JsonRoundTripPreservesPredictions) {
    const auto t = toy(6, 3, 1.0, 4);
    const auto m = train_probe(t.x, t.labels, LabelType::division);
    const auto back = ProbeModel::from_json(m.to_json());
    EXPECT_EQ(back.weights, m.weights);
    EXPECT_EQ(back.bias, m.bias);
    EXPECT_EQ(back.label_type, LabelType::division);
    EXPECT_EQ(back.train_keys, m.train_keys);
    EXPECT_THROW(ProbeModel::from_json("{"), ParseError);
}

TEST(Probe, PredictStatesUsesTheLogistic) {
    const auto t = toy(6, 2, 2.0, 5);
    const auto m = train_probe(t.x, t.labels, LabelType::infection);
    EmbeddingTable table;
    table.feature_dim = 2;
    table.projection_dim = 1;
    for (Eigen::Index i = 0; i < t.x.rows(); ++i) {
        table.keys.push_back(t.labels[i].key);
        table.features.push_back(static_cast<float>(t.x(i, 0)));
        table.features.push_back(static_cast<float>(t.x(i, 1)));
        table.projections.push_back(0);
    }
    const auto preds = predict_states(m, table);
    ASSERT_EQ(preds.size(), table.rows());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double x[2] = {table.features[2 * i], table.features[2 * i + 1]};
        const double p = 1 / (1 + std::exp(-m.logit(x)));
        EXPECT_NEAR(preds[i].probability, p, 1e-12);
        EXPECT_EQ(preds[i].label, m.logit(x) > 0 ? 1 : 0);
    }
    table.feature_dim = 1;
    EXPECT_THROW(predict_states(m, table), ConfigError);
}

TEST(Probe, RejectsMisalignedOrNonBinaryInput) {
    const auto t = toy(3, 2, 1.0, 6);
    EXPECT_THROW(train_probe(t.x.topRows(3), t.labels, LabelType::infection), ConfigError);
    auto bad = t.labels;
    bad[0].label = 3;
    EXPECT_THROW(train_probe(t.x, bad, LabelType::infection), RangeError);
    ProbeConfig neg;
    neg.l2 = -1;
    EXPECT_THROW(train_probe(t.x, t.labels, LabelType::infection, neg), ConfigError);
}

TEST(Metrics, FromCountsOracle) {
    const auto m = metrics_from_counts(8, 2, 9, 1);
    EXPECT_DOUBLE_EQ(m.accuracy, 17.0 / 20.0);
    EXPECT_DOUBLE_EQ(m.f1, 16.0 / 19.0);
    EXPECT_EQ(metrics_from_counts(0, 0, 5, 0).f1, 0.0);
    EXPECT_EQ(metrics_from_counts(0, 0, 5, 0).accuracy, 1.0);
}

TEST(Gather, LooksUpRowsByKey) {
    EmbeddingTable table;
    table.keys = {{"A1", 1, 0}, {"A1", 1, 1}};
    table.feature_dim = 2;
    table.projection_dim = 1;
    table.features = {1, 2, 3, 4};
    table.projections = {0, 0};
    const auto m = gather_features(table, {{"A1", 1, 1}});
    EXPECT_EQ(m(0, 1), 4.0);
    EXPECT_THROW(gather_features(table, {{"A1", 2, 0}}), IntegrityError);
}
