#include "dynaclr/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

#include "dynaclr/errors.hpp"
#include "dynaclr/rng.hpp"

using nlohmann::json;

namespace dynaclr::probe {

std::vector<LabeledNode> labels_from_annotations(const std::vector<AnnotationRecord>& records, LabelType type,
                                                 LabelSource source) {
    std::vector<LabeledNode> out;
    for (const auto& r : records)
        if (r.label_type == type && r.source == source) out.push_back({{r.fov, r.track, r.t}, r.value});
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.key < b.key; });
    return out;
}

Split split_annotations(const std::vector<LabeledNode>& records, double fraction, std::uint64_t seed) {
    if (!(fraction > 0) || !(fraction < 1))
        throw ConfigError("split fraction must lie strictly between 0 and 1 (got " + std::to_string(fraction) + ")");
    std::size_t count[2] = {0, 0};
    std::map<std::pair<std::string, std::int64_t>, int> track_class;
    for (const auto& r : records) {
        if (r.label != 0 && r.label != 1) throw RangeError("labels must be binary; " + to_string(r.key) + " has " + std::to_string(r.label));
        ++count[r.label];
        auto& c = track_class[{r.key.fov, r.key.track}];
        c = std::max(c, r.label);
    }
    if (count[0] < 2 || count[1] < 2)
        throw ValidationError("split needs at least 2 records per class (have " + std::to_string(count[0]) + " negative, " +
                              std::to_string(count[1]) + " positive)");

    std::set<std::pair<std::string, std::int64_t>> train_tracks;
    for (int cls : {0, 1}) {
        std::vector<std::pair<std::string, std::int64_t>> stratum;
        for (const auto& [id, c] : track_class)
            if (c == cls) stratum.push_back(id);
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(cls)}));
        for (std::size_t i = stratum.size(); i > 1; --i) std::swap(stratum[i - 1], stratum[uniform_index(rng, i)]);
        const auto take = static_cast<std::size_t>(std::llround(fraction * stratum.size()));
        for (std::size_t i = 0; i < take; ++i) train_tracks.insert(stratum[i]);
    }
    Split s;
    for (const auto& r : records) (train_tracks.count({r.key.fov, r.key.track}) ? s.train : s.eval).push_back(r.key);
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.eval.begin(), s.eval.end());
    if (s.train.empty()) throw ValidationError("split leaves the training side empty");
    if (s.eval.empty()) throw ValidationError("split leaves the evaluation side empty");
    return s;
}

std::string to_string(ProbeStatus s) { return s == ProbeStatus::converged ? "converged" : "iteration_cap"; }

double ProbeModel::logit(const double* x) const {
    double v = bias;
    for (std::size_t j = 0; j < weights.size(); ++j) v += weights[j] * x[j];
    return v;
}

std::string ProbeModel::to_json() const {
    json keys = json::array();
    for (const auto& k : train_keys) keys.push_back({k.fov, k.track, k.t});
    json j{{"label_type", dynaclr::to_string(label_type)},
           {"weights", weights},
           {"bias", bias},
           {"l2", l2},
           {"iterations", iterations},
           {"gradient_norm", gradient_norm},
           {"status", to_string(status)},
           {"train_keys", keys}};
    return j.dump();
}

ProbeModel ProbeModel::from_json(const std::string& text) {
    ProbeModel m;
    try {
        const json j = json::parse(text);
        m.label_type = label_type_from_string(j.at("label_type").get<std::string>());
        m.weights = j.at("weights").get<std::vector<double>>();
        m.bias = j.at("bias").get<double>();
        m.l2 = j.value("l2", 1.0);
        m.iterations = j.value("iterations", 0);
        m.gradient_norm = j.value("gradient_norm", 0.0);
        m.status = j.value("status", std::string("converged")) == "converged" ? ProbeStatus::converged
                                                                               : ProbeStatus::iteration_cap;
        for (const auto& k : j.at("train_keys"))
            m.train_keys.push_back({k.at(0).get<std::string>(), k.at(1).get<std::int64_t>(), k.at(2).get<int>()});
    } catch (const json::exception& e) {
        throw ParseError("probe", e.what());
    }
    for (double w : m.weights)
        if (!std::isfinite(w)) throw IntegrityError("probe has non-finite weights");
    std::sort(m.train_keys.begin(), m.train_keys.end());
    return m;
}

namespace {

double sigmoid(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

// log(1 + exp(v)) without overflow.
double softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

}  // namespace

ProbeModel train_probe(const Matrix& X, const std::vector<LabeledNode>& labels, LabelType type, const ProbeConfig& cfg) {
    if (static_cast<std::size_t>(X.rows()) != labels.size()) throw ConfigError("features and labels are not aligned");
    if (labels.empty()) throw ValidationError("no training rows");
    if (cfg.l2 < 0) throw ConfigError("l2 must be >= 0");
    const Eigen::Index n = X.rows(), d = X.cols();
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (labels[i].label != 0 && labels[i].label != 1) throw RangeError("labels must be binary");
        y(i) = labels[i].label;
    }
    // Augmented design [X, 1]; parameters theta = [w; b].
    Matrix A(n, d + 1);
    A.leftCols(d) = X;
    A.col(d).setOnes();
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
    Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, cfg.l2);
    reg(d) = 0;

    auto objective = [&](const Eigen::VectorXd& th) {
        const Eigen::VectorXd f = A * th;
        double v = 0;
        for (Eigen::Index i = 0; i < n; ++i) v += softplus(f(i)) - y(i) * f(i);
        return v + 0.5 * (reg.array() * th.array().square()).sum();
    };

    ProbeModel m;
    m.label_type = type;
    m.l2 = cfg.l2;
    m.status = ProbeStatus::iteration_cap;
    double obj = objective(theta);
    for (int it = 0; it < cfg.max_iterations; ++it) {
        const Eigen::VectorXd f = A * theta;
        Eigen::VectorXd p(n), s(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            p(i) = sigmoid(f(i));
            s(i) = p(i) * (1 - p(i));
        }
        const Eigen::VectorXd grad = A.transpose() * (p - y) + reg.cwiseProduct(theta);
        m.gradient_norm = grad.norm();
        m.iterations = it;
        if (m.gradient_norm < cfg.tolerance) {
            m.status = ProbeStatus::converged;
            break;
        }
        Eigen::MatrixXd H = A.transpose() * s.asDiagonal() * A;
        H.diagonal() += reg;
        H.diagonal().array() += 1e-10 * (1.0 + H.diagonal().cwiseAbs().maxCoeff());
        const Eigen::VectorXd step = H.ldlt().solve(grad);
        // Backtracking keeps every iteration a descent step.
        double t = 1.0;
        Eigen::VectorXd next = theta - step;
        double next_obj = objective(next);
        while (next_obj > obj - 1e-4 * t * grad.dot(step) && t > 1e-10) {
            t *= 0.5;
            next = theta - t * step;
            next_obj = objective(next);
        }
        if (!(next_obj <= obj)) break;
        theta = next;
        obj = next_obj;
        m.iterations = it + 1;
    }
    if (m.status != ProbeStatus::converged) {
        const Eigen::VectorXd f = A * theta;
        Eigen::VectorXd p(n);
        for (Eigen::Index i = 0; i < n; ++i) p(i) = sigmoid(f(i));
        const Eigen::VectorXd grad = A.transpose() * (p - y) + reg.cwiseProduct(theta);
        m.gradient_norm = grad.norm();
        if (m.gradient_norm < cfg.tolerance) m.status = ProbeStatus::converged;
    }
    m.weights.assign(theta.data(), theta.data() + d);
    m.bias = theta(d);
    for (const auto& l : labels) m.train_keys.push_back(l.key);
    std::sort(m.train_keys.begin(), m.train_keys.end());
    return m;
}

Matrix gather_features(const EmbeddingTable& table, const std::vector<NodeKey>& keys) {
    Matrix X(static_cast<Eigen::Index>(keys.size()), table.feature_dim);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const auto row = table.find(keys[i]);
        if (!row) throw IntegrityError("no embedding for " + to_string(keys[i]));
        const auto f = table.feature(*row);
        for (int j = 0; j < table.feature_dim; ++j) X(static_cast<Eigen::Index>(i), j) = f[j];
    }
    return X;
}

Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
    Metrics m;
    m.tp = tp;
    m.fp = fp;
    m.tn = tn;
    m.fn = fn;
    const std::size_t n = tp + fp + tn + fn;
    m.accuracy = n > 0 ? static_cast<double>(tp + tn) / n : 0.0;
    const std::size_t den = 2 * tp + fp + fn;
    m.f1 = den > 0 ? 2.0 * tp / den : 0.0;
    return m;
}

Metrics evaluate_probe(const ProbeModel& model, const Matrix& X, const std::vector<LabeledNode>& labels) {
    if (static_cast<std::size_t>(X.rows()) != labels.size()) throw ConfigError("features and labels are not aligned");
    if (static_cast<std::size_t>(X.cols()) != model.weights.size())
        throw ConfigError("feature dimension " + std::to_string(X.cols()) + " does not match the probe (" +
                          std::to_string(model.weights.size()) + ")");
    for (const auto& l : labels)
        if (std::binary_search(model.train_keys.begin(), model.train_keys.end(), l.key))
            throw LeakageError("evaluation key " + to_string(l.key) + " was used to train the probe");
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const int pred = model.logit(X.row(i).data()) > 0 ? 1 : 0;
        const int truth = labels[i].label;
        if (pred == 1 && truth == 1) ++tp;
        else if (pred == 1) ++fp;
        else if (truth == 0) ++tn;
        else ++fn;
    }
    return metrics_from_counts(tp, fp, tn, fn);
}

std::vector<Prediction> predict_states(const ProbeModel& model, const EmbeddingTable& table) {
    if (static_cast<std::size_t>(table.feature_dim) != model.weights.size())
        throw ConfigError("embedding feature_dim " + std::to_string(table.feature_dim) + " does not match the probe (" +
                          std::to_string(model.weights.size()) + ")");
    std::vector<Prediction> out;
    out.reserve(table.rows());
    std::vector<double> x(static_cast<std::size_t>(table.feature_dim));
    for (std::size_t i = 0; i < table.rows(); ++i) {
        const auto f = table.feature(i);
        std::copy(f.begin(), f.end(), x.begin());
        const double z = model.logit(x.data());
        out.push_back({table.keys[i], z > 0 ? 1 : 0, sigmoid(z)});
    }
    return out;
}

std::string split_checksum(const Split& split) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& k : split.train) mix("T" + to_string(k) + ";");
    for (const auto& k : split.eval) mix("E" + to_string(k) + ";");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace dynaclr::probe
