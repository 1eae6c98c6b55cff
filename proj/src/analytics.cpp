#include "dynaclr/analytics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/SVD>

#include "dynaclr/errors.hpp"
#include "dynaclr/patch_pipeline.hpp"

namespace dynaclr::analytics {

std::string to_string(Space s) { return s == Space::features ? "features" : "projection2d"; }

Space space_from_string(const std::string& s) {
    if (s == "features") return Space::features;
    if (s == "projection2d") return Space::projection2d;
    throw ConfigError("unknown embedding space '" + s + "' (expected features or projection2d)");
}

namespace {

KeyedRows rows_from(const EmbeddingTable& t, const std::vector<float>& data, int dim) {
    KeyedRows r;
    r.keys = t.keys;
    r.values.resize(static_cast<Eigen::Index>(t.rows()), dim);
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (int j = 0; j < dim; ++j) r.values(static_cast<Eigen::Index>(i), j) = data[i * dim + j];
    return r;
}

}  // namespace

KeyedRows feature_rows(const EmbeddingTable& table) { return rows_from(table, table.features, table.feature_dim); }

KeyedRows projection_rows(const EmbeddingTable& table) {
    return rows_from(table, table.projections, table.projection_dim);
}

// ---------------------------------------------------------------- smoothness

std::vector<double> distance_from_start(const Matrix& rows) {
    if (rows.rows() < 1) throw ConfigError("distance_from_start needs at least one row");
    Matrix unit = rows;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        const double n = rows.row(i).norm();
        if (!(n > 0)) throw RangeError("zero-norm embedding at row " + std::to_string(i));
        unit.row(i) /= n;
    }
    std::vector<double> d(static_cast<std::size_t>(rows.rows()));
    for (Eigen::Index i = 0; i < rows.rows(); ++i) d[i] = i == 0 ? 0.0 : (unit.row(0) - unit.row(i)).norm();
    return d;
}

double LagStats::standard_error() const {
    if (!stddev || pairs == 0) return 0.0;
    return *stddev / std::sqrt(static_cast<double>(pairs));
}

SmoothnessCurve displacement_at_lag(const KeyedRows& rows, int tau_max, Space space) {
    if (tau_max < 0) throw ConfigError("tau_max must be >= 0");
    if (static_cast<std::size_t>(rows.values.rows()) != rows.keys.size())
        throw ConfigError("row keys and values are not aligned");
    Matrix unit = rows.values;
    for (Eigen::Index i = 0; i < unit.rows(); ++i) {
        const double n = unit.row(i).norm();
        if (!(n > 0)) throw RangeError("zero-norm embedding at row " + std::to_string(i) + " (" + to_string(rows.keys[i]) + ")");
        unit.row(i) /= n;
    }
    // Rows grouped by track, in time order.
    std::map<std::pair<std::string, std::int64_t>, std::map<int, Eigen::Index>> tracks;
    for (std::size_t i = 0; i < rows.keys.size(); ++i)
        tracks[{rows.keys[i].fov, rows.keys[i].track}][rows.keys[i].t] = static_cast<Eigen::Index>(i);

    SmoothnessCurve curve;
    curve.space = space;
    curve.tau_max = tau_max;
    for (int tau = 0; tau <= tau_max; ++tau) {
        LagStats s;
        s.tau = tau;
        double sum = 0, sum_sq = 0;
        for (const auto& [id, frames] : tracks)
            for (const auto& [t, i] : frames) {
                auto it = frames.find(t + tau);
                if (it == frames.end()) continue;
                const double d = tau == 0 ? 0.0 : (unit.row(i) - unit.row(it->second)).norm();
                sum += d;
                sum_sq += d * d;
                ++s.pairs;
            }
        if (s.pairs > 0) {
            const double m = sum / s.pairs;
            s.mean = m;
            s.stddev = std::sqrt(std::max(0.0, sum_sq / s.pairs - m * m));
        }
        curve.lags.push_back(s);
    }
    return curve;
}

SmoothnessCurve displacement_at_lag(const EmbeddingTable& table, int tau_max) {
    return displacement_at_lag(feature_rows(table), tau_max, Space::features);
}

// ---------------------------------------------------------------- PCA and rank

ProjectionResult pca_project(const KeyedRows& rows, int k) {
    const auto n = rows.values.rows(), dim = rows.values.cols();
    if (k < 1) throw ConfigError("k must be >= 1");
    if (k > std::min<Eigen::Index>(n, dim))
        throw ConfigError("k = " + std::to_string(k) + " exceeds min(n, dim) = " + std::to_string(std::min<Eigen::Index>(n, dim)));
    const Eigen::RowVectorXd mean = rows.values.colwise().mean();
    const Matrix centered = rows.values.rowwise() - mean;
    Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& s = svd.singularValues();
    const double total = s.squaredNorm();

    ProjectionResult r;
    r.keys = rows.keys;
    r.mean.assign(mean.data(), mean.data() + dim);
    r.components.resize(k, dim);
    for (int j = 0; j < k; ++j) {
        Eigen::RowVectorXd v = svd.matrixV().col(j).transpose();
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        r.components.row(j) = v;
        r.explained_variance_ratio.push_back(total > 0 ? s(j) * s(j) / total : 0.0);
    }
    r.scores = centered * r.components.transpose();
    return r;
}

ProjectionResult pca_project(const EmbeddingTable& table, int k) { return pca_project(feature_rows(table), k); }

RankResult embedding_rank(const Matrix& rows, double rel_tol) {
    if (!(rel_tol > 0)) throw ConfigError("rel_tol must be > 0");
    RankResult r;
    r.rel_tol = rel_tol;
    if (rows.rows() == 0 || rows.cols() == 0) return r;
    const Matrix centered = rows.rowwise() - rows.colwise().mean();
    Eigen::BDCSVD<Matrix> svd(centered);
    const auto& s = svd.singularValues();
    r.singular_values.assign(s.data(), s.data() + s.size());
    const double smax = s.size() > 0 ? s(0) : 0.0;
    if (!(smax > 0)) return r;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) > smax * rel_tol) ++r.rank;
    return r;
}

RankResult embedding_rank(const EmbeddingTable& table, double rel_tol) {
    return embedding_rank(feature_rows(table).values, rel_tol);
}

// ---------------------------------------------------------------- image features

ImageFeatures compute_image_features(const Volume& patch, const std::vector<std::string>& channels,
                                     const std::string& phase_channel, const std::string& fluor_channel) {
    auto index_of = [&](const std::string& name) {
        auto it = std::find(channels.begin(), channels.end(), name);
        if (it == channels.end()) throw ConfigError("patch has no '" + name + "' channel");
        const int c = static_cast<int>(it - channels.begin());
        if (c >= patch.shape.c) throw ConfigError("channel list is longer than the patch");
        return c;
    };
    const int pc = index_of(phase_channel), fc = index_of(fluor_channel);
    const auto& s = patch.shape;
    const std::size_t n = patch.channel_size();
    ImageFeatures f;

    const float* fl = patch.channel(fc);
    std::size_t above = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (fl[i] > fluor_area_threshold) ++above;
    f.fluor_area = static_cast<double>(above) / n;

    const double cy = (s.y - 1) / 2.0, cx = (s.x - 1) / 2.0;
    const double rmax = std::min(s.y, s.x) / 2.0;
    const int nbins = static_cast<int>(std::floor(rmax));
    std::vector<double> bin_sum(nbins, 0), bin_r(nbins, 0);
    std::vector<std::size_t> bin_n(nbins, 0);
    for (int z = 0; z < s.z; ++z)
        for (int y = 0; y < s.y; ++y)
            for (int x = 0; x < s.x; ++x) {
                const double r = std::hypot(y - cy, x - cx);
                if (r >= rmax) continue;
                const int b = static_cast<int>(r);
                bin_sum[b] += patch.at(fc, z, y, x);
                bin_r[b] += r;
                ++bin_n[b];
            }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (int b = 0; b < nbins; ++b) {
        if (bin_n[b] == 0) continue;
        const double r = bin_r[b] / bin_n[b], v = bin_sum[b] / bin_n[b];
        sx += r;
        sy += v;
        sxx += r * r;
        sxy += r * v;
        ++m;
    }
    const double den = m * sxx - sx * sx;
    f.fluor_radial_slope = m >= 2 && den > 0 ? (m * sxy - sx * sy) / den : 0.0;

    const float* ph = patch.channel(pc);
    std::vector<float> pv(ph, ph + n);
    f.phase_iqr = patch::percentile(pv, 75.0) - patch::percentile(pv, 25.0);
    double mean = 0;
    for (float v : pv) mean += v;
    mean /= n;
    double var = 0;
    for (float v : pv) var += (v - mean) * (v - mean);
    f.phase_std = std::sqrt(var / n);
    return f;
}

// ---------------------------------------------------------------- correlation

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double r = (i + j) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

namespace {

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0) || !(sbb > 0)) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<double> column(const Matrix& m, Eigen::Index j) {
    std::vector<double> c(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) c[i] = m(i, j);
    return c;
}

}  // namespace

std::vector<std::vector<std::optional<double>>> correlate_features_with_pcs(const Matrix& features, const Matrix& scores) {
    if (features.rows() != scores.rows()) throw ConfigError("features and scores must have the same rows");
    std::vector<std::vector<double>> score_ranks;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) score_ranks.push_back(average_ranks(column(scores, j)));
    std::vector<std::vector<std::optional<double>>> out;
    for (Eigen::Index f = 0; f < features.cols(); ++f) {
        const auto fr = average_ranks(column(features, f));
        std::vector<std::optional<double>> row;
        for (const auto& sr : score_ranks) row.push_back(features.rows() < 2 ? std::nullopt : pearson(fr, sr));
        out.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------- infection dynamics

std::map<std::string, std::vector<FractionPoint>> infection_fraction_timeseries(const std::vector<LabeledNode>& labels,
                                                                                const DatasetMeta& meta) {
    std::map<std::string, std::map<int, FractionPoint>> acc;
    for (const auto& l : labels) {
        if (l.label != 0 && l.label != 1)
            throw RangeError("label for " + to_string(l.key) + " is " + std::to_string(l.label) + ", expected 0 or 1");
        auto it = meta.conditions.find(l.key.fov);
        if (it == meta.conditions.end()) throw IntegrityError("fov '" + l.key.fov + "' has no condition");
        auto& p = acc[it->second][l.key.t];
        p.t = l.key.t;
        ++p.labeled;
        p.infected += l.label;
    }
    std::map<std::string, std::vector<FractionPoint>> out;
    for (auto& [cond, frames] : acc)
        for (auto& [t, p] : frames) {
            p.hpi_minutes = meta.t0_hpi_minutes + t * meta.dt_minutes;
            p.fraction = static_cast<double>(p.infected) / p.labeled;
            out[cond].push_back(p);
        }
    return out;
}

// ---------------------------------------------------------------- external projections

KeyedRows load_projection_csv(const std::filesystem::path& path) {
    std::istringstream is(read_text_file(path));
    std::string line;
    std::getline(is, line);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "fov_id,track_id,t,x,y") throw ParseError(path.filename().string(), "expected header fov_id,track_id,t,x,y");
    std::vector<std::pair<NodeKey, std::array<double, 2>>> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 5) throw ParseError(path.filename().string(), "line " + std::to_string(lineno) + " needs 5 fields");
        try {
            rows.push_back({{f[0], std::stoll(f[1]), std::stoi(f[2])}, {std::stod(f[3]), std::stod(f[4])}});
        } catch (const std::logic_error&) {
            throw ParseError(path.filename().string(), "line " + std::to_string(lineno) + " is not numeric");
        }
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    KeyedRows out;
    out.values.resize(static_cast<Eigen::Index>(rows.size()), 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (i > 0 && rows[i].first == rows[i - 1].first)
            throw IntegrityError("duplicate projection row for " + to_string(rows[i].first));
        out.keys.push_back(rows[i].first);
        out.values(static_cast<Eigen::Index>(i), 0) = rows[i].second[0];
        out.values(static_cast<Eigen::Index>(i), 1) = rows[i].second[1];
    }
    return out;
}

KeyedRows align_rows(const KeyedRows& coords, const std::vector<NodeKey>& keys) {
    KeyedRows out;
    out.keys = keys;
    out.values.resize(static_cast<Eigen::Index>(keys.size()), coords.values.cols());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        auto it = std::lower_bound(coords.keys.begin(), coords.keys.end(), keys[i]);
        if (it == coords.keys.end() || *it != keys[i]) throw IntegrityError("no coordinates for " + to_string(keys[i]));
        out.values.row(static_cast<Eigen::Index>(i)) = coords.values.row(it - coords.keys.begin());
    }
    return out;
}

}  // namespace dynaclr::analytics
