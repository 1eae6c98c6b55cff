#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dynaclr/errors.hpp"
#include "dynaclr/nn/layers.hpp"
#include "dynaclr/nn/params.hpp"
#include "dynaclr/types.hpp"

namespace dynaclr::nn {

/// Encoder geometry: anisotropic 3D stem whose axial output is folded into
/// channels, a ConvNeXt-style 2D backbone, and a 2-layer projection head.
struct ModelConfig {
    int in_channels = 2;
    Size3 stem_kernel{5, 4, 4};
    std::string backbone_scale = "desk";
    std::vector<int> depths{1, 1, 2, 1};
    std::vector<int> widths{24, 48, 96, 192};
    int projection_dim = 32;
    Size3 input_size{5, 32, 32};
    int dw_kernel = 7;
    int mlp_ratio = 4;
    double layer_scale_init = 1e-6;
    double init_std = 0.02;

    static ModelConfig desk(int in_channels = 2);
    static ModelConfig tiny(int in_channels = 2);

    int feature_dim() const { return widths.back(); }
    int axial_out() const { return input_size.z / stem_kernel.z; }
    int stem_channels() const { return widths.front() / axial_out(); }
    std::size_t input_numel() const {
        return static_cast<std::size_t>(in_channels) * input_size.z * input_size.y * input_size.x;
    }

    /// Throws ConfigError on any divisibility or width mismatch.
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

inline ModelConfig ModelConfig::desk(int in_channels) {
    ModelConfig c;
    c.in_channels = in_channels;
    return c;
}

inline ModelConfig ModelConfig::tiny(int in_channels) {
    ModelConfig c;
    c.in_channels = in_channels;
    c.backbone_scale = "tiny";
    c.depths = {3, 3, 9, 3};
    c.widths = {96, 192, 384, 768};
    c.input_size = {15, 128, 128};
    return c;
}

inline void ModelConfig::validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (depths.size() != widths.size() || depths.empty()) throw ConfigError("depths and widths must have equal, non-zero length");
    if (stem_kernel.z < 1 || stem_kernel.y < 1 || stem_kernel.x < 1) throw ConfigError("stem kernel must be positive");
    if (input_size.z % stem_kernel.z != 0)
        throw ConfigError("input Z = " + std::to_string(input_size.z) + " is not divisible by stem kernel z = " +
                          std::to_string(stem_kernel.z));
    if (input_size.y % stem_kernel.y != 0 || input_size.x % stem_kernel.x != 0)
        throw ConfigError("input Y/X must be divisible by the lateral stem stride");
    if (widths.front() % axial_out() != 0)
        throw ConfigError("first backbone width must be divisible by the folded axial extent");
    const int down = 1 << (widths.size() - 1);
    const int h = input_size.y / stem_kernel.y, w = input_size.x / stem_kernel.x;
    if (h % down != 0 || w % down != 0 || h < down || w < down)
        throw ConfigError("stem output is not divisible by the backbone downsampling factor");
    if (projection_dim < 1) throw ConfigError("projection_dim must be >= 1");
    if (dw_kernel < 1 || dw_kernel % 2 == 0) throw ConfigError("depthwise kernel must be odd");
}

template <class T>
class Encoder {
public:
    struct BlockTrace {
        std::vector<T> x_in, dw_out, ln_xhat, ln_rstd, ln_out, pre_act, act, mlp_out;
    };
    struct StageTrace {
        int h = 0, w = 0, c = 0;
        // downsample (stages > 0)
        std::vector<T> ds_in, ds_xhat, ds_rstd, ds_ln_out, ds_cols;
        std::vector<BlockTrace> blocks;
        std::vector<T> out;
    };
    /// Activations of one forward pass over one sample.
    struct Trace {
        std::vector<T> input, stem_cols, stem_out, stem_map, stem_xhat, stem_rstd;
        std::vector<StageTrace> stages;
        std::vector<T> pooled, h_xhat, h_rstd, h, head_pre, head_act, z;
    };

    explicit Encoder(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build();
    }

    Encoder(ModelConfig cfg, std::uint64_t seed) : Encoder(std::move(cfg)) { initialize(seed); }

    const ModelConfig& config() const noexcept { return cfg_; }
    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }

    /// Truncated-normal weights, zero biases, unit norm scales, small layer scales.
    void initialize(std::uint64_t seed) {
        Rng rng(seed);
        for (std::size_t i = 0; i < params_.infos().size(); ++i) {
            const auto& info = params_.infos()[i];
            const auto& n = info.name;
            if (info.decay) {
                params_.trunc_normal(i, cfg_.init_std, rng);
            } else if (n.ends_with(".gamma")) {
                params_.fill(i, static_cast<T>(cfg_.layer_scale_init));
            } else if (n.ends_with("norm.weight")) {
                params_.fill(i, T(1));
            } else {
                params_.fill(i, T(0));
            }
        }
    }

    template <class U>
    Encoder<U> cast() const {
        Encoder<U> out(cfg_);
        const auto src = params_.values();
        auto dst = out.params().values();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<U>(src[i]);
        return out;
    }

    /// Forward pass of one sample laid out C x Z x Y x X. Results in tr.h, tr.z.
    void forward(std::span<const T> x, Trace& tr) const {
        if (x.size() != cfg_.input_numel())
            throw ConfigError("input has " + std::to_string(x.size()) + " values, model expects " +
                              std::to_string(cfg_.input_numel()));
        const auto& P = params_;
        tr.input.assign(x.begin(), x.end());

        // Stem: non-overlapping 3D patchify, axial output folded into channels.
        const Size3 k = cfg_.stem_kernel, in = cfg_.input_size;
        const int zo = in.z / k.z, yo = in.y / k.y, xo = in.x / k.x;
        const int kk = cfg_.in_channels * k.z * k.y * k.x;
        const int cs = cfg_.stem_channels();
        const int rows = zo * yo * xo;
        tr.stem_cols.resize(static_cast<std::size_t>(rows) * kk);
        gather_stem(x.data(), tr.stem_cols.data());
        tr.stem_out.resize(static_cast<std::size_t>(rows) * cs);
        linear_forward(tr.stem_cols.data(), rows, kk, P.data(ix_.stem_w), P.data(ix_.stem_b), cs, tr.stem_out.data());
        const int c0 = cfg_.widths[0];
        const int pos = yo * xo;
        tr.stem_map.resize(static_cast<std::size_t>(pos) * c0);
        for (int z = 0; z < zo; ++z)
            for (int p = 0; p < pos; ++p)
                for (int c = 0; c < cs; ++c)
                    tr.stem_map[static_cast<std::size_t>(p) * c0 + c * zo + z] =
                        tr.stem_out[(static_cast<std::size_t>(z) * pos + p) * cs + c];
        std::vector<T> cur(tr.stem_map.size());
        tr.stem_xhat.resize(cur.size());
        tr.stem_rstd.resize(static_cast<std::size_t>(pos));
        layer_norm_forward(tr.stem_map.data(), pos, c0, P.data(ix_.stem_norm_w), P.data(ix_.stem_norm_b), cur.data(),
                           tr.stem_xhat.data(), tr.stem_rstd.data());

        int h = yo, w = xo, c = c0;
        tr.stages.resize(cfg_.widths.size());
        for (std::size_t s = 0; s < cfg_.widths.size(); ++s) {
            auto& st = tr.stages[s];
            const auto& sx = ix_.stages[s];
            if (s > 0) {
                const int cout = cfg_.widths[s];
                const int n = h * w;
                st.ds_in = cur;
                st.ds_xhat.resize(cur.size());
                st.ds_rstd.resize(static_cast<std::size_t>(n));
                st.ds_ln_out.resize(cur.size());
                layer_norm_forward(cur.data(), n, c, P.data(sx.ds_norm_w), P.data(sx.ds_norm_b), st.ds_ln_out.data(),
                                   st.ds_xhat.data(), st.ds_rstd.data());
                st.ds_cols.resize(cur.size());
                patchify_gather(st.ds_ln_out.data(), h, w, c, 2, st.ds_cols.data());
                h /= 2;
                w /= 2;
                cur.assign(static_cast<std::size_t>(h) * w * cout, T(0));
                linear_forward(st.ds_cols.data(), h * w, 4 * c, P.data(sx.ds_w), P.data(sx.ds_b), cout, cur.data());
                c = cout;
            }
            st.h = h;
            st.w = w;
            st.c = c;
            st.blocks.resize(sx.blocks.size());
            for (std::size_t b = 0; b < sx.blocks.size(); ++b) block_forward(sx.blocks[b], h, w, c, cur, st.blocks[b]);
            st.out = cur;
        }

        // Global average pool, final norm -> h; projection head -> z.
        const int n = h * w;
        tr.pooled.assign(static_cast<std::size_t>(c), T(0));
        for (int p = 0; p < n; ++p)
            for (int ch = 0; ch < c; ++ch) tr.pooled[ch] += cur[static_cast<std::size_t>(p) * c + ch];
        for (auto& v : tr.pooled) v /= n;
        tr.h.resize(static_cast<std::size_t>(c));
        tr.h_xhat.resize(static_cast<std::size_t>(c));
        tr.h_rstd.resize(1);
        layer_norm_forward(tr.pooled.data(), 1, c, P.data(ix_.norm_w), P.data(ix_.norm_b), tr.h.data(), tr.h_xhat.data(),
                           tr.h_rstd.data());
        tr.head_pre.resize(static_cast<std::size_t>(c));
        linear_forward(tr.h.data(), 1, c, P.data(ix_.fc1_w), P.data(ix_.fc1_b), c, tr.head_pre.data());
        tr.head_act.resize(static_cast<std::size_t>(c));
        for (int i = 0; i < c; ++i) tr.head_act[i] = std::max(tr.head_pre[i], T(0));
        tr.z.resize(static_cast<std::size_t>(cfg_.projection_dim));
        linear_forward(tr.head_act.data(), 1, c, P.data(ix_.fc2_w), P.data(ix_.fc2_b), cfg_.projection_dim, tr.z.data());
    }

    /// Backpropagates dL/dh and dL/dz (either may be empty). Accumulates into
    /// `grads` (same layout as params) when non-empty; writes dL/dx into `dx`
    /// when non-empty.
    void backward(const Trace& tr, std::span<const T> dh_in, std::span<const T> dz, std::span<T> grads,
                  std::span<T> dx) const {
        const auto& P = params_;
        std::vector<T> scratch_grads;
        if (grads.empty()) {
            scratch_grads.assign(P.size(), T(0));
            grads = scratch_grads;
        }
        auto G = [&](std::size_t i) { return grads.data() + P.infos()[i].offset; };
        const int f = cfg_.feature_dim();

        std::vector<T> dh(static_cast<std::size_t>(f), T(0));
        if (!dh_in.empty()) std::copy(dh_in.begin(), dh_in.end(), dh.begin());
        if (!dz.empty()) {
            std::vector<T> dact(static_cast<std::size_t>(f));
            linear_backward(tr.head_act.data(), 1, f, P.data(ix_.fc2_w), cfg_.projection_dim, dz.data(), dact.data(),
                            G(ix_.fc2_w), G(ix_.fc2_b));
            for (int i = 0; i < f; ++i) dact[i] = tr.head_pre[i] > 0 ? dact[i] : T(0);
            std::vector<T> dh_head(static_cast<std::size_t>(f));
            linear_backward(tr.h.data(), 1, f, P.data(ix_.fc1_w), f, dact.data(), dh_head.data(), G(ix_.fc1_w),
                            G(ix_.fc1_b));
            for (int i = 0; i < f; ++i) dh[i] += dh_head[i];
        }
        std::vector<T> dpooled(static_cast<std::size_t>(f));
        layer_norm_backward(tr.h_xhat.data(), tr.h_rstd.data(), 1, f, P.data(ix_.norm_w), dh.data(), dpooled.data(),
                            G(ix_.norm_w), G(ix_.norm_b));

        const auto& last = tr.stages.back();
        const int n_last = last.h * last.w;
        std::vector<T> dcur(static_cast<std::size_t>(n_last) * f);
        for (int p = 0; p < n_last; ++p)
            for (int ch = 0; ch < f; ++ch) dcur[static_cast<std::size_t>(p) * f + ch] = dpooled[ch] / n_last;

        for (std::size_t s = tr.stages.size(); s-- > 0;) {
            const auto& st = tr.stages[s];
            const auto& sx = ix_.stages[s];
            for (std::size_t b = st.blocks.size(); b-- > 0;) block_backward(sx.blocks[b], st.h, st.w, st.c, st.blocks[b], dcur, grads);
            if (s > 0) {
                const auto& prev = tr.stages[s - 1];
                const int hp = prev.h, wp = prev.w, cp = prev.c;
                std::vector<T> dcols(st.ds_cols.size());
                linear_backward(st.ds_cols.data(), st.h * st.w, 4 * cp, P.data(sx.ds_w), st.c, dcur.data(), dcols.data(),
                                G(sx.ds_w), G(sx.ds_b));
                std::vector<T> dln(st.ds_ln_out.size(), T(0));
                patchify_scatter(dcols.data(), hp, wp, cp, 2, dln.data());
                dcur.assign(st.ds_in.size(), T(0));
                layer_norm_backward(st.ds_xhat.data(), st.ds_rstd.data(), hp * wp, cp, P.data(sx.ds_norm_w), dln.data(),
                                    dcur.data(), G(sx.ds_norm_w), G(sx.ds_norm_b));
            }
        }

        // Stem.
        const Size3 k = cfg_.stem_kernel, in = cfg_.input_size;
        const int zo = in.z / k.z, yo = in.y / k.y, xo = in.x / k.x;
        const int pos = yo * xo, c0 = cfg_.widths[0], cs = cfg_.stem_channels();
        const int kk = cfg_.in_channels * k.z * k.y * k.x;
        std::vector<T> dmap(static_cast<std::size_t>(pos) * c0);
        layer_norm_backward(tr.stem_xhat.data(), tr.stem_rstd.data(), pos, c0, P.data(ix_.stem_norm_w), dcur.data(),
                            dmap.data(), G(ix_.stem_norm_w), G(ix_.stem_norm_b));
        std::vector<T> dstem(static_cast<std::size_t>(zo) * pos * cs);
        for (int z = 0; z < zo; ++z)
            for (int p = 0; p < pos; ++p)
                for (int c = 0; c < cs; ++c)
                    dstem[(static_cast<std::size_t>(z) * pos + p) * cs + c] = dmap[static_cast<std::size_t>(p) * c0 + c * zo + z];
        std::vector<T> dcols;
        if (!dx.empty()) dcols.resize(tr.stem_cols.size());
        linear_backward(tr.stem_cols.data(), zo * pos, kk, P.data(ix_.stem_w), cs, dstem.data(),
                        dx.empty() ? nullptr : dcols.data(), G(ix_.stem_w), G(ix_.stem_b));
        if (!dx.empty()) {
            if (dx.size() != cfg_.input_numel()) throw ConfigError("dx buffer has the wrong size");
            std::fill(dx.begin(), dx.end(), T(0));
            scatter_stem(dcols.data(), dx.data());
        }
    }

    /// Batched evaluation: x holds `batch` samples; writes h [batch, F] and z [batch, P].
    void forward_batch(std::span<const T> x, int batch, std::span<T> h, std::span<T> z) const {
        const std::size_t n = cfg_.input_numel();
        if (x.size() != n * static_cast<std::size_t>(batch))
            throw ConfigError("batch buffer does not match batch size x model input shape");
        const int f = cfg_.feature_dim(), p = cfg_.projection_dim;
        Trace tr;
        for (int b = 0; b < batch; ++b) {
            forward(x.subspan(n * b, n), tr);
            if (!h.empty()) std::copy(tr.h.begin(), tr.h.end(), h.begin() + static_cast<std::ptrdiff_t>(b) * f);
            if (!z.empty()) std::copy(tr.z.begin(), tr.z.end(), z.begin() + static_cast<std::ptrdiff_t>(b) * p);
        }
    }

private:
    struct BlockIx {
        std::size_t dw_w, dw_b, norm_w, norm_b, fc1_w, fc1_b, fc2_w, fc2_b, gamma;
    };
    struct StageIx {
        std::size_t ds_norm_w = 0, ds_norm_b = 0, ds_w = 0, ds_b = 0;
        std::vector<BlockIx> blocks;
    };
    struct Index {
        std::size_t stem_w, stem_b, stem_norm_w, stem_norm_b;
        std::vector<StageIx> stages;
        std::size_t norm_w, norm_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };

    void build() {
        auto& P = params_;
        const Size3 k = cfg_.stem_kernel;
        const int kk = cfg_.in_channels * k.z * k.y * k.x;
        ix_.stem_w = P.add("stem.weight", {kk, cfg_.stem_channels()}, true);
        ix_.stem_b = P.add("stem.bias", {cfg_.stem_channels()}, false);
        ix_.stem_norm_w = P.add("stem.norm.weight", {cfg_.widths[0]}, false);
        ix_.stem_norm_b = P.add("stem.norm.bias", {cfg_.widths[0]}, false);
        const int kd = cfg_.dw_kernel;
        for (std::size_t s = 0; s < cfg_.widths.size(); ++s) {
            StageIx st;
            const std::string pre = "stages." + std::to_string(s);
            const int c = cfg_.widths[s];
            if (s > 0) {
                const int cp = cfg_.widths[s - 1];
                st.ds_norm_w = P.add(pre + ".downsample.norm.weight", {cp}, false);
                st.ds_norm_b = P.add(pre + ".downsample.norm.bias", {cp}, false);
                st.ds_w = P.add(pre + ".downsample.weight", {4 * cp, c}, true);
                st.ds_b = P.add(pre + ".downsample.bias", {c}, false);
            }
            for (int b = 0; b < cfg_.depths[s]; ++b) {
                const std::string bp = pre + ".blocks." + std::to_string(b);
                BlockIx bi;
                bi.dw_w = P.add(bp + ".dwconv.weight", {kd, kd, c}, true);
                bi.dw_b = P.add(bp + ".dwconv.bias", {c}, false);
                bi.norm_w = P.add(bp + ".norm.weight", {c}, false);
                bi.norm_b = P.add(bp + ".norm.bias", {c}, false);
                bi.fc1_w = P.add(bp + ".pwconv1.weight", {c, cfg_.mlp_ratio * c}, true);
                bi.fc1_b = P.add(bp + ".pwconv1.bias", {cfg_.mlp_ratio * c}, false);
                bi.fc2_w = P.add(bp + ".pwconv2.weight", {cfg_.mlp_ratio * c, c}, true);
                bi.fc2_b = P.add(bp + ".pwconv2.bias", {c}, false);
                bi.gamma = P.add(bp + ".gamma", {c}, false);
                st.blocks.push_back(bi);
            }
            ix_.stages.push_back(std::move(st));
        }
        const int f = cfg_.feature_dim();
        ix_.norm_w = P.add("norm.weight", {f}, false);
        ix_.norm_b = P.add("norm.bias", {f}, false);
        ix_.fc1_w = P.add("head.fc1.weight", {f, f}, true);
        ix_.fc1_b = P.add("head.fc1.bias", {f}, false);
        ix_.fc2_w = P.add("head.fc2.weight", {f, cfg_.projection_dim}, true);
        ix_.fc2_b = P.add("head.fc2.bias", {cfg_.projection_dim}, false);
    }

    // Rows ordered (z', y', x'), columns ordered (c, dz, dy, dx).
    void gather_stem(const T* x, T* cols) const {
        const Size3 k = cfg_.stem_kernel, in = cfg_.input_size;
        const int zo = in.z / k.z, yo = in.y / k.y, xo = in.x / k.x;
        const int kk = cfg_.in_channels * k.z * k.y * k.x;
        for (int oz = 0; oz < zo; ++oz)
            for (int oy = 0; oy < yo; ++oy)
                for (int ox = 0; ox < xo; ++ox) {
                    T* row = cols + (static_cast<std::size_t>(oz * yo + oy) * xo + ox) * kk;
                    for (int c = 0; c < cfg_.in_channels; ++c)
                        for (int dz = 0; dz < k.z; ++dz)
                            for (int dy = 0; dy < k.y; ++dy) {
                                const T* src = x + ((static_cast<std::size_t>(c) * in.z + oz * k.z + dz) * in.y + oy * k.y + dy) * in.x + ox * k.x;
                                std::copy(src, src + k.x, row);
                                row += k.x;
                            }
                }
    }

    void scatter_stem(const T* dcols, T* dx) const {
        const Size3 k = cfg_.stem_kernel, in = cfg_.input_size;
        const int zo = in.z / k.z, yo = in.y / k.y, xo = in.x / k.x;
        const int kk = cfg_.in_channels * k.z * k.y * k.x;
        for (int oz = 0; oz < zo; ++oz)
            for (int oy = 0; oy < yo; ++oy)
                for (int ox = 0; ox < xo; ++ox) {
                    const T* row = dcols + (static_cast<std::size_t>(oz * yo + oy) * xo + ox) * kk;
                    for (int c = 0; c < cfg_.in_channels; ++c)
                        for (int dz = 0; dz < k.z; ++dz)
                            for (int dy = 0; dy < k.y; ++dy) {
                                T* dst = dx + ((static_cast<std::size_t>(c) * in.z + oz * k.z + dz) * in.y + oy * k.y + dy) * in.x + ox * k.x;
                                for (int i = 0; i < k.x; ++i) dst[i] += row[i];
                                row += k.x;
                            }
                }
    }

    void block_forward(const BlockIx& bx, int h, int w, int c, std::vector<T>& cur, BlockTrace& bt) const {
        const auto& P = params_;
        const int n = h * w, hidden = cfg_.mlp_ratio * c;
        bt.x_in = cur;
        bt.dw_out.resize(cur.size());
        depthwise_forward(cur.data(), h, w, c, P.data(bx.dw_w), P.data(bx.dw_b), cfg_.dw_kernel, bt.dw_out.data());
        bt.ln_xhat.resize(cur.size());
        bt.ln_rstd.resize(static_cast<std::size_t>(n));
        bt.ln_out.resize(cur.size());
        layer_norm_forward(bt.dw_out.data(), n, c, P.data(bx.norm_w), P.data(bx.norm_b), bt.ln_out.data(),
                           bt.ln_xhat.data(), bt.ln_rstd.data());
        bt.pre_act.resize(static_cast<std::size_t>(n) * hidden);
        linear_forward(bt.ln_out.data(), n, c, P.data(bx.fc1_w), P.data(bx.fc1_b), hidden, bt.pre_act.data());
        bt.act.resize(bt.pre_act.size());
        for (std::size_t i = 0; i < bt.act.size(); ++i) bt.act[i] = gelu(bt.pre_act[i]);
        bt.mlp_out.resize(cur.size());
        linear_forward(bt.act.data(), n, hidden, P.data(bx.fc2_w), P.data(bx.fc2_b), c, bt.mlp_out.data());
        const T* gamma = P.data(bx.gamma);
        for (int p = 0; p < n; ++p)
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t i = static_cast<std::size_t>(p) * c + ch;
                cur[i] = bt.x_in[i] + gamma[ch] * bt.mlp_out[i];
            }
    }

    /// dcur holds dL/d(block output) on entry and dL/d(block input) on exit.
    void block_backward(const BlockIx& bx, int h, int w, int c, const BlockTrace& bt, std::vector<T>& dcur,
                        std::span<T> grads) const {
        const auto& P = params_;
        auto G = [&](std::size_t i) { return grads.data() + P.infos()[i].offset; };
        const int n = h * w, hidden = cfg_.mlp_ratio * c;
        const T* gamma = P.data(bx.gamma);
        T* dgamma = G(bx.gamma);
        std::vector<T> dmlp(dcur.size());
        for (int p = 0; p < n; ++p)
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t i = static_cast<std::size_t>(p) * c + ch;
                dgamma[ch] += dcur[i] * bt.mlp_out[i];
                dmlp[i] = dcur[i] * gamma[ch];
            }
        std::vector<T> dact(bt.act.size());
        linear_backward(bt.act.data(), n, hidden, P.data(bx.fc2_w), c, dmlp.data(), dact.data(), G(bx.fc2_w), G(bx.fc2_b));
        for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(bt.pre_act[i]);
        std::vector<T> dln(dcur.size());
        linear_backward(bt.ln_out.data(), n, c, P.data(bx.fc1_w), hidden, dact.data(), dln.data(), G(bx.fc1_w), G(bx.fc1_b));
        std::vector<T> ddw(dcur.size());
        layer_norm_backward(bt.ln_xhat.data(), bt.ln_rstd.data(), n, c, P.data(bx.norm_w), dln.data(), ddw.data(),
                            G(bx.norm_w), G(bx.norm_b));
        // Residual path keeps dcur; the depthwise branch adds into it.
        depthwise_backward(bt.x_in.data(), h, w, c, P.data(bx.dw_w), cfg_.dw_kernel, ddw.data(), dcur.data(), G(bx.dw_w),
                           G(bx.dw_b));
    }

    ModelConfig cfg_;
    ParamStore<T> params_;
    Index ix_{};
};

}  // namespace dynaclr::nn
