#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dynaclr/errors.hpp"
#include "dynaclr/rng.hpp"

namespace dynaclr::nn {

struct ParamInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    /// Weight decay applies only to matrices and kernels, never to biases,
    /// norm affines or layer scales.
    bool decay = false;
};

/// Flat parameter storage with a named manifest. Gradients live in a
/// separate buffer of identical layout (see `zeros_like`).
template <class T>
class ParamStore {
public:
    std::size_t add(std::string name, std::vector<int> shape, bool decay) {
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d);
        infos_.push_back({std::move(name), std::move(shape), values_.size(), n, decay});
        values_.resize(values_.size() + n, T(0));
        return infos_.size() - 1;
    }

    const std::vector<ParamInfo>& infos() const noexcept { return infos_; }
    std::size_t size() const noexcept { return values_.size(); }

    T* data(std::size_t param) noexcept { return values_.data() + infos_[param].offset; }
    const T* data(std::size_t param) const noexcept { return values_.data() + infos_[param].offset; }
    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }

    std::vector<T> zeros_like() const { return std::vector<T>(values_.size(), T(0)); }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        out.infos_ = infos_;
        out.values_.assign(values_.begin(), values_.end());
        return out;
    }

    void fill(std::size_t param, T v) {
        auto* p = data(param);
        for (std::size_t i = 0; i < infos_[param].size; ++i) p[i] = v;
    }

    /// Truncated normal (cut at +-2 sd), as used for conv and linear weights.
    void trunc_normal(std::size_t param, double sd, Rng& rng) {
        auto* p = data(param);
        for (std::size_t i = 0; i < infos_[param].size; ++i) {
            double v;
            do {
                v = normal(rng);
            } while (std::abs(v) > 2.0);
            p[i] = static_cast<T>(v * sd);
        }
    }

    void assign(std::span<const float> flat) {
        if (flat.size() != values_.size()) throw ConfigError("parameter blob size does not match the model");
        for (std::size_t i = 0; i < flat.size(); ++i) values_[i] = static_cast<T>(flat[i]);
    }

private:
    template <class U>
    friend class ParamStore;

    std::vector<ParamInfo> infos_;
    std::vector<T> values_;
};

}  // namespace dynaclr::nn
