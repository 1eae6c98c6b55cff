#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dynaclr/nn/params.hpp"

namespace dynaclr::nn {

struct AdamWConfig {
    double learning_rate = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Adaptive-moment optimizer with decoupled weight decay.
template <class T>
class AdamW {
public:
    AdamW() = default;
    AdamW(const ParamStore<T>& params, AdamWConfig cfg)
        : cfg_(cfg), m_(params.size(), T(0)), v_(params.size(), T(0)) {
        decay_mask_.assign(params.size(), 0);
        for (const auto& info : params.infos())
            if (info.decay)
                for (std::size_t i = 0; i < info.size; ++i) decay_mask_[info.offset + i] = 1;
    }

    void step(ParamStore<T>& params, std::span<const T> grads) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        auto p = params.values();
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T lr = static_cast<T>(cfg_.learning_rate);
        const T wd = static_cast<T>(cfg_.learning_rate * cfg_.weight_decay);
        const T ibc1 = static_cast<T>(1.0 / bc1), ibc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(cfg_.eps);
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (decay_mask_[i]) p[i] -= wd * p[i];
            m_[i] = b1 * m_[i] + (1 - b1) * grads[i];
            v_[i] = b2 * v_[i] + (1 - b2) * grads[i] * grads[i];
            p[i] -= lr * (m_[i] * ibc1) / (std::sqrt(v_[i] * ibc2) + eps);
        }
    }

    const AdamWConfig& config() const noexcept { return cfg_; }
    std::int64_t steps() const noexcept { return step_; }
    std::vector<T>& first_moment() noexcept { return m_; }
    std::vector<T>& second_moment() noexcept { return v_; }
    const std::vector<T>& first_moment() const noexcept { return m_; }
    const std::vector<T>& second_moment() const noexcept { return v_; }
    void set_steps(std::int64_t s) noexcept { step_ = s; }

private:
    AdamWConfig cfg_;
    std::vector<T> m_, v_;
    std::vector<unsigned char> decay_mask_;
    std::int64_t step_ = 0;
};

}  // namespace dynaclr::nn
