#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "dynaclr/errors.hpp"

namespace dynaclr::nn {

template <class T>
struct TripletLossResult {
    T loss = 0;
    /// Gradients with respect to anchor, positive and negative rows [B, d].
    std::vector<T> grad_anchor, grad_positive, grad_negative;
    /// Number of triplets with a positive hinge.
    int active = 0;
};

/// Sum over the batch of max(|a - p|^2 - |a - n|^2 + margin, 0) with squared
/// Euclidean distances on raw (unnormalized) rows.
template <class T>
TripletLossResult<T> triplet_loss(std::span<const T> anchor, std::span<const T> positive, std::span<const T> negative,
                                  int dim, double margin, bool with_grad = true) {
    if (dim < 1) throw ConfigError("embedding dimension must be >= 1");
    if (anchor.size() != positive.size() || anchor.size() != negative.size() || anchor.size() % dim != 0)
        throw ConfigError("triplet loss inputs must be aligned [B, d] arrays");
    if (!(margin > 0)) throw ConfigError("triplet margin must be > 0");
    const std::size_t batch = anchor.size() / dim;
    TripletLossResult<T> r;
    if (with_grad) {
        r.grad_anchor.assign(anchor.size(), T(0));
        r.grad_positive.assign(anchor.size(), T(0));
        r.grad_negative.assign(anchor.size(), T(0));
    }
    for (std::size_t i = 0; i < batch; ++i) {
        const T* a = anchor.data() + i * dim;
        const T* p = positive.data() + i * dim;
        const T* n = negative.data() + i * dim;
        T dp = 0, dn = 0;
        for (int k = 0; k < dim; ++k) {
            dp += (a[k] - p[k]) * (a[k] - p[k]);
            dn += (a[k] - n[k]) * (a[k] - n[k]);
        }
        const T hinge = dp - dn + static_cast<T>(margin);
        if (hinge <= 0) continue;
        r.loss += hinge;
        ++r.active;
        if (!with_grad) continue;
        for (int k = 0; k < dim; ++k) {
            const std::size_t j = i * dim + k;
            // d/da (|a-p|^2 - |a-n|^2) = 2(a-p) - 2(a-n) = 2(n-p)
            r.grad_anchor[j] = 2 * (n[k] - p[k]);
            r.grad_positive[j] = -2 * (a[k] - p[k]);
            r.grad_negative[j] = 2 * (a[k] - n[k]);
        }
    }
    return r;
}

}  // namespace dynaclr::nn
