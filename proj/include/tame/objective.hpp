#pragma once

// Composite training objective: cross-entropy on the masked-pass logits plus
// area and variation regularizers on the selected explanation slice.
//   L = lambda1 * CE + lambda2 * Area + lambda3 * Var
// Area defaults to the mean of psi^lambda4 so lambda2 is resolution
// independent; the unnormalized-sum form is available behind a flag.

#include <cmath>
#include <cstdint>
#include <vector>

#include "tame/error.hpp"
#include "tame/tensor.hpp"

namespace tame {

struct LossWeights {
    double lambda1 = 1.5;
    double lambda2 = 2.0;
    double lambda3 = 0.01;
    double lambda4 = 0.3;
    bool area_as_sum = false;

    void validate() const {
        TAME_CHECK_CONFIG(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0,
                          "loss weights must be non-negative");
        TAME_CHECK_CONFIG(lambda4 > 0 && lambda4 <= 1, "lambda4 must lie in (0, 1]");
    }
};

struct LossBreakdown {
    double total = 0;
    double ce = 0;
    double area = 0;
    double variation = 0;
};

// -log softmax(logits)[label], averaged over the batch when logits is [N, K].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int64_t>& labels) {
    TAME_CHECK_SHAPE(logits.dim() == 1 || logits.dim() == 2,
                     "cross_entropy expects [K] or [N, K] logits");
    int64_t k = logits.size(-1);
    int64_t n = logits.dim() == 2 ? logits.size(0) : 1;
    TAME_CHECK_SHAPE(static_cast<int64_t>(labels.size()) == n, "label count ", labels.size(),
                     " does not match batch size ", n);
    for (int64_t l : labels)
        TAME_CHECK_VALUE(l >= 0 && l < k, "label ", l, " out of range [0, ", k, ")");

    Tensor<T> out = Tensor<T>::zeros({1});
    const T* pz = logits.ptr();
    // Per-row softmax probabilities saved for the backward pass.
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(n * k));
    T acc = T(0);
    for (int64_t r = 0; r < n; ++r) {
        const T* z = pz + r * k;
        T m = z[0];
        for (int64_t i = 1; i < k; ++i) m = std::max(m, z[i]);
        T denom = T(0);
        for (int64_t i = 0; i < k; ++i) {
            T e = std::exp(z[i] - m);
            (*probs)[static_cast<size_t>(r * k + i)] = e;
            denom += e;
        }
        for (int64_t i = 0; i < k; ++i) (*probs)[static_cast<size_t>(r * k + i)] /= denom;
        acc += -(z[labels[static_cast<size_t>(r)]] - m - std::log(denom));
    }
    out.ptr()[0] = acc / static_cast<T>(n);

    auto zi = logits.impl();
    auto oi = out.impl();
    detail::record({&logits}, out, [zi, oi, probs, labels, n, k] {
        if (!zi->requires_grad) return;
        auto& gz = zi->ensure_grad();
        T gy = oi->grad[0] / static_cast<T>(n);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t i = 0; i < k; ++i) {
                T p = (*probs)[static_cast<size_t>(r * k + i)];
                T onehot = i == labels[static_cast<size_t>(r)] ? T(1) : T(0);
                gz[r * k + i] += gy * (p - onehot);
            }
    });
    return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, int64_t label) {
    return cross_entropy(logits, std::vector<int64_t>{label});
}

// Sum of squared forward differences along both axes; neighbors outside the
// map are dropped (no wraparound, no padding). Batched input [N, H, W] yields
// the mean of per-sample sums.
template <typename T>
Tensor<T> variation_loss(const Tensor<T>& psi) {
    TAME_CHECK_SHAPE(psi.dim() == 2 || psi.dim() == 3, "variation_loss expects [H,W] or [N,H,W]");
    int64_t n = psi.dim() == 3 ? psi.size(0) : 1;
    int64_t h = psi.size(-2), w = psi.size(-1);
    TAME_CHECK_SHAPE(h >= 2 && w >= 2, "variation_loss needs at least a 2x2 map");
    Tensor<T> out = Tensor<T>::zeros({1});
    const T* p = psi.ptr();
    T acc = T(0);
    for (int64_t s = 0; s < n; ++s) {
        const T* m = p + s * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                T v = m[y * w + x];
                if (x + 1 < w) {
                    T d = m[y * w + x + 1] - v;
                    acc += d * d;
                }
                if (y + 1 < h) {
                    T d = m[(y + 1) * w + x] - v;
                    acc += d * d;
                }
            }
    }
    out.ptr()[0] = acc / static_cast<T>(n);

    auto pi = psi.impl();
    auto oi = out.impl();
    detail::record({&psi}, out, [pi, oi, n, h, w] {
        if (!pi->requires_grad) return;
        auto& gp = pi->ensure_grad();
        T gy = oi->grad[0] / static_cast<T>(n);
        for (int64_t s = 0; s < n; ++s) {
            const T* m = pi->data.data() + s * h * w;
            T* g = gp.data() + s * h * w;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    T v = m[y * w + x];
                    if (x + 1 < w) {
                        T d = m[y * w + x + 1] - v;
                        g[y * w + x + 1] += gy * 2 * d;
                        g[y * w + x] -= gy * 2 * d;
                    }
                    if (y + 1 < h) {
                        T d = m[(y + 1) * w + x] - v;
                        g[(y + 1) * w + x] += gy * 2 * d;
                        g[y * w + x] -= gy * 2 * d;
                    }
                }
        }
    });
    return out;
}

// Mean (or sum) over pixels of psi^lambda4, batch-averaged. Negative values
// signal an upstream range violation and raise a domain error.
template <typename T>
Tensor<T> area_loss(const Tensor<T>& psi, double lambda4, bool as_sum = false) {
    TAME_CHECK_SHAPE(psi.dim() == 2 || psi.dim() == 3, "area_loss expects [H,W] or [N,H,W]");
    TAME_CHECK_VALUE(lambda4 > 0, "area_loss: lambda4 must be positive");
    int64_t n = psi.dim() == 3 ? psi.size(0) : 1;
    int64_t plane = psi.numel() / n;
    const T* p = psi.ptr();
    for (int64_t i = 0; i < psi.numel(); ++i)
        TAME_CHECK_VALUE(p[i] >= T(0), "area_loss: negative explanation value ", p[i]);

    T norm = as_sum ? T(1) : static_cast<T>(plane);
    Tensor<T> out = Tensor<T>::zeros({1});
    T acc = T(0);
    T l4 = static_cast<T>(lambda4);
    for (int64_t i = 0; i < psi.numel(); ++i) acc += std::pow(p[i], l4);
    out.ptr()[0] = acc / (norm * static_cast<T>(n));

    auto pi = psi.impl();
    auto oi = out.impl();
    detail::record({&psi}, out, [pi, oi, l4, norm, n] {
        if (!pi->requires_grad) return;
        auto& gp = pi->ensure_grad();
        T gy = oi->grad[0] / (norm * static_cast<T>(n));
        for (size_t i = 0; i < gp.size(); ++i) {
            T v = pi->data[i];
            if (v == T(0)) continue;  // subgradient 0 at the boundary
            gp[i] += gy * l4 * std::pow(v, l4 - T(1));
        }
    });
    return out;
}

template <typename T>
struct LossTerms {
    Tensor<T> total;
    Tensor<T> ce;
    Tensor<T> area;
    Tensor<T> variation;

    LossBreakdown values() const {
        LossBreakdown b;
        b.total = static_cast<double>(total.item());
        b.ce = static_cast<double>(ce.item());
        b.area = static_cast<double>(area.item());
        b.variation = static_cast<double>(variation.item());
        return b;
    }
};

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& logits, const std::vector<int64_t>& labels,
                        const Tensor<T>& psi, const LossWeights& w) {
    w.validate();
    LossTerms<T> terms;
    terms.ce = cross_entropy(logits, labels);
    terms.area = area_loss(psi, w.lambda4, w.area_as_sum);
    terms.variation = variation_loss(psi);
    terms.total = add(add(mul_scalar(terms.ce, static_cast<T>(w.lambda1)),
                          mul_scalar(terms.area, static_cast<T>(w.lambda2))),
                      mul_scalar(terms.variation, static_cast<T>(w.lambda3)));
    return terms;
}

}  // namespace tame
