#pragma once

// Average Drop / Increase in Confidence measurement over an evaluation set,
// for any saliency source (trained attention module or a baseline generator).
//   AD(v) = (100/Y) * sum_i max(0, clean_i - masked_i) / clean_i
//   IC(v) = (100/Y) * count_i(masked_i > clean_i)
// where masked_i is the model-truth-class confidence after masking the input
// with the top-v% pixels of the explanation (original values kept).

#include <algorithm>
#include <functional>
#include <numeric>
#include <thread>
#include <vector>

#include "tame/attention.hpp"
#include "tame/backbone.hpp"
#include "tame/dataset.hpp"
#include "tame/error.hpp"

namespace tame {

struct MetricRow {
    int threshold = 0;  // v, percent
    double ad = 0.0;
    double ic = 0.0;
};

struct MetricsReport {
    std::vector<MetricRow> rows;
    int64_t count = 0;  // evaluation-set size Y
    uint64_t weights_digest = 0;
    uint64_t dataset_digest = 0;
};

// Keeps the k = max(1, round(v/100 * numel)) highest-valued pixels at their
// original values, zeroing the rest. Ties at the cut resolve in row-major
// order (earlier index wins), so kept sets nest as v grows.
template <typename T>
Tensor<T> threshold_topv(const Tensor<T>& psi, double v_percent) {
    TAME_CHECK_VALUE(v_percent > 0 && v_percent <= 100, "threshold v=", v_percent,
                     " out of (0, 100]");
    int64_t n = psi.numel();
    int64_t k = std::max<int64_t>(1, std::llround(v_percent / 100.0 * static_cast<double>(n)));
    k = std::min(k, n);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const T* p = psi.ptr();
    std::stable_sort(order.begin(), order.end(), [p](int64_t a, int64_t b) {
        if (p[a] != p[b]) return p[a] > p[b];
        return a < b;
    });
    Tensor<T> out = Tensor<T>::zeros(psi.shape());
    for (int64_t i = 0; i < k; ++i) out.ptr()[order[static_cast<size_t>(i)]] = p[order[static_cast<size_t>(i)]];
    return out;
}

inline double average_drop(const std::vector<double>& clean, const std::vector<double>& masked) {
    TAME_CHECK_VALUE(clean.size() == masked.size() && !clean.empty(),
                     "average_drop: size mismatch or empty input");
    double acc = 0.0;
    for (size_t i = 0; i < clean.size(); ++i) {
        TAME_CHECK_VALUE(clean[i] > 0.0, "average_drop: zero clean confidence at index ", i);
        acc += std::max(0.0, clean[i] - masked[i]) / clean[i];
    }
    return 100.0 * acc / static_cast<double>(clean.size());
}

inline double increase_confidence(const std::vector<double>& clean,
                                  const std::vector<double>& masked) {
    TAME_CHECK_VALUE(clean.size() == masked.size() && !clean.empty(),
                     "increase_confidence: size mismatch or empty input");
    int64_t count = 0;
    for (size_t i = 0; i < clean.size(); ++i)
        if (masked[i] > clean[i]) ++count;  // strict
    return 100.0 * static_cast<double>(count) / static_cast<double>(clean.size());
}

enum class BaselineKind { Random, Center, Constant };

inline BaselineKind baseline_kind_from_string(const std::string& s) {
    if (s == "random") return BaselineKind::Random;
    if (s == "center") return BaselineKind::Center;
    if (s == "constant") return BaselineKind::Constant;
    throw ConfigError("unknown baseline kind '" + s + "'");
}

template <typename T>
Tensor<T> baseline_saliency(BaselineKind kind, int64_t h, int64_t w, uint64_t seed) {
    Tensor<T> out = Tensor<T>::zeros({h, w});
    switch (kind) {
        case BaselineKind::Random: {
            Rng rng(seed);
            for (T& v : out.data()) v = static_cast<T>(rng.u01());
            break;
        }
        case BaselineKind::Center: {
            double cy = (static_cast<double>(h) - 1.0) / 2.0;
            double cx = (static_cast<double>(w) - 1.0) / 2.0;
            double maxd = std::sqrt(cy * cy + cx * cx);
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
                    out.ptr()[y * w + x] = static_cast<T>(1.0 - d / maxd);
                }
            break;
        }
        case BaselineKind::Constant:
            for (T& v : out.data()) v = T(0.5);
            break;
    }
    return out;
}

// Per-image context handed to a saliency source.
template <typename T>
struct EvalContext {
    int64_t index;
    const Tensor<T>& input;  // [1, 3, H, W], preprocessed
    const FeatureMapSet<T>& features;
    int64_t class_id;  // model-truth class
};

template <typename T>
using SaliencySource = std::function<Tensor<T>(const EvalContext<T>&)>;

template <typename T>
SaliencySource<T> tame_saliency(AttentionModule<T>& attention) {
    return [&attention](const EvalContext<T>& ctx) {
        return attention.explain(ctx.features, ctx.class_id, ExplainMode::Inference);
    };
}

template <typename T>
SaliencySource<T> baseline_source(BaselineKind kind, int64_t h, int64_t w, uint64_t seed) {
    return [kind, h, w, seed](const EvalContext<T>& ctx) {
        uint64_t image_seed = kind == BaselineKind::Random
                                  ? detail::mix64(seed ^ static_cast<uint64_t>(ctx.index + 1))
                                  : seed;
        return baseline_saliency<T>(kind, h, w, image_seed);
    };
}

// Full protocol: clean tapped pass -> model truth + confidence; explanation
// upscaled to image size; per threshold, mask and re-measure the confidence of
// the same class. Work items are independent; aggregation always runs in
// image-index order so results do not depend on the thread count.
template <typename T>
MetricsReport evaluate(const SaliencySource<T>& source, const Backbone<T>& backbone,
                       const DatasetSplit& split, const DatasetStats& stats,
                       const std::vector<int>& thresholds, int threads = 1) {
    int64_t n = static_cast<int64_t>(split.images.size());
    TAME_CHECK_VALUE(n > 0, "evaluate: empty dataset split");
    size_t tcount = thresholds.size();
    std::vector<double> clean(static_cast<size_t>(n));
    std::vector<std::vector<double>> masked(tcount, std::vector<double>(static_cast<size_t>(n)));

    auto process = [&](int64_t i) {
        Tensor<T> x = to_tensor<T>(split.images[static_cast<size_t>(i)], stats);
        x = reshape(x, {1, x.size(0), x.size(1), x.size(2)});
        auto [logits, feats] = backbone.forward_with_taps(x);
        int64_t cls = model_truth(logits);
        Tensor<T> probs = softmax(logits);
        double p_clean = static_cast<double>(probs.ptr()[cls]);
        TAME_CHECK_VALUE(p_clean > 0.0, "evaluate: zero clean confidence for image ", i);
        clean[static_cast<size_t>(i)] = p_clean;

        EvalContext<T> ctx{i, x, feats, cls};
        Tensor<T> psi = source(ctx);
        TAME_CHECK_SHAPE(psi.dim() == 2, "saliency source must return a 2-D explanation");
        int64_t h = x.size(2), w = x.size(3);
        Tensor<T> psi_up =
            (psi.size(0) == h && psi.size(1) == w) ? psi : bilinear_upsample(psi, h, w);
        for (size_t t = 0; t < tcount; ++t) {
            Tensor<T> kept = threshold_topv(psi_up, thresholds[t]);
            Tensor<T> masked_x = mul(x, reshape(kept, {1, 1, h, w}));
            Tensor<T> mlogits = backbone.forward(masked_x);
            Tensor<T> mprobs = softmax(mlogits);
            masked[t][static_cast<size_t>(i)] = static_cast<double>(mprobs.ptr()[cls]);
        }
    };

    if (threads <= 1) {
        for (int64_t i = 0; i < n; ++i) process(i);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
        int64_t chunk = (n + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            int64_t lo = t * chunk;
            int64_t hi = std::min<int64_t>(n, lo + chunk);
            pool.emplace_back([&, lo, hi, t] {
                try {
                    for (int64_t i = lo; i < hi; ++i) process(i);
                } catch (...) {
                    errors[static_cast<size_t>(t)] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    MetricsReport report;
    report.count = n;
    for (size_t t = 0; t < tcount; ++t)
        report.rows.push_back(
            {thresholds[t], average_drop(clean, masked[t]), increase_confidence(clean, masked[t])});
    return report;
}

}  // namespace tame
