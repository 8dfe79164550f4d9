#pragma once

// Two-forward-pass training loop for the attention module: clean tapped pass
// through the frozen backbone, explanation at the model-truth class, upscale,
// mask, second pass, composite loss, SGD-with-momentum update of attention
// parameters only. Epochs are scheduled with the one-cycle policy and scored
// on validation AD/IC.

#include <functional>
#include <limits>
#include <vector>

#include "tame/attention.hpp"
#include "tame/backbone.hpp"
#include "tame/evaluator.hpp"
#include "tame/objective.hpp"
#include "tame/optim.hpp"

namespace tame {

struct TrainConfig {
    int64_t epochs = 8;
    int64_t batch_size = 32;
    OneCycleConfig schedule{0.05, 25.0, 1e4, 0.3};
    double momentum = 0.9;
    uint64_t seed = 2;
    LossWeights loss;
    int64_t augment_shift = 4;
    int64_t eval_threads = 1;

    void validate() const {
        TAME_CHECK_CONFIG(epochs >= 1, "train config: epochs must be >= 1");
        TAME_CHECK_CONFIG(batch_size >= 1, "train config: batch size must be >= 1");
        TAME_CHECK_CONFIG(schedule.max_lr > 0, "train config: max_lr must be > 0");
        TAME_CHECK_CONFIG(schedule.peak_fraction > 0 && schedule.peak_fraction < 1,
                          "train config: peak fraction must lie in (0, 1)");
        loss.validate();
    }
};

struct EpochRecord {
    int64_t epoch = 0;  // 1-based
    LossBreakdown train_loss;
    double ad100 = 0, ic100 = 0;
    double ad50 = 0, ic50 = 0;
    double ad15 = 0, ic15 = 0;
};

// One optimization step over a preprocessed image batch. The backbone is
// frozen; only attention parameters move. Returns the batch-mean breakdown.
template <typename T>
LossBreakdown train_step(const Tensor<T>& images, const Backbone<T>& backbone,
                         AttentionModule<T>& attention, const LossWeights& weights,
                         SgdMomentum<T>& opt, T lr) {
    TAME_CHECK_SHAPE(images.dim() == 4, "train_step expects [N, C, H, W] images");
    int64_t h = images.size(2), w = images.size(3);

    Tape<T> tape;
    // Pass 1: features and model truth. Nothing records here (all frozen).
    auto [logits, feats] = backbone.forward_with_taps(images);
    std::vector<int64_t> labels = argmax_rows(logits);

    // Explanation at the model-truth class, upscaled into an input-size mask.
    ExplanationMap<T> em = attention.forward(feats, ExplainMode::Train);
    Tensor<T> psi = take_channel_per_sample(em.map, labels);  // [N, He, We]
    Tensor<T> psi_up = bilinear_upsample(psi, h, w);
    Tensor<T> mask = reshape(psi_up, {images.size(0), 1, h, w});
    Tensor<T> masked = mul(images, mask);

    // Pass 2: logits from the masked image, then the composite loss on the
    // module-resolution explanation slice.
    Tensor<T> masked_logits = backbone.forward(masked);
    LossTerms<T> terms = total_loss(masked_logits, labels, psi, weights);
    LossBreakdown values = terms.values();
    TAME_CHECK(std::isfinite(values.total) && std::isfinite(values.ce) &&
                   std::isfinite(values.area) && std::isfinite(values.variation),
               NumericError, "train_step: non-finite loss (total=", values.total,
               ", ce=", values.ce, ", area=", values.area, ", var=", values.variation, ")");
    tape.backward(terms.total);
    opt.step(lr);
    return values;
}

template <typename T>
struct FitResult {
    std::vector<EpochRecord> records;
    int64_t best_epoch = 0;  // 1-based
    int64_t lr_values_consumed = 0;
};

// Called after each epoch with the record and the current module state.
template <typename T>
using EpochCallback = std::function<void(const EpochRecord&, AttentionModule<T>&)>;

// Runs the full schedule, evaluates AD/IC on the validation split each epoch,
// and restores the attention module to the weights of the epoch with the best
// IC(15), ties broken by lower AD(15), then by the earlier epoch.
template <typename T>
FitResult<T> fit(const Backbone<T>& backbone, AttentionModule<T>& attention, const Dataset& data,
                 const TrainConfig& cfg, const EpochCallback<T>& on_epoch = nullptr) {
    cfg.validate();
    TAME_CHECK_CONFIG(!data.train.images.empty() && !data.val.images.empty(),
                      "fit: empty dataset split");

    auto params = attention.params();
    SgdMomentum<T> opt(params, static_cast<T>(cfg.momentum));
    Rng rng = Rng(cfg.seed).fork(0x74616d65ull);

    int64_t n = static_cast<int64_t>(data.train.images.size());
    int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    int64_t total_steps = cfg.epochs * steps_per_epoch;
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    FitResult<T> result;
    std::vector<std::vector<T>> best_params;
    std::vector<std::vector<T>> best_buffers;
    double best_ic15 = -std::numeric_limits<double>::infinity();
    double best_ad15 = std::numeric_limits<double>::infinity();

    int64_t gstep = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        LossBreakdown mean{};
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            std::vector<int64_t> idx(order.begin() + start,
                                     order.begin() + std::min(start + cfg.batch_size, n));
            Rng aug = rng.fork(static_cast<uint64_t>(gstep) * 2 + 1);
            Tensor<T> batch =
                stack_batch<T>(data.train, data.stats, idx, &aug, cfg.augment_shift);
            double lr = one_cycle_lr(gstep, total_steps, cfg.schedule);
            ++result.lr_values_consumed;
            LossBreakdown step = train_step(batch, backbone, attention, cfg.loss, opt,
                                            static_cast<T>(lr));
            mean.total += step.total;
            mean.ce += step.ce;
            mean.area += step.area;
            mean.variation += step.variation;
            ++gstep;
        }
        double inv = 1.0 / static_cast<double>(steps_per_epoch);
        mean.total *= inv;
        mean.ce *= inv;
        mean.area *= inv;
        mean.variation *= inv;

        MetricsReport metrics = evaluate<T>(tame_saliency(attention), backbone, data.val,
                                            data.stats, {100, 50, 15},
                                            static_cast<int>(cfg.eval_threads));
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = mean;
        rec.ad100 = metrics.rows[0].ad;
        rec.ic100 = metrics.rows[0].ic;
        rec.ad50 = metrics.rows[1].ad;
        rec.ic50 = metrics.rows[1].ic;
        rec.ad15 = metrics.rows[2].ad;
        rec.ic15 = metrics.rows[2].ic;
        result.records.push_back(rec);

        if (rec.ic15 > best_ic15 || (rec.ic15 == best_ic15 && rec.ad15 < best_ad15)) {
            best_ic15 = rec.ic15;
            best_ad15 = rec.ad15;
            result.best_epoch = epoch;
            best_params.clear();
            for (auto* p : attention.params()) best_params.push_back(p->data());
            best_buffers.clear();
            for (auto& [name, buf] : attention.named_buffers()) best_buffers.push_back(*buf);
        }
        if (on_epoch) on_epoch(rec, attention);
    }

    // Restore the selected epoch's weights.
    {
        auto ps = attention.params();
        for (size_t i = 0; i < ps.size(); ++i) ps[i]->data() = best_params[i];
        auto bufs = attention.named_buffers();
        for (size_t i = 0; i < bufs.size(); ++i) *bufs[i].second = best_buffers[i];
    }
    return result;
}

}  // namespace tame
