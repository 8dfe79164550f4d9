#pragma once

// Small VGG-style CNN classifier with named feature-tap points. Trained once
// on the synthetic dataset, then loaded frozen for all attention-module work.

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

#include "tame/dataset.hpp"
#include "tame/error.hpp"
#include "tame/nn.hpp"
#include "tame/objective.hpp"
#include "tame/optim.hpp"
#include "tame/serialize.hpp"

namespace tame {

struct BackboneBlockConfig {
    int64_t convs = 2;
    int64_t width = 16;
    bool pool = true;
};

struct BackboneConfig {
    int64_t input_channels = 3;
    int64_t image_size = 64;
    std::vector<BackboneBlockConfig> blocks{{2, 16, true}, {2, 32, true}, {2, 64, true}};
    int64_t hidden = 128;
    int64_t classes = 3;
    // Ordered shallow to deep; names refer to produced activations:
    // block{b}.conv{j} (pre-activation), block{b}.relu{j}, block{b}.pool.
    std::vector<std::string> tap_layers{"block1.pool", "block2.pool", "block3.pool"};

    nlohmann::json to_json() const {
        nlohmann::json blocks_json = nlohmann::json::array();
        for (const auto& b : blocks)
            blocks_json.push_back({{"convs", b.convs}, {"width", b.width}, {"pool", b.pool}});
        return {{"input_channels", input_channels}, {"image_size", image_size},
                {"blocks", blocks_json},            {"hidden", hidden},
                {"classes", classes},               {"tap_layers", tap_layers}};
    }

    static BackboneConfig from_json(const nlohmann::json& j) {
        BackboneConfig c;
        c.input_channels = j.at("input_channels").get<int64_t>();
        c.image_size = j.at("image_size").get<int64_t>();
        c.blocks.clear();
        for (const auto& b : j.at("blocks")) {
            BackboneBlockConfig bc;
            bc.convs = b.at("convs").get<int64_t>();
            bc.width = b.at("width").get<int64_t>();
            bc.pool = b.at("pool").get<bool>();
            c.blocks.push_back(bc);
        }
        c.hidden = j.at("hidden").get<int64_t>();
        c.classes = j.at("classes").get<int64_t>();
        c.tap_layers = j.at("tap_layers").get<std::vector<std::string>>();
        return c;
    }
};

template <typename T>
struct FeatureMapEntry {
    std::string name;
    Tensor<T> tensor;  // [N, C_i, H_i, W_i]
};

template <typename T>
using FeatureMapSet = std::vector<FeatureMapEntry<T>>;

template <typename T>
class Backbone {
public:
    Backbone() = default;

    Backbone(BackboneConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        TAME_CHECK_CONFIG(cfg_.classes >= 2, "backbone needs at least 2 classes");
        TAME_CHECK_CONFIG(!cfg_.blocks.empty(), "backbone needs at least one block");
        int64_t channels = cfg_.input_channels;
        int64_t spatial = cfg_.image_size;
        for (const auto& bc : cfg_.blocks) {
            Block blk;
            for (int64_t j = 0; j < bc.convs; ++j) {
                blk.convs.emplace_back(channels, bc.width, 3, 1, 1, rng);
                channels = bc.width;
            }
            blk.pool = bc.pool;
            if (bc.pool) {
                TAME_CHECK_CONFIG(spatial % 2 == 0, "spatial dim ", spatial,
                                  " not divisible by 2 at a pool layer");
                spatial /= 2;
            }
            blocks_.push_back(std::move(blk));
        }
        flat_dim_ = channels * spatial * spatial;
        fc1_ = Linear<T>(flat_dim_, cfg_.hidden, rng);
        fc2_ = Linear<T>(cfg_.hidden, cfg_.classes, rng);
        validate_taps();
        set_trainable(false);
    }

    const BackboneConfig& config() const { return cfg_; }

    // Names of every activation this network produces, in execution order.
    std::vector<std::string> activation_names() const {
        std::vector<std::string> names;
        for (size_t b = 0; b < blocks_.size(); ++b) {
            for (size_t j = 0; j < blocks_[b].convs.size(); ++j) {
                std::string base =
                    "block" + std::to_string(b + 1) + ".conv" + std::to_string(j + 1);
                names.push_back(base);
                names.push_back("block" + std::to_string(b + 1) + ".relu" +
                                std::to_string(j + 1));
            }
            if (blocks_[b].pool) names.push_back("block" + std::to_string(b + 1) + ".pool");
        }
        return names;
    }

    Tensor<T> forward(const Tensor<T>& images) const {
        return run(images, nullptr);
    }

    // Returns logits plus the tapped activations, one per configured tap layer,
    // in tap order. Tapping does not perturb the computation.
    std::pair<Tensor<T>, FeatureMapSet<T>> forward_with_taps(const Tensor<T>& images) const {
        FeatureMapSet<T> taps;
        Tensor<T> logits = run(images, &taps);
        return {std::move(logits), std::move(taps)};
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (size_t b = 0; b < blocks_.size(); ++b)
            for (size_t j = 0; j < blocks_[b].convs.size(); ++j) {
                std::string base =
                    "block" + std::to_string(b + 1) + ".conv" + std::to_string(j + 1);
                out.emplace_back(base + ".weight", &blocks_[b].convs[j].weight);
                out.emplace_back(base + ".bias", &blocks_[b].convs[j].bias);
            }
        out.emplace_back("fc1.weight", &fc1_.weight);
        out.emplace_back("fc1.bias", &fc1_.bias);
        out.emplace_back("fc2.weight", &fc2_.weight);
        out.emplace_back("fc2.bias", &fc2_.bias);
        return out;
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> out;
        for (auto& [name, p] : named_params()) out.push_back(p);
        return out;
    }

    void set_trainable(bool trainable) {
        for (auto* p : params()) {
            p->set_requires_grad(trainable);
            if (!trainable) p->drop_grad();
        }
    }

    // {C, H, W} of each tapped activation for the configured input size.
    std::vector<std::array<int64_t, 3>> tap_dims() const {
        std::vector<std::array<int64_t, 3>> out;
        int64_t channels = cfg_.input_channels;
        int64_t spatial = cfg_.image_size;
        size_t next_tap = 0;
        auto consider = [&](const std::string& name) {
            if (next_tap < cfg_.tap_layers.size() && cfg_.tap_layers[next_tap] == name) {
                out.push_back({channels, spatial, spatial});
                ++next_tap;
            }
        };
        for (size_t b = 0; b < blocks_.size(); ++b) {
            for (size_t j = 0; j < blocks_[b].convs.size(); ++j) {
                channels = cfg_.blocks[b].width;
                std::string base =
                    "block" + std::to_string(b + 1) + ".conv" + std::to_string(j + 1);
                consider(base);
                consider("block" + std::to_string(b + 1) + ".relu" + std::to_string(j + 1));
            }
            if (blocks_[b].pool) {
                spatial /= 2;
                consider("block" + std::to_string(b + 1) + ".pool");
            }
        }
        TAME_CHECK_CONFIG(next_tap == cfg_.tap_layers.size(), "unresolved tap layers");
        return out;
    }

private:
    struct Block {
        std::vector<Conv2d<T>> convs;
        bool pool = false;
    };

    void validate_taps() const {
        TAME_CHECK_CONFIG(!cfg_.tap_layers.empty(), "tap_layers must not be empty");
        auto names = activation_names();
        int64_t prev = -1;
        for (const auto& tap : cfg_.tap_layers) {
            auto it = std::find(names.begin(), names.end(), tap);
            TAME_CHECK_CONFIG(it != names.end(), "unknown tap layer '", tap, "'");
            int64_t pos = it - names.begin();
            TAME_CHECK_CONFIG(pos > prev, "tap layers must be ordered shallow to deep ('", tap,
                              "' is out of order)");
            prev = pos;
        }
    }

    Tensor<T> run(const Tensor<T>& images, FeatureMapSet<T>* taps) const {
        Tensor<T> x = images;
        if (x.dim() == 3) x = reshape(x, {1, x.size(0), x.size(1), x.size(2)});
        TAME_CHECK_SHAPE(x.dim() == 4, "backbone input must be [N,C,H,W] or [C,H,W]");
        TAME_CHECK_SHAPE(x.size(1) == cfg_.input_channels && x.size(2) == cfg_.image_size &&
                             x.size(3) == cfg_.image_size,
                         "backbone input shape ", shape_str(x.shape()),
                         " does not match configured ", cfg_.input_channels, "x",
                         cfg_.image_size, "x", cfg_.image_size);
        size_t next_tap = 0;
        auto consider = [&](const std::string& name, const Tensor<T>& act) {
            if (taps && next_tap < cfg_.tap_layers.size() &&
                cfg_.tap_layers[next_tap] == name) {
                taps->push_back({name, act});
                ++next_tap;
            }
        };
        for (size_t b = 0; b < blocks_.size(); ++b) {
            for (size_t j = 0; j < blocks_[b].convs.size(); ++j) {
                std::string base =
                    "block" + std::to_string(b + 1) + ".conv" + std::to_string(j + 1);
                x = blocks_[b].convs[j].forward(x);
                consider(base, x);
                x = relu(x);
                consider("block" + std::to_string(b + 1) + ".relu" + std::to_string(j + 1), x);
            }
            if (blocks_[b].pool) {
                x = maxpool2d(x, 2, 2);
                consider("block" + std::to_string(b + 1) + ".pool", x);
            }
        }
        x = reshape(x, {x.size(0), flat_dim_});
        x = relu(fc1_.forward(x));
        return fc2_.forward(x);
    }

    BackboneConfig cfg_;
    std::vector<Block> blocks_;
    Linear<T> fc1_;
    Linear<T> fc2_;
    int64_t flat_dim_ = 0;
};

// Argmax class index; ties break to the lowest index.
template <typename T>
int64_t model_truth(const Tensor<T>& logits) {
    TAME_CHECK_SHAPE(logits.dim() == 1 || (logits.dim() == 2 && logits.size(0) == 1),
                     "model_truth expects a single sample's logits");
    TAME_CHECK_VALUE(logits.all_finite(), "model_truth: non-finite logits");
    return argmax_rows(logits)[0];
}

// ---------------------------------------------------------------------------
// Training (plumbing; the paper's backbones arrive pretrained)
// ---------------------------------------------------------------------------

struct BackboneTrainConfig {
    int64_t epochs = 12;
    int64_t batch_size = 32;
    OneCycleConfig schedule{0.05, 25.0, 1e4, 0.3};
    double momentum = 0.9;
    uint64_t seed = 1;
    int64_t augment_shift = 4;
};

struct BackboneTrainReport {
    std::vector<double> epoch_loss;
    double val_accuracy = 0.0;
};

template <typename T>
double classification_accuracy(const Backbone<T>& model, const DatasetSplit& split,
                               const DatasetStats& stats, int64_t batch_size = 64) {
    int64_t n = static_cast<int64_t>(split.images.size());
    int64_t correct = 0;
    for (int64_t start = 0; start < n; start += batch_size) {
        std::vector<int64_t> idx;
        for (int64_t i = start; i < std::min(start + batch_size, n); ++i) idx.push_back(i);
        Tensor<T> batch = stack_batch<T>(split, stats, idx);
        Tensor<T> logits = model.forward(batch);
        auto pred = argmax_rows(logits);
        for (size_t i = 0; i < idx.size(); ++i)
            if (pred[i] == split.labels[static_cast<size_t>(idx[i])]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

// Supervised training on ground-truth labels. The model is returned frozen.
template <typename T>
BackboneTrainReport train_backbone(Backbone<T>& model, const Dataset& data,
                                   const BackboneTrainConfig& cfg) {
    TAME_CHECK_CONFIG(!data.train.images.empty() && !data.val.images.empty(),
                      "train_backbone: empty dataset split");
    int64_t classes = model.config().classes;
    {
        std::vector<bool> seen(static_cast<size_t>(classes), false);
        for (int64_t l : data.train.labels)
            if (l >= 0 && l < classes) seen[static_cast<size_t>(l)] = true;
        int64_t distinct = std::count(seen.begin(), seen.end(), true);
        TAME_CHECK_CONFIG(distinct >= classes, "training labels cover ", distinct, " of ",
                          classes, " classes");
    }

    BackboneTrainReport report;
    model.set_trainable(true);
    auto params = model.params();
    SgdMomentum<T> opt(params, static_cast<T>(cfg.momentum));
    Rng rng = Rng(cfg.seed).fork(0x6261636bull);  // independent of dataset streams

    int64_t n = static_cast<int64_t>(data.train.images.size());
    int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    int64_t total_steps = std::max<int64_t>(1, cfg.epochs * steps_per_epoch);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    int64_t gstep = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            std::vector<int64_t> idx(order.begin() + start,
                                     order.begin() + std::min(start + cfg.batch_size, n));
            Rng aug = rng.fork(static_cast<uint64_t>(gstep) * 2 + 1);
            Tensor<T> batch = stack_batch<T>(data.train, data.stats, idx, &aug,
                                             cfg.augment_shift);
            std::vector<int64_t> labels;
            for (int64_t i : idx) labels.push_back(data.train.labels[static_cast<size_t>(i)]);

            double lr = one_cycle_lr(gstep, total_steps, cfg.schedule);
            Tape<T> tape;
            Tensor<T> logits = model.forward(batch);
            Tensor<T> loss = cross_entropy(logits, labels);
            double loss_v = static_cast<double>(loss.item());
            TAME_CHECK(std::isfinite(loss_v), NumericError,
                       "backbone training diverged (loss=", loss_v, ") at epoch ", epoch,
                       " step ", gstep);
            tape.backward(loss);
            opt.step(static_cast<T>(lr));
            epoch_loss += loss_v;
            ++gstep;
        }
        report.epoch_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    }
    model.set_trainable(false);
    report.val_accuracy = classification_accuracy(model, data.val, data.stats);
    return report;
}

// ---------------------------------------------------------------------------
// Weight file adapters
// ---------------------------------------------------------------------------

template <typename T>
void save_backbone(const std::filesystem::path& path, Backbone<T>& model,
                   uint64_t config_digest, const DatasetStats& stats,
                   double val_accuracy = -1.0) {
    nlohmann::json meta = {{"kind", "backbone"},
                           {"config", model.config().to_json()},
                           {"mean", stats.mean},
                           {"std", stats.stddev}};
    if (val_accuracy >= 0) meta["val_accuracy"] = val_accuracy;
    std::vector<std::pair<std::string, const Tensor<T>*>> params;
    for (auto& [name, p] : model.named_params()) params.emplace_back(name, p);
    save_weights<T>(path, config_digest, meta.dump(), params);
}

template <typename T>
struct LoadedBackbone {
    Backbone<T> model;
    DatasetStats stats;
    nlohmann::json meta;
};

template <typename T>
LoadedBackbone<T> load_backbone(const std::filesystem::path& path, uint64_t expected_digest = 0) {
    WeightFile wf = load_weights(path, expected_digest);
    nlohmann::json meta = nlohmann::json::parse(wf.meta_json);
    TAME_CHECK_IO(meta.value("kind", "") == "backbone", path.string(),
                  " is not a backbone weight file");
    LoadedBackbone<T> out;
    BackboneConfig cfg = BackboneConfig::from_json(meta.at("config"));
    Rng rng(0);  // weights are overwritten below
    out.model = Backbone<T>(cfg, rng);
    for (auto& [name, p] : out.model.named_params()) assign_param(*p, wf, name);
    out.model.set_trainable(false);
    auto mean = meta.at("mean").get<std::array<double, 3>>();
    auto stddev = meta.at("std").get<std::array<double, 3>>();
    out.stats.mean = mean;
    out.stats.stddev = stddev;
    out.meta = std::move(meta);
    return out;
}

}  // namespace tame
