#pragma once

// Multi-branch attention module: one feature branch per tapped backbone layer
// (1x1 conv -> batch norm -> skip -> activation -> bilinear upsample), outputs
// concatenated and fused by a 1x1 conv into a class-discriminative explanation
// map. Training mode squashes with a sigmoid; inference mode rescales each
// class slice to [0,1] by min-max normalization.

#include <json.hpp>

#include <array>
#include <string>
#include <vector>

#include "tame/backbone.hpp"
#include "tame/error.hpp"
#include "tame/nn.hpp"
#include "tame/serialize.hpp"

namespace tame {

enum class ExplainMode { Train, Inference };

enum class BranchActivation { Relu, Sigmoid };

struct VariantFlags {
    bool skip_connection = true;
    bool batch_norm = true;
    BranchActivation branch_activation = BranchActivation::Relu;
    int64_t layer_subset = 3;  // number of taps used, deepest-first

    nlohmann::json to_json() const {
        return {{"skip_connection", skip_connection},
                {"batch_norm", batch_norm},
                {"branch_activation",
                 branch_activation == BranchActivation::Relu ? "relu" : "sigmoid"},
                {"layer_subset", layer_subset}};
    }

    static VariantFlags from_json(const nlohmann::json& j) {
        VariantFlags f;
        f.skip_connection = j.at("skip_connection").get<bool>();
        f.batch_norm = j.at("batch_norm").get<bool>();
        std::string act = j.at("branch_activation").get<std::string>();
        TAME_CHECK_CONFIG(act == "relu" || act == "sigmoid", "unknown branch activation '", act,
                          "'");
        f.branch_activation = act == "relu" ? BranchActivation::Relu : BranchActivation::Sigmoid;
        f.layer_subset = j.at("layer_subset").get<int64_t>();
        return f;
    }
};

// Min-max rescale of one explanation slice: min -> 0, max -> 1. A constant
// slice carries no ranking information and maps to all zeros. Idempotent.
template <typename T>
Tensor<T> rescale_minmax(const Tensor<T>& slice) {
    TAME_CHECK_VALUE(slice.all_finite(), "rescale_minmax: non-finite values");
    const auto& d = slice.data();
    T lo = d[0], hi = d[0];
    for (T v : d) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    Tensor<T> out = Tensor<T>::zeros(slice.shape());
    if (hi > lo) {
        T inv = T(1) / (hi - lo);
        for (size_t i = 0; i < d.size(); ++i) out.data()[i] = (d[i] - lo) * inv;
    }
    return out;
}

template <typename T>
struct ExplanationMap {
    Tensor<T> map;  // [N, Classes, H_e, W_e]
    ExplainMode mode = ExplainMode::Train;

    // Class slice of sample n as [H_e, W_e].
    Tensor<T> slice(int64_t class_id, int64_t n = 0) const {
        Tensor<T> sample = select_index(map, 0, n);
        return select_index(sample, 0, class_id);
    }
};

template <typename T>
class AttentionModule {
public:
    AttentionModule() = default;

    // tap_dims/tap_names describe every configured tap, shallow to deep; the
    // module keeps the deepest `flags.layer_subset` of them.
    AttentionModule(const std::vector<std::array<int64_t, 3>>& tap_dims,
                    const std::vector<std::string>& tap_names, int64_t classes,
                    VariantFlags flags, Rng& rng)
        : flags_(flags), classes_(classes) {
        TAME_CHECK_CONFIG(tap_dims.size() == tap_names.size() && !tap_dims.empty(),
                          "attention: tap metadata mismatch");
        TAME_CHECK_CONFIG(flags.layer_subset >= 1 &&
                              flags.layer_subset <= static_cast<int64_t>(tap_dims.size()),
                          "layer_subset ", flags.layer_subset, " out of range [1, ",
                          tap_dims.size(), "]");
        size_t first = tap_dims.size() - static_cast<size_t>(flags.layer_subset);
        int64_t total_channels = 0;
        for (size_t i = first; i < tap_dims.size(); ++i) {
            Branch br;
            br.name = tap_names[i];
            br.channels = tap_dims[i][0];
            br.in_h = tap_dims[i][1];
            br.in_w = tap_dims[i][2];
            br.conv = Conv2d<T>(br.channels, br.channels, 1, 1, 0, rng);
            if (flags_.batch_norm) br.bn = BatchNorm2d<T>(br.channels);
            branches_.push_back(std::move(br));
            total_channels += tap_dims[i][0];
            out_h_ = std::max(out_h_, tap_dims[i][1]);
            out_w_ = std::max(out_w_, tap_dims[i][2]);
        }
        fusion_ = Conv2d<T>(total_channels, classes_, 1, 1, 0, rng);
    }

    const VariantFlags& flags() const { return flags_; }
    int64_t classes() const { return classes_; }
    int64_t explanation_h() const { return out_h_; }
    int64_t explanation_w() const { return out_w_; }
    size_t branch_count() const { return branches_.size(); }
    std::vector<std::string> selected_taps() const {
        std::vector<std::string> out;
        for (const auto& b : branches_) out.push_back(b.name);
        return out;
    }

    // One feature branch: upsample(act(BN(conv(x)) + x)). The skip wraps
    // conv+BN and sits before the activation; upsampling always runs last.
    Tensor<T> feature_branch(size_t branch, const Tensor<T>& features, bool training) {
        TAME_CHECK_SHAPE(branch < branches_.size(), "branch index out of range");
        Branch& br = branches_[branch];
        Tensor<T> x = features;
        if (x.dim() == 3) x = reshape(x, {1, x.size(0), x.size(1), x.size(2)});
        TAME_CHECK_SHAPE(x.dim() == 4 && x.size(1) == br.channels, "feature branch ", branch,
                         " expects ", br.channels, " channels, got ", shape_str(x.shape()));
        Tensor<T> h = br.conv.forward(x);
        if (flags_.batch_norm) h = br.bn.forward(h, training);
        if (flags_.skip_connection) h = add(h, x);
        h = flags_.branch_activation == BranchActivation::Relu ? relu(h) : sigmoid(h);
        return bilinear_upsample(h, out_h_, out_w_);
    }

    // Concatenate attention maps in tap order, project to class channels,
    // then squash (train) or min-max rescale per class slice (inference).
    Tensor<T> fuse(const std::vector<Tensor<T>>& attention_maps, ExplainMode mode) {
        TAME_CHECK_SHAPE(attention_maps.size() == branches_.size(),
                         "fuse expects one map per branch");
        for (const auto& m : attention_maps)
            TAME_CHECK_SHAPE(m.dim() == 4 && m.size(-2) == out_h_ && m.size(-1) == out_w_,
                             "fuse: attention map ", shape_str(m.shape()),
                             " not upsampled to ", out_h_, "x", out_w_);
        Tensor<T> cat = attention_maps.size() == 1 ? attention_maps[0]
                                                   : concat(attention_maps, 1);
        Tensor<T> e = fusion_.forward(cat);
        if (mode == ExplainMode::Train) return sigmoid(e);
        // Inference: rescale each (sample, class) slice independently.
        Tensor<T> out = Tensor<T>::zeros(e.shape());
        int64_t plane = out_h_ * out_w_;
        int64_t slices = e.numel() / plane;
        for (int64_t s = 0; s < slices; ++s) {
            const T* src = e.ptr() + s * plane;
            T lo = src[0], hi = src[0];
            for (int64_t i = 0; i < plane; ++i) {
                lo = std::min(lo, src[i]);
                hi = std::max(hi, src[i]);
            }
            if (hi > lo) {
                T inv = T(1) / (hi - lo);
                T* dst = out.ptr() + s * plane;
                for (int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - lo) * inv;
            }
        }
        return out;
    }

    // Full pipeline over a tapped feature set (any superset of the selected
    // taps). Output map is [N, Classes, H_e, W_e].
    ExplanationMap<T> forward(const FeatureMapSet<T>& features, ExplainMode mode) {
        bool training = mode == ExplainMode::Train;
        std::vector<Tensor<T>> maps;
        for (size_t b = 0; b < branches_.size(); ++b) {
            const Tensor<T>* feat = nullptr;
            for (const auto& entry : features)
                if (entry.name == branches_[b].name) feat = &entry.tensor;
            TAME_CHECK_CONFIG(feat != nullptr, "feature set is missing tap '",
                              branches_[b].name, "'");
            maps.push_back(feature_branch(b, *feat, training));
        }
        return {fuse(maps, mode), mode};
    }

    // Single-sample explanation for one class, [H_e, W_e].
    Tensor<T> explain(const FeatureMapSet<T>& features, int64_t class_id, ExplainMode mode) {
        TAME_CHECK_VALUE(class_id >= 0 && class_id < classes_, "class ", class_id,
                         " out of range [0, ", classes_, ")");
        ExplanationMap<T> em = forward(features, mode);
        TAME_CHECK_SHAPE(em.map.size(0) == 1, "explain expects a single sample");
        return em.slice(class_id, 0);
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (size_t b = 0; b < branches_.size(); ++b) {
            std::string base = "branch" + std::to_string(b + 1);
            out.emplace_back(base + ".conv.weight", &branches_[b].conv.weight);
            out.emplace_back(base + ".conv.bias", &branches_[b].conv.bias);
            if (flags_.batch_norm) {
                out.emplace_back(base + ".bn.gamma", &branches_[b].bn.gamma);
                out.emplace_back(base + ".bn.beta", &branches_[b].bn.beta);
            }
        }
        out.emplace_back("fusion.weight", &fusion_.weight);
        out.emplace_back("fusion.bias", &fusion_.bias);
        return out;
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> out;
        for (auto& [name, p] : named_params()) out.push_back(p);
        return out;
    }

    // Non-trainable batch-norm running statistics, serialized alongside params.
    std::vector<std::pair<std::string, std::vector<T>*>> named_buffers() {
        std::vector<std::pair<std::string, std::vector<T>*>> out;
        if (!flags_.batch_norm) return out;
        for (size_t b = 0; b < branches_.size(); ++b) {
            std::string base = "branch" + std::to_string(b + 1);
            out.emplace_back(base + ".bn.running_mean", &branches_[b].bn.running_mean);
            out.emplace_back(base + ".bn.running_var", &branches_[b].bn.running_var);
        }
        return out;
    }

    nlohmann::json meta_json() const {
        nlohmann::json taps = nlohmann::json::array();
        for (const auto& b : branches_)
            taps.push_back({{"name", b.name}, {"c", b.channels}, {"h", b.in_h}, {"w", b.in_w}});
        return {{"kind", "attention"},
                {"flags", flags_.to_json()},
                {"classes", classes_},
                {"taps", taps}};
    }

private:
    struct Branch {
        std::string name;
        int64_t channels = 0;
        int64_t in_h = 0;
        int64_t in_w = 0;
        Conv2d<T> conv;
        BatchNorm2d<T> bn;
    };

    VariantFlags flags_;
    int64_t classes_ = 0;
    int64_t out_h_ = 0;
    int64_t out_w_ = 0;
    std::vector<Branch> branches_;
    Conv2d<T> fusion_;
};

template <typename T>
void save_attention(const std::filesystem::path& path, AttentionModule<T>& module,
                    uint64_t config_digest, const nlohmann::json& extra_meta = {}) {
    nlohmann::json meta = module.meta_json();
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) meta[it.key()] = it.value();
    std::vector<std::pair<std::string, const Tensor<T>*>> params;
    for (auto& [name, p] : module.named_params()) params.emplace_back(name, p);
    // Buffers ride along as extra tensors.
    std::vector<Tensor<T>> buffer_tensors;
    auto buffers = module.named_buffers();
    buffer_tensors.reserve(buffers.size());
    std::vector<std::string> buffer_names;
    for (auto& [name, buf] : buffers) {
        buffer_tensors.push_back(
            Tensor<T>::from({static_cast<int64_t>(buf->size())}, *buf));
        buffer_names.push_back(name);
    }
    for (size_t i = 0; i < buffer_tensors.size(); ++i)
        params.emplace_back(buffer_names[i], &buffer_tensors[i]);
    save_weights<T>(path, config_digest, meta.dump(), params);
}

template <typename T>
struct LoadedAttention {
    AttentionModule<T> module;
    nlohmann::json meta;
};

template <typename T>
LoadedAttention<T> load_attention(const std::filesystem::path& path,
                                  uint64_t expected_digest = 0) {
    WeightFile wf = load_weights(path, expected_digest);
    nlohmann::json meta = nlohmann::json::parse(wf.meta_json);
    TAME_CHECK_IO(meta.value("kind", "") == "attention", path.string(),
                  " is not an attention weight file");
    VariantFlags flags = VariantFlags::from_json(meta.at("flags"));
    std::vector<std::array<int64_t, 3>> dims;
    std::vector<std::string> names;
    for (const auto& t : meta.at("taps")) {
        dims.push_back({t.at("c").get<int64_t>(), t.at("h").get<int64_t>(),
                        t.at("w").get<int64_t>()});
        names.push_back(t.at("name").get<std::string>());
    }
    flags.layer_subset = static_cast<int64_t>(dims.size());  // stored taps are the selection
    Rng rng(0);
    LoadedAttention<T> out{AttentionModule<T>(dims, names, meta.at("classes").get<int64_t>(),
                                              flags, rng),
                           meta};
    for (auto& [name, p] : out.module.named_params()) assign_param(*p, wf, name);
    for (auto& [name, buf] : out.module.named_buffers()) {
        const NamedParam* np = wf.find(name);
        TAME_CHECK_IO(np != nullptr, "weight file missing buffer ", name);
        TAME_CHECK_SHAPE(np->values.size() == buf->size(), "buffer ", name, " size mismatch");
        for (size_t i = 0; i < buf->size(); ++i) (*buf)[i] = static_cast<T>(np->values[i]);
    }
    return out;
}

}  // namespace tame
