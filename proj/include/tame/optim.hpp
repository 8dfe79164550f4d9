#pragma once

// SGD with momentum and the one-cycle learning-rate policy.

#include <cmath>
#include <cstdint>
#include <vector>

#include "tame/error.hpp"
#include "tame/tensor.hpp"

namespace tame {

struct OneCycleConfig {
    double max_lr = 0.01;
    double start_div = 25.0;    // initial lr = max_lr / start_div
    double final_div = 1e4;     // final lr   = max_lr / final_div
    double peak_fraction = 0.3; // fraction of steps spent rising
};

// Cosine-annealed two-phase schedule: rises from max_lr/start_div to max_lr
// over the first peak_fraction of steps, then falls to max_lr/final_div.
// Endpoints and the peak are exact.
inline double one_cycle_lr(int64_t step, int64_t total_steps, const OneCycleConfig& cfg) {
    TAME_CHECK_VALUE(total_steps >= 1, "one_cycle_lr: total_steps must be >= 1");
    TAME_CHECK_VALUE(step >= 0 && step < total_steps, "one_cycle_lr: step ", step,
                     " out of range [0, ", total_steps, ")");
    double lo = cfg.max_lr / cfg.start_div;
    double end = cfg.max_lr / cfg.final_div;
    if (total_steps == 1) return lo;
    int64_t peak = std::llround(cfg.peak_fraction * static_cast<double>(total_steps));
    peak = std::max<int64_t>(1, std::min(peak, total_steps - 1));
    if (step <= peak) {
        double u = static_cast<double>(step) / static_cast<double>(peak);
        return lo + (cfg.max_lr - lo) * 0.5 * (1.0 - std::cos(M_PI * u));
    }
    int64_t tail = total_steps - 1 - peak;
    if (tail == 0) return end;
    double u = static_cast<double>(step - peak) / static_cast<double>(tail);
    return end + (cfg.max_lr - end) * 0.5 * (1.0 + std::cos(M_PI * u));
}

// v <- momentum * v + g;  p <- p - lr * v. Gradients are cleared after the
// update so each step starts from zero accumulation.
template <typename T>
class SgdMomentum {
public:
    SgdMomentum(std::vector<Tensor<T>*> params, T momentum)
        : params_(std::move(params)), momentum_(momentum) {
        for (auto* p : params_) velocity_.emplace_back(p->data().size(), T(0));
    }

    void step(T lr) {
        for (size_t k = 0; k < params_.size(); ++k) {
            Tensor<T>* p = params_[k];
            std::vector<T>& v = velocity_[k];
            const T* g = p->grad_defined() ? p->grad().data() : nullptr;
            T* w = p->ptr();
            for (size_t i = 0; i < v.size(); ++i) {
                v[i] = momentum_ * v[i] + (g ? g[i] : T(0));
                w[i] -= lr * v[i];
            }
            p->zero_grad();
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

private:
    std::vector<Tensor<T>*> params_;
    std::vector<std::vector<T>> velocity_;
    T momentum_;
};

}  // namespace tame
