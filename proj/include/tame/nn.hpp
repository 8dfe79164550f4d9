#pragma once

// Neural-network operations on 4-D [N, C, H, W] tensors: convolution,
// max-pooling, batch normalization, bilinear upsampling, and small module
// wrappers that own parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tame/rng.hpp"
#include "tame/tensor.hpp"

namespace tame {

namespace detail {

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// Valid output range [lo, hi) so that o*stride - pad + koff stays inside [0, in).
inline void valid_out_range(int64_t out, int64_t in, int64_t stride, int64_t pad, int64_t koff,
                            int64_t& lo, int64_t& hi) {
    int64_t a = pad - koff;  // need o*stride >= a
    lo = a <= 0 ? 0 : (a + stride - 1) / stride;
    int64_t b = in - 1 + pad - koff;  // need o*stride <= b
    hi = b < 0 ? 0 : b / stride + 1;
    lo = std::min(lo, out);
    hi = std::min(hi, out);
    if (hi < lo) hi = lo;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int64_t stride = 1, int64_t padding = 0) {
    TAME_CHECK_SHAPE(input.dim() == 4, "conv2d input must be [N, C, H, W], got ",
                     shape_str(input.shape()));
    TAME_CHECK_SHAPE(weight.dim() == 4, "conv2d weight must be [Cout, Cin, k, k], got ",
                     shape_str(weight.shape()));
    int64_t n = input.size(0), cin = input.size(1), h = input.size(2), w = input.size(3);
    int64_t cout = weight.size(0), k = weight.size(2);
    TAME_CHECK_SHAPE(weight.size(1) == cin, "conv2d: weight expects ", weight.size(1),
                     " input channels, input has ", cin);
    TAME_CHECK_SHAPE(weight.size(3) == k, "conv2d: non-square kernel");
    TAME_CHECK_VALUE(k == 1 || k == 3, "conv2d: kernel size ", k, " unsupported (1 or 3)");
    TAME_CHECK_VALUE(stride >= 1, "conv2d: stride must be >= 1");
    TAME_CHECK_VALUE(padding >= 0, "conv2d: negative padding");
    if (bias.defined())
        TAME_CHECK_SHAPE(bias.dim() == 1 && bias.size(0) == cout, "conv2d: bias shape ",
                         shape_str(bias.shape()), " does not match ", cout, " output channels");
    int64_t oh = detail::conv_out_dim(h, k, stride, padding);
    int64_t ow = detail::conv_out_dim(w, k, stride, padding);
    TAME_CHECK_SHAPE(oh >= 1 && ow >= 1, "conv2d: output would be empty for input ",
                     shape_str(input.shape()));

    Tensor<T> out = Tensor<T>::zeros({n, cout, oh, ow});
    const T* px = input.ptr();
    const T* pw = weight.ptr();
    T* po = out.ptr();

    for (int64_t in_ = 0; in_ < n; ++in_) {
        const T* xn = px + in_ * cin * h * w;
        T* yn = po + in_ * cout * oh * ow;
        for (int64_t co = 0; co < cout; ++co) {
            T* yc = yn + co * oh * ow;
            if (bias.defined()) {
                T bv = bias.ptr()[co];
                for (int64_t i = 0; i < oh * ow; ++i) yc[i] = bv;
            }
            for (int64_t ci = 0; ci < cin; ++ci) {
                const T* xc = xn + ci * h * w;
                const T* wk = pw + (co * cin + ci) * k * k;
                for (int64_t kh = 0; kh < k; ++kh) {
                    int64_t lo_h, hi_h;
                    detail::valid_out_range(oh, h, stride, padding, kh, lo_h, hi_h);
                    for (int64_t kw = 0; kw < k; ++kw) {
                        T wv = wk[kh * k + kw];
                        int64_t lo_w, hi_w;
                        detail::valid_out_range(ow, w, stride, padding, kw, lo_w, hi_w);
                        for (int64_t o = lo_h; o < hi_h; ++o) {
                            const T* xrow = xc + (o * stride - padding + kh) * w - padding + kw;
                            T* yrow = yc + o * ow;
                            if (stride == 1) {
                                for (int64_t q = lo_w; q < hi_w; ++q) yrow[q] += wv * xrow[q];
                            } else {
                                for (int64_t q = lo_w; q < hi_w; ++q)
                                    yrow[q] += wv * xrow[q * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    auto xi = input.impl();
    auto wi = weight.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    auto oi = out.impl();
    detail::record({&input, &weight, &bias}, out,
                   [xi, wi, bi, oi, n, cin, cout, h, w, oh, ow, k, stride, padding] {
        const T* gy = oi->grad.data();
        if (xi->requires_grad) {
            auto& gx = xi->ensure_grad();
            for (int64_t in_ = 0; in_ < n; ++in_) {
                T* gxn = gx.data() + in_ * cin * h * w;
                const T* gyn = gy + in_ * cout * oh * ow;
                for (int64_t co = 0; co < cout; ++co) {
                    const T* gyc = gyn + co * oh * ow;
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        T* gxc = gxn + ci * h * w;
                        const T* wk = wi->data.data() + (co * cin + ci) * k * k;
                        for (int64_t kh = 0; kh < k; ++kh) {
                            int64_t lo_h, hi_h;
                            detail::valid_out_range(oh, h, stride, padding, kh, lo_h, hi_h);
                            for (int64_t kw = 0; kw < k; ++kw) {
                                T wv = wk[kh * k + kw];
                                if (wv == T(0)) continue;
                                int64_t lo_w, hi_w;
                                detail::valid_out_range(ow, w, stride, padding, kw, lo_w, hi_w);
                                for (int64_t o = lo_h; o < hi_h; ++o) {
                                    T* gxrow =
                                        gxc + (o * stride - padding + kh) * w - padding + kw;
                                    const T* gyrow = gyc + o * ow;
                                    if (stride == 1) {
                                        for (int64_t q = lo_w; q < hi_w; ++q)
                                            gxrow[q] += wv * gyrow[q];
                                    } else {
                                        for (int64_t q = lo_w; q < hi_w; ++q)
                                            gxrow[q * stride] += wv * gyrow[q];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if (wi->requires_grad) {
            auto& gw = wi->ensure_grad();
            for (int64_t in_ = 0; in_ < n; ++in_) {
                const T* xn = xi->data.data() + in_ * cin * h * w;
                const T* gyn = gy + in_ * cout * oh * ow;
                for (int64_t co = 0; co < cout; ++co) {
                    const T* gyc = gyn + co * oh * ow;
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        const T* xc = xn + ci * h * w;
                        T* gwk = gw.data() + (co * cin + ci) * k * k;
                        for (int64_t kh = 0; kh < k; ++kh) {
                            int64_t lo_h, hi_h;
                            detail::valid_out_range(oh, h, stride, padding, kh, lo_h, hi_h);
                            for (int64_t kw = 0; kw < k; ++kw) {
                                int64_t lo_w, hi_w;
                                detail::valid_out_range(ow, w, stride, padding, kw, lo_w, hi_w);
                                T acc = T(0);
                                for (int64_t o = lo_h; o < hi_h; ++o) {
                                    const T* xrow =
                                        xc + (o * stride - padding + kh) * w - padding + kw;
                                    const T* gyrow = gyc + o * ow;
                                    if (stride == 1) {
                                        for (int64_t q = lo_w; q < hi_w; ++q)
                                            acc += gyrow[q] * xrow[q];
                                    } else {
                                        for (int64_t q = lo_w; q < hi_w; ++q)
                                            acc += gyrow[q] * xrow[q * stride];
                                    }
                                }
                                gwk[kh * k + kw] += acc;
                            }
                        }
                    }
                }
            }
        }
        if (bi && bi->requires_grad) {
            auto& gb = bi->ensure_grad();
            for (int64_t in_ = 0; in_ < n; ++in_)
                for (int64_t co = 0; co < cout; ++co) {
                    const T* gyc = gy + (in_ * cout + co) * oh * ow;
                    T acc = T(0);
                    for (int64_t i = 0; i < oh * ow; ++i) acc += gyc[i];
                    gb[co] += acc;
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// maxpool2d
// ---------------------------------------------------------------------------

// No implicit padding; the spatial dims must tile exactly. Gradient is routed
// to the first (row-major) maximal element of each window.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int64_t window, int64_t stride) {
    TAME_CHECK_SHAPE(input.dim() == 4, "maxpool2d input must be [N, C, H, W]");
    TAME_CHECK_VALUE(window >= 1 && stride >= 1, "maxpool2d: bad window/stride");
    int64_t n = input.size(0), c = input.size(1), h = input.size(2), w = input.size(3);
    TAME_CHECK_SHAPE((h - window) % stride == 0 && (w - window) % stride == 0 && h >= window &&
                         w >= window,
                     "maxpool2d: spatial dims ", h, "x", w, " not divisible by stride ", stride,
                     " with window ", window);
    int64_t oh = (h - window) / stride + 1;
    int64_t ow = (w - window) / stride + 1;
    Tensor<T> out = Tensor<T>::zeros({n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * oh * ow));
    const T* px = input.ptr();
    T* po = out.ptr();
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* xc = px + nc * h * w;
        T* yc = po + nc * oh * ow;
        int64_t* am = argmax->data() + nc * oh * ow;
        for (int64_t o = 0; o < oh; ++o)
            for (int64_t q = 0; q < ow; ++q) {
                int64_t base_h = o * stride, base_w = q * stride;
                T best = xc[base_h * w + base_w];
                int64_t best_idx = base_h * w + base_w;
                for (int64_t dh = 0; dh < window; ++dh)
                    for (int64_t dw = 0; dw < window; ++dw) {
                        int64_t idx = (base_h + dh) * w + base_w + dw;
                        if (xc[idx] > best) {  // strict: first occurrence wins ties
                            best = xc[idx];
                            best_idx = idx;
                        }
                    }
                yc[o * ow + q] = best;
                am[o * ow + q] = best_idx;
            }
    }
    auto xi = input.impl();
    auto oi = out.impl();
    detail::record({&input}, out, [xi, oi, argmax, n, c, h, w, oh, ow] {
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        for (int64_t nc = 0; nc < n * c; ++nc) {
            const T* gyc = oi->grad.data() + nc * oh * ow;
            const int64_t* am = argmax->data() + nc * oh * ow;
            T* gxc = gx.data() + nc * h * w;
            for (int64_t i = 0; i < oh * ow; ++i) gxc[am[i]] += gyc[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

// Train mode normalizes with per-channel batch statistics (biased variance)
// and folds them into the running stats; eval mode uses the running stats.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                      T momentum, T eps) {
    TAME_CHECK_SHAPE(input.dim() == 4, "batchnorm2d input must be [N, C, H, W]");
    int64_t n = input.size(0), c = input.size(1), h = input.size(2), w = input.size(3);
    TAME_CHECK_SHAPE(gamma.dim() == 1 && gamma.size(0) == c, "batchnorm2d: gamma shape ",
                     shape_str(gamma.shape()), " does not match ", c, " channels");
    TAME_CHECK_SHAPE(beta.dim() == 1 && beta.size(0) == c, "batchnorm2d: beta shape mismatch");
    TAME_CHECK_SHAPE(static_cast<int64_t>(running_mean.size()) == c &&
                         static_cast<int64_t>(running_var.size()) == c,
                     "batchnorm2d: running stats size mismatch");
    TAME_CHECK_VALUE(eps > T(0), "batchnorm2d: eps must be positive");

    int64_t plane = h * w;
    int64_t count = n * plane;
    Tensor<T> out = Tensor<T>::zeros(input.shape());

    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(c));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(c));
    const T* px = input.ptr();
    T* po = out.ptr();

    for (int64_t ch = 0; ch < c; ++ch) {
        T m, v;
        if (training) {
            T acc = T(0);
            for (int64_t in_ = 0; in_ < n; ++in_) {
                const T* xc = px + (in_ * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) acc += xc[i];
            }
            m = acc / static_cast<T>(count);
            T vacc = T(0);
            for (int64_t in_ = 0; in_ < n; ++in_) {
                const T* xc = px + (in_ * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    T d = xc[i] - m;
                    vacc += d * d;
                }
            }
            v = vacc / static_cast<T>(count);
            running_mean[static_cast<size_t>(ch)] =
                (T(1) - momentum) * running_mean[static_cast<size_t>(ch)] + momentum * m;
            running_var[static_cast<size_t>(ch)] =
                (T(1) - momentum) * running_var[static_cast<size_t>(ch)] + momentum * v;
        } else {
            m = running_mean[static_cast<size_t>(ch)];
            v = running_var[static_cast<size_t>(ch)];
        }
        (*mean)[static_cast<size_t>(ch)] = m;
        (*invstd)[static_cast<size_t>(ch)] = T(1) / std::sqrt(v + eps);
        T g = gamma.ptr()[ch];
        T b = beta.ptr()[ch];
        T is = (*invstd)[static_cast<size_t>(ch)];
        for (int64_t in_ = 0; in_ < n; ++in_) {
            const T* xc = px + (in_ * c + ch) * plane;
            T* yc = po + (in_ * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) yc[i] = g * (xc[i] - m) * is + b;
        }
    }

    auto xi = input.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    auto oi = out.impl();
    detail::record({&input, &gamma, &beta}, out,
                   [xi, gi, bi, oi, mean, invstd, training, n, c, plane, count] {
        const T* gy = oi->grad.data();
        const T* px2 = xi->data.data();
        for (int64_t ch = 0; ch < c; ++ch) {
            T m = (*mean)[static_cast<size_t>(ch)];
            T is = (*invstd)[static_cast<size_t>(ch)];
            T g = gi->data[static_cast<size_t>(ch)];
            // Per-channel sums of dy and dy * xhat.
            T sum_dy = T(0), sum_dy_xhat = T(0);
            for (int64_t in_ = 0; in_ < n; ++in_) {
                const T* xc = px2 + (in_ * c + ch) * plane;
                const T* gyc = gy + (in_ * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum_dy += gyc[i];
                    sum_dy_xhat += gyc[i] * (xc[i] - m) * is;
                }
            }
            if (gi->requires_grad) gi->ensure_grad()[static_cast<size_t>(ch)] += sum_dy_xhat;
            if (bi->requires_grad) bi->ensure_grad()[static_cast<size_t>(ch)] += sum_dy;
            if (xi->requires_grad) {
                auto& gx = xi->ensure_grad();
                T inv_count = T(1) / static_cast<T>(count);
                for (int64_t in_ = 0; in_ < n; ++in_) {
                    const T* xc = px2 + (in_ * c + ch) * plane;
                    const T* gyc = gy + (in_ * c + ch) * plane;
                    T* gxc = gx.data() + (in_ * c + ch) * plane;
                    if (training) {
                        for (int64_t i = 0; i < plane; ++i) {
                            T xhat = (xc[i] - m) * is;
                            gxc[i] += g * is *
                                      (gyc[i] - sum_dy * inv_count - xhat * sum_dy_xhat * inv_count);
                        }
                    } else {
                        for (int64_t i = 0; i < plane; ++i) gxc[i] += g * is * gyc[i];
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// bilinear_upsample
// ---------------------------------------------------------------------------

// Half-pixel-center sampling: src = (dst + 0.5) * (in/out) - 0.5, clamped to
// the valid range. Works on the trailing two axes of any rank >= 2 tensor.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, int64_t out_h, int64_t out_w) {
    TAME_CHECK_SHAPE(input.dim() >= 2, "bilinear_upsample expects rank >= 2");
    int64_t h = input.size(-2), w = input.size(-1);
    TAME_CHECK_VALUE(out_h >= h && out_w >= w, "bilinear_upsample: output ", out_h, "x", out_w,
                     " smaller than input ", h, "x", w);
    int64_t channels = input.numel() / (h * w);
    Shape os = input.shape();
    os[os.size() - 2] = out_h;
    os[os.size() - 1] = out_w;

    struct Axis {
        std::vector<int64_t> i0, i1;
        std::vector<T> f;
    };
    auto make_axis = [](int64_t out_n, int64_t in_n) {
        Axis ax;
        ax.i0.resize(static_cast<size_t>(out_n));
        ax.i1.resize(static_cast<size_t>(out_n));
        ax.f.resize(static_cast<size_t>(out_n));
        double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
        for (int64_t d = 0; d < out_n; ++d) {
            double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
            if (src < 0.0) src = 0.0;
            if (src > static_cast<double>(in_n - 1)) src = static_cast<double>(in_n - 1);
            int64_t lo = static_cast<int64_t>(std::floor(src));
            if (lo > in_n - 1) lo = in_n - 1;
            ax.i0[static_cast<size_t>(d)] = lo;
            ax.i1[static_cast<size_t>(d)] = std::min(lo + 1, in_n - 1);
            ax.f[static_cast<size_t>(d)] = static_cast<T>(src - static_cast<double>(lo));
        }
        return ax;
    };
    auto ah = std::make_shared<Axis>(make_axis(out_h, h));
    auto aw = std::make_shared<Axis>(make_axis(out_w, w));

    Tensor<T> out = Tensor<T>::zeros(os);
    const T* px = input.ptr();
    T* po = out.ptr();
    for (int64_t ch = 0; ch < channels; ++ch) {
        const T* xc = px + ch * h * w;
        T* yc = po + ch * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            int64_t y0 = ah->i0[static_cast<size_t>(oy)], y1 = ah->i1[static_cast<size_t>(oy)];
            T fy = ah->f[static_cast<size_t>(oy)];
            const T* row0 = xc + y0 * w;
            const T* row1 = xc + y1 * w;
            T* orow = yc + oy * out_w;
            for (int64_t ox = 0; ox < out_w; ++ox) {
                int64_t x0 = aw->i0[static_cast<size_t>(ox)], x1 = aw->i1[static_cast<size_t>(ox)];
                T fx = aw->f[static_cast<size_t>(ox)];
                T top = row0[x0] + fx * (row0[x1] - row0[x0]);
                T bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                orow[ox] = top + fy * (bot - top);
            }
        }
    }

    auto xi = input.impl();
    auto oi = out.impl();
    detail::record({&input}, out, [xi, oi, ah, aw, channels, h, w, out_h, out_w] {
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        for (int64_t ch = 0; ch < channels; ++ch) {
            const T* gyc = oi->grad.data() + ch * out_h * out_w;
            T* gxc = gx.data() + ch * h * w;
            for (int64_t oy = 0; oy < out_h; ++oy) {
                int64_t y0 = ah->i0[static_cast<size_t>(oy)], y1 = ah->i1[static_cast<size_t>(oy)];
                T fy = ah->f[static_cast<size_t>(oy)];
                for (int64_t ox = 0; ox < out_w; ++ox) {
                    int64_t x0 = aw->i0[static_cast<size_t>(ox)],
                            x1 = aw->i1[static_cast<size_t>(ox)];
                    T fx = aw->f[static_cast<size_t>(ox)];
                    T g = gyc[oy * out_w + ox];
                    gxc[y0 * w + x0] += (T(1) - fy) * (T(1) - fx) * g;
                    gxc[y0 * w + x1] += (T(1) - fy) * fx * g;
                    gxc[y1 * w + x0] += fy * (T(1) - fx) * g;
                    gxc[y1 * w + x1] += fy * fx * g;
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Parameter-owning modules
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
    Tensor<T> weight;  // [Cout, Cin, k, k]
    Tensor<T> bias;    // [Cout]
    int64_t stride = 1;
    int64_t padding = 0;

    Conv2d() = default;
    Conv2d(int64_t cin, int64_t cout, int64_t k, int64_t stride_, int64_t padding_, Rng& rng)
        : stride(stride_), padding(padding_) {
        weight = Tensor<T>::zeros({cout, cin, k, k});
        bias = Tensor<T>::zeros({cout});
        // He initialization for the fan-in of this kernel.
        double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
        for (T& v : weight.data()) v = static_cast<T>(rng.normal(0.0, std));
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

    std::vector<Tensor<T>*> params() { return {&weight, &bias}; }
};

template <typename T>
struct Linear {
    Tensor<T> weight;  // [Out, In]
    Tensor<T> bias;    // [Out]

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng) {
        weight = Tensor<T>::zeros({out, in});
        bias = Tensor<T>::zeros({out});
        double std = std::sqrt(2.0 / static_cast<double>(in));
        for (T& v : weight.data()) v = static_cast<T>(rng.normal(0.0, std));
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }

    std::vector<Tensor<T>*> params() { return {&weight, &bias}; }
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma;
    Tensor<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2d() = default;
    explicit BatchNorm2d(int64_t channels) {
        gamma = Tensor<T>::ones({channels});
        beta = Tensor<T>::zeros({channels});
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
        running_mean.assign(static_cast<size_t>(channels), T(0));
        running_var.assign(static_cast<size_t>(channels), T(1));
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        return batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }

    std::vector<Tensor<T>*> params() { return {&gamma, &beta}; }
};

}  // namespace tame
