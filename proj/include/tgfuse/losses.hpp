#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "tgfuse/errors.hpp"
#include "tgfuse/imaging.hpp"
#include "tgfuse/tape.hpp"
#include "tgfuse/tensor.hpp"
#include "tgfuse/vlf.hpp"

namespace tgfuse {

enum class IntensityMode { Max, Mean };

// Per-task loss wiring. Weights follow the task: intensity targets are the
// elementwise max for IVF and the mean for MFF/MEF; MIF runs inference only.
struct TaskConfig {
    FusionTask task = FusionTask::IVF;
    double alpha1 = 10.0;
    double alpha2 = 0.0;
    IntensityMode intensity_mode = IntensityMode::Max;
    bool ssim_enabled = false;

    static TaskConfig for_task(FusionTask t) {
        TaskConfig cfg;
        cfg.task = t;
        switch (t) {
            case FusionTask::IVF:
                cfg.alpha1 = 10.0;
                cfg.alpha2 = 0.0;
                cfg.intensity_mode = IntensityMode::Max;
                cfg.ssim_enabled = false;
                break;
            case FusionTask::MFF:
                cfg.alpha1 = 50.0;
                cfg.alpha2 = 10.0;
                cfg.intensity_mode = IntensityMode::Mean;
                cfg.ssim_enabled = true;
                break;
            case FusionTask::MEF:
                cfg.alpha1 = 100.0;
                cfg.alpha2 = 1.0;
                cfg.intensity_mode = IntensityMode::Mean;
                cfg.ssim_enabled = true;
                break;
            case FusionTask::MIF:
                throw UnsupportedTaskError("MIF does not need fine-tuning training");
        }
        return cfg;
    }
};

namespace lossdetail {

template <typename T>
void check_triple(const std::vector<int64_t>& f, const TensorT<T>& a, const TensorT<T>& b) {
    require(f.size() == 3 && f[0] == 1, "loss inputs must be (1,H,W)");
    require(a.shape == f && b.shape == f, "loss input shape mismatch");
}

}  // namespace lossdetail

// Differentiable Sobel gradient-magnitude map with replicate padding. The
// kernel is applied as paired differences so constant regions are exactly 0.
template <typename T>
Var<T> sobel_magnitude(Var<T> img) {
    const auto& s = img.val().shape;
    require(s.size() == 3 && s[0] == 1, "sobel_magnitude expects (1,H,W)");
    const int64_t H = s[1], W = s[2];
    Var<T> p = replicate_pad2d(img, 1);
    auto off = [&](int dy, int dx) {
        return slice(slice(p, 1, 1 + dy, H), 2, 1 + dx, W);
    };
    Var<T> gx = add(add(sub(off(-1, 1), off(-1, -1)), scale(sub(off(0, 1), off(0, -1)), T(2))),
                    sub(off(1, 1), off(1, -1)));
    Var<T> gy = add(add(sub(off(1, -1), off(-1, -1)), scale(sub(off(1, 0), off(-1, 0)), T(2))),
                    sub(off(1, 1), off(-1, 1)));
    return sqrt_op(add(square(gx), square(gy)));
}

// L_int = mean |F - target(I1,I2)| with target = elementwise max or mean.
template <typename T>
Var<T> intensity_loss(Var<T> fused, const TensorT<T>& i1, const TensorT<T>& i2,
                      IntensityMode mode) {
    lossdetail::check_triple(fused.val().shape, i1, i2);
    Var<T> a = fused.tape ? fused.tape->constant(i1) : Var<T>(i1);
    Var<T> b = fused.tape ? fused.tape->constant(i2) : Var<T>(i2);
    Var<T> target = mode == IntensityMode::Max ? maximum(a, b) : scale(add(a, b), T(0.5));
    return mean_all(abs_op(sub(fused, target)));
}

// L_grad = mean | |grad F| - max(|grad I1|, |grad I2|) |.
template <typename T>
Var<T> gradient_loss(Var<T> fused, const TensorT<T>& i1, const TensorT<T>& i2) {
    lossdetail::check_triple(fused.val().shape, i1, i2);
    Var<T> a = fused.tape ? fused.tape->constant(i1) : Var<T>(i1);
    Var<T> b = fused.tape ? fused.tape->constant(i2) : Var<T>(i2);
    Var<T> target = maximum(sobel_magnitude(a), sobel_magnitude(b));
    return mean_all(abs_op(sub(sobel_magnitude(fused), target)));
}

inline constexpr int kSsimWindow = 8;
inline constexpr double kSsimC = 0.03 * 0.03;  // (0.03 * dynamic range)^2, range 1.0

// Single-scale MEF-SSIM. Per 8x8 window (stride 1) the desired patch takes
// the strongest mean-removed norm as contrast and the contrast-weighted mean
// of source structures as direction; the score is the SSIM structure/contrast
// comparison between the desired patch and the fused patch.
template <typename T>
Var<T> mef_ssim_score(Var<T> fused, const TensorT<T>& i1, const TensorT<T>& i2) {
    lossdetail::check_triple(fused.val().shape, i1, i2);
    const int64_t H = fused.val().shape[1], W = fused.val().shape[2];
    require(H >= kSsimWindow && W >= kSsimWindow, "mef_ssim needs at least 8x8 images");
    const int64_t ny = H - kSsimWindow + 1, nx = W - kSsimWindow + 1;
    const int64_t nw = ny * nx;
    const int64_t N = kSsimWindow * kSsimWindow;
    constexpr double eps = 1e-12;

    // Desired patches depend only on the sources; build them outside the tape.
    TensorT<T> desired({nw, N});
    TensorT<T> den_const({nw});  // ||desired||^2/N + C per window
    std::vector<double> p1(static_cast<size_t>(N)), p2(static_cast<size_t>(N));
    for (int64_t wy = 0; wy < ny; ++wy)
        for (int64_t wx = 0; wx < nx; ++wx) {
            const int64_t wi = wy * nx + wx;
            double m1 = 0, m2 = 0;
            for (int64_t dy = 0; dy < kSsimWindow; ++dy)
                for (int64_t dx = 0; dx < kSsimWindow; ++dx) {
                    int64_t idx = dy * kSsimWindow + dx;
                    p1[static_cast<size_t>(idx)] =
                        i1.data[static_cast<size_t>((wy + dy) * W + wx + dx)];
                    p2[static_cast<size_t>(idx)] =
                        i2.data[static_cast<size_t>((wy + dy) * W + wx + dx)];
                    m1 += p1[static_cast<size_t>(idx)];
                    m2 += p2[static_cast<size_t>(idx)];
                }
            m1 /= static_cast<double>(N);
            m2 /= static_cast<double>(N);
            double c1 = 0, c2 = 0;
            for (int64_t j = 0; j < N; ++j) {
                p1[static_cast<size_t>(j)] -= m1;
                p2[static_cast<size_t>(j)] -= m2;
                c1 += p1[static_cast<size_t>(j)] * p1[static_cast<size_t>(j)];
                c2 += p2[static_cast<size_t>(j)] * p2[static_cast<size_t>(j)];
            }
            c1 = std::sqrt(c1);
            c2 = std::sqrt(c2);
            const double chat = std::max(c1, c2);
            // Contrast-weighted mean of unit structures; c_k * s_k == p_k.
            const double wsum = std::max(c1 + c2, eps);
            double snorm2 = 0;
            double dn2 = 0;
            for (int64_t j = 0; j < N; ++j) {
                double sbar = (p1[static_cast<size_t>(j)] + p2[static_cast<size_t>(j)]) / wsum;
                p1[static_cast<size_t>(j)] = sbar;  // reuse as s-bar scratch
                snorm2 += sbar * sbar;
            }
            const double sn = std::max(std::sqrt(snorm2), eps);
            for (int64_t j = 0; j < N; ++j) {
                double d = chat * p1[static_cast<size_t>(j)] / sn;
                desired.data[static_cast<size_t>(wi * N + j)] = static_cast<T>(d);
                dn2 += d * d;
            }
            den_const.data[static_cast<size_t>(wi)] =
                static_cast<T>(dn2 / static_cast<double>(N) + kSsimC);
        }

    Var<T> windows = unfold(fused, kSsimWindow, 1);                      // (nw, N)
    Var<T> mu = mean_axes(windows, {1}, true);                          // (nw, 1)
    Var<T> centered = sub(windows, mu);
    Var<T> des = fused.tape ? fused.tape->constant(desired) : Var<T>(desired);
    Var<T> dot = reduce_sum(mul(centered, des), {1}, false);            // (nw)
    Var<T> n2 = reduce_sum(square(centered), {1}, false);               // (nw)
    Var<T> num = add_scalar(scale(dot, T(2.0 / static_cast<double>(N))), T(kSsimC));
    Var<T> denc = fused.tape ? fused.tape->constant(den_const) : Var<T>(den_const);
    Var<T> den = add(scale(n2, T(1.0 / static_cast<double>(N))), denc);
    return mean_all(div(num, den));
}

template <typename T>
struct LossBreakdown {
    T l_int = T(0);
    T l_grad = T(0);
    T l_ssim = T(0);  // 1 - MEFSSIM, or 0 when the term is disabled
    T total = T(0);
};

// L_total = L_int + alpha1 * L_grad + alpha2 * (1 - MEFSSIM). A zero alpha2
// skips the SSIM term entirely.
template <typename T>
std::pair<Var<T>, LossBreakdown<T>> total_loss(Var<T> fused, const TensorT<T>& i1,
                                               const TensorT<T>& i2, const TaskConfig& cfg) {
    LossBreakdown<T> bd;
    Var<T> li = intensity_loss(fused, i1, i2, cfg.intensity_mode);
    Var<T> lg = gradient_loss(fused, i1, i2);
    bd.l_int = li.val().data[0];
    bd.l_grad = lg.val().data[0];
    Var<T> total = add(li, scale(lg, static_cast<T>(cfg.alpha1)));
    if (cfg.ssim_enabled && cfg.alpha2 != 0.0) {
        Var<T> ssim = mef_ssim_score(fused, i1, i2);
        Var<T> ls = add_scalar(neg(ssim), T(1));
        bd.l_ssim = ls.val().data[0];
        total = add(total, scale(ls, static_cast<T>(cfg.alpha2)));
    }
    bd.total = total.val().data[0];
    return {total, bd};
}

// Eager evaluation on images (logging, tests).
inline LossBreakdown<double> evaluate_losses(const Image& f, const Image& i1, const Image& i2,
                                             const TaskConfig& cfg) {
    require(f.channels == 1 && i1.channels == 1 && i2.channels == 1,
            "losses operate on single-channel images");
    TensorT<double> tf({1, f.height, f.width});
    TensorT<double> t1({1, f.height, f.width});
    TensorT<double> t2({1, f.height, f.width});
    require(i1.height == f.height && i1.width == f.width && i2.height == f.height &&
                i2.width == f.width,
            "loss input shape mismatch");
    for (size_t i = 0; i < f.data.size(); ++i) {
        tf.data[i] = f.data[i];
        t1.data[i] = i1.data[i];
        t2.data[i] = i2.data[i];
    }
    auto [total, bd] = total_loss(Var<double>(tf), t1, t2, cfg);
    (void)total;
    return bd;
}

}  // namespace tgfuse
