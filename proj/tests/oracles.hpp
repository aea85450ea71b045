#pragma once

// Independent brute-force oracles for loss terms and metrics. Everything here
// is written as direct double-precision loops over the stated formulas, with
// no reuse of the library's computation paths (the Image container is shared
// as a plain data holder only).

#include <algorithm>
#include <cmath>
#include <vector>

#include "tgfuse/imaging.hpp"

namespace oracle {

using tgfuse::Image;

inline double px(const Image& img, int64_t y, int64_t x) {
    y = std::clamp<int64_t>(y, 0, img.height - 1);
    x = std::clamp<int64_t>(x, 0, img.width - 1);
    return static_cast<double>(img.data[static_cast<size_t>(y * img.width + x)]);
}

// 3x3 Sobel with replicate padding, direct convolution.
inline void sobel_xy(const Image& img, int64_t y, int64_t x, double& gx, double& gy) {
    static const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    static const double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    gx = 0.0;
    gy = 0.0;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            double v = px(img, y + dy, x + dx);
            gx += kx[dy + 1][dx + 1] * v;
            gy += ky[dy + 1][dx + 1] * v;
        }
}

inline double sobel_mag(const Image& img, int64_t y, int64_t x) {
    double gx, gy;
    sobel_xy(img, y, x, gx, gy);
    return std::sqrt(gx * gx + gy * gy);
}

// --- Loss oracles -------------------------------------------------------------

inline double l_int(const Image& f, const Image& a, const Image& b, bool use_max) {
    double acc = 0.0;
    for (int64_t y = 0; y < f.height; ++y)
        for (int64_t x = 0; x < f.width; ++x) {
            double va = px(a, y, x), vb = px(b, y, x);
            double target = use_max ? (va >= vb ? va : vb) : 0.5 * (va + vb);
            acc += std::abs(px(f, y, x) - target);
        }
    return acc / static_cast<double>(f.height * f.width);
}

inline double l_grad(const Image& f, const Image& a, const Image& b) {
    double acc = 0.0;
    for (int64_t y = 0; y < f.height; ++y)
        for (int64_t x = 0; x < f.width; ++x) {
            double ma = sobel_mag(a, y, x);
            double mb = sobel_mag(b, y, x);
            double target = ma >= mb ? ma : mb;
            acc += std::abs(sobel_mag(f, y, x) - target);
        }
    return acc / static_cast<double>(f.height * f.width);
}

// Single-scale MEF-SSIM: 8x8 windows at stride 1; desired patch from the
// strongest mean-removed norm and contrast-weighted unit structures.
inline double mef_ssim(const Image& f, const Image& a, const Image& b) {
    const int64_t K = 8;
    const int64_t N = K * K;
    const double C = 0.03 * 0.03;
    const double eps = 1e-12;
    double total = 0.0;
    int64_t windows = 0;
    for (int64_t wy = 0; wy + K <= f.height; ++wy)
        for (int64_t wx = 0; wx + K <= f.width; ++wx) {
            std::vector<double> pa(static_cast<size_t>(N)), pb(static_cast<size_t>(N)),
                pf(static_cast<size_t>(N));
            double mu_a = 0, mu_b = 0, mu_f = 0;
            for (int64_t j = 0; j < N; ++j) {
                int64_t y = wy + j / K, x = wx + j % K;
                pa[static_cast<size_t>(j)] = px(a, y, x);
                pb[static_cast<size_t>(j)] = px(b, y, x);
                pf[static_cast<size_t>(j)] = px(f, y, x);
                mu_a += pa[static_cast<size_t>(j)];
                mu_b += pb[static_cast<size_t>(j)];
                mu_f += pf[static_cast<size_t>(j)];
            }
            mu_a /= N;
            mu_b /= N;
            mu_f /= N;
            double ca = 0, cb = 0;
            for (int64_t j = 0; j < N; ++j) {
                pa[static_cast<size_t>(j)] -= mu_a;
                pb[static_cast<size_t>(j)] -= mu_b;
                pf[static_cast<size_t>(j)] -= mu_f;
                ca += pa[static_cast<size_t>(j)] * pa[static_cast<size_t>(j)];
                cb += pb[static_cast<size_t>(j)] * pb[static_cast<size_t>(j)];
            }
            ca = std::sqrt(ca);
            cb = std::sqrt(cb);
            // Unit structures, explicitly normalized.
            std::vector<double> sa(static_cast<size_t>(N), 0.0), sb(static_cast<size_t>(N), 0.0);
            for (int64_t j = 0; j < N; ++j) {
                sa[static_cast<size_t>(j)] = pa[static_cast<size_t>(j)] / std::max(ca, eps);
                sb[static_cast<size_t>(j)] = pb[static_cast<size_t>(j)] / std::max(cb, eps);
            }
            double chat = std::max(ca, cb);
            // Contrast-weighted mean of structures.
            std::vector<double> sbar(static_cast<size_t>(N));
            double norm = 0.0;
            for (int64_t j = 0; j < N; ++j) {
                sbar[static_cast<size_t>(j)] =
                    (ca * sa[static_cast<size_t>(j)] + cb * sb[static_cast<size_t>(j)]) /
                    std::max(ca + cb, eps);
                norm += sbar[static_cast<size_t>(j)] * sbar[static_cast<size_t>(j)];
            }
            norm = std::max(std::sqrt(norm), eps);
            double dot = 0.0, d2 = 0.0, f2 = 0.0;
            for (int64_t j = 0; j < N; ++j) {
                double d = chat * sbar[static_cast<size_t>(j)] / norm;
                dot += d * pf[static_cast<size_t>(j)];
                d2 += d * d;
                f2 += pf[static_cast<size_t>(j)] * pf[static_cast<size_t>(j)];
            }
            total += (2.0 * dot / N + C) / (d2 / N + f2 / N + C);
            ++windows;
        }
    return total / static_cast<double>(windows);
}

// --- Metric oracles -------------------------------------------------------------

inline double v255(const Image& img, int64_t y, int64_t x) { return px(img, y, x) * 255.0; }

inline double en(const Image& f) {
    std::vector<int64_t> hist(256, 0);
    for (int64_t y = 0; y < f.height; ++y)
        for (int64_t x = 0; x < f.width; ++x) {
            int64_t bin = static_cast<int64_t>(std::nearbyint(v255(f, y, x)));
            ++hist[static_cast<size_t>(std::clamp<int64_t>(bin, 0, 255))];
        }
    double n = static_cast<double>(f.height * f.width);
    double out = 0.0;
    for (int64_t c : hist)
        if (c > 0) {
            double p = c / n;
            out -= p * std::log2(p);
        }
    return out;
}

inline double sd(const Image& f) {
    double mean = 0.0;
    for (int64_t y = 0; y < f.height; ++y)
        for (int64_t x = 0; x < f.width; ++x) mean += v255(f, y, x);
    mean /= static_cast<double>(f.height * f.width);
    double var = 0.0;
    for (int64_t y = 0; y < f.height; ++y)
        for (int64_t x = 0; x < f.width; ++x) {
            double d = v255(f, y, x) - mean;
            var += d * d;
        }
    return std::sqrt(var / static_cast<double>(f.height * f.width));
}

inline double sf(const Image& f) {
    double rf = 0.0, cf = 0.0;
    int64_t nr = 0, nc = 0;
    for (int64_t y = 0; y < f.height; ++y)
        for (int64_t x = 1; x < f.width; ++x) {
            double d = v255(f, y, x) - v255(f, y, x - 1);
            rf += d * d;
            ++nr;
        }
    for (int64_t y = 1; y < f.height; ++y)
        for (int64_t x = 0; x < f.width; ++x) {
            double d = v255(f, y, x) - v255(f, y - 1, x);
            cf += d * d;
            ++nc;
        }
    return std::sqrt((nr ? rf / nr : 0.0) + (nc ? cf / nc : 0.0));
}

inline double ag(const Image& f) {
    if (f.height < 2 || f.width < 2) return 0.0;
    double acc = 0.0;
    for (int64_t y = 0; y + 1 < f.height; ++y)
        for (int64_t x = 0; x + 1 < f.width; ++x) {
            double dx = v255(f, y, x + 1) - v255(f, y, x);
            double dy = v255(f, y + 1, x) - v255(f, y, x);
            acc += std::sqrt((dx * dx + dy * dy) / 2.0);
        }
    return acc / static_cast<double>((f.height - 1) * (f.width - 1));
}

// Direct (non-separable) 2-d Gaussian filtering for the VIF oracle.
inline std::vector<double> gauss2d(const std::vector<double>& x, int64_t H, int64_t W,
                                   double sigma) {
    int radius = static_cast<int>(std::ceil(3.0 * sigma));
    int size = 2 * radius + 1;
    std::vector<double> kern(static_cast<size_t>(size * size));
    double sum = 0.0;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
            double v = std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma));
            kern[static_cast<size_t>((dy + radius) * size + dx + radius)] = v;
            sum += v;
        }
    for (auto& v : kern) v /= sum;
    std::vector<double> out(x.size());
    for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) {
            double acc = 0.0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    int64_t sy = std::clamp<int64_t>(y + dy, 0, H - 1);
                    int64_t sx = std::clamp<int64_t>(xx + dx, 0, W - 1);
                    acc += kern[static_cast<size_t>((dy + radius) * size + dx + radius)] *
                           x[static_cast<size_t>(sy * W + sx)];
                }
            out[static_cast<size_t>(y * W + xx)] = acc;
        }
    return out;
}

inline double vif_one(const Image& ref, const Image& dist) {
    const int64_t H = ref.height, W = ref.width;
    std::vector<double> r(static_cast<size_t>(H * W)), d(static_cast<size_t>(H * W));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            r[static_cast<size_t>(y * W + x)] = v255(ref, y, x);
            d[static_cast<size_t>(y * W + x)] = v255(dist, y, x);
        }
    double num = 0.0, den = 0.0;
    for (int band = 0; band < 4; ++band) {
        double sigma = std::pow(2.0, band);
        auto mu_r = gauss2d(r, H, W, sigma);
        auto mu_d = gauss2d(d, H, W, sigma);
        std::vector<double> rr(r.size()), dd(r.size()), rd(r.size());
        for (size_t i = 0; i < r.size(); ++i) {
            rr[i] = r[i] * r[i];
            dd[i] = d[i] * d[i];
            rd[i] = r[i] * d[i];
        }
        auto m_rr = gauss2d(rr, H, W, sigma);
        auto m_dd = gauss2d(dd, H, W, sigma);
        auto m_rd = gauss2d(rd, H, W, sigma);
        for (size_t i = 0; i < r.size(); ++i) {
            double var_r = std::max(m_rr[i] - mu_r[i] * mu_r[i], 1e-10);
            double var_d = std::max(m_dd[i] - mu_d[i] * mu_d[i], 1e-10);
            double cov = m_rd[i] - mu_r[i] * mu_d[i];
            double g = std::max(cov, 0.0) / var_r;
            double sv = std::max(var_d - g * cov, 1e-10);
            num += std::log(1.0 + g * g * var_r / (sv + 2.0));
            den += std::log(1.0 + var_r / 2.0);
        }
    }
    if (den <= 0.0) return 1.0;
    return num / den;
}

inline double vif(const Image& f, const Image& a, const Image& b) {
    return 0.5 * (vif_one(a, f) + vif_one(b, f));
}

inline double qabf(const Image& f, const Image& a, const Image& b) {
    auto alpha_of = [](double gx, double gy) {
        if (gx == 0.0 && gy == 0.0) return 0.0;
        double v = std::atan2(gy, gx);
        if (v > M_PI / 2) v -= M_PI;
        if (v <= -M_PI / 2) v += M_PI;
        return v;
    };
    double num = 0.0, den = 0.0;
    for (int64_t y = 0; y < f.height; ++y)
        for (int64_t x = 0; x < f.width; ++x) {
            double gxa, gya, gxb, gyb, gxf, gyf;
            sobel_xy(a, y, x, gxa, gya);
            sobel_xy(b, y, x, gxb, gyb);
            sobel_xy(f, y, x, gxf, gyf);
            double ga = std::sqrt(gxa * gxa + gya * gya);
            double gb = std::sqrt(gxb * gxb + gyb * gyb);
            double gf = std::sqrt(gxf * gxf + gyf * gyf);
            auto q = [&](double gs, double as, double gv, double av) {
                double G;
                if (gs == 0.0 && gv == 0.0)
                    G = 0.0;
                else if (gv <= gs)
                    G = gv / gs;
                else
                    G = gs / gv;
                double A = 1.0 - std::abs(as - av) / (M_PI / 2);
                double qg = 0.9994 / (1.0 + std::exp(-15.0 * (G - 0.5)));
                double qa = 0.9879 / (1.0 + std::exp(-22.0 * (A - 0.8)));
                return qg * qa;
            };
            double qaf = q(ga, alpha_of(gxa, gya), gf, alpha_of(gxf, gyf));
            double qbf = q(gb, alpha_of(gxb, gyb), gf, alpha_of(gxf, gyf));
            num += qaf * ga + qbf * gb;
            den += ga + gb;
        }
    if (den == 0.0) return 0.0;
    return num / den;
}

}  // namespace oracle
