#include "tgfuse/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

namespace tgfuse {

namespace {

std::vector<double> to_255(const Image& img) {
    require(img.channels == 1, "metrics expect single-channel images");
    std::vector<double> out(img.data.size());
    for (size_t i = 0; i < img.data.size(); ++i) out[i] = static_cast<double>(img.data[i]) * 255.0;
    return out;
}

}  // namespace

double metric_en(const Image& f) {
    auto x = to_255(f);
    std::vector<int64_t> hist(256, 0);
    for (double v : x) {
        int64_t bin = static_cast<int64_t>(std::nearbyint(v));
        ++hist[static_cast<size_t>(std::clamp<int64_t>(bin, 0, 255))];
    }
    const double n = static_cast<double>(x.size());
    double en = 0.0;
    for (int64_t c : hist) {
        if (c == 0) continue;
        double p = static_cast<double>(c) / n;
        en -= p * std::log2(p);
    }
    return en;
}

double metric_sd(const Image& f) {
    auto x = to_255(f);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    return std::sqrt(var);
}

double metric_sf(const Image& f) {
    auto x = to_255(f);
    const int64_t H = f.height, W = f.width;
    double rf = 0.0, cf = 0.0;
    int64_t nrf = 0, ncf = 0;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x2 = 1; x2 < W; ++x2) {
            double d = x[static_cast<size_t>(y * W + x2)] - x[static_cast<size_t>(y * W + x2 - 1)];
            rf += d * d;
            ++nrf;
        }
    for (int64_t y = 1; y < H; ++y)
        for (int64_t x2 = 0; x2 < W; ++x2) {
            double d = x[static_cast<size_t>(y * W + x2)] - x[static_cast<size_t>((y - 1) * W + x2)];
            cf += d * d;
            ++ncf;
        }
    if (nrf > 0) rf /= static_cast<double>(nrf);
    if (ncf > 0) cf /= static_cast<double>(ncf);
    return std::sqrt(rf + cf);
}

double metric_ag(const Image& f) {
    auto x = to_255(f);
    const int64_t H = f.height, W = f.width;
    if (H < 2 || W < 2) return 0.0;
    double acc = 0.0;
    for (int64_t y = 0; y + 1 < H; ++y)
        for (int64_t x2 = 0; x2 + 1 < W; ++x2) {
            double dx = x[static_cast<size_t>(y * W + x2 + 1)] - x[static_cast<size_t>(y * W + x2)];
            double dy = x[static_cast<size_t>((y + 1) * W + x2)] - x[static_cast<size_t>(y * W + x2)];
            acc += std::sqrt((dx * dx + dy * dy) / 2.0);
        }
    return acc / static_cast<double>((H - 1) * (W - 1));
}

// --- VIF ---------------------------------------------------------------------

namespace {

std::vector<double> gaussian_kernel(double sigma) {
    int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : k) v /= sum;
    return k;
}

// Separable Gaussian filter with replicate borders.
std::vector<double> gauss_filter(const std::vector<double>& x, int64_t H, int64_t W,
                                 const std::vector<double>& k) {
    const int radius = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(x.size()), out(x.size());
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x2 = 0; x2 < W; ++x2) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int64_t xx = std::clamp<int64_t>(x2 + i, 0, W - 1);
                acc += k[static_cast<size_t>(i + radius)] * x[static_cast<size_t>(y * W + xx)];
            }
            tmp[static_cast<size_t>(y * W + x2)] = acc;
        }
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x2 = 0; x2 < W; ++x2) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int64_t yy = std::clamp<int64_t>(y + i, 0, H - 1);
                acc += k[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(yy * W + x2)];
            }
            out[static_cast<size_t>(y * W + x2)] = acc;
        }
    return out;
}

constexpr double kVifNoise = 2.0;        // sigma_n^2 on the 0-255 scale
constexpr double kVifVarFloor = 1e-10;

// Single reference/distorted VIF accumulation across 4 bands.
double vif_pair(const std::vector<double>& ref, const std::vector<double>& dist, int64_t H,
                int64_t W) {
    double num = 0.0, den = 0.0;
    for (int band = 0; band < 4; ++band) {
        double sigma = std::pow(2.0, band);  // 1, 2, 4, 8
        auto k = gaussian_kernel(sigma);
        auto mu_r = gauss_filter(ref, H, W, k);
        auto mu_d = gauss_filter(dist, H, W, k);
        std::vector<double> rr(ref.size()), dd(ref.size()), rd(ref.size());
        for (size_t i = 0; i < ref.size(); ++i) {
            rr[i] = ref[i] * ref[i];
            dd[i] = dist[i] * dist[i];
            rd[i] = ref[i] * dist[i];
        }
        auto m_rr = gauss_filter(rr, H, W, k);
        auto m_dd = gauss_filter(dd, H, W, k);
        auto m_rd = gauss_filter(rd, H, W, k);
        for (size_t i = 0; i < ref.size(); ++i) {
            double var_r = std::max(m_rr[i] - mu_r[i] * mu_r[i], kVifVarFloor);
            double var_d = std::max(m_dd[i] - mu_d[i] * mu_d[i], kVifVarFloor);
            double cov = m_rd[i] - mu_r[i] * mu_d[i];
            double g = std::max(cov, 0.0) / var_r;
            double sv = std::max(var_d - g * cov, kVifVarFloor);
            num += std::log(1.0 + g * g * var_r / (sv + kVifNoise));
            den += std::log(1.0 + var_r / kVifNoise);
        }
    }
    if (den <= 0.0) return 1.0;  // constant reference carries no information
    return num / den;
}

}  // namespace

double metric_vif(const Image& f, const Image& i1, const Image& i2) {
    require(f.height >= 32 && f.width >= 32, "vif needs at least 32x32 images (4 bands)");
    require(i1.height == f.height && i1.width == f.width && i2.height == f.height &&
                i2.width == f.width,
            "vif inputs must share shape");
    auto xf = to_255(f);
    auto x1 = to_255(i1);
    auto x2 = to_255(i2);
    double v1 = vif_pair(x1, xf, f.height, f.width);
    double v2 = vif_pair(x2, xf, f.height, f.width);
    return 0.5 * (v1 + v2);
}

// --- Qabf ---------------------------------------------------------------------

namespace {

constexpr double kGammaG = 0.9994, kKappaG = -15.0, kSigmaG = 0.5;
constexpr double kGammaA = 0.9879, kKappaA = -22.0, kSigmaA = 0.8;

struct EdgeField {
    std::vector<double> g;      // strength
    std::vector<double> alpha;  // orientation in (-pi/2, pi/2]
};

EdgeField edge_field(const Image& img) {
    // Double-precision Sobel (replicate borders) so the sigmoid-shaped
    // preservation factors are reproducible to tight tolerances.
    const int64_t H = img.height, W = img.width;
    auto px = [&](int64_t y, int64_t x) {
        y = std::clamp<int64_t>(y, 0, H - 1);
        x = std::clamp<int64_t>(x, 0, W - 1);
        return static_cast<double>(img.data[static_cast<size_t>(y * W + x)]);
    };
    EdgeField e;
    e.g.resize(static_cast<size_t>(H * W));
    e.alpha.resize(static_cast<size_t>(H * W));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double gx = 0.0, gy = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    double v = px(y + dy, x + dx);
                    gx += kSobelX[(dy + 1) * 3 + (dx + 1)] * v;
                    gy += kSobelY[(dy + 1) * 3 + (dx + 1)] * v;
                }
            size_t i = static_cast<size_t>(y * W + x);
            e.g[i] = std::sqrt(gx * gx + gy * gy);
            double a = (gx == 0.0 && gy == 0.0) ? 0.0 : std::atan2(gy, gx);
            if (a > M_PI / 2) a -= M_PI;
            if (a <= -M_PI / 2) a += M_PI;
            e.alpha[i] = a;
        }
    return e;
}

double edge_preservation(double gs, double as, double gf, double af) {
    double G;
    if (gs == 0.0 && gf == 0.0)
        G = 0.0;
    else if (gf <= gs)
        G = gf / gs;
    else
        G = gs / gf;
    double A = 1.0 - std::abs(as - af) / (M_PI / 2);
    double qg = kGammaG / (1.0 + std::exp(kKappaG * (G - kSigmaG)));
    double qa = kGammaA / (1.0 + std::exp(kKappaA * (A - kSigmaA)));
    return qg * qa;
}

}  // namespace

double metric_qabf(const Image& f, const Image& i1, const Image& i2) {
    require(i1.height == f.height && i1.width == f.width && i2.height == f.height &&
                i2.width == f.width,
            "qabf inputs must share shape");
    // Intensity scale cancels out of the strength ratios and orientations.
    EdgeField ef = edge_field(f), e1 = edge_field(i1), e2 = edge_field(i2);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < ef.g.size(); ++i) {
        double qaf = edge_preservation(e1.g[i], e1.alpha[i], ef.g[i], ef.alpha[i]);
        double qbf = edge_preservation(e2.g[i], e2.alpha[i], ef.g[i], ef.alpha[i]);
        num += qaf * e1.g[i] + qbf * e2.g[i];
        den += e1.g[i] + e2.g[i];
    }
    if (den == 0.0) {
        std::cerr << "[tgfuse] qabf: both sources have zero edge strength; reporting 0\n";
        return 0.0;
    }
    return num / den;
}

MetricReport metric_report(const Image& f, const Image& i1, const Image& i2,
                           const std::string& image_id) {
    MetricReport r;
    r.image_id = image_id;
    r.en = metric_en(f);
    r.sd = metric_sd(f);
    r.sf = metric_sf(f);
    r.ag = metric_ag(f);
    r.vif = metric_vif(f, i1, i2);
    r.qabf = metric_qabf(f, i1, i2);
    return r;
}

MetricReport mean_report(const std::vector<MetricReport>& rows) {
    MetricReport m;
    m.image_id = "mean";
    if (rows.empty()) return m;
    for (const auto& r : rows) {
        m.en += r.en;
        m.sd += r.sd;
        m.sf += r.sf;
        m.ag += r.ag;
        m.vif += r.vif;
        m.qabf += r.qabf;
    }
    double n = static_cast<double>(rows.size());
    m.en /= n;
    m.sd /= n;
    m.sf /= n;
    m.ag /= n;
    m.vif /= n;
    m.qabf /= n;
    return m;
}

namespace {

void emit_row(std::ostringstream& os, const MetricReport& r, size_t id_width) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-*s %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f",
                  static_cast<int>(id_width), r.image_id.c_str(), r.en, r.sd, r.sf, r.ag, r.vif,
                  r.qabf);
    os << buf << "\n";
}

}  // namespace

std::string metrics_table_text(const std::vector<MetricReport>& rows) {
    size_t idw = 8;
    for (const auto& r : rows) idw = std::max(idw, r.image_id.size());
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-*s %8s %8s %8s %8s %8s %8s", static_cast<int>(idw), "pair",
                  "EN", "SD", "SF", "AG", "VIF", "Qabf");
    os << buf << "\n";
    for (const auto& r : rows) emit_row(os, r, idw);
    if (rows.size() > 1) emit_row(os, mean_report(rows), idw);
    return os.str();
}

std::string metrics_table_csv(const std::vector<MetricReport>& rows) {
    std::ostringstream os;
    os << "pair,EN,SD,SF,AG,VIF,Qabf\n";
    auto emit = [&os](const MetricReport& r) {
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.image_id.c_str(),
                      r.en, r.sd, r.sf, r.ag, r.vif, r.qabf);
        os << buf << "\n";
    };
    for (const auto& r : rows) emit(r);
    if (rows.size() > 1) emit(mean_report(rows));
    return os.str();
}

std::string metric_report_json(const MetricReport& r) {
    nlohmann::json j;
    j["pair"] = r.image_id;
    j["EN"] = r.en;
    j["SD"] = r.sd;
    j["SF"] = r.sf;
    j["AG"] = r.ag;
    j["VIF"] = r.vif;
    j["Qabf"] = r.qabf;
    return j.dump();
}

}  // namespace tgfuse
