#include "tgfuse/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace tgfuse {

void Image::check_range() const {
    for (float v : data)
        require(v >= 0.0f && v <= 1.0f, "image sample outside [0,1]");
}

void Image::check_network_size() const {
    require(height >= 8 && width >= 8, "network input must be at least 8x8");
}

GradientMap sobel(const Image& img) {
    require(img.channels == 1, "sobel expects a single-channel image");
    const int64_t H = img.height, W = img.width;
    GradientMap g;
    g.height = H;
    g.width = W;
    g.gx.assign(static_cast<size_t>(H * W), 0.0f);
    g.gy.assign(static_cast<size_t>(H * W), 0.0f);
    g.magnitude.assign(static_cast<size_t>(H * W), 0.0f);
    auto px = [&](int64_t y, int64_t x) {
        y = std::clamp<int64_t>(y, 0, H - 1);
        x = std::clamp<int64_t>(x, 0, W - 1);
        return img.data[static_cast<size_t>(y * W + x)];
    };
    // Kernel applied as paired differences so constant regions cancel exactly.
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            float sx = (px(y - 1, x + 1) - px(y - 1, x - 1)) +
                       2.0f * (px(y, x + 1) - px(y, x - 1)) +
                       (px(y + 1, x + 1) - px(y + 1, x - 1));
            float sy = (px(y + 1, x - 1) - px(y - 1, x - 1)) +
                       2.0f * (px(y + 1, x) - px(y - 1, x)) +
                       (px(y + 1, x + 1) - px(y - 1, x + 1));
            g.gx[static_cast<size_t>(y * W + x)] = sx;
            g.gy[static_cast<size_t>(y * W + x)] = sy;
            g.magnitude[static_cast<size_t>(y * W + x)] = std::sqrt(sx * sx + sy * sy);
        }
    return g;
}

// --- PNM ----------------------------------------------------------------

namespace {

void skip_pnm_whitespace(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

int64_t read_pnm_int(std::istream& in) {
    skip_pnm_whitespace(in);
    int64_t v = 0;
    bool any = false;
    while (std::isdigit(in.peek())) {
        v = v * 10 + (in.get() - '0');
        any = true;
    }
    if (!any) throw FormatError("malformed PNM header");
    return v;
}

Image decode_pnm(const std::string& path, std::ifstream& in, int channels) {
    int64_t w = read_pnm_int(in);
    int64_t h = read_pnm_int(in);
    int64_t maxval = read_pnm_int(in);
    if (maxval != 255 && maxval != 65535)
        throw FormatError(path + ": PNM maxval must be 255 or 65535");
    in.get();  // single whitespace before the raster
    const int bytes = maxval == 255 ? 1 : 2;
    std::vector<unsigned char> raw(static_cast<size_t>(w * h * channels * bytes));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw FormatError(path + ": truncated PNM raster");
    Image img(h, w, channels);
    const float scale = 1.0f / static_cast<float>(maxval);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < channels; ++c) {
                size_t i = static_cast<size_t>(((y * w + x) * channels + c) * bytes);
                int64_t v = bytes == 1 ? raw[i] : (raw[i] << 8) | raw[i + 1];  // big-endian
                img.at(c, y, x) = static_cast<float>(v) * scale;
            }
    return img;
}

// Bankers' rounding to an integer in [0, maxval].
int64_t quantize(float v, int64_t maxval) {
    double q = std::nearbyint(static_cast<double>(v) * static_cast<double>(maxval));
    return std::clamp<int64_t>(static_cast<int64_t>(q), 0, maxval);
}

}  // namespace

Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError(path + ": no such file");
    unsigned char magic[8] = {0};
    in.read(reinterpret_cast<char*>(magic), 8);
    if (in.gcount() >= 8 && magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' &&
        magic[3] == 'G') {
        in.close();
        return decode_png_file(path);
    }
    if (in.gcount() >= 2 && magic[0] == 'P' && (magic[1] == '5' || magic[1] == '6')) {
        in.clear();
        in.seekg(2);
        return decode_pnm(path, in, magic[1] == '5' ? 1 : 3);
    }
    throw FormatError(path + ": unsupported image format (PNG or binary PGM/PPM expected)");
}

void save_png(const std::string& path, const Image& img) {
    encode_png_file(path, img);
}

void save_pnm(const std::string& path, const Image& img, int maxval) {
    require(img.channels == 1 || img.channels == 3, "save_pnm: 1 or 3 channels");
    require(maxval == 255 || maxval == 65535, "save_pnm: maxval must be 255 or 65535");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NotFoundError(path + ": cannot open for writing");
    out << (img.channels == 1 ? "P5" : "P6") << "\n"
        << img.width << " " << img.height << "\n"
        << maxval << "\n";
    const int bytes = maxval == 255 ? 1 : 2;
    std::vector<unsigned char> raw(static_cast<size_t>(img.pixels() * img.channels * bytes));
    size_t i = 0;
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int64_t c = 0; c < img.channels; ++c) {
                int64_t q = quantize(img.at(c, y, x), maxval);
                if (bytes == 1) {
                    raw[i++] = static_cast<unsigned char>(q);
                } else {
                    raw[i++] = static_cast<unsigned char>(q >> 8);
                    raw[i++] = static_cast<unsigned char>(q & 0xff);
                }
            }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// --- Color --------------------------------------------------------------

LumaChroma to_luma_chroma(const Image& img) {
    require(img.channels == 1 || img.channels == 3, "to_luma_chroma: 1 or 3 channels");
    LumaChroma out;
    if (img.channels == 1) {
        out.luma = img;
        return out;
    }
    out.luma = Image(img.height, img.width, 1);
    out.cb = std::vector<float>(static_cast<size_t>(img.pixels()));
    out.cr = std::vector<float>(static_cast<size_t>(img.pixels()));
    for (int64_t i = 0; i < img.pixels(); ++i) {
        double r = img.data[static_cast<size_t>(i)];
        double g = img.data[static_cast<size_t>(img.pixels() + i)];
        double b = img.data[static_cast<size_t>(2 * img.pixels() + i)];
        double y = 0.299 * r + 0.587 * g + 0.114 * b;
        out.luma.data[static_cast<size_t>(i)] = static_cast<float>(y);
        (*out.cb)[static_cast<size_t>(i)] = static_cast<float>((b - y) * 0.564 + 0.5);
        (*out.cr)[static_cast<size_t>(i)] = static_cast<float>((r - y) * 0.713 + 0.5);
    }
    return out;
}

namespace {

Image ycbcr_to_rgb(const Image& luma, const std::vector<float>& cb, const std::vector<float>& cr) {
    Image out(luma.height, luma.width, 3);
    for (int64_t i = 0; i < luma.pixels(); ++i) {
        double y = luma.data[static_cast<size_t>(i)];
        double db = cb[static_cast<size_t>(i)] - 0.5;
        double dr = cr[static_cast<size_t>(i)] - 0.5;
        double r = y + dr / 0.713;
        double b = y + db / 0.564;
        double g = (y - 0.299 * r - 0.114 * b) / 0.587;
        out.data[static_cast<size_t>(i)] = static_cast<float>(std::clamp(r, 0.0, 1.0));
        out.data[static_cast<size_t>(out.pixels() + i)] =
            static_cast<float>(std::clamp(g, 0.0, 1.0));
        out.data[static_cast<size_t>(2 * out.pixels() + i)] =
            static_cast<float>(std::clamp(b, 0.0, 1.0));
    }
    return out;
}

}  // namespace

Image recompose(const Image& fused_luma, ChromaPolicy policy, const ChromaSources& sources) {
    require(fused_luma.channels == 1, "recompose: fused luma must be single channel");
    if (policy == ChromaPolicy::None) return fused_luma;

    auto check = [&](const LumaChroma* s) {
        require(s && s->cb && s->cr, "recompose: missing chroma source");
        require(static_cast<int64_t>(s->cb->size()) == fused_luma.pixels(),
                "recompose: chroma shape mismatch");
    };
    if (policy == ChromaPolicy::First) {
        check(sources.first);
        return ycbcr_to_rgb(fused_luma, *sources.first->cb, *sources.first->cr);
    }
    if (policy == ChromaPolicy::Second) {
        check(sources.second);
        return ycbcr_to_rgb(fused_luma, *sources.second->cb, *sources.second->cr);
    }
    check(sources.first);
    check(sources.second);
    const auto& cb1 = *sources.first->cb;
    const auto& cr1 = *sources.first->cr;
    const auto& cb2 = *sources.second->cb;
    const auto& cr2 = *sources.second->cr;
    std::vector<float> cb(cb1.size()), cr(cr1.size());
    for (size_t i = 0; i < cb.size(); ++i) {
        double w1 = std::abs(cb1[i] - 0.5) + std::abs(cr1[i] - 0.5);
        double w2 = std::abs(cb2[i] - 0.5) + std::abs(cr2[i] - 0.5);
        double ws = w1 + w2;
        if (ws < 1e-12) {
            w1 = w2 = 0.5;
            ws = 1.0;
        }
        cb[i] = static_cast<float>((w1 * cb1[i] + w2 * cb2[i]) / ws);
        cr[i] = static_cast<float>((w1 * cr1[i] + w2 * cr2[i]) / ws);
    }
    return ycbcr_to_rgb(fused_luma, cb, cr);
}

// --- Padding --------------------------------------------------------------

Image pad_to_multiple(const Image& img, int64_t mult, PadInfo& info) {
    require(img.channels == 1, "pad_to_multiple: single channel expected");
    info.orig_height = img.height;
    info.orig_width = img.width;
    int64_t H = (img.height + mult - 1) / mult * mult;
    int64_t W = (img.width + mult - 1) / mult * mult;
    if (H == img.height && W == img.width) return img;
    Image out(H, W, 1);
    auto reflect = [](int64_t i, int64_t n) {
        // reflect-101: ...2 1 | 0 1 2 ... n-1 | n-2 n-3...
        if (i < n) return i;
        int64_t j = 2 * (n - 1) - i;
        return std::clamp<int64_t>(j, 0, n - 1);
    };
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            out.at(0, y, x) = img.at(0, reflect(y, img.height), reflect(x, img.width));
    return out;
}

Image crop_to(const Image& img, const PadInfo& info) {
    if (img.height == info.orig_height && img.width == info.orig_width) return img;
    Image out(info.orig_height, info.orig_width, img.channels);
    for (int64_t c = 0; c < img.channels; ++c)
        for (int64_t y = 0; y < info.orig_height; ++y)
            for (int64_t x = 0; x < info.orig_width; ++x) out.at(c, y, x) = img.at(c, y, x);
    return out;
}

}  // namespace tgfuse
