#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tgfuse/errors.hpp"

namespace tgfuse {

enum class ImageRole { Unspecified, Source1, Source2, Fused };

// Raster with float intensities in [0,1], stored planar (channel, row, col).
struct Image {
    int64_t height = 0;
    int64_t width = 0;
    int64_t channels = 1;
    ImageRole role = ImageRole::Unspecified;
    std::vector<float> data;

    Image() = default;
    Image(int64_t h, int64_t w, int64_t c = 1)
        : height(h), width(w), channels(c), data(static_cast<size_t>(h * w * c), 0.0f) {}

    float& at(int64_t c, int64_t y, int64_t x) {
        return data[static_cast<size_t>((c * height + y) * width + x)];
    }
    float at(int64_t c, int64_t y, int64_t x) const {
        return data[static_cast<size_t>((c * height + y) * width + x)];
    }
    int64_t pixels() const { return height * width; }
    const float* plane(int64_t c) const { return data.data() + c * height * width; }
    float* plane(int64_t c) { return data.data() + c * height * width; }

    // Every sample must lie in [0,1].
    void check_range() const;
    // Minimum size for anything entering the network.
    void check_network_size() const;
};

struct GradientMap {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<float> gx, gy, magnitude;
};

// Sobel kernels, shared by losses and metrics. Unnormalized 3x3, replicate
// border padding.
inline constexpr float kSobelX[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
inline constexpr float kSobelY[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};

GradientMap sobel(const Image& img);

// --- File IO -----------------------------------------------------------

// PNG (8/16-bit gray/RGB) or binary PGM/PPM (maxval 255 or 65535), detected
// by magic bytes. Intensities scaled to [0,1].
Image load_image(const std::string& path);

// 8-bit PNG with round-half-to-even quantization.
void save_png(const std::string& path, const Image& img);

// Binary PGM (1 channel) / PPM (3 channels).
void save_pnm(const std::string& path, const Image& img, int maxval = 255);

// Internal: raw PNG codec entry points (see png_io.cpp).
Image decode_png_file(const std::string& path);
void encode_png_file(const std::string& path, const Image& img);

// --- Color -------------------------------------------------------------

// BT.601 Y/Cb/Cr with the 0.5 chroma offset convention.
struct LumaChroma {
    Image luma;                              // single channel
    std::optional<std::vector<float>> cb;    // absent for 1-channel inputs
    std::optional<std::vector<float>> cr;
};

LumaChroma to_luma_chroma(const Image& img);

enum class ChromaPolicy {
    None,                // pass fused luma through as a 1-channel image
    First,               // take chroma from the first source
    Second,              // take chroma from the second source
    SaturationWeighted,  // per-pixel weights proportional to |Cb-0.5|+|Cr-0.5|
};

struct ChromaSources {
    const LumaChroma* first = nullptr;
    const LumaChroma* second = nullptr;
};

Image recompose(const Image& fused_luma, ChromaPolicy policy, const ChromaSources& sources);

// --- Network-entry padding ----------------------------------------------

struct PadInfo {
    int64_t orig_height = 0;
    int64_t orig_width = 0;
};

// Reflect-pads bottom/right so both dims are multiples of `mult`.
Image pad_to_multiple(const Image& img, int64_t mult, PadInfo& info);
Image crop_to(const Image& img, const PadInfo& info);

}  // namespace tgfuse
