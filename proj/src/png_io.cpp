#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

#include "tgfuse/imaging.hpp"

namespace tgfuse {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void png_warn_fn(png_structp, png_const_charp) {}

[[noreturn]] void png_error_quiet(png_structp png, png_const_charp) {
    longjmp(png_jmpbuf(png), 1);
}

}  // namespace

Image decode_png_file(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw NotFoundError(path + ": no such file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn_fn);
    if (!png) throw FormatError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw FormatError("png_create_info_struct failed");
    }

    // libpng reports errors via longjmp; everything it may unwind across
    // lives outside this frame's destructors.
    std::vector<unsigned char> raster;
    std::vector<png_bytep> rows;
    Image img;
    int channels = 0, bit_depth = 0;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path + ": corrupt or truncated PNG");
    }

    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    bit_depth = png_get_bit_depth(png, info);
    channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path + ": unsupported PNG channel count");
    }

    size_t rowbytes = png_get_rowbytes(png, info);
    raster.resize(rowbytes * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raster.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    img = Image(static_cast<int64_t>(h), static_cast<int64_t>(w), channels);
    const int maxval = bit_depth == 16 ? 65535 : 255;
    const float scale = 1.0f / static_cast<float>(maxval);
    for (png_uint_32 y = 0; y < h; ++y) {
        const unsigned char* row = raster.data() + y * rowbytes;
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                int v;
                if (bit_depth == 16) {
                    size_t i = (static_cast<size_t>(x) * channels + c) * 2;
                    v = (row[i] << 8) | row[i + 1];  // PNG raster is big-endian
                } else {
                    v = row[static_cast<size_t>(x) * channels + c];
                }
                img.at(c, y, x) = static_cast<float>(v) * scale;
            }
    }
    return img;
}

void encode_png_file(const std::string& path, const Image& img) {
    require(img.channels == 1 || img.channels == 3, "PNG writer: 1 or 3 channels");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw NotFoundError(path + ": cannot open for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn_fn);
    if (!png) throw FormatError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw FormatError("png_create_info_struct failed");
    }

    std::vector<unsigned char> raster(static_cast<size_t>(img.height * img.width * img.channels));
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int64_t c = 0; c < img.channels; ++c) {
                // Round-half-to-even quantization to 8 bits.
                double q = std::nearbyint(static_cast<double>(img.at(c, y, x)) * 255.0);
                raster[static_cast<size_t>((y * img.width + x) * img.channels + c)] =
                    static_cast<unsigned char>(std::clamp(q, 0.0, 255.0));
            }

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError(path + ": PNG write failed");
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(raster.data() + y * img.width * img.channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace tgfuse
