#include "avarc/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "avarc/error.hpp"

namespace avarc {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void write_rows(const std::filesystem::path& path, int width, int height, int color_type,
                const std::vector<std::uint8_t>& data, int bytes_per_pixel) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) throw DataError("libpng initialisation failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("failed to encode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * width * bytes_per_pixel));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_png(const std::filesystem::path& path, int channels) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw FormatError(path.string() + " is not a PNG");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) throw DataError("libpng initialisation failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("failed to decode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int src_c = png_get_channels(png, info);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * src_c);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * w * src_c;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    const int out_c = channels == 0 ? (src_c >= 3 ? 3 : 1) : channels;
    if (out_c != 1 && out_c != 3) throw ParameterError("PNG images load as 1 or 3 channels");
    Image im(out_c, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::uint8_t* p = buf.data() + (static_cast<std::size_t>(y) * w + x) * src_c;
            if (out_c == 1)
                im.at(0, y, x) = (src_c >= 3 ? (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) : p[0]) / 255.0;
            else
                for (int c = 0; c < 3; ++c) im.at(c, y, x) = p[src_c >= 3 ? c : 0] / 255.0;
        }
    return im;
}

void write_png(const std::filesystem::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw ParameterError("only 1- or 3-channel images can be written");
    std::vector<std::uint8_t> data(static_cast<std::size_t>(image.width) * image.height * image.channels);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < image.channels; ++c)
                data[(static_cast<std::size_t>(y) * image.width + x) * image.channels + c] = to_byte(image.at(c, y, x));
    write_rows(path, image.width, image.height, image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, data,
               image.channels);
}

void write_png_rgb8(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != static_cast<std::size_t>(width) * height * 3) throw ShapeError("RGB buffer size mismatch");
    write_rows(path, width, height, PNG_COLOR_TYPE_RGB, rgb, 3);
}

}  // namespace avarc
