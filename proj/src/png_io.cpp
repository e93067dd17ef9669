#include "calcseg/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "calcseg/errors.hpp"

namespace calcseg {

namespace {

struct FileCloser {
    void operator()(FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

void write_png_gray16(const std::filesystem::path& path, int64_t width, int64_t height,
                      const std::vector<uint16_t>& pixels) {
    if (width < 1 || height < 1 || pixels.size() != static_cast<size_t>(width * height)) {
        throw ShapeError("PNG pixel buffer does not match its dimensions");
    }
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw Error("cannot open '" + path.string() + "' for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng failed writing '" + path.string() + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 16,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(width) * 2);
    for (int64_t y = 0; y < height; ++y) {
        for (int64_t x = 0; x < width; ++x) {
            const uint16_t v = pixels[static_cast<size_t>(y * width + x)];
            row[static_cast<size_t>(2 * x)] = static_cast<png_byte>(v >> 8);  // PNG is big-endian
            row[static_cast<size_t>(2 * x + 1)] = static_cast<png_byte>(v & 0xFF);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<uint16_t> read_png_gray(const std::filesystem::path& path, int64_t& width, int64_t& height) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw Error("cannot open '" + path.string() + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError("malformed PNG '" + path.string() + "'", 0);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    width = png_get_image_width(png, info);
    height = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError("PNG '" + path.string() + "' is not grayscale", 25);
    }
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    std::vector<uint16_t> out;
    out.reserve(static_cast<size_t>(width * height));
    for (int64_t y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int64_t x = 0; x < width; ++x) {
            out.push_back(depth == 16 ? static_cast<uint16_t>((row[2 * x] << 8) | row[2 * x + 1]) : row[x]);
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace calcseg
