#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace xmq {

// 8-bit raster, 1 (gray) or 3 (RGB) channels, row-major interleaved.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<uint8_t> data;

    Image() = default;
    Image(int w, int h, int c, uint8_t fill = 0)
        : width(w), height(h), channels(c), data(size_t(w) * h * c, fill) {
        if (w < 0 || h < 0 || (c != 1 && c != 3))
            throw std::invalid_argument("Image: bad dimensions");
    }

    uint8_t& at(int x, int y, int c = 0) { return data[(size_t(y) * width + x) * channels + c]; }
    uint8_t at(int x, int y, int c = 0) const {
        return data[(size_t(y) * width + x) * channels + c];
    }

    bool empty() const { return width == 0 || height == 0; }

    bool operator==(const Image& o) const = default;

    // Luma plane (identity for single-channel images).
    Image gray() const {
        if (channels == 1) return *this;
        Image g(width, height, 1);
        for (size_t i = 0, n = size_t(width) * height; i < n; ++i) {
            double y = 0.299 * data[3 * i] + 0.587 * data[3 * i + 1] + 0.114 * data[3 * i + 2];
            g.data[i] = uint8_t(y + 0.5);
        }
        return g;
    }
};

namespace detail {
inline void skip_pnm_ws(std::istream& in) {
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
}  // namespace detail

inline void save_pnm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out << (img.channels == 3 ? "P6" : "P5") << "\n"
        << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()), std::streamsize(img.data.size()));
}

inline Image load_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5" && magic != "P6") throw std::runtime_error("not a binary PGM/PPM: " + path);
    detail::skip_pnm_ws(in);
    int w, h, maxv;
    in >> w;
    detail::skip_pnm_ws(in);
    in >> h;
    detail::skip_pnm_ws(in);
    in >> maxv;
    in.get();  // single whitespace before raster
    if (w <= 0 || h <= 0 || maxv != 255) throw std::runtime_error("unsupported PNM: " + path);
    Image img(w, h, magic == "P6" ? 3 : 1);
    in.read(reinterpret_cast<char*>(img.data.data()), std::streamsize(img.data.size()));
    if (!in) throw std::runtime_error("truncated PNM: " + path);
    return img;
}

inline void save_png(const Image& img, const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("png write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.data.data() + size_t(y) * img.width * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline Image load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png read failed: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    png_read_update_info(png, info);
    int w = int(png_get_image_width(png, info));
    int h = int(png_get_image_height(png, info));
    int ch = int(png_get_channels(png, info));
    if (ch != 1 && ch != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("unsupported PNG channel count: " + path);
    }
    Image img(w, h, ch);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = img.data.data() + size_t(y) * w * ch;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// Dispatch on extension; .png vs .pgm/.ppm.
inline Image load_image(const std::string& path) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") return load_png(path);
    return load_pnm(path);
}

inline void save_image(const Image& img, const std::string& path) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".png")
        save_png(img, path);
    else
        save_pnm(img, path);
}

}  // namespace xmq
