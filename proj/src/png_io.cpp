#include "cbdiff/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace cbdiff {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw std::runtime_error("png: " + path + ": " + what);
}

void write_png(const std::string& path, const Tensor<uint8_t>& img, int channels,
               const std::vector<PngText>& text) {
    if (img.rank() != 3 || img.dim(2) != channels)
        fail(path, "expected (H,W," + std::to_string(channels) + ") tensor, got " +
                       shape_str(img.shape()));
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) fail(path, "cannot open for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(path, "libpng write error");
    }
    png_init_io(png, f.get());
    const int H = img.dim(0), W = img.dim(1);
    png_set_IHDR(png, info, W, H, 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    std::vector<png_text> chunks(text.size());
    for (size_t i = 0; i < text.size(); ++i) {
        chunks[i] = png_text{};
        chunks[i].compression = PNG_TEXT_COMPRESSION_NONE;
        chunks[i].key = const_cast<char*>(text[i].key.c_str());
        chunks[i].text = const_cast<char*>(text[i].value.c_str());
        chunks[i].text_length = text[i].value.size();
    }
    if (!chunks.empty()) png_set_text(png, info, chunks.data(), int(chunks.size()));
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(H));
    for (int y = 0; y < H; ++y)
        rows[size_t(y)] = const_cast<png_bytep>(img.data() + int64_t(y) * W * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor<uint8_t> read_png(const std::string& path, int channels) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) fail(path, "missing file");
    png_byte header[8];
    if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8))
        fail(path, "not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "corrupt PNG data");
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int W = int(png_get_image_width(png, info));
    const int H = int(png_get_image_height(png, info));
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (channels == 3 && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA))
        png_set_gray_to_rgb(png);
    if (channels == 1 && (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
                          color == PNG_COLOR_TYPE_PALETTE))
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    if (int(png_get_channels(png, info)) != channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "unexpected channel count");
    }
    Tensor<uint8_t> img({H, W, channels});
    std::vector<png_bytep> rows(static_cast<size_t>(H));
    for (int y = 0; y < H; ++y) rows[size_t(y)] = img.data() + int64_t(y) * W * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace

void write_png_rgb8(const std::string& path, const Tensor<uint8_t>& img,
                    const std::vector<PngText>& text) {
    write_png(path, img, 3, text);
}

void write_png_gray8(const std::string& path, const Tensor<uint8_t>& img,
                     const std::vector<PngText>& text) {
    write_png(path, img, 1, text);
}

Tensor<uint8_t> read_png_rgb8(const std::string& path) { return read_png(path, 3); }
Tensor<uint8_t> read_png_gray8(const std::string& path) { return read_png(path, 1); }

Tensor<uint8_t> quantize_unit(const Tensor<float>& x) {
    Tensor<uint8_t> out(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        float v = x[i];
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        out[i] = uint8_t(std::lround(v * 255.0f));
    }
    return out;
}

Tensor<float> dequantize_unit(const Tensor<uint8_t>& x) {
    Tensor<float> out(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) out[i] = float(x[i]) / 255.0f;
    return out;
}

}  // namespace cbdiff
