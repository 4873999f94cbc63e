#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbdiff/tensor.hpp"

namespace cbdiff {

// 8-bit PNG read/write. Images are (H,W,3) RGB, masks/maps (H,W,1) gray.
// Writers emit fixed settings so identical pixels give identical bytes.

struct PngText {
    std::string key;
    std::string value;
};

void write_png_rgb8(const std::string& path, const Tensor<uint8_t>& img,
                    const std::vector<PngText>& text = {});
void write_png_gray8(const std::string& path, const Tensor<uint8_t>& img,
                     const std::vector<PngText>& text = {});

Tensor<uint8_t> read_png_rgb8(const std::string& path);
Tensor<uint8_t> read_png_gray8(const std::string& path);

// float [0,1] <-> u8 helpers (round-to-nearest)
Tensor<uint8_t> quantize_unit(const Tensor<float>& x);
Tensor<float> dequantize_unit(const Tensor<uint8_t>& x);

}  // namespace cbdiff
