#pragma once

#include <string>
#include <vector>

#include "mimg/tensor.hpp"

namespace mimg {

// RGB image with float channels in [0,1], interleaved row-major (r,g,b per
// pixel), matching the binary PPM pixel order.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> rgb; // height * width * 3

    Image() = default;
    Image(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0.f) {}

    float* pixel(int y, int x) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const float* pixel(int y, int x) const {
        return rgb.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
};

// Binary PPM (P6, maxval 255). The writer emits exactly
// "P6\n<w> <h>\n255\n" followed by w*h*3 bytes; floats are clamped to [0,1]
// and rounded to the nearest of 256 levels.
void write_ppm(const std::string& path, const Image& image);

// Reads a P6 file written by write_ppm (or any standard P6 with maxval 255).
// Wrong magic, truncation, or unsupported maxval raise FormatError.
Image read_ppm(const std::string& path);

// Channel-major [3, H, W] view used by the convolutional models.
Tensor image_to_chw(const Image& image);
Image image_from_chw(const Tensor& chw);

// Quantize a float channel to the byte grid and back (the PPM round trip).
float snap_to_byte_grid(float v);

} // namespace mimg
