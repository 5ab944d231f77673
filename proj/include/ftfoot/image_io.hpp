#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ftfoot/tensor.hpp"

namespace ftfoot {

// 8-bit RGB PNG <-> 3 x h x w tensor in [0,1].
void write_rgb8_png(const std::string& path, const Tensor& rgb);
Tensor read_rgb8_png(const std::string& path);

// 16-bit grayscale PNG, used for depth images in millimeters.
void write_gray16_png(const std::string& path, const std::vector<uint16_t>& pixels, int h, int w);
std::vector<uint16_t> read_gray16_png(const std::string& path, int& h, int& w);

// 8-bit grayscale PNG <-> 1 x h x w tensor; nonzero pixels read back as 1.
void write_mask_png(const std::string& path, const Tensor& mask);
Tensor read_mask_png(const std::string& path);

}  // namespace ftfoot
