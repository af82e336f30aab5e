#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ddpmcd/tensor.hpp"

namespace ddpmcd::image {

// 8-bit interleaved image; channels is 1 (grayscale) or 3 (RGB).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;
};

ImageU8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageU8& img);

// [C,H,W] tensor in [0,1] <-> 8-bit image (round-to-nearest on write).
Tensor to_tensor(const ImageU8& img);
ImageU8 to_image(const Tensor& t);

// Binary mask I/O: PNG values {0,255} <-> tensor values {0,1}. Any other
// pixel value is a DataError naming the file and value.
Tensor mask_to_tensor(const ImageU8& img, const std::string& name_for_errors);
ImageU8 mask_to_image(const Tensor& mask);

// Diffusion operates on [-1,1]; datasets store [0,1].
Tensor to_diffusion_range(const Tensor& x01);
Tensor from_diffusion_range(const Tensor& x11);  // clamped into [0,1]

// Min-max normalized grayscale render of the channel mean, for feature
// visualization output.
ImageU8 channel_mean_image(const Tensor& chw);

}  // namespace ddpmcd::image
