#include "ddpmcd/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ddpmcd/ops.hpp"

namespace ddpmcd::image {

namespace {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace

ImageU8 read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw DataError("read_png: cannot open " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("read_png: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("read_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("read_png: failed to decode " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 width = png_get_image_width(png, info);
    png_uint_32 height = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    color_type = png_get_color_type(png, info);
    int channels = (color_type == PNG_COLOR_TYPE_GRAY) ? 1 : 3;

    ImageU8 img;
    img.width = static_cast<int>(width);
    img.height = static_cast<int>(height);
    img.channels = channels;
    img.pixels.resize(static_cast<size_t>(width) * height * static_cast<size_t>(channels));

    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y)
        rows[y] = img.pixels.data() + static_cast<size_t>(y) * width * static_cast<size_t>(channels);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::filesystem::path& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw ContractError("write_png: channels must be 1 or 3, got " + std::to_string(img.channels));
    if (img.pixels.size() != static_cast<size_t>(img.width) * img.height * static_cast<size_t>(img.channels))
        throw ContractError("write_png: pixel buffer size mismatch");

    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw DataError("write_png: cannot open " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("write_png: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("write_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("write_png: failed to encode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 8, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(
            img.pixels.data() + static_cast<size_t>(y) * img.width * static_cast<size_t>(img.channels));
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor to_tensor(const ImageU8& img) {
    Tensor t = zeros({img.channels, img.height, img.width});
    auto d = t.mutable_data<float>();
    int64_t hw = static_cast<int64_t>(img.height) * img.width;
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                d[static_cast<size_t>(c * hw + y * img.width + x)] =
                    static_cast<float>(img.pixels[static_cast<size_t>((y * img.width + x) * img.channels + c)]) / 255.0f;
    return t;
}

ImageU8 to_image(const Tensor& t) {
    if (t.ndim() != 3 || (t.dim(0) != 1 && t.dim(0) != 3))
        throw ContractError("to_image: expected [1|3,H,W], got " + shape_str(t.shape()));
    ImageU8 img;
    img.channels = static_cast<int>(t.dim(0));
    img.height = static_cast<int>(t.dim(1));
    img.width = static_cast<int>(t.dim(2));
    img.pixels.resize(static_cast<size_t>(img.channels) * img.height * img.width);
    int64_t hw = static_cast<int64_t>(img.height) * img.width;
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double v = t.at(c * hw + y * img.width + x);
                v = std::clamp(v, 0.0, 1.0);
                img.pixels[static_cast<size_t>((y * img.width + x) * img.channels + c)] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

Tensor mask_to_tensor(const ImageU8& img, const std::string& name_for_errors) {
    if (img.channels != 1)
        throw DataError("mask " + name_for_errors + ": expected single-channel PNG, got " +
                        std::to_string(img.channels) + " channels");
    Tensor t = zeros({img.height, img.width});
    auto d = t.mutable_data<float>();
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        uint8_t v = img.pixels[i];
        if (v != 0 && v != 255)
            throw DataError("mask " + name_for_errors + ": pixel value " + std::to_string(v) +
                            " at index " + std::to_string(i) + ", expected 0 or 255");
        d[i] = v == 255 ? 1.0f : 0.0f;
    }
    return t;
}

ImageU8 mask_to_image(const Tensor& mask) {
    if (mask.ndim() != 2)
        throw ContractError("mask_to_image: expected [H,W], got " + shape_str(mask.shape()));
    ImageU8 img;
    img.channels = 1;
    img.height = static_cast<int>(mask.dim(0));
    img.width = static_cast<int>(mask.dim(1));
    img.pixels.resize(static_cast<size_t>(img.height) * img.width);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        double v = mask.at(static_cast<int64_t>(i));
        if (v != 0.0 && v != 1.0)
            throw DataError("mask_to_image: non-binary mask value " + std::to_string(v));
        img.pixels[i] = v == 1.0 ? 255 : 0;
    }
    return img;
}

Tensor to_diffusion_range(const Tensor& x01) { return x01 * 2.0 - 1.0; }

Tensor from_diffusion_range(const Tensor& x11) { return clamp((x11 + 1.0) * 0.5, 0.0, 1.0); }

ImageU8 channel_mean_image(const Tensor& chw) {
    if (chw.ndim() != 3)
        throw ContractError("channel_mean_image: expected [C,H,W], got " + shape_str(chw.shape()));
    NoGradGuard no_grad;
    Tensor m = mean(chw, {0}, false);  // [H,W]
    double lo = m.at(0), hi = m.at(0);
    for (int64_t i = 0; i < m.numel(); ++i) {
        lo = std::min(lo, m.at(i));
        hi = std::max(hi, m.at(i));
    }
    double span = hi - lo > 1e-12 ? hi - lo : 1.0;
    ImageU8 img;
    img.channels = 1;
    img.height = static_cast<int>(m.dim(0));
    img.width = static_cast<int>(m.dim(1));
    img.pixels.resize(static_cast<size_t>(img.height) * img.width);
    for (size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = static_cast<uint8_t>(std::lround((m.at(static_cast<int64_t>(i)) - lo) / span * 255.0));
    return img;
}

}  // namespace ddpmcd::image
