#pragma once

#include <cstdint>
#include <string>

#include "refdiff/tensor.hpp"

namespace refdiff {

// channel-major float image, values in [-1, 1]
struct ImageTensor {
    int64_t channels = 0;
    int64_t height = 0;
    int64_t width = 0;
    Tensor values; // [C,H,W], constant (no grad)

    double at(int64_t c, int64_t y, int64_t x) const {
        return values.data()[size_t(c * height * width + y * width + x)];
    }
    double& at(int64_t c, int64_t y, int64_t x) {
        return values.data()[size_t(c * height * width + y * width + x)];
    }
};

ImageTensor make_image(int64_t c, int64_t h, int64_t w, double fill = 0.0);
ImageTensor black_image(int64_t c, int64_t h, int64_t w); // all -1

// 8-bit binary PPM (P6). write maps [-1,1] -> [0,255]; read maps back.
void write_ppm(const std::string& path, const ImageTensor& img);
ImageTensor read_ppm(const std::string& path);

// lossless float sidecar in the checkpoint record format (single record "image")
void write_image_tensor(const std::string& path, const ImageTensor& img);
ImageTensor read_image_tensor(const std::string& path);

// area-averaging downscale / bilinear upscale, per axis
ImageTensor resize_image(const ImageTensor& img, int64_t out_h, int64_t out_w);
ImageTensor crop_image(const ImageTensor& img, int64_t y0, int64_t x0, int64_t h, int64_t w);

ImageTensor clamp_image(const ImageTensor& img, double lo = -1.0, double hi = 1.0);

// content hash over the raw value bits; used for split hygiene audits
uint64_t image_hash(const ImageTensor& img);

} // namespace refdiff
