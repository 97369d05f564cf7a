#include "refdiff/image.hpp"

#include "refdiff/params.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace refdiff {

ImageTensor make_image(int64_t c, int64_t h, int64_t w, double fill) {
    ImageTensor img;
    img.channels = c;
    img.height = h;
    img.width = w;
    img.values = Tensor::full({c, h, w}, fill);
    return img;
}

ImageTensor black_image(int64_t c, int64_t h, int64_t w) { return make_image(c, h, w, -1.0); }

void write_ppm(const std::string& path, const ImageTensor& img) {
    if (img.channels != 3) throw TensorError("write_ppm: 3 channels required");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw TensorError("write_ppm: cannot open " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(size_t(img.width * 3));
    for (int64_t y = 0; y < img.height; y++) {
        for (int64_t x = 0; x < img.width; x++) {
            for (int64_t c = 0; c < 3; c++) {
                double v = (img.at(c, y, x) + 1.0) * 0.5 * 255.0;
                v = std::clamp(v, 0.0, 255.0);
                row[size_t(x * 3 + c)] = (unsigned char)std::lround(v);
            }
        }
        os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!os) throw TensorError("write_ppm: write failed " + path);
}

ImageTensor read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw TensorError("read_ppm: cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw TensorError("read_ppm: not a P6 file: " + path);
    int64_t w, h, maxv;
    is >> w >> h >> maxv;
    if (maxv != 255) throw TensorError("read_ppm: only 8-bit supported: " + path);
    is.get(); // single whitespace after header
    ImageTensor img = make_image(3, h, w);
    std::vector<unsigned char> row(size_t(w * 3));
    for (int64_t y = 0; y < h; y++) {
        is.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
        if (!is) throw TensorError("read_ppm: truncated " + path);
        for (int64_t x = 0; x < w; x++)
            for (int64_t c = 0; c < 3; c++)
                img.at(c, y, x) = quantize(double(row[size_t(x * 3 + c)]) / 255.0 * 2.0 - 1.0);
    }
    return img;
}

void write_image_tensor(const std::string& path, const ImageTensor& img) {
    CheckpointMap m;
    m["image"] = TensorRecord{{img.channels, img.height, img.width}, img.values.data()};
    save_checkpoint(path, m);
}

ImageTensor read_image_tensor(const std::string& path) {
    CheckpointMap m = load_checkpoint(path);
    auto it = m.find("image");
    if (it == m.end() || it->second.shape.size() != 3)
        throw TensorError("read_image_tensor: no [C,H,W] record in " + path);
    ImageTensor img;
    img.channels = it->second.shape[0];
    img.height = it->second.shape[1];
    img.width = it->second.shape[2];
    img.values = Tensor::from(it->second.shape, std::move(it->second.data));
    return img;
}

// area-weighted resample of one line: exact box average when shrinking,
// linear interpolation when growing
static void resample_line(const double* s, double* d, int64_t n_src, int64_t n_dst) {
    double ratio = double(n_src) / double(n_dst);
    for (int64_t i = 0; i < n_dst; i++) {
        if (n_dst >= n_src) {
            // bilinear tap at the source coordinate of the pixel center
            double pos = (double(i) + 0.5) * ratio - 0.5;
            double lo = std::floor(pos);
            double f = pos - lo;
            int64_t i0 = std::clamp(int64_t(lo), int64_t(0), n_src - 1);
            int64_t i1 = std::clamp(int64_t(lo) + 1, int64_t(0), n_src - 1);
            d[i] = s[i0] * (1.0 - f) + s[i1] * f;
        } else {
            // integrate the covered source span
            double a = double(i) * ratio, b = double(i + 1) * ratio;
            int64_t ia = int64_t(std::floor(a)), ib = int64_t(std::ceil(b));
            ib = std::min(ib, n_src);
            double acc = 0.0;
            for (int64_t k = ia; k < ib; k++) {
                double cover = std::min(b, double(k + 1)) - std::max(a, double(k));
                if (cover > 0) acc += s[k] * cover;
            }
            d[i] = acc / (b - a);
        }
    }
}

ImageTensor resize_image(const ImageTensor& img, int64_t out_h, int64_t out_w) {
    if (out_h <= 0 || out_w <= 0) throw TensorError("resize_image: bad target size");
    int64_t c = img.channels, h = img.height, w = img.width;
    // pass 1: width
    std::vector<double> tmp(size_t(c * h * out_w));
    const auto& src = img.values.data();
    for (int64_t ch = 0; ch < c; ch++)
        for (int64_t y = 0; y < h; y++)
            resample_line(src.data() + (ch * h + y) * w, tmp.data() + (ch * h + y) * out_w, w,
                          out_w);
    // pass 2: height
    ImageTensor out = make_image(c, out_h, out_w);
    auto& dst = out.values.data();
    std::vector<double> line(static_cast<size_t>(h)), out_line(static_cast<size_t>(out_h));
    for (int64_t ch = 0; ch < c; ch++) {
        for (int64_t x = 0; x < out_w; x++) {
            for (int64_t y = 0; y < h; y++) line[size_t(y)] = tmp[size_t((ch * h + y) * out_w + x)];
            resample_line(line.data(), out_line.data(), h, out_h);
            for (int64_t y = 0; y < out_h; y++)
                dst[size_t(ch * out_h * out_w + y * out_w + x)] = quantize(out_line[size_t(y)]);
        }
    }
    return out;
}

ImageTensor crop_image(const ImageTensor& img, int64_t y0, int64_t x0, int64_t h, int64_t w) {
    if (y0 < 0 || x0 < 0 || h <= 0 || w <= 0 || y0 + h > img.height || x0 + w > img.width)
        throw TensorError("crop_image: window out of bounds");
    ImageTensor out = make_image(img.channels, h, w);
    for (int64_t c = 0; c < img.channels; c++)
        for (int64_t y = 0; y < h; y++)
            for (int64_t x = 0; x < w; x++) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    return out;
}

ImageTensor clamp_image(const ImageTensor& img, double lo, double hi) {
    ImageTensor out = make_image(img.channels, img.height, img.width);
    const auto& s = img.values.data();
    auto& d = out.values.data();
    for (size_t i = 0; i < s.size(); i++) d[i] = std::clamp(s[i], lo, hi);
    return out;
}

uint64_t image_hash(const ImageTensor& img) {
    const auto& v = img.values.data();
    uint64_t h = fnv1a64(&img.channels, sizeof(img.channels));
    h = fnv1a64(&img.height, sizeof(img.height), h);
    h = fnv1a64(&img.width, sizeof(img.width), h);
    return fnv1a64(v.data(), v.size() * sizeof(double), h);
}

} // namespace refdiff
