#include "sarl/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace sarl {

ImageU8 quantize(const Image& img) {
    ImageU8 out;
    out.h = img.h;
    out.w = img.w;
    out.v.resize(static_cast<size_t>(3) * img.h * img.w);
    size_t i = 0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                float f = std::clamp(img.at(c, y, x), 0.f, 1.f);
                out.v[i++] = static_cast<uint8_t>(std::lround(f * 255.f));
            }
    return out;
}

Image dequantize(const ImageU8& img) {
    Image out(img.h, img.w);
    size_t i = 0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = img.v[i++] / 255.f;
    return out;
}

void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.v.data()), static_cast<std::streamsize>(img.v.size()));
    if (!f) throw std::runtime_error("write_ppm: write failed " + path);
}

ImageU8 read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    int w, h, maxv;
    f >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255) throw std::runtime_error("read_ppm: unsupported format " + path);
    f.get();  // single whitespace after header
    ImageU8 img;
    img.h = h;
    img.w = w;
    img.v.resize(static_cast<size_t>(3) * h * w);
    f.read(reinterpret_cast<char*>(img.v.data()), static_cast<std::streamsize>(img.v.size()));
    if (!f) throw std::runtime_error("read_ppm: truncated file " + path);
    return img;
}

float sample_bilinear(const Image& img, int c, double y, double x) {
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    auto cl = [](int v, int hi) { return std::clamp(v, 0, hi - 1); };
    float v00 = img.at(c, cl(y0, img.h), cl(x0, img.w));
    float v01 = img.at(c, cl(y0, img.h), cl(x0 + 1, img.w));
    float v10 = img.at(c, cl(y0 + 1, img.h), cl(x0, img.w));
    float v11 = img.at(c, cl(y0 + 1, img.h), cl(x0 + 1, img.w));
    return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                              fy * ((1 - fx) * v10 + fx * v11));
}

Image crop_resize(const Image& src, double top, double left, double ch, double cw, int out) {
    Image dst(out, out);
    for (int y = 0; y < out; ++y) {
        double sy = top + (y + 0.5) * ch / out - 0.5;
        for (int x = 0; x < out; ++x) {
            double sx = left + (x + 0.5) * cw / out - 0.5;
            for (int c = 0; c < 3; ++c) dst.at(c, y, x) = sample_bilinear(src, c, sy, sx);
        }
    }
    return dst;
}

Image hflip(const Image& src) {
    Image dst(src.h, src.w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < src.h; ++y)
            for (int x = 0; x < src.w; ++x) dst.at(c, y, x) = src.at(c, y, src.w - 1 - x);
    return dst;
}

static float luma(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

Image to_grayscale(const Image& src) {
    Image dst(src.h, src.w);
    for (int y = 0; y < src.h; ++y)
        for (int x = 0; x < src.w; ++x) {
            float l = luma(src.at(0, y, x), src.at(1, y, x), src.at(2, y, x));
            for (int c = 0; c < 3; ++c) dst.at(c, y, x) = l;
        }
    return dst;
}

Image gaussian_blur(const Image& src, int ksize, double sigma) {
    int r = ksize / 2;
    std::vector<float> k(ksize);
    double s = 0;
    for (int i = 0; i < ksize; ++i) {
        double d = i - r;
        k[i] = static_cast<float>(std::exp(-d * d / (2 * sigma * sigma)));
        s += k[i];
    }
    for (auto& ki : k) ki = static_cast<float>(ki / s);

    Image tmp(src.h, src.w), dst(src.h, src.w);
    auto cl = [](int v, int hi) { return std::clamp(v, 0, hi - 1); };
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < src.h; ++y)
            for (int x = 0; x < src.w; ++x) {
                float acc = 0;
                for (int i = 0; i < ksize; ++i) acc += k[i] * src.at(c, y, cl(x + i - r, src.w));
                tmp.at(c, y, x) = acc;
            }
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < src.h; ++y)
            for (int x = 0; x < src.w; ++x) {
                float acc = 0;
                for (int i = 0; i < ksize; ++i) acc += k[i] * tmp.at(c, cl(y + i - r, src.h), x);
                dst.at(c, y, x) = acc;
            }
    return dst;
}

Image color_jitter(const Image& src, double brightness, double contrast, double saturation,
                   double hue) {
    Image img = src;
    int n = img.h * img.w;
    // brightness
    for (auto& p : img.v) p = static_cast<float>(p * brightness);
    // contrast: blend toward the mean luma of the image
    double ml = 0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) ml += luma(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
    ml /= n;
    for (auto& p : img.v) p = static_cast<float>((p - ml) * contrast + ml);
    // saturation: blend toward per-pixel luma
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            float l = luma(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<float>((img.at(c, y, x) - l) * saturation + l);
        }
    // hue: rotate the chroma plane in YIQ space
    if (hue != 0.0) {
        double a = hue * 2.0 * M_PI;
        double ca = std::cos(a), sa = std::sin(a);
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
                double Y = 0.299 * r + 0.587 * g + 0.114 * b;
                double I = 0.596 * r - 0.274 * g - 0.322 * b;
                double Q = 0.211 * r - 0.523 * g + 0.312 * b;
                double I2 = ca * I - sa * Q;
                double Q2 = sa * I + ca * Q;
                img.at(0, y, x) = static_cast<float>(Y + 0.956 * I2 + 0.621 * Q2);
                img.at(1, y, x) = static_cast<float>(Y - 0.272 * I2 - 0.647 * Q2);
                img.at(2, y, x) = static_cast<float>(Y - 1.106 * I2 + 1.703 * Q2);
            }
    }
    for (auto& p : img.v) p = std::clamp(p, 0.f, 1.f);
    return img;
}

void normalize_inplace(Image& img, const float mean[3], const float stdev[3]) {
    for (int c = 0; c < 3; ++c) {
        float m = mean[c], inv = 1.f / stdev[c];
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) img.at(c, y, x) = (img.at(c, y, x) - m) * inv;
    }
}

}  // namespace sarl
