#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sarl {

// Channel-major float image, values nominally in [0,1] until normalization.
struct Image {
    int h = 0, w = 0;
    std::vector<float> v;  // [3*h*w], index (c,y,x)

    Image() = default;
    Image(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(3) * h_ * w_, 0.f) {}

    float& at(int c, int y, int x) { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
    float at(int c, int y, int x) const { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
};

// 8-bit quantized image; the persisted representation.
struct ImageU8 {
    int h = 0, w = 0;
    std::vector<uint8_t> v;  // interleaved r,g,b per pixel
};

ImageU8 quantize(const Image& img);
Image dequantize(const ImageU8& img);

void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);

// Bilinear sample with edge clamp; (x, y) in continuous pixel coordinates
// where pixel centers sit at integer positions.
float sample_bilinear(const Image& img, int c, double y, double x);

// Crop (top,left,height,width in source pixels, continuous) and resize to
// out x out with bilinear interpolation.
Image crop_resize(const Image& src, double top, double left, double ch, double cw, int out);

Image hflip(const Image& src);
Image to_grayscale(const Image& src);
Image gaussian_blur(const Image& src, int ksize, double sigma);

// Photometric jitter. Factors are multiplicative for brightness/contrast/
// saturation; hue is a chroma-plane rotation in fractions of a full turn.
Image color_jitter(const Image& src, double brightness, double contrast, double saturation,
                   double hue);

void normalize_inplace(Image& img, const float mean[3], const float stdev[3]);

}  // namespace sarl
