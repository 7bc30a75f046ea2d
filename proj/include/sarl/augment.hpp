#pragma once

#include <optional>
#include <vector>

#include "sarl/image.hpp"
#include "sarl/rng.hpp"

namespace sarl {

struct CropRect {
    double top = 0, left = 0, height = 0, width = 0;  // source pixel units
};

struct JitterParams {
    double brightness = 1.0, contrast = 1.0, saturation = 1.0, hue = 0.0;
};

// One view's stochastic augmentation draw. Photometric fields never enter
// the geometric warp.
struct ViewParams {
    CropRect crop;
    int out_size = 64;
    bool hflip = false;
    std::optional<JitterParams> jitter;
    bool grayscale = false;
    bool blur = true;
};

// 2x3 affine map over normalized [0,1]^2 coordinates sending view-1 points
// to view-2 points: (x', y') = (m[0] x + m[1] y + m[2], m[3] x + m[4] y + m[5]).
// x runs along image width.
struct AffineWarp {
    double m[6] = {1, 0, 0, 0, 1, 0};

    void apply(double x, double y, double& ox, double& oy) const {
        ox = m[0] * x + m[1] * y + m[2];
        oy = m[3] * x + m[4] * y + m[5];
    }
};

AffineWarp compose(const AffineWarp& second, const AffineWarp& first);  // second(first(u))
AffineWarp invert(const AffineWarp& w);

struct MappedCoord {
    bool in_bounds = false;
    double x = 0, y = 0;  // continuous destination grid coordinates (cell units)
    int ci = -1, cj = -1;  // nearest destination cell (row, col)
};

// Augmentation-parameter sampler following the two-view recipe: crop area
// fraction uniform in [0.2, 1.0], aspect in [3/4, 4/3], hflip p=0.5, jitter
// p=0.8, grayscale p=0.2, blur always.
struct AugmentConfig {
    double area_min = 0.2, area_max = 1.0;
    double jitter_brightness = 0.4, jitter_contrast = 0.4, jitter_saturation = 0.4,
           jitter_hue = 0.1;
    double p_hflip = 0.5, p_jitter = 0.8, p_grayscale = 0.2;
    float norm_mean[3] = {0.5f, 0.5f, 0.5f};
    float norm_std[3] = {0.25f, 0.25f, 0.25f};
};

ViewParams sample_view_params(Rng& rng, int src_h, int src_w, int out_size,
                              const AugmentConfig& cfg);

// Blur kernel side scaled from the reference 23-tap kernel at 224 px, forced odd.
int blur_kernel_size(int out_size);

Image apply_view(const Image& src, const ViewParams& p, const AugmentConfig& cfg);

// Exact coordinate map between two views over the same source image.
AffineWarp warp_between(const ViewParams& p1, const ViewParams& p2);

// Grid-index resolution of the warp: (i, j) is a (row, col) cell of the
// res_src grid; the cell center is pushed through the warp and located in the
// res_dst grid. Out-of-bounds is a value, not an error.
MappedCoord map_coords(const AffineWarp& w, int i, int j, int h_src, int w_src, int h_dst,
                       int w_dst);

struct OverlapMask {
    int h = 0, w = 0;
    std::vector<uint8_t> m;
    int64_t count = 0;
    bool at(int i, int j) const { return m[static_cast<size_t>(i) * w + j] != 0; }
};

OverlapMask overlap_mask(const AffineWarp& w, int h, int w_, int h_dst, int w_dst);

}  // namespace sarl
