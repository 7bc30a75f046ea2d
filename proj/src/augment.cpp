#include "sarl/augment.hpp"

#include <cmath>
#include <stdexcept>

namespace sarl {

AffineWarp compose(const AffineWarp& second, const AffineWarp& first) {
    AffineWarp out;
    const double* a = second.m;
    const double* b = first.m;
    out.m[0] = a[0] * b[0] + a[1] * b[3];
    out.m[1] = a[0] * b[1] + a[1] * b[4];
    out.m[2] = a[0] * b[2] + a[1] * b[5] + a[2];
    out.m[3] = a[3] * b[0] + a[4] * b[3];
    out.m[4] = a[3] * b[1] + a[4] * b[4];
    out.m[5] = a[3] * b[2] + a[4] * b[5] + a[5];
    return out;
}

AffineWarp invert(const AffineWarp& w) {
    double det = w.m[0] * w.m[4] - w.m[1] * w.m[3];
    if (std::abs(det) < 1e-30) throw std::domain_error("invert: singular warp");
    AffineWarp out;
    out.m[0] = w.m[4] / det;
    out.m[1] = -w.m[1] / det;
    out.m[3] = -w.m[3] / det;
    out.m[4] = w.m[0] / det;
    out.m[2] = -(out.m[0] * w.m[2] + out.m[1] * w.m[5]);
    out.m[5] = -(out.m[3] * w.m[2] + out.m[4] * w.m[5]);
    return out;
}

int blur_kernel_size(int out_size) {
    int k = static_cast<int>(std::lround(23.0 * out_size / 224.0));
    if (k % 2 == 0) ++k;
    return std::max(k, 3);
}

ViewParams sample_view_params(Rng& rng, int src_h, int src_w, int out_size,
                              const AugmentConfig& cfg) {
    ViewParams p;
    p.out_size = out_size;
    double area = static_cast<double>(src_h) * src_w;
    bool placed = false;
    for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
        double frac = rng.uniform(cfg.area_min, cfg.area_max);
        double target = frac * area;
        double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
        double aspect = std::exp(log_ratio);
        double cw = std::sqrt(target * aspect);
        double ch = std::sqrt(target / aspect);
        if (cw <= src_w && ch <= src_h) {
            p.crop.width = cw;
            p.crop.height = ch;
            p.crop.left = rng.uniform(0.0, src_w - cw);
            p.crop.top = rng.uniform(0.0, src_h - ch);
            placed = true;
        }
    }
    if (!placed) {
        // Degenerate aspect draws near the area ceiling; fall back to the full frame.
        p.crop = {0.0, 0.0, static_cast<double>(src_h), static_cast<double>(src_w)};
    }
    p.hflip = rng.bernoulli(cfg.p_hflip);
    if (rng.bernoulli(cfg.p_jitter)) {
        JitterParams j;
        j.brightness = rng.uniform(1.0 - cfg.jitter_brightness, 1.0 + cfg.jitter_brightness);
        j.contrast = rng.uniform(1.0 - cfg.jitter_contrast, 1.0 + cfg.jitter_contrast);
        j.saturation = rng.uniform(1.0 - cfg.jitter_saturation, 1.0 + cfg.jitter_saturation);
        j.hue = rng.uniform(-cfg.jitter_hue, cfg.jitter_hue);
        p.jitter = j;
    }
    p.grayscale = rng.bernoulli(cfg.p_grayscale);
    p.blur = true;
    return p;
}

Image apply_view(const Image& src, const ViewParams& p, const AugmentConfig& cfg) {
    if (p.crop.top < 0 || p.crop.left < 0 || p.crop.top + p.crop.height > src.h + 1e-9 ||
        p.crop.left + p.crop.width > src.w + 1e-9)
        throw std::invalid_argument("apply_view: crop outside source image");
    Image img = crop_resize(src, p.crop.top, p.crop.left, p.crop.height, p.crop.width, p.out_size);
    if (p.hflip) img = hflip(img);
    if (p.jitter)
        img = color_jitter(img, p.jitter->brightness, p.jitter->contrast, p.jitter->saturation,
                           p.jitter->hue);
    if (p.grayscale) img = to_grayscale(img);
    if (p.blur) {
        int k = blur_kernel_size(p.out_size);
        img = gaussian_blur(img, k, k / 6.0);
    }
    normalize_inplace(img, cfg.norm_mean, cfg.norm_std);
    return img;
}

namespace {

// Normalized view coordinates -> source pixel coordinates, as an affine map.
AffineWarp view_to_source(const ViewParams& p) {
    AffineWarp w;
    // x' = left + (hflip ? 1-x : x) * width
    if (p.hflip) {
        w.m[0] = -p.crop.width;
        w.m[2] = p.crop.left + p.crop.width;
    } else {
        w.m[0] = p.crop.width;
        w.m[2] = p.crop.left;
    }
    w.m[1] = 0;
    w.m[3] = 0;
    w.m[4] = p.crop.height;
    w.m[5] = p.crop.top;
    return w;
}

}  // namespace

AffineWarp warp_between(const ViewParams& p1, const ViewParams& p2) {
    return compose(invert(view_to_source(p2)), view_to_source(p1));
}

MappedCoord map_coords(const AffineWarp& w, int i, int j, int h_src, int w_src, int h_dst,
                       int w_dst) {
    MappedCoord out;
    double ux = (j + 0.5) / w_src;
    double uy = (i + 0.5) / h_src;
    double vx, vy;
    w.apply(ux, uy, vx, vy);
    if (vx < 0.0 || vx >= 1.0 || vy < 0.0 || vy >= 1.0) return out;
    out.in_bounds = true;
    out.x = vx * w_dst - 0.5;
    out.y = vy * h_dst - 0.5;
    out.cj = static_cast<int>(std::floor(vx * w_dst));
    out.ci = static_cast<int>(std::floor(vy * h_dst));
    return out;
}

OverlapMask overlap_mask(const AffineWarp& w, int h, int w_, int h_dst, int w_dst) {
    OverlapMask mask;
    mask.h = h;
    mask.w = w_;
    mask.m.assign(static_cast<size_t>(h) * w_, 0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w_; ++j) {
            MappedCoord mc = map_coords(w, i, j, h, w_, h_dst, w_dst);
            if (mc.in_bounds) {
                mask.m[static_cast<size_t>(i) * w_ + j] = 1;
                ++mask.count;
            }
        }
    return mask;
}

}  // namespace sarl
