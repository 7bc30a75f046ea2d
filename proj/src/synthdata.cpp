#include "sarl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace sarl {

namespace {

constexpr double kShapeHalfSize = 30.0;    // px
constexpr double kDispPxPerMm = 3.0;       // marker displacement gain g(d) = k*d
constexpr double kDispSigma = 22.0;        // px, Gaussian attenuation of the field
constexpr double kAA = 1.2;                // px, silhouette antialias width
constexpr float kMarkerColor = 0.08f;
constexpr float kMarkerBackground = 0.5f;
constexpr double kNoiseSigma = 0.03;

double smoothstep01(double e0, double e1, double x) {
    double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

// Signed distance (negative inside) of the shape in its local frame.
double shape_sdf(int shape_class, double x, double y) {
    double h = kShapeHalfSize;
    switch (shape_class) {
        case 0: {  // circle
            return std::hypot(x, y) - h;
        }
        case 1: {  // square
            double dx = std::abs(x) - h * 0.85;
            double dy = std::abs(y) - h * 0.85;
            double ax = std::max(dx, 0.0), ay = std::max(dy, 0.0);
            return std::hypot(ax, ay) + std::min(std::max(dx, dy), 0.0);
        }
        case 2: {  // equilateral triangle
            const double k = std::sqrt(3.0);
            double r = h * 0.95;
            double px = std::abs(x) - r;
            double py = y + r / k;
            if (px + k * py > 0.0) {
                double nx = (px - k * py) / 2.0;
                double ny = (-k * px - py) / 2.0;
                px = nx;
                py = ny;
            }
            px -= std::clamp(px, -2.0 * r, 0.0);
            return -std::hypot(px, py) * (py > 0 ? 1.0 : -1.0);
        }
        case 3: {  // hexagon
            const double kx = -0.866025404, ky = 0.5;
            double px = std::abs(x), py = std::abs(y);
            double d = 2.0 * std::min(kx * px + ky * py, 0.0);
            px -= d * kx;
            py -= d * ky;
            double r = h * 0.9;
            px -= std::clamp(px, -r * 0.577350269, r * 0.577350269);
            py -= r;
            return std::hypot(px, py) * (py < 0 ? -1.0 : 1.0);
        }
        case 4: {  // cross
            double ax = std::abs(x), ay = std::abs(y);
            if (ax < ay) std::swap(ax, ay);
            double dx = ax - h, dy = ay - h * 0.36;
            double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
            return std::hypot(ox, oy) + std::min(std::max(dx, dy), 0.0);
        }
        case 5: {  // annulus
            double r = std::hypot(x, y);
            return std::max(r - h, (h * 0.5) - r);
        }
        default:
            throw std::invalid_argument("shape_sdf: bad shape class");
    }
}

// Smooth 0..1 coverage of the posed shape at pixel (px, py).
double shape_coverage(const SceneSpec& s, double px, double py) {
    double cx = kRenderSize / 2.0 + s.x_offset_mm * kMmToPx;
    double cy = kRenderSize / 2.0;
    double a = -s.rotation_deg * M_PI / 180.0;
    double dx = px - cx, dy = py - cy;
    double lx = std::cos(a) * dx - std::sin(a) * dy;
    double ly = std::sin(a) * dx + std::cos(a) * dy;
    double d = shape_sdf(s.shape_class, lx, ly);
    return smoothstep01(kAA, -kAA, d);
}

double stripe_value(int texture_id, double lx, double ly) {
    static const double periods[2] = {6.0, 11.0};
    static const double angles[4] = {0.0, 45.0, 90.0, 135.0};
    double period = periods[texture_id / 4];
    double ang = angles[texture_id % 4] * M_PI / 180.0;
    double u = lx * std::cos(ang) + ly * std::sin(ang);
    return 0.5 + 0.5 * std::cos(2.0 * M_PI * u / period);
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
        int j = static_cast<int>(rng.uniform_int(i + 1));
        std::swap(idx[i], idx[j]);
    }
}

}  // namespace

float marker_color() { return kMarkerColor; }
float marker_background() { return kMarkerBackground; }

Modality modality_from_string(const std::string& s) {
    if (s == "fused") return Modality::kFused;
    if (s == "visual" || s == "visual_only") return Modality::kVisualOnly;
    if (s == "marker" || s == "marker_only") return Modality::kMarkerOnly;
    throw std::invalid_argument("unknown modality: " + s);
}

std::string modality_to_string(Modality m) {
    switch (m) {
        case Modality::kFused: return "fused";
        case Modality::kVisualOnly: return "visual_only";
        case Modality::kMarkerOnly: return "marker_only";
    }
    return "?";
}

void validate(const SceneSpec& s) {
    auto chk = [](bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(std::string("SceneSpec: ") + msg);
    };
    chk(s.shape_class >= 0 && s.shape_class < kNumShapes, "shape_class out of range");
    chk(s.texture_id >= 0 && s.texture_id < kNumTextures, "texture_id out of range");
    chk(s.x_offset_mm >= -8.0 && s.x_offset_mm <= 8.0, "x_offset out of range");
    chk(s.press_depth_mm >= 0.0 && s.press_depth_mm <= 3.0, "press_depth out of range");
    chk(s.rotation_deg >= -45.0 && s.rotation_deg <= 45.0, "rotation out of range");
    chk(s.contact_px_mm >= -10.0 && s.contact_px_mm <= 10.0, "contact px out of range");
    chk(s.contact_py_mm >= -10.0 && s.contact_py_mm <= 10.0, "contact py out of range");
    chk(s.contact_pz_mm >= 0.0 && s.contact_pz_mm <= 3.0, "contact pz out of range");
    const auto& g = s.marker_grid;
    chk(g.rows >= 2 && g.cols >= 2 && g.spacing_px > 0 && g.marker_radius_px > 0,
        "degenerate marker grid");
    double ext_x = (g.cols - 1) * g.spacing_px + 2 * g.marker_radius_px;
    double ext_y = (g.rows - 1) * g.spacing_px + 2 * g.marker_radius_px;
    chk(ext_x <= kRenderSize && ext_y <= kRenderSize, "marker grid does not fit in frame");
}

Labels labels_from_spec(const SceneSpec& s) {
    Labels l;
    l.shape_class = s.shape_class;
    l.texture_id = s.texture_id;
    l.edge_x = s.x_offset_mm;
    l.edge_z = s.press_depth_mm;
    l.edge_theta = s.rotation_deg;
    l.px = s.contact_px_mm;
    l.py = s.contact_py_mm;
    l.pz = s.contact_pz_mm;
    // fixed linear stiffness map on (press depth, contact offset)
    l.fx = 0.02 * s.contact_px_mm * s.press_depth_mm;
    l.fy = 0.02 * s.contact_py_mm * s.press_depth_mm;
    l.fz = 0.8 * s.press_depth_mm;
    return l;
}

std::vector<std::array<double, 2>> marker_reference_centers(const MarkerGridSpec& g) {
    std::vector<std::array<double, 2>> out;
    out.reserve(static_cast<size_t>(g.rows) * g.cols);
    double x0 = (kRenderSize - (g.cols - 1) * g.spacing_px) / 2.0;
    double y0 = (kRenderSize - (g.rows - 1) * g.spacing_px) / 2.0;
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c)
            out.push_back({x0 + c * g.spacing_px, y0 + r * g.spacing_px});
    return out;
}

std::vector<std::array<double, 2>> marker_deformed_centers(const SceneSpec& s) {
    auto centers = marker_reference_centers(s.marker_grid);
    double cx = kRenderSize / 2.0 + s.contact_px_mm * kMmToPx;
    double cy = kRenderSize / 2.0 + s.contact_py_mm * kMmToPx;
    double amp = kDispPxPerMm * s.press_depth_mm;
    for (auto& p : centers) {
        double dx = p[0] - cx, dy = p[1] - cy;
        double dist = std::hypot(dx, dy);
        if (dist < 1e-9) continue;
        double atten = std::exp(-dist * dist / (2.0 * kDispSigma * kDispSigma));
        // The radial field is modulated by the object silhouette so the marker
        // channel carries shape information, as a real skin deforms under the
        // pressed object's footprint.
        double factor = 0.25 + 0.75 * shape_coverage(s, p[0], p[1]);
        double d = amp * atten * factor / dist;
        p[0] += dx * d;
        p[1] += dy * d;
    }
    return centers;
}

RenderLayers render_layers(const SceneSpec& spec) {
    validate(spec);
    RenderLayers out;
    out.visual = Image(kRenderSize, kRenderSize);
    out.marker_alpha.assign(static_cast<size_t>(kRenderSize) * kRenderSize, 0.f);

    double cx = kRenderSize / 2.0 + spec.x_offset_mm * kMmToPx;
    double cy = kRenderSize / 2.0;
    double a = -spec.rotation_deg * M_PI / 180.0;
    double ca = std::cos(a), sa = std::sin(a);
    double depth_gain = 0.45 + 0.18 * spec.press_depth_mm;

    Rng noise(spec.noise_seed);
    for (int y = 0; y < kRenderSize; ++y)
        for (int x = 0; x < kRenderSize; ++x) {
            double dx = x - cx, dy = y - cy;
            double lx = ca * dx - sa * dy;
            double ly = sa * dx + ca * dy;
            double cov = smoothstep01(kAA, -kAA, shape_sdf(spec.shape_class, lx, ly));
            double tex = stripe_value(spec.texture_id, lx, ly);
            double base = 0.30;
            double inside = (0.45 + 0.45 * tex) * depth_gain + 0.18;
            double v = base + (inside - base) * cov;
            double tint[3] = {1.0, 0.94, 0.88};
            for (int c = 0; c < 3; ++c) {
                double n = noise.normal() * kNoiseSigma;
                out.visual.at(c, y, x) =
                    static_cast<float>(std::clamp(v * tint[c] + n, 0.0, 1.0));
            }
        }

    auto centers = marker_deformed_centers(spec);
    double r = spec.marker_grid.marker_radius_px;
    for (const auto& p : centers) {
        int x0 = std::max(0, static_cast<int>(std::floor(p[0] - r - 2)));
        int x1 = std::min(kRenderSize - 1, static_cast<int>(std::ceil(p[0] + r + 2)));
        int y0 = std::max(0, static_cast<int>(std::floor(p[1] - r - 2)));
        int y1 = std::min(kRenderSize - 1, static_cast<int>(std::ceil(p[1] + r + 2)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double d = std::hypot(x - p[0], y - p[1]);
                float alpha = static_cast<float>(smoothstep01(r + 0.8, r - 0.8, d));
                auto& cell = out.marker_alpha[static_cast<size_t>(y) * kRenderSize + x];
                cell = std::max(cell, alpha);
            }
    }
    return out;
}

LabeledImage generate_sample(const SceneSpec& spec, Modality mode) {
    RenderLayers layers = render_layers(spec);
    LabeledImage out;
    out.labels = labels_from_spec(spec);
    out.pixels = Image(kRenderSize, kRenderSize);
    for (int y = 0; y < kRenderSize; ++y)
        for (int x = 0; x < kRenderSize; ++x) {
            float alpha = (mode == Modality::kVisualOnly)
                              ? 0.f
                              : layers.marker_alpha[static_cast<size_t>(y) * kRenderSize + x];
            for (int c = 0; c < 3; ++c) {
                float vis = (mode == Modality::kMarkerOnly) ? kMarkerBackground
                                                            : layers.visual.at(c, y, x);
                out.pixels.at(c, y, x) = vis * (1.f - alpha) + kMarkerColor * alpha;
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

Task task_from_string(const std::string& s) {
    if (s == "shape") return Task::kShape;
    if (s == "texture" || s == "grating") return Task::kTexture;
    if (s == "edge_pose") return Task::kEdgePose;
    if (s == "contact_point") return Task::kContactPoint;
    if (s == "force") return Task::kForce;
    throw std::invalid_argument("unknown task: " + s);
}

std::string task_to_string(Task t) {
    switch (t) {
        case Task::kShape: return "shape";
        case Task::kTexture: return "texture";
        case Task::kEdgePose: return "edge_pose";
        case Task::kContactPoint: return "contact_point";
        case Task::kForce: return "force";
    }
    return "?";
}

bool task_is_classification(Task t) { return t == Task::kShape || t == Task::kTexture; }

int task_num_classes(Task t) {
    if (t == Task::kShape) return kNumShapes;
    if (t == Task::kTexture) return kNumTextures;
    throw std::logic_error("task_num_classes: not a classification task");
}

std::array<double, 3> task_regression_target(Task t, const Labels& l) {
    switch (t) {
        case Task::kEdgePose: return {l.edge_x, l.edge_z, l.edge_theta};
        case Task::kContactPoint: return {l.px, l.py, l.pz};
        case Task::kForce: return {l.fx, l.fy, l.fz};
        default: throw std::logic_error("task_regression_target: not a regression task");
    }
}

int task_class_label(Task t, const Labels& l) {
    if (t == Task::kShape) return l.shape_class;
    if (t == Task::kTexture) return l.texture_id;
    throw std::logic_error("task_class_label: not a classification task");
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

std::vector<int> Dataset::split_indices(Split s) const {
    std::vector<int> out;
    for (size_t i = 0; i < samples.size(); ++i)
        if (samples[i].split == s) out.push_back(static_cast<int>(i));
    return out;
}

Dataset make_dataset(Task task, int n_samples, uint64_t seed, Modality modality) {
    if (n_samples < 20) throw std::invalid_argument("make_dataset: n_samples must be >= 20");
    bool cls = task_is_classification(task);
    int nc = cls ? task_num_classes(task) : 1;
    if (cls) {
        if (n_samples % nc != 0)
            throw std::invalid_argument("make_dataset: n_samples not divisible by class count");
        int per_class = n_samples / nc;
        if (static_cast<int>(per_class * 0.15) < 1)
            throw std::invalid_argument("make_dataset: too few samples per class per split");
    }

    Dataset ds;
    ds.task = task;
    ds.modality = modality;
    ds.seed = seed;
    Rng rng(seed);
    ds.samples.resize(n_samples);
    for (int i = 0; i < n_samples; ++i) {
        Rng r = rng.split(static_cast<uint64_t>(i));
        SceneSpec s;
        s.shape_class = (task == Task::kShape) ? i % kNumShapes
                                               : static_cast<int>(r.uniform_int(kNumShapes));
        s.texture_id = (task == Task::kTexture) ? i % kNumTextures
                                                : static_cast<int>(r.uniform_int(kNumTextures));
        s.x_offset_mm = r.uniform(-8.0, 8.0);
        s.press_depth_mm = r.uniform(0.0, 3.0);
        s.rotation_deg = r.uniform(-45.0, 45.0);
        s.contact_px_mm = r.uniform(-10.0, 10.0);
        s.contact_py_mm = r.uniform(-10.0, 10.0);
        s.contact_pz_mm = s.press_depth_mm;
        s.noise_seed = r.next_u64();
        ds.samples[i].spec = s;
        ds.samples[i].labels = labels_from_spec(s);
    }

    // Disjoint 70/15/15 split, stratified per class for classification tasks.
    auto assign_split = [&](std::vector<int> idx) {
        shuffle_indices(idx, rng);
        int m = static_cast<int>(idx.size());
        int n_train = static_cast<int>(m * 0.7);
        int n_val = static_cast<int>(m * 0.15);
        for (int k = 0; k < m; ++k) {
            Split sp = k < n_train ? Split::kTrain : (k < n_train + n_val ? Split::kVal : Split::kTest);
            ds.samples[idx[k]].split = sp;
        }
    };
    if (cls) {
        for (int c = 0; c < nc; ++c) {
            std::vector<int> idx;
            for (int i = 0; i < n_samples; ++i)
                if (task_class_label(task, ds.samples[i].labels) == c) idx.push_back(i);
            assign_split(std::move(idx));
        }
    } else {
        std::vector<int> idx(n_samples);
        for (int i = 0; i < n_samples; ++i) idx[i] = i;
        assign_split(std::move(idx));
    }

    // Per-channel normalization constants from the train split renders.
    double sum[3] = {0, 0, 0}, sumsq[3] = {0, 0, 0};
    int64_t count = 0;
    for (int i : ds.split_indices(Split::kTrain)) {
        Image img = dequantize(quantize(generate_sample(ds.samples[i].spec, modality).pixels));
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < img.h; ++y)
                for (int x = 0; x < img.w; ++x) {
                    double v = img.at(c, y, x);
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
        count += static_cast<int64_t>(img.h) * img.w;
    }
    for (int c = 0; c < 3; ++c) {
        double m = sum[c] / count;
        double var = std::max(sumsq[c] / count - m * m, 1e-6);
        ds.norm_mean[c] = static_cast<float>(m);
        ds.norm_std[c] = static_cast<float>(std::sqrt(var));
    }
    return ds;
}

std::vector<ImageU8> render_dataset(const Dataset& ds, Modality mode) {
    std::vector<ImageU8> out;
    out.reserve(ds.samples.size());
    for (const auto& s : ds.samples) out.push_back(quantize(generate_sample(s.spec, mode).pixels));
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

constexpr int kManifestSchema = 1;

const char* split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& s) {
    if (s == "train") return Split::kTrain;
    if (s == "val") return Split::kVal;
    if (s == "test") return Split::kTest;
    throw std::runtime_error("manifest: bad split tag " + s);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream mf(fs::path(dir) / "manifest.jsonl");
    if (!mf) throw std::runtime_error("save_dataset: cannot open manifest in " + dir);
    json hdr{{"schema_version", kManifestSchema},
             {"task", task_to_string(ds.task)},
             {"modality", modality_to_string(ds.modality)},
             {"seed", ds.seed},
             {"n_samples", ds.samples.size()},
             {"norm_mean", {ds.norm_mean[0], ds.norm_mean[1], ds.norm_mean[2]}},
             {"norm_std", {ds.norm_std[0], ds.norm_std[1], ds.norm_std[2]}}};
    mf << hdr.dump() << "\n";
    char name[64];
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        std::snprintf(name, sizeof(name), "images/sample_%05zu.ppm", i);
        write_ppm((fs::path(dir) / name).string(),
                  quantize(generate_sample(s.spec, ds.modality).pixels));
        const auto& sp = s.spec;
        const auto& l = s.labels;
        json rec{{"file", name},
                 {"split", split_name(s.split)},
                 {"labels",
                  {{"shape_class", l.shape_class},
                   {"texture_id", l.texture_id},
                   {"edge_pose", {l.edge_x, l.edge_z, l.edge_theta}},
                   {"contact_point", {l.px, l.py, l.pz}},
                   {"force", {l.fx, l.fy, l.fz}}}},
                 {"spec",
                  {{"shape_class", sp.shape_class},
                   {"x_offset_mm", sp.x_offset_mm},
                   {"press_depth_mm", sp.press_depth_mm},
                   {"rotation_deg", sp.rotation_deg},
                   {"contact_px_mm", sp.contact_px_mm},
                   {"contact_py_mm", sp.contact_py_mm},
                   {"contact_pz_mm", sp.contact_pz_mm},
                   {"texture_id", sp.texture_id},
                   {"marker_rows", sp.marker_grid.rows},
                   {"marker_cols", sp.marker_grid.cols},
                   {"marker_spacing_px", sp.marker_grid.spacing_px},
                   {"marker_radius_px", sp.marker_grid.marker_radius_px},
                   {"noise_seed", sp.noise_seed}}}};
        mf << rec.dump() << "\n";
    }
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.jsonl");
    if (!mf) throw std::runtime_error("load_dataset: cannot open manifest in " + dir);
    std::string line;
    if (!std::getline(mf, line)) throw std::runtime_error("load_dataset: empty manifest");
    json hdr = json::parse(line);
    if (hdr.at("schema_version").get<int>() != kManifestSchema)
        throw std::runtime_error("load_dataset: manifest schema version mismatch");
    Dataset ds;
    ds.task = task_from_string(hdr.at("task").get<std::string>());
    ds.modality = modality_from_string(hdr.at("modality").get<std::string>());
    ds.seed = hdr.at("seed").get<uint64_t>();
    for (int c = 0; c < 3; ++c) {
        ds.norm_mean[c] = hdr.at("norm_mean")[c].get<float>();
        ds.norm_std[c] = hdr.at("norm_std")[c].get<float>();
    }
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        DatasetSample s;
        s.file = rec.at("file").get<std::string>();
        s.split = split_from_name(rec.at("split").get<std::string>());
        const auto& sp = rec.at("spec");
        s.spec.shape_class = sp.at("shape_class").get<int>();
        s.spec.x_offset_mm = sp.at("x_offset_mm").get<double>();
        s.spec.press_depth_mm = sp.at("press_depth_mm").get<double>();
        s.spec.rotation_deg = sp.at("rotation_deg").get<double>();
        s.spec.contact_px_mm = sp.at("contact_px_mm").get<double>();
        s.spec.contact_py_mm = sp.at("contact_py_mm").get<double>();
        s.spec.contact_pz_mm = sp.at("contact_pz_mm").get<double>();
        s.spec.texture_id = sp.at("texture_id").get<int>();
        s.spec.marker_grid.rows = sp.at("marker_rows").get<int>();
        s.spec.marker_grid.cols = sp.at("marker_cols").get<int>();
        s.spec.marker_grid.spacing_px = sp.at("marker_spacing_px").get<double>();
        s.spec.marker_grid.marker_radius_px = sp.at("marker_radius_px").get<double>();
        s.spec.noise_seed = sp.at("noise_seed").get<uint64_t>();
        s.labels = labels_from_spec(s.spec);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace sarl
