#pragma once

#include <array>
#include <string>
#include <vector>

#include "sarl/image.hpp"
#include "sarl/rng.hpp"

namespace sarl {

constexpr int kRenderSize = 128;      // native render resolution
constexpr double kMmToPx = 4.0;       // sensor surface spans 32 mm
constexpr int kNumShapes = 6;
constexpr int kNumTextures = 8;

enum class Modality { kFused, kVisualOnly, kMarkerOnly };

Modality modality_from_string(const std::string& s);
std::string modality_to_string(Modality m);

struct MarkerGridSpec {
    int rows = 8, cols = 8;
    double spacing_px = 12.0;
    double marker_radius_px = 2.2;
};

struct SceneSpec {
    int shape_class = 0;       // 0..5: circle, square, triangle, hexagon, cross, annulus
    double x_offset_mm = 0.0;  // [-8, 8]
    double press_depth_mm = 0.0;  // [0, 3]
    double rotation_deg = 0.0;    // [-45, 45]
    double contact_px_mm = 0.0;   // [-10, 10]
    double contact_py_mm = 0.0;   // [-10, 10]
    double contact_pz_mm = 0.0;   // equals press depth at the contact center
    int texture_id = 0;           // 0..7: stripe grating family
    MarkerGridSpec marker_grid;
    uint64_t noise_seed = 0;
};

void validate(const SceneSpec& spec);  // throws std::invalid_argument

struct Labels {
    int shape_class = 0;
    int texture_id = 0;
    double edge_x = 0, edge_z = 0, edge_theta = 0;    // mm, mm, degrees
    double px = 0, py = 0, pz = 0;                    // mm
    double fx = 0, fy = 0, fz = 0;                    // N (fixed linear stiffness map)
};

struct LabeledImage {
    Image pixels;  // kRenderSize x kRenderSize, values in [0,1]
    Labels labels;
};

Labels labels_from_spec(const SceneSpec& spec);

// Deterministic render of one scene in the requested modality.
LabeledImage generate_sample(const SceneSpec& spec, Modality mode = Modality::kFused);

// Decomposition access for the compositing invariant: the visual layer and
// the marker alpha map such that fused = visual*(1-a) + marker_color*a.
struct RenderLayers {
    Image visual;                 // shape+texture layer with noise
    std::vector<float> marker_alpha;  // [H*W]
};
RenderLayers render_layers(const SceneSpec& spec);
float marker_color();
float marker_background();

// Reference (undeformed) marker centers in pixel coordinates, row-major.
std::vector<std::array<double, 2>> marker_reference_centers(const MarkerGridSpec& g);
// Deformed marker centers under the spec's contact.
std::vector<std::array<double, 2>> marker_deformed_centers(const SceneSpec& spec);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class Task { kShape, kTexture, kEdgePose, kContactPoint, kForce };

Task task_from_string(const std::string& s);
std::string task_to_string(Task t);
bool task_is_classification(Task t);
int task_num_classes(Task t);  // classification tasks only
// Regression target vector for a task (3 components).
std::array<double, 3> task_regression_target(Task t, const Labels& l);
int task_class_label(Task t, const Labels& l);

enum class Split { kTrain, kVal, kTest };

struct DatasetSample {
    SceneSpec spec;
    Labels labels;
    Split split = Split::kTrain;
    std::string file;  // relative image path once persisted
};

struct Dataset {
    Task task = Task::kShape;
    Modality modality = Modality::kFused;
    uint64_t seed = 0;
    std::vector<DatasetSample> samples;
    float norm_mean[3] = {0.5f, 0.5f, 0.5f};
    float norm_std[3] = {0.25f, 0.25f, 0.25f};

    std::vector<int> split_indices(Split s) const;
};

// Draws n_samples scene specs (class-balanced for classification tasks),
// assigns disjoint 70/15/15 splits deterministically, and computes the
// per-channel normalization constants from the train split.
Dataset make_dataset(Task task, int n_samples, uint64_t seed,
                     Modality modality = Modality::kFused);

// Persist as a directory of PPM files plus manifest.jsonl (header record with
// schema_version, then one record per sample).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Rendered images of the dataset in a given modality, quantized the same way
// as the persisted files. Index-aligned with ds.samples.
std::vector<ImageU8> render_dataset(const Dataset& ds, Modality mode);

}  // namespace sarl
