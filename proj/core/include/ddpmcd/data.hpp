#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddpmcd/tensor.hpp"

namespace ddpmcd::data {

// Bi-temporal sample: co-registered [3,H,W] images in [0,1] plus a binary
// change mask [H,W].
struct CdSample {
    Tensor img_a, img_b, mask;
    std::string id;
};

// --- synthetic scenes ---
// Geometry is public so tests can recompute change masks independently of the
// rasterizer used here.

struct SceneObject {
    enum class Kind { rect, ellipse, polyline };
    Kind kind = Kind::rect;
    int id = 0;  // stable across a pair; bit position in the membership mask
    // rect: {x0,y0,x1,y1}; ellipse: {cx,cy,rx,ry}
    std::array<double, 4> geo{};
    std::vector<std::pair<double, double>> points;  // polyline vertices
    double thickness = 0.0;
    std::array<float, 3> color{};

    bool covers(double x, double y) const;
};

struct Scene {
    int size = 0;
    std::array<float, 3> base_color{};
    uint64_t texture_seed = 0;
    std::vector<SceneObject> objects;
};

struct ScenePair {
    Scene a, b;
};

Scene synth_scene(int size, uint64_t seed, int64_t index);
// b is a with a change_rate-calibrated number of objects added/removed/moved.
ScenePair synth_scene_pair(int size, double change_rate, uint64_t seed, int64_t index);

Tensor render_scene(const Scene& scene);  // [3,S,S] in [0,1]
// Per-pixel bitmask of covering object ids.
std::vector<uint64_t> membership(const Scene& scene);
// 1 where the covering-object sets differ.
Tensor membership_diff_mask(const Scene& a, const Scene& b);

// Procedural aerial-like image, deterministic per (seed, index).
Tensor synth_pretrain_image(int size, uint64_t seed, int64_t index);

// Semantic edits define the mask; img_b additionally gets global photometric
// jitter (brightness/contrast/channel gain) that never enters the mask.
CdSample synth_cd_sample(int size, double change_rate, uint64_t seed, int64_t index);
std::vector<CdSample> synth_cd_dataset(int n, int size, double change_rate, uint64_t seed);

// Non-overlapping grid tiles; reflect-pads when patch_size does not divide
// the image. Tile ids get an _r<row>c<col> suffix.
std::vector<CdSample> patchify(const CdSample& sample, int patch_size);

// --- directory manifests (A/, B/, label/ + train.txt/val.txt/test.txt) ---

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<std::string> train, val, test;

    const std::vector<std::string>& split(const std::string& name) const;
};

// Validates layout: split files readable, splits disjoint, every id resolving
// to A/<id>, B/<id>, label/<id>.
DatasetManifest load_manifest(const std::filesystem::path& root);
CdSample load_sample(const DatasetManifest& manifest, const std::string& id);
void save_dataset(const std::filesystem::path& root, const std::vector<CdSample>& train,
                  const std::vector<CdSample>& val, const std::vector<CdSample>& test);

}  // namespace ddpmcd::data
