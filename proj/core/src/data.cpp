#include "ddpmcd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ddpmcd/image_io.hpp"
#include "ddpmcd/random.hpp"

namespace ddpmcd::data {

namespace {

double point_segment_dist(double px, double py, double ax, double ay, double bx, double by) {
    double dx = bx - ax, dy = by - ay;
    double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    double cx = ax + t * dx, cy = ay + t * dy;
    return std::hypot(px - cx, py - cy);
}

constexpr uint64_t kSceneTag = 0x7363656eULL;    // scene stream
constexpr uint64_t kEditTag = 0x65646974ULL;     // pair-edit stream
constexpr uint64_t kJitterTag = 0x6a697474ULL;   // photometric stream

// Average pixels touched by one edit at size 64, measured on the generator;
// scales quadratically. Calibrates edit count against change_rate.
constexpr double kAvgEditPixels64 = 110.0;

std::array<float, 3> jittered(Rng& rng, std::array<float, 3> base, float amount) {
    for (auto& c : base) c = std::clamp(c + static_cast<float>(rng.uniform(-amount, amount)), 0.0f, 1.0f);
    return base;
}

SceneObject make_rect(Rng& rng, int size, int id) {
    double s = size / 64.0;
    SceneObject o;
    o.kind = SceneObject::Kind::rect;
    o.id = id;
    double w = rng.uniform(6.0, 16.0) * s;
    double h = rng.uniform(6.0, 16.0) * s;
    double x0 = rng.uniform(-w / 2, size - w / 2);
    double y0 = rng.uniform(-h / 2, size - h / 2);
    o.geo = {x0, y0, x0 + w, y0 + h};
    static constexpr std::array<std::array<float, 3>, 4> palette{{{0.75f, 0.75f, 0.78f},
                                                                  {0.85f, 0.82f, 0.80f},
                                                                  {0.60f, 0.30f, 0.25f},
                                                                  {0.35f, 0.40f, 0.55f}}};
    o.color = jittered(rng, palette[static_cast<size_t>(rng.uniform_int(0, 3))], 0.05f);
    return o;
}

SceneObject make_ellipse(Rng& rng, int size, int id) {
    double s = size / 64.0;
    SceneObject o;
    o.kind = SceneObject::Kind::ellipse;
    o.id = id;
    double rx = rng.uniform(3.0, 8.0) * s;
    double ry = rng.uniform(3.0, 8.0) * s;
    o.geo = {rng.uniform(0.0, size), rng.uniform(0.0, size), rx, ry};
    o.color = jittered(rng, {0.15f, 0.30f, 0.12f}, 0.05f);
    return o;
}

SceneObject make_polyline(Rng& rng, int size, int id) {
    double s = size / 64.0;
    SceneObject o;
    o.kind = SceneObject::Kind::polyline;
    o.id = id;
    o.thickness = rng.uniform(1.5, 2.5) * s;
    double x = rng.uniform(0.0, size);
    double y = rng.uniform01() < 0.5 ? 0.0 : size;
    o.points.emplace_back(x, y);
    int segs = static_cast<int>(rng.uniform_int(2, 3));
    double dir = y == 0.0 ? 1.0 : -1.0;
    for (int i = 0; i < segs; ++i) {
        x += rng.uniform(-0.4, 0.4) * size;
        y += dir * rng.uniform(0.3, 0.6) * size;
        o.points.emplace_back(x, y);
    }
    o.color = jittered(rng, {0.35f, 0.35f, 0.37f}, 0.03f);
    return o;
}

void shift_object(SceneObject& o, double dx, double dy) {
    switch (o.kind) {
        case SceneObject::Kind::rect:
            o.geo[0] += dx;
            o.geo[2] += dx;
            o.geo[1] += dy;
            o.geo[3] += dy;
            break;
        case SceneObject::Kind::ellipse:
            o.geo[0] += dx;
            o.geo[1] += dy;
            break;
        case SceneObject::Kind::polyline:
            for (auto& [px, py] : o.points) {
                px += dx;
                py += dy;
            }
            break;
    }
}

// Two-octave value noise in [0,1] from a seeded lattice.
std::vector<float> value_noise(int size, uint64_t seed) {
    auto lattice = [&](int cells, uint64_t tag) {
        Rng rng(mix_seed(seed, tag));
        std::vector<double> grid(static_cast<size_t>((cells + 1) * (cells + 1)));
        for (auto& v : grid) v = rng.uniform01();
        return grid;
    };
    auto sample = [](const std::vector<double>& grid, int cells, double u, double v) {
        double gu = u * cells, gv = v * cells;
        int iu = std::min(static_cast<int>(gu), cells - 1);
        int iv = std::min(static_cast<int>(gv), cells - 1);
        double fu = gu - iu, fv = gv - iv;
        auto at = [&](int a, int b) { return grid[static_cast<size_t>(b * (cells + 1) + a)]; };
        return (at(iu, iv) * (1 - fu) + at(iu + 1, iv) * fu) * (1 - fv) +
               (at(iu, iv + 1) * (1 - fu) + at(iu + 1, iv + 1) * fu) * fv;
    };
    auto coarse = lattice(4, 1);
    auto fine = lattice(8, 2);
    std::vector<float> out(static_cast<size_t>(size) * size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double u = (x + 0.5) / size, v = (y + 0.5) / size;
            out[static_cast<size_t>(y * size + x)] =
                static_cast<float>(0.7 * sample(coarse, 4, u, v) + 0.3 * sample(fine, 8, u, v));
        }
    return out;
}

}  // namespace

bool SceneObject::covers(double x, double y) const {
    switch (kind) {
        case Kind::rect:
            return x >= geo[0] && x < geo[2] && y >= geo[1] && y < geo[3];
        case Kind::ellipse: {
            double nx = (x - geo[0]) / geo[2], ny = (y - geo[1]) / geo[3];
            return nx * nx + ny * ny <= 1.0;
        }
        case Kind::polyline: {
            for (size_t i = 0; i + 1 < points.size(); ++i)
                if (point_segment_dist(x, y, points[i].first, points[i].second, points[i + 1].first,
                                       points[i + 1].second) <= thickness / 2)
                    return true;
            return false;
        }
    }
    return false;
}

Scene synth_scene(int size, uint64_t seed, int64_t index) {
    Rng rng(mix_seed(seed, kSceneTag, static_cast<uint64_t>(index)));
    Scene scene;
    scene.size = size;
    scene.texture_seed = rng.next_u64();
    scene.base_color = {static_cast<float>(rng.uniform(0.25, 0.45)),
                        static_cast<float>(rng.uniform(0.35, 0.55)),
                        static_cast<float>(rng.uniform(0.20, 0.35))};
    int id = 0;
    int blobs = static_cast<int>(rng.uniform_int(1, 4));
    for (int i = 0; i < blobs; ++i) scene.objects.push_back(make_ellipse(rng, size, id++));
    int roads = static_cast<int>(rng.uniform_int(0, 2));
    for (int i = 0; i < roads; ++i) scene.objects.push_back(make_polyline(rng, size, id++));
    int rects = static_cast<int>(rng.uniform_int(2, 5));
    for (int i = 0; i < rects; ++i) scene.objects.push_back(make_rect(rng, size, id++));
    return scene;
}

ScenePair synth_scene_pair(int size, double change_rate, uint64_t seed, int64_t index) {
    if (change_rate < 0.0 || change_rate > 1.0)
        throw ConfigError("synth_scene_pair: change_rate must be in [0,1]");
    ScenePair pair;
    pair.a = synth_scene(size, seed, index);
    pair.b = pair.a;

    double avg_edit = kAvgEditPixels64 * (size / 64.0) * (size / 64.0);
    int edits = static_cast<int>(std::lround(change_rate * size * size / avg_edit));
    Rng rng(mix_seed(seed, kEditTag, static_cast<uint64_t>(index)));
    int next_id = static_cast<int>(pair.a.objects.size());
    double s = size / 64.0;

    for (int e = 0; e < edits; ++e) {
        int op = static_cast<int>(rng.uniform_int(0, 2));
        if (next_id >= 63) op = 1;  // membership bitmask is 64 bits wide
        if (op == 0) {  // add
            SceneObject o = rng.uniform01() < 0.7 ? make_rect(rng, size, next_id++)
                                                  : make_ellipse(rng, size, next_id++);
            pair.b.objects.push_back(o);
        } else if (op == 1 && !pair.b.objects.empty()) {  // remove
            size_t k = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pair.b.objects.size()) - 1));
            pair.b.objects.erase(pair.b.objects.begin() + static_cast<std::ptrdiff_t>(k));
        } else if (!pair.b.objects.empty()) {  // move
            size_t k = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pair.b.objects.size()) - 1));
            double dx = rng.uniform(3.0, 8.0) * s * (rng.uniform01() < 0.5 ? -1 : 1);
            double dy = rng.uniform(3.0, 8.0) * s * (rng.uniform01() < 0.5 ? -1 : 1);
            shift_object(pair.b.objects[k], dx, dy);
        }
    }
    return pair;
}

Tensor render_scene(const Scene& scene) {
    int size = scene.size;
    Tensor img = zeros({3, size, size});
    auto d = img.mutable_data<float>();
    auto noise = value_noise(size, scene.texture_seed);
    int64_t hw = static_cast<int64_t>(size) * size;
    for (int64_t i = 0; i < hw; ++i) {
        float n = 0.65f + 0.7f * noise[static_cast<size_t>(i)];
        for (int c = 0; c < 3; ++c)
            d[static_cast<size_t>(c * hw + i)] = std::clamp(scene.base_color[static_cast<size_t>(c)] * n, 0.0f, 1.0f);
    }
    for (const auto& obj : scene.objects)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (obj.covers(x + 0.5, y + 0.5))
                    for (int c = 0; c < 3; ++c)
                        d[static_cast<size_t>(c * hw + y * size + x)] = obj.color[static_cast<size_t>(c)];
    return img;
}

std::vector<uint64_t> membership(const Scene& scene) {
    int size = scene.size;
    std::vector<uint64_t> bits(static_cast<size_t>(size) * size, 0);
    for (const auto& obj : scene.objects) {
        if (obj.id >= 64) throw ContractError("membership: object id exceeds 64-bit mask");
        uint64_t bit = 1ULL << obj.id;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (obj.covers(x + 0.5, y + 0.5)) bits[static_cast<size_t>(y * size + x)] |= bit;
    }
    return bits;
}

Tensor membership_diff_mask(const Scene& a, const Scene& b) {
    if (a.size != b.size) throw ContractError("membership_diff_mask: scene sizes differ");
    auto ma = membership(a);
    auto mb = membership(b);
    Tensor mask = zeros({a.size, a.size});
    auto d = mask.mutable_data<float>();
    for (size_t i = 0; i < ma.size(); ++i) d[i] = ma[i] != mb[i] ? 1.0f : 0.0f;
    return mask;
}

Tensor synth_pretrain_image(int size, uint64_t seed, int64_t index) {
    return render_scene(synth_scene(size, seed, index));
}

CdSample synth_cd_sample(int size, double change_rate, uint64_t seed, int64_t index) {
    ScenePair pair = synth_scene_pair(size, change_rate, seed, index);
    CdSample sample;
    sample.id = "synth_" + std::to_string(index) + ".png";
    sample.img_a = render_scene(pair.a);
    sample.mask = membership_diff_mask(pair.a, pair.b);

    Tensor b = render_scene(pair.b);
    Rng rng(mix_seed(seed, kJitterTag, static_cast<uint64_t>(index)));
    float brightness = static_cast<float>(rng.uniform(-0.12, 0.12));
    float contrast = static_cast<float>(rng.uniform(0.85, 1.20));
    std::array<float, 3> gain{static_cast<float>(rng.uniform(0.95, 1.05)),
                              static_cast<float>(rng.uniform(0.95, 1.05)),
                              static_cast<float>(rng.uniform(0.95, 1.05))};
    auto d = b.mutable_data<float>();
    int64_t hw = static_cast<int64_t>(size) * size;
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i) {
            float& v = d[static_cast<size_t>(c * hw + i)];
            v = std::clamp(gain[static_cast<size_t>(c)] * (0.5f + contrast * (v - 0.5f)) + brightness,
                           0.0f, 1.0f);
        }
    sample.img_b = b;
    return sample;
}

std::vector<CdSample> synth_cd_dataset(int n, int size, double change_rate, uint64_t seed) {
    std::vector<CdSample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(synth_cd_sample(size, change_rate, seed, i));
    return out;
}

namespace {
// Reflect-pads a [C,H,W] or [H,W] tensor on the bottom/right to the target
// size.
Tensor reflect_pad(const Tensor& t, int64_t target_h, int64_t target_w) {
    bool has_c = t.ndim() == 3;
    int64_t c = has_c ? t.dim(0) : 1;
    int64_t h = t.dim(has_c ? 1 : 0), w = t.dim(has_c ? 2 : 1);
    Shape out_shape = has_c ? Shape{c, target_h, target_w} : Shape{target_h, target_w};
    Tensor out = zeros(out_shape, t.dtype());
    auto src = t.data<float>();
    auto dst = out.mutable_data<float>();
    auto reflect = [](int64_t i, int64_t n) {
        if (i < n) return i;
        int64_t r = 2 * n - 2 - i;  // mirror without repeating the edge
        return std::clamp<int64_t>(r, 0, n - 1);
    };
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < target_h; ++y)
            for (int64_t x = 0; x < target_w; ++x)
                dst[static_cast<size_t>((ci * target_h + y) * target_w + x)] =
                    src[static_cast<size_t>((ci * h + reflect(y, h)) * w + reflect(x, w))];
    return out;
}

Tensor crop(const Tensor& t, int64_t y0, int64_t x0, int64_t size) {
    bool has_c = t.ndim() == 3;
    int64_t c = has_c ? t.dim(0) : 1;
    int64_t h = t.dim(has_c ? 1 : 0), w = t.dim(has_c ? 2 : 1);
    Shape out_shape = has_c ? Shape{c, size, size} : Shape{size, size};
    Tensor out = zeros(out_shape, t.dtype());
    auto src = t.data<float>();
    auto dst = out.mutable_data<float>();
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x)
                dst[static_cast<size_t>((ci * size + y) * size + x)] =
                    src[static_cast<size_t>((ci * h + y0 + y) * w + x0 + x)];
    return out;
}
}  // namespace

std::vector<CdSample> patchify(const CdSample& sample, int patch_size) {
    if (patch_size < 1) throw ConfigError("patchify: patch_size must be >= 1");
    int64_t h = sample.mask.dim(0), w = sample.mask.dim(1);
    int64_t ph = (h + patch_size - 1) / patch_size * patch_size;
    int64_t pw = (w + patch_size - 1) / patch_size * patch_size;
    Tensor a = sample.img_a, b = sample.img_b, m = sample.mask;
    if (ph != h || pw != w) {
        a = reflect_pad(a, ph, pw);
        b = reflect_pad(b, ph, pw);
        m = reflect_pad(m, ph, pw);
    }
    std::string base = sample.id;
    if (auto pos = base.rfind(".png"); pos != std::string::npos) base = base.substr(0, pos);
    std::vector<CdSample> out;
    for (int64_t r = 0; r < ph / patch_size; ++r)
        for (int64_t cgrid = 0; cgrid < pw / patch_size; ++cgrid) {
            CdSample p;
            p.id = base + "_r" + std::to_string(r) + "c" + std::to_string(cgrid) + ".png";
            p.img_a = crop(a, r * patch_size, cgrid * patch_size, patch_size);
            p.img_b = crop(b, r * patch_size, cgrid * patch_size, patch_size);
            p.mask = crop(m, r * patch_size, cgrid * patch_size, patch_size);
            out.push_back(std::move(p));
        }
    return out;
}

const std::vector<std::string>& DatasetManifest::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected train|val|test)");
}

namespace {
std::vector<std::string> read_id_list(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw DataError("load_manifest: cannot open split file " + file.string());
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    return ids;
}
}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& root) {
    DatasetManifest m;
    m.root = root;
    m.train = read_id_list(root / "train.txt");
    m.val = read_id_list(root / "val.txt");
    m.test = read_id_list(root / "test.txt");

    std::set<std::string> seen;
    auto check_disjoint = [&](const std::vector<std::string>& ids, const char* split) {
        for (const auto& id : ids)
            if (!seen.insert(id).second)
                throw DataError("load_manifest: id '" + id + "' in split '" + split +
                                "' overlaps another split");
    };
    check_disjoint(m.train, "train");
    check_disjoint(m.val, "val");
    check_disjoint(m.test, "test");

    for (const auto& id : seen)
        for (const char* dir : {"A", "B", "label"}) {
            auto p = root / dir / id;
            if (!std::filesystem::exists(p))
                throw DataError("load_manifest: missing file " + p.string());
        }
    return m;
}

CdSample load_sample(const DatasetManifest& manifest, const std::string& id) {
    CdSample s;
    s.id = id;
    auto img_a = image::read_png(manifest.root / "A" / id);
    auto img_b = image::read_png(manifest.root / "B" / id);
    auto lbl = image::read_png(manifest.root / "label" / id);
    if (img_a.channels != 3 || img_b.channels != 3)
        throw DataError("load_sample: " + id + ": A/B images must be RGB");
    if (img_a.width != img_b.width || img_a.height != img_b.height ||
        img_a.width != lbl.width || img_a.height != lbl.height)
        throw DataError("load_sample: " + id + ": A/B/label dimensions differ");
    s.img_a = image::to_tensor(img_a);
    s.img_b = image::to_tensor(img_b);
    s.mask = image::mask_to_tensor(lbl, (manifest.root / "label" / id).string());
    return s;
}

void save_dataset(const std::filesystem::path& root, const std::vector<CdSample>& train,
                  const std::vector<CdSample>& val, const std::vector<CdSample>& test) {
    namespace fs = std::filesystem;
    for (const char* dir : {"A", "B", "label"}) fs::create_directories(root / dir);
    auto write_split = [&](const std::vector<CdSample>& samples, const char* name) {
        std::ofstream list(root / (std::string(name) + ".txt"));
        if (!list) throw DataError("save_dataset: cannot write split file for " + std::string(name));
        for (const auto& s : samples) {
            image::write_png(root / "A" / s.id, image::to_image(s.img_a));
            image::write_png(root / "B" / s.id, image::to_image(s.img_b));
            image::write_png(root / "label" / s.id, image::mask_to_image(s.mask));
            list << s.id << "\n";
        }
    };
    write_split(train, "train");
    write_split(val, "val");
    write_split(test, "test");
}

}  // namespace ddpmcd::data
