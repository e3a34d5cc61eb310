#include "splatocc/io.hpp"

#include <bit>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace splatocc {
namespace {

constexpr char kMagic[9] = "SPLATOCC";  // 8 bytes on the wire
constexpr std::uint32_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Little-endian byte packing. Buffers are assembled in memory and written in
// one shot, so identical content always produces identical files.
// ---------------------------------------------------------------------------

struct ByteWriter {
    std::string buf;

    void raw(const void* p, std::size_t n) {
        buf.append(static_cast<const char*>(p), n);
    }
    void u16(std::uint16_t v) {
        buf.push_back(char(v & 0xFF));
        buf.push_back(char((v >> 8) & 0xFF));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
    }
    void f32(real v) { u32(std::bit_cast<std::uint32_t>(float(v))); }
    void header(const char tag[5]) {
        raw(kMagic, 8);
        raw(tag, 4);
        u32(kFormatVersion);
    }
};

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;
    std::string what;  // file description for error messages

    ByteReader(const std::string& b, std::string w) : buf(b), what(std::move(w)) {}

    void need(std::size_t n) const {
        require(pos + n <= buf.size(), what + ": truncated file");
    }
    std::uint16_t u16() {
        need(2);
        const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
        pos += 2;
        return std::uint16_t(p[0] | (std::uint32_t(p[1]) << 8));
    }
    std::uint32_t u32() {
        need(4);
        const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
        pos += 4;
        return p[0] | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
               (std::uint32_t(p[3]) << 24);
    }
    std::uint64_t u64() {
        const std::uint64_t lo = u32();
        return lo | (std::uint64_t(u32()) << 32);
    }
    real f32() { return real(std::bit_cast<float>(u32())); }
    void header(const char tag[5]) {
        need(16);
        require(buf.compare(pos, 8, kMagic, 8) == 0, what + ": bad magic");
        pos += 8;
        require(buf.compare(pos, 4, tag, 4) == 0, what + ": wrong format tag");
        pos += 4;
        require(u32() == kFormatVersion, what + ": unsupported format version");
    }
    void done() const {
        require(pos == buf.size(), what + ": trailing bytes after payload");
    }
};

// ---------------------------------------------------------------------------
// Voxel grid body (shared by the grid file and the scene bundle).
// ---------------------------------------------------------------------------

void write_grid_body(ByteWriter& w, const VoxelGrid& grid) {
    const GridSpec& g = grid.spec;
    require(grid.logits.rank() == 4 && grid.logits.dim(0) == g.extents[0] &&
                grid.logits.dim(1) == g.extents[1] &&
                grid.logits.dim(2) == g.extents[2] &&
                grid.logits.dim(3) == g.num_classes,
            "grid save: logits shape disagrees with the spec");
    w.u32(std::uint32_t(g.extents[0]));
    w.u32(std::uint32_t(g.extents[1]));
    w.u32(std::uint32_t(g.extents[2]));
    w.u32(std::uint32_t(g.num_classes));
    for (int a = 0; a < 3; ++a) w.f32(g.origin[a]);
    w.f32(g.voxel_size);
    for (std::size_t i = 0; i < grid.logits.size(); ++i) w.f32(grid.logits[i]);
    const std::vector<std::uint16_t> labels =
        grid.labels.size() == g.voxel_count() ? grid.labels : argmax_labels(grid);
    for (const std::uint16_t label : labels) w.u16(label);
}

VoxelGrid read_grid_body(ByteReader& r) {
    VoxelGrid grid;
    GridSpec& g = grid.spec;
    for (int a = 0; a < 3; ++a) g.extents[a] = r.u32();
    g.num_classes = r.u32();
    for (int a = 0; a < 3; ++a) g.origin[a] = r.f32();
    g.voxel_size = r.f32();
    require(g.num_classes >= 1, r.what + ": class count must be positive");
    grid.logits = Tensor({g.extents[0], g.extents[1], g.extents[2], g.num_classes});
    for (std::size_t i = 0; i < grid.logits.size(); ++i) grid.logits[i] = r.f32();
    grid.labels.resize(g.voxel_count());
    for (auto& label : grid.labels) label = r.u16();
    return grid;
}

void write_camera_body(ByteWriter& w, const CameraFeatureMap& cam) {
    require(cam.values.rank() == 4 && cam.values.dim(1) == 1,
            "camera save: values must be (C, 1, H, W)");
    w.u32(std::uint32_t(cam.values.dim(0)));
    w.u32(std::uint32_t(cam.values.dim(2)));
    w.u32(std::uint32_t(cam.values.dim(3)));
    w.f32(cam.fx);
    w.f32(cam.fy);
    w.f32(cam.cx);
    w.f32(cam.cy);
    for (const real v : cam.rot) w.f32(v);
    for (const real v : cam.trans) w.f32(v);
    w.f32(cam.z_near);
    for (std::size_t i = 0; i < cam.values.size(); ++i) w.f32(cam.values[i]);
}

CameraFeatureMap read_camera_body(ByteReader& r) {
    CameraFeatureMap cam;
    const std::size_t c = r.u32(), h = r.u32(), w = r.u32();
    cam.fx = r.f32();
    cam.fy = r.f32();
    cam.cx = r.f32();
    cam.cy = r.f32();
    for (real& v : cam.rot) v = r.f32();
    for (real& v : cam.trans) v = r.f32();
    cam.z_near = r.f32();
    cam.values = Tensor({c, 1, h, w});
    for (std::size_t i = 0; i < cam.values.size(); ++i) cam.values[i] = r.f32();
    return cam;
}

// ---------------------------------------------------------------------------
// Config text helpers.
// ---------------------------------------------------------------------------

std::string fmt_real(real v) {
    char tmp[64];
    std::snprintf(tmp, sizeof(tmp), "%.17g", double(v));
    return tmp;
}

std::string fmt_size(std::size_t v) {
    char tmp[32];
    std::snprintf(tmp, sizeof(tmp), "%zu", v);
    return tmp;
}

std::string fmt_u64(std::uint64_t v) {
    char tmp[32];
    std::snprintf(tmp, sizeof(tmp), "%" PRIu64, v);
    return tmp;
}

const char* fmt_bool(bool v) { return v ? "true" : "false"; }

const char* fusion_name(FusionMode mode) {
    switch (mode) {
        case FusionMode::add: return "add";
        case FusionMode::concat: return "concat";
        case FusionMode::aclf: return "aclf";
    }
    throw validation_error("config: unknown fusion mode");
}

std::string shape_value(const ShapeSpec& s) {
    switch (s.kind) {
        case ShapeKind::ground:
            return "ground " + fmt_size(s.label) + " " + fmt_real(s.center[2]);
        case ShapeKind::box:
            return "box " + fmt_size(s.label) + " " + fmt_real(s.center[0]) + " " +
                   fmt_real(s.center[1]) + " " + fmt_real(s.center[2]) + " " +
                   fmt_real(s.half[0]) + " " + fmt_real(s.half[1]) + " " +
                   fmt_real(s.half[2]);
        case ShapeKind::cylinder:
            return "cylinder " + fmt_size(s.label) + " " + fmt_real(s.center[0]) +
                   " " + fmt_real(s.center[1]) + " " + fmt_real(s.center[2]) + " " +
                   fmt_real(s.half[0]) + " " + fmt_real(s.half[2]);
    }
    throw validation_error("config: unknown shape kind");
}

real parse_real(const std::string& v, const std::string& key) {
    const char* s = v.c_str();
    char* end = nullptr;
    const double d = std::strtod(s, &end);
    require(end == s + v.size() && !v.empty(), "config: bad number for " + key);
    return real(d);
}

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    const char* s = v.c_str();
    char* end = nullptr;
    const unsigned long long n = std::strtoull(s, &end, 10);
    require(end == s + v.size() && !v.empty() && v[0] != '-',
            "config: bad integer for " + key);
    return n;
}

std::size_t parse_size(const std::string& v, const std::string& key) {
    return std::size_t(parse_u64(v, key));
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw validation_error("config: expected true/false for " + key);
}

FusionMode parse_fusion(const std::string& v) {
    if (v == "add") return FusionMode::add;
    if (v == "concat") return FusionMode::concat;
    if (v == "aclf") return FusionMode::aclf;
    throw validation_error("config: unknown fusion mode '" + v + "'");
}

std::vector<std::string> split_ws(const std::string& v) {
    std::vector<std::string> out;
    std::istringstream in(v);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

ShapeSpec parse_shape(const std::string& v, const std::string& key) {
    const auto tok = split_ws(v);
    require(tok.size() >= 2, "config: shape needs a kind and a label for " + key);
    ShapeSpec s;
    const auto label = parse_u64(tok[1], key);
    require(label <= std::numeric_limits<std::uint16_t>::max(),
            "config: shape label too large for " + key);
    s.label = std::uint16_t(label);
    if (tok[0] == "ground") {
        require(tok.size() == 3, "config: ground expects 'ground label z' for " + key);
        s.kind = ShapeKind::ground;
        s.center[2] = parse_real(tok[2], key);
    } else if (tok[0] == "box") {
        require(tok.size() == 8,
                "config: box expects 'box label cx cy cz hx hy hz' for " + key);
        s.kind = ShapeKind::box;
        for (int a = 0; a < 3; ++a) s.center[a] = parse_real(tok[2 + a], key);
        for (int a = 0; a < 3; ++a) s.half[a] = parse_real(tok[5 + a], key);
    } else if (tok[0] == "cylinder") {
        require(tok.size() == 7,
                "config: cylinder expects 'cylinder label cx cy cz radius "
                "half_height' for " + key);
        s.kind = ShapeKind::cylinder;
        for (int a = 0; a < 3; ++a) s.center[a] = parse_real(tok[2 + a], key);
        s.half[0] = parse_real(tok[5], key);
        s.half[2] = parse_real(tok[6], key);
    } else {
        throw validation_error("config: unknown shape kind '" + tok[0] + "'");
    }
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// Whole-file helpers.
// ---------------------------------------------------------------------------

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    require(in.good() || in.eof(), "read failed: " + path);
    return buf.str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot create file: " + path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.flush();
    require(out.good(), "write failed: " + path);
}

// ---------------------------------------------------------------------------
// Binary formats.
// ---------------------------------------------------------------------------

void save_voxel_grid(const std::string& path, const VoxelGrid& grid) {
    ByteWriter w;
    w.header("VOXL");
    write_grid_body(w, grid);
    write_file_bytes(path, w.buf);
}

VoxelGrid load_voxel_grid(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    ByteReader r(bytes, "voxel grid '" + path + "'");
    r.header("VOXL");
    VoxelGrid grid = read_grid_body(r);
    r.done();
    return grid;
}

void save_feature_volume(const std::string& path, const FeatureVolume& volume) {
    require(volume.values.rank() == 4 &&
                volume.values.dim(1) == volume.spec.depth &&
                volume.values.dim(2) == volume.spec.height &&
                volume.values.dim(3) == volume.spec.width,
            "volume save: values shape disagrees with the spec");
    ByteWriter w;
    w.header("FVOL");
    w.u32(std::uint32_t(volume.values.dim(0)));
    w.u32(std::uint32_t(volume.spec.depth));
    w.u32(std::uint32_t(volume.spec.height));
    w.u32(std::uint32_t(volume.spec.width));
    for (int a = 0; a < 3; ++a) w.f32(volume.spec.origin[a]);
    for (int a = 0; a < 3; ++a) w.f32(volume.spec.cell_size[a]);
    for (std::size_t i = 0; i < volume.values.size(); ++i) w.f32(volume.values[i]);
    write_file_bytes(path, w.buf);
}

FeatureVolume load_feature_volume(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    ByteReader r(bytes, "feature volume '" + path + "'");
    r.header("FVOL");
    FeatureVolume vol;
    const std::size_t c = r.u32();
    vol.spec.depth = r.u32();
    vol.spec.height = r.u32();
    vol.spec.width = r.u32();
    for (int a = 0; a < 3; ++a) vol.spec.origin[a] = r.f32();
    for (int a = 0; a < 3; ++a) vol.spec.cell_size[a] = r.f32();
    vol.values = Tensor({c, vol.spec.depth, vol.spec.height, vol.spec.width});
    for (std::size_t i = 0; i < vol.values.size(); ++i) vol.values[i] = r.f32();
    r.done();
    return vol;
}

void save_gaussian_set(const std::string& path, const GaussianSet& set) {
    const std::size_t n = set.size();
    const std::size_t classes = set.num_classes();
    const std::size_t feat = set.feat_dim();
    require(set.means.rank() == 2 && set.means.dim(1) == 3 &&
                set.rotations.rank() == 2 && set.rotations.dim(0) == n &&
                set.rotations.dim(1) == 4 && set.log_scales.rank() == 2 &&
                set.log_scales.dim(0) == n && set.log_scales.dim(1) == 3 &&
                set.opacity_logits.size() == n && set.class_logits.rank() == 2 &&
                set.class_logits.dim(0) == n && set.features.rank() == 2 &&
                set.features.dim(0) == n,
            "gaussian save: inconsistent set tensors");

    ByteWriter w;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < 3; ++a) w.f32(set.means.at(i, a));
        for (std::size_t a = 0; a < 4; ++a) w.f32(set.rotations.at(i, a));
        for (std::size_t a = 0; a < 3; ++a) w.f32(set.log_scales.at(i, a));
        w.f32(set.opacity_logits[i]);
        for (std::size_t a = 0; a < classes; ++a) w.f32(set.class_logits.at(i, a));
        for (std::size_t a = 0; a < feat; ++a) w.f32(set.features.at(i, a));
    }
    write_file_bytes(path, w.buf);

    nlohmann::json sidecar;
    sidecar["count"] = n;
    sidecar["feature_dim"] = feat;
    sidecar["num_classes"] = classes;
    write_file_bytes(path + ".json", sidecar.dump(2) + "\n");
}

GaussianSet load_gaussian_set(const std::string& path) {
    nlohmann::json sidecar;
    try {
        sidecar = nlohmann::json::parse(read_file_bytes(path + ".json"));
    } catch (const nlohmann::json::exception& e) {
        throw validation_error("gaussian sidecar '" + path + ".json': " + e.what());
    }
    require(sidecar.contains("count") && sidecar.contains("num_classes") &&
                sidecar.contains("feature_dim"),
            "gaussian sidecar '" + path + ".json': missing record geometry");
    const auto n = sidecar["count"].get<std::size_t>();
    const auto classes = sidecar["num_classes"].get<std::size_t>();
    const auto feat = sidecar["feature_dim"].get<std::size_t>();

    const std::string bytes = read_file_bytes(path);
    const std::size_t record = 11 + classes + feat;
    require(bytes.size() == n * record * 4,
            "gaussian set '" + path + "': size disagrees with its sidecar");

    GaussianSet set;
    set.means = Tensor({n, 3});
    set.rotations = Tensor({n, 4});
    set.log_scales = Tensor({n, 3});
    set.opacity_logits = Tensor({n});
    set.class_logits = Tensor({n, classes});
    set.features = Tensor({n, feat});
    ByteReader r(bytes, "gaussian set '" + path + "'");
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < 3; ++a) set.means.at(i, a) = r.f32();
        for (std::size_t a = 0; a < 4; ++a) set.rotations.at(i, a) = r.f32();
        for (std::size_t a = 0; a < 3; ++a) set.log_scales.at(i, a) = r.f32();
        set.opacity_logits[i] = r.f32();
        for (std::size_t a = 0; a < classes; ++a) set.class_logits.at(i, a) = r.f32();
        for (std::size_t a = 0; a < feat; ++a) set.features.at(i, a) = r.f32();
    }
    r.done();
    return set;
}

void save_scene(const std::string& path, const SyntheticScene& scene) {
    ByteWriter w;
    w.header("SCNE");
    write_grid_body(w, scene.gt);
    w.u64(scene.seed);
    for (int a = 0; a < 3; ++a) w.f32(scene.lidar_origin[a]);
    w.u64(scene.points.size());
    for (const LidarPoint& p : scene.points) {
        w.f32(p.x);
        w.f32(p.y);
        w.f32(p.z);
        w.f32(p.intensity);
    }
    write_camera_body(w, scene.camera);
    write_file_bytes(path, w.buf);
}

SyntheticScene load_scene(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    ByteReader r(bytes, "scene '" + path + "'");
    r.header("SCNE");
    SyntheticScene scene;
    scene.gt = read_grid_body(r);
    scene.seed = r.u64();
    for (int a = 0; a < 3; ++a) scene.lidar_origin[a] = r.f32();
    const std::uint64_t count = r.u64();
    scene.points.resize(count);
    for (LidarPoint& p : scene.points) {
        p.x = r.f32();
        p.y = r.f32();
        p.z = r.f32();
        p.intensity = r.f32();
    }
    scene.camera = read_camera_body(r);
    r.done();
    return scene;
}

// ---------------------------------------------------------------------------
// Run configuration.
// ---------------------------------------------------------------------------

RunConfig default_run_config() {
    RunConfig c;
    c.scene.shapes = {
        {ShapeKind::ground, 1, {0, 0, real(-1.25)}, {0, 0, 0}},
        {ShapeKind::box, 2, {-3, -2, 0}, {real(1.5), real(1.2), 1}},
        {ShapeKind::box, 2, {4, real(3.5), real(-0.25)}, {1, 2, real(0.75)}},
        {ShapeKind::cylinder, 3, {2, -3, real(0.25)}, {real(1.2), 0, real(1.25)}},
        {ShapeKind::cylinder, 3, {-4, 4, 0}, {real(0.9), 0, 1}},
    };
    return c;
}

std::string config_to_text(const RunConfig& c) {
    const ModelConfig& m = c.model;
    const SceneParams& s = c.scene;
    std::string out = "# occupancy run configuration\n";
    auto kv = [&out](const char* key, const std::string& value) {
        out += key;
        out += " = ";
        out += value;
        out += "\n";
    };

    out += "\n[grid]\n";
    kv("origin_x", fmt_real(m.grid.origin[0]));
    kv("origin_y", fmt_real(m.grid.origin[1]));
    kv("origin_z", fmt_real(m.grid.origin[2]));
    kv("voxel_size", fmt_real(m.grid.voxel_size));
    kv("extent_x", fmt_size(m.grid.extents[0]));
    kv("extent_y", fmt_size(m.grid.extents[1]));
    kv("extent_z", fmt_size(m.grid.extents[2]));
    kv("num_classes", fmt_size(m.grid.num_classes));

    out += "\n[model]\n";
    kv("num_gaussians", fmt_size(m.num_gaussians));
    kv("feat_dim", fmt_size(m.feat_dim));
    kv("cutoff_k", fmt_real(m.cutoff_k));

    out += "\n[ldfa]\n";
    kv("keypoints", fmt_size(m.ldfa_keypoints));
    kv("chunks", fmt_size(m.ldfa_chunks));
    kv("depth_planes", fmt_size(m.depth_planes));
    kv("use_ldfa", fmt_bool(m.use_ldfa));

    out += "\n[camera_lift]\n";
    kv("keypoints", fmt_size(m.camera_keypoints));
    kv("use_camera", fmt_bool(m.use_camera));

    out += "\n[ebfs]\n";
    kv("tau", fmt_real(m.ebfs.tau));
    kv("xi", fmt_real(m.ebfs.xi));
    kv("p_sel", fmt_real(m.ebfs.p_sel));
    kv("epsilon_init", fmt_real(m.ebfs_epsilon_init));
    kv("use_ebfs", fmt_bool(m.use_ebfs));

    out += "\n[fusion]\n";
    kv("mode", fusion_name(m.fusion));

    out += "\n[head]\n";
    kv("blocks", fmt_size(m.head_blocks));
    kv("state_dim", fmt_size(m.head_state_dim));
    kv("pe_bands", fmt_size(m.head_pe_bands));
    kv("curve_bits", fmt_size(m.curve_bits));
    kv("use_head", fmt_bool(m.use_head));

    out += "\n[loss]\n";
    kv("lambda_ce", fmt_real(m.loss.lambda_ce));
    kv("lambda_lov", fmt_real(m.loss.lambda_lov));

    out += "\n[optim]\n";
    kv("lr", fmt_real(m.lr));
    kv("lr_min", fmt_real(m.lr_min));
    kv("weight_decay", fmt_real(m.weight_decay));
    kv("beta1", fmt_real(m.beta1));
    kv("beta2", fmt_real(m.beta2));
    kv("adam_eps", fmt_real(m.adam_eps));
    kv("total_steps", fmt_size(m.total_steps));

    out += "\n[run]\n";
    kv("seed", fmt_u64(m.seed));
    kv("deterministic", fmt_bool(m.deterministic));

    out += "\n[scene]\n";
    kv("points_per_shape", fmt_size(s.points_per_shape));
    kv("point_noise", fmt_real(s.point_noise));
    kv("lidar_x", fmt_real(s.lidar_origin[0]));
    kv("lidar_y", fmt_real(s.lidar_origin[1]));
    kv("lidar_z", fmt_real(s.lidar_origin[2]));
    kv("image_height", fmt_size(s.image_height));
    kv("image_width", fmt_size(s.image_width));
    kv("camera_x", fmt_real(s.camera_pos[0]));
    kv("camera_y", fmt_real(s.camera_pos[1]));
    kv("camera_z", fmt_real(s.camera_pos[2]));
    kv("look_x", fmt_real(s.camera_look[0]));
    kv("look_y", fmt_real(s.camera_look[1]));
    kv("look_z", fmt_real(s.camera_look[2]));
    kv("fov_deg", fmt_real(s.camera_fov_deg));
    kv("shape_count", fmt_size(s.shapes.size()));
    for (std::size_t i = 0; i < s.shapes.size(); ++i)
        kv(("shape_" + fmt_size(i)).c_str(), shape_value(s.shapes[i]));
    return out;
}

RunConfig config_from_text(const std::string& text) {
    RunConfig c;
    ModelConfig& m = c.model;
    SceneParams& s = c.scene;

    using Setter = std::function<void(const std::string&, const std::string&)>;
    const std::map<std::string, Setter> fields = {
        {"grid.origin_x", [&](const std::string& v, const std::string& k) { m.grid.origin[0] = parse_real(v, k); }},
        {"grid.origin_y", [&](const std::string& v, const std::string& k) { m.grid.origin[1] = parse_real(v, k); }},
        {"grid.origin_z", [&](const std::string& v, const std::string& k) { m.grid.origin[2] = parse_real(v, k); }},
        {"grid.voxel_size", [&](const std::string& v, const std::string& k) { m.grid.voxel_size = parse_real(v, k); }},
        {"grid.extent_x", [&](const std::string& v, const std::string& k) { m.grid.extents[0] = parse_size(v, k); }},
        {"grid.extent_y", [&](const std::string& v, const std::string& k) { m.grid.extents[1] = parse_size(v, k); }},
        {"grid.extent_z", [&](const std::string& v, const std::string& k) { m.grid.extents[2] = parse_size(v, k); }},
        {"grid.num_classes", [&](const std::string& v, const std::string& k) { m.grid.num_classes = parse_size(v, k); }},
        {"model.num_gaussians", [&](const std::string& v, const std::string& k) { m.num_gaussians = parse_size(v, k); }},
        {"model.feat_dim", [&](const std::string& v, const std::string& k) { m.feat_dim = parse_size(v, k); }},
        {"model.cutoff_k", [&](const std::string& v, const std::string& k) { m.cutoff_k = parse_real(v, k); }},
        {"ldfa.keypoints", [&](const std::string& v, const std::string& k) { m.ldfa_keypoints = parse_size(v, k); }},
        {"ldfa.chunks", [&](const std::string& v, const std::string& k) { m.ldfa_chunks = parse_size(v, k); }},
        {"ldfa.depth_planes", [&](const std::string& v, const std::string& k) { m.depth_planes = parse_size(v, k); }},
        {"ldfa.use_ldfa", [&](const std::string& v, const std::string& k) { m.use_ldfa = parse_bool(v, k); }},
        {"camera_lift.keypoints", [&](const std::string& v, const std::string& k) { m.camera_keypoints = parse_size(v, k); }},
        {"camera_lift.use_camera", [&](const std::string& v, const std::string& k) { m.use_camera = parse_bool(v, k); }},
        {"ebfs.tau", [&](const std::string& v, const std::string& k) { m.ebfs.tau = parse_real(v, k); }},
        {"ebfs.xi", [&](const std::string& v, const std::string& k) { m.ebfs.xi = parse_real(v, k); }},
        {"ebfs.p_sel", [&](const std::string& v, const std::string& k) { m.ebfs.p_sel = parse_real(v, k); }},
        {"ebfs.epsilon_init", [&](const std::string& v, const std::string& k) { m.ebfs_epsilon_init = parse_real(v, k); }},
        {"ebfs.use_ebfs", [&](const std::string& v, const std::string& k) { m.use_ebfs = parse_bool(v, k); }},
        {"fusion.mode", [&](const std::string& v, const std::string&) { m.fusion = parse_fusion(v); }},
        {"head.blocks", [&](const std::string& v, const std::string& k) { m.head_blocks = parse_size(v, k); }},
        {"head.state_dim", [&](const std::string& v, const std::string& k) { m.head_state_dim = parse_size(v, k); }},
        {"head.pe_bands", [&](const std::string& v, const std::string& k) { m.head_pe_bands = parse_size(v, k); }},
        {"head.curve_bits", [&](const std::string& v, const std::string& k) { m.curve_bits = unsigned(parse_size(v, k)); }},
        {"head.use_head", [&](const std::string& v, const std::string& k) { m.use_head = parse_bool(v, k); }},
        {"loss.lambda_ce", [&](const std::string& v, const std::string& k) { m.loss.lambda_ce = parse_real(v, k); }},
        {"loss.lambda_lov", [&](const std::string& v, const std::string& k) { m.loss.lambda_lov = parse_real(v, k); }},
        {"optim.lr", [&](const std::string& v, const std::string& k) { m.lr = parse_real(v, k); }},
        {"optim.lr_min", [&](const std::string& v, const std::string& k) { m.lr_min = parse_real(v, k); }},
        {"optim.weight_decay", [&](const std::string& v, const std::string& k) { m.weight_decay = parse_real(v, k); }},
        {"optim.beta1", [&](const std::string& v, const std::string& k) { m.beta1 = parse_real(v, k); }},
        {"optim.beta2", [&](const std::string& v, const std::string& k) { m.beta2 = parse_real(v, k); }},
        {"optim.adam_eps", [&](const std::string& v, const std::string& k) { m.adam_eps = parse_real(v, k); }},
        {"optim.total_steps", [&](const std::string& v, const std::string& k) { m.total_steps = parse_size(v, k); }},
        {"run.seed", [&](const std::string& v, const std::string& k) { m.seed = parse_u64(v, k); }},
        {"run.deterministic", [&](const std::string& v, const std::string& k) { m.deterministic = parse_bool(v, k); }},
        {"scene.points_per_shape", [&](const std::string& v, const std::string& k) { s.points_per_shape = parse_size(v, k); }},
        {"scene.point_noise", [&](const std::string& v, const std::string& k) { s.point_noise = parse_real(v, k); }},
        {"scene.lidar_x", [&](const std::string& v, const std::string& k) { s.lidar_origin[0] = parse_real(v, k); }},
        {"scene.lidar_y", [&](const std::string& v, const std::string& k) { s.lidar_origin[1] = parse_real(v, k); }},
        {"scene.lidar_z", [&](const std::string& v, const std::string& k) { s.lidar_origin[2] = parse_real(v, k); }},
        {"scene.image_height", [&](const std::string& v, const std::string& k) { s.image_height = parse_size(v, k); }},
        {"scene.image_width", [&](const std::string& v, const std::string& k) { s.image_width = parse_size(v, k); }},
        {"scene.camera_x", [&](const std::string& v, const std::string& k) { s.camera_pos[0] = parse_real(v, k); }},
        {"scene.camera_y", [&](const std::string& v, const std::string& k) { s.camera_pos[1] = parse_real(v, k); }},
        {"scene.camera_z", [&](const std::string& v, const std::string& k) { s.camera_pos[2] = parse_real(v, k); }},
        {"scene.look_x", [&](const std::string& v, const std::string& k) { s.camera_look[0] = parse_real(v, k); }},
        {"scene.look_y", [&](const std::string& v, const std::string& k) { s.camera_look[1] = parse_real(v, k); }},
        {"scene.look_z", [&](const std::string& v, const std::string& k) { s.camera_look[2] = parse_real(v, k); }},
        {"scene.fov_deg", [&](const std::string& v, const std::string& k) { s.camera_fov_deg = parse_real(v, k); }},
    };

    std::set<std::string> seen;
    std::size_t shape_count = 0;
    bool have_shape_count = false;
    std::map<std::size_t, ShapeSpec> shapes;

    std::istringstream in(text);
    std::string line, section;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            require(line.back() == ']', "config: malformed section header " + line);
            section = line.substr(1, line.size() - 2);
            continue;
        }
        const auto eq = line.find('=');
        require(eq != std::string::npos, "config: expected key = value, got " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        require(!section.empty(), "config: key before any section: " + key);
        const std::string full = section + "." + key;
        require(seen.insert(full).second, "config: duplicate key " + full);

        if (section == "scene" && key == "shape_count") {
            shape_count = parse_size(value, full);
            have_shape_count = true;
            continue;
        }
        if (section == "scene" && key.rfind("shape_", 0) == 0) {
            const std::size_t idx = parse_size(key.substr(6), full);
            shapes[idx] = parse_shape(value, full);
            continue;
        }
        const auto it = fields.find(full);
        require(it != fields.end(), "config: unknown key " + full);
        it->second(value, full);
    }

    for (const auto& [name, setter] : fields) {
        (void)setter;
        require(seen.count(name) == 1, "config: missing key " + name);
    }
    require(have_shape_count, "config: missing key scene.shape_count");
    require(shapes.size() == shape_count,
            "config: shape_count disagrees with the shape_<i> entries");
    s.shapes.resize(shape_count);
    for (const auto& [idx, shape] : shapes) {
        require(idx < shape_count, "config: shape index out of range");
        s.shapes[idx] = shape;
    }
    return c;
}

void save_config(const std::string& path, const RunConfig& config) {
    write_file_bytes(path, config_to_text(config));
}

RunConfig load_config(const std::string& path) {
    return config_from_text(read_file_bytes(path));
}

std::string config_hash(const RunConfig& config) {
    const std::uint64_t h = Rng::fnv1a(config_to_text(config));
    char tmp[17];
    std::snprintf(tmp, sizeof(tmp), "%016" PRIx64, h);
    return tmp;
}

// ---------------------------------------------------------------------------
// Metric record.
// ---------------------------------------------------------------------------

std::string metric_record_to_json(const MetricRecord& record) {
    nlohmann::json j;
    j["config_hash"] = record.config_hash;
    j["iou"] = nlohmann::json::array();
    for (const real v : record.iou) j["iou"].push_back(double(v));  // NaN -> null
    j["miou"] = double(record.miou);
    j["steps"] = record.steps;
    j["wall_time"] = double(record.wall_time);
    return j.dump(2) + "\n";
}

MetricRecord metric_record_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(std::string("metric record: ") + e.what());
    }
    require(j.contains("config_hash") && j.contains("iou") && j.contains("miou") &&
                j.contains("steps") && j.contains("wall_time"),
            "metric record: missing fields");
    MetricRecord r;
    r.config_hash = j["config_hash"].get<std::string>();
    for (const auto& v : j["iou"])
        r.iou.push_back(v.is_null() ? std::numeric_limits<real>::quiet_NaN()
                                    : real(v.get<double>()));
    r.miou = real(j["miou"].get<double>());
    r.steps = j["steps"].get<std::size_t>();
    r.wall_time = real(j["wall_time"].get<double>());
    return r;
}

void save_metric_record(const std::string& path, const MetricRecord& record) {
    write_file_bytes(path, metric_record_to_json(record));
}

MetricRecord load_metric_record(const std::string& path) {
    return metric_record_from_json(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Text export.
// ---------------------------------------------------------------------------

std::string grid_to_point_text(const VoxelGrid& grid) {
    const GridSpec& g = grid.spec;
    const std::vector<std::uint16_t> labels =
        grid.labels.size() == g.voxel_count() ? grid.labels : argmax_labels(grid);
    std::string out;
    char tmp[128];
    for (std::size_t ix = 0; ix < g.extents[0]; ++ix)
        for (std::size_t iy = 0; iy < g.extents[1]; ++iy)
            for (std::size_t iz = 0; iz < g.extents[2]; ++iz) {
                const auto c = g.center(ix, iy, iz);
                std::snprintf(tmp, sizeof(tmp), "%.9g %.9g %.9g %u\n", double(c[0]),
                              double(c[1]), double(c[2]),
                              unsigned(labels[g.flat_index(ix, iy, iz)]));
                out += tmp;
            }
    return out;
}

void export_grid_text(const std::string& path, const VoxelGrid& grid) {
    write_file_bytes(path, grid_to_point_text(grid));
}

}  // namespace splatocc
