#include "splatocc/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

namespace splatocc {
namespace {

constexpr real kPi = real(3.141592653589793238462643383279502884L);
constexpr int kSampleAttempts = 64;

// All persisted scene quantities are rounded through f32 so the in-memory
// scene and its serialized form carry identical values.
real f32r(real v) { return real(float(v)); }

std::array<real, 3> world_lo(const GridSpec& g) { return g.origin; }

std::array<real, 3> world_hi(const GridSpec& g) {
    return {g.origin[0] + real(g.extents[0]) * g.voxel_size,
            g.origin[1] + real(g.extents[1]) * g.voxel_size,
            g.origin[2] + real(g.extents[2]) * g.voxel_size};
}

// Voxel index of a position, or false when outside the grid.
bool locate_voxel(const GridSpec& g, real x, real y, real z,
                  std::array<std::size_t, 3>& out) {
    const real p[3] = {x, y, z};
    for (int a = 0; a < 3; ++a) {
        const real t = (p[a] - g.origin[a]) / g.voxel_size;
        if (t < 0) return false;
        const auto i = std::size_t(t);
        if (i >= g.extents[a]) return false;
        out[a] = i;
    }
    return true;
}

struct Basis {
    std::array<real, 3> x, y, z;  // camera axes expressed in world coordinates
};

std::array<real, 3> sub(const std::array<real, 3>& a, const std::array<real, 3>& b) {
    return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

std::array<real, 3> cross(const std::array<real, 3>& a, const std::array<real, 3>& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0]};
}

real norm(const std::array<real, 3>& a) {
    return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
}

std::array<real, 3> normalized(const std::array<real, 3>& a, const std::string& what) {
    const real n = norm(a);
    require(n > real(1e-9), "scene: degenerate direction in " + what);
    return {a[0] / n, a[1] / n, a[2] / n};
}

Basis camera_basis(const std::array<real, 3>& pos, const std::array<real, 3>& look) {
    Basis b;
    b.z = normalized(sub(look, pos), "camera viewing direction");
    b.x = normalized(cross(b.z, {0, 0, 1}), "camera right axis (view is vertical)");
    b.y = cross(b.z, b.x);
    return b;
}

// First non-empty voxel hit by the ray o + t*d, t in (0, inf); 0 if none.
std::uint16_t march_ray(const VoxelGrid& gt, const std::array<real, 3>& o,
                        const std::array<real, 3>& d) {
    const GridSpec& g = gt.spec;
    const auto lo = world_lo(g), hi = world_hi(g);
    constexpr real kInf = std::numeric_limits<real>::infinity();

    real t_min = 0, t_max = kInf;
    for (int a = 0; a < 3; ++a) {
        if (d[a] == 0) {
            if (o[a] < lo[a] || o[a] >= hi[a]) return 0;
            continue;
        }
        real t0 = (lo[a] - o[a]) / d[a], t1 = (hi[a] - o[a]) / d[a];
        if (t0 > t1) std::swap(t0, t1);
        t_min = std::max(t_min, t0);
        t_max = std::min(t_max, t1);
    }
    if (t_max <= t_min) return 0;

    // Enter slightly inside the grid, then walk cell by cell.
    const real t_enter = t_min + std::max(t_min, real(1)) * real(1e-9);
    std::ptrdiff_t cell[3];
    std::ptrdiff_t step[3];
    real t_next[3], t_delta[3];
    for (int a = 0; a < 3; ++a) {
        const real p = o[a] + t_enter * d[a];
        auto c = std::ptrdiff_t(std::floor((p - lo[a]) / g.voxel_size));
        cell[a] = std::clamp(c, std::ptrdiff_t(0), std::ptrdiff_t(g.extents[a]) - 1);
        if (d[a] > 0) {
            step[a] = 1;
            t_delta[a] = g.voxel_size / d[a];
            t_next[a] = (lo[a] + real(cell[a] + 1) * g.voxel_size - o[a]) / d[a];
        } else if (d[a] < 0) {
            step[a] = -1;
            t_delta[a] = -g.voxel_size / d[a];
            t_next[a] = (lo[a] + real(cell[a]) * g.voxel_size - o[a]) / d[a];
        } else {
            step[a] = 0;
            t_delta[a] = kInf;
            t_next[a] = kInf;
        }
    }

    while (true) {
        const std::uint16_t label =
            gt.labels[g.flat_index(std::size_t(cell[0]), std::size_t(cell[1]),
                                   std::size_t(cell[2]))];
        if (label != 0) return label;
        const int a = (t_next[0] <= t_next[1] && t_next[0] <= t_next[2]) ? 0
                      : (t_next[1] <= t_next[2])                         ? 1
                                                                         : 2;
        if (t_next[a] > t_max) return 0;
        cell[a] += step[a];
        if (cell[a] < 0 || cell[a] >= std::ptrdiff_t(g.extents[a])) return 0;
        t_next[a] += t_delta[a];
    }
}

// Top face height of the rasterized ground layer, or nullopt-like flag via
// the bool: the topmost voxel layer whose centers sit at or below z0.
bool ground_surface_height(const GridSpec& g, real z0, real& z_surf) {
    const real t = (z0 - g.origin[2]) / g.voxel_size - real(0.5);
    if (t < 0) return false;  // even the lowest layer of centers is above z0
    const auto iz = std::min(std::size_t(t), g.extents[2] - 1);
    z_surf = g.origin[2] + real(iz + 1) * g.voxel_size;
    return true;
}

// One uniform draw on the surface of `shape`.
std::array<real, 3> sample_surface(const ShapeSpec& shape, const GridSpec& g,
                                   Rng& rng) {
    const auto lo = world_lo(g), hi = world_hi(g);
    switch (shape.kind) {
        case ShapeKind::ground: {
            real z_surf = shape.center[2];
            ground_surface_height(g, shape.center[2], z_surf);
            return {rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), z_surf};
        }
        case ShapeKind::box: {
            const auto& c = shape.center;
            const auto& h = shape.half;
            const real area_x = h[1] * h[2], area_y = h[0] * h[2], area_z = h[0] * h[1];
            const real total = 2 * (area_x + area_y + area_z);
            require(total > 0, "scene: box has no surface area");
            real pick = rng.uniform(real(0), total);
            int axis = 0;
            for (const real area : {area_x, area_x, area_y, area_y, area_z, area_z}) {
                if (pick < area) break;
                pick -= area;
                ++axis;
            }
            const int face_axis = std::min(axis / 2, 2);
            const real side = (axis % 2) ? real(1) : real(-1);
            std::array<real, 3> p;
            for (int a = 0; a < 3; ++a)
                p[a] = (a == face_axis) ? c[a] + side * h[a]
                                        : rng.uniform(c[a] - h[a], c[a] + h[a]);
            return p;
        }
        case ShapeKind::cylinder: {
            const auto& c = shape.center;
            const real r = shape.half[0], hh = shape.half[2];
            const real side_area = 2 * kPi * r * (2 * hh);
            const real cap_area = kPi * r * r;
            const real total = side_area + 2 * cap_area;
            require(total > 0, "scene: cylinder has no surface area");
            const real pick = rng.uniform(real(0), total);
            const real theta = rng.uniform(real(0), 2 * kPi);
            if (pick < side_area) {
                const real z = rng.uniform(c[2] - hh, c[2] + hh);
                return {c[0] + r * std::cos(theta), c[1] + r * std::sin(theta), z};
            }
            const real rad = r * std::sqrt(rng.uniform(real(0), real(1)));
            const real z = (pick < side_area + cap_area) ? c[2] - hh : c[2] + hh;
            return {c[0] + rad * std::cos(theta), c[1] + rad * std::sin(theta), z};
        }
    }
    throw validation_error("scene: unknown shape kind");
}

void validate_scene(const GridSpec& grid, const SceneParams& p) {
    require(grid.num_classes >= 2, "scene: need at least two classes");
    require(grid.voxel_count() > 0, "scene: empty grid extents");
    require(grid.voxel_size > 0, "scene: voxel size must be positive");
    const auto lo = world_lo(grid), hi = world_hi(grid);
    for (const ShapeSpec& s : p.shapes) {
        require(s.label >= 1 && s.label < grid.num_classes,
                "scene: shape label out of class range");
        if (s.kind == ShapeKind::ground) {
            require(s.center[2] <= hi[2], "scene: ground surface above the grid");
            continue;
        }
        std::array<real, 3> half = s.half;
        if (s.kind == ShapeKind::cylinder) half = {s.half[0], s.half[0], s.half[2]};
        for (int a = 0; a < 3; ++a) {
            require(half[a] > 0, "scene: shape extent must be positive");
            require(s.center[a] - half[a] >= lo[a] - real(1e-9) &&
                        s.center[a] + half[a] <= hi[a] + real(1e-9),
                    "scene: shape leaves the grid bounds");
        }
    }
    require(p.image_height >= 1 && p.image_width >= 1, "scene: empty camera image");
    require(p.camera_fov_deg > 0 && p.camera_fov_deg < 180,
            "scene: field of view must lie in (0, 180) degrees");
}

}  // namespace

bool shape_contains(const ShapeSpec& shape, real x, real y, real z) {
    switch (shape.kind) {
        case ShapeKind::ground:
            return z <= shape.center[2];
        case ShapeKind::box:
            return std::abs(x - shape.center[0]) <= shape.half[0] &&
                   std::abs(y - shape.center[1]) <= shape.half[1] &&
                   std::abs(z - shape.center[2]) <= shape.half[2];
        case ShapeKind::cylinder: {
            const real dx = x - shape.center[0], dy = y - shape.center[1];
            return dx * dx + dy * dy <= shape.half[0] * shape.half[0] &&
                   std::abs(z - shape.center[2]) <= shape.half[2];
        }
    }
    return false;
}

VoxelGrid rasterize_shapes(const GridSpec& grid, const std::vector<ShapeSpec>& shapes) {
    VoxelGrid out;
    out.spec = grid;
    out.labels.assign(grid.voxel_count(), 0);

    // Later shapes overwrite earlier ones, so paint in order over each
    // shape's voxel-space bounding box.
    for (const ShapeSpec& s : shapes) {
        std::array<std::size_t, 3> b_lo{0, 0, 0};
        std::array<std::size_t, 3> b_hi = grid.extents;  // exclusive
        if (s.kind != ShapeKind::ground) {
            std::array<real, 3> half = s.half;
            if (s.kind == ShapeKind::cylinder) half = {s.half[0], s.half[0], s.half[2]};
            for (int a = 0; a < 3; ++a) {
                const real lo_t = (s.center[a] - half[a] - grid.origin[a]) / grid.voxel_size;
                const real hi_t = (s.center[a] + half[a] - grid.origin[a]) / grid.voxel_size;
                b_lo[a] = std::size_t(std::max(real(0), std::floor(lo_t)));
                b_hi[a] = std::min(grid.extents[a], std::size_t(std::max(real(0), std::ceil(hi_t) + 1)));
            }
        } else {
            real z_surf = 0;
            if (!ground_surface_height(grid, s.center[2], z_surf)) continue;
            b_hi[2] = std::size_t((z_surf - grid.origin[2]) / grid.voxel_size + real(0.5));
        }
        for (std::size_t ix = b_lo[0]; ix < b_hi[0]; ++ix)
            for (std::size_t iy = b_lo[1]; iy < b_hi[1]; ++iy)
                for (std::size_t iz = b_lo[2]; iz < b_hi[2]; ++iz) {
                    const auto c = grid.center(ix, iy, iz);
                    if (shape_contains(s, c[0], c[1], c[2]))
                        out.labels[grid.flat_index(ix, iy, iz)] = s.label;
                }
    }

    // One-hot logits so the argmax-consistency invariant holds on save.
    out.logits = Tensor({grid.extents[0], grid.extents[1], grid.extents[2],
                         grid.num_classes});
    for (std::size_t ix = 0; ix < grid.extents[0]; ++ix)
        for (std::size_t iy = 0; iy < grid.extents[1]; ++iy)
            for (std::size_t iz = 0; iz < grid.extents[2]; ++iz)
                out.logits.at(ix, iy, iz,
                              out.labels[grid.flat_index(ix, iy, iz)]) = 1;
    return out;
}

real class_intensity(std::uint16_t label, std::size_t num_classes) {
    require(num_classes >= 1, "scene: intensity needs a class count");
    return real(0.2) + real(0.6) * real(label) / real(num_classes);
}

SyntheticScene generate_scene(const GridSpec& grid, const SceneParams& params,
                              std::uint64_t seed) {
    validate_scene(grid, params);

    SyntheticScene scene;
    scene.seed = seed;
    scene.gt = rasterize_shapes(grid, params.shapes);
    for (int a = 0; a < 3; ++a)
        scene.lidar_origin[a] = f32r(params.lidar_origin[a]);

    Rng rng(seed);
    scene.points.reserve(params.shapes.size() * params.points_per_shape);
    for (const ShapeSpec& s : params.shapes) {
        for (std::size_t n = 0; n < params.points_per_shape; ++n) {
            for (int attempt = 0; attempt < kSampleAttempts; ++attempt) {
                auto p = sample_surface(s, grid, rng);
                for (int a = 0; a < 3; ++a)
                    p[a] = f32r(p[a] + params.point_noise * rng.normal());
                const real intensity = f32r(std::clamp(
                    class_intensity(s.label, grid.num_classes) +
                        real(0.02) * rng.normal(),
                    real(0), real(1)));
                std::array<std::size_t, 3> v;
                if (!locate_voxel(grid, p[0], p[1], p[2], v)) continue;
                if (scene.gt.labels[grid.flat_index(v[0], v[1], v[2])] == 0) continue;
                scene.points.push_back({p[0], p[1], p[2], intensity});
                break;
            }
        }
    }

    // Camera: one feature channel per class, pixel = class of the first
    // occupied voxel along its ray.
    const Basis basis = camera_basis(params.camera_pos, params.camera_look);
    CameraFeatureMap& cam = scene.camera;
    const std::size_t h = params.image_height, w = params.image_width;
    cam.values = Tensor({grid.num_classes, 1, h, w});
    const real half_fov = params.camera_fov_deg * kPi / 360;
    cam.fx = f32r(real(w) / (2 * std::tan(half_fov)));
    cam.fy = cam.fx;
    cam.cx = f32r((real(w) - 1) / 2);
    cam.cy = f32r((real(h) - 1) / 2);
    for (int a = 0; a < 3; ++a) {
        cam.rot[0 + a] = f32r(basis.x[a]);
        cam.rot[3 + a] = f32r(basis.y[a]);
        cam.rot[6 + a] = f32r(basis.z[a]);
    }
    for (int r = 0; r < 3; ++r) {
        real t = 0;
        for (int a = 0; a < 3; ++a) t -= cam.rot[3 * r + a] * params.camera_pos[a];
        cam.trans[r] = f32r(t);
    }
    cam.z_near = f32r(real(1e-3));
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const real dx = (real(j) - cam.cx) / cam.fx;
            const real dy = (real(i) - cam.cy) / cam.fy;
            std::array<real, 3> dir;
            for (int a = 0; a < 3; ++a)
                dir[a] = dx * basis.x[a] + dy * basis.y[a] + basis.z[a];
            const std::uint16_t hit = march_ray(scene.gt, params.camera_pos, dir);
            if (hit != 0) cam.values.at(hit, 0, i, j) = 1;
        }
    }
    return scene;
}

SyntheticScene degrade(const SyntheticScene& scene, DegradeMode mode,
                       real severity, std::uint64_t seed,
                       const DegradeConfig& cfg) {
    require(severity >= 0 && severity <= 1, "degrade: severity must lie in [0, 1]");
    SyntheticScene out = scene;
    Rng rng(seed);

    if (mode == DegradeMode::rain) {
        out.points.clear();
        const real keep_prob = 1 - severity * cfg.rain_drop_max;
        for (const LidarPoint& p : scene.points) {
            if (!rng.bernoulli(keep_prob)) continue;
            const real jitter = severity * cfg.rain_range_sigma * rng.normal();
            std::array<real, 3> dir = {p.x - scene.lidar_origin[0],
                                       p.y - scene.lidar_origin[1],
                                       p.z - scene.lidar_origin[2]};
            const real range = norm(dir);
            LidarPoint moved = p;
            if (range > real(1e-9)) {
                moved.x = f32r(p.x + jitter * dir[0] / range);
                moved.y = f32r(p.y + jitter * dir[1] / range);
                moved.z = f32r(p.z + jitter * dir[2] / range);
            }
            // A jitter that exits occupied space keeps the original return,
            // so every surviving point still lies in a non-empty gt voxel.
            std::array<std::size_t, 3> v;
            const bool ok =
                locate_voxel(scene.gt.spec, moved.x, moved.y, moved.z, v) &&
                scene.gt.labels[scene.gt.spec.flat_index(v[0], v[1], v[2])] != 0;
            out.points.push_back(ok ? moved : p);
        }
        return out;
    }

    // night: amplitude decays from 1 toward a floor chosen so that even the
    // worst-case noise draw keeps energy(out) <= night_energy_floor * energy(in)
    // at severity 1: |amp * (1 + noise_half)| == sqrt(night_energy_floor).
    const real amp_floor =
        std::sqrt(cfg.night_energy_floor) / (1 + cfg.night_noise_half);
    const real amp = (1 - severity) + severity * amp_floor;
    Tensor& v = out.camera.values;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const real u = rng.uniform(real(-1), real(1));
        v[i] = f32r(v[i] * amp * (1 + severity * cfg.night_noise_half * u));
    }
    return out;
}

real camera_energy(const CameraFeatureMap& cam) {
    real e = 0;
    for (std::size_t i = 0; i < cam.values.size(); ++i) e += cam.values[i] * cam.values[i];
    return e;
}

}  // namespace splatocc
