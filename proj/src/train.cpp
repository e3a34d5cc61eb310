#include "splatocc/train.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include <json.hpp>

#include "splatocc/losses.hpp"

namespace splatocc {

TrainState make_train_state(const ModelConfig& cfg) {
    Rng root(cfg.seed);
    Rng init = root.fork("init");
    TrainState state;
    state.params = make_model_params(cfg, init);
    const std::size_t total = parameter_count(state.params);
    state.m.assign(total, 0.0);
    state.v.assign(total, 0.0);
    state.step = 0;
    state.rng = root.fork("train");
    return state;
}

real cosine_lr(const ModelConfig& cfg, std::uint64_t step) {
    const std::uint64_t total = std::max<std::uint64_t>(cfg.total_steps, 1);
    const double frac = double(std::min(step, total)) / double(total);
    const double half = 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
    return real(double(cfg.lr_min) + (double(cfg.lr) - double(cfg.lr_min)) * half);
}

void adamw_step(TrainState& state, const ModelConfig& cfg) {
    auto regs = parameter_registry(state.params);
    std::size_t total = 0;
    for (const auto& r : regs) total += r.count;
    require(state.m.size() == total && state.v.size() == total,
            "adamw: moment buffers do not match the parameter count");

    const double lr = double(cosine_lr(cfg, state.step));
    const double b1 = double(cfg.beta1), b2 = double(cfg.beta2);
    const double eps = double(cfg.adam_eps), wd = double(cfg.weight_decay);
    const double t = double(state.step) + 1.0;
    const double bc1 = 1.0 - std::pow(b1, t);
    const double bc2 = 1.0 - std::pow(b2, t);

    std::size_t off = 0;
    for (auto& r : regs) {
        for (std::size_t i = 0; i < r.count; ++i) {
            const double g = double(r.grad[i]);
            double& m = state.m[off + i];
            double& v = state.v[off + i];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            const double update = (m / bc1) / (std::sqrt(v / bc2) + eps);
            r.value[i] = real(double(r.value[i]) - lr * (update + wd * double(r.value[i])));
        }
        off += r.count;
    }

    // Keep the stored rotations unit quaternions; a degenerate row resets to
    // the identity.
    Tensor& q = state.params.initial.rotations;
    for (std::size_t i = 0; i < q.dim(0); ++i) {
        real n2 = 0;
        for (std::size_t a = 0; a < 4; ++a) n2 += q.at(i, a) * q.at(i, a);
        const real nrm = std::sqrt(n2);
        if (nrm > real(1e-12)) {
            for (std::size_t a = 0; a < 4; ++a) q.at(i, a) /= nrm;
        } else {
            q.at(i, 0) = 1;
            q.at(i, 1) = q.at(i, 2) = q.at(i, 3) = 0;
        }
    }

    ++state.step;
}

real train_step(TrainState& state, const ModelConfig& cfg, const SyntheticScene& scene) {
    const std::string at_step = " at step " + std::to_string(state.step);
    state.params.zero_grad();

    PipelineCache cache;
    VoxelGrid pred = model_forward(state.params, cfg, scene, /*train=*/true, state.rng, &cache);
    check_finite(pred.logits, "prediction logits" + at_step);

    const real loss = total_loss(pred.logits, scene.gt.labels, cfg.loss);
    require_finite(loss, "training loss" + at_step);

    Tensor g_logits(pred.logits.shape());
    total_loss_backward(pred.logits, scene.gt.labels, cfg.loss, real(1), g_logits);
    model_backward(state.params, cfg, scene, cache, g_logits);

    for (const auto& r : parameter_registry(state.params))
        for (std::size_t i = 0; i < r.count; ++i)
            if (!std::isfinite(r.grad[i]))
                throw numeric_error("non-finite gradient in " + r.name + at_step);

    adamw_step(state, cfg);
    return loss;
}

VoxelGrid predict(const ModelParams& params, const ModelConfig& cfg,
                  const SyntheticScene& scene) {
    Rng scratch(0);  // eval mode draws nothing
    return model_forward(params, cfg, scene, /*train=*/false, scratch);
}

real occupancy_iou(const std::vector<std::uint16_t>& pred,
                   const std::vector<std::uint16_t>& gt) {
    require(pred.size() == gt.size(), "occupancy_iou: size mismatch");
    std::vector<std::uint16_t> bp(pred.size()), bg(gt.size());
    for (std::size_t i = 0; i < pred.size(); ++i) bp[i] = pred[i] ? 1 : 0;
    for (std::size_t i = 0; i < gt.size(); ++i) bg[i] = gt[i] ? 1 : 0;
    return iou_per_class(bp, bg, 1);
}

MetricRecord evaluate_run(const RunConfig& run, const VoxelGrid& pred,
                          const SyntheticScene& scene, std::uint64_t steps,
                          real wall_seconds) {
    MetricRecord rec;
    rec.config_hash = config_hash(run);
    const MetricReport report =
        evaluate_occupancy(pred.labels, scene.gt.labels, run.model.grid.num_classes);
    rec.iou = report.iou;
    rec.miou = report.miou;
    rec.steps = std::size_t(steps);
    rec.wall_time = run.model.deterministic ? real(0) : wall_seconds;
    return rec;
}

TrainResult run_training(const RunConfig& run) {
    const ModelConfig& cfg = run.model;
    SyntheticScene scene = generate_scene(cfg.grid, run.scene, cfg.seed);

    TrainResult out;
    out.state = make_train_state(cfg);
    out.losses.reserve(cfg.total_steps);

    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t t = 0; t < cfg.total_steps; ++t)
        out.losses.push_back(train_step(out.state, cfg, scene));
    const real wall = real(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    out.prediction = predict(out.state.params, cfg, scene);
    out.record = evaluate_run(run, out.prediction, scene, out.state.step, wall);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpointing.
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'S', 'P', 'L', 'A', 'T', 'O', 'C', 'C'};
constexpr char kCkptTag[4] = {'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

void push_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}

void push_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}

void push_f64(std::string& b, double v) { push_u64(b, std::bit_cast<std::uint64_t>(v)); }

struct Cursor {
    const std::string& b;
    std::size_t pos = 0;

    void need(std::size_t n) {
        require(pos + n <= b.size(), "checkpoint: unexpected end of file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(b[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(b[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    void done() const { require(pos == b.size(), "checkpoint: trailing bytes"); }
};

}  // namespace

void save_train_state(const std::string& path, const TrainState& state,
                      const RunConfig& run) {
    // The registry walk only reads; the mutable view is an API convenience.
    auto regs = parameter_registry(const_cast<TrainState&>(state).params);
    std::size_t total = 0;
    for (const auto& r : regs) total += r.count;
    require(state.m.size() == total && state.v.size() == total,
            "checkpoint: moment buffers do not match the parameter count");

    std::string b;
    b.append(kCkptMagic, sizeof(kCkptMagic));
    b.append(kCkptTag, sizeof(kCkptTag));
    push_u32(b, kCkptVersion);
    push_u64(b, Rng::fnv1a(config_to_text(run)));
    push_u64(b, state.step);
    push_u64(b, state.rng.state());
    push_u64(b, regs.size());

    std::size_t off = 0;
    for (const auto& r : regs) {
        push_u64(b, Rng::fnv1a(r.name));
        push_u64(b, r.count);
        for (std::size_t i = 0; i < r.count; ++i) push_f64(b, double(r.value[i]));
        for (std::size_t i = 0; i < r.count; ++i) push_f64(b, state.m[off + i]);
        for (std::size_t i = 0; i < r.count; ++i) push_f64(b, state.v[off + i]);
        off += r.count;
    }
    write_file_bytes(path, b);
}

TrainState load_train_state(const std::string& path, const RunConfig& run) {
    const std::string b = read_file_bytes(path);
    Cursor c{b};
    c.need(12);
    require(std::equal(kCkptMagic, kCkptMagic + 8, b.data()), "checkpoint: bad magic");
    require(std::equal(kCkptTag, kCkptTag + 4, b.data() + 8), "checkpoint: bad tag");
    c.pos = 12;
    require(c.u32() == kCkptVersion, "checkpoint: unsupported version");
    require(c.u64() == Rng::fnv1a(config_to_text(run)),
            "checkpoint: saved for a different configuration");

    TrainState state = make_train_state(run.model);  // shapes only; all values replaced
    state.step = c.u64();
    state.rng = Rng::from_state(c.u64());

    auto regs = parameter_registry(state.params);
    require(c.u64() == regs.size(), "checkpoint: parameter group count mismatch");
    std::size_t off = 0;
    for (auto& r : regs) {
        require(c.u64() == Rng::fnv1a(r.name), "checkpoint: parameter order mismatch");
        require(c.u64() == r.count, "checkpoint: parameter count mismatch for " + r.name);
        for (std::size_t i = 0; i < r.count; ++i) r.value[i] = real(c.f64());
        for (std::size_t i = 0; i < r.count; ++i) state.m[off + i] = c.f64();
        for (std::size_t i = 0; i < r.count; ++i) state.v[off + i] = c.f64();
        off += r.count;
    }
    c.done();
    return state;
}

// ---------------------------------------------------------------------------
// Ablations.
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, MetricRecord>> run_ablation(const RunConfig& base) {
    require(base.model.num_gaussians >= 2, "ablation: need at least two gaussians");

    // Identical configs (e.g. the base fusion row and the full-component row)
    // train once and share the record.
    std::map<std::string, MetricRecord> cache;
    auto record_for = [&](const RunConfig& r) -> MetricRecord {
        const std::string key = config_hash(r);
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, run_training(r).record).first;
        return it->second;
    };

    std::vector<std::pair<std::string, MetricRecord>> rows;
    auto add = [&](const std::string& name, const RunConfig& r) {
        rows.emplace_back(name, record_for(r));
    };

    RunConfig r = base;
    r.model.fusion = FusionMode::add;
    add("fusion_add", r);
    r = base;
    r.model.fusion = FusionMode::concat;
    add("fusion_concat", r);
    r = base;
    r.model.fusion = FusionMode::aclf;
    add("fusion_aclf", r);

    add("component_full", base);
    r = base;
    r.model.use_camera = false;
    add("component_lidar_only", r);
    r = base;
    r.model.use_ldfa = false;
    add("component_plain_lift", r);
    r = base;
    r.model.use_ebfs = false;
    add("component_no_smoothing", r);
    r = base;
    r.model.use_head = false;
    add("component_no_head", r);

    r = base;
    r.model.num_gaussians = base.model.num_gaussians / 2;
    add("density_" + std::to_string(r.model.num_gaussians), r);
    add("density_" + std::to_string(base.model.num_gaussians), base);

    return rows;
}

std::string ablation_report_to_json(
    const std::vector<std::pair<std::string, MetricRecord>>& rows) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, rec] : rows)
        j[name] = nlohmann::json::parse(metric_record_to_json(rec));
    return j.dump(2) + "\n";
}

}  // namespace splatocc
