#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dynhead/config.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

/// Blob on a synthetic scene. Class ids start at 1; 0 is background.
/// Even-indexed classes draw squares, odd-indexed ones discs.
struct SceneObject {
    int class_id = 1;
    double cx = 0.0;
    double cy = 0.0;
    double size = 0.0; // side length / diameter in image pixels
    int level = 0;     // assigned pyramid level
};

/// One image with per-scale dense supervision. Targets live on the feature
/// grids: a cell is foreground for an object when its center falls inside the
/// object's box at the object's assigned level.
struct SyntheticScene {
    Tensor image; // (1, channels, H, W)
    std::vector<SceneObject> objects;
    std::vector<Tensor> cls_targets; // (1,1,h,w) class indices as doubles
    std::vector<Tensor> cls_weights; // (1,1,h,w)
    std::vector<Tensor> reg_targets; // (1,4,h,w) l,t,r,b distances / (stride*8)
    std::vector<Tensor> reg_weights; // (1,1,h,w) 1 at foreground cells
};

/// Assigns an object to the pyramid level whose stride is closest to
/// size / 2; ties go to the finer level.
inline int assign_level(double size, int num_scales) {
    int best = 0;
    double best_gap = 1e300;
    for (int s = 0; s < num_scales; ++s) {
        const double gap = std::abs(static_cast<double>(kBaseStride << s) - size / 2.0);
        if (gap < best_gap) {
            best_gap = gap;
            best = s;
        }
    }
    return best;
}

namespace synth_detail {

constexpr std::uint64_t kSceneTag = 0x5C31;
constexpr double kRegNorm = 8.0; // regression targets normalized by stride * kRegNorm

inline void rasterize_targets(SyntheticScene& scene, const RunConfig& cfg) {
    for (int s = 0; s < cfg.head_scales; ++s) {
        const int stride = cfg.stride_at(s);
        const int h = cfg.image_size / stride;
        scene.cls_targets.push_back(Tensor::zeros({1, 1, h, h}));
        scene.cls_weights.push_back(Tensor::filled({1, 1, h, h}, cfg.bg_weight));
        scene.reg_targets.push_back(Tensor::zeros({1, 4, h, h}));
        scene.reg_weights.push_back(Tensor::zeros({1, 1, h, h}));
    }
    for (const SceneObject& obj : scene.objects) {
        const int stride = cfg.stride_at(obj.level);
        const int h = cfg.image_size / stride;
        const double x0 = obj.cx - obj.size / 2.0, x1 = obj.cx + obj.size / 2.0;
        const double y0 = obj.cy - obj.size / 2.0, y1 = obj.cy + obj.size / 2.0;
        const double norm = stride * kRegNorm;
        Tensor& ct = scene.cls_targets[obj.level];
        Tensor& cw = scene.cls_weights[obj.level];
        Tensor& rt = scene.reg_targets[obj.level];
        Tensor& rw = scene.reg_weights[obj.level];
        for (int gy = 0; gy < h; ++gy) {
            const double py = (gy + 0.5) * stride;
            if (py < y0 || py > y1) continue;
            for (int gx = 0; gx < h; ++gx) {
                const double px = (gx + 0.5) * stride;
                if (px < x0 || px > x1) continue;
                ct.at(0, 0, gy, gx) = obj.class_id;
                cw.at(0, 0, gy, gx) = 1.0;
                rt.at(0, 0, gy, gx) = (px - x0) / norm;
                rt.at(0, 1, gy, gx) = (py - y0) / norm;
                rt.at(0, 2, gy, gx) = (x1 - px) / norm;
                rt.at(0, 3, gy, gx) = (y1 - py) / norm;
                rw.at(0, 0, gy, gx) = 1.0;
            }
        }
    }
}

inline void draw_object(Tensor& image, const SceneObject& obj, double intensity) {
    const Shape s = image.shape();
    const double r = obj.size / 2.0;
    const int y0 = std::max(0, static_cast<int>(std::floor(obj.cy - r)));
    const int y1 = std::min(s.h - 1, static_cast<int>(std::ceil(obj.cy + r)));
    const int x0 = std::max(0, static_cast<int>(std::floor(obj.cx - r)));
    const int x1 = std::min(s.w - 1, static_cast<int>(std::ceil(obj.cx + r)));
    const bool disc = obj.class_id % 2 == 1;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = x + 0.5 - obj.cx, dy = y + 0.5 - obj.cy;
            const bool inside = disc ? dx * dx + dy * dy <= r * r
                                     : std::abs(dx) <= r && std::abs(dy) <= r;
            if (!inside) continue;
            for (int c = 0; c < s.c; ++c) {
                // channel-dependent shading so multi-channel inputs stay informative
                const double v = intensity * (1.0 - 0.15 * c) + (obj.class_id % 2 ? 0.0 : 0.1);
                image.at(0, c, y, x) = std::min(1.0, v);
            }
        }
}

} // namespace synth_detail

inline SyntheticScene gen_scene(std::uint64_t seed, std::uint64_t index, const RunConfig& cfg,
                                int forced_object_count = -1) {
    Rng rng(substream_seed(seed, synth_detail::kSceneTag, index));
    SyntheticScene scene;
    scene.image = Tensor::zeros({1, cfg.image_channels, cfg.image_size, cfg.image_size});
    for (auto& v : scene.image.values_mut()) v = 0.05 * rng.uniform();

    const int count = forced_object_count >= 0
                          ? forced_object_count
                          : 1 + static_cast<int>(rng.uniform_int(cfg.objects_max));
    for (int i = 0; i < count; ++i) {
        SceneObject obj;
        obj.class_id = 1 + static_cast<int>(rng.uniform_int(cfg.num_classes));
        const double u = rng.uniform();
        obj.size = cfg.size_min * std::exp(u * std::log(cfg.size_max / cfg.size_min));
        const double margin = obj.size / 2.0 + 1.0;
        obj.cx = rng.uniform(margin, cfg.image_size - margin);
        obj.cy = rng.uniform(margin, cfg.image_size - margin);
        obj.level = assign_level(obj.size, cfg.head_scales);
        synth_detail::draw_object(scene.image, obj, rng.uniform(0.45, 0.9));
        scene.objects.push_back(obj);
    }
    synth_detail::rasterize_targets(scene, cfg);
    return scene;
}

/// Reproducible dataset: scene i depends only on (seed, stream, i), so
/// generation order and parallelism cannot change the result.
inline std::vector<SyntheticScene> gen_synthetic(std::uint64_t seed, int count,
                                                 const RunConfig& cfg) {
    cfg.validate();
    std::vector<SyntheticScene> scenes;
    scenes.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        scenes.push_back(gen_scene(seed, static_cast<std::uint64_t>(i), cfg));
    return scenes;
}

/// Stacks single-sample scenes into one batched set of tensors.
struct BatchedScenes {
    Tensor image;
    std::vector<Tensor> cls_targets, cls_weights, reg_targets, reg_weights;
    std::vector<const SyntheticScene*> scenes;
};

inline BatchedScenes stack_scenes(const std::vector<const SyntheticScene*>& scenes,
                                  const RunConfig& cfg) {
    if (scenes.empty()) throw std::invalid_argument("stack_scenes: empty batch");
    const int B = static_cast<int>(scenes.size());
    BatchedScenes out;
    out.scenes = scenes;
    auto stack = [B](const std::function<const Tensor&(int)>& get) {
        const Shape s0 = get(0).shape();
        Tensor t = Tensor::zeros({B, s0.c, s0.h, s0.w});
        for (int b = 0; b < B; ++b) {
            const Tensor& src = get(b);
            std::copy(src.values().begin(), src.values().end(),
                      t.values_mut().begin() + b * s0.numel());
        }
        return t;
    };
    out.image = stack([&](int b) -> const Tensor& { return scenes[b]->image; });
    for (int s = 0; s < cfg.head_scales; ++s) {
        out.cls_targets.push_back(
            stack([&](int b) -> const Tensor& { return scenes[b]->cls_targets[s]; }));
        out.cls_weights.push_back(
            stack([&](int b) -> const Tensor& { return scenes[b]->cls_weights[s]; }));
        out.reg_targets.push_back(
            stack([&](int b) -> const Tensor& { return scenes[b]->reg_targets[s]; }));
        out.reg_weights.push_back(
            stack([&](int b) -> const Tensor& { return scenes[b]->reg_weights[s]; }));
    }
    return out;
}

} // namespace dynhead
