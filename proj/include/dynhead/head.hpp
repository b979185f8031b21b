#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynhead/gates.hpp"
#include "dynhead/ops.hpp"
#include "dynhead/params.hpp"
#include "dynhead/sparse.hpp"
#include "dynhead/tape.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

constexpr double kGnEps = 1e-5;

enum class PathKind { Depth = 0, ScaleUp = 1, ScaleDown = 2 };

inline const char* path_kind_name(PathKind k) {
    switch (k) {
        case PathKind::Depth: return "depth";
        case PathKind::ScaleUp: return "up";
        case PathKind::ScaleDown: return "down";
    }
    return "?";
}

/// One routing path of a node. Scale paths are depthwise with a single conv;
/// the depth path stacks two dense convs. Channels are preserved end to end.
struct PathSpec {
    PathKind kind = PathKind::Depth;
    int conv_depth = 2;
    int channels = 0;
    bool depthwise = false;

    static PathSpec make(PathKind kind, int channels) {
        if (kind == PathKind::Depth) return {kind, 2, channels, false};
        return {kind, 1, channels, true};
    }
};

/// Per-location MAC cost of a path: depthwise layers cost c*9, dense layers
/// c_out * (c_in/groups) * 9, summed over the stacked convolutions.
inline std::int64_t path_cost_per_location(const PathSpec& spec) {
    const int groups = spec.depthwise ? spec.channels : 1;
    return static_cast<std::int64_t>(spec.conv_depth) *
           conv3x3_macs_per_location(spec.channels, spec.channels, groups);
}

struct RouterNode {
    int scale = 0; // 0 is the finest pyramid level
    int depth = 0; // router layer in [0, D)
    std::vector<PathSpec> paths;
};

/// Scale the path output lands on: ScaleUp targets the finer neighbor,
/// ScaleDown the coarser one.
inline int path_target_scale(int scale, PathKind kind) {
    switch (kind) {
        case PathKind::Depth: return scale;
        case PathKind::ScaleUp: return scale - 1;
        case PathKind::ScaleDown: return scale + 1;
    }
    return scale;
}

/// The head's routing space: D router layers over an ordered set of pyramid
/// scales whose resolutions differ by exactly a factor of 2.
struct RoutingGraph {
    int num_scales = 3;
    int depth = 2;
    int channels = 32;
    bool enable_depth = true;
    bool enable_scale = true;
    std::vector<RouterNode> nodes; // ordered by (depth, scale)

    static RoutingGraph build(int num_scales, int depth, int channels, bool enable_depth = true,
                              bool enable_scale = true) {
        if (num_scales < 1)
            throw std::invalid_argument("routing graph: need at least one scale, got " +
                                        std::to_string(num_scales));
        if (depth < 1)
            throw std::invalid_argument("routing graph: depth must be >= 1, got " +
                                        std::to_string(depth));
        if (channels < 1)
            throw std::invalid_argument("routing graph: channels must be >= 1");
        if (!enable_depth && !enable_scale)
            throw std::invalid_argument("routing graph: all path kinds disabled");
        RoutingGraph g;
        g.num_scales = num_scales;
        g.depth = depth;
        g.channels = channels;
        g.enable_depth = enable_depth;
        g.enable_scale = enable_scale;
        for (int d = 0; d < depth; ++d) {
            for (int s = 0; s < num_scales; ++s) {
                RouterNode node{s, d, {}};
                if (enable_depth) node.paths.push_back(PathSpec::make(PathKind::Depth, channels));
                if (enable_scale) {
                    if (s > 0) node.paths.push_back(PathSpec::make(PathKind::ScaleUp, channels));
                    if (s < num_scales - 1)
                        node.paths.push_back(PathSpec::make(PathKind::ScaleDown, channels));
                }
                if (node.paths.empty())
                    throw std::invalid_argument(
                        "routing graph: node at scale " + std::to_string(s) +
                        " has no paths (scale paths need at least two scales)");
                g.nodes.push_back(std::move(node));
            }
        }
        return g;
    }

    const RouterNode& node_at(int scale, int depth_level) const {
        return nodes[static_cast<std::size_t>(depth_level) * num_scales + scale];
    }
};

enum class GateMode { Learned, ForcedOpen, ForcedClosed };

struct HeadConfig {
    GateActivationConfig gate;
    bool coarse_gate = false;
    bool softmax_gate = false; // soft-routing ablation; keeps every path enabled
    GateMode gate_mode = GateMode::Learned;
};

namespace head_names {

inline std::string path_prefix(int depth, PathKind kind) {
    return "head.d" + std::to_string(depth) + "." + path_kind_name(kind);
}
inline std::string gate_prefix(int depth, PathKind kind) {
    return "head.d" + std::to_string(depth) + ".gate." + path_kind_name(kind);
}

} // namespace head_names

/// Largest group count <= 8 that divides the channel width.
inline int gn_groups_for(int channels) {
    for (int g = std::min(8, channels); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

struct DepthPathParams {
    Tensor conv1_w, gn1_gamma, gn1_beta;
    Tensor conv2_w, gn2_gamma, gn2_beta;
};

struct ScalePathParams {
    Tensor conv_w, gn_gamma, gn_beta;
};

inline DepthPathParams depth_path_params(const ParameterSet& params, int depth) {
    const std::string p = head_names::path_prefix(depth, PathKind::Depth);
    return {params.get(p + ".conv1.weight"), params.get(p + ".gn1.gamma"),
            params.get(p + ".gn1.beta"),     params.get(p + ".conv2.weight"),
            params.get(p + ".gn2.gamma"),    params.get(p + ".gn2.beta")};
}

inline ScalePathParams scale_path_params(const ParameterSet& params, int depth, PathKind kind) {
    const std::string p = head_names::path_prefix(depth, kind);
    return {params.get(p + ".conv.weight"), params.get(p + ".gn.gamma"),
            params.get(p + ".gn.beta")};
}

inline SpatialGateParams gate_params(const ParameterSet& params, int depth, PathKind kind) {
    const std::string p = head_names::gate_prefix(depth, kind);
    return {params.get(p + ".weight"), params.get(p + ".bias")};
}

/// Bottleneck-style depth path: y = x + SPConv3x3 -> GN -> ReLU -> SPConv3x3
/// -> GN, all under one mask dilated for the two stacked convolutions. When a
/// gate map is supplied the whole residual output is weighted by it.
inline Tensor depth_path(Tape& tape, const Tensor& x, const DepthPathParams& p,
                         const SpatialMask& mask, const Tensor& gate = {}) {
    const int groups = gn_groups_for(x.shape().c);
    Tensor t = sparse_conv2d(tape, x, p.conv1_w, {}, 1, mask);
    t = group_norm(tape, t, groups, p.gn1_gamma, p.gn1_beta, kGnEps);
    t = relu(tape, t);
    t = sparse_conv2d(tape, t, p.conv2_w, {}, 1, mask);
    t = group_norm(tape, t, groups, p.gn2_gamma, p.gn2_beta, kGnEps);
    Tensor y = add(tape, x, t);
    if (gate) y = mul_map(tape, y, gate);
    return y;
}

/// Scale path: depthwise SPConv3x3 -> GN -> ReLU at the input resolution,
/// gate weighting (if any) on the same grid, then the factor-2 resample.
inline Tensor scale_path(Tape& tape, const Tensor& x, const ScalePathParams& p,
                         const SpatialMask& mask, ResampleDir dir, const Tensor& gate = {}) {
    const int c = x.shape().c;
    Tensor t = sparse_conv2d(tape, x, p.conv_w, {}, c, mask);
    t = group_norm(tape, t, gn_groups_for(c), p.gn_gamma, p.gn_beta, kGnEps);
    t = relu(tape, t);
    if (gate) t = mul_map(tape, t, gate);
    return bilinear_resample(tape, t, dir);
}

/// Everything a router emits for one of its paths.
struct RouterPathOutput {
    int scale = 0;
    int depth = 0;
    PathKind kind = PathKind::Depth;
    int target_scale = 0;
    bool skipped = false;             // gate identically zero, no path compute
    Tensor output;                    // empty when skipped
    GatingMap gate;                   // m^{k,l}, on the tape
    Tensor dilated;                   // receptive-field max of m, on the tape
    SpatialMask mask;                 // quantized, detached
    std::int64_t cost_per_location = 0;
    std::int64_t node_locations = 0;  // N of the owning node
};

struct RouterResult {
    Tensor input_sum; // x^l
    std::vector<RouterPathOutput> paths;
};

/// Fine-grained dynamic router: accumulates its input features, evaluates one
/// spatial gate per path, and emits the set of gate-weighted path outputs.
/// Paths whose gating map is identically zero are skipped entirely.
inline RouterResult router_forward(Tape& tape, const RouterNode& node,
                                   const std::vector<Tensor>& inputs, const ParameterSet& params,
                                   const HeadConfig& cfg) {
    if (inputs.empty())
        throw std::invalid_argument("router_forward: empty input list at scale " +
                                    std::to_string(node.scale) + " depth " +
                                    std::to_string(node.depth));
    Tensor x = inputs[0];
    for (std::size_t i = 1; i < inputs.size(); ++i) x = add(tape, x, inputs[i]);

    const Shape xs = x.shape();
    const int K = static_cast<int>(node.paths.size());

    // Gating maps per path.
    std::vector<Tensor> maps(K);
    switch (cfg.gate_mode) {
        case GateMode::ForcedOpen:
            for (int k = 0; k < K; ++k) maps[k] = Tensor::filled({xs.n, 1, xs.h, xs.w}, 1.0);
            break;
        case GateMode::ForcedClosed:
            for (int k = 0; k < K; ++k) maps[k] = Tensor::zeros({xs.n, 1, xs.h, xs.w});
            break;
        case GateMode::Learned: {
            if (cfg.softmax_gate) {
                std::vector<Tensor> pre(K);
                for (int k = 0; k < K; ++k) {
                    pre[k] = spatial_gate_preact(tape, x,
                                                 gate_params(params, node.depth, node.paths[k].kind));
                    if (cfg.coarse_gate)
                        pre[k] = broadcast_spatial(tape, global_avg_pool(tape, pre[k]), xs.h, xs.w);
                }
                maps = softmax_over_maps(tape, pre);
            } else {
                for (int k = 0; k < K; ++k) {
                    const SpatialGateParams gp =
                        gate_params(params, node.depth, node.paths[k].kind);
                    maps[k] = cfg.coarse_gate ? coarse_gate_forward(tape, x, gp, cfg.gate).values
                                              : spatial_gate_forward(tape, x, gp, cfg.gate).values;
                }
            }
            break;
        }
    }

    RouterResult result;
    result.input_sum = x;
    for (int k = 0; k < K; ++k) {
        const PathSpec& spec = node.paths[k];
        RouterPathOutput out;
        out.scale = node.scale;
        out.depth = node.depth;
        out.kind = spec.kind;
        out.target_scale = path_target_scale(node.scale, spec.kind);
        out.gate = GatingMap{maps[k]};
        out.cost_per_location = path_cost_per_location(spec);
        out.node_locations = xs.spatial();

        bool any_positive = false;
        for (double v : maps[k].values())
            if (v > 0.0) {
                any_positive = true;
                break;
            }
        if (!any_positive) {
            // Dilating an all-zero map is a no-op for both the budget value and
            // its gradient (the activation's dead zone blocks any flow).
            out.skipped = true;
            out.dilated = maps[k];
            out.mask = SpatialMask{Tensor::zeros({xs.n, 1, xs.h, xs.w}), node.scale, node.depth, k};
            result.paths.push_back(std::move(out));
            continue;
        }

        out.dilated = dilate_mask(tape, out.gate, spec.conv_depth);
        out.mask = quantize_mask(out.dilated, node.scale, node.depth, k);
        switch (spec.kind) {
            case PathKind::Depth:
                out.output = depth_path(tape, x, depth_path_params(params, node.depth), out.mask,
                                        maps[k]);
                break;
            case PathKind::ScaleUp:
                out.output = scale_path(tape, x, scale_path_params(params, node.depth, spec.kind),
                                        out.mask, ResampleDir::Up, maps[k]);
                break;
            case PathKind::ScaleDown:
                out.output = scale_path(tape, x, scale_path_params(params, node.depth, spec.kind),
                                        out.mask, ResampleDir::Down, maps[k]);
                break;
        }
        result.paths.push_back(std::move(out));
    }
    return result;
}

struct HeadResult {
    std::vector<Tensor> outputs;            // per scale, zeros when nothing routed there
    std::vector<RouterPathOutput> paths;    // every router path, ordered by (depth, scale, k)
    std::vector<Tensor> node_inputs;        // x^l per executed router
};

/// Runs the full routing space breadth-first by depth. Each node at depth d+1
/// accumulates the Depth output from (s,d), the ScaleUp output from (s+1,d)
/// and the ScaleDown output from (s-1,d) where those exist; the depth-D
/// accumulations are the head outputs.
inline HeadResult head_forward(Tape& tape, const RoutingGraph& graph,
                               const std::vector<Tensor>& pyramid, const ParameterSet& params,
                               const HeadConfig& cfg) {
    if (static_cast<int>(pyramid.size()) != graph.num_scales)
        throw std::invalid_argument("head_forward: expected " + std::to_string(graph.num_scales) +
                                    " pyramid levels, got " + std::to_string(pyramid.size()));
    for (int s = 0; s < graph.num_scales; ++s) {
        const Shape& fs = pyramid[s].shape();
        if (fs.c != graph.channels)
            throw std::invalid_argument("head_forward: level " + std::to_string(s) + " has " +
                                        std::to_string(fs.c) + " channels, expected " +
                                        std::to_string(graph.channels));
        if (s > 0) {
            const Shape& prev = pyramid[s - 1].shape();
            if (prev.h != 2 * fs.h || prev.w != 2 * fs.w)
                throw std::invalid_argument(
                    "head_forward: resolution of level " + std::to_string(s) + " " + fs.str() +
                    " is not half of level " + std::to_string(s - 1) + " " + prev.str());
        }
    }

    const int S = graph.num_scales;
    std::vector<std::vector<std::vector<Tensor>>> incoming(
        static_cast<std::size_t>(graph.depth) + 1,
        std::vector<std::vector<Tensor>>(static_cast<std::size_t>(S)));
    for (int s = 0; s < S; ++s) incoming[0][s].push_back(pyramid[s]);

    HeadResult result;
    for (int d = 0; d < graph.depth; ++d) {
        for (int s = 0; s < S; ++s) {
            if (incoming[d][s].empty()) continue; // everything upstream was gated off
            RouterResult rr = router_forward(tape, graph.node_at(s, d), incoming[d][s], params, cfg);
            result.node_inputs.push_back(rr.input_sum);
            for (RouterPathOutput& p : rr.paths) {
                if (!p.skipped) incoming[d + 1][p.target_scale].push_back(p.output);
                result.paths.push_back(std::move(p));
            }
        }
    }

    for (int s = 0; s < S; ++s) {
        auto& ins = incoming[graph.depth][s];
        if (ins.empty()) {
            const Shape fs = pyramid[s].shape();
            result.outputs.push_back(Tensor::zeros(fs));
            continue;
        }
        Tensor acc = ins[0];
        for (std::size_t i = 1; i < ins.size(); ++i) acc = add(tape, acc, ins[i]);
        result.outputs.push_back(acc);
    }
    return result;
}

struct Predictions {
    std::vector<Tensor> cls; // (B, num_classes, H, W) per scale
    std::vector<Tensor> reg; // (B, 4, H, W) per scale
};

/// Dense 3x3 prediction convolutions, shared across scales.
inline Predictions predict(Tape& tape, const std::vector<Tensor>& head_outputs,
                           const ParameterSet& params) {
    Predictions out;
    const Tensor& cw = params.get("pred.cls.weight");
    const Tensor& cb = params.get("pred.cls.bias");
    const Tensor& rw = params.get("pred.reg.weight");
    const Tensor& rb = params.get("pred.reg.bias");
    for (const Tensor& f : head_outputs) {
        out.cls.push_back(conv2d(tape, f, cw, cb, 1));
        out.reg.push_back(conv2d(tape, f, rw, rb, 1));
    }
    return out;
}

/// Initializes every head parameter: Kaiming-normal path convolutions,
/// identity group norms, std-0.01 gate weights with the bias at tau + 1 so
/// all paths start open.
inline void init_head_params(ParameterSet& params, const RoutingGraph& graph,
                             const GateActivationConfig& gate_cfg, Rng& rng) {
    const int c = graph.channels;
    auto kaiming = [&](Shape s, int fan_in) {
        return rng.tensor_normal(s, 0.0, std::sqrt(2.0 / fan_in));
    };
    for (int d = 0; d < graph.depth; ++d) {
        std::vector<PathKind> kinds;
        if (graph.enable_depth) kinds.push_back(PathKind::Depth);
        if (graph.enable_scale) {
            if (graph.num_scales > 1) kinds.push_back(PathKind::ScaleUp);
            if (graph.num_scales > 1) kinds.push_back(PathKind::ScaleDown);
        }
        for (PathKind kind : kinds) {
            const std::string pp = head_names::path_prefix(d, kind);
            if (kind == PathKind::Depth) {
                params.add(pp + ".conv1.weight", kaiming({c, c, 3, 3}, c * 9));
                params.add(pp + ".gn1.gamma", Tensor::filled({1, c, 1, 1}, 1.0));
                params.add(pp + ".gn1.beta", Tensor::zeros({1, c, 1, 1}));
                params.add(pp + ".conv2.weight", kaiming({c, c, 3, 3}, c * 9));
                params.add(pp + ".gn2.gamma", Tensor::filled({1, c, 1, 1}, 1.0));
                params.add(pp + ".gn2.beta", Tensor::zeros({1, c, 1, 1}));
            } else {
                params.add(pp + ".conv.weight", kaiming({c, 1, 3, 3}, 9));
                params.add(pp + ".gn.gamma", Tensor::filled({1, c, 1, 1}, 1.0));
                params.add(pp + ".gn.beta", Tensor::zeros({1, c, 1, 1}));
            }
            const std::string gp = head_names::gate_prefix(d, kind);
            params.add(gp + ".weight", rng.tensor_normal({1, c, 3, 3}, 0.0, 0.01));
            params.add(gp + ".bias", Tensor::filled({1, 1, 1, 1}, gate_cfg.tau + 1.0));
        }
    }
}

inline void init_pred_params(ParameterSet& params, int channels, int num_classes, Rng& rng) {
    params.add("pred.cls.weight", rng.tensor_normal({num_classes, channels, 3, 3}, 0.0, 0.01));
    params.add("pred.cls.bias", Tensor::zeros({1, num_classes, 1, 1}));
    params.add("pred.reg.weight", rng.tensor_normal({4, channels, 3, 3}, 0.0, 0.01));
    params.add("pred.reg.bias", Tensor::zeros({1, 4, 1, 1}));
}

} // namespace dynhead
