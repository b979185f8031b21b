#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynhead/head.hpp"
#include "dynhead/ops.hpp"
#include "dynhead/tape.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

/// Cost coefficient of one predefined path: per-location MACs derived from
/// the weight shapes and groups.
struct PathCost {
    int scale = 0;
    int depth = 0;
    PathKind kind = PathKind::Depth;
    std::int64_t per_location_macs = 0;
};

struct LossConfig {
    double lambda = 0.4;
    double cls_weight = 1.0;
    double reg_weight = 1.0;
    // Centerness term of the joint loss is fixed to zero here.

    void validate() const {
        if (!std::isfinite(lambda) || lambda < 0.0)
            throw std::invalid_argument("loss: lambda must be finite and >= 0");
        if (!std::isfinite(cls_weight) || !std::isfinite(reg_weight))
            throw std::invalid_argument("loss: cls/reg weights must be finite");
    }
};

/// Per-location path cost summed over a node: C^l = sum_k C^{k,l}.
inline std::int64_t node_cost_per_location(const RouterNode& node) {
    std::int64_t c = 0;
    for (const PathSpec& p : node.paths) c += path_cost_per_location(p);
    return c;
}

/// Groups a head result's path states by owning node, ordered by (depth, scale).
inline std::map<std::pair<int, int>, std::vector<const RouterPathOutput*>>
group_paths_by_node(const HeadResult& head) {
    std::map<std::pair<int, int>, std::vector<const RouterPathOutput*>> nodes;
    for (const RouterPathOutput& p : head.paths) nodes[{p.depth, p.scale}].push_back(&p);
    return nodes;
}

/// Differentiable node budget B^l: the mean over locations (and batch) of the
/// cost-weighted continuous dilated gating maps. The division by N happens
/// once at the end so the pre-normalization total stays exact for integer
/// inputs.
inline Tensor node_budget(Tape& tape, const std::vector<const RouterPathOutput*>& node_paths) {
    if (node_paths.empty()) throw std::invalid_argument("node_budget: no paths supplied");
    Tensor total;
    for (const RouterPathOutput* p : node_paths) {
        Tensor term = scale(tape, sum_all(tape, p->dilated),
                            static_cast<double>(p->cost_per_location));
        total = total ? add(tape, total, term) : term;
    }
    const Shape ms = node_paths[0]->gate.values.shape();
    return scale(tape, total, 1.0 / (static_cast<double>(ms.n) * ms.spatial()));
}

/// Node budget over the quantized masks, in exact MAC units:
/// sum_k C^{k,l} * |enabled_k|. Equals the realized path MACs of the node.
inline std::int64_t node_quantized_macs(const std::vector<const RouterPathOutput*>& node_paths) {
    std::int64_t total = 0;
    for (const RouterPathOutput* p : node_paths)
        total += p->cost_per_location * p->mask.enabled();
    return total;
}

/// Normalized budget loss: sum of node budgets over the summed per-location
/// node costs; in [0, 1], exactly 1 with every gate open.
inline Tensor budget_loss(Tape& tape, const std::vector<Tensor>& node_budgets,
                          const std::vector<std::int64_t>& node_costs) {
    double denom = 0.0;
    for (std::int64_t c : node_costs) denom += static_cast<double>(c);
    if (denom <= 0.0)
        throw std::invalid_argument("budget_loss: total path cost is zero (no paths defined)");
    if (node_budgets.empty()) throw std::invalid_argument("budget_loss: no node budgets");
    Tensor acc = node_budgets[0];
    for (std::size_t i = 1; i < node_budgets.size(); ++i) acc = add(tape, acc, node_budgets[i]);
    return scale(tape, acc, 1.0 / denom);
}

/// Budget loss of a full head pass. The denominator counts every node of the
/// graph, including routers that never executed because everything upstream
/// was gated off (their budget contribution is zero).
inline Tensor budget_loss_from_head(Tape& tape, const RoutingGraph& graph,
                                    const HeadResult& head) {
    std::vector<std::int64_t> costs;
    costs.reserve(graph.nodes.size());
    for (const RouterNode& node : graph.nodes) costs.push_back(node_cost_per_location(node));

    auto grouped = group_paths_by_node(head);
    std::vector<Tensor> budgets;
    for (auto& [key, paths] : grouped) budgets.push_back(node_budget(tape, paths));
    if (budgets.empty()) {
        // No router executed at all; the loss is a constant zero.
        Tensor zero = Tensor::zeros({1, 1, 1, 1});
        double denom = 0.0;
        for (std::int64_t c : costs) denom += static_cast<double>(c);
        if (denom <= 0.0) throw std::invalid_argument("budget_loss: total path cost is zero");
        return zero;
    }
    return budget_loss(tape, budgets, costs);
}

/// Joint objective: L = w_cls * L_cls + w_reg * L_reg + lambda * L_budget
/// (the centerness slot is identically zero). Rejects non-finite components.
inline Tensor total_loss(Tape& tape, const Tensor& l_cls, const Tensor& l_reg,
                         const Tensor& l_budget, const LossConfig& cfg) {
    cfg.validate();
    auto check = [](const Tensor& t, const char* name) {
        if (!t || t.shape() != Shape{1, 1, 1, 1})
            throw std::invalid_argument(std::string("total_loss: ") + name + " must be a scalar");
        if (!std::isfinite(t.values()[0]))
            throw std::invalid_argument(std::string("total_loss: non-finite component ") + name);
    };
    check(l_cls, "l_cls");
    check(l_reg, "l_reg");
    check(l_budget, "l_budget");
    Tensor out = add(tape, scale(tape, l_cls, cfg.cls_weight), scale(tape, l_reg, cfg.reg_weight));
    return add(tape, out, scale(tape, l_budget, cfg.lambda));
}

/// Always-on layer cost per sample: gate convolutions of the executed routers
/// (when gates are learned) plus the two prediction convolutions per scale.
inline std::int64_t static_layer_macs(const HeadResult& head,
                                      const std::vector<Shape>& output_shapes, int channels,
                                      int num_classes, bool gates_executed) {
    std::int64_t macs = 0;
    if (gates_executed) {
        for (const auto& [key, paths] : group_paths_by_node(head)) {
            const std::int64_t n = paths[0]->node_locations;
            macs += static_cast<std::int64_t>(paths.size()) * n *
                    conv3x3_macs_per_location(1, channels, 1);
        }
    }
    for (const Shape& s : output_shapes)
        macs += s.spatial() * conv3x3_macs_per_location(num_classes + 4, channels, 1);
    return macs;
}

/// Exact executed MACs per sample: enabled-location counts times per-location
/// path costs, plus the static layer costs.
inline std::vector<std::int64_t> realized_macs(const HeadResult& head, int channels,
                                               int num_classes, bool gates_executed) {
    std::vector<Shape> out_shapes;
    for (const Tensor& t : head.outputs) out_shapes.push_back(t.shape());
    const int batch = out_shapes.empty() ? 1 : out_shapes[0].n;
    const std::int64_t statics =
        static_layer_macs(head, out_shapes, channels, num_classes, gates_executed);

    std::vector<std::int64_t> per_sample(static_cast<std::size_t>(batch), statics);
    for (const RouterPathOutput& p : head.paths) {
        if (p.skipped) continue;
        for (int b = 0; b < batch; ++b)
            per_sample[b] += p.cost_per_location * p.mask.enabled_in_sample(b);
    }
    return per_sample;
}

/// Static (all paths, every location) head cost for the given per-scale
/// resolutions, optionally including the gate networks.
inline std::int64_t static_head_macs(const RoutingGraph& graph,
                                     const std::vector<Shape>& scale_shapes, int num_classes,
                                     bool include_gates) {
    std::int64_t macs = 0;
    for (const RouterNode& node : graph.nodes) {
        const std::int64_t n = scale_shapes[node.scale].spatial();
        macs += n * node_cost_per_location(node);
        if (include_gates)
            macs += static_cast<std::int64_t>(node.paths.size()) * n *
                    conv3x3_macs_per_location(1, graph.channels, 1);
    }
    for (const Shape& s : scale_shapes)
        macs += s.spatial() * conv3x3_macs_per_location(num_classes + 4, graph.channels, 1);
    return macs;
}

/// Connected-component statistics of the enabled cells of a mask (4-connected,
/// per sample). Reported alongside the budget as a proxy for memory-access
/// continuity.
struct ComponentStats {
    std::int64_t components = 0;
    std::int64_t enabled = 0;

    double mean_area() const {
        return components > 0 ? static_cast<double>(enabled) / components : 0.0;
    }
};

inline ComponentStats mask_component_stats(const SpatialMask& mask) {
    const Shape s = mask.values.shape();
    ComponentStats stats;
    std::vector<char> seen(static_cast<std::size_t>(s.spatial()));
    std::vector<std::int64_t> stack;
    for (int b = 0; b < s.n; ++b) {
        std::fill(seen.begin(), seen.end(), 0);
        const double* d = mask.values.data() + s.index(b, 0, 0, 0);
        for (std::int64_t i = 0; i < s.spatial(); ++i) {
            if (d[i] == 0.0 || seen[i]) continue;
            ++stats.components;
            stack.push_back(i);
            seen[i] = 1;
            while (!stack.empty()) {
                const std::int64_t cur = stack.back();
                stack.pop_back();
                ++stats.enabled;
                const int y = static_cast<int>(cur / s.w), x = static_cast<int>(cur % s.w);
                const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    const int ny = y + dy[k], nx = x + dx[k];
                    if (ny < 0 || ny >= s.h || nx < 0 || nx >= s.w) continue;
                    const std::int64_t ni = static_cast<std::int64_t>(ny) * s.w + nx;
                    if (d[ni] != 0.0 && !seen[ni]) {
                        seen[ni] = 1;
                        stack.push_back(ni);
                    }
                }
            }
        }
    }
    return stats;
}

/// Per-node realized budgets, per-sample head MACs and their aggregates over a
/// dataset.
struct BudgetReport {
    struct NodeKey {
        int depth = 0;
        int scale = 0;
        auto operator<=>(const NodeKey&) const = default;
    };

    std::vector<NodeKey> node_order;
    std::vector<std::vector<double>> per_sample_node_budgets; // [sample][node], per-location units
    std::vector<std::int64_t> per_sample_macs;
    double components_mean = 0.0;
    double component_area_mean = 0.0;

    double macs_avg() const {
        if (per_sample_macs.empty()) return 0.0;
        double s = 0.0;
        for (auto v : per_sample_macs) s += static_cast<double>(v);
        return s / static_cast<double>(per_sample_macs.size());
    }
    std::int64_t macs_max() const {
        std::int64_t m = 0;
        for (auto v : per_sample_macs) m = std::max(m, v);
        return m;
    }
    std::int64_t macs_min() const {
        if (per_sample_macs.empty()) return 0;
        std::int64_t m = per_sample_macs[0];
        for (auto v : per_sample_macs) m = std::min(m, v);
        return m;
    }
};

} // namespace dynhead
