#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dynhead/budget.hpp"
#include "dynhead/checkpoint.hpp"
#include "dynhead/config.hpp"
#include "dynhead/head.hpp"
#include "dynhead/heatmap.hpp"
#include "dynhead/ops.hpp"
#include "dynhead/synthetic.hpp"

namespace dynhead {

namespace harness_detail {

constexpr std::uint64_t kInitTag = 0xA11;
constexpr std::uint64_t kTrainDataTag = 0xA12;
constexpr std::uint64_t kEvalDataTag = 0xA13;
constexpr std::uint64_t kBatchTag = 0xA14;

/// Index-parallel loop. Work items are independent and land in per-index
/// slots, so the schedule cannot change any result. Exceptions are rethrown
/// in index order after the join.
inline void parallel_for(int n, int num_threads, const std::function<void(int)>& fn) {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    if (num_threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
            }
        }
    } else {
        std::atomic<int> next{0};
        auto worker = [&]() {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                try {
                    fn(i);
                } catch (...) {
                    errors[static_cast<std::size_t>(i)] = std::current_exception();
                }
            }
        };
        std::vector<std::thread> pool;
        const int spawn = std::min(num_threads, n) - 1;
        pool.reserve(static_cast<std::size_t>(spawn));
        for (int t = 0; t < spawn; ++t) pool.emplace_back(worker);
        worker();
        for (std::thread& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline int effective_threads(const RunConfig& cfg, int work_items) {
    int t = cfg.threads;
    if (t <= 0) t = static_cast<int>(std::thread::hardware_concurrency());
    if (t < 1) t = 1;
    return std::min(t, work_items);
}

inline std::string short_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

} // namespace harness_detail

struct Model {
    RoutingGraph graph;
    HeadConfig head_cfg;
    ParameterSet params;
};

inline HeadConfig head_config_from(const RunConfig& cfg) {
    HeadConfig h;
    h.gate.tau = cfg.tau;
    h.coarse_gate = cfg.coarse_gate;
    h.softmax_gate = cfg.softmax_gate;
    if (cfg.gate_force == "open") h.gate_mode = GateMode::ForcedOpen;
    else if (cfg.gate_force == "closed") h.gate_mode = GateMode::ForcedClosed;
    else h.gate_mode = GateMode::Learned;
    return h;
}

inline void init_stub_params(ParameterSet& params, const RunConfig& cfg, Rng& rng) {
    const int c = cfg.channels;
    for (int k = 0; k <= cfg.head_scales; ++k) {
        const int cin = k == 0 ? cfg.image_channels : c;
        const std::string id = std::to_string(k);
        params.add("stub.conv" + id + ".weight",
                   rng.tensor_normal({c, cin, 3, 3}, 0.0, std::sqrt(2.0 / (cin * 9))));
        params.add("stub.conv" + id + ".bias", Tensor::zeros({1, c, 1, 1}));
        params.add("stub.gn" + id + ".gamma", Tensor::filled({1, c, 1, 1}, 1.0));
        params.add("stub.gn" + id + ".beta", Tensor::zeros({1, c, 1, 1}));
    }
}

/// Backbone stand-in: a small conv stack that halves the resolution after
/// every block and emits one C-channel feature per pyramid scale, the first
/// at stride 4.
inline std::vector<Tensor> pyramid_stub(Tape& tape, Tensor image, const ParameterSet& params,
                                        const RunConfig& cfg) {
    const Shape is = image.shape();
    if (is.h % cfg.coarsest_stride() != 0 || is.w % cfg.coarsest_stride() != 0)
        throw std::invalid_argument("pyramid_stub: image " + is.str() +
                                    " is not divisible by the coarsest stride " +
                                    std::to_string(cfg.coarsest_stride()));
    const int groups = gn_groups_for(cfg.channels);
    std::vector<Tensor> pyramid;
    Tensor t = image;
    for (int k = 0; k <= cfg.head_scales; ++k) {
        const std::string id = std::to_string(k);
        t = conv2d(tape, t, params.get("stub.conv" + id + ".weight"),
                   params.get("stub.conv" + id + ".bias"), 1);
        t = group_norm(tape, t, groups, params.get("stub.gn" + id + ".gamma"),
                       params.get("stub.gn" + id + ".beta"), kGnEps);
        t = relu(tape, t);
        t = bilinear_resample(tape, t, ResampleDir::Down);
        if (k >= 1) pyramid.push_back(t);
    }
    return pyramid;
}

inline Model build_model(const RunConfig& cfg) {
    cfg.validate();
    Model m;
    m.graph = RoutingGraph::build(cfg.head_scales, cfg.head_depth, cfg.channels, cfg.enable_depth,
                                  cfg.enable_scale);
    m.head_cfg = head_config_from(cfg);
    Rng rng(substream_seed(cfg.seed, harness_detail::kInitTag));
    init_stub_params(m.params, cfg, rng);
    init_head_params(m.params, m.graph, m.head_cfg.gate, rng);
    init_pred_params(m.params, cfg.channels, cfg.logits_channels(), rng);
    return m;
}

struct ForwardResult {
    HeadResult head;
    Predictions preds;
    Tensor l_cls, l_reg, l_budget, l_total;
    std::vector<std::int64_t> per_sample_macs;
};

/// Full forward pass over a batch: stub, routing head, predictions, losses.
/// Non-finite loss components abort with a NumericError.
inline ForwardResult model_forward(Tape& tape, const Model& model, const ParameterSet& params,
                                   const BatchedScenes& batch, const RunConfig& cfg,
                                   bool with_loss = true) {
    ForwardResult fr;
    std::vector<Tensor> pyramid = pyramid_stub(tape, batch.image, params, cfg);
    fr.head = head_forward(tape, model.graph, pyramid, params, model.head_cfg);
    fr.preds = predict(tape, fr.head.outputs, params);
    fr.per_sample_macs = realized_macs(fr.head, cfg.channels, cfg.logits_channels(),
                                       model.head_cfg.gate_mode == GateMode::Learned);
    if (!with_loss) return fr;

    Tensor lc, lr;
    for (int s = 0; s < cfg.head_scales; ++s) {
        Tensor c_s =
            softmax_cross_entropy(tape, fr.preds.cls[s], batch.cls_targets[s], batch.cls_weights[s]);
        Tensor r_s = smooth_l1(tape, fr.preds.reg[s], batch.reg_targets[s], batch.reg_weights[s]);
        lc = lc ? add(tape, lc, c_s) : c_s;
        lr = lr ? add(tape, lr, r_s) : r_s;
    }
    fr.l_cls = scale(tape, lc, 1.0 / cfg.head_scales);
    fr.l_reg = scale(tape, lr, 1.0 / cfg.head_scales);
    fr.l_budget = budget_loss_from_head(tape, model.graph, fr.head);
    for (const auto& [value, name] :
         {std::pair{fr.l_cls.values()[0], "l_cls"}, std::pair{fr.l_reg.values()[0], "l_reg"},
          std::pair{fr.l_budget.values()[0], "l_budget"}}) {
        if (!std::isfinite(value))
            throw NumericError(std::string("model_forward: non-finite ") + name);
    }
    LossConfig lcfg;
    lcfg.lambda = cfg.lambda;
    lcfg.cls_weight = cfg.cls_weight;
    lcfg.reg_weight = cfg.reg_weight;
    fr.l_total = total_loss(tape, fr.l_cls, fr.l_reg, fr.l_budget, lcfg);
    if (!std::isfinite(fr.l_total.values()[0]))
        throw NumericError("model_forward: non-finite total loss");
    return fr;
}

struct IterationRecord {
    int iter = 0;
    double l_cls = 0, l_reg = 0, l_budget = 0, l_total = 0;
    double head_macs_avg = 0;
    double lr = 0;
};

struct TrainResult {
    std::vector<IterationRecord> history;
    std::string out_dir;
    std::string checkpoint_path;
    std::string metrics_path;
};

/// Step schedule mirroring the usual detection recipe: decade drops at 60%
/// and 80% of the run.
inline double lr_at(const RunConfig& cfg, int iter) {
    double lr = cfg.lr;
    if (iter >= cfg.iterations * 8 / 10) lr *= 0.01;
    else if (iter >= cfg.iterations * 6 / 10) lr *= 0.1;
    return lr;
}

namespace harness_detail {

inline void write_metrics_header(std::ofstream& os) {
    os << "iter,l_cls,l_reg,l_budget,l_total,head_macs_avg,lr\n";
}

inline void write_metrics_row(std::ofstream& os, const IterationRecord& r) {
    os << r.iter << "," << csv_double(r.l_cls) << "," << csv_double(r.l_reg) << ","
       << csv_double(r.l_budget) << "," << csv_double(r.l_total) << ","
       << csv_double(r.head_macs_avg) << "," << csv_double(r.lr) << "\n";
}

} // namespace harness_detail

/// Joint training over the synthetic task. Writes metrics.csv, the resolved
/// config and the final checkpoint into the output directory. On divergence
/// the last finite state is saved and a NumericError is thrown.
inline TrainResult train(const RunConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    TrainResult result;
    result.out_dir = cfg.resolved_out_dir();
    fs::create_directories(result.out_dir);
    result.checkpoint_path = result.out_dir + "/checkpoint.bin";
    result.metrics_path = result.out_dir + "/metrics.csv";

    Model model = build_model(cfg);
    const std::vector<SyntheticScene> dataset =
        gen_synthetic(substream_seed(cfg.seed, harness_detail::kTrainDataTag), cfg.train_scenes,
                      cfg);
    Rng batch_rng(substream_seed(cfg.seed, harness_detail::kBatchTag));

    {
        std::ofstream os(result.out_dir + "/config_resolved.txt");
        os << cfg.to_text();
    }
    std::ofstream metrics(result.metrics_path);
    harness_detail::write_metrics_header(metrics);

    const int B = cfg.batch;
    const int threads = harness_detail::effective_threads(cfg, B);
    ParameterSet last_finite = model.params.clone();

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        std::vector<const SyntheticScene*> picks(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b)
            picks[static_cast<std::size_t>(b)] =
                &dataset[static_cast<std::size_t>(batch_rng.uniform_int(dataset.size()))];

        std::vector<GradientMap> grads(static_cast<std::size_t>(B));
        std::vector<IterationRecord> recs(static_cast<std::size_t>(B));
        try {
            harness_detail::parallel_for(B, threads, [&](int b) {
                // Each sample runs on its own tape over its own parameter
                // clone; gradients are reduced afterwards in sample order.
                ParameterSet local = model.params.clone();
                BatchedScenes bs = stack_scenes({picks[static_cast<std::size_t>(b)]}, cfg);
                Tape tape;
                ForwardResult fr = model_forward(tape, model, local, bs, cfg);
                auto& r = recs[static_cast<std::size_t>(b)];
                r.l_cls = fr.l_cls.values()[0];
                r.l_reg = fr.l_reg.values()[0];
                r.l_budget = fr.l_budget.values()[0];
                r.l_total = fr.l_total.values()[0];
                r.head_macs_avg = static_cast<double>(fr.per_sample_macs[0]);
                grads[static_cast<std::size_t>(b)] = backward(tape, fr.l_total, local);
            });
        } catch (const NumericError&) {
            checkpoint::save(result.checkpoint_path, last_finite);
            metrics.flush();
            throw;
        }

        GradientMap total = std::move(grads[0]);
        for (int b = 1; b < B; ++b)
            for (auto& [name, g] : total) {
                const Tensor& src = grads[static_cast<std::size_t>(b)].at(name);
                double* dst = g.data();
                for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += src.values()[i];
            }
        const double inv_b = 1.0 / B;
        for (auto& [name, g] : total)
            for (double& v : g.values_mut()) v *= inv_b;

        IterationRecord rec;
        rec.iter = iter;
        rec.lr = lr_at(cfg, iter);
        for (const auto& r : recs) {
            rec.l_cls += r.l_cls * inv_b;
            rec.l_reg += r.l_reg * inv_b;
            rec.l_budget += r.l_budget * inv_b;
            rec.l_total += r.l_total * inv_b;
            rec.head_macs_avg += r.head_macs_avg * inv_b;
        }
        sgd_step(model.params, total, rec.lr, cfg.momentum, cfg.weight_decay);
        harness_detail::write_metrics_row(metrics, rec);
        result.history.push_back(rec);
        last_finite = model.params.clone();
    }

    checkpoint::save(result.checkpoint_path, model.params);
    metrics.close();
    return result;
}

struct EvalMetrics {
    double accuracy_all = 0.0;   // argmax over all classes, every cell
    double accuracy_fg = 0.0;    // argmax over object classes at foreground cells
    double reg_error = 0.0;      // mean |pred - target| at foreground cells
    double proxy = 0.0;          // mean over objects of P(true class) * IoU
    std::vector<double> gate_density_by_depth; // support fraction per router layer
    BudgetReport report;
};

namespace harness_detail {

struct SceneStats {
    double correct_all = 0, cells_all = 0;
    double correct_fg = 0, cells_fg = 0;
    double reg_abs = 0, reg_terms = 0;
    double proxy_sum = 0, objects = 0;
    std::vector<double> density_sum_by_depth, density_cnt_by_depth;
    std::vector<double> node_budgets; // per graph node, per-location units
    std::int64_t macs = 0;
    std::int64_t components = 0, component_cells = 0;
};

inline double iou(double ax0, double ay0, double ax1, double ay1, double bx0, double by0,
                  double bx1, double by1) {
    const double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = ix * iy;
    const double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline SceneStats evaluate_scene(const Model& model, const SyntheticScene& scene,
                                 const RunConfig& cfg) {
    SceneStats st;
    BatchedScenes bs = stack_scenes({&scene}, cfg);
    Tape tape;
    ForwardResult fr = model_forward(tape, model, model.params, bs, cfg, /*with_loss=*/false);
    st.macs = fr.per_sample_macs[0];

    const int K = cfg.logits_channels();
    for (int s = 0; s < cfg.head_scales; ++s) {
        const Tensor& logits = fr.preds.cls[s];
        const Tensor& reg = fr.preds.reg[s];
        const Shape ls = logits.shape();
        for (int y = 0; y < ls.h; ++y)
            for (int x = 0; x < ls.w; ++x) {
                const int target = static_cast<int>(scene.cls_targets[s].at(0, 0, y, x));
                int best_all = 0;
                for (int k = 1; k < K; ++k)
                    if (logits.at(0, k, y, x) > logits.at(0, best_all, y, x)) best_all = k;
                st.cells_all += 1.0;
                if (best_all == target) st.correct_all += 1.0;
                if (scene.reg_weights[s].at(0, 0, y, x) > 0.0) {
                    int best_fg = 1;
                    for (int k = 2; k < K; ++k)
                        if (logits.at(0, k, y, x) > logits.at(0, best_fg, y, x)) best_fg = k;
                    st.cells_fg += 1.0;
                    if (best_fg == target) st.correct_fg += 1.0;
                    for (int ch = 0; ch < 4; ++ch) {
                        st.reg_abs +=
                            std::abs(reg.at(0, ch, y, x) - scene.reg_targets[s].at(0, ch, y, x));
                        st.reg_terms += 1.0;
                    }
                }
            }
    }

    // detection proxy: class probability at the object's center cell times the
    // IoU of the decoded box
    for (const SceneObject& obj : scene.objects) {
        const int stride = cfg.stride_at(obj.level);
        const Tensor& logits = fr.preds.cls[obj.level];
        const Tensor& reg = fr.preds.reg[obj.level];
        const Shape ls = logits.shape();
        const int gx = std::min(ls.w - 1, static_cast<int>(obj.cx / stride));
        const int gy = std::min(ls.h - 1, static_cast<int>(obj.cy / stride));
        double mx = logits.at(0, 0, gy, gx);
        for (int k = 1; k < K; ++k) mx = std::max(mx, logits.at(0, k, gy, gx));
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(logits.at(0, k, gy, gx) - mx);
        const double p_true = std::exp(logits.at(0, obj.class_id, gy, gx) - mx) / z;

        const double px = (gx + 0.5) * stride, py = (gy + 0.5) * stride;
        const double norm = stride * synth_detail::kRegNorm;
        const double l = std::max(0.0, reg.at(0, 0, gy, gx)) * norm;
        const double t = std::max(0.0, reg.at(0, 1, gy, gx)) * norm;
        const double r = std::max(0.0, reg.at(0, 2, gy, gx)) * norm;
        const double b = std::max(0.0, reg.at(0, 3, gy, gx)) * norm;
        const double v = iou(px - l, py - t, px + r, py + b, obj.cx - obj.size / 2.0,
                             obj.cy - obj.size / 2.0, obj.cx + obj.size / 2.0,
                             obj.cy + obj.size / 2.0);
        st.proxy_sum += p_true * v;
        st.objects += 1.0;
    }

    // gate support density per router layer and per-node realized budgets
    st.density_sum_by_depth.assign(static_cast<std::size_t>(cfg.head_depth), 0.0);
    st.density_cnt_by_depth.assign(static_cast<std::size_t>(cfg.head_depth), 0.0);
    auto grouped = group_paths_by_node(fr.head);
    st.node_budgets.assign(model.graph.nodes.size(), 0.0);
    for (std::size_t ni = 0; ni < model.graph.nodes.size(); ++ni) {
        const RouterNode& node = model.graph.nodes[ni];
        auto it = grouped.find({node.depth, node.scale});
        const std::size_t expected_paths = node.paths.size();
        if (it == grouped.end()) {
            // router never executed: all its gates count as fully closed
            st.density_cnt_by_depth[static_cast<std::size_t>(node.depth)] +=
                static_cast<double>(expected_paths);
            continue;
        }
        double budget_macs = 0.0;
        for (const RouterPathOutput* p : it->second) {
            double support = 0.0;
            for (double v : p->gate.values.values())
                if (v > 0.0) support += 1.0;
            st.density_sum_by_depth[static_cast<std::size_t>(node.depth)] +=
                support / static_cast<double>(p->gate.values.numel());
            st.density_cnt_by_depth[static_cast<std::size_t>(node.depth)] += 1.0;
            budget_macs += static_cast<double>(p->cost_per_location * p->mask.enabled());
            const ComponentStats cs = mask_component_stats(p->mask);
            st.components += cs.components;
            st.component_cells += cs.enabled;
        }
        st.node_budgets[ni] =
            budget_macs / static_cast<double>(model.graph.nodes[ni].paths.empty()
                                                  ? 1
                                                  : it->second[0]->node_locations);
    }
    return st;
}

} // namespace harness_detail

/// Deterministic evaluation over the eval split; also assembles the
/// BudgetReport used by the FLOPs reporting.
inline EvalMetrics eval_model(const Model& model, const RunConfig& cfg) {
    cfg.validate();
    const std::vector<SyntheticScene> dataset =
        gen_synthetic(substream_seed(cfg.seed, harness_detail::kEvalDataTag), cfg.eval_scenes, cfg);
    const int n = static_cast<int>(dataset.size());
    std::vector<harness_detail::SceneStats> stats(static_cast<std::size_t>(n));
    harness_detail::parallel_for(n, harness_detail::effective_threads(cfg, n), [&](int i) {
        stats[static_cast<std::size_t>(i)] =
            harness_detail::evaluate_scene(model, dataset[static_cast<std::size_t>(i)], cfg);
    });

    EvalMetrics em;
    for (const RouterNode& node : model.graph.nodes)
        em.report.node_order.push_back({node.depth, node.scale});
    // node_order must align with graph.nodes ordering used in SceneStats
    double call = 0, lall = 0, cfg_ = 0, lfg = 0, rabs = 0, rterms = 0, psum = 0, pobj = 0;
    std::vector<double> dsum(static_cast<std::size_t>(cfg.head_depth), 0.0);
    std::vector<double> dcnt(static_cast<std::size_t>(cfg.head_depth), 0.0);
    std::int64_t comps = 0, comp_cells = 0;
    for (const auto& st : stats) {
        call += st.correct_all;
        lall += st.cells_all;
        cfg_ += st.correct_fg;
        lfg += st.cells_fg;
        rabs += st.reg_abs;
        rterms += st.reg_terms;
        psum += st.proxy_sum;
        pobj += st.objects;
        for (std::size_t d = 0; d < dsum.size(); ++d) {
            dsum[d] += st.density_sum_by_depth[d];
            dcnt[d] += st.density_cnt_by_depth[d];
        }
        em.report.per_sample_macs.push_back(st.macs);
        em.report.per_sample_node_budgets.push_back(st.node_budgets);
        comps += st.components;
        comp_cells += st.component_cells;
    }
    em.accuracy_all = lall > 0 ? call / lall : 0.0;
    em.accuracy_fg = lfg > 0 ? cfg_ / lfg : 0.0;
    em.reg_error = rterms > 0 ? rabs / rterms : 0.0;
    em.proxy = pobj > 0 ? psum / pobj : 0.0;
    for (std::size_t d = 0; d < dsum.size(); ++d)
        em.gate_density_by_depth.push_back(dcnt[d] > 0 ? dsum[d] / dcnt[d] : 0.0);
    em.report.components_mean = n > 0 ? static_cast<double>(comps) / n : 0.0;
    em.report.component_area_mean =
        comps > 0 ? static_cast<double>(comp_cells) / static_cast<double>(comps) : 0.0;
    return em;
}

inline void write_eval_csv(const std::string& path, const EvalMetrics& em) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("eval: cannot open '" + path + "' for writing");
    os << "accuracy_all,accuracy_fg,reg_error,proxy,macs_avg,macs_max,macs_min";
    for (std::size_t d = 0; d < em.gate_density_by_depth.size(); ++d)
        os << ",gate_density_d" << d;
    os << "\n";
    os << csv_double(em.accuracy_all) << "," << csv_double(em.accuracy_fg) << ","
       << csv_double(em.reg_error) << "," << csv_double(em.proxy) << ","
       << csv_double(em.report.macs_avg()) << "," << em.report.macs_max() << ","
       << em.report.macs_min();
    for (double d : em.gate_density_by_depth) os << "," << csv_double(d);
    os << "\n";
}

/// budget_report.csv: one row per eval sample (head MACs plus per-node
/// realized budgets), then avg/max/min summary rows.
inline void write_budget_csv(const std::string& path, const BudgetReport& report) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("flops-report: cannot open '" + path + "' for writing");
    os << "sample_id,head_macs";
    for (const auto& key : report.node_order) os << ",b_d" << key.depth << "_s" << key.scale;
    os << "\n";
    for (std::size_t i = 0; i < report.per_sample_macs.size(); ++i) {
        os << i << "," << report.per_sample_macs[i];
        for (double b : report.per_sample_node_budgets[i]) os << "," << csv_double(b);
        os << "\n";
    }
    const std::size_t n = report.per_sample_macs.size();
    std::vector<double> avg(report.node_order.size(), 0.0);
    std::vector<double> mx(report.node_order.size(), -1e300);
    std::vector<double> mn(report.node_order.size(), 1e300);
    for (const auto& row : report.per_sample_node_budgets)
        for (std::size_t j = 0; j < row.size(); ++j) {
            avg[j] += row[j] / static_cast<double>(n);
            mx[j] = std::max(mx[j], row[j]);
            mn[j] = std::min(mn[j], row[j]);
        }
    os << "avg," << csv_double(report.macs_avg());
    for (double v : avg) os << "," << csv_double(v);
    os << "\nmax," << report.macs_max();
    for (double v : mx) os << "," << csv_double(n ? v : 0.0);
    os << "\nmin," << report.macs_min();
    for (double v : mn) os << "," << csv_double(n ? v : 0.0);
    os << "\n";
}

inline BudgetReport flops_report(const Model& model, const RunConfig& cfg,
                                 const std::string& out_path) {
    EvalMetrics em = eval_model(model, cfg);
    write_budget_csv(out_path, em.report);
    return em.report;
}

struct HeatmapEntry {
    std::string file;
    int scale = 0, depth = 0, path = 0;
    std::string kind;
    int height = 0, width = 0;
    double density = 0.0;
};

/// One PGM per (scale, depth, path) for a single eval scene, plus an index
/// manifest and a full-precision CSV of the raw gate values.
inline std::vector<HeatmapEntry> export_gate_heatmaps(const Model& model, const RunConfig& cfg,
                                                      int scene_index, const std::string& dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    const std::vector<SyntheticScene> dataset =
        gen_synthetic(substream_seed(cfg.seed, harness_detail::kEvalDataTag), cfg.eval_scenes, cfg);
    if (scene_index < 0 || scene_index >= static_cast<int>(dataset.size()))
        throw ConfigError("export-gates: scene index " + std::to_string(scene_index) +
                          " out of range [0," + std::to_string(dataset.size()) + ")");
    fs::create_directories(dir);

    BatchedScenes bs = stack_scenes({&dataset[static_cast<std::size_t>(scene_index)]}, cfg);
    Tape tape;
    ForwardResult fr = model_forward(tape, model, model.params, bs, cfg, /*with_loss=*/false);

    auto grouped = group_paths_by_node(fr.head);
    std::vector<HeatmapEntry> entries;
    std::ofstream gates_csv(dir + "/gates.csv");
    gates_csv << "scale,depth,path,y,x,value\n";
    for (const RouterNode& node : model.graph.nodes) {
        auto it = grouped.find({node.depth, node.scale});
        for (std::size_t k = 0; k < node.paths.size(); ++k) {
            const int h = cfg.image_size / cfg.stride_at(node.scale);
            Tensor map = Tensor::zeros({1, 1, h, h}); // routers gated off upstream stay black
            if (it != grouped.end()) map = it->second[k]->gate.values;
            HeatmapEntry e;
            e.scale = node.scale;
            e.depth = node.depth;
            e.path = static_cast<int>(k);
            e.kind = path_kind_name(node.paths[k].kind);
            e.height = map.shape().h;
            e.width = map.shape().w;
            double support = 0.0;
            for (double v : map.values())
                if (v > 0.0) support += 1.0;
            e.density = support / static_cast<double>(map.numel());
            e.file = "gate_s" + std::to_string(node.scale) + "_d" + std::to_string(node.depth) +
                     "_" + e.kind + ".pgm";
            write_pgm(dir + "/" + e.file, map);
            for (int y = 0; y < e.height; ++y)
                for (int x = 0; x < e.width; ++x)
                    gates_csv << node.scale << "," << node.depth << "," << k << "," << y << ","
                              << x << "," << csv_double(map.at(0, 0, y, x)) << "\n";
            entries.push_back(std::move(e));
        }
    }
    std::ofstream index_csv(dir + "/index.csv");
    index_csv << "file,scale,depth,path,kind,height,width,density\n";
    for (const HeatmapEntry& e : entries)
        index_csv << e.file << "," << e.scale << "," << e.depth << "," << e.path << "," << e.kind
                  << "," << e.height << "," << e.width << "," << csv_double(e.density) << "\n";
    return entries;
}

struct SweepRow {
    double lambda = 0, tau = 0;
    double l_cls = 0, l_reg = 0, l_budget = 0;
    double macs_avg = 0;
    std::int64_t macs_max = 0, macs_min = 0;
    double flops_avg = 0; // 2 * MACs
    double proxy = 0, accuracy_fg = 0;
    std::string run_dir;
};

/// Cartesian sweep over loss.lambda and gate.tau. Each cell trains, evaluates
/// and reports into its own subdirectory; the summary lands at the sweep root.
inline std::vector<SweepRow> sweep(const RunConfig& base) {
    base.validate();
    namespace fs = std::filesystem;
    const std::string root = base.resolved_out_dir();
    fs::create_directories(root);
    std::vector<SweepRow> rows;
    for (double tau : base.sweep_taus) {
        for (double lam : base.sweep_lambdas) {
            RunConfig cfg = base;
            cfg.lambda = lam;
            cfg.tau = tau;
            cfg.out_dir = root + "/sweep/lam" + harness_detail::short_double(lam) + "_tau" +
                          harness_detail::short_double(tau);
            TrainResult tr = train(cfg);
            Model model = build_model(cfg);
            checkpoint::restore_into(model.params, checkpoint::load(tr.checkpoint_path));
            EvalMetrics em = eval_model(model, cfg);
            write_eval_csv(cfg.out_dir + "/eval_metrics.csv", em);
            write_budget_csv(cfg.out_dir + "/budget_report.csv", em.report);

            SweepRow row;
            row.lambda = lam;
            row.tau = tau;
            if (!tr.history.empty()) {
                row.l_cls = tr.history.back().l_cls;
                row.l_reg = tr.history.back().l_reg;
                row.l_budget = tr.history.back().l_budget;
            }
            row.macs_avg = em.report.macs_avg();
            row.macs_max = em.report.macs_max();
            row.macs_min = em.report.macs_min();
            row.flops_avg = 2.0 * row.macs_avg;
            row.proxy = em.proxy;
            row.accuracy_fg = em.accuracy_fg;
            row.run_dir = cfg.out_dir;
            rows.push_back(row);
        }
    }
    std::ofstream os(root + "/sweep_summary.csv");
    os << "lambda,tau,l_cls,l_reg,l_budget,macs_avg,macs_max,macs_min,flops_avg,proxy,"
          "accuracy_fg,run_dir\n";
    for (const SweepRow& r : rows)
        os << csv_double(r.lambda) << "," << csv_double(r.tau) << "," << csv_double(r.l_cls) << ","
           << csv_double(r.l_reg) << "," << csv_double(r.l_budget) << ","
           << csv_double(r.macs_avg) << "," << r.macs_max << "," << r.macs_min << ","
           << csv_double(r.flops_avg) << "," << csv_double(r.proxy) << ","
           << csv_double(r.accuracy_fg) << "," << r.run_dir << "\n";
    return rows;
}

} // namespace dynhead
