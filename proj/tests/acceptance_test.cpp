// Acceptance suite: ten criteria, each printed as one pass/fail line. The
// training-based criteria share one fixed-seed set of desk-scale runs (the
// lambda sweep) built on first use.
#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dynhead/harness.hpp"
#include "oracles.hpp"

using namespace dynhead;
namespace fs = std::filesystem;

namespace {

double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void report(int criterion, const std::string& name, bool pass) {
    std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, name.c_str());
    std::fflush(stdout);
}

std::string acceptance_root() {
    static std::string root = [] {
        const fs::path p = fs::temp_directory_path() / "dynhead_acceptance";
        fs::remove_all(p);
        fs::create_directories(p);
        return p.string();
    }();
    return root;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Desk-scale defaults: 64x64 images, 3 scales (strides 4/8/16), C=32, D=2,
/// 2000 iterations, batch 4.
RunConfig desk_config(double lambda) {
    RunConfig cfg;
    cfg.seed = 7;
    cfg.lambda = lambda;
    cfg.out_dir = acceptance_root() + "/lam" + harness_detail::short_double(lambda);
    return cfg;
}

/// The shared fixed-seed sweep over lambda in {0, 0.1, 0.4, 0.8, 1.6}.
struct SweepRuns {
    struct Entry {
        double lambda = 0;
        TrainResult tr;
        EvalMetrics em;
        double train_seconds = 0;
    };
    std::vector<Entry> entries;
    double total_seconds = 0;

    static const SweepRuns& get() {
        static SweepRuns runs = build();
        return runs;
    }

    const Entry& at_lambda(double lambda) const {
        for (const Entry& e : entries)
            if (e.lambda == lambda) return e;
        throw std::logic_error("missing sweep entry");
    }

private:
    static SweepRuns build() {
        SweepRuns runs;
        const double start = now_seconds();
        for (double lambda : {0.0, 0.1, 0.4, 0.8, 1.6}) {
            Entry e;
            e.lambda = lambda;
            RunConfig cfg = desk_config(lambda);
            const double t0 = now_seconds();
            e.tr = train(cfg);
            e.train_seconds = now_seconds() - t0;
            Model model = build_model(cfg);
            checkpoint::restore_into(model.params, checkpoint::load(e.tr.checkpoint_path));
            e.em = eval_model(model, cfg);
            std::printf("  sweep: lambda=%g trained in %.0fs, final FLOPs_avg=%.0f\n", lambda,
                        e.train_seconds, 2.0 * e.em.report.macs_avg());
            std::fflush(stdout);
            runs.entries.push_back(std::move(e));
        }
        runs.total_seconds = now_seconds() - start;
        return runs;
    }
};

} // namespace

TEST(Acceptance, C01_GateActivationSuite) {
    const double t0 = now_seconds();
    bool ok = true;

    for (double tau : {0.0, 0.5, 1.0, 1.5, 2.0}) {
        for (int i = 0; i <= 600; ++i) {
            const double v = -6.0 + 12.0 * i / 600.0;
            const double d = gate_activation_value(v, tau);
            if (v <= 0.0 && d != 0.0) ok = false;
            if (d < 0.0 || d > 1.0) ok = false;
        }
    }
    for (int i = 0; i <= 1000; ++i) {
        const double v = -8.0 + 16.0 * i / 1000.0;
        if (std::abs(gate_activation_value(v, 0.0) - std::max(0.0, std::tanh(v))) > 1e-12)
            ok = false;
    }
    for (double tau : {0.5, 1.0, 1.5, 2.0}) {
        const double expected = 1.0 - std::tanh(tau);
        const double closed = gate_activation_grad_value(1e-12, tau);
        const double h = 1e-7;
        const double fd = (gate_activation_value(h, tau) - gate_activation_value(0.0, tau)) / h;
        if (std::abs(closed - expected) > 1e-6 || std::abs(fd - expected) > 1e-6) ok = false;
    }
    const double elapsed = now_seconds() - t0;
    if (elapsed >= 1.0) ok = false;
    report(1, "gate activation suite (dead zone, range, tau=0 reduction, 0+ derivative), " +
                  std::to_string(elapsed) + "s",
           ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C02_SparseConvOracle) {
    const double t0 = now_seconds();
    Rng rng(1002);
    double worst = 0.0;
    bool counts_ok = true;
    for (int trial = 0; trial < 200; ++trial) {
        const int c = 2 * (1 + static_cast<int>(rng.uniform_int(4)));
        const int groups = trial % 2 == 0 ? 1 : c;
        const int h = 4 + static_cast<int>(rng.uniform_int(6));
        const int w = 4 + static_cast<int>(rng.uniform_int(6));
        Tensor x = rng.tensor_uniform({1, c, h, w}, -1.0, 1.0);
        Tensor wt = rng.tensor_uniform({c, c / groups, 3, 3}, -1.0, 1.0);
        Tensor bias = trial % 3 == 0 ? rng.tensor_uniform({1, c, 1, 1}, -1.0, 1.0) : Tensor{};
        Tensor mv = Tensor::zeros({1, 1, h, w});
        const double density = rng.uniform();
        for (auto& v : mv.values_mut()) v = rng.uniform() < density ? 1.0 : 0.0;
        SpatialMask mask{mv};

        Tape tape;
        Tensor sparse = sparse_conv2d(tape, x, wt, bias, groups, mask);
        Tensor dense = oracles::conv2d_reference(x, wt, bias, groups);
        for (int oc = 0; oc < c; ++oc)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    worst = std::max(worst, std::abs(sparse.at(0, oc, y, xx) -
                                                     dense.at(0, oc, y, xx) *
                                                         mv.at(0, 0, y, xx)));

        // cost ratio equals mask density as exact integers
        const std::int64_t sparse_macs = count_sparse_macs(wt.shape(), groups, mask);
        SpatialMask full{Tensor::filled({1, 1, h, w}, 1.0)};
        const std::int64_t dense_macs = count_sparse_macs(wt.shape(), groups, full);
        if (sparse_macs * (static_cast<std::int64_t>(h) * w) != dense_macs * mask.enabled())
            counts_ok = false;
    }
    const double elapsed = now_seconds() - t0;
    const bool ok = worst < 1e-12 && counts_ok && elapsed < 30.0;
    std::ostringstream name;
    name << "sparse conv vs dense-mask oracle over 200 cases (max err " << worst << ", "
         << elapsed << "s)";
    report(2, name.str(), ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C03_GradientSuite) {
    const double t0 = now_seconds();
    Rng rng(1003);
    double worst = 0.0;

    auto check = [&worst](const std::function<Tensor(Tape&)>& build, std::vector<Tensor> leaves,
                          int stride_hint) {
        Tape tape;
        Tensor loss = build(tape);
        tape.backward(loss);
        std::vector<std::vector<double>> analytic;
        for (Tensor& t : leaves) analytic.push_back(t.grad());
        auto forward = [&]() {
            Tape t2;
            return build(t2).values()[0];
        };
        for (std::size_t li = 0; li < leaves.size(); ++li)
            for (std::int64_t i = 0; i < leaves[li].numel(); i += stride_hint) {
                const double num = oracles::finite_diff(forward, leaves[li], i);
                worst = std::max(worst, oracles::rel_err(analytic[li][i], num));
            }
    };

    // every operation, composed with a reduction to a scalar
    {
        Tensor x = rng.tensor_uniform({1, 4, 5, 5}, -1.0, 1.0);
        Tensor w = rng.tensor_uniform({4, 2, 3, 3}, -0.5, 0.5);
        Tensor b = rng.tensor_uniform({1, 4, 1, 1}, -0.5, 0.5);
        check([&](Tape& t) { return sum_all(t, relu(t, conv2d(t, x, w, b, 2))); }, {x, w, b}, 3);
    }
    {
        Tensor x = rng.tensor_uniform({1, 4, 5, 5}, -1.0, 1.0);
        Tensor w = rng.tensor_uniform({4, 4, 3, 3}, -0.5, 0.5);
        Tensor mv = Tensor::zeros({1, 1, 5, 5});
        for (auto& v : mv.values_mut()) v = rng.uniform() < 0.6 ? 1.0 : 0.0;
        SpatialMask mask{mv};
        check([&](Tape& t) { return sum_all(t, sparse_conv2d(t, x, w, {}, 1, mask)); }, {x, w}, 5);
    }
    {
        Tensor x = rng.tensor_uniform({2, 4, 3, 3}, -1.0, 1.0);
        Tensor g = rng.tensor_uniform({1, 4, 1, 1}, 0.5, 1.5);
        Tensor be = rng.tensor_uniform({1, 4, 1, 1}, -0.5, 0.5);
        check([&](Tape& t) { return sum_all(t, relu(t, group_norm(t, x, 2, g, be, 1e-3))); },
              {x, g, be}, 3);
    }
    {
        Tensor x = rng.tensor_uniform({1, 2, 4, 4}, -1.0, 1.0);
        check([&](Tape& t) { return sum_all(t, bilinear_resample(t, x, ResampleDir::Up)); }, {x},
              2);
        check([&](Tape& t) { return sum_all(t, bilinear_resample(t, x, ResampleDir::Down)); }, {x},
              2);
        check([&](Tape& t) { return sum_all(t, add(t, relu(t, x), x)); }, {x}, 2);
        Tensor m = rng.tensor_uniform({1, 1, 4, 4}, 0.1, 0.9);
        check([&](Tape& t) { return sum_all(t, mul_map(t, x, m)); }, {x, m}, 2);
        check([&](Tape& t) { return sum_all(t, global_avg_pool(t, x)); }, {x}, 2);
        check([&](Tape& t) { return scale(t, sum_all(t, max_pool_3x3_stride1(t, x, 2)), 0.5); },
              {x}, 2);
        GateActivationConfig gcfg{1.5};
        Tensor v = rng.tensor_uniform({1, 1, 4, 4}, 0.1, 3.0);
        check([&](Tape& t) { return sum_all(t, gate_activation(t, v, gcfg)); }, {v}, 1);
    }
    {
        Tensor logits = rng.tensor_uniform({1, 3, 3, 3}, -1.0, 1.0);
        Tensor targets = Tensor::zeros({1, 1, 3, 3});
        for (int i = 0; i < 9; ++i) targets.values_mut()[i] = i % 3;
        Tensor weights = Tensor::filled({1, 1, 3, 3}, 0.7);
        check([&](Tape& t) { return softmax_cross_entropy(t, logits, targets, weights); },
              {logits}, 2);
        Tensor pred = rng.tensor_uniform({1, 4, 3, 3}, -2.0, 2.0);
        Tensor target = rng.tensor_uniform({1, 4, 3, 3}, -2.0, 2.0);
        check([&](Tape& t) { return smooth_l1(t, pred, target, weights); }, {pred}, 3);
    }

    // end-to-end: D=2, 2-scale head through gating, weighted outputs, budget
    // and the joint loss
    RunConfig cfg;
    cfg.seed = 1003;
    cfg.head_scales = 2;
    cfg.channels = 4;
    cfg.image_size = 32;
    cfg.size_min = 2.0;
    cfg.size_max = 16.0;
    cfg.lambda = 0.6;
    Model model = build_model(cfg);
    const SyntheticScene scene = gen_scene(77, 0, cfg);
    BatchedScenes bs = stack_scenes({&scene}, cfg);
    auto build_e2e = [&](Tape& t) {
        ForwardResult fr = model_forward(t, model, model.params, bs, cfg);
        return fr.l_total;
    };

    // verify every gate sits away from the activation kink
    {
        Tape t;
        ForwardResult fr = model_forward(t, model, model.params, bs, cfg);
        const double margin_value = gate_activation_value(0.05, cfg.tau);
        for (const RouterPathOutput& p : fr.head.paths)
            for (double m : p.gate.values.values()) ASSERT_GE(m, margin_value);
    }
    {
        Tape t;
        Tensor loss = build_e2e(t);
        t.backward(loss);
        std::vector<std::pair<Tensor, std::int64_t>> coords;
        std::vector<Tensor> all;
        for (auto& [name, p] : model.params.entries()) all.push_back(p);
        Rng pick(4242);
        for (int i = 0; i < 50; ++i) {
            Tensor p = all[static_cast<std::size_t>(pick.uniform_int(all.size()))];
            coords.push_back({p, pick.uniform_int(p.numel())});
        }
        auto forward = [&]() {
            Tape t2;
            return build_e2e(t2).values()[0];
        };
        for (auto& [p, idx] : coords) {
            const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
            const double num = oracles::finite_diff(forward, p, idx);
            worst = std::max(worst, oracles::rel_err(analytic, num));
        }
    }

    const double elapsed = now_seconds() - t0;
    const bool ok = worst < 1e-4 && elapsed < 120.0;
    std::ostringstream name;
    name << "gradient suite per-op + end-to-end 50 points (max rel err " << worst << ", "
         << elapsed << "s)";
    report(3, name.str(), ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C04_BudgetBounds) {
    bool ok = true;
    Rng rng(1004);
    // random gate states in [0,1]
    for (int trial = 0; trial < 100; ++trial) {
        Tape tape;
        std::vector<std::vector<RouterPathOutput>> storage;
        std::vector<Tensor> budgets;
        std::vector<std::int64_t> costs;
        const int nodes = 1 + static_cast<int>(rng.uniform_int(4));
        storage.resize(static_cast<std::size_t>(nodes));
        for (int l = 0; l < nodes; ++l) {
            const int K = 1 + static_cast<int>(rng.uniform_int(3));
            std::int64_t cl = 0;
            for (int k = 0; k < K; ++k) {
                Tensor m = rng.tensor_uniform({1, 1, 8, 8}, 0.0, 1.0);
                RouterPathOutput p;
                p.gate = GatingMap{m};
                p.dilated = m;
                p.mask = quantize_mask(m, l, 0, k);
                p.cost_per_location = 9 * (1 + rng.uniform_int(30));
                p.node_locations = 64;
                cl += p.cost_per_location;
                storage[static_cast<std::size_t>(l)].push_back(std::move(p));
            }
            costs.push_back(cl);
            std::vector<const RouterPathOutput*> ptrs;
            for (auto& s : storage[static_cast<std::size_t>(l)]) ptrs.push_back(&s);
            budgets.push_back(node_budget(tape, ptrs));
        }
        const double lb = budget_loss(tape, budgets, costs).values()[0];
        if (lb < 0.0 || lb > 1.0) ok = false;
    }

    // exactly 1 with all gates open, exactly 0 with all closed (pow-2 dims)
    {
        Tape tape;
        std::vector<RouterPathOutput> open_paths, closed_paths;
        std::vector<std::int64_t> costs;
        std::int64_t cl = 0;
        for (int k = 0; k < 3; ++k) {
            RouterPathOutput p;
            Tensor ones = Tensor::filled({2, 1, 16, 16}, 1.0);
            p.gate = GatingMap{ones};
            p.dilated = ones;
            p.mask = quantize_mask(ones);
            p.cost_per_location = k == 0 ? 18432 : 288;
            p.node_locations = 256;
            cl += p.cost_per_location;
            open_paths.push_back(p);
            RouterPathOutput q = p;
            Tensor zeros = Tensor::zeros({2, 1, 16, 16});
            q.gate = GatingMap{zeros};
            q.dilated = zeros;
            q.mask = quantize_mask(zeros);
            closed_paths.push_back(q);
        }
        costs.push_back(cl);
        std::vector<const RouterPathOutput*> optr, cptr;
        for (auto& p : open_paths) optr.push_back(&p);
        for (auto& q : closed_paths) cptr.push_back(&q);
        if (budget_loss(tape, {node_budget(tape, optr)}, costs).values()[0] != 1.0) ok = false;
        if (budget_loss(tape, {node_budget(tape, cptr)}, costs).values()[0] != 0.0) ok = false;
    }

    // quantized node budget equals instrumented realized MACs exactly
    {
        RunConfig cfg;
        cfg.seed = 1044;
        cfg.channels = 8;
        cfg.image_size = 32;
        cfg.size_min = 2.0;
        cfg.size_max = 16.0;
        Model model = build_model(cfg);
        for (auto& [name, t] : model.params.entries())
            if (name.find(".gate.") != std::string::npos &&
                name.find(".bias") != std::string::npos)
                t.fill(1.7); // partially open gates
        const SyntheticScene scene = gen_scene(5, 0, cfg);
        BatchedScenes bs = stack_scenes({&scene}, cfg);
        Tape tape;
        ForwardResult fr = model_forward(tape, model, model.params, bs, cfg, false);
        Rng wrng(9);
        for (const auto& [key, paths] : group_paths_by_node(fr.head)) {
            std::int64_t instrumented = 0;
            for (const RouterPathOutput* p : paths) {
                const int groups = p->kind == PathKind::Depth ? 1 : cfg.channels;
                const int layers = p->kind == PathKind::Depth ? 2 : 1;
                const Shape ms = p->mask.values.shape();
                Tensor x = wrng.tensor_uniform({ms.n, cfg.channels, ms.h, ms.w}, -1.0, 1.0);
                Tensor w = wrng.tensor_uniform({cfg.channels, cfg.channels / groups, 3, 3}, -1.0,
                                               1.0);
                for (int layer = 0; layer < layers; ++layer)
                    oracles::sparse_conv2d_instrumented(x, w, {}, groups, p->mask.values,
                                                        &instrumented);
            }
            if (node_quantized_macs(paths) != instrumented) ok = false;
        }
    }
    report(4, "budget bounds in [0,1], exact endpoints, quantized-budget == realized MACs", ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C05_DilationCorrectness) {
    Rng rng(1005);
    bool ok = true;
    for (int d = 1; d <= 3; ++d) {
        for (int trial = 0; trial < 10; ++trial) {
            Tensor g = rng.tensor_uniform({2, 1, 11, 11}, 0.0, 1.0);
            Tape tape;
            Tensor dilated = dilate_mask(tape, GatingMap{g}, d);
            if (oracles::max_abs_diff(dilated, oracles::window_max_reference(g, d)) != 0.0)
                ok = false;
        }
    }
    report(5, "dilate_mask equals brute-force (2d+1)^2 window max for d in {1,2,3}", ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C06_GeneralizationOfStatic) {
    RunConfig cfg;
    cfg.seed = 1006;
    cfg.channels = 8;
    cfg.image_size = 64;
    Model model = build_model(cfg);
    // saturate the learned gates so the activation emits exactly 1
    for (auto& [name, t] : model.params.entries()) {
        if (name.find(".gate.") != std::string::npos) {
            if (name.find(".bias") != std::string::npos) t.fill(30.0);
            if (name.find(".weight") != std::string::npos) t.fill(0.0);
        }
    }
    const SyntheticScene scene = gen_scene(6, 0, cfg);
    BatchedScenes bs = stack_scenes({&scene}, cfg);
    Tape t1;
    ForwardResult dynamic = model_forward(t1, model, model.params, bs, cfg, false);

    RunConfig forced = cfg;
    forced.gate_force = "open";
    Model static_model;
    static_model.graph = model.graph;
    static_model.head_cfg = head_config_from(forced);
    static_model.params = model.params; // same parameters
    Tape t2;
    ForwardResult fixed = model_forward(t2, static_model, static_model.params, bs, forced, false);

    bool ok = dynamic.head.outputs.size() == fixed.head.outputs.size();
    for (std::size_t s = 0; ok && s < dynamic.head.outputs.size(); ++s) {
        const auto& a = dynamic.head.outputs[s];
        const auto& b = fixed.head.outputs[s];
        for (std::int64_t i = 0; i < a.numel(); ++i)
            if (a.values()[i] != b.values()[i]) {
                ok = false;
                break;
            }
    }
    report(6, "all gates at 1: head outputs bitwise equal to the static head", ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C07_LambdaTrend) {
    const SweepRuns& runs = SweepRuns::get();
    std::vector<double> lambdas, flops;
    for (const auto& e : runs.entries) {
        lambdas.push_back(e.lambda);
        flops.push_back(2.0 * e.em.report.macs_avg());
    }
    const double rho = oracles::spearman(flops, lambdas);
    const bool ok = rho <= -0.8 && runs.total_seconds < 1800.0;
    std::ostringstream name;
    name << "lambda sweep {0,0.1,0.4,0.8,1.6}: Spearman(FLOPs_avg, lambda) = " << rho << " ("
         << runs.total_seconds << "s total)";
    report(7, name.str(), ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C08_DepthSparsification) {
    const auto& e = SweepRuns::get().at_lambda(0.4);
    const std::vector<double>& density = e.em.gate_density_by_depth;
    const bool ok = density.size() >= 2 && density.back() <= density.front();
    std::ostringstream name;
    name << "trained lambda=0.4: mean gate density depth-last " << density.back()
         << " <= depth-first " << density.front();
    report(8, name.str(), ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C09_Reproducibility) {
    RunConfig a;
    a.seed = 909;
    a.channels = 16;
    a.iterations = 40;
    a.batch = 2;
    a.train_scenes = 8;
    a.eval_scenes = 4;
    a.out_dir = acceptance_root() + "/repro_a";
    RunConfig b = a;
    b.out_dir = acceptance_root() + "/repro_b";

    TrainResult ta = train(a);
    TrainResult tb = train(b);
    Model ma = build_model(a);
    checkpoint::restore_into(ma.params, checkpoint::load(ta.checkpoint_path));
    Model mb = build_model(b);
    checkpoint::restore_into(mb.params, checkpoint::load(tb.checkpoint_path));
    export_gate_heatmaps(ma, a, 0, a.out_dir + "/heatmaps");
    export_gate_heatmaps(mb, b, 0, b.out_dir + "/heatmaps");

    bool ok = read_file(ta.metrics_path) == read_file(tb.metrics_path);
    ok = ok && !read_file(ta.metrics_path).empty();
    ok = ok && read_file(ta.checkpoint_path) == read_file(tb.checkpoint_path);
    int compared = 0;
    for (const auto& entry : fs::directory_iterator(a.out_dir + "/heatmaps")) {
        const std::string fname = entry.path().filename().string();
        if (read_file(entry.path().string()) != read_file(b.out_dir + "/heatmaps/" + fname))
            ok = false;
        ++compared;
    }
    ok = ok && compared > 0;
    report(9, "identical RunConfig: metrics, checkpoint and heatmap files byte-identical", ok);
    ASSERT_TRUE(ok);
}

TEST(Acceptance, C10_TrainingSanity) {
    const auto& e = SweepRuns::get().at_lambda(0.0);
    const auto& hist = e.tr.history;
    ASSERT_GE(hist.size(), 11u);
    const double early = hist[10].l_cls + hist[10].l_reg;
    const double late = hist.back().l_cls + hist.back().l_reg;
    const bool ok = late <= 0.5 * early && e.train_seconds < 600.0;
    std::ostringstream name;
    name << "lambda=0 desk run: L_cls+L_reg " << early << " -> " << late << " ("
         << e.train_seconds << "s)";
    report(10, name.str(), ok);
    ASSERT_TRUE(ok);
}
