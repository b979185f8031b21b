// Training-based trend properties on reduced desk scale: the dynamic head
// against its static counterpart at matched cost, and fine- against
// coarse-grained gating under a tight budget. Both are majority votes over
// three fixed seeds.
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "dynhead/harness.hpp"

using namespace dynhead;
namespace fs = std::filesystem;

namespace {

std::string trend_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "dynhead_trend" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

RunConfig trend_config(std::uint64_t seed, const std::string& out) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.image_size = 32;
    cfg.size_min = 2.0;
    cfg.size_max = 16.0;
    cfg.objects_max = 2; // sparse scenes: plenty of background redundancy
    cfg.channels = 16;
    cfg.train_scenes = 24;
    cfg.eval_scenes = 24;
    cfg.iterations = 800;
    cfg.batch = 2;
    cfg.lr = 0.02;
    cfg.out_dir = out;
    return cfg;
}

struct RunOutcome {
    double proxy = 0;
    double macs_avg = 0;
};

RunOutcome run_once(RunConfig cfg) {
    TrainResult tr = train(cfg);
    Model model = build_model(cfg);
    checkpoint::restore_into(model.params, checkpoint::load(tr.checkpoint_path));
    EvalMetrics em = eval_model(model, cfg);
    return {em.proxy, em.report.macs_avg()};
}

} // namespace

TEST(Trends, DynamicMatchesOrBeatsStaticAtMatchedFlops) {
    const std::uint64_t seeds[3] = {101, 202, 303};
    int dynamic_wins = 0;
    for (int i = 0; i < 3; ++i) {
        RunConfig dyn = trend_config(seeds[i], trend_dir("dyn_" + std::to_string(i)));
        dyn.lambda = 0.0; // no budget pressure: realized cost stays close to static
        RunOutcome d = run_once(dyn);

        RunConfig sta = dyn;
        sta.out_dir = trend_dir("static_" + std::to_string(i));
        sta.gate_force = "open";
        RunOutcome s = run_once(sta);

        const double gap = std::abs(d.macs_avg - s.macs_avg) / s.macs_avg;
        std::printf("seed %llu: dynamic proxy %.4f (%.0f MACs) vs static %.4f (%.0f MACs), "
                    "cost gap %.1f%%\n",
                    static_cast<unsigned long long>(seeds[i]), d.proxy, d.macs_avg, s.proxy,
                    s.macs_avg, 100.0 * gap);
        ASSERT_LE(gap, 0.10) << "realized cost drifted away from the static baseline";
        if (d.proxy >= s.proxy) ++dynamic_wins;
    }
    EXPECT_GE(dynamic_wins, 2) << "dynamic head lost the majority vote";
}

TEST(Trends, FineGrainedBeatsCoarseAtTightBudget) {
    const std::uint64_t seeds[3] = {111, 222, 333};
    int fine_wins = 0;
    for (int i = 0; i < 3; ++i) {
        RunConfig fine = trend_config(seeds[i], trend_dir("fine_" + std::to_string(i)));
        fine.lambda = 1.6;
        RunOutcome f = run_once(fine);

        RunConfig coarse = fine;
        coarse.out_dir = trend_dir("coarse_" + std::to_string(i));
        coarse.coarse_gate = true;
        RunOutcome c = run_once(coarse);

        std::printf("seed %llu: fine proxy %.4f (%.0f MACs) vs coarse %.4f (%.0f MACs)\n",
                    static_cast<unsigned long long>(seeds[i]), f.proxy, f.macs_avg, c.proxy,
                    c.macs_avg);
        if (f.proxy > c.proxy) ++fine_wins;
    }
    EXPECT_GE(fine_wins, 2) << "fine-grained gating lost the majority vote";
}
