#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "himoe/trainer.hpp"

using namespace himoe;

namespace {

MoEConfig small_moe(std::size_t ne = 4, std::size_t k = 1) {
    MoEConfig m;
    m.n_experts = ne;
    m.top_k = k;
    m.n_routes = 2;
    m.top_routes = 1;
    m.dim = 4;
    m.scene_dim = 4;
    m.hidden = 8;
    return resolve(m);
}

GeneratorConfig small_data(const MoEConfig& m) {
    GeneratorConfig g;
    g.dim = m.dim;
    g.scene_dim = m.scene_dim;
    g.n_queries = 4;
    g.n_tokens = 4;
    g.n_scene_types = 2;
    g.n_instance_types = 2;
    return g;
}

TrainerConfig short_run(std::size_t steps) {
    TrainerConfig t;
    t.steps = steps;
    t.batch = 2;
    t.probes = 4;
    t.eval_batches = 2;
    return t;
}

}  // namespace

TEST(Trainer, ZeroStepsLeavesInitUntouched) {
    const auto m = small_moe();
    const auto tc = short_run(0);
    const auto res = train(VariantPolicy::hierarchical, m, LossConfig{}, tc, small_data(m), InitConfig{});
    EXPECT_EQ(res.params.blocks(), init_params(VariantPolicy::hierarchical, m, InitConfig{}, tc.seed).blocks());
    EXPECT_TRUE(res.log.empty());
    EXPECT_FALSE(res.final_eval.trace.empty());
}

TEST(Trainer, DenseFitsSingleTypeTask) {
    const auto m = small_moe();
    auto g = small_data(m);
    g.n_scene_types = 1;
    g.n_instance_types = 1;
    auto tc = short_run(300);
    tc.optimizer = OptimizerKind::adam;
    tc.lr = 0.01;
    tc.clip = 10.0;
    const auto before = train(VariantPolicy::dense, m, LossConfig{}, short_run(0), g, InitConfig{});
    const auto after = train(VariantPolicy::dense, m, LossConfig{}, tc, g, InitConfig{});
    EXPECT_LE(after.final_eval.task, 0.5 * before.final_eval.task);
}

TEST(Trainer, SameSeedIsBitwiseReproducible) {
    const auto m = small_moe(4, 2);
    const auto tc = short_run(15);
    const auto a = train(VariantPolicy::hierarchical, m, LossConfig{0.01, 0.001}, tc, small_data(m), InitConfig{});
    const auto b = train(VariantPolicy::hierarchical, m, LossConfig{0.01, 0.001}, tc, small_data(m), InitConfig{});
    EXPECT_EQ(a.params.blocks(), b.params.blocks());
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].total, b.log[i].total);
    EXPECT_EQ(a.final_eval.trace, b.final_eval.trace);
}

TEST(Trainer, DifferentSeedDiffers) {
    const auto m = small_moe();
    auto tc = short_run(3);
    const auto a = train(VariantPolicy::instance_only, m, LossConfig{}, tc, small_data(m), InitConfig{});
    tc.seed = 2;
    const auto b = train(VariantPolicy::instance_only, m, LossConfig{}, tc, small_data(m), InitConfig{});
    EXPECT_NE(a.params.blocks(), b.params.blocks());
}

TEST(Clip, RescalesOnlyAboveThreshold) {
    GradientMap g;
    g["a"] = Matrix(1, 2);
    g["a"](0, 0) = 3.0;
    g["a"](0, 1) = 4.0;
    EXPECT_DOUBLE_EQ(global_norm(g), 5.0);
    GradientMap untouched = g;
    EXPECT_DOUBLE_EQ(clip_global_norm(untouched, 5.0), 5.0);
    EXPECT_EQ(untouched.at("a"), g.at("a"));
    EXPECT_NEAR(clip_global_norm(g, 1.0), 1.0, 1e-15);
    EXPECT_NEAR(g.at("a")(0, 0), 0.6, 1e-15);
    EXPECT_NEAR(g.at("a")(0, 1), 0.8, 1e-15);
}

TEST(Clip, LoggedNormsHonourThreshold) {
    const auto m = small_moe();
    auto tc = short_run(10);
    tc.clip = 0.05;
    const auto res = train(VariantPolicy::hierarchical, m, LossConfig{}, tc, small_data(m), InitConfig{});
    for (const auto& r : res.log) {
        EXPECT_LE(r.grad_norm_clipped, tc.clip * (1 + 1e-12));
        if (r.grad_norm <= tc.clip) EXPECT_EQ(r.grad_norm_clipped, r.grad_norm);
    }
}

TEST(Trainer, UnselectedExpertsAreNotUpdated) {
    const MoEConfig m = resolve(MoEConfig{8, 1, 4, 1, 4, 4, 8});
    auto g = small_data(m);
    g.n_queries = 2;
    for (auto opt : {OptimizerKind::sgd, OptimizerKind::adam}) {
        auto tc = short_run(1);
        tc.batch = 1;
        tc.optimizer = opt;
        tc.lr = 0.1;
        const ParamSet init = init_params(VariantPolicy::hierarchical, m, InitConfig{}, tc.seed);
        const SyntheticTask task(g, tc.seed);
        ParamBinder<double> plain(init);
        const auto obj = compute_objective<double>(VariantPolicy::hierarchical, init, plain, task.batch(0, 1), task.probes(1, 4), m,
                                                   LossConfig{0.0, 0.0});
        std::set<std::size_t> used;
        for (const auto& r : obj.trace.records) used.insert(r.experts.begin(), r.experts.end());
        ASSERT_LT(used.size(), 8u);

        const auto res = train(VariantPolicy::hierarchical, m, LossConfig{0.01, 0.0}, tc, g, InitConfig{});
        for (std::size_t k = 0; k < 8; ++k)
            for (const char* part : {"w1", "b1", "w2", "b2"}) {
                const auto name = names::expert(k, part);
                if (used.count(k)) continue;
                EXPECT_EQ(res.params.at(name), init.at(name)) << name;
            }
        for (std::size_t k : used) EXPECT_NE(res.params.at(names::expert(k, "w2")), init.at(names::expert(k, "w2")));
    }
}

TEST(GradCheck, PassesWithAndWithoutDiversity) {
    MoEConfig m = resolve(MoEConfig{4, 2, 2, 1, 4, 4, 8, 1.0, 1.0, {{0, 1, 2}, {1, 2, 3}}, {}});
    auto g = small_data(m);
    g.n_queries = 2;
    const SyntheticTask task(g, 1);
    const auto batch = task.batch(0, 2);
    const auto probes = task.probes(0, 4);
    // with one route kept, scene_only weights are constant over the pool and its
    // router gradient is exactly zero, so it is checked with both routes kept
    MoEConfig both = m;
    both.top_routes = 2;
    for (auto policy : {VariantPolicy::hierarchical, VariantPolicy::instance_only, VariantPolicy::scene_only,
                        VariantPolicy::token_moe, VariantPolicy::dense}) {
        const MoEConfig& c = policy == VariantPolicy::scene_only ? both : m;
        const ParamSet p = init_params(policy, c, InitConfig{0.5, 1.0}, 3);
        for (double l2 : {0.0, 0.001}) {
            const auto rep = check_gradients(policy, p, batch, probes, c, LossConfig{0.01, l2});
            EXPECT_TRUE(rep.pass) << to_string(policy) << " worst " << rep.worst;
            EXPECT_LE(rep.worst, 1e-4);
            EXPECT_EQ(rep.blocks.size(), p.blocks().size());
        }
    }
}

TEST(GradCheck, TamperedGradientIsCaughtAndNamed) {
    MoEConfig m = resolve(MoEConfig{4, 2, 2, 1, 4, 4, 8});
    const SyntheticTask task(small_data(m), 1);
    const ParamSet p = init_params(VariantPolicy::hierarchical, m, InitConfig{0.5, 1.0}, 1);
    const auto rep = check_gradients(VariantPolicy::hierarchical, p, task.batch(0, 1), task.probes(0, 4), m,
                                     LossConfig{0.01, 0.001}, 1e-5, 1e-4,
                                     [](GradientMap& g) { g.at(names::inst_w)(1, 2) += 0.05; });
    EXPECT_FALSE(rep.pass);
    for (const auto& b : rep.blocks) EXPECT_EQ(b.pass, b.block != names::inst_w) << b.block;
}

TEST(Trainer, StrongBalanceWeightEqualizesUtilization) {
    // default task and model; balanced assignment is reachable there
    const MoEConfig m = resolve(MoEConfig{});
    GeneratorConfig g;
    TrainerConfig tc;
    tc.steps = 300;
    tc.optimizer = OptimizerKind::adam;
    tc.lr = 0.01;
    const auto res = train(VariantPolicy::hierarchical, m, LossConfig{10.0, 0.0}, tc, g, InitConfig{});
    const auto u = utilization(res.final_eval.trace, m.n_experts);
    for (double f : u.f) EXPECT_LE(std::abs(f - 1.0 / 8.0), 0.1);
}

TEST(Trainer, DivergenceRaisesNumericalError) {
    const auto m = small_moe();
    auto tc = short_run(50);
    tc.lr = 1e300;
    tc.clip = 1e300;
    EXPECT_THROW(train(VariantPolicy::dense, m, LossConfig{}, tc, small_data(m), InitConfig{}), NumericalError);
}

TEST(Trainer, RejectsMismatchedGeneratorAndBadSettings) {
    const auto m = small_moe();
    auto g = small_data(m);
    g.dim = 5;
    EXPECT_THROW(train(VariantPolicy::dense, m, LossConfig{}, short_run(1), g, InitConfig{}), ConfigError);
    auto tc = short_run(1);
    tc.batch = 0;
    EXPECT_THROW(train(VariantPolicy::dense, m, LossConfig{}, tc, small_data(m), InitConfig{}), ConfigError);
    EXPECT_THROW(parse_optimizer("rmsprop"), ConfigError);
    EXPECT_EQ(parse_optimizer("adamw"), OptimizerKind::adam);
}

TEST(Metrics, CsvRowsMatchHeaderWidth) {
    std::ostringstream os;
    MetricRow r;
    r.task = 0.5;
    write_metric_row(os, r);
    const std::string header = metrics_csv_header();
    const std::string row = os.str();
    EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
}
