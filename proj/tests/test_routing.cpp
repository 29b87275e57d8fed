#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "himoe/routing.hpp"
#include "himoe/trace.hpp"
#include "himoe/variants.hpp"

using namespace himoe;

namespace {

MoEConfig make_cfg(std::size_t ne, std::size_t k, std::size_t ns, std::size_t ks, std::size_t d = 4,
                   std::size_t dg = 3, std::size_t h = 5) {
    MoEConfig c;
    c.n_experts = ne;
    c.top_k = k;
    c.n_routes = ns;
    c.top_routes = ks;
    c.dim = d;
    c.scene_dim = dg;
    c.hidden = h;
    return resolve(c);
}

Matrix random_features(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    return random_matrix(rows, cols, 1.0, rng);
}

std::vector<Vector> random_queries(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<Vector> qs(n, Vector(d));
    for (auto& q : qs)
        for (auto& x : q) x = nd(rng);
    return qs;
}

/// Independent dense-mixture oracle in Eigen: sum_k e_k E_k(q) with no top-k.
Eigen::VectorXd dense_mixture_oracle(const ParamSet& p, const MoEConfig& cfg, const Matrix& H, const Vector& q) {
    auto mat = [](const Matrix& m) {
        Eigen::MatrixXd out(m.rows(), m.cols());
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r, c);
        return out;
    };
    auto softmax = [](Eigen::VectorXd z, double tau) {
        z /= tau;
        z.array() -= z.maxCoeff();
        z = z.array().exp();
        return Eigen::VectorXd(z / z.sum());
    };
    Eigen::MatrixXd Hm = mat(H);
    const Eigen::VectorXd x = Hm.colwise().mean().transpose();
    const Eigen::VectorXd g = softmax(mat(p.at(names::scene_w)) * x + mat(p.at(names::scene_b)), cfg.tau_scene);
    Eigen::VectorXd qe(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) qe(i) = q[i];
    Eigen::VectorXd r(q.size() + g.size());
    r << qe, g;
    const Eigen::VectorXd e = softmax(mat(p.at(names::inst_w)) * r + mat(p.at(names::inst_b)), cfg.tau_query);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(q.size());
    for (std::size_t k = 0; k < cfg.n_experts; ++k) {
        const auto ex = expert_params(p, k);
        const Eigen::VectorXd hdn = (mat(ex.w1) * qe + mat(ex.b1)).array().tanh();
        y += e(k) * (mat(ex.w2) * hdn + mat(ex.b2));
    }
    return y;
}

}  // namespace

TEST(PoolScene, SingleRowIsIdentity) {
    const Matrix H{{1.5, -2.0, 3.0}};
    EXPECT_EQ(pool_scene(H), (Vector{1.5, -2.0, 3.0}));
}

TEST(PoolScene, MeanOfTwoRows) { EXPECT_EQ(pool_scene(Matrix{{1.0, 1.0}, {3.0, 3.0}}), (Vector{2.0, 2.0})); }

TEST(PoolScene, MatchesColumnMeanOracle) {
    std::mt19937_64 rng(1);
    const Matrix H = random_features(5, 4, rng);
    const Vector x = pool_scene(H);
    for (std::size_t c = 0; c < 4; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < 5; ++r) s += H(r, c);
        EXPECT_NEAR(x[c], s / 5.0, 1e-15);
    }
}

TEST(PoolScene, EmptyThrows) { EXPECT_THROW(pool_scene(Matrix(0, 3)), InputError); }

TEST(SceneRoute, ZeroWeightsGiveUniformAndLowestRoutes) {
    const MoEConfig cfg = make_cfg(8, 2, 4, 2);
    const ScenePool s = scene_route<double>(Vector{1.0, 2.0, 3.0}.span(), Matrix(4, 3), Vector(4).span(), cfg);
    for (double gi : s.g) EXPECT_DOUBLE_EQ(gi, 0.25);
    EXPECT_EQ(s.selected_routes, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(s.expert_pool, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(SceneRoute, HandSetLogitsSelectFirstTwoGroups) {
    const MoEConfig cfg = make_cfg(16, 2, 4, 2);
    // bias = log g reproduces g = (0.5, 0.3, 0.15, 0.05) from zero weights
    const Vector b{std::log(0.5), std::log(0.3), std::log(0.15), std::log(0.05)};
    const ScenePool s = scene_route<double>(Vector(3).span(), Matrix(4, 3), b.span(), cfg);
    EXPECT_NEAR(s.g[0], 0.5, 1e-15);
    EXPECT_NEAR(s.g[3], 0.05, 1e-15);
    std::vector<std::size_t> expect(8);
    std::iota(expect.begin(), expect.end(), 0);
    EXPECT_EQ(s.expert_pool, expect);
}

TEST(SceneRoute, AllRoutesGiveFullPool) {
    const MoEConfig cfg = make_cfg(6, 2, 3, 3);
    std::mt19937_64 rng(2);
    const ScenePool s =
        scene_route<double>(Vector{0.3, -1.0, 2.0}.span(), random_matrix(3, 3, 1.0, rng), Vector(3).span(), cfg);
    EXPECT_EQ(s.expert_pool, all_experts(cfg));
}

TEST(SceneRoute, WrongDescriptorWidthThrows) {
    const MoEConfig cfg = make_cfg(4, 1, 2, 1);
    EXPECT_THROW(scene_route<double>(Vector(2).span(), Matrix(2, 3), Vector(2).span(), cfg), DimensionError);
}

TEST(MaskToPool, KeepsPoolEntriesUnchanged) {
    const Vector e{0.4, 0.3, 0.2, 0.1};
    const std::vector<std::size_t> pool = {0, 2};
    EXPECT_EQ(mask_to_pool(e, pool), (Vector{0.4, 0.0, 0.2, 0.0}));
    const std::vector<std::size_t> all = {0, 1, 2, 3};
    EXPECT_EQ(mask_to_pool(e, all), e);
    const std::vector<std::size_t> last = {3};
    EXPECT_EQ(mask_to_pool(Vector{0.25, 0.25, 0.25, 0.25}, last), (Vector{0.0, 0.0, 0.0, 0.25}));
}

TEST(MaskToPool, EmptyOrOutOfRangePoolThrows) {
    const Vector e{0.5, 0.5};
    EXPECT_THROW(mask_to_pool(e, std::vector<std::size_t>{}), ConfigError);
    EXPECT_THROW(mask_to_pool(e, std::vector<std::size_t>{2}), ConfigError);
}

TEST(InstanceRoute, MaskThenNormalize) {
    RoutingAssignment a;
    a.e = Vector{0.4, 0.3, 0.2, 0.1};
    a.masked = mask_to_pool(a.e, std::vector<std::size_t>{0, 2});
    select_and_normalize(a, 2);
    EXPECT_EQ(a.selected, (std::vector<std::size_t>{0, 2}));
    EXPECT_NEAR(a.weights[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(a.weights[1], 1.0 / 3.0, 1e-15);
}

TEST(InstanceRoute, LogitsReproduceHandExample) {
    // bias = log e with zero weights gives e = (0.4, 0.3, 0.2, 0.1)
    const MoEConfig cfg = make_cfg(4, 2, 2, 1, 2, 2, 2);
    const Vector b{std::log(0.4), std::log(0.3), std::log(0.2), std::log(0.1)};
    const std::vector<std::size_t> pool = {0, 2};
    const RoutingAssignment a =
        instance_route<double>(Vector{1.0, -1.0}.span(), Vector{0.5, 0.5}.span(), pool, Matrix(4, 4), b.span(), cfg);
    EXPECT_NEAR(a.e[0], 0.4, 1e-15);
    EXPECT_EQ(a.selected, (std::vector<std::size_t>{0, 2}));
    EXPECT_NEAR(a.weights[0], 2.0 / 3.0, 1e-15);
}

TEST(InstanceRoute, TopOneIsArgmaxWithUnitWeight) {
    RoutingAssignment a;
    a.e = Vector{0.1, 0.2, 0.6, 0.1};
    a.masked = mask_to_pool(a.e, std::vector<std::size_t>{0, 1, 3});
    select_and_normalize(a, 1);
    EXPECT_EQ(a.selected, (std::vector<std::size_t>{1}));
    EXPECT_DOUBLE_EQ(a.weights[0], 1.0);
}

TEST(InstanceRoute, ZeroWeightsPickLowestPoolMembersUniformly) {
    const MoEConfig cfg = make_cfg(8, 2, 4, 2, 3, 3, 4);
    const std::vector<std::size_t> pool = {2, 3, 6, 7};
    const RoutingAssignment a =
        instance_route<double>(Vector{1.0, 2.0, 3.0}.span(), Vector(4, 0.25).span(), pool, Matrix(8, 7), Vector(8).span(), cfg);
    EXPECT_EQ(a.selected, (std::vector<std::size_t>{2, 3}));
    EXPECT_DOUBLE_EQ(a.weights[0], 0.5);
    EXPECT_DOUBLE_EQ(a.weights[1], 0.5);
}

TEST(InstanceRoute, DegenerateMassThrows) {
    RoutingAssignment a;
    a.e = Vector{1.0, 0.0, 0.0};
    a.masked = a.e;
    EXPECT_THROW(select_and_normalize(a, 2), RoutingError);
}

TEST(InstanceRoute, TemperatureEqualsScaledLogits) {
    std::mt19937_64 rng(4);
    MoEConfig cfg = make_cfg(6, 2, 2, 2, 3, 3, 4);
    cfg.tau_query = 0.37;
    const Matrix W = random_matrix(6, 5, 1.0, rng);
    const Vector b{0.1, -0.2, 0.3, 0.0, 0.5, -0.1};
    const Vector q{0.4, -1.2, 0.8};
    const Vector g{0.6, 0.4};
    const auto pool = all_experts(cfg);
    const RoutingAssignment a = instance_route<double>(q.span(), g.span(), pool, W, b.span(), cfg);
    Matrix Ws = W;
    for (auto& x : Ws.flat()) x /= cfg.tau_query;
    Vector bs = b;
    for (auto& x : bs) x /= cfg.tau_query;
    MoEConfig unit = cfg;
    unit.tau_query = 1.0;
    const RoutingAssignment s = instance_route<double>(q.span(), g.span(), pool, Ws, bs.span(), unit);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(a.e[k], s.e[k], 1e-12);
}

TEST(HimoeForward, SingleExpertIsThatExpert) {
    const MoEConfig cfg = make_cfg(1, 1, 1, 1);
    std::mt19937_64 rng(5);
    const ParamSet p = init_params(VariantPolicy::hierarchical, cfg, InitConfig{0.3, 1.0}, 5);
    ParamBinder<double> binder(p);
    const auto qs = random_queries(3, cfg.dim, rng);
    const auto out = himoe_forward<double>(random_features(4, cfg.scene_dim, rng), qs, binder, cfg);
    for (std::size_t i = 0; i < qs.size(); ++i) {
        EXPECT_EQ(out.outputs[i], expert_forward(expert_params(p, 0), qs[i]));
        EXPECT_EQ(out.assignments[i].weights, (Vector{1.0}));
    }
}

TEST(HimoeForward, FullPoolAndKMatchesDenseMixtureOracle) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t ns = 1 + trial % 4;
        const std::size_t ne = ns + trial % 5;
        const MoEConfig cfg = make_cfg(ne, ne, ns, ns, 3 + trial % 3, 2 + trial % 4, 4);
        const ParamSet p = init_params(VariantPolicy::hierarchical, cfg, InitConfig{0.8, 1.0}, 100 + trial);
        ParamBinder<double> binder(p);
        const Matrix H = random_features(3, cfg.scene_dim, rng);
        const auto qs = random_queries(4, cfg.dim, rng);
        const auto out = himoe_forward<double>(H, qs, binder, cfg);
        for (std::size_t i = 0; i < qs.size(); ++i) {
            const Eigen::VectorXd y = dense_mixture_oracle(p, cfg, H, qs[i]);
            for (std::size_t c = 0; c < cfg.dim; ++c) EXPECT_NEAR(out.outputs[i][c], y(c), 1e-10);
        }
    }
}

TEST(HimoeForward, IdenticalQueriesRouteIdentically) {
    const MoEConfig cfg = make_cfg(8, 2, 4, 2);
    std::mt19937_64 rng(7);
    const ParamSet p = init_params(VariantPolicy::hierarchical, cfg, InitConfig{0.5, 1.0}, 7);
    ParamBinder<double> binder(p);
    const auto q = random_queries(1, cfg.dim, rng).front();
    const auto out = himoe_forward<double>(random_features(4, cfg.scene_dim, rng), {q, q, q}, binder, cfg);
    EXPECT_EQ(out.outputs[0], out.outputs[2]);
    EXPECT_EQ(out.assignments[0].selected, out.assignments[1].selected);
    EXPECT_EQ(out.assignments[0].weights, out.assignments[2].weights);
}

TEST(HimoeForward, RandomizedInvariants) {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<std::size_t> pick(1, 16);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t ne = pick(rng);
        const std::size_t ns = 1 + pick(rng) % std::min<std::size_t>(4, ne);
        const std::size_t ks = 1 + pick(rng) % ns;
        MoEConfig raw;
        raw.n_experts = ne;
        raw.n_routes = ns;
        raw.top_routes = ks;
        raw.dim = 3;
        raw.scene_dim = 3;
        raw.hidden = 3;
        raw.route_experts = contiguous_partition(ne, ns);
        std::size_t min_pool = ne;
        // smallest union of ks groups is the ks smallest groups
        std::vector<std::size_t> sizes;
        for (const auto& g : raw.route_experts) sizes.push_back(g.size());
        std::sort(sizes.begin(), sizes.end());
        min_pool = std::accumulate(sizes.begin(), sizes.begin() + static_cast<std::ptrdiff_t>(ks), std::size_t{0});
        raw.top_k = 1 + pick(rng) % min_pool;
        const MoEConfig cfg = resolve(raw);
        const ParamSet p = init_params(VariantPolicy::hierarchical, cfg, InitConfig{1.0, 1.0}, 1000 + trial);
        ParamBinder<double> binder(p);
        const auto out = himoe_forward<double>(random_features(3, 3, rng), random_queries(5, 3, rng), binder, cfg);
        const std::set<std::size_t> pool(out.scene.expert_pool.begin(), out.scene.expert_pool.end());
        EXPECT_EQ(out.scene.selected_routes.size(), ks);
        for (const auto& a : out.assignments) {
            ASSERT_EQ(a.selected.size(), cfg.top_k);
            double sum = 0.0;
            for (std::size_t i = 0; i < a.selected.size(); ++i) {
                EXPECT_TRUE(pool.count(a.selected[i]));
                EXPECT_GT(a.weights[i], 0.0);
                sum += a.weights[i];
            }
            EXPECT_NEAR(sum, 1.0, 1e-9);
            for (std::size_t k = 0; k < ne; ++k)
                if (!pool.count(k)) EXPECT_EQ(a.masked[k], 0.0);
        }
    }
}

TEST(HimoeForward, PoolGrowsWithTopRoutes) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        const MoEConfig base = make_cfg(8, 1, 4, 1);
        const Matrix W = random_matrix(4, 3, 1.0, rng);
        const Vector x{0.2, -0.4, 1.0};
        std::set<std::size_t> prev;
        for (std::size_t ks = 1; ks <= 4; ++ks) {
            MoEConfig cfg = base;
            cfg.top_routes = ks;
            const ScenePool s = scene_route<double>(x.span(), W, Vector(4).span(), cfg);
            const std::set<std::size_t> pool(s.expert_pool.begin(), s.expert_pool.end());
            EXPECT_TRUE(std::includes(pool.begin(), pool.end(), prev.begin(), prev.end()));
            prev = pool;
        }
    }
}

TEST(Trace, JsonLinesRoundTripIsBitExact) {
    const MoEConfig cfg = make_cfg(8, 2, 4, 2);
    std::mt19937_64 rng(10);
    const ParamSet p = init_params(VariantPolicy::hierarchical, cfg, InitConfig{0.7, 1.0}, 10);
    ParamBinder<double> binder(p);
    RoutingTrace t;
    for (std::size_t b = 0; b < 3; ++b) {
        const auto out = himoe_forward<double>(random_features(4, cfg.scene_dim, rng), random_queries(4, cfg.dim, rng), binder, cfg);
        for (const auto& a : out.assignments) {
            TraceRecord r = make_record(b, out.scene, a);
            r.instance_type = static_cast<int>(a.query_index % 4);
            r.loss = 0.1 * std::sqrt(2.0) * static_cast<double>(b + 1);
            t.records.push_back(r);
        }
    }
    std::stringstream ss;
    write_trace(ss, t);
    EXPECT_EQ(read_trace(ss), t);
}

TEST(Trace, CountsEqualSelectedMultiset) {
    RoutingTrace t;
    for (std::size_t i = 0; i < 5; ++i) {
        TraceRecord r;
        r.e_full.assign(4, 0.25);
        r.experts = {i % 4, (i + 1) % 4};
        t.records.push_back(r);
    }
    EXPECT_EQ(t.expert_counts(), (std::vector<std::size_t>{3, 3, 2, 2}));
}

TEST(Trace, MalformedLineReportsLineNumber) {
    std::stringstream ss("{\"batch\":0,\"query\":0,\"routes\":[],\"pool\":[],\"experts\":[],\"weights\":[],\"e_full\":[],\"g\":[]}\n{oops\n");
    try {
        read_trace(ss);
        FAIL() << "no exception";
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}
