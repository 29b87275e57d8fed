#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "himoe/losses.hpp"

using namespace himoe;

namespace {

double kl(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
    return s;
}

/// JSD via the two KL terms against the midpoint.
double jsd_oracle(const std::vector<double>& p, const std::vector<double>& q) {
    std::vector<double> m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
    return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

std::vector<double> random_simplex(std::size_t n, std::mt19937_64& rng) {
    std::gamma_distribution<double> g(0.5, 1.0);
    std::vector<double> v(n);
    double s = 0.0;
    for (auto& x : v) s += (x = g(rng));
    for (auto& x : v) x /= s;
    return v;
}

RoutingTrace trace_of(const std::vector<std::vector<std::size_t>>& sets, std::size_t ne) {
    RoutingTrace t;
    for (const auto& s : sets) {
        TraceRecord r;
        r.experts = s;
        r.e_full.assign(ne, 1.0 / static_cast<double>(ne));
        t.records.push_back(r);
    }
    return t;
}

}  // namespace

TEST(Utilization, AllQueriesOnSamePair) {
    const auto u = utilization(trace_of({{0, 1}, {0, 1}, {0, 1}, {0, 1}}, 4), 4);
    EXPECT_EQ(u.f, (std::vector<double>{0.5, 0.5, 0.0, 0.0}));
    EXPECT_EQ(u.total, 8u);
}

TEST(Utilization, RoundRobinIsUniform) {
    std::vector<std::vector<std::size_t>> sets;
    for (std::size_t i = 0; i < 8; ++i) sets.push_back({i % 4});
    for (double f : utilization(trace_of(sets, 4), 4).f) EXPECT_DOUBLE_EQ(f, 0.25);
}

TEST(Utilization, SingletonIsOneHot) {
    EXPECT_EQ(utilization(trace_of({{3}}, 5), 5).f, (std::vector<double>{0, 0, 0, 1, 0}));
}

TEST(Utilization, EmptyTraceThrows) { EXPECT_THROW(utilization(RoutingTrace{}, 4), InputError); }

TEST(Utilization, CountsSumToQueriesTimesK) {
    std::mt19937_64 rng(1);
    std::vector<std::vector<std::size_t>> sets;
    for (int i = 0; i < 37; ++i) sets.push_back({rng() % 3, 3 + rng() % 3});
    const auto u = utilization(trace_of(sets, 6), 6);
    std::size_t n = 0;
    for (auto c : u.counts) n += c;
    EXPECT_EQ(n, 37u * 2);
    double s = 0.0;
    for (double f : u.f) s += f;
    EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Balance, TaggedValues) {
    EXPECT_DOUBLE_EQ(balance_loss<double>(std::vector<double>(6, 1.0 / 6.0)), 0.0);
    EXPECT_DOUBLE_EQ(balance_loss<double>(std::vector<double>{1.0, 0.0, 0.0, 0.0}), 0.75);
    EXPECT_DOUBLE_EQ(balance_loss<double>(std::vector<double>{0.75, 0.25}), 0.125);
}

TEST(Balance, ZeroExactlyAtUniformOverRationalGrid) {
    // every f on the grid {i/6} summing to one, N_e = 3
    for (int a = 0; a <= 6; ++a)
        for (int b = 0; a + b <= 6; ++b) {
            const std::vector<double> f = {a / 6.0, b / 6.0, (6 - a - b) / 6.0};
            const double v = balance_loss<double>(f);
            EXPECT_GE(v, 0.0);
            if (a == 2 && b == 2) EXPECT_NEAR(v, 0.0, 1e-15);
            else EXPECT_GT(v, 1e-3);
        }
}

TEST(Balance, UpperBoundAttainedAtOneHot) {
    std::mt19937_64 rng(2);
    for (std::size_t n : {2u, 4u, 8u}) {
        const double nd = static_cast<double>(n);
        const double bound = (1.0 - 1.0 / nd) * (1.0 - 1.0 / nd) + (nd - 1.0) / (nd * nd);
        std::vector<double> one_hot(n, 0.0);
        one_hot[n - 1] = 1.0;
        EXPECT_NEAR(balance_loss<double>(one_hot), bound, 1e-15);
        for (int t = 0; t < 200; ++t) EXPECT_LE(balance_loss<double>(random_simplex(n, rng)), bound + 1e-15);
    }
}

TEST(Balance, SurrogatesAgreeWithHardOnOneHotRouting) {
    // K = 1 with one-hot distributions: mean probability equals the hard frequency
    const std::vector<std::size_t> choice = {0, 2, 2, 3, 0, 2};
    const std::size_t ne = 4;
    std::vector<BasicVector<double>> dists;
    std::vector<std::vector<std::size_t>> sets;
    for (std::size_t c : choice) {
        BasicVector<double> d(ne, 0.0);
        d[c] = 1.0;
        dists.push_back(d);
        sets.push_back({c});
    }
    std::vector<const BasicVector<double>*> ptrs;
    for (const auto& d : dists) ptrs.push_back(&d);
    const auto p = soft_utilization<double>(ptrs, ne);
    const auto hard = utilization(sets, ne);
    const double exact = balance_loss(hard);
    EXPECT_NEAR(balance_surrogate<double>(p.span(), hard.f, BalanceSurrogate::soft), exact, 1e-9);
    EXPECT_NEAR(balance_surrogate<double>(p.span(), hard.f, BalanceSurrogate::linearized), exact, 1e-9);
}

TEST(Balance, LinearizedIsTangentOfExactLoss) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 50; ++t) {
        const auto f = random_simplex(5, rng);
        const auto p = random_simplex(5, rng);
        const double lin = balance_surrogate<double>(p, f, BalanceSurrogate::linearized);
        double expect = balance_loss<double>(f);
        for (std::size_t k = 0; k < 5; ++k) expect += 2.0 * (f[k] - 0.2) * (p[k] - f[k]);
        EXPECT_NEAR(lin, expect, 1e-14);
    }
}

TEST(Jsd, IdenticalIsExactlyZero) {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 50; ++t) {
        const auto p = random_simplex(6, rng);
        EXPECT_NEAR(js_divergence<double>(p, p), 0.0, 1e-12);
    }
}

TEST(Jsd, DisjointPointMassesGiveLnTwo) {
    const std::vector<double> p = {1.0, 0.0, 0.0};
    const std::vector<double> q = {0.0, 0.0, 1.0};
    EXPECT_NEAR(js_divergence<double>(p, q), std::log(2.0), 1e-15);
}

TEST(Jsd, BoundedSymmetricAndMatchesKlOracle) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 500; ++t) {
        const std::size_t n = 2 + t % 7;
        const auto p = random_simplex(n, rng);
        const auto q = random_simplex(n, rng);
        const double d = js_divergence<double>(p, q);
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, std::log(2.0));
        EXPECT_NEAR(d, js_divergence<double>(q, p), 1e-15);
        EXPECT_NEAR(d, jsd_oracle(p, q), 1e-12);
    }
}

TEST(Diversity, IdenticalExpertsGiveZero) {
    const BasicVector<double> out{0.3, -1.0, 2.0};
    const std::vector<std::vector<BasicVector<double>>> outs(3, std::vector<BasicVector<double>>(4, out));
    EXPECT_NEAR(diversity_loss(outs), 0.0, 1e-15);
}

TEST(Diversity, DisjointPointMassesGiveMinusLnTwo) {
    const std::vector<std::vector<BasicVector<double>>> dists = {{BasicVector<double>{1.0, 0.0}},
                                                                 {BasicVector<double>{0.0, 1.0}}};
    EXPECT_NEAR(diversity_from_distributions(dists), -std::log(2.0), 1e-15);
}

TEST(Diversity, ThreeExpertsMatchBruteForce) {
    const std::vector<std::vector<double>> a = {{0.7, 0.2, 0.1}, {0.2, 0.2, 0.6}};
    const std::vector<std::vector<double>> b = {{0.1, 0.8, 0.1}, {0.3, 0.3, 0.4}};
    const std::vector<std::vector<double>> c = {{1.0 / 3, 1.0 / 3, 1.0 / 3}, {0.5, 0.0, 0.5}};
    auto wrap = [](const std::vector<std::vector<double>>& e) {
        std::vector<BasicVector<double>> out;
        for (const auto& p : e) out.emplace_back(p);
        return out;
    };
    const double expect = -((jsd_oracle(a[0], b[0]) + jsd_oracle(a[1], b[1])) / 2 +
                            (jsd_oracle(a[0], c[0]) + jsd_oracle(a[1], c[1])) / 2 +
                            (jsd_oracle(b[0], c[0]) + jsd_oracle(b[1], c[1])) / 2) /
                          3.0;
    EXPECT_NEAR(diversity_from_distributions<double>({wrap(a), wrap(b), wrap(c)}), expect, 1e-14);
}

TEST(Diversity, NeedsTwoExperts) {
    const std::vector<std::vector<BasicVector<double>>> one = {{BasicVector<double>{1.0}}};
    EXPECT_THROW(diversity_from_distributions(one), ConfigError);
}

TEST(Total, Arithmetic) {
    EXPECT_DOUBLE_EQ(total_loss<double>(0.42, 0.3, -0.2, LossConfig{0.0, 0.0}), 0.42);
    EXPECT_NEAR(total_loss<double>(1.0, 0.75, -0.5, LossConfig{}), 1.007, 1e-15);
    EXPECT_DOUBLE_EQ(total_loss<double>(0.8, 0.0, 0.0, LossConfig{}), 0.8);
}

TEST(Total, RejectsNegativeWeights) {
    EXPECT_THROW(validate(LossConfig{-0.1, 0.0}), ConfigError);
    EXPECT_THROW(validate(LossConfig{0.0, -1.0}), ConfigError);
}

TEST(SquaredError, MeanOverCoordinates) {
    EXPECT_DOUBLE_EQ(squared_error<double>(std::vector<double>{1.0, 2.0}, std::vector<double>{0.0, 0.0}), 2.5);
    EXPECT_THROW(squared_error<double>(std::vector<double>{1.0}, std::vector<double>{0.0, 0.0}), DimensionError);
}
