#pragma once
// Two-level routing: a scene router picks K_s routes from a pooled scene
// descriptor, the routes define a candidate expert pool, and each query picks
// its top-K experts inside that pool.

#include <algorithm>
#include <set>
#include <span>
#include <vector>

#include "himoe/config.hpp"
#include "himoe/expert.hpp"
#include "himoe/numerics.hpp"
#include "himoe/params.hpp"

namespace himoe {

template <class T>
struct BasicScenePool {
    std::vector<std::size_t> selected_routes;  // ascending
    std::vector<std::size_t> expert_pool;      // ascending union of the routes' experts
    BasicVector<T> g;                          // scene distribution over N_s
};
using ScenePool = BasicScenePool<double>;

template <class T>
struct BasicRoutingAssignment {
    std::size_t query_index = 0;
    BasicVector<T> e;                    // instance distribution over N_e, before masking
    BasicVector<T> masked;               // e with entries outside the pool zeroed
    std::vector<std::size_t> selected;   // ascending expert indices
    BasicVector<T> weights;              // aligned with `selected`
};
using RoutingAssignment = BasicRoutingAssignment<double>;

/// Scene descriptor: column means of the encoder feature rows.
inline Vector pool_scene(const Matrix& H) {
    if (H.rows() == 0 || H.cols() == 0) throw InputError("pool_scene: empty feature matrix");
    Vector out(H.cols());
    for (std::size_t r = 0; r < H.rows(); ++r)
        for (std::size_t c = 0; c < H.cols(); ++c) out[c] += H(r, c);
    for (auto& x : out) x /= static_cast<double>(H.rows());
    return out;
}

/// Union of the expert groups of `routes`, ascending.
inline std::vector<std::size_t> pool_of(const MoEConfig& cfg, std::span<const std::size_t> routes) {
    std::set<std::size_t> pool;
    for (std::size_t r : routes) pool.insert(cfg.route_experts.at(r).begin(), cfg.route_experts.at(r).end());
    return {pool.begin(), pool.end()};
}

/// Picks the K_s most probable routes for the given scene descriptor.
template <class T>
BasicScenePool<T> scene_route(std::span<const double> x_global, const BasicMatrix<T>& W_g,
                              std::type_identity_t<std::span<const T>> b_g, const MoEConfig& cfg) {
    if (x_global.size() != cfg.scene_dim)
        throw DimensionError("scene_route: descriptor has " + std::to_string(x_global.size()) +
                             " entries, expected d_g=" + std::to_string(cfg.scene_dim));
    const BasicVector<T> x = lift<T>(x_global);
    BasicScenePool<T> out;
    out.g = softmax_temp<T>(linear<T>(W_g, x.span(), b_g), cfg.tau_scene);
    out.selected_routes = topk<T>(out.g, cfg.top_routes);
    std::sort(out.selected_routes.begin(), out.selected_routes.end());
    out.expert_pool = pool_of(cfg, out.selected_routes);
    return out;
}

/// Zeros every entry outside `pool`; entries inside are left untouched.
template <class T>
BasicVector<T> mask_to_pool(std::span<const T> e, std::span<const std::size_t> pool) {
    if (pool.empty()) throw ConfigError("mask_to_pool: empty expert pool");
    BasicVector<T> out(e.size(), T(0.0));
    for (std::size_t k : pool) {
        if (k >= e.size())
            throw ConfigError("mask_to_pool: expert " + std::to_string(k) + " outside [0, " +
                              std::to_string(e.size()) + ")");
        out[k] = e[k];
    }
    return out;
}

template <class T>
BasicVector<T> mask_to_pool(const BasicVector<T>& e, std::span<const std::size_t> pool) {
    return mask_to_pool<T>(e.span(), pool);
}

/// Top-K over the masked distribution followed by renormalization over the
/// selected experts. Shared by every routed variant.
template <class T>
void select_and_normalize(BasicRoutingAssignment<T>& a, std::size_t k) {
    std::size_t positive = 0;
    for (const T& m : a.masked) positive += value_of(m) > 0.0 ? 1 : 0;
    if (positive < k)
        throw RoutingError("routing degeneracy: only " + std::to_string(positive) +
                           " strictly positive pool probabilities for K=" + std::to_string(k));
    a.selected = topk<T>(a.masked, k);
    std::sort(a.selected.begin(), a.selected.end());
    T total(0.0);
    for (std::size_t j : a.selected) total += a.masked[j];
    a.weights = BasicVector<T>(a.selected.size());
    for (std::size_t i = 0; i < a.selected.size(); ++i) a.weights[i] = a.masked[a.selected[i]] / total;
}

/// e = softmax(W_i [q; g] / tau_q), masked to the pool, top-K, normalized.
template <class T>
BasicRoutingAssignment<T> instance_route(std::type_identity_t<std::span<const T>> q,
                                         std::type_identity_t<std::span<const T>> g,
                                         std::span<const std::size_t> pool, const BasicMatrix<T>& W_i,
                                         std::type_identity_t<std::span<const T>> b_i, const MoEConfig& cfg) {
    if (q.size() != cfg.dim)
        throw DimensionError("instance_route: query has " + std::to_string(q.size()) +
                             " entries, expected d=" + std::to_string(cfg.dim));
    if (g.size() != cfg.n_routes)
        throw DimensionError("instance_route: g has " + std::to_string(g.size()) +
                             " entries, expected N_s=" + std::to_string(cfg.n_routes));
    BasicRoutingAssignment<T> a;
    const BasicVector<T> r = concat<T>(q, g);
    a.e = softmax_temp<T>(linear<T>(W_i, r.span(), b_i), cfg.tau_query);
    a.masked = mask_to_pool<T>(a.e.span(), pool);
    select_and_normalize(a, cfg.top_k);
    return a;
}

/// y = sum over selected k (ascending) of w_k E_k(q).
template <class T>
BasicVector<T> aggregate(ParamBinder<T>& params, const BasicRoutingAssignment<T>& a,
                         std::type_identity_t<std::span<const T>> q) {
    BasicVector<T> y(q.size(), T(0.0));
    for (std::size_t i = 0; i < a.selected.size(); ++i) {
        const BasicVector<T> out = expert_forward<T>(params, a.selected[i], q);
        for (std::size_t c = 0; c < y.size(); ++c) y[c] += a.weights[i] * out[c];
    }
    return y;
}

template <class T>
struct BlockOutput {
    std::vector<BasicVector<T>> outputs;
    BasicScenePool<T> scene;                          // empty routes/pool for unscened variants
    std::vector<BasicRoutingAssignment<T>> assignments;  // one per query
};

/// Full hierarchical forward pass over one scene: pool the features, route
/// the scene, then route and aggregate each query inside the pool.
template <class T>
BlockOutput<T> himoe_forward(const Matrix& H, const std::vector<Vector>& queries, ParamBinder<T>& params,
                             const MoEConfig& cfg) {
    if (queries.empty()) throw InputError("himoe_forward: no queries");
    if (H.cols() != cfg.scene_dim)
        throw DimensionError("himoe_forward: feature rows have " + std::to_string(H.cols()) +
                             " entries, expected d_g=" + std::to_string(cfg.scene_dim));
    BlockOutput<T> out;
    const Vector x_global = pool_scene(H);
    out.scene = scene_route<T>(x_global.span(), params(names::scene_w), params(names::scene_b).flat(), cfg);
    const auto& W_i = params(names::inst_w);
    const auto& b_i = params(names::inst_b);
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const BasicVector<T> q = lift<T>(queries[i].span());
        auto a = instance_route<T>(q.span(), out.scene.g.span(), out.scene.expert_pool, W_i, b_i.flat(), cfg);
        a.query_index = i;
        out.outputs.push_back(aggregate<T>(params, a, q.span()));
        out.assignments.push_back(std::move(a));
    }
    return out;
}

}  // namespace himoe
