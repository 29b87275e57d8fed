#pragma once
// The five routing policies of the ablation, sharing one expert bank, plus
// parameter / FLOP accounting for each of them.

#include <cstddef>
#include <set>
#include <vector>

#include "himoe/config.hpp"
#include "himoe/expert.hpp"
#include "himoe/params.hpp"
#include "himoe/routing.hpp"

namespace himoe {

template <class T>
struct VariantOutput {
    std::vector<BasicVector<T>> outputs;                        // one per query
    BasicScenePool<T> scene;                                    // routes/g empty when unused
    std::vector<BasicRoutingAssignment<T>> assignments;         // one per query; empty for dense
    std::vector<BasicRoutingAssignment<T>> token_assignments;   // token_moe: feature rows
};

inline std::vector<std::size_t> all_experts(const MoEConfig& cfg) {
    std::vector<std::size_t> v(cfg.n_experts);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = k;
    return v;
}

/// Scene distribution spread onto the pool: each expert receives g_r / |route r|
/// from every selected route containing it, then the pool is renormalized.
template <class T>
BasicVector<T> project_scene_to_experts(const BasicScenePool<T>& scene, const MoEConfig& cfg) {
    BasicVector<T> out(cfg.n_experts, T(0.0));
    for (std::size_t r : scene.selected_routes) {
        const auto& group = cfg.route_experts[r];
        const double share = 1.0 / static_cast<double>(group.size());
        for (std::size_t k : group) out[k] += scene.g[r] * share;
    }
    T total(0.0);
    for (std::size_t k : scene.expert_pool) total += out[k];
    for (std::size_t k : scene.expert_pool) out[k] /= total;
    return out;
}

inline void check_variant_config(VariantPolicy policy, const MoEConfig& cfg) {
    if (cfg.top_k < 1 || cfg.top_k > cfg.n_experts)
        throw ConfigError("moe.top_k: must satisfy 1 <= K <= N_e");
    if (cfg.top_routes < 1 || cfg.top_routes > cfg.n_routes)
        throw ConfigError("moe.top_routes: must satisfy 1 <= K_s <= N_s");
    if (cfg.route_experts.size() != cfg.n_routes)
        throw ConfigError("moe.route_experts: config not resolved (expected N_s groups)");
    if (policy == VariantPolicy::token_moe && cfg.scene_dim != cfg.dim)
        throw ConfigError("moe.scene_dim: token_moe routes feature rows through the query gate, needs d_g == d");
}

/// Flat routing of one token over the whole bank, no scene signal.
template <class T>
BasicRoutingAssignment<T> token_route(std::type_identity_t<std::span<const T>> x, const BasicMatrix<T>& W,
                                      std::type_identity_t<std::span<const T>> b, const MoEConfig& cfg) {
    BasicRoutingAssignment<T> a;
    a.e = softmax_temp<T>(linear<T>(W, x, b), cfg.tau_query);
    a.masked = a.e;
    select_and_normalize(a, cfg.top_k);
    return a;
}

template <class T>
VariantOutput<T> variant_forward(VariantPolicy policy, const Matrix& H, const std::vector<Vector>& queries,
                                 ParamBinder<T>& params, const MoEConfig& cfg) {
    check_variant_config(policy, cfg);
    if (queries.empty()) throw InputError("variant_forward: no queries");
    VariantOutput<T> out;
    switch (policy) {
        case VariantPolicy::dense: {
            for (const auto& q : queries) {
                const BasicVector<T> qt = lift<T>(q.span());
                out.outputs.push_back(dense_forward<T>(params, qt.span()));
            }
            break;
        }
        case VariantPolicy::hierarchical: {
            auto block = himoe_forward<T>(H, queries, params, cfg);
            out.outputs = std::move(block.outputs);
            out.scene = std::move(block.scene);
            out.assignments = std::move(block.assignments);
            break;
        }
        case VariantPolicy::instance_only: {
            out.scene.expert_pool = all_experts(cfg);
            const BasicVector<T> zero_g(cfg.n_routes, T(0.0));
            const auto& W = params(names::inst_w);
            const auto& b = params(names::inst_b);
            for (std::size_t i = 0; i < queries.size(); ++i) {
                const BasicVector<T> q = lift<T>(queries[i].span());
                auto a = instance_route<T>(q.span(), zero_g.span(), out.scene.expert_pool, W, b.flat(), cfg);
                a.query_index = i;
                out.outputs.push_back(aggregate<T>(params, a, q.span()));
                out.assignments.push_back(std::move(a));
            }
            break;
        }
        case VariantPolicy::token_moe: {
            out.scene.expert_pool = all_experts(cfg);
            const auto& W = params(names::token_w);
            const auto& b = params(names::token_b);
            for (std::size_t i = 0; i < queries.size(); ++i) {
                const BasicVector<T> q = lift<T>(queries[i].span());
                auto a = token_route<T>(q.span(), W, b.flat(), cfg);
                a.query_index = i;
                out.outputs.push_back(aggregate<T>(params, a, q.span()));
                out.assignments.push_back(std::move(a));
            }
            for (std::size_t r = 0; r < H.rows(); ++r) {
                const BasicVector<T> x = lift<T>(H.row(r));
                auto a = token_route<T>(x.span(), W, b.flat(), cfg);
                a.query_index = r;
                out.token_assignments.push_back(std::move(a));
            }
            break;
        }
        case VariantPolicy::scene_only: {
            if (H.cols() != cfg.scene_dim) throw DimensionError("scene_only: feature width differs from d_g");
            const Vector x_global = pool_scene(H);
            out.scene = scene_route<T>(x_global.span(), params(names::scene_w), params(names::scene_b).flat(), cfg);
            const BasicVector<T> g_hat = project_scene_to_experts(out.scene, cfg);
            BasicRoutingAssignment<T> shared;
            shared.e = g_hat;
            shared.masked = g_hat;
            shared.selected = out.scene.expert_pool;
            shared.weights = BasicVector<T>(shared.selected.size());
            for (std::size_t i = 0; i < shared.selected.size(); ++i) shared.weights[i] = g_hat[shared.selected[i]];
            for (std::size_t i = 0; i < queries.size(); ++i) {
                const BasicVector<T> q = lift<T>(queries[i].span());
                BasicRoutingAssignment<T> a = shared;
                a.query_index = i;
                out.outputs.push_back(aggregate<T>(params, a, q.span()));
                out.assignments.push_back(std::move(a));
            }
            break;
        }
    }
    return out;
}

struct ComputeCost {
    std::size_t total_params = 0;
    std::size_t active_params_per_query = 0;
    std::size_t router_params = 0;
    std::size_t flops_per_query = 0;
    std::size_t flops_per_scene = 0;  // scene router work, shared by all queries of a scene

    bool operator==(const ComputeCost&) const = default;
};

/// Closed-form costs.
///
/// A linear map m x n counts 2mn FLOPs (two per multiply-add, bias folded in),
/// the activation one per hidden unit, softmax 3n, masking n, top-k selection
/// n*k comparisons, renormalization 2k and the weighted combine 2d per expert.
/// Feature pooling is excluded.
inline std::size_t expert_param_count(const MoEConfig& cfg) {
    return 2 * cfg.dim * cfg.hidden + cfg.dim + cfg.hidden;
}

inline std::size_t expert_flops(const MoEConfig& cfg) { return 4 * cfg.dim * cfg.hidden + cfg.hidden; }

/// Largest pool any choice of K_s routes can produce.
inline std::size_t max_pool_size(const MoEConfig& cfg) {
    std::size_t best = 0;
    std::vector<std::size_t> pick;
    auto visit = [&](auto&& self, std::size_t start) -> void {
        if (pick.size() == cfg.top_routes) {
            best = std::max(best, pool_of(cfg, pick).size());
            return;
        }
        for (std::size_t r = start; r < cfg.n_routes; ++r) {
            pick.push_back(r);
            self(self, r + 1);
            pick.pop_back();
        }
    };
    visit(visit, 0);
    return best;
}

inline ComputeCost count_params_flops(VariantPolicy policy, const MoEConfig& cfg) {
    const std::size_t d = cfg.dim;
    const std::size_t ne = cfg.n_experts;
    const std::size_t k = cfg.top_k;
    const std::size_t pe = expert_param_count(cfg);
    const std::size_t fe = expert_flops(cfg);
    const std::size_t scene_router = cfg.n_routes * cfg.scene_dim + cfg.n_routes;
    const std::size_t inst_router = ne * (d + cfg.n_routes) + ne;
    const std::size_t token_router = ne * d + ne;
    const std::size_t scene_flops =
        2 * cfg.n_routes * cfg.scene_dim + 3 * cfg.n_routes + cfg.n_routes * cfg.top_routes;

    ComputeCost c;
    switch (policy) {
        case VariantPolicy::dense:
            c.total_params = pe;
            c.active_params_per_query = pe;
            c.flops_per_query = fe;
            break;
        case VariantPolicy::token_moe:
            c.router_params = token_router;
            c.total_params = ne * pe + token_router;
            c.active_params_per_query = k * pe + token_router;
            c.flops_per_query = 2 * ne * d + 3 * ne + ne * k + 2 * k + k * (fe + 2 * d);
            break;
        case VariantPolicy::instance_only:
            c.router_params = inst_router;
            c.total_params = ne * pe + inst_router;
            c.active_params_per_query = k * pe + inst_router;
            c.flops_per_query = 2 * ne * (d + cfg.n_routes) + 3 * ne + ne * k + 2 * k + k * (fe + 2 * d);
            break;
        case VariantPolicy::scene_only: {
            const std::size_t pool = max_pool_size(cfg);
            c.router_params = scene_router;
            c.total_params = ne * pe + scene_router;
            c.active_params_per_query = pool * pe + scene_router;
            c.flops_per_query = pool * (fe + 2 * d);
            c.flops_per_scene = scene_flops + 2 * ne;
            break;
        }
        case VariantPolicy::hierarchical:
            c.router_params = scene_router + inst_router;
            c.total_params = ne * pe + scene_router + inst_router;
            c.active_params_per_query = k * pe + scene_router + inst_router;
            c.flops_per_query =
                2 * ne * (d + cfg.n_routes) + 3 * ne + ne + ne * k + 2 * k + k * (fe + 2 * d);
            c.flops_per_scene = scene_flops;
            break;
    }
    return c;
}

}  // namespace himoe
