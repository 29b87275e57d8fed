#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "himoe/errors.hpp"

namespace himoe {

/// Routing hyperparameters of one HI-MoE block.
struct MoEConfig {
    std::size_t n_experts = 8;      // N_e
    std::size_t top_k = 2;          // K
    std::size_t n_routes = 4;       // N_s
    std::size_t top_routes = 2;     // K_s
    std::size_t dim = 16;           // d, query embedding width
    std::size_t scene_dim = 16;     // d_g, encoder feature width
    std::size_t hidden = 32;        // h, expert hidden width
    double tau_scene = 1.0;         // tau_s
    double tau_query = 1.0;         // tau_q (written tau_i in the routing equation)
    std::vector<std::vector<std::size_t>> route_experts;  // empty -> contiguous partition
    std::vector<std::string> route_labels;                // diagnostics only

    bool operator==(const MoEConfig&) const = default;
};

/// Equal contiguous partition of `n_experts` into `n_routes` groups. When the
/// division is uneven the first groups get one extra expert.
inline std::vector<std::vector<std::size_t>> contiguous_partition(std::size_t n_experts,
                                                                  std::size_t n_routes) {
    std::vector<std::vector<std::size_t>> groups(n_routes);
    if (n_routes == 0) return groups;
    const std::size_t base = n_experts / n_routes;
    const std::size_t extra = n_experts % n_routes;
    std::size_t next = 0;
    for (std::size_t r = 0; r < n_routes; ++r) {
        const std::size_t len = base + (r < extra ? 1 : 0);
        for (std::size_t j = 0; j < len; ++j) groups[r].push_back(next++);
    }
    return groups;
}

inline std::vector<std::string> default_route_labels(std::size_t n_routes) {
    static const std::vector<std::string> kNamed = {"indoor", "outdoor", "crowd", "generalist"};
    std::vector<std::string> out;
    for (std::size_t r = 0; r < n_routes; ++r)
        out.push_back(n_routes == kNamed.size() ? kNamed[r] : "route" + std::to_string(r));
    return out;
}

/// Fills defaulted fields and checks every invariant. Throws ConfigError whose
/// message starts with the offending key.
inline MoEConfig resolve(MoEConfig cfg) {
    auto fail = [](const std::string& key, const std::string& what) {
        throw ConfigError(key + ": " + what);
    };
    if (cfg.n_experts < 1) fail("moe.n_experts", "must be >= 1");
    if (cfg.n_routes < 1) fail("moe.n_routes", "must be >= 1");
    if (cfg.top_k < 1 || cfg.top_k > cfg.n_experts)
        fail("moe.top_k", "must satisfy 1 <= K <= N_e (K=" + std::to_string(cfg.top_k) +
                              ", N_e=" + std::to_string(cfg.n_experts) + ")");
    if (cfg.top_routes < 1 || cfg.top_routes > cfg.n_routes)
        fail("moe.top_routes", "must satisfy 1 <= K_s <= N_s (K_s=" + std::to_string(cfg.top_routes) +
                                   ", N_s=" + std::to_string(cfg.n_routes) + ")");
    if (cfg.dim < 1) fail("moe.dim", "must be >= 1");
    if (cfg.scene_dim < 1) fail("moe.scene_dim", "must be >= 1");
    if (cfg.hidden < 1) fail("moe.hidden", "must be >= 1");
    if (!(cfg.tau_scene > 0.0)) fail("moe.tau_scene", "must be > 0");
    if (!(cfg.tau_query > 0.0)) fail("moe.tau_query", "must be > 0");

    if (cfg.route_experts.empty()) {
        if (cfg.n_routes > cfg.n_experts)
            fail("moe.route_experts", "default partition needs N_s <= N_e");
        cfg.route_experts = contiguous_partition(cfg.n_experts, cfg.n_routes);
    }
    if (cfg.route_experts.size() != cfg.n_routes)
        fail("moe.route_experts", "has " + std::to_string(cfg.route_experts.size()) +
                                      " groups, expected N_s=" + std::to_string(cfg.n_routes));
    std::vector<bool> covered(cfg.n_experts, false);
    for (auto& group : cfg.route_experts) {
        if (group.empty()) fail("moe.route_experts", "every route needs at least one expert");
        std::sort(group.begin(), group.end());
        if (std::adjacent_find(group.begin(), group.end()) != group.end())
            fail("moe.route_experts", "duplicate expert inside a route");
        for (std::size_t e : group) {
            if (e >= cfg.n_experts)
                fail("moe.route_experts", "expert index " + std::to_string(e) + " outside [0, N_e)");
            covered[e] = true;
        }
    }
    for (std::size_t e = 0; e < cfg.n_experts; ++e)
        if (!covered[e])
            fail("moe.route_experts", "expert " + std::to_string(e) + " is unreachable from every route");

    // Every choice of K_s routes must offer at least K experts.
    std::vector<std::size_t> pick;
    std::function<void(std::size_t)> visit = [&](std::size_t start) {
        if (pick.size() == cfg.top_routes) {
            std::set<std::size_t> pool;
            for (std::size_t r : pick) pool.insert(cfg.route_experts[r].begin(), cfg.route_experts[r].end());
            if (pool.size() < cfg.top_k)
                fail("moe.route_experts", "some choice of K_s routes yields a pool of " +
                                              std::to_string(pool.size()) + " < K experts");
            return;
        }
        for (std::size_t r = start; r < cfg.n_routes; ++r) {
            pick.push_back(r);
            visit(r + 1);
            pick.pop_back();
        }
    };
    visit(0);

    if (cfg.route_labels.empty()) cfg.route_labels = default_route_labels(cfg.n_routes);
    if (cfg.route_labels.size() != cfg.n_routes)
        fail("moe.route_labels", "needs one label per route");
    return cfg;
}

}  // namespace himoe
