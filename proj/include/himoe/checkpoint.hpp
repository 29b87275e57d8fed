#pragma once
// JSON checkpoints: resolved MoE config, policy, seed and every parameter block.

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "himoe/config.hpp"
#include "himoe/errors.hpp"
#include "himoe/params.hpp"

namespace himoe {

inline nlohmann::json to_json(const MoEConfig& c) {
    return {{"n_experts", c.n_experts},   {"top_k", c.top_k},
            {"n_routes", c.n_routes},     {"top_routes", c.top_routes},
            {"dim", c.dim},               {"scene_dim", c.scene_dim},
            {"hidden", c.hidden},         {"tau_scene", c.tau_scene},
            {"tau_query", c.tau_query},   {"route_experts", c.route_experts},
            {"route_labels", c.route_labels}};
}

inline MoEConfig moe_config_from_json(const nlohmann::json& j) {
    MoEConfig c;
    c.n_experts = j.at("n_experts").get<std::size_t>();
    c.top_k = j.at("top_k").get<std::size_t>();
    c.n_routes = j.at("n_routes").get<std::size_t>();
    c.top_routes = j.at("top_routes").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.scene_dim = j.at("scene_dim").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.tau_scene = j.at("tau_scene").get<double>();
    c.tau_query = j.at("tau_query").get<double>();
    c.route_experts = j.at("route_experts").get<std::vector<std::vector<std::size_t>>>();
    c.route_labels = j.at("route_labels").get<std::vector<std::string>>();
    return c;
}

struct Checkpoint {
    MoEConfig moe;
    VariantPolicy policy = VariantPolicy::hierarchical;
    std::uint64_t seed = 0;
    ParamSet params;
};

inline nlohmann::json to_json(const Checkpoint& ck) {
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, m] : ck.params.blocks())
        tensors[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.flat()}};
    return {{"format", "himoe-checkpoint-1"},
            {"moe", to_json(ck.moe)},
            {"policy", to_string(ck.policy)},
            {"seed", ck.seed},
            {"tensors", tensors}};
}

/// Rejects tensors whose shape disagrees with the stored config.
inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    Checkpoint ck;
    try {
        ck.moe = resolve(moe_config_from_json(j.at("moe")));
        ck.policy = parse_policy(j.at("policy").get<std::string>());
        ck.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& [name, t] : j.at("tensors").items()) {
            const auto rows = t.at("rows").get<std::size_t>();
            const auto cols = t.at("cols").get<std::size_t>();
            const auto data = t.at("data").get<std::vector<double>>();
            if (data.size() != rows * cols)
                throw ConfigError("checkpoint: block '" + name + "' holds " + std::to_string(data.size()) +
                                  " values for shape " + shape_str(rows, cols));
            Matrix m(rows, cols);
            std::copy(data.begin(), data.end(), m.flat().begin());
            ck.params.add(name, std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("checkpoint: malformed JSON: ") + e.what());
    }
    validate_params(ck.params, ck.policy, ck.moe);
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write checkpoint '" + path + "'");
    os << to_json(ck).dump() << '\n';
    if (!os) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read checkpoint '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("checkpoint '" + path + "': " + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace himoe
