#pragma once
// Flat dotted-key run configuration and the run manifest.
//
// Config files hold one `key = value` per line; `#` starts a comment. A JSON
// manifest written by a previous run is accepted in place of a config file.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "himoe/checkpoint.hpp"
#include "himoe/config.hpp"
#include "himoe/diagnostics.hpp"
#include "himoe/errors.hpp"
#include "himoe/losses.hpp"
#include "himoe/params.hpp"
#include "himoe/synthetic.hpp"
#include "himoe/trainer.hpp"

#ifndef HIMOE_VERSION
#define HIMOE_VERSION "0.1.0"
#endif

namespace himoe {

struct CheckConfig {
    double eps = 1e-5;
    double tolerance = 1e-4;
    std::size_t scenes = 2;
    std::size_t probes = 8;
    double router_std = 0.5;  // large enough that routing is not near-uniform at the check point

    bool operator==(const CheckConfig&) const = default;
};

struct SweepConfig {
    std::vector<std::size_t> k_values = {1, 2, 4};
    std::size_t warmup = 5;
    std::size_t timed = 30;

    bool operator==(const SweepConfig&) const = default;
};

struct RunConfig {
    MoEConfig moe;
    LossConfig loss;
    TrainerConfig train;
    GeneratorConfig data;
    InitConfig init;
    VariantPolicy policy = VariantPolicy::hierarchical;
    SweepConfig sweep;
    CheckConfig check;
    std::uint64_t seed = 1;

    bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(trim(cur));
    return out;
}

template <class N>
N parse_number(const std::string& key, const std::string& text) {
    const std::string v = trim(text);
    N out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError(key + ": cannot parse '" + text + "' as a number");
    return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
    std::vector<std::size_t> out;
    if (trim(text).empty()) return out;
    for (const auto& part : split(text, ',')) out.push_back(parse_number<std::size_t>(key, part));
    return out;
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

}  // namespace detail

/// Every accepted key, in manifest order.
inline const std::map<std::string, detail::Field>& config_fields() {
    using detail::Field;
    using detail::parse_number;
    static const std::map<std::string, Field> kFields = [] {
        std::map<std::string, Field> f;
        auto sz = [&f](const std::string& key, auto member) {
            f[key] = {[key, member](RunConfig& c, const std::string& v) { member(c) = parse_number<std::size_t>(key, v); },
                      [member](const RunConfig& c) { return std::to_string(member(c)); }};
        };
        auto real = [&f](const std::string& key, auto member) {
            f[key] = {[key, member](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(key, v); },
                      [member](const RunConfig& c) { return format_double(member(c)); }};
        };
        sz("moe.n_experts", [](auto& c) -> auto& { return c.moe.n_experts; });
        sz("moe.top_k", [](auto& c) -> auto& { return c.moe.top_k; });
        sz("moe.n_routes", [](auto& c) -> auto& { return c.moe.n_routes; });
        sz("moe.top_routes", [](auto& c) -> auto& { return c.moe.top_routes; });
        sz("moe.dim", [](auto& c) -> auto& { return c.moe.dim; });
        sz("moe.scene_dim", [](auto& c) -> auto& { return c.moe.scene_dim; });
        sz("moe.hidden", [](auto& c) -> auto& { return c.moe.hidden; });
        real("moe.tau_scene", [](auto& c) -> auto& { return c.moe.tau_scene; });
        real("moe.tau_query", [](auto& c) -> auto& { return c.moe.tau_query; });
        // Groups separated by ';', experts by ','. Empty means contiguous partition.
        f["moe.route_experts"] = {
            [](RunConfig& c, const std::string& v) {
                c.moe.route_experts.clear();
                if (detail::trim(v).empty()) return;
                for (const auto& g : detail::split(v, ';'))
                    c.moe.route_experts.push_back(detail::parse_sizes("moe.route_experts", g));
            },
            [](const RunConfig& c) {
                std::string s;
                for (std::size_t r = 0; r < c.moe.route_experts.size(); ++r)
                    s += (r ? ";" : "") + detail::join_sizes(c.moe.route_experts[r]);
                return s;
            }};
        f["moe.route_labels"] = {
            [](RunConfig& c, const std::string& v) {
                c.moe.route_labels.clear();
                if (!detail::trim(v).empty()) c.moe.route_labels = detail::split(v, ',');
            },
            [](const RunConfig& c) {
                std::string s;
                for (std::size_t r = 0; r < c.moe.route_labels.size(); ++r) s += (r ? "," : "") + c.moe.route_labels[r];
                return s;
            }};

        real("loss.lambda1", [](auto& c) -> auto& { return c.loss.lambda1; });
        real("loss.lambda2", [](auto& c) -> auto& { return c.loss.lambda2; });
        f["loss.balance_surrogate"] = {
            [](RunConfig& c, const std::string& v) { c.loss.surrogate = parse_surrogate(detail::trim(v)); },
            [](const RunConfig& c) { return to_string(c.loss.surrogate); }};

        f["train.policy"] = {[](RunConfig& c, const std::string& v) { c.policy = parse_policy(detail::trim(v)); },
                             [](const RunConfig& c) { return to_string(c.policy); }};
        f["train.optimizer"] = {
            [](RunConfig& c, const std::string& v) { c.train.optimizer = parse_optimizer(detail::trim(v)); },
            [](const RunConfig& c) { return to_string(c.train.optimizer); }};
        sz("train.steps", [](auto& c) -> auto& { return c.train.steps; });
        sz("train.batch", [](auto& c) -> auto& { return c.train.batch; });
        real("train.lr", [](auto& c) -> auto& { return c.train.lr; });
        real("train.clip", [](auto& c) -> auto& { return c.train.clip; });
        real("train.beta1", [](auto& c) -> auto& { return c.train.beta1; });
        real("train.beta2", [](auto& c) -> auto& { return c.train.beta2; });
        real("train.adam_eps", [](auto& c) -> auto& { return c.train.adam_eps; });
        real("train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; });
        sz("train.epoch_steps", [](auto& c) -> auto& { return c.train.epoch_steps; });
        sz("train.probes", [](auto& c) -> auto& { return c.train.probes; });
        sz("train.eval_batches", [](auto& c) -> auto& { return c.train.eval_batches; });

        sz("data.n_queries", [](auto& c) -> auto& { return c.data.n_queries; });
        sz("data.n_tokens", [](auto& c) -> auto& { return c.data.n_tokens; });
        sz("data.n_scene_types", [](auto& c) -> auto& { return c.data.n_scene_types; });
        sz("data.n_instance_types", [](auto& c) -> auto& { return c.data.n_instance_types; });
        real("data.scene_margin", [](auto& c) -> auto& { return c.data.scene_margin; });
        real("data.feature_noise", [](auto& c) -> auto& { return c.data.feature_noise; });
        real("data.type_separation", [](auto& c) -> auto& { return c.data.type_separation; });
        real("data.query_noise", [](auto& c) -> auto& { return c.data.query_noise; });
        real("data.map_gain", [](auto& c) -> auto& { return c.data.map_gain; });
        real("data.nonlinearity", [](auto& c) -> auto& { return c.data.nonlinearity; });
        real("data.scene_shift", [](auto& c) -> auto& { return c.data.scene_shift; });
        real("data.scene_skew", [](auto& c) -> auto& { return c.data.scene_skew; });
        real("data.type_skew", [](auto& c) -> auto& { return c.data.type_skew; });

        real("init.router_std", [](auto& c) -> auto& { return c.init.router_std; });
        real("init.expert_scale", [](auto& c) -> auto& { return c.init.expert_scale; });

        f["sweep.k"] = {[](RunConfig& c, const std::string& v) { c.sweep.k_values = detail::parse_sizes("sweep.k", v); },
                        [](const RunConfig& c) { return detail::join_sizes(c.sweep.k_values); }};
        sz("sweep.warmup", [](auto& c) -> auto& { return c.sweep.warmup; });
        sz("sweep.timed", [](auto& c) -> auto& { return c.sweep.timed; });

        real("check.eps", [](auto& c) -> auto& { return c.check.eps; });
        real("check.tolerance", [](auto& c) -> auto& { return c.check.tolerance; });
        sz("check.scenes", [](auto& c) -> auto& { return c.check.scenes; });
        sz("check.probes", [](auto& c) -> auto& { return c.check.probes; });
        real("check.router_std", [](auto& c) -> auto& { return c.check.router_std; });

        f["run.seed"] = {
            [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("run.seed", v); },
            [](const RunConfig& c) { return std::to_string(c.seed); }};
        return f;
    }();
    return kFields;
}

/// Sets one key. Unknown keys and unparsable values throw ConfigError naming the key.
inline void set_value(RunConfig& c, const std::string& key, const std::string& value) {
    const auto& fields = config_fields();
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError(key + ": unknown configuration key");
    try {
        it->second.set(c, value);
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        if (msg.rfind(key, 0) == 0) throw;
        throw ConfigError(key + ": " + msg);
    }
}

/// "key=value" as given on the command line.
inline void apply_override(RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--set: expected key=value, got '" + assignment + "'");
    set_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Resolves derived fields and validates every section.
inline RunConfig finalize(RunConfig c) {
    c.moe = resolve(c.moe);
    validate(c.loss);
    c.train.seed = c.seed;
    validate(c.train);
    c.data.dim = c.moe.dim;
    c.data.scene_dim = c.moe.scene_dim;
    validate(c.data);
    if (!(c.init.router_std >= 0.0)) throw ConfigError("init.router_std: must be >= 0");
    if (!(c.init.expert_scale > 0.0)) throw ConfigError("init.expert_scale: must be > 0");
    if (c.sweep.timed < 1) throw ConfigError("sweep.timed: must be >= 1");
    if (!(c.check.eps > 0.0)) throw ConfigError("check.eps: must be > 0");
    if (!(c.check.tolerance > 0.0)) throw ConfigError("check.tolerance: must be > 0");
    if (c.check.scenes < 1) throw ConfigError("check.scenes: must be >= 1");
    if (c.check.probes < 1) throw ConfigError("check.probes: must be >= 1");
    return c;
}

/// Flat key -> value text for every key.
inline std::map<std::string, std::string> to_flat(const RunConfig& c) {
    std::map<std::string, std::string> out;
    for (const auto& [key, field] : config_fields()) out[key] = field.get(c);
    return out;
}

inline void apply_flat(RunConfig& c, const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) set_value(c, k, v);
}

inline std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& origin) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        ++n;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(n) + ": expected 'key = value'");
        kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    return kv;
}

/// Reads a key=value file, or the "config" object of a JSON manifest.
inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    const std::string text = ss.str();
    RunConfig c;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path + ": " + e.what());
        }
        const auto& cfg = j.contains("config") ? j.at("config") : j;
        std::map<std::string, std::string> kv;
        for (const auto& [k, v] : cfg.items()) kv[k] = v.is_string() ? v.get<std::string>() : v.dump();
        apply_flat(c, kv);
    } else {
        apply_flat(c, parse_config_text(text, path));
    }
    return c;
}

/// Everything needed to rerun a command: resolved config, seed, overrides as
/// typed, artifact paths and timings.
struct RunManifest {
    std::string command;
    RunConfig config;
    std::vector<std::string> overrides;
    std::string config_path;
    std::map<std::string, std::string> artifacts;
    std::map<std::string, double> timings_s;
    std::string status = "started";
    std::string message;
};

inline nlohmann::json to_json(const RunManifest& m) {
    nlohmann::json cfg = nlohmann::json::object();
    for (const auto& [k, v] : to_flat(m.config)) cfg[k] = v;
    return {{"tool", "himoe"},
            {"version", HIMOE_VERSION},
            {"command", m.command},
            {"seed", m.config.seed},
            {"config", cfg},
            {"config_path", m.config_path},
            {"overrides", m.overrides},
            {"artifacts", m.artifacts},
            {"timings_s", m.timings_s},
            {"status", m.status},
            {"message", m.message}};
}

inline void write_manifest(const std::string& path, const RunManifest& m) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest '" + path + "'");
    os << to_json(m).dump(2) << '\n';
    if (!os) throw IoError("write failed for '" + path + "'");
}

}  // namespace himoe
