#pragma once
// Named parameter blocks, their lazy binding onto a tape, and seeded init.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "himoe/autodiff.hpp"
#include "himoe/config.hpp"
#include "himoe/errors.hpp"
#include "himoe/numerics.hpp"

namespace himoe {

/// Routing variants compared in the ablation. `hierarchical` is the full block.
enum class VariantPolicy { dense, token_moe, instance_only, scene_only, hierarchical };

inline const std::vector<VariantPolicy>& all_policies() {
    static const std::vector<VariantPolicy> kAll = {VariantPolicy::dense, VariantPolicy::token_moe,
                                                    VariantPolicy::instance_only, VariantPolicy::scene_only,
                                                    VariantPolicy::hierarchical};
    return kAll;
}

inline std::string to_string(VariantPolicy p) {
    switch (p) {
        case VariantPolicy::dense: return "dense";
        case VariantPolicy::token_moe: return "token_moe";
        case VariantPolicy::instance_only: return "instance_only";
        case VariantPolicy::scene_only: return "scene_only";
        case VariantPolicy::hierarchical: return "hierarchical";
    }
    return "?";
}

inline VariantPolicy parse_policy(const std::string& s) {
    for (VariantPolicy p : all_policies())
        if (to_string(p) == s) return p;
    throw ConfigError("train.policy: unknown variant '" + s + "'");
}

namespace names {
inline const std::string scene_w = "scene_router.weight";
inline const std::string scene_b = "scene_router.bias";
inline const std::string inst_w = "instance_router.weight";
inline const std::string inst_b = "instance_router.bias";
inline const std::string token_w = "token_router.weight";
inline const std::string token_b = "token_router.bias";

/// "expert.007.w1" etc; zero padded so lexical order is expert order.
inline std::string expert(std::size_t k, const char* part) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "expert.%03zu.%s", k, part);
    return buf;
}
inline std::string dense(const char* part) { return std::string("dense.") + part; }
}  // namespace names

/// Ordered map of named parameter tensors. Biases are stored as n x 1 matrices.
class ParamSet {
public:
    void add(const std::string& name, Matrix m) { blocks_[name] = std::move(m); }
    bool contains(const std::string& name) const { return blocks_.count(name) != 0; }

    const Matrix& at(const std::string& name) const {
        auto it = blocks_.find(name);
        if (it == blocks_.end()) throw ConfigError("parameter block '" + name + "' not present");
        return it->second;
    }
    Matrix& at(const std::string& name) {
        auto it = blocks_.find(name);
        if (it == blocks_.end()) throw ConfigError("parameter block '" + name + "' not present");
        return it->second;
    }

    const std::map<std::string, Matrix>& blocks() const { return blocks_; }
    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [_, m] : blocks_) n += m.size();
        return n;
    }

    /// All entries concatenated in block-name order.
    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(total_size());
        for (const auto& [_, m] : blocks_) out.insert(out.end(), m.flat().begin(), m.flat().end());
        return out;
    }
    void unflatten(std::span<const double> flat) {
        if (flat.size() != total_size()) throw DimensionError("ParamSet::unflatten: size mismatch");
        std::size_t off = 0;
        for (auto& [_, m] : blocks_) {
            std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), m.size(), m.flat().begin());
            off += m.size();
        }
    }

    bool operator==(const ParamSet&) const = default;

private:
    std::map<std::string, Matrix> blocks_;
};

template <class T>
class ParamBinder;

/// Plain evaluation: hands out the stored tensors directly.
template <>
class ParamBinder<double> {
public:
    explicit ParamBinder(const ParamSet& params) : params_(params) {}
    const Matrix& operator()(const std::string& name) const { return params_.at(name); }

private:
    const ParamSet& params_;
};

/// Taped evaluation: each block becomes leaf variables the first time it is
/// requested, so only blocks that the forward pass actually touches appear in
/// the gradient map.
template <>
class ParamBinder<ad::Real> {
public:
    ParamBinder(const ParamSet& params, ad::Tape& tape) : params_(params), tape_(tape) {}

    const BasicMatrix<ad::Real>& operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const Matrix& src = params_.at(name);
        BasicMatrix<ad::Real> leaf(src.rows(), src.cols());
        for (std::size_t i = 0; i < src.size(); ++i) leaf.flat()[i] = tape_.variable(src.flat()[i]);
        return bound_.emplace(name, std::move(leaf)).first->second;
    }

    std::vector<std::string> touched() const {
        std::vector<std::string> out;
        for (const auto& [n, _] : bound_) out.push_back(n);
        return out;
    }

    /// Gradient per touched block, read off the adjoint vector of a backward pass.
    std::map<std::string, Matrix> gradients(const std::vector<double>& adjoints) const {
        std::map<std::string, Matrix> out;
        for (const auto& [name, leaf] : bound_) {
            Matrix g(leaf.rows(), leaf.cols());
            for (std::size_t i = 0; i < leaf.size(); ++i) g.flat()[i] = adjoints[leaf.flat()[i].index()];
            out.emplace(name, std::move(g));
        }
        return out;
    }

private:
    const ParamSet& params_;
    ad::Tape& tape_;
    std::map<std::string, BasicMatrix<ad::Real>> bound_;
};

/// Stream-separated generator: (seed, tag, index) pick independent sequences.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

namespace stream {
inline constexpr std::uint64_t kSceneRouter = 11;
inline constexpr std::uint64_t kInstanceRouter = 12;
inline constexpr std::uint64_t kTokenRouter = 13;
inline constexpr std::uint64_t kExpert = 14;
inline constexpr std::uint64_t kDense = 15;
inline constexpr std::uint64_t kTaskMaps = 21;
inline constexpr std::uint64_t kBatch = 22;
inline constexpr std::uint64_t kProbes = 23;
}  // namespace stream

struct InitConfig {
    double router_std = 0.01;  // near-uniform initial routing
    double expert_scale = 1.0; // multiplies the 1/sqrt(fan_in) std of expert weights

    bool operator==(const InitConfig&) const = default;
};

inline Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    Matrix m(rows, cols);
    if (stddev == 0.0) return m;
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : m.flat()) x = dist(rng);
    return m;
}

/// Parameter blocks needed by `policy`. Each block family draws from its own
/// stream so expert k is identical across policies and expert counts.
inline ParamSet init_params(VariantPolicy policy, const MoEConfig& cfg, const InitConfig& init,
                            std::uint64_t seed) {
    ParamSet p;
    const std::size_t d = cfg.dim;
    const std::size_t h = cfg.hidden;
    auto add_ffn = [&](auto&& name, std::mt19937_64 rng) {
        p.add(name("w1"), random_matrix(h, d, init.expert_scale / std::sqrt(double(d)), rng));
        p.add(name("b1"), Matrix(h, 1));
        p.add(name("w2"), random_matrix(d, h, init.expert_scale / std::sqrt(double(h)), rng));
        p.add(name("b2"), Matrix(d, 1));
    };
    if (policy == VariantPolicy::dense) {
        add_ffn([](const char* part) { return names::dense(part); }, make_rng(seed, stream::kDense));
        return p;
    }
    for (std::size_t k = 0; k < cfg.n_experts; ++k)
        add_ffn([k](const char* part) { return names::expert(k, part); }, make_rng(seed, stream::kExpert, k));

    if (policy == VariantPolicy::scene_only || policy == VariantPolicy::hierarchical) {
        auto rng = make_rng(seed, stream::kSceneRouter);
        p.add(names::scene_w, random_matrix(cfg.n_routes, cfg.scene_dim, init.router_std, rng));
        p.add(names::scene_b, Matrix(cfg.n_routes, 1));
    }
    if (policy == VariantPolicy::instance_only || policy == VariantPolicy::hierarchical) {
        auto rng = make_rng(seed, stream::kInstanceRouter);
        p.add(names::inst_w, random_matrix(cfg.n_experts, d + cfg.n_routes, init.router_std, rng));
        p.add(names::inst_b, Matrix(cfg.n_experts, 1));
    }
    if (policy == VariantPolicy::token_moe) {
        auto rng = make_rng(seed, stream::kTokenRouter);
        p.add(names::token_w, random_matrix(cfg.n_experts, d, init.router_std, rng));
        p.add(names::token_b, Matrix(cfg.n_experts, 1));
    }
    return p;
}

/// Checks every block `policy` needs is present with the shape `cfg` implies.
inline void validate_params(const ParamSet& p, VariantPolicy policy, const MoEConfig& cfg) {
    const ParamSet ref = init_params(policy, cfg, InitConfig{0.0, 0.0}, 0);
    for (const auto& [name, m] : ref.blocks()) {
        if (!p.contains(name)) throw ConfigError("checkpoint: missing block '" + name + "'");
        const Matrix& got = p.at(name);
        if (got.rows() != m.rows() || got.cols() != m.cols())
            throw ConfigError("checkpoint: block '" + name + "' is " + shape_str(got.rows(), got.cols()) +
                              ", config implies " + shape_str(m.rows(), m.cols()));
    }
    if (p.blocks().size() != ref.blocks().size())
        throw ConfigError("checkpoint: unexpected extra parameter blocks for policy " + to_string(policy));
}

}  // namespace himoe
