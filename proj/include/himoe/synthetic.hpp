#pragma once
// Detection-like surrogate task with latent scene and instance types.
//
// Each scene has a latent type s; its feature rows scatter around a scene
// center, so the pooled descriptor identifies s. Each query has a latent
// instance type t (small / occluded / tail / easy analogues) and sits around a
// type center. Its regression target is
//
//     A_t q + nonlinearity * tanh(B_t q) + scene_shift * o_s
//
// with A_t a scaled random orthogonal matrix, B_t Gaussian and o_s a unit
// vector per scene type. Per-type maps make specialization useful; the scene
// offset can only be predicted with scene context.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "himoe/errors.hpp"
#include "himoe/numerics.hpp"
#include "himoe/params.hpp"

namespace himoe {

inline const std::vector<std::string>& instance_type_names() {
    static const std::vector<std::string> kNames = {"small", "occluded", "tail", "easy"};
    return kNames;
}

struct GeneratorConfig {
    std::size_t dim = 16;
    std::size_t scene_dim = 16;
    std::size_t n_queries = 16;
    std::size_t n_tokens = 8;
    std::size_t n_scene_types = 4;
    std::size_t n_instance_types = 4;
    double scene_margin = 3.0;     // scene centers sit margin * e_s, pairwise margin*sqrt(2) apart
    double feature_noise = 1.0;
    double type_separation = 2.0;  // norm of each instance-type center in query space
    double query_noise = 0.5;
    double map_gain = 1.0;         // A_t = map_gain * orthogonal
    double nonlinearity = 0.5;
    double scene_shift = 3.0;
    double scene_skew = 0.0;       // 0 = uniform; 1 = always scene type 0
    double type_skew = 0.0;        // 0 = uniform; 1 = always the last instance type

    bool operator==(const GeneratorConfig&) const = default;
};

inline void validate(const GeneratorConfig& g) {
    auto fail = [](const std::string& key, const std::string& what) { throw ConfigError(key + ": " + what); };
    if (g.dim < 1) fail("data.dim", "must be >= 1");
    if (g.n_queries < 1) fail("data.n_queries", "must be >= 1");
    if (g.n_tokens < 1) fail("data.n_tokens", "must be >= 1");
    if (g.n_scene_types < 1 || g.n_scene_types > g.scene_dim)
        fail("data.n_scene_types", "must lie in [1, d_g]");
    if (g.n_instance_types < 1) fail("data.n_instance_types", "must be >= 1");
    if (!(g.scene_margin >= 0.0)) fail("data.scene_margin", "must be >= 0");
    if (!(g.feature_noise >= 0.0)) fail("data.feature_noise", "must be >= 0");
    if (!(g.query_noise >= 0.0)) fail("data.query_noise", "must be >= 0");
    if (!(g.scene_skew >= 0.0 && g.scene_skew <= 1.0)) fail("data.scene_skew", "must lie in [0, 1]");
    if (!(g.type_skew >= 0.0 && g.type_skew <= 1.0)) fail("data.type_skew", "must lie in [0, 1]");
}

struct SyntheticScene {
    Matrix H;                        // n_tokens x d_g encoder-feature stand-in
    std::vector<Vector> queries;     // n_queries x d
    std::vector<Vector> targets;     // n_queries x d
    int scene_type = 0;
    std::vector<int> instance_types;

    bool operator==(const SyntheticScene&) const = default;
};

/// One training step's worth of scenes.
struct SyntheticBatch {
    std::vector<SyntheticScene> scenes;

    std::size_t n_queries() const {
        std::size_t n = 0;
        for (const auto& s : scenes) n += s.queries.size();
        return n;
    }
    bool operator==(const SyntheticBatch&) const = default;
};

/// Gram-Schmidt on a Gaussian matrix.
inline Matrix random_orthogonal(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix q(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        std::vector<double> v(n);
        for (auto& x : v) x = dist(rng);
        for (std::size_t p = 0; p < c; ++p) {
            double dot = 0.0;
            for (std::size_t r = 0; r < n; ++r) dot += v[r] * q(r, p);
            for (std::size_t r = 0; r < n; ++r) v[r] -= dot * q(r, p);
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (std::size_t r = 0; r < n; ++r) q(r, c) = v[r] / norm;
    }
    return q;
}

/// Ground truth of the surrogate task for one seed.
class SyntheticTask {
public:
    SyntheticTask(GeneratorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
        validate(cfg_);
        auto rng = make_rng(seed_, stream::kTaskMaps);
        std::normal_distribution<double> n01(0.0, 1.0);
        const std::size_t d = cfg_.dim;
        for (std::size_t t = 0; t < cfg_.n_instance_types; ++t) {
            Matrix a = random_orthogonal(d, rng);
            for (auto& x : a.flat()) x *= cfg_.map_gain;
            linear_maps_.push_back(std::move(a));
            nonlinear_maps_.push_back(random_matrix(d, d, 1.0 / std::sqrt(double(d)), rng));
            type_centers_.push_back(random_direction(d, cfg_.type_separation, rng, n01));
        }
        for (std::size_t s = 0; s < cfg_.n_scene_types; ++s) {
            scene_offsets_.push_back(random_direction(d, cfg_.scene_shift, rng, n01));
            Vector c(cfg_.scene_dim);
            c[s] = cfg_.scene_margin;
            scene_centers_.push_back(std::move(c));
        }
    }

    const GeneratorConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    const Vector& scene_center(std::size_t s) const { return scene_centers_.at(s); }
    const Matrix& linear_map(std::size_t t) const { return linear_maps_.at(t); }

    /// Deterministic target for (query, scene type, instance type).
    Vector target(const Vector& q, std::size_t scene_type, std::size_t instance_type) const {
        const std::size_t d = cfg_.dim;
        const Matrix& a = linear_maps_.at(instance_type);
        const Matrix& b = nonlinear_maps_.at(instance_type);
        const Vector& o = scene_offsets_.at(scene_type);
        Vector out(d);
        for (std::size_t r = 0; r < d; ++r) {
            double lin = 0.0;
            double nl = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                lin += a(r, c) * q[c];
                nl += b(r, c) * q[c];
            }
            out[r] = lin + cfg_.nonlinearity * std::tanh(nl) + o[r];
        }
        return out;
    }

    /// Scene `slot` of batch `batch_index`; fully determined by (seed, batch_index, slot).
    SyntheticScene scene(std::uint64_t batch_index, std::size_t slot) const {
        auto rng = make_rng(seed_, stream::kBatch, (batch_index << 8) ^ slot);
        std::normal_distribution<double> n01(0.0, 1.0);
        SyntheticScene sc;
        sc.scene_type = static_cast<int>(skewed_pick(cfg_.n_scene_types, cfg_.scene_skew, 0, rng));
        const Vector& center = scene_centers_[static_cast<std::size_t>(sc.scene_type)];
        sc.H = Matrix(cfg_.n_tokens, cfg_.scene_dim);
        for (std::size_t r = 0; r < cfg_.n_tokens; ++r)
            for (std::size_t c = 0; c < cfg_.scene_dim; ++c) sc.H(r, c) = center[c] + cfg_.feature_noise * n01(rng);
        for (std::size_t i = 0; i < cfg_.n_queries; ++i) {
            const std::size_t t = skewed_pick(cfg_.n_instance_types, cfg_.type_skew, cfg_.n_instance_types - 1, rng);
            Vector q = type_centers_[t];
            for (auto& x : q) x += cfg_.query_noise * n01(rng);
            sc.targets.push_back(target(q, static_cast<std::size_t>(sc.scene_type), t));
            sc.queries.push_back(std::move(q));
            sc.instance_types.push_back(static_cast<int>(t));
        }
        return sc;
    }

    SyntheticBatch batch(std::uint64_t batch_index, std::size_t n_scenes) const {
        SyntheticBatch b;
        for (std::size_t s = 0; s < n_scenes; ++s) b.scenes.push_back(scene(batch_index, s));
        return b;
    }

    /// Shared probe inputs for the diversity term, drawn like queries.
    std::vector<Vector> probes(std::uint64_t epoch, std::size_t count) const {
        auto rng = make_rng(seed_, stream::kProbes, epoch);
        std::normal_distribution<double> n01(0.0, 1.0);
        std::uniform_int_distribution<std::size_t> type(0, cfg_.n_instance_types - 1);
        std::vector<Vector> out;
        for (std::size_t m = 0; m < count; ++m) {
            Vector q = type_centers_[type(rng)];
            for (auto& x : q) x += cfg_.query_noise * n01(rng);
            out.push_back(std::move(q));
        }
        return out;
    }

private:
    static Vector random_direction(std::size_t d, double norm, std::mt19937_64& rng,
                                   std::normal_distribution<double>& n01) {
        Vector v(d);
        double s = 0.0;
        for (auto& x : v) {
            x = n01(rng);
            s += x * x;
        }
        s = std::sqrt(s);
        for (auto& x : v) x *= norm / s;
        return v;
    }

    /// Uniform over n categories, with mass `skew` moved onto `favoured`.
    static std::size_t skewed_pick(std::size_t n, double skew, std::size_t favoured, std::mt19937_64& rng) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        if (skew > 0.0 && u(rng) < skew) return favoured;
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        return pick(rng);
    }

    GeneratorConfig cfg_;
    std::uint64_t seed_;
    std::vector<Matrix> linear_maps_;
    std::vector<Matrix> nonlinear_maps_;
    std::vector<Vector> type_centers_;
    std::vector<Vector> scene_offsets_;
    std::vector<Vector> scene_centers_;
};

/// Batch `batch_index` of `n_scenes` scenes for the given config and seed.
inline SyntheticBatch generate_batch(const GeneratorConfig& cfg, std::uint64_t seed, std::uint64_t batch_index,
                                     std::size_t n_scenes) {
    return SyntheticTask(cfg, seed).batch(batch_index, n_scenes);
}

}  // namespace himoe
