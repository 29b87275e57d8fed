#pragma once
// Training objective: task loss + lambda1 * balance + lambda2 * diversity.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "himoe/errors.hpp"
#include "himoe/numerics.hpp"
#include "himoe/trace.hpp"

namespace himoe {

/// How the balance term is made differentiable during training.
///  soft:       f_k replaced by the mean masked probability P_k.
///  linearized: first-order expansion of the exact loss around the hard
///              frequencies, evaluated at P:
///              sum_k (f_k - 1/N_e) (2 P_k - f_k - 1/N_e).
///              Equals the exact loss when P = f; gradient 2 (f_k - 1/N_e) dP_k.
enum class BalanceSurrogate { soft, linearized };

inline std::string to_string(BalanceSurrogate s) { return s == BalanceSurrogate::soft ? "soft" : "linearized"; }
inline BalanceSurrogate parse_surrogate(const std::string& s) {
    if (s == "soft") return BalanceSurrogate::soft;
    if (s == "linearized") return BalanceSurrogate::linearized;
    throw ConfigError("loss.balance_surrogate: expected soft or linearized, got '" + s + "'");
}

struct LossConfig {
    double lambda1 = 0.01;   // balance weight
    double lambda2 = 0.001;  // diversity weight
    BalanceSurrogate surrogate = BalanceSurrogate::soft;

    bool operator==(const LossConfig&) const = default;
};

inline void validate(const LossConfig& c) {
    if (!(c.lambda1 >= 0.0)) throw ConfigError("loss.lambda1: must be >= 0");
    if (!(c.lambda2 >= 0.0)) throw ConfigError("loss.lambda2: must be >= 0");
}

/// f_k = assignments to expert k / all assignments. Every selected expert of
/// every record is one assignment, so a top-K record contributes K.
struct UtilizationStats {
    std::vector<std::size_t> counts;
    std::vector<double> f;
    std::size_t total = 0;
};

inline UtilizationStats utilization(std::span<const std::vector<std::size_t>> selected_sets, std::size_t n_experts) {
    UtilizationStats u;
    u.counts.assign(n_experts, 0);
    for (const auto& set : selected_sets)
        for (std::size_t k : set) {
            if (k >= n_experts) throw InputError("utilization: expert index " + std::to_string(k) + " >= N_e");
            ++u.counts[k];
            ++u.total;
        }
    u.f.assign(n_experts, 0.0);
    if (u.total == 0) return u;
    for (std::size_t k = 0; k < n_experts; ++k)
        u.f[k] = static_cast<double>(u.counts[k]) / static_cast<double>(u.total);
    return u;
}

inline UtilizationStats utilization(const RoutingTrace& trace, std::size_t n_experts) {
    if (trace.empty()) throw InputError("utilization: empty trace");
    std::vector<std::vector<std::size_t>> sets;
    sets.reserve(trace.records.size());
    for (const auto& r : trace.records) sets.push_back(r.experts);
    return utilization(sets, n_experts);
}

/// sum_k (f_k - 1/N_e)^2
template <class T>
T balance_loss(std::span<const T> f) {
    const double target = 1.0 / static_cast<double>(f.size());
    T acc(0.0);
    for (const T& fk : f) {
        const T dev = fk - target;
        acc += dev * dev;
    }
    return acc;
}

inline double balance_loss(const UtilizationStats& u) { return balance_loss<double>(u.f); }

/// Soft frequency: per-expert mean of the masked routing distributions.
template <class T>
BasicVector<T> soft_utilization(std::span<const BasicVector<T>* const> masked, std::size_t n_experts) {
    BasicVector<T> f(n_experts, T(0.0));
    if (masked.empty()) return f;
    for (const auto* m : masked)
        for (std::size_t k = 0; k < n_experts; ++k) f[k] += (*m)[k];
    const double inv = 1.0 / static_cast<double>(masked.size());
    for (auto& x : f) x *= inv;
    return f;
}

/// Differentiable stand-in for the balance loss. `p` is the soft frequency,
/// `f` the hard one.
template <class T>
T balance_surrogate(std::span<const T> p, std::span<const double> f, BalanceSurrogate kind) {
    if (kind == BalanceSurrogate::soft) return balance_loss<T>(p);
    if (p.size() != f.size()) throw DimensionError("balance_surrogate: length mismatch");
    const double target = 1.0 / static_cast<double>(f.size());
    T acc(0.0);
    for (std::size_t k = 0; k < f.size(); ++k) acc += (f[k] - target) * (2.0 * p[k] - f[k] - target);
    return acc;
}

/// Jensen-Shannon divergence (natural log); terms with zero mass contribute 0.
template <class T>
T js_divergence(std::span<const T> p, std::span<const T> q) {
    using std::log;
    if (p.size() != q.size()) throw DimensionError("js_divergence: length mismatch");
    T acc(0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T m = (p[i] + q[i]) * 0.5;
        if (value_of(p[i]) > 0.0) acc += 0.5 * p[i] * log(p[i] / m);
        if (value_of(q[i]) > 0.0) acc += 0.5 * q[i] * log(q[i] / m);
    }
    return acc;
}

/// Negative mean pairwise JSD. `dists[e][m]` is expert e's distribution on
/// probe m. Each pair's divergence is averaged over the probes.
template <class T>
T diversity_from_distributions(const std::vector<std::vector<BasicVector<T>>>& dists) {
    if (dists.size() < 2) throw ConfigError("diversity_loss: needs at least 2 experts");
    const std::size_t probes = dists.front().size();
    for (const auto& d : dists)
        if (d.size() != probes || probes == 0) throw DimensionError("diversity_loss: ragged probe set");
    T acc(0.0);
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < dists.size(); ++a)
        for (std::size_t b = a + 1; b < dists.size(); ++b) {
            T pair(0.0);
            for (std::size_t m = 0; m < probes; ++m)
                pair += js_divergence<T>(dists[a][m].span(), dists[b][m].span());
            acc += pair / static_cast<double>(probes);
            ++pairs;
        }
    return -acc / static_cast<double>(pairs);
}

/// Expert responses are turned into distributions by a softmax over output coordinates.
template <class T>
T diversity_loss(const std::vector<std::vector<BasicVector<T>>>& outputs) {
    std::vector<std::vector<BasicVector<T>>> dists(outputs.size());
    for (std::size_t e = 0; e < outputs.size(); ++e)
        for (const auto& o : outputs[e]) dists[e].push_back(softmax_temp<T>(o.span(), 1.0));
    return diversity_from_distributions(dists);
}

/// Mean squared error over the coordinates of one prediction.
template <class T>
T squared_error(std::span<const T> y, std::span<const double> target) {
    if (y.size() != target.size()) throw DimensionError("squared_error: length mismatch");
    T acc(0.0);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const T diff = y[i] - target[i];
        acc += diff * diff;
    }
    return acc / static_cast<double>(y.size());
}

template <class T>
T total_loss(const T& task, const T& balance, const T& diversity, const LossConfig& c) {
    return task + c.lambda1 * balance + c.lambda2 * diversity;
}

}  // namespace himoe
