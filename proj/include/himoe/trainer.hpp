#pragma once
// End-to-end training on the surrogate task, evaluation, and the
// tape-vs-finite-difference gradient check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "himoe/autodiff.hpp"
#include "himoe/diagnostics.hpp"
#include "himoe/losses.hpp"
#include "himoe/params.hpp"
#include "himoe/synthetic.hpp"
#include "himoe/trace.hpp"
#include "himoe/variants.hpp"

namespace himoe {

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }
inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam" || s == "adamw") return OptimizerKind::adam;
    throw ConfigError("train.optimizer: expected sgd or adam, got '" + s + "'");
}

struct TrainerConfig {
    std::size_t steps = 400;
    std::size_t batch = 8;          // scenes per step
    double lr = 0.01;
    std::uint64_t seed = 1;
    OptimizerKind optimizer = OptimizerKind::adam;
    double clip = 0.1;              // global gradient-norm threshold
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;      // decoupled, adam only
    std::size_t epoch_steps = 50;   // probe set refresh period
    std::size_t probes = 32;
    std::size_t eval_batches = 4;

    bool operator==(const TrainerConfig&) const = default;
};

inline void validate(const TrainerConfig& t) {
    auto fail = [](const std::string& key, const std::string& what) { throw ConfigError(key + ": " + what); };
    if (t.batch < 1) fail("train.batch", "must be >= 1");
    if (!(t.lr > 0.0)) fail("train.lr", "must be > 0");
    if (!(t.clip > 0.0)) fail("train.clip", "must be > 0");
    if (t.epoch_steps < 1) fail("train.epoch_steps", "must be >= 1");
    if (t.probes < 1) fail("train.probes", "must be >= 1");
    if (t.eval_batches < 1) fail("train.eval_batches", "must be >= 1");
    if (!(t.beta1 >= 0.0 && t.beta1 < 1.0)) fail("train.beta1", "must lie in [0, 1)");
    if (!(t.beta2 >= 0.0 && t.beta2 < 1.0)) fail("train.beta2", "must lie in [0, 1)");
    if (!(t.adam_eps > 0.0)) fail("train.adam_eps", "must be > 0");
    if (!(t.weight_decay >= 0.0)) fail("train.weight_decay", "must be >= 0");
}

/// Loss components of one batch. `task`, `balance_soft`, `diversity` and
/// `total` carry gradients when T is ad::Real.
template <class T>
struct Objective {
    T task{0.0};
    T balance_soft{0.0};
    T diversity{0.0};
    T total{0.0};
    double balance_hard = 0.0;
    double entropy = 0.0;
    RoutingTrace trace;  // query records, with per-query loss and latent labels
};

/// Experts that received at least one assignment in the batch, ascending.
template <class T>
std::vector<std::size_t> active_experts(const std::vector<VariantOutput<T>>& outs) {
    std::set<std::size_t> s;
    for (const auto& o : outs) {
        for (const auto& a : o.assignments) s.insert(a.selected.begin(), a.selected.end());
        for (const auto& a : o.token_assignments) s.insert(a.selected.begin(), a.selected.end());
    }
    return {s.begin(), s.end()};
}

template <class T>
T diversity_term(ParamBinder<T>& params, const std::vector<std::size_t>& experts, const std::vector<Vector>& probes) {
    if (experts.size() < 2) return T(0.0);
    std::vector<std::vector<BasicVector<T>>> outputs(experts.size());
    for (std::size_t i = 0; i < experts.size(); ++i)
        for (const auto& p : probes) {
            const BasicVector<T> x = lift<T>(p.span());
            outputs[i].push_back(expert_forward<T>(params, experts[i], x.span()));
        }
    return diversity_loss(outputs);
}

/// task + lambda1 * soft balance + lambda2 * diversity over one batch.
///
/// The soft balance uses the per-expert mean of the masked routing
/// distributions; the hard balance (reported, never differentiated) counts
/// selected experts. Diversity compares the experts active in this batch on
/// the shared probe inputs. Scene ids in the trace are `scene_id_base + slot`.
template <class T>
Objective<T> compute_objective(VariantPolicy policy, const ParamSet& store, ParamBinder<T>& params,
                               const SyntheticBatch& batch, const std::vector<Vector>& probes, const MoEConfig& cfg,
                               const LossConfig& lc, std::size_t scene_id_base = 0) {
    Objective<T> obj;
    std::vector<VariantOutput<T>> outs;
    outs.reserve(batch.scenes.size());
    std::size_t n_queries = 0;
    for (std::size_t s = 0; s < batch.scenes.size(); ++s) {
        const auto& sc = batch.scenes[s];
        outs.push_back(variant_forward<T>(policy, sc.H, sc.queries, params, cfg));
        const auto& out = outs.back();
        for (std::size_t i = 0; i < sc.queries.size(); ++i) {
            const T err = squared_error<T>(out.outputs[i].span(), sc.targets[i].span());
            obj.task += err;
            ++n_queries;
            if (policy == VariantPolicy::dense) continue;
            TraceRecord rec = make_record(scene_id_base + s, out.scene, out.assignments[i]);
            rec.scene_type = sc.scene_type;
            rec.instance_type = sc.instance_types[i];
            rec.loss = value_of(err);
            obj.trace.records.push_back(std::move(rec));
        }
    }
    obj.task /= static_cast<double>(n_queries);

    if (policy != VariantPolicy::dense) {
        std::vector<const BasicVector<T>*> masked;
        std::vector<std::vector<std::size_t>> sets;
        for (const auto& o : outs) {
            for (const auto& a : o.assignments) {
                masked.push_back(&a.masked);
                sets.push_back(a.selected);
            }
            for (const auto& a : o.token_assignments) {
                masked.push_back(&a.masked);
                sets.push_back(a.selected);
            }
        }
        const BasicVector<T> f_soft = soft_utilization<T>(masked, cfg.n_experts);
        const UtilizationStats hard = utilization(sets, cfg.n_experts);
        obj.balance_soft = balance_surrogate<T>(f_soft.span(), hard.f, lc.surrogate);
        obj.balance_hard = balance_loss(hard);
        obj.entropy = routing_entropy(obj.trace);

        const auto experts = active_experts(outs);
        if constexpr (std::is_same_v<T, ad::Real>) {
            if (lc.lambda2 == 0.0) {
                ParamBinder<double> plain(store);
                obj.diversity = T(diversity_term<double>(plain, experts, probes));
            } else {
                obj.diversity = diversity_term<T>(params, experts, probes);
            }
        } else {
            obj.diversity = diversity_term<T>(params, experts, probes);
        }
    }
    obj.total = total_loss<T>(obj.task, obj.balance_soft, obj.diversity, lc);
    return obj;
}

struct MetricRow {
    std::size_t step = 0;
    double task = 0.0;
    double balance_hard = 0.0;
    double balance_soft = 0.0;
    double diversity = 0.0;
    double total = 0.0;
    double entropy = 0.0;
    double grad_norm = 0.0;          // before clipping
    double grad_norm_clipped = 0.0;  // after clipping

    bool operator==(const MetricRow&) const = default;
};

inline const char* metrics_csv_header() {
    return "step,task,balance_hard,balance_soft,diversity,total,entropy,grad_norm,grad_norm_clipped";
}

inline void write_metric_row(std::ostream& os, const MetricRow& r) {
    os << r.step << ',' << format_double(r.task) << ',' << format_double(r.balance_hard) << ','
       << format_double(r.balance_soft) << ',' << format_double(r.diversity) << ',' << format_double(r.total) << ','
       << format_double(r.entropy) << ',' << format_double(r.grad_norm) << ',' << format_double(r.grad_norm_clipped)
       << '\n';
}

using GradientMap = std::map<std::string, Matrix>;

inline double global_norm(const GradientMap& g) {
    double s = 0.0;
    for (const auto& [_, m] : g)
        for (double x : m.flat()) s += x * x;
    return std::sqrt(s);
}

/// Rescales to `clip` when the global norm exceeds it. Returns the post-clip norm.
inline double clip_global_norm(GradientMap& g, double clip) {
    const double norm = global_norm(g);
    if (!(norm > clip)) return norm;
    const double scale = clip / norm;
    for (auto& [_, m] : g)
        for (double& x : m.flat()) x *= scale;
    return global_norm(g);
}

/// Updates only the blocks present in the gradient map.
class Optimizer {
public:
    explicit Optimizer(const TrainerConfig& cfg) : cfg_(cfg) {}

    void step(ParamSet& params, const GradientMap& grads) {
        ++t_;
        for (const auto& [name, g] : grads) {
            Matrix& p = params.at(name);
            if (cfg_.optimizer == OptimizerKind::sgd) {
                for (std::size_t i = 0; i < p.size(); ++i) p.flat()[i] -= cfg_.lr * g.flat()[i];
                continue;
            }
            auto& [m, v] = moments_[name];
            if (m.size() != p.size()) {
                m.assign(p.size(), 0.0);
                v.assign(p.size(), 0.0);
            }
            const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
            const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g.flat()[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
                p.flat()[i] -= cfg_.lr * (update + cfg_.weight_decay * p.flat()[i]);
            }
        }
    }

private:
    TrainerConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

struct EvalResult {
    double task = 0.0;
    double balance_hard = 0.0;
    double entropy = 0.0;
    RoutingTrace trace;
};

struct TrainResult {
    ParamSet params;
    std::vector<MetricRow> log;
    EvalResult final_eval;
};

inline constexpr std::uint64_t kEvalBatchBase = std::uint64_t{1} << 40;

/// Plain forward over the held-out evaluation batches.
inline EvalResult evaluate(VariantPolicy policy, const ParamSet& params, const SyntheticTask& task,
                           const MoEConfig& cfg, const TrainerConfig& tc) {
    EvalResult res;
    ParamBinder<double> binder(params);
    const auto probes = task.probes(0, tc.probes);
    double task_sum = 0.0;
    std::vector<std::vector<std::size_t>> sets;
    for (std::size_t b = 0; b < tc.eval_batches; ++b) {
        const SyntheticBatch batch = task.batch(kEvalBatchBase + b, tc.batch);
        auto obj = compute_objective<double>(policy, params, binder, batch, probes, cfg, LossConfig{0.0, 0.0},
                                             b * tc.batch);
        task_sum += obj.task;
        res.trace.append(obj.trace);
    }
    res.task = task_sum / static_cast<double>(tc.eval_batches);
    if (!res.trace.empty()) {
        res.balance_hard = balance_loss(utilization(res.trace, cfg.n_experts));
        res.entropy = routing_entropy(res.trace);
    }
    return res;
}

using StepObserver = std::function<void(const MetricRow&)>;

/// Clipped first-order training. Deterministic for a fixed seed: data, probes
/// and init all derive from `tc.seed`. Throws NumericalError on a non-finite
/// loss; rows logged before that have already gone to `on_step`.
inline TrainResult train(VariantPolicy policy, const MoEConfig& cfg, const LossConfig& lc, const TrainerConfig& tc,
                         const GeneratorConfig& gen, const InitConfig& init, const StepObserver& on_step = {}) {
    validate(lc);
    validate(tc);
    check_variant_config(policy, cfg);
    if (gen.dim != cfg.dim || gen.scene_dim != cfg.scene_dim)
        throw ConfigError("data.dim: generator dims must match moe.dim / moe.scene_dim");
    const SyntheticTask task(gen, tc.seed);
    TrainResult res;
    res.params = init_params(policy, cfg, init, tc.seed);
    Optimizer opt(tc);
    std::vector<Vector> probes;
    std::uint64_t probe_epoch = ~std::uint64_t{0};
    for (std::size_t step = 0; step < tc.steps; ++step) {
        const std::uint64_t epoch = step / tc.epoch_steps;
        if (epoch != probe_epoch) {
            probes = task.probes(epoch + 1, tc.probes);
            probe_epoch = epoch;
        }
        const SyntheticBatch batch = task.batch(step, tc.batch);
        ad::Tape tape;
        ParamBinder<ad::Real> binder(res.params, tape);
        auto obj = compute_objective<ad::Real>(policy, res.params, binder, batch, probes, cfg, lc);

        MetricRow row;
        row.step = step;
        row.task = obj.task.value();
        row.balance_hard = obj.balance_hard;
        row.balance_soft = obj.balance_soft.value();
        row.diversity = obj.diversity.value();
        row.total = obj.total.value();
        row.entropy = obj.entropy;
        if (!std::isfinite(row.total))
            throw NumericalError("non-finite loss at step " + std::to_string(step) + " (task=" +
                                 format_double(row.task) + ", balance_soft=" + format_double(row.balance_soft) +
                                 ", diversity=" + format_double(row.diversity) + ")");

        GradientMap grads = binder.gradients(tape.backward(obj.total));
        row.grad_norm = global_norm(grads);
        row.grad_norm_clipped = clip_global_norm(grads, tc.clip);
        opt.step(res.params, grads);
        res.log.push_back(row);
        if (on_step) on_step(row);
    }
    res.final_eval = evaluate(policy, res.params, task, cfg, tc);
    return res;
}

struct BlockCheck {
    std::string block;
    double max_rel_error = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<BlockCheck> blocks;
    double worst = 0.0;
    bool pass = true;
};

/// Compares tape gradients of the full objective with central differences,
/// block by block. The error of a block is max_j |tape_j - fd_j| divided by
/// the block's largest gradient magnitude (floored at 1e-8). `tamper`, when
/// set, edits the tape gradients before comparison.
inline GradCheckReport check_gradients(VariantPolicy policy, const ParamSet& params, const SyntheticBatch& batch,
                                       const std::vector<Vector>& probes, const MoEConfig& cfg, const LossConfig& lc,
                                       double eps = 1e-5, double tolerance = 1e-4,
                                       const std::function<void(GradientMap&)>& tamper = {}) {
    ad::Tape tape;
    ParamBinder<ad::Real> binder(params, tape);
    const auto obj = compute_objective<ad::Real>(policy, params, binder, batch, probes, cfg, lc);
    GradientMap tape_grads = binder.gradients(tape.backward(obj.total));
    if (tamper) tamper(tape_grads);

    GradCheckReport rep;
    for (const auto& [name, block] : params.blocks()) {
        ParamSet work = params;
        auto f = [&](std::span<const double> theta) {
            std::copy(theta.begin(), theta.end(), work.at(name).flat().begin());
            ParamBinder<double> plain(work);
            return compute_objective<double>(policy, work, plain, batch, probes, cfg, lc).total;
        };
        const std::vector<double> fd = finite_diff_grad(f, block.flat(), eps);
        const auto it = tape_grads.find(name);
        double scale = 1e-8;
        double worst_diff = 0.0;
        for (std::size_t j = 0; j < fd.size(); ++j) {
            const double t = it == tape_grads.end() ? 0.0 : it->second.flat()[j];
            scale = std::max({scale, std::abs(t), std::abs(fd[j])});
            worst_diff = std::max(worst_diff, std::abs(t - fd[j]));
        }
        BlockCheck bc{name, worst_diff / scale, false};
        bc.pass = bc.max_rel_error <= tolerance;
        rep.worst = std::max(rep.worst, bc.max_rel_error);
        rep.pass = rep.pass && bc.pass;
        rep.blocks.push_back(bc);
    }
    return rep;
}

}  // namespace himoe
