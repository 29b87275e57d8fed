#pragma once
// The CLI verbs as library calls. Each writes manifest.json into its output
// directory before doing any work and rewrites it with the outcome.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "himoe/checkpoint.hpp"
#include "himoe/diagnostics.hpp"
#include "himoe/run_config.hpp"
#include "himoe/trace.hpp"
#include "himoe/trainer.hpp"
#include "himoe/variants.hpp"

namespace himoe {

struct CommandContext {
    RunConfig config;                    // already has overrides applied
    std::vector<std::string> overrides;  // verbatim --set arguments
    std::string config_path;
    std::filesystem::path out = "runs/latest";
};

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& p) {
    std::ofstream os(p);
    if (!os) throw IoError("cannot write '" + p.string() + "'");
    return os;
}

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

class ManifestScope {
public:
    ManifestScope(const std::string& command, const CommandContext& ctx, const RunConfig& resolved,
                  std::map<std::string, std::string> artifacts)
        : path_(ctx.out / "manifest.json"), start_(std::chrono::steady_clock::now()) {
        ensure_dir(ctx.out);
        m_.command = command;
        m_.config = resolved;
        m_.overrides = ctx.overrides;
        m_.config_path = ctx.config_path;
        m_.artifacts = std::move(artifacts);
        write_manifest(path_.string(), m_);
    }

    void finish(const std::string& status, const std::string& message = "") {
        m_.status = status;
        m_.message = message;
        m_.timings_s["wall"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_manifest(path_.string(), m_);
    }

    RunManifest& manifest() { return m_; }

private:
    std::filesystem::path path_;
    std::chrono::steady_clock::time_point start_;
    RunManifest m_;
};

}  // namespace detail

/// train: metrics.csv streamed per step, then trace.jsonl (held-out
/// evaluation) and checkpoint.json. On divergence the rows logged so far stay
/// on disk and the manifest records the failure.
inline TrainResult cmd_train(const CommandContext& ctx) {
    const RunConfig rc = finalize(ctx.config);
    detail::ManifestScope scope("train", ctx, rc,
                                {{"metrics", "metrics.csv"}, {"trace", "trace.jsonl"}, {"checkpoint", "checkpoint.json"}});
    TrainResult result;
    try {
        auto metrics = detail::open_output(ctx.out / "metrics.csv");
        metrics << metrics_csv_header() << '\n';
        result = train(rc.policy, rc.moe, rc.loss, rc.train, rc.data, rc.init,
                       [&metrics](const MetricRow& row) { write_metric_row(metrics, row); });
        if (!metrics.flush()) throw IoError("write failed for metrics.csv");
    } catch (const NumericalError& e) {
        scope.finish("diverged", e.what());
        throw;
    }
    if (!result.final_eval.trace.empty()) save_trace((ctx.out / "trace.jsonl").string(), result.final_eval.trace);
    else detail::open_output(ctx.out / "trace.jsonl");
    save_checkpoint((ctx.out / "checkpoint.json").string(), Checkpoint{rc.moe, rc.policy, rc.seed, result.params});
    scope.manifest().timings_s["final_task_loss"] = result.final_eval.task;
    scope.finish("complete");
    return result;
}

struct AblationRow {
    VariantPolicy policy = VariantPolicy::dense;
    std::uint64_t seed = 0;
    bool ok = false;
    double final_task_loss = 0.0;
    double balance_hard = 0.0;
    ComputeCost cost;
    std::string error;
};

inline const char* ablation_csv_header() {
    return "variant,seed,final_task_loss,balance_hard,total_params,active_params_per_query,router_params,"
           "flops_per_query,flops_per_scene,status";
}

/// ablate: all five policies, same seed and therefore the same data stream.
/// A failing variant is recorded in the table and the sweep continues.
inline std::vector<AblationRow> cmd_ablate(const CommandContext& ctx) {
    const RunConfig rc = finalize(ctx.config);
    detail::ManifestScope scope("ablate", ctx, rc, {{"table", "ablation.csv"}});
    std::vector<AblationRow> rows;
    auto table = detail::open_output(ctx.out / "ablation.csv");
    table << ablation_csv_header() << '\n';
    for (VariantPolicy p : all_policies()) {
        AblationRow row;
        row.policy = p;
        row.seed = rc.seed;
        try {
            row.cost = count_params_flops(p, rc.moe);
            const TrainResult res = train(p, rc.moe, rc.loss, rc.train, rc.data, rc.init);
            row.final_task_loss = res.final_eval.task;
            row.balance_hard = res.final_eval.balance_hard;
            row.ok = true;
        } catch (const Error& e) {
            row.error = e.what();
        }
        table << to_string(p) << ',' << row.seed << ',' << (row.ok ? format_double(row.final_task_loss) : "") << ','
              << (row.ok ? format_double(row.balance_hard) : "") << ',' << row.cost.total_params << ','
              << row.cost.active_params_per_query << ',' << row.cost.router_params << ',' << row.cost.flops_per_query
              << ',' << row.cost.flops_per_scene << ',' << (row.ok ? "ok" : "failed") << '\n';
        rows.push_back(std::move(row));
    }
    if (!table.flush()) throw IoError("write failed for ablation.csv");
    const bool all_ok = std::all_of(rows.begin(), rows.end(), [](const AblationRow& r) { return r.ok; });
    scope.finish(all_ok ? "complete" : "partial");
    return rows;
}

struct LatencyStats {
    double median_ms = 0.0;
    double q1_ms = 0.0;
    double q3_ms = 0.0;
    std::size_t timed = 0;
};

/// Linear-interpolated quantile of sorted samples.
inline double quantile(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw InputError("quantile: no samples");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline constexpr std::uint64_t kLatencyBatchBase = std::uint64_t{1} << 41;

/// Wall-clock time of the plain (untaped) forward over whole batches,
/// single-threaded. Batches are generated before timing starts.
inline LatencyStats measure_latency(VariantPolicy policy, const ParamSet& params, const SyntheticTask& task,
                                    const MoEConfig& cfg, std::size_t scenes, std::size_t warmup,
                                    std::size_t timed) {
    std::vector<SyntheticBatch> batches;
    for (std::size_t i = 0; i < warmup + timed; ++i) batches.push_back(task.batch(kLatencyBatchBase + i, scenes));
    ParamBinder<double> binder(params);
    std::vector<double> samples;
    double sink = 0.0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        for (const auto& sc : batches[i].scenes) {
            const auto out = variant_forward<double>(policy, sc.H, sc.queries, binder, cfg);
            sink += out.outputs.front()[0];
        }
        const auto t1 = std::chrono::steady_clock::now();
        if (i >= warmup) samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    if (!std::isfinite(sink)) throw NumericalError("latency probe produced non-finite outputs");
    std::sort(samples.begin(), samples.end());
    return {quantile(samples, 0.5), quantile(samples, 0.25), quantile(samples, 0.75), samples.size()};
}

struct TopKRow {
    std::size_t k = 0;
    double final_task_loss = 0.0;
    ComputeCost cost;
    LatencyStats latency;
};

inline const char* topk_csv_header() {
    return "k,final_task_loss,flops_per_query,active_params_per_query,latency_ms_median,latency_ms_q1,"
           "latency_ms_q3,timed_batches";
}

/// sweep-topk: retrains `train.policy` for each K in sweep.k. FLOPs come from
/// the closed-form count; latency is measured, never derived from FLOPs.
inline std::vector<TopKRow> cmd_sweep_topk(const CommandContext& ctx) {
    const RunConfig rc = finalize(ctx.config);
    if (rc.sweep.k_values.empty()) throw ConfigError("sweep.k: needs at least one value");
    std::vector<MoEConfig> configs;
    for (std::size_t k : rc.sweep.k_values) {
        MoEConfig m = rc.moe;
        m.top_k = k;
        configs.push_back(resolve(m));
    }
    detail::ManifestScope scope("sweep-topk", ctx, rc, {{"table", "topk.csv"}});
    auto table = detail::open_output(ctx.out / "topk.csv");
    table << topk_csv_header() << '\n';
    std::vector<TopKRow> rows;
    const SyntheticTask task(rc.data, rc.seed);
    for (const MoEConfig& m : configs) {
        TopKRow row;
        row.k = m.top_k;
        const TrainResult res = train(rc.policy, m, rc.loss, rc.train, rc.data, rc.init);
        row.final_task_loss = res.final_eval.task;
        row.cost = count_params_flops(rc.policy, m);
        row.latency = measure_latency(rc.policy, res.params, task, m, rc.train.batch, rc.sweep.warmup, rc.sweep.timed);
        table << row.k << ',' << format_double(row.final_task_loss) << ',' << row.cost.flops_per_query << ','
              << row.cost.active_params_per_query << ',' << format_double(row.latency.median_ms) << ','
              << format_double(row.latency.q1_ms) << ',' << format_double(row.latency.q3_ms) << ','
              << row.latency.timed << '\n';
        rows.push_back(row);
    }
    if (!table.flush()) throw IoError("write failed for topk.csv");
    scope.finish("complete");
    return rows;
}

inline constexpr std::size_t kCheckMaxDim = 8;
inline constexpr std::size_t kCheckMaxExperts = 4;

/// check-grad: tape vs central differences on the whole objective at a fresh
/// init. Limited to small configs so the oracle stays cheap.
inline GradCheckReport cmd_check_grad(const CommandContext& ctx,
                                      const std::function<void(GradientMap&)>& tamper = {}) {
    const RunConfig rc = finalize(ctx.config);
    if (rc.moe.dim > kCheckMaxDim || rc.moe.scene_dim > kCheckMaxDim)
        throw ConfigError("moe.dim: check-grad needs d, d_g <= " + std::to_string(kCheckMaxDim));
    if (rc.moe.n_experts > kCheckMaxExperts)
        throw ConfigError("moe.n_experts: check-grad needs N_e <= " + std::to_string(kCheckMaxExperts));
    detail::ManifestScope scope("check-grad", ctx, rc, {{"table", "gradcheck.csv"}});
    const SyntheticTask task(rc.data, rc.seed);
    const SyntheticBatch batch = task.batch(0, rc.check.scenes);
    const auto probes = task.probes(0, rc.check.probes);
    const ParamSet params = init_params(rc.policy, rc.moe, InitConfig{rc.check.router_std, rc.init.expert_scale}, rc.seed);
    const GradCheckReport rep =
        check_gradients(rc.policy, params, batch, probes, rc.moe, rc.loss, rc.check.eps, rc.check.tolerance, tamper);
    auto table = detail::open_output(ctx.out / "gradcheck.csv");
    table << "block,max_rel_error,tolerance,status\n";
    for (const auto& b : rep.blocks)
        table << b.block << ',' << format_double(b.max_rel_error) << ',' << format_double(rc.check.tolerance) << ','
              << (b.pass ? "pass" : "fail") << '\n';
    if (!table.flush()) throw IoError("write failed for gradcheck.csv");
    scope.manifest().timings_s["worst_rel_error"] = rep.worst;
    scope.finish(rep.pass ? "pass" : "fail");
    return rep;
}

inline const char* profiles_csv_header() {
    return "expert,present,total,dominant_route,dominant_label,dominant_share,route_counts";
}

/// diagnose: route profiles, entropy series, utilization histogram and the
/// specialization report for a trace file.
inline SpecializationReport cmd_diagnose(const CommandContext& ctx, const std::string& trace_path) {
    const RunConfig rc = finalize(ctx.config);
    detail::ManifestScope scope("diagnose", ctx, rc,
                                {{"trace_in", trace_path},
                                 {"profiles", "profiles.csv"},
                                 {"entropy", "entropy.csv"},
                                 {"utilization", "utilization.csv"},
                                 {"report_json", "report.json"},
                                 {"report_csv", "report.csv"}});
    const RoutingTrace trace = load_trace(trace_path);
    if (trace.empty()) throw InputError("diagnose: no records in '" + trace_path + "'");
    for (const auto& r : trace.records)
        if (r.e_full.size() != rc.moe.n_experts)
            throw InputError("diagnose: trace routes over " + std::to_string(r.e_full.size()) +
                             " experts but the config has N_e=" + std::to_string(rc.moe.n_experts));

    const SpecializationReport rep = specialization_report(trace, rc.moe, instance_type_names());
    {
        auto os = detail::open_output(ctx.out / "profiles.csv");
        os << profiles_csv_header() << '\n';
        for (const auto& p : rep.profiles) {
            std::string counts;
            for (std::size_t s = 0; s < p.route_counts.size(); ++s) counts += (s ? ";" : "") + std::to_string(p.route_counts[s]);
            os << p.expert << ',' << (p.present ? 1 : 0) << ',' << p.total << ','
               << (p.present ? std::to_string(p.dominant_route) : "") << ','
               << (p.present ? rc.moe.route_labels.at(p.dominant_route) : "") << ','
               << (p.present ? format_double(p.dominant_share) : "") << ',' << counts << '\n';
        }
    }
    {
        auto os = detail::open_output(ctx.out / "entropy.csv");
        os << "scene,mean_entropy\n";
        for (const auto& [scene, h] : entropy_series(trace)) os << scene << ',' << format_double(h) << '\n';
    }
    {
        const auto u = utilization_histogram(trace, rc.moe.n_experts);
        auto os = detail::open_output(ctx.out / "utilization.csv");
        os << "expert,count,f\n";
        for (std::size_t k = 0; k < u.counts.size(); ++k) os << k << ',' << u.counts[k] << ',' << format_double(u.f[k]) << '\n';
    }
    {
        auto os = detail::open_output(ctx.out / "report.json");
        auto j = to_json(rep);
        j["routing_entropy"] = routing_entropy(trace);
        j["balance_hard"] = balance_loss(utilization(trace, rc.moe.n_experts));
        os << j.dump(2) << '\n';
    }
    {
        auto os = detail::open_output(ctx.out / "report.csv");
        write_report_csv(os, rep);
    }
    scope.finish("complete");
    return rep;
}

}  // namespace himoe
