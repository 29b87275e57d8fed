// himoe: train, ablate, sweep-topk, check-grad, diagnose.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure
// (including a failed gradient check), 4 I/O or malformed input.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "himoe/commands.hpp"

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
    auto* opt = cmd->add_option("--config", f.config, "key = value config file or a run manifest.json");
    if (config_required) opt->required();
    cmd->add_option("--seed", f.seed, "overrides run.seed");
    cmd->add_option("--out", f.out, "output directory")->required();
    cmd->add_option("--set", f.overrides, "key=value override, repeatable")->take_all();
}

himoe::CommandContext make_context(const CommonFlags& f) {
    himoe::CommandContext ctx;
    if (!f.config.empty()) ctx.config = himoe::load_run_config(f.config);
    ctx.config_path = f.config;
    for (const auto& o : f.overrides) himoe::apply_override(ctx.config, o);
    ctx.overrides = f.overrides;
    if (f.seed) {
        ctx.config.seed = *f.seed;
        ctx.overrides.push_back("run.seed=" + std::to_string(*f.seed));
    }
    ctx.out = f.out;
    return ctx;
}

int run(int argc, char** argv) {
    CLI::App app{"Hierarchical scene-to-instance MoE routing on a synthetic detection-like task"};
    app.require_subcommand(1);
    app.set_version_flag("--version", HIMOE_VERSION);

    CommonFlags train_f, ablate_f, sweep_f, check_f, diag_f;
    std::string trace_path;
    auto* train = app.add_subcommand("train", "train one routing variant");
    add_common(train, train_f, false);
    auto* ablate = app.add_subcommand("ablate", "train all five variants on shared seeds and data");
    add_common(ablate, ablate_f, false);
    auto* sweep = app.add_subcommand("sweep-topk", "loss / FLOPs / latency for each K in sweep.k");
    add_common(sweep, sweep_f, false);
    auto* check = app.add_subcommand("check-grad", "tape gradients vs central finite differences");
    add_common(check, check_f, false);
    auto* diag = app.add_subcommand("diagnose", "route profiles, entropy, utilization, specialization report");
    add_common(diag, diag_f, false);
    diag->add_option("trace", trace_path, "trace.jsonl written by train")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (*train) {
        const auto res = himoe::cmd_train(make_context(train_f));
        std::cout << "final task loss " << himoe::format_double(res.final_eval.task) << ", balance "
                  << himoe::format_double(res.final_eval.balance_hard) << " -> " << train_f.out << '\n';
    } else if (*ablate) {
        const auto rows = himoe::cmd_ablate(make_context(ablate_f));
        for (const auto& r : rows)
            std::cout << himoe::to_string(r.policy) << ' '
                      << (r.ok ? himoe::format_double(r.final_task_loss) : "failed: " + r.error) << '\n';
    } else if (*sweep) {
        for (const auto& r : himoe::cmd_sweep_topk(make_context(sweep_f)))
            std::cout << "K=" << r.k << " loss " << himoe::format_double(r.final_task_loss) << " flops "
                      << r.cost.flops_per_query << " latency " << r.latency.median_ms << " ms\n";
    } else if (*check) {
        const auto rep = himoe::cmd_check_grad(make_context(check_f));
        for (const auto& b : rep.blocks)
            if (!b.pass) std::cerr << "gradient mismatch in block " << b.block << ": " << b.max_rel_error << '\n';
        std::cout << (rep.pass ? "pass" : "fail") << " (worst relative error " << rep.worst << ")\n";
        if (!rep.pass) return 3;
    } else if (*diag) {
        if (diag_f.config.empty()) {
            const auto beside = std::filesystem::path(trace_path).parent_path() / "manifest.json";
            if (!std::filesystem::exists(beside))
                throw himoe::ConfigError("--config: not given and no manifest.json next to the trace");
            diag_f.config = beside.string();
        }
        himoe::cmd_diagnose(make_context(diag_f), trace_path);
        std::cout << "report written to " << diag_f.out << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const himoe::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const himoe::ParameterError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const himoe::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const himoe::OracleError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const himoe::IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 4;
    } catch (const himoe::InputError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
