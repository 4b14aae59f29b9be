// stir: distill steering tools from rollouts, build a sparse control basis,
// and run gated trajectory intervention against a synthetic or remote model
// backend.

#include "stir/basis.hpp"
#include "stir/config.hpp"
#include "stir/harness.hpp"
#include "stir/mock_server.hpp"
#include "stir/remote.hpp"
#include "stir/synthetic.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

namespace {

struct CommonOpts {
    std::string config_path;
    std::string backend = "synthetic";
    std::string env_path;
    std::string url;
    std::optional<uint64_t> seed;
    std::optional<int> jobs;
    std::optional<int> K;
    std::optional<int> B;
    std::optional<double> k_scale;
    std::optional<double> tau_null;
    std::optional<int> max_tokens;
    std::optional<double> temperature;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_backend = true) {
    cmd->add_option("--config", opts.config_path, "JSON config file (flags override it)");
    if (with_backend) {
        cmd->add_option("--backend", opts.backend, "synthetic | remote")
            ->check(CLI::IsMember({"synthetic", "remote"}));
        cmd->add_option("--env", opts.env_path, "environment JSON for the synthetic backend");
        cmd->add_option("--url", opts.url,
                        "remote backend base URL (default: $STIR_REMOTE_URL)");
    }
    cmd->add_option("--seed", opts.seed, "root RNG seed");
    cmd->add_option("--jobs", opts.jobs, "worker threads");
    cmd->add_option("--rollouts", opts.K, "rollouts per example (K)");
    cmd->add_option("--budget", opts.B, "library budget (B)");
    cmd->add_option("--k-scale", opts.k_scale, "injection strength scale");
    cmd->add_option("--tau-null", opts.tau_null, "abstention threshold");
    cmd->add_option("--max-tokens", opts.max_tokens, "generation cap per rollout");
    cmd->add_option("--temperature", opts.temperature, "sampling temperature");
}

stir::Config make_config(const CommonOpts& opts) {
    stir::Config cfg;
    if (!opts.config_path.empty()) cfg = stir::load_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.jobs) cfg.jobs = *opts.jobs;
    if (opts.K) cfg.K = *opts.K;
    if (opts.B) cfg.B = *opts.B;
    if (opts.k_scale) cfg.k_scale = *opts.k_scale;
    if (opts.tau_null) cfg.tau_null = *opts.tau_null;
    if (opts.max_tokens) cfg.max_tokens = *opts.max_tokens;
    if (opts.temperature) cfg.temperature = *opts.temperature;
    cfg.validate();
    return cfg;
}

std::unique_ptr<stir::Backend> make_backend(const CommonOpts& opts) {
    if (opts.backend == "remote") {
        std::string url = opts.url;
        if (url.empty()) {
            const char* env_url = std::getenv("STIR_REMOTE_URL");
            if (env_url != nullptr) url = env_url;
        }
        if (url.empty()) {
            throw stir::contract_violation(
                "remote backend needs --url or STIR_REMOTE_URL");
        }
        return std::make_unique<stir::RemoteBackend>(url);
    }
    stir::EnvSpec env;
    if (!opts.env_path.empty()) env = stir::load_env(opts.env_path);
    return std::make_unique<stir::SyntheticBackend>(std::move(env));
}

std::vector<double> parse_values(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"steering tool induction, selection, and gated trajectory control"};
    app.require_subcommand(1);

    CommonOpts induce_opts, select_opts, run_opts, sweep_opts, serve_opts;

    // induce
    auto* induce = app.add_subcommand("induce", "sample rollouts and emit candidate tools");
    std::string induce_dataset, induce_out;
    bool induce_pipeline = false;
    induce->add_option("--dataset", induce_dataset, "JSONL dataset")->required();
    induce->add_option("--out", induce_out, "output candidates (or library with --pipeline)")
        ->required();
    induce->add_flag("--pipeline", induce_pipeline,
                     "run selection too and write a finalized library");
    add_common(induce, induce_opts);

    // select
    auto* select = app.add_subcommand("select", "build the sparse control basis");
    std::string select_in, select_out;
    select->add_option("--in", select_in, "candidate file from induce")->required();
    select->add_option("--out", select_out, "output library")->required();
    add_common(select, select_opts, /*with_backend=*/false);

    // run
    auto* run = app.add_subcommand("run", "evaluate a dataset under a control mode");
    std::string run_dataset, run_library, run_report, run_mode = "stir";
    run->add_option("--mode", run_mode, "vanilla | static | stir")
        ->check(CLI::IsMember({"vanilla", "static", "stir"}));
    run->add_option("--library", run_library, "finalized library JSON")->required();
    run->add_option("--dataset", run_dataset, "JSONL dataset")->required();
    run->add_option("--report", run_report, "output report JSON");
    add_common(run, run_opts);

    // eval
    auto* eval = app.add_subcommand("eval", "print metrics for a saved report");
    std::string eval_report;
    eval->add_option("--report", eval_report, "report JSON")->required();

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "re-run across a parameter grid");
    std::string sweep_param = "k_scale", sweep_values, sweep_dataset, sweep_out;
    sweep_cmd->add_option("--param", sweep_param, "k_scale | layer_depth")
        ->check(CLI::IsMember({"k_scale", "layer_depth"}));
    sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required();
    sweep_cmd->add_option("--dataset", sweep_dataset, "JSONL dataset")->required();
    sweep_cmd->add_option("--out", sweep_out, "optional CSV output");
    add_common(sweep_cmd, sweep_opts);

    // export
    auto* export_cmd = app.add_subcommand("export", "dump entry keys as CSV for projection");
    std::string export_in, export_out;
    export_cmd->add_option("--in", export_in, "library or candidate file")->required();
    export_cmd->add_option("--out", export_out, "output CSV")->required();

    // serve
    auto* serve = app.add_subcommand("serve", "run the synthetic model server");
    int serve_port = 8471;
    serve->add_option("--port", serve_port, "listen port");
    serve->add_option("--env", serve_opts.env_path, "environment JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e); // prints help, exits 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1; // usage error
    }

    try {
        if (induce->parsed()) {
            stir::Config cfg = make_config(induce_opts);
            auto backend = make_backend(induce_opts);
            auto dataset = stir::load_dataset(induce_dataset);
            if (induce_pipeline) {
                auto offline = stir::run_offline(dataset, *backend, cfg);
                stir::save_library(offline.library, induce_out);
                std::cout << "candidates " << offline.candidate_count << ", selected "
                          << offline.library.size() << ", objective " << offline.objective
                          << ", skipped " << offline.prompts_skipped << "\n";
            } else {
                auto induced = stir::induce_dataset(dataset, *backend, cfg);
                stir::save_candidates(induced.candidates, induce_out);
                std::cout << "candidates " << induced.candidates.entries.size() << ", skipped "
                          << induced.prompts_skipped << "\n";
            }
        } else if (select->parsed()) {
            stir::Config cfg = make_config(select_opts);
            auto candidates = stir::load_candidates(select_in);
            if (candidates.empty()) throw stir::error("no contrastive signal found");
            auto lib = stir::finalize(stir::greedy_select(candidates, cfg.B, cfg.lambda,
                                                          cfg.epsilon, cfg.diversity_selection));
            stir::save_library(lib, select_out);
            std::cout << "candidates " << candidates.entries.size() << ", selected "
                      << lib.size() << ", objective "
                      << stir::joint_utility(lib.entries, cfg.lambda, cfg.epsilon) << "\n";
        } else if (run->parsed()) {
            stir::Config cfg = make_config(run_opts);
            auto backend = make_backend(run_opts);
            auto dataset = stir::load_dataset(run_dataset);
            auto library = stir::load_library(run_library);
            auto report = stir::run_online(dataset, library, *backend, cfg,
                                           stir::run_mode_from_string(run_mode));
            if (!run_report.empty()) stir::save_report(report, run_report);
            std::cout << stir::evaluate(report);
        } else if (eval->parsed()) {
            auto report = stir::load_report(eval_report);
            std::cout << stir::evaluate(report);
        } else if (sweep_cmd->parsed()) {
            stir::Config cfg = make_config(sweep_opts);
            auto backend = make_backend(sweep_opts);
            auto dataset = stir::load_dataset(sweep_dataset);
            auto points = stir::sweep(stir::sweep_param_from_string(sweep_param),
                                      parse_values(sweep_values), cfg, dataset, *backend);
            std::cout << stir::sweep_table(points, sweep_param);
            if (!sweep_out.empty()) {
                std::ofstream out(sweep_out);
                out << sweep_param << ",accuracy,mean_tokens,overhead_ratio\n";
                for (const auto& p : points) {
                    out << p.value << ',' << p.report.aggregates.accuracy << ','
                        << p.report.aggregates.mean_tokens << ','
                        << p.report.aggregates.overhead_ratio << '\n';
                }
            }
        } else if (export_cmd->parsed()) {
            std::vector<stir::ToolEntry> entries;
            try {
                entries = stir::load_library(export_in).entries;
            } catch (const stir::version_error&) {
                entries = stir::load_candidates(export_in).entries;
            }
            stir::export_states(entries, export_out);
            std::cout << "wrote " << entries.size() << " rows to " << export_out << "\n";
        } else if (serve->parsed()) {
            stir::EnvSpec env;
            if (!serve_opts.env_path.empty()) env = stir::load_env(serve_opts.env_path);
            stir::MockServer server(std::move(env));
            std::cout << "serving synthetic backend on port " << serve_port << "\n";
            server.run(serve_port);
        }
    } catch (const stir::contract_violation& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
