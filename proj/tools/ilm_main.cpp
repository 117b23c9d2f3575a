// ilm: synthetic-corpus invariant language modeling experiments.
//
// Subcommands: gen-data, train, run-all, eval, compare, heads, report.
// Exit codes: 0 success, 1 usage/config error, 2 run failure.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ilm/errors.hpp"
#include "ilm/harness.hpp"
#include "ilm/kernels.hpp"
#include "ilm/metrics.hpp"

namespace {

using ilm::harness::ExperimentConfig;

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "experiment config JSON")->required();
    cmd->add_option("-o,--out", args.out_dir, "output directory")->required();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"invariant language modeling experiments"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, runall_args, eval_args, compare_args, heads_args, report_args;
    int grid_point = 0;
    int restart = 0;
    std::string variant;
    int jobs = 1;
    std::string eval_run_dir;
    std::vector<std::string> heads_checkpoints;
    std::vector<int> heads_grouping;
    std::string heads_series_csv = "head_distance_series.csv";
    std::string heads_mds_csv = "mds.csv";

    CLI::App* gen = app.add_subcommand("gen-data", "generate vocabulary + environment files");
    add_common(gen, gen_args);

    CLI::App* train = app.add_subcommand("train", "train one run of the manifest");
    add_common(train, train_args);
    train->add_option("--grid-point", grid_point, "grid point index")->required();
    train->add_option("--variant", variant, "ilm or elm")
        ->required()
        ->check(CLI::IsMember({"ilm", "elm"}));
    train->add_option("--restart", restart, "restart index")->required();

    CLI::App* runall = app.add_subcommand("run-all", "full pipeline: data, runs, eval, report");
    add_common(runall, runall_args);
    runall->add_option("--jobs", jobs, "parallel training jobs")->check(CLI::PositiveNumber);

    CLI::App* eval = app.add_subcommand("eval", "evaluate checkpoints into metrics.csv");
    add_common(eval, eval_args);
    eval->add_option("--run", eval_run_dir, "evaluate a single run directory (appends)");

    CLI::App* compare = app.add_subcommand("compare", "pair metrics and write the report");
    add_common(compare, compare_args);

    CLI::App* heads = app.add_subcommand("heads", "head distance series + MDS coordinates");
    heads->add_option("-c,--config", heads_args.config_path, "heads_dynamics config JSON");
    heads->add_option("-o,--out", heads_args.out_dir, "output directory");
    heads->add_option("--checkpoints", heads_checkpoints, "explicit checkpoint series")
        ->delimiter(',');
    heads->add_option("--grouping", heads_grouping, "domain label per head, e.g. 0,0,1,1")
        ->delimiter(',');
    heads->add_option("--series-csv", heads_series_csv, "series output (explicit mode)");
    heads->add_option("--mds-csv", heads_mds_csv, "MDS output (explicit mode)");

    CLI::App* report = app.add_subcommand("report", "regenerate report artifacts from outputs");
    add_common(report, report_args);

    CLI11_PARSE(app, argc, argv);

    try {
        ilm::kern::table(); // resolve the kernel backend early so a bad
                            // ILM_KERNELS value fails up front
        if (gen->parsed()) {
            auto cfg = ExperimentConfig::load(gen_args.config_path);
            ilm::harness::cmd_gen_data(cfg, gen_args.out_dir);
        } else if (train->parsed()) {
            auto cfg = ExperimentConfig::load(train_args.config_path);
            ilm::harness::cmd_train(cfg, train_args.out_dir, grid_point, variant, restart);
        } else if (runall->parsed()) {
            auto cfg = ExperimentConfig::load(runall_args.config_path);
            return ilm::harness::run_all(cfg, runall_args.out_dir, jobs);
        } else if (eval->parsed()) {
            auto cfg = ExperimentConfig::load(eval_args.config_path);
            if (eval_run_dir.empty()) {
                ilm::harness::cmd_eval_all(cfg, eval_args.out_dir);
            } else {
                for (const auto& spec : ilm::harness::build_manifest(cfg)) {
                    if (spec.run_dir == eval_run_dir || spec.run_dir == "runs/" + eval_run_dir) {
                        auto rows = ilm::harness::eval_run(cfg, eval_args.out_dir, spec);
                        ilm::write_metrics_csv(eval_args.out_dir + "/metrics.csv", rows,
                                               /*append=*/true);
                        return 0;
                    }
                }
                throw ilm::ConfigError("no manifest entry matches run dir '" + eval_run_dir + "'");
            }
        } else if (compare->parsed()) {
            auto cfg = ExperimentConfig::load(compare_args.config_path);
            ilm::harness::cmd_compare(cfg, compare_args.out_dir);
        } else if (heads->parsed()) {
            if (!heads_checkpoints.empty()) {
                if (heads_grouping.empty()) {
                    throw ilm::ConfigError("heads: --grouping is required with --checkpoints");
                }
                ilm::harness::cmd_heads_files(heads_checkpoints, heads_grouping, heads_series_csv,
                                              heads_mds_csv);
            } else {
                if (heads_args.config_path.empty() || heads_args.out_dir.empty()) {
                    throw ilm::ConfigError("heads: need either --checkpoints or -c/-o");
                }
                auto cfg = ExperimentConfig::load(heads_args.config_path);
                ilm::harness::cmd_heads(cfg, heads_args.out_dir);
            }
        } else if (report->parsed()) {
            auto cfg = ExperimentConfig::load(report_args.config_path);
            if (cfg.experiment == "heads_dynamics") {
                ilm::harness::cmd_heads(cfg, report_args.out_dir);
            } else {
                ilm::harness::cmd_compare(cfg, report_args.out_dir);
            }
        }
    } catch (const ilm::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
