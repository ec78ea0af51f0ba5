#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pbnn/config.hpp"
#include "pbnn/orchestrator.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace pbnn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitPartialAblation = 4;

std::string run_root() {
    const char* env = std::getenv("PBNN_RUN_ROOT");
    return env && *env ? env : "runs";
}

ordered_json resolve(const std::string& config_path,
                     const std::vector<std::string>& overrides) {
    ordered_json cfg = load_config(config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    if (cfg["run_dir"].get<std::string>().empty())
        cfg["run_dir"] = run_root() + "/" + cfg["experiment_id"].get<std::string>() +
                         "_seed" + std::to_string(cfg["seed"].get<long long>());
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << text;
}

// Executes one resolved config end to end and writes the run artifacts.
ExperimentReport execute(const ordered_json& cfg) {
    RunSetup setup = build_run(cfg);
    fs::create_directories(setup.config.run_dir);
    write_text(setup.config.run_dir + "/config.json", cfg.dump(2) + "\n");
    ExperimentReport report = run_experiment(setup.config, setup.splits);
    write_text(setup.config.run_dir + "/report.json",
               report_to_json(report, /*include_timing=*/false) + "\n");
    return report;
}

void print_summary(const ExperimentReport& report) {
    std::cout << "first_cycle_test:    " << report.first_cycle_test << "\n"
              << "max_val_test:        " << report.max_val_test << "\n"
              << "error_reduction_pct: " << report.error_reduction_pct << "\n"
              << "dendrites_added:     " << report.dendrites_added << "\n"
              << "final_val_score:     " << report.final_val_score << "\n"
              << "final_checkpoint:    " << report.final_checkpoint_id << "\n";
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides) {
    ordered_json cfg;
    try {
        cfg = resolve(config_path, overrides);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    RunSetup setup;
    try {
        setup = build_run(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    }
    try {
        fs::create_directories(setup.config.run_dir);
        write_text(setup.config.run_dir + "/config.json", cfg.dump(2) + "\n");
        ExperimentReport report = run_experiment(setup.config, setup.splits);
        write_text(setup.config.run_dir + "/report.json",
                   report_to_json(report, /*include_timing=*/false) + "\n");
        std::cout << "run_dir: " << setup.config.run_dir << "\n";
        print_summary(report);
    } catch (const std::exception& e) {
        std::cerr << "training failed: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, std::vector<std::string> modes,
               std::vector<long long> seeds,
               const std::vector<std::string>& overrides) {
    ordered_json base;
    try {
        base = resolve(config_path, overrides);
        if (modes.empty() || seeds.empty())
            throw ConfigError("ablate needs at least one mode and one seed");
        for (const auto& m : modes) ablation_from_name(m);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }

    std::string base_dir = base["run_dir"].get<std::string>();
    std::map<std::string, std::vector<double>> reductions;
    int failures = 0;
    for (const auto& mode : modes)
        for (long long seed : seeds) {
            ordered_json cfg = base;
            cfg["training"]["ablation_mode"] = mode;
            cfg["seed"] = seed;
            cfg["experiment_id"] =
                base["experiment_id"].get<std::string>() + "_" + mode;
            cfg["run_dir"] = base_dir + "/" + mode + "_seed" + std::to_string(seed);
            try {
                ExperimentReport report = execute(cfg);
                reductions[mode].push_back(report.error_reduction_pct);
                std::cout << mode << " seed " << seed << ": error_reduction_pct "
                          << report.error_reduction_pct << "\n";
            } catch (const std::exception& e) {
                ++failures;
                std::cerr << mode << " seed " << seed << " failed: " << e.what()
                          << "\n";
            }
        }

    std::cout << "\nmode                     min       q1       q3      max\n";
    ordered_json summary;
    for (const auto& mode : modes) {
        auto it = reductions.find(mode);
        if (it == reductions.end() || it->second.empty()) {
            std::cout << mode << "  (all runs failed)\n";
            continue;
        }
        Quartiles q = nearest_rank_quartiles(it->second);
        char line[160];
        std::snprintf(line, sizeof line, "%-20s %8.3f %8.3f %8.3f %8.3f\n",
                      mode.c_str(), q.min, q.q1, q.q3, q.max);
        std::cout << line;
        summary[mode] = {{"min", q.min}, {"q1", q.q1}, {"q3", q.q3}, {"max", q.max},
                         {"runs", it->second}};
    }
    try {
        fs::create_directories(base_dir);
        write_text(base_dir + "/ablation_summary.json", summary.dump(2) + "\n");
    } catch (const std::exception& e) {
        std::cerr << "summary write failed: " << e.what() << "\n";
        return kExitPartialAblation;
    }
    return failures > 0 ? kExitPartialAblation : kExitOk;
}

int cmd_eval(const std::string& checkpoint_dir, const std::string& id,
             const std::string& config_path, const std::string& which_split,
             std::size_t batch_size, const std::vector<std::string>& overrides) {
    Checkpoint ck;
    try {
        ck = load_checkpoint(checkpoint_dir, id);
    } catch (const std::exception& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitData;
    }
    RunSetup setup;
    try {
        setup = build_run(resolve(config_path, overrides));
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    }
    const Dataset& ds = which_split == "train" ? setup.splits.train
                        : which_split == "val" ? setup.splits.val
                                               : setup.splits.test;
    try {
        auto t0 = std::chrono::steady_clock::now();
        double score = evaluate_score(ck.net, ds, setup.config.loss,
                                      setup.config.metric, batch_size);
        double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        ParamCount pc = param_count(ck.net);
        std::cout << "split:            " << which_split << " (" << ds.size()
                  << " samples)\n"
                  << "score:            " << score << "\n"
                  << "neuron_params:    " << pc.neuron_params << "\n"
                  << "dendrite_params:  " << pc.dendrite_params << "\n"
                  << "inputs_per_sec:   " << double(ds.size()) / secs << " (batch "
                  << batch_size << ")\n";
    } catch (const std::exception& e) {
        std::cerr << "eval failed: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int cmd_inspect(const std::string& run_dir, const std::string& csv_path) {
    std::ifstream in(run_dir + "/metrics.jsonl");
    if (!in) {
        std::cerr << "data error: " << run_dir << "/metrics.jsonl: cannot open\n";
        return kExitData;
    }
    struct CycleSummary {
        std::string kind;
        int epochs = 0;
        double best_val = -1e300, last_train = 0;
    };
    std::map<int, CycleSummary> cycles;
    std::ostringstream csv;
    csv << "cycle,kind,epoch,train,val,test,loss\n";
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json rec;
        try {
            rec = ordered_json::parse(line);
        } catch (const ordered_json::exception& e) {
            std::cerr << "data error: bad metrics record: " << e.what() << "\n";
            return kExitData;
        }
        int cyc = rec["cycle"].get<int>();
        auto& cs = cycles[cyc];
        cs.kind = rec["kind"].get<std::string>();
        cs.epochs += 1;
        cs.best_val = std::max(cs.best_val, rec["val"].get<double>());
        cs.last_train = rec["train"].get<double>();
        csv << cyc << "," << cs.kind << "," << rec["epoch"].get<int>() << ","
            << rec["train"].get<double>() << "," << rec["val"].get<double>() << ",";
        if (rec.contains("test")) csv << rec["test"].get<double>();
        csv << "," << rec["loss"].get<double>() << "\n";
        ++rows;
    }
    if (rows == 0) {
        std::cerr << "data error: metrics file is empty\n";
        return kExitData;
    }
    for (const auto& [cyc, cs] : cycles)
        std::cout << "cycle " << cyc << " (" << cs.kind << "): " << cs.epochs
                  << " epochs, best val " << cs.best_val << ", final train "
                  << cs.last_train << "\n";
    if (!csv_path.empty()) {
        try {
            write_text(csv_path, csv.str());
        } catch (const std::exception& e) {
            std::cerr << "data error: " << e.what() << "\n";
            return kExitData;
        }
        std::cout << "wrote " << rows << " epoch rows to " << csv_path << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"perforated-backpropagation experiment runner"};
    app.require_subcommand(1);
    std::cout.precision(12);

    std::string config_path, checkpoint_dir, checkpoint_id, run_dir;
    std::string split_name = "test", csv_path;
    std::vector<std::string> overrides, modes;
    std::vector<long long> seeds;
    std::size_t batch_size = 100;
    int jobs = 1;

    auto* train = app.add_subcommand("train", "run one experiment");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--set", overrides, "override, key.path=value");

    auto* ablate = app.add_subcommand("ablate", "run modes x seeds, summarize");
    ablate->add_option("--config", config_path, "config file")->required();
    ablate->add_option("--modes", modes, "ablation modes")->required();
    ablate->add_option("--seeds", seeds, "seeds")->required();
    ablate->add_option("--set", overrides, "override, key.path=value");
    ablate->add_option("--jobs", jobs, "sub-run parallelism (currently serial)");

    auto* eval = app.add_subcommand("eval", "score a checkpoint");
    eval->add_option("--checkpoint-dir", checkpoint_dir, "checkpoint directory")
        ->required();
    eval->add_option("--id", checkpoint_id, "checkpoint id (payload digest)")
        ->required();
    eval->add_option("--config", config_path, "config supplying the dataset")
        ->required();
    eval->add_option("--split", split_name, "train|val|test (default test)");
    eval->add_option("--batch-size", batch_size, "evaluation batch size");
    eval->add_option("--set", overrides, "override, key.path=value");

    auto* inspect = app.add_subcommand("inspect", "summarize a finished run");
    inspect->add_option("--run-dir", run_dir, "run directory")->required();
    inspect->add_option("--csv", csv_path, "emit per-epoch curves as CSV");

    CLI11_PARSE(app, argc, argv);

    if (train->parsed()) return cmd_train(config_path, overrides);
    if (ablate->parsed()) return cmd_ablate(config_path, modes, seeds, overrides);
    if (eval->parsed())
        return cmd_eval(checkpoint_dir, checkpoint_id, config_path, split_name,
                        batch_size, overrides);
    return cmd_inspect(run_dir, csv_path);
}
