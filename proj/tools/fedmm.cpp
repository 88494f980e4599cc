// Command-line front end: dataset generation, partitioning, federated
// training, run evaluation and method-comparison grids.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedmm/run.hpp"

namespace {

struct Overrides {
    std::optional<std::string> mode;
    std::optional<std::string> heterogeneity;
    std::optional<std::string> arch_preset;
    std::optional<std::string> roster_preset;
    std::optional<int> rounds;
    std::optional<int> local_steps;
    std::optional<double> eta0;
    std::optional<double> decay;
    std::optional<double> tau;
    std::optional<std::size_t> batch_size;
    std::optional<std::size_t> points;
    std::optional<std::size_t> num_classes;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<int> threads;
};

void add_override_flags(CLI::App* cmd, std::string& config_path, Overrides& ov) {
    cmd->add_option("-c,--config", config_path, "JSON config file (flags override its values)");
    cmd->add_option("--mode", ov.mode,
                    "method: cm-fl | cm-fl-dgb | dgb-pcw | um-fl (default dgb-pcw)");
    cmd->add_option("--heterogeneity", ov.heterogeneity,
                    "iid | type_based | class_based (default type_based)");
    cmd->add_option("--arch-preset", ov.arch_preset,
                    "encoder widths: desk | small | medium | large (default desk)");
    cmd->add_option("--roster", ov.roster_preset,
                    "institution roster preset: tri21 | mixed9 | uni_dominant | bi_dominant | "
                    "tri_dominant (default tri21)");
    cmd->add_option("--rounds", ov.rounds, "global aggregation steps T (default 20)");
    cmd->add_option("--local-steps", ov.local_steps,
                    "local SGD iterations K per round (default 20)");
    cmd->add_option("--eta0", ov.eta0, "initial learning rate (default 1e-4)");
    cmd->add_option("--decay", ov.decay, "per-round learning-rate decay (default 0.99)");
    cmd->add_option("--tau", ov.tau, "similarity softmax temperature (default 1)");
    cmd->add_option("--batch-size", ov.batch_size, "minibatch size (default 16)");
    cmd->add_option("--points", ov.points, "points per institution (default 50)");
    cmd->add_option("--num-classes", ov.num_classes, "class count, 2 or 3 (default 3)");
    cmd->add_option("--seed", ov.seed, "master seed (default 1)");
    cmd->add_option("-o,--out", ov.out_dir, "output directory (default out/run)");
    cmd->add_option("--threads", ov.threads,
                    "worker cap, 0 = hardware concurrency; never changes results");
}

fedmm::ExperimentConfig build_config(const std::string& config_path, const Overrides& ov) {
    fedmm::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = fedmm::load_config(config_path);
    if (ov.mode) cfg.mode = fedmm::mode_from_string(*ov.mode);
    if (ov.heterogeneity) cfg.heterogeneity = fedmm::heterogeneity_from_string(*ov.heterogeneity);
    if (ov.arch_preset) cfg.arch_preset = *ov.arch_preset;
    if (ov.roster_preset) {
        cfg.roster_preset = *ov.roster_preset;
        cfg.roster.clear();
    }
    if (ov.rounds) cfg.rounds = *ov.rounds;
    if (ov.local_steps) cfg.local_steps = *ov.local_steps;
    if (ov.eta0) cfg.eta0 = *ov.eta0;
    if (ov.decay) cfg.decay = *ov.decay;
    if (ov.tau) cfg.tau = *ov.tau;
    if (ov.batch_size) cfg.batch_size = *ov.batch_size;
    if (ov.points) cfg.points_per_institution = *ov.points;
    if (ov.num_classes) cfg.num_classes = *ov.num_classes;
    if (ov.seed) cfg.master_seed = *ov.seed;
    if (ov.out_dir) cfg.out_dir = *ov.out_dir;
    if (ov.threads) cfg.threads = *ov.threads;
    fedmm::validate(cfg);
    return cfg;
}

int cmd_generate(const fedmm::ExperimentConfig& cfg) {
    const auto dataset = fedmm::generate_synthetic(fedmm::make_synthetic_spec(cfg),
                                                   fedmm::derive_seed(cfg.master_seed, "dataset"));
    const auto manifest = fedmm::save_csv(dataset, cfg.out_dir);
    std::fprintf(stderr, "generated %zu points (%zu cohorts, %zu classes) under %s\n",
                 dataset.points.size(), dataset.cohorts.size(), dataset.num_classes,
                 cfg.out_dir.c_str());
    std::cout << manifest.string() << "\n";
    return 0;
}

int cmd_partition(const fedmm::ExperimentConfig& cfg) {
    const auto exp = fedmm::prepare_experiment(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    const auto path = std::filesystem::path(cfg.out_dir) / "partition.csv";
    std::ofstream out(path);
    if (!out) throw fedmm::DataError("cannot write " + path.string());
    out << "institution_id,combo_key,category,train_size,val_size";
    for (const auto& c : exp.pool.cohorts) out << ",cohort_" << c;
    for (std::size_t y = 0; y < exp.pool.num_classes; ++y) out << ",class_" << y;
    out << "\n";
    for (const auto& inst : exp.institutions) {
        std::map<std::string, std::size_t> cohort_counts;
        std::vector<std::size_t> class_counts(exp.pool.num_classes, 0);
        for (const auto* side : {&inst.train, &inst.val})
            for (const auto& p : *side) {
                ++cohort_counts[p.cohort];
                ++class_counts[p.label];
            }
        out << inst.institution_id << ',' << inst.combination.key() << ',' << inst.category
            << ',' << inst.train.size() << ',' << inst.val.size();
        for (const auto& c : exp.pool.cohorts) out << ',' << cohort_counts[c];
        for (std::size_t y = 0; y < exp.pool.num_classes; ++y) out << ',' << class_counts[y];
        out << "\n";
    }
    std::fprintf(stderr, "partitioned %zu institutions (test split: %zu points)\n",
                 exp.institutions.size(), exp.test_split.points.size());
    std::cout << path.string() << "\n";
    return 0;
}

int cmd_train(const fedmm::ExperimentConfig& cfg) {
    const auto run = fedmm::run_federation(cfg);
    fedmm::export_metrics(run, cfg.out_dir);
    const std::size_t best = fedmm::best_round(run);
    const auto& best_rec = run.rounds[best];
    const auto& last_rec = run.rounds.back();
    std::printf(
        "mode=%s rounds=%d best_round=%zu best_val_accuracy=%.4f best_test_accuracy=%.4f "
        "final_test_accuracy=%.4f out=%s\n",
        fedmm::to_string(cfg.mode).c_str(), cfg.rounds, best, best_rec.global.val_accuracy,
        best_rec.global.accuracy, last_rec.global.accuracy, cfg.out_dir.c_str());
    return 0;
}

int cmd_evaluate(const std::string& run_dir) {
    const auto parsed = fedmm::parse_metrics(run_dir);
    if (parsed.rounds.empty()) throw fedmm::DataError("run directory has no rounds");
    std::size_t best = 0;
    for (std::size_t i = 1; i < parsed.rounds.size(); ++i)
        if (parsed.rounds[i].global.val_accuracy > parsed.rounds[best].global.val_accuracy)
            best = i;
    const auto& rec = parsed.rounds[best];
    std::printf("run=%s mode=%s rounds=%zu\n", run_dir.c_str(),
                parsed.manifest.at("mode").get<std::string>().c_str(), parsed.rounds.size());
    std::printf("best_round=%d val_accuracy=%.4f test_accuracy=%.4f test_loss=%.4f\n", rec.t,
                rec.global.val_accuracy, rec.global.accuracy, rec.global.loss);
    for (const auto& [cohort, acc] : rec.global.per_cohort_accuracy)
        std::printf("cohort_accuracy %s=%.4f\n", cohort.c_str(), acc);
    return 0;
}

int cmd_grid(const std::string& grid_path, const Overrides& ov) {
    std::ifstream in(grid_path);
    if (!in) throw fedmm::ConfigError("cannot open grid file " + grid_path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw fedmm::ConfigError("grid " + grid_path + ": " + std::string(e.what()));
    }
    fedmm::ExperimentConfig base = j.contains("base")
                                       ? fedmm::config_from_json(j.at("base"))
                                       : fedmm::ExperimentConfig{};
    if (ov.threads) base.threads = *ov.threads;
    if (ov.out_dir) base.out_dir = *ov.out_dir;
    if (!j.contains("cells") || j.at("cells").empty())
        throw fedmm::ConfigError("grid: 'cells' must be a nonempty array");
    std::vector<fedmm::GridCell> cells;
    for (const auto& c : j.at("cells")) {
        fedmm::GridCell cell;
        cell.mode = fedmm::mode_from_string(c.at("mode").get<std::string>());
        cell.heterogeneity =
            fedmm::heterogeneity_from_string(c.at("heterogeneity").get<std::string>());
        cell.seeds = c.at("seeds").get<std::vector<std::uint64_t>>();
        cells.push_back(std::move(cell));
    }
    {
        fedmm::ExperimentConfig probe = base;  // every cell must validate
        for (const auto& cell : cells) {
            probe.mode = cell.mode;
            probe.heterogeneity = cell.heterogeneity;
            fedmm::validate(probe);
        }
    }
    const auto results = fedmm::compare_methods(base, cells);
    std::filesystem::create_directories(base.out_dir);
    const auto path = std::filesystem::path(base.out_dir) / "comparison.csv";
    fedmm::write_comparison_csv(results, path);
    std::cout << path.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-modal federated learning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides ov;
    std::string run_dir;
    std::string grid_path;

    auto* generate = app.add_subcommand("generate", "generate a synthetic dataset as CSV files");
    add_override_flags(generate, config_path, ov);
    auto* partition =
        app.add_subcommand("partition", "partition a dataset and write a quota summary");
    add_override_flags(partition, config_path, ov);
    auto* train = app.add_subcommand("train", "run federated training and export metrics");
    add_override_flags(train, config_path, ov);
    auto* evaluate = app.add_subcommand("evaluate", "summarize an exported run directory");
    evaluate->add_option("--run-dir", run_dir, "directory written by `train`")->required();
    auto* grid = app.add_subcommand("grid", "run a method-comparison grid");
    grid->add_option("--grid", grid_path, "grid JSON: {base, cells:[{mode,heterogeneity,seeds}]}")
        ->required();
    grid->add_option("--threads", ov.threads, "worker cap for grid cells");
    grid->add_option("-o,--out", ov.out_dir, "output directory override");

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) return cmd_generate(build_config(config_path, ov));
        if (partition->parsed()) return cmd_partition(build_config(config_path, ov));
        if (train->parsed()) return cmd_train(build_config(config_path, ov));
        if (evaluate->parsed()) return cmd_evaluate(run_dir);
        if (grid->parsed()) return cmd_grid(grid_path, ov);
    } catch (const fedmm::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const fedmm::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
