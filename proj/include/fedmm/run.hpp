#pragma once

#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "fedmm/harness.hpp"

namespace fedmm {

// Static block assignment; worker w handles [w*n/k, (w+1)*n/k). Results land
// in caller-indexed slots, so scheduling cannot change output.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                      : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            const std::size_t lo = w * n / workers;
            const std::size_t hi = (w + 1) * n / workers;
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

struct Experiment {
    ArchRegistry registry;
    GlobalDataset pool;        // what institutions are partitioned from
    GlobalDataset test_split;  // held out before partitioning
    std::vector<InstitutionSpec> roster;
    std::vector<InstitutionDataset> institutions;
    std::vector<ModalityCombination> combos;  // distinct, deterministic order
    ModalityCombination full_combo;
};

// Dataset creation, test withholding, partitioning. The um-fl mode rewrites
// every roster entry to the full modality set before partitioning.
inline Experiment prepare_experiment(const ExperimentConfig& cfg) {
    validate(cfg);
    Experiment exp;
    exp.registry = make_registry(cfg.arch_preset, cfg.modalities);

    GlobalDataset dataset;
    if (cfg.dataset.source == "synthetic") {
        dataset = generate_synthetic(make_synthetic_spec(cfg),
                                     derive_seed(cfg.master_seed, "dataset"));
    } else {
        LoadResult loaded = load_csv(cfg.dataset.manifest);
        if (loaded.dropped > 0)
            std::fprintf(stderr, "warning: dropped %zu patients missing a modality\n",
                         loaded.dropped);
        dataset = std::move(loaded.dataset);
        if (dataset.modality_dims != cfg.modalities)
            throw ConfigError("dataset.manifest: modality dimensions do not match config");
        if (dataset.num_classes != cfg.num_classes)
            throw ConfigError("dataset.manifest: num_classes does not match config");
    }

    auto [pool, test] = split_fraction(dataset, cfg.test_fraction,
                                       derive_seed(cfg.master_seed, "test-split"));
    exp.pool = std::move(pool);
    exp.test_split = std::move(test);

    exp.full_combo = ModalityCombination(modality_universe(cfg));
    exp.roster = resolved_roster(cfg);
    if (cfg.mode == MethodMode::kUmFl)
        for (auto& inst : exp.roster) inst.combination = exp.full_combo;

    std::map<std::string, ModalityCombination> seen;
    for (const auto& inst : exp.roster) seen.emplace(inst.combination.key(), inst.combination);
    for (const auto& [key, combo] : seen) exp.combos.push_back(combo);

    exp.institutions = partition(exp.pool, make_plan(cfg, exp.roster));
    return exp;
}

namespace detail {

inline double pooled_validation_accuracy(const ServerState& server, const ArchRegistry& registry,
                                         std::size_t num_classes,
                                         const std::vector<ModalityCombination>& combos,
                                         const std::vector<InstitutionDataset>& institutions) {
    std::map<std::string, MultiModalNet> nets;
    for (const auto& combo : combos) {
        MultiModalNet net = build_network(combo, registry, num_classes, 0);
        unflatten_into(server.assemble(combo), net);
        nets.emplace(combo.key(), std::move(net));
    }
    std::size_t correct = 0, total = 0;
    for (const auto& inst : institutions) {
        const MultiModalNet& net = nets.at(inst.combination.key());
        for (const auto& p : inst.val) {
            const auto logp = predict(net, p.features);
            const std::size_t pred =
                std::max_element(logp.begin(), logp.end()) - logp.begin();
            if (pred == p.label) ++correct;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace detail

// The synchronous round loop: synchronize, locally train with the
// mode-dependent learning-rate coefficients, aggregate encoders per modality
// and classifiers per combination, weight combo losses, track overfitting and
// generalization, evaluate, record.
inline RunResult run_federation(const ExperimentConfig& cfg) {
    Experiment exp = prepare_experiment(cfg);
    const auto universe = modality_universe(cfg);
    const std::uint64_t init_seed = derive_seed(cfg.master_seed, "init");
    const bool dgb = cfg.mode == MethodMode::kCmFlDgb || cfg.mode == MethodMode::kDgbPcw;
    const bool pcw = cfg.mode == MethodMode::kDgbPcw;

    ServerState server = init_server(exp.registry, universe, exp.combos, cfg.num_classes,
                                     init_seed, cfg.tau);
    LrSchedule schedule{cfg.eta0, cfg.decay};

    std::vector<ClientState> clients;
    for (std::size_t i = 0; i < exp.roster.size(); ++i) {
        ClientState client;
        client.institution_id = exp.roster[i].id;
        client.dataset = &exp.institutions[i];
        client.net = build_network(exp.roster[i].combination, exp.registry, cfg.num_classes,
                                   init_seed);
        client.gamma = uniform_gamma(exp.roster[i].combination);
        client.rng = Rng(derive_seed(cfg.master_seed, "client",
                                     static_cast<std::uint64_t>(exp.roster[i].id)));
        clients.push_back(std::move(client));
    }

    RunResult result;
    result.config = cfg;
    result.seed = cfg.master_seed;

    for (int t = 0; t < cfg.rounds; ++t) {
        const ServerState prev = server;

        std::vector<RoundReport> reports(clients.size());
        parallel_for(clients.size(), cfg.threads, [&](std::size_t i) {
            ClientState& client = clients[i];
            synchronize_client(server, client);
            if (dgb && t >= 2)
                client.gamma = dogr_coefficients(server.og_history, client.net.combination);
            else
                client.gamma = uniform_gamma(client.net.combination);
            reports[i] = local_train(client, schedule, t, cfg.local_steps, cfg.batch_size);
        });

        server.global_encoders = aggregate_encoders(reports, universe);
        server.global_classifiers = aggregate_classifiers(reports);
        server.round_index = t + 1;

        PcwWeights weights;
        if (pcw) {
            std::vector<LocalTrajectory> locals;
            for (const auto& r : reports)
                locals.push_back({r.institution_id, r.combo_key, cumulative_gradient(r)});
            std::map<std::string, ParamVector> global_trajs;
            for (const auto& combo : exp.combos)
                global_trajs[combo.key()] = global_trajectory(prev, server, combo);
            weights = pcw_weights(locals, global_trajs, cfg.tau);
            server.pcw = weights.by_combo;
        }

        const auto adjusted = adjusted_losses(reports, pcw ? &weights : nullptr);
        std::map<std::string, OgEntry> og;
        if (dgb) {
            for (const auto& [key, losses] : adjusted) {
                og[key] = overfitting_generalization(losses.train_loss, losses.val_loss);
                auto& hist = server.og_history[key];
                hist.push_back(og[key]);
                if (hist.size() > 2) hist.erase(hist.begin());
            }
        }

        RoundRecord record;
        record.t = t;
        for (const auto& combo : exp.combos) {
            ComboRecord c;
            c.combo_key = combo.key();
            const auto& losses = adjusted.at(c.combo_key);
            c.train_loss = losses.train_loss;
            c.val_loss = losses.val_loss;
            if (dgb) {
                c.overfitting = og.at(c.combo_key).overfitting;
                c.generalization = og.at(c.combo_key).generalization;
            }
            const EvalResult combo_eval = evaluate_global(server, exp.registry, cfg.num_classes,
                                                          exp.test_split.points, combo);
            c.test_accuracy = combo_eval.accuracy;
            c.test_loss = combo_eval.mean_loss;
            record.combos.push_back(std::move(c));
        }
        for (std::size_t i = 0; i < clients.size(); ++i) {
            InstitutionRecord inst;
            inst.institution_id = clients[i].institution_id;
            inst.combo_key = reports[i].combo_key;
            inst.category = exp.roster[i].category;
            inst.gamma = clients[i].gamma;
            if (pcw) inst.rho_bar = weights.rho_bar(inst.combo_key, inst.institution_id);
            record.institutions.push_back(std::move(inst));
        }
        const EvalResult global_eval = evaluate_global(server, exp.registry, cfg.num_classes,
                                                       exp.test_split.points, exp.full_combo);
        record.global.accuracy = global_eval.accuracy;
        record.global.loss = global_eval.mean_loss;
        record.global.per_cohort_accuracy = global_eval.per_cohort_accuracy;
        record.global.val_accuracy = detail::pooled_validation_accuracy(
            server, exp.registry, cfg.num_classes, exp.combos, exp.institutions);
        result.rounds.push_back(std::move(record));
    }

    result.final_server = std::move(server);
    return result;
}

// Runs every (cell, seed) combination and summarizes best-round test accuracy
// per cell. Grid entries run in parallel; each run is single-threaded then.
inline std::vector<GridCellResult> compare_methods(const ExperimentConfig& base,
                                                   const std::vector<GridCell>& grid) {
    struct Job {
        std::size_t cell;
        std::size_t slot;
        ExperimentConfig cfg;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < grid.size(); ++c) {
        if (grid[c].seeds.empty()) throw ConfigError("grid cell without seeds");
        for (std::size_t s = 0; s < grid[c].seeds.size(); ++s) {
            ExperimentConfig cfg = base;
            cfg.mode = grid[c].mode;
            cfg.heterogeneity = grid[c].heterogeneity;
            cfg.master_seed = grid[c].seeds[s];
            cfg.threads = 1;
            jobs.push_back({c, s, std::move(cfg)});
        }
    }
    std::vector<std::vector<double>> best(grid.size());
    for (std::size_t c = 0; c < grid.size(); ++c) best[c].resize(grid[c].seeds.size());
    parallel_for(jobs.size(), base.threads, [&](std::size_t i) {
        const RunResult run = run_federation(jobs[i].cfg);
        best[jobs[i].cell][jobs[i].slot] = run.rounds[best_round(run)].global.accuracy;
    });
    std::vector<GridCellResult> out;
    for (std::size_t c = 0; c < grid.size(); ++c)
        out.push_back(summarize_cell(grid[c].mode, grid[c].heterogeneity, best[c]));
    return out;
}

}  // namespace fedmm
