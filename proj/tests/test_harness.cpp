#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedmm/harness.hpp"
#include "fedmm/run.hpp"

using namespace fedmm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path temp_dir(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("fedmm_harness_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ExperimentConfig small_config() {
    ExperimentConfig cfg;
    cfg.modalities = {{"a", 4}, {"b", 3}};
    cfg.cohorts = {"x", "y"};
    cfg.num_classes = 2;
    cfg.dataset.total_points = 300;
    cfg.dataset.cohort_fractions = {0.5, 0.5};
    cfg.dataset.class_fractions = {0.5, 0.5};
    cfg.roster = {{1, ModalityCombination{"a", "b"}, 1},
                  {2, ModalityCombination{"a"}, 2},
                  {3, ModalityCombination{"b"}, 3}};
    cfg.heterogeneity = Heterogeneity::kIid;
    cfg.points_per_institution = 24;
    cfg.batch_size = 4;
    cfg.rounds = 3;
    cfg.local_steps = 2;
    cfg.eta0 = 0.05;
    cfg.mode = MethodMode::kDgbPcw;
    return cfg;
}

GlobalDataset balanced_dataset(std::size_t per_cell) {
    SyntheticSpec spec;
    spec.modality_dims = {{"a", 4}, {"b", 3}};
    spec.cohorts = {"x", "y"};
    spec.num_classes = 2;
    spec.counts.assign(2, std::vector<std::size_t>(2, per_cell));
    return generate_synthetic(spec, 17);
}

ArchRegistry tiny_registry() {
    ArchRegistry reg;
    reg.encoders["a"] = {4, {3, 2}};
    reg.encoders["b"] = {3, {2, 2}};
    reg.classifier_hidden = {3};
    return reg;
}

}  // namespace

TEST_CASE("evaluate_global: uniform model on a balanced set") {
    const auto reg = tiny_registry();
    const ModalityCombination combo{"a", "b"};
    ServerState server = init_server(reg, {"a", "b"}, {combo}, 2, 1, 1.0);
    for (auto& [m, v] : server.global_encoders)
        std::fill(v.values.begin(), v.values.end(), 0.0);
    for (auto& [k, v] : server.global_classifiers)
        std::fill(v.values.begin(), v.values.end(), 0.0);

    const auto ds = balanced_dataset(25);
    const auto res = evaluate_global(server, reg, 2, ds.points, combo);
    // Uniform log-probabilities: argmax picks class 0 everywhere.
    CHECK(res.accuracy == Catch::Approx(0.5));
    CHECK(res.mean_loss == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(res.n_points == ds.points.size());
}

TEST_CASE("evaluate_global: single correctly classified point") {
    const auto reg = tiny_registry();
    const ModalityCombination combo{"a"};
    ServerState server = init_server(reg, {"a"}, {combo}, 2, 3, 1.0);

    MultiModalNet net = build_network(combo, reg, 2, 3);
    unflatten_into(server.assemble(combo), net);
    Datapoint p;
    p.cohort = "x";
    p.features["a"] = {0.4, -0.2, 1.0, 0.3};
    const auto logp = predict(net, p.features);
    p.label = std::max_element(logp.begin(), logp.end()) - logp.begin();

    const auto res = evaluate_global(server, reg, 2, std::vector<Datapoint>{p}, combo);
    CHECK(res.accuracy == 1.0);
    CHECK(res.per_cohort_accuracy.at("x") == 1.0);
}

TEST_CASE("evaluate_global: per-cohort accuracies recombine exactly") {
    const auto reg = tiny_registry();
    const ModalityCombination combo{"a", "b"};
    ServerState server = init_server(reg, {"a", "b"}, {combo}, 2, 5, 1.0);
    const auto ds = balanced_dataset(20);
    const auto res = evaluate_global(server, reg, 2, ds.points, combo);
    std::map<std::string, std::size_t> cohort_sizes;
    for (const auto& p : ds.points) ++cohort_sizes[p.cohort];
    double recombined = 0.0;
    for (const auto& [cohort, acc] : res.per_cohort_accuracy)
        recombined += acc * static_cast<double>(cohort_sizes.at(cohort)) /
                      static_cast<double>(ds.points.size());
    CHECK(std::abs(recombined - res.accuracy) <= 1e-12);
}

TEST_CASE("evaluate_global: missing classifier is an evaluation error") {
    const auto reg = tiny_registry();
    ServerState server = init_server(reg, {"a", "b"}, {ModalityCombination{"a"}}, 2, 1, 1.0);
    const auto ds = balanced_dataset(4);
    CHECK_THROWS_AS(
        evaluate_global(server, reg, 2, ds.points, ModalityCombination{"a", "b"}),
        RuntimeError);
}

TEST_CASE("best_round selection") {
    RunResult run;
    auto with_val = [](double v) {
        RoundRecord r;
        r.global.val_accuracy = v;
        return r;
    };
    SECTION("monotone improvement picks the last round") {
        run.rounds = {with_val(0.1), with_val(0.2), with_val(0.3)};
        CHECK(best_round(run) == 2);
    }
    SECTION("flat run picks round zero") {
        run.rounds = {with_val(0.4), with_val(0.4), with_val(0.4)};
        CHECK(best_round(run) == 0);
    }
    SECTION("a known peak wins") {
        run.rounds = {with_val(0.2), with_val(0.7), with_val(0.5), with_val(0.7)};
        CHECK(best_round(run) == 1);
    }
    SECTION("empty run is an error") {
        CHECK_THROWS_AS(best_round(run), RuntimeError);
    }
    SECTION("best round dominates every other round") {
        run.rounds = {with_val(0.3), with_val(0.9), with_val(0.6)};
        const auto best = best_round(run);
        for (const auto& r : run.rounds)
            CHECK(run.rounds[best].global.val_accuracy >= r.global.val_accuracy);
    }
}

TEST_CASE("export_metrics: row counts and determinism") {
    auto cfg = small_config();
    cfg.rounds = 3;
    const auto run = run_federation(cfg);
    const auto dir = temp_dir("export");
    export_metrics(run, dir);

    // 3 rounds x 3 combinations -> 9 data rows plus the header.
    std::ifstream rounds(dir / "rounds.csv");
    std::string line;
    int lines = 0;
    while (std::getline(rounds, line)) ++lines;
    CHECK(lines == 1 + 3 * 3);

    const auto before = slurp(dir / "rounds.csv") + slurp(dir / "institutions.csv") +
                        slurp(dir / "global.csv") + slurp(dir / "manifest.json");
    export_metrics(run, dir);
    const auto after = slurp(dir / "rounds.csv") + slurp(dir / "institutions.csv") +
                       slurp(dir / "global.csv") + slurp(dir / "manifest.json");
    CHECK(before == after);
}

TEST_CASE("manifest hash tracks config changes") {
    auto cfg = small_config();
    const auto h1 = config_hash(cfg);
    CHECK(config_hash(cfg) == h1);
    auto changed = cfg;
    changed.mode = MethodMode::kCmFl;
    CHECK(config_hash(changed) != h1);
    auto threads_only = cfg;
    threads_only.threads = 7;
    threads_only.out_dir = "elsewhere";
    CHECK(config_hash(threads_only) == h1);
}

TEST_CASE("exported CSVs parse back to the same records") {
    auto cfg = small_config();
    const auto run = run_federation(cfg);
    const auto dir = temp_dir("roundtrip");
    export_metrics(run, dir);
    const auto parsed = parse_metrics(dir);

    REQUIRE(parsed.rounds.size() == run.rounds.size());
    for (std::size_t t = 0; t < run.rounds.size(); ++t) {
        const auto& a = run.rounds[t];
        const auto& b = parsed.rounds[t];
        CHECK(a.t == b.t);
        REQUIRE(a.combos.size() == b.combos.size());
        for (std::size_t i = 0; i < a.combos.size(); ++i) {
            CHECK(a.combos[i].combo_key == b.combos[i].combo_key);
            CHECK(b.combos[i].train_loss ==
                  Catch::Approx(a.combos[i].train_loss).epsilon(1e-8));
            CHECK(b.combos[i].overfitting.has_value() == a.combos[i].overfitting.has_value());
        }
        REQUIRE(a.institutions.size() == b.institutions.size());
        for (std::size_t i = 0; i < a.institutions.size(); ++i) {
            CHECK(a.institutions[i].institution_id == b.institutions[i].institution_id);
            CHECK(a.institutions[i].combo_key == b.institutions[i].combo_key);
            CHECK(a.institutions[i].gamma.size() == b.institutions[i].gamma.size());
            if (a.institutions[i].rho_bar)
                CHECK(*b.institutions[i].rho_bar ==
                      Catch::Approx(*a.institutions[i].rho_bar).epsilon(1e-8));
        }
        CHECK(b.global.accuracy == Catch::Approx(a.global.accuracy).epsilon(1e-8));
        CHECK(b.global.val_accuracy == Catch::Approx(a.global.val_accuracy).epsilon(1e-8));
    }

    // Re-export from the parsed records: byte-identical files.
    RunResult rebuilt;
    rebuilt.rounds = parsed.rounds;
    rebuilt.config = config_from_json(parsed.manifest.at("config"));
    rebuilt.seed = parsed.manifest.at("seed").get<std::uint64_t>();
    const auto dir2 = temp_dir("roundtrip2");
    export_metrics(rebuilt, dir2);
    for (const char* name : {"rounds.csv", "institutions.csv", "global.csv", "combo_eval.csv",
                             "manifest.json"})
        CHECK(slurp(dir / name) == slurp(dir2 / name));
}

TEST_CASE("accuracy bounds hold in every exported record") {
    auto cfg = small_config();
    const auto run = run_federation(cfg);
    for (const auto& round : run.rounds) {
        CHECK(round.global.accuracy >= 0.0);
        CHECK(round.global.accuracy <= 1.0);
        CHECK(round.global.loss >= 0.0);
        for (const auto& combo : round.combos) {
            CHECK(combo.train_loss >= 0.0);
            CHECK(combo.val_loss >= 0.0);
        }
    }
}

TEST_CASE("compare_methods: single cell equals the underlying run") {
    auto cfg = small_config();
    GridCell cell{MethodMode::kCmFl, Heterogeneity::kIid, {4}};
    const auto cells = compare_methods(cfg, {cell});
    REQUIRE(cells.size() == 1);
    REQUIRE(cells[0].best_accuracies.size() == 1);

    auto single = cfg;
    single.mode = MethodMode::kCmFl;
    single.heterogeneity = Heterogeneity::kIid;
    single.master_seed = 4;
    const auto run = run_federation(single);
    CHECK(cells[0].best_accuracies[0] == run.rounds[best_round(run)].global.accuracy);
    CHECK(cells[0].median == cells[0].best_accuracies[0]);
}

TEST_CASE("compare_methods: identical cells give identical results") {
    auto cfg = small_config();
    GridCell cell{MethodMode::kDgbPcw, Heterogeneity::kIid, {1, 2}};
    const auto a = compare_methods(cfg, {cell, cell});
    REQUIRE(a.size() == 2);
    CHECK(a[0].best_accuracies == a[1].best_accuracies);
    CHECK(a[0].median == a[1].median);

    const auto dir = temp_dir("grid");
    write_comparison_csv(a, dir / "comparison.csv");
    const auto text = slurp(dir / "comparison.csv");
    CHECK(text.find("dgb-pcw,iid,2,") != std::string::npos);
}

TEST_CASE("quantile: median and quartiles") {
    CHECK(quantile({3.0, 1.0, 2.0}, 0.5) == 2.0);
    CHECK(quantile({1.0, 2.0, 3.0, 4.0}, 0.5) == Catch::Approx(2.5));
    CHECK(quantile({5.0}, 0.25) == 5.0);
    CHECK_THROWS_AS(quantile({}, 0.5), RuntimeError);
}

TEST_CASE("rho_distribution: summaries and mode gating") {
    auto cfg = small_config();
    const auto run = run_federation(cfg);
    const auto stats = rho_distribution(run);
    REQUIRE(stats.size() == 3);
    // Each combination here has exactly one member.
    for (const auto& s : stats) {
        CHECK(s.mean == Catch::Approx(1.0));
        CHECK(s.sd == Catch::Approx(0.0).margin(1e-15));
    }

    auto plain = cfg;
    plain.mode = MethodMode::kCmFl;
    const auto no_weights = rho_distribution(run_federation(plain));
    CHECK(no_weights.empty());
}
