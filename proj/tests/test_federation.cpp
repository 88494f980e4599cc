#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fedmm/config.hpp"
#include "fedmm/federation.hpp"
#include "fedmm/run.hpp"

using namespace fedmm;

namespace {

std::map<ModalityId, std::size_t> tiny_dims() { return {{"a", 4}, {"b", 3}}; }

ArchRegistry tiny_registry() {
    ArchRegistry reg;
    reg.encoders["a"] = {4, {3, 2}};
    reg.encoders["b"] = {3, {2, 2}};
    reg.classifier_hidden = {3};
    return reg;
}

GlobalDataset tiny_dataset(std::size_t per_cell, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.modality_dims = tiny_dims();
    spec.cohorts = {"x", "y"};
    spec.num_classes = 2;
    spec.counts.assign(2, std::vector<std::size_t>(2, per_cell));
    return generate_synthetic(spec, seed);
}

InstitutionDataset make_institution(int id, const ModalityCombination& combo,
                                    const GlobalDataset& ds, std::size_t n,
                                    std::uint64_t seed) {
    PartitionPlan plan;
    plan.heterogeneity = Heterogeneity::kIid;
    plan.institutions = {{id, combo, 1}};
    plan.points_per_institution = n;
    plan.val_fraction = 0.25;
    plan.seed = seed;
    return partition(ds, plan)[0];
}

// Scalar-parameter report for aggregation arithmetic tests: one encoder
// weight per modality, one classifier weight.
RoundReport scalar_report(int id, const std::vector<ModalityId>& mods, double enc_value,
                          double clf_value, std::size_t dataset_size) {
    RoundReport r;
    r.institution_id = id;
    r.combo_key = combo_key(mods);
    for (const auto& m : mods) {
        r.end_params.values.push_back(enc_value);
        r.end_params.layout.push_back({encoder_group_id(m), 1, 1});
    }
    r.end_params.values.push_back(clf_value);
    r.end_params.layout.push_back({kClassifierGroupId, 1, 1});
    r.start_params = r.end_params;
    r.dataset_size = dataset_size;
    return r;
}

}  // namespace

TEST_CASE("local_train: all-ones coefficients reduce to plain SGD") {
    const auto reg = tiny_registry();
    const auto ds = tiny_dataset(10, 1);
    const ModalityCombination combo{"a", "b"};
    const auto inst = make_institution(1, combo, ds, 20, 2);

    ClientState client;
    client.institution_id = 1;
    client.dataset = &inst;
    client.net = build_network(combo, reg, 2, 42);
    client.gamma = uniform_gamma(combo);
    client.rng = Rng(7);

    // Reference: unrolled plain SGD with a cloned stream.
    MultiModalNet ref = build_network(combo, reg, 2, 42);
    Rng ref_rng(7);
    const double eta = 0.05;
    for (int k = 0; k < 3; ++k) {
        const auto batch = sample_minibatch(inst, 4, ref_rng);
        std::vector<SampleView> views;
        for (const auto* p : batch) views.push_back({&p->features, p->label});
        const auto res = backward(ref, views);
        ParamVector flat = flatten(ref);
        for (std::size_t i = 0; i < flat.values.size(); ++i)
            flat.values[i] -= eta * res.grads.values[i];
        unflatten_into(flat, ref);
    }

    const auto report = local_train(client, {0.05, 1.0}, 0, 3, 4);
    CHECK(report.end_params.values == flatten(ref).values);
    CHECK(report.dataset_size == inst.size());
    CHECK(report.train_loss == Catch::Approx(dataset_loss(ref, inst.train)));
}

TEST_CASE("local_train: zero coefficients freeze the model") {
    const auto reg = tiny_registry();
    const auto ds = tiny_dataset(10, 3);
    const ModalityCombination combo{"a"};
    const auto inst = make_institution(1, combo, ds, 16, 4);

    ClientState client;
    client.dataset = &inst;
    client.net = build_network(combo, reg, 2, 1);
    client.gamma = uniform_gamma(combo, 0.0);
    client.rng = Rng(5);

    const double loss_before_train = dataset_loss(client.net, inst.train);
    const double loss_before_val = dataset_loss(client.net, inst.val);
    const auto report = local_train(client, {0.1, 1.0}, 0, 5, 4);
    CHECK(report.start_params.values == report.end_params.values);
    CHECK(report.train_loss == loss_before_train);
    CHECK(report.val_loss == loss_before_val);
}

TEST_CASE("local_train: K=2 equals two chained K=1 rounds") {
    const auto reg = tiny_registry();
    const auto ds = tiny_dataset(10, 5);
    const ModalityCombination combo{"a", "b"};
    const auto inst = make_institution(1, combo, ds, 20, 6);

    ClientState two;
    two.dataset = &inst;
    two.net = build_network(combo, reg, 2, 9);
    two.gamma = uniform_gamma(combo, 0.7);
    two.rng = Rng(11);
    const auto r2 = local_train(two, {0.05, 1.0}, 1, 2, 4);

    ClientState chained;
    chained.dataset = &inst;
    chained.net = build_network(combo, reg, 2, 9);
    chained.gamma = uniform_gamma(combo, 0.7);
    chained.rng = Rng(11);
    local_train(chained, {0.05, 1.0}, 1, 1, 4);
    const auto r1b = local_train(chained, {0.05, 1.0}, 1, 1, 4);

    CHECK(r2.end_params.values == r1b.end_params.values);
}

TEST_CASE("local_train: validation failures") {
    const auto reg = tiny_registry();
    const auto ds = tiny_dataset(6, 5);
    const ModalityCombination combo{"a"};
    const auto inst = make_institution(1, combo, ds, 12, 6);
    ClientState client;
    client.dataset = &inst;
    client.net = build_network(combo, reg, 2, 1);
    client.gamma = uniform_gamma(combo);
    client.rng = Rng(1);
    CHECK_THROWS_AS(local_train(client, {0.1, 1.0}, 0, 2, inst.train.size() + 1), RuntimeError);
    CHECK_THROWS_AS(local_train(client, {0.1, 1.0}, 0, 0, 2), RuntimeError);
}

TEST_CASE("aggregate_encoders: arithmetic and indicator semantics") {
    SECTION("single holder passes through bit-exactly") {
        const auto r = scalar_report(1, {"a"}, 1.25, 3.5, 10);
        const auto agg = aggregate_encoders(std::vector<RoundReport>{r});
        CHECK(agg.at("a").values == std::vector<double>{1.25});
    }
    SECTION("weighted mean 10/30 of 1 and 5 is 4") {
        const std::vector<RoundReport> reports{scalar_report(1, {"a"}, 1.0, 0.0, 10),
                                               scalar_report(2, {"a"}, 5.0, 0.0, 30)};
        const auto agg = aggregate_encoders(reports);
        CHECK(agg.at("a").values[0] == Catch::Approx(4.0).epsilon(1e-15));
    }
    SECTION("non-holders are excluded") {
        const std::vector<RoundReport> reports{scalar_report(1, {"a"}, 1.0, 0.0, 10),
                                               scalar_report(2, {"a"}, 5.0, 0.0, 30),
                                               scalar_report(3, {"b"}, 100.0, 0.0, 99)};
        const auto agg = aggregate_encoders(reports);
        CHECK(agg.at("a").values[0] == Catch::Approx(4.0).epsilon(1e-15));
        CHECK(agg.at("b").values[0] == Catch::Approx(100.0));
    }
    SECTION("uncovered required modality is an error") {
        const std::vector<RoundReport> reports{scalar_report(1, {"a"}, 1.0, 0.0, 10)};
        CHECK_THROWS_AS(aggregate_encoders(reports, {"a", "b"}), RuntimeError);
    }
}

TEST_CASE("aggregate_classifiers: per-combination grouping") {
    SECTION("one combination, equal sizes: plain mean") {
        const std::vector<RoundReport> reports{scalar_report(1, {"a"}, 0.0, 2.0, 10),
                                               scalar_report(2, {"a"}, 0.0, 4.0, 10)};
        const auto agg = aggregate_classifiers(reports);
        CHECK(agg.at("a").values[0] == Catch::Approx(3.0).epsilon(1e-15));
    }
    SECTION("subset combinations never cross-mix") {
        const std::vector<RoundReport> reports{scalar_report(1, {"a"}, 0.0, 2.0, 10),
                                               scalar_report(2, {"a", "b"}, 0.0, 8.0, 10)};
        const auto agg = aggregate_classifiers(reports);
        REQUIRE(agg.size() == 2);
        CHECK(agg.at("a").values[0] == Catch::Approx(2.0));
        CHECK(agg.at("a+b").values[0] == Catch::Approx(8.0));
    }
    SECTION("weighted mean matches the encoder arithmetic") {
        const std::vector<RoundReport> reports{scalar_report(1, {"a"}, 0.0, 1.0, 10),
                                               scalar_report(2, {"a"}, 0.0, 5.0, 30)};
        const auto agg = aggregate_classifiers(reports);
        CHECK(agg.at("a").values[0] == Catch::Approx(4.0).epsilon(1e-15));
    }
}

TEST_CASE("aggregation matches a brute-force weighted mean") {
    Rng rng(21);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t n = 2 + rng.index(5);
        std::vector<RoundReport> reports;
        for (std::size_t i = 0; i < n; ++i) {
            const bool both = rng.uniform() < 0.5;
            std::vector<ModalityId> mods = both ? std::vector<ModalityId>{"a", "b"}
                                                : std::vector<ModalityId>{rng.uniform() < 0.5
                                                                              ? "a"
                                                                              : "b"};
            reports.push_back(scalar_report(static_cast<int>(i), mods, rng.normal(),
                                            rng.normal(), 1 + rng.index(50)));
        }
        const auto enc = aggregate_encoders(reports);
        for (const auto& m : {"a", "b"}) {
            double num = 0.0, den = 0.0;
            for (const auto& r : reports) {
                const auto mods = modalities_of_key(r.combo_key);
                if (std::find(mods.begin(), mods.end(), m) == mods.end()) continue;
                const auto seg = extract_group(r.end_params, encoder_group_id(m));
                num += static_cast<double>(r.dataset_size) * seg.values[0];
                den += static_cast<double>(r.dataset_size);
            }
            if (den == 0.0) continue;
            CHECK(std::abs(enc.at(m).values[0] - num / den) <= 1e-12);
        }
        const auto clf = aggregate_classifiers(reports);
        std::map<std::string, std::pair<double, double>> brute;
        for (const auto& r : reports) {
            const auto seg = extract_group(r.end_params, kClassifierGroupId);
            brute[r.combo_key].first += static_cast<double>(r.dataset_size) * seg.values[0];
            brute[r.combo_key].second += static_cast<double>(r.dataset_size);
        }
        for (const auto& [key, nd] : brute)
            CHECK(std::abs(clf.at(key).values[0] - nd.first / nd.second) <= 1e-12);
    }
}

TEST_CASE("cumulative_gradient basics") {
    RoundReport r;
    r.start_params.values = {1.0, 2.0};
    r.start_params.layout = {{"clf", 2, 1}};
    r.end_params.values = {0.5, 1.5};
    r.end_params.layout = {{"clf", 2, 1}};
    const auto d = cumulative_gradient(r);
    CHECK(d.values == std::vector<double>{0.5, 0.5});

    RoundReport frozen = r;
    frozen.end_params = frozen.start_params;
    const auto z = cumulative_gradient(frozen);
    CHECK(z.values == std::vector<double>{0.0, 0.0});

    RoundReport bad = r;
    bad.end_params.layout = {{"clf", 1, 2}};
    CHECK_THROWS_AS(cumulative_gradient(bad), ShapeError);
}

TEST_CASE("cumulative_gradient equals the eta-scaled gradient sum") {
    const auto reg = tiny_registry();
    const auto ds = tiny_dataset(10, 7);
    const ModalityCombination combo{"a", "b"};
    const auto inst = make_institution(1, combo, ds, 20, 8);

    ClientState client;
    client.dataset = &inst;
    client.net = build_network(combo, reg, 2, 77);
    client.gamma = {{"a", 0.5}, {"b", 1.5}, {"classifier", 1.0}};
    client.rng = Rng(13);
    const double eta = 0.04;
    const int K = 4;

    // Replay with a cloned stream, accumulating eta * scale (.) grad per step.
    MultiModalNet ref = build_network(combo, reg, 2, 77);
    Rng ref_rng(13);
    const auto groups = param_groups(ref, client.gamma);
    ParamVector accum = flatten(ref);
    std::fill(accum.values.begin(), accum.values.end(), 0.0);
    for (int k = 0; k < K; ++k) {
        const auto batch = sample_minibatch(inst, 4, ref_rng);
        std::vector<SampleView> views;
        for (const auto* p : batch) views.push_back({&p->features, p->label});
        const auto res = backward(ref, views);
        ParamVector flat = flatten(ref);
        std::size_t pos = 0;
        for (const auto& entry : flat.layout) {
            double scale = 0.0;
            for (const auto& g : groups)
                if (g.group_id == entry.group_id) scale = g.lr_scale;
            for (std::size_t i = pos; i < pos + entry.size(); ++i) {
                accum.values[i] += eta * scale * res.grads.values[i];
                flat.values[i] -= eta * scale * res.grads.values[i];
            }
            pos += entry.size();
        }
        unflatten_into(flat, ref);
    }

    const auto report = local_train(client, {eta, 1.0}, 0, K, 4);
    const auto delta = cumulative_gradient(report);
    for (std::size_t i = 0; i < delta.values.size(); ++i)
        CHECK(std::abs(delta.values[i] - accum.values[i]) <= 1e-12);
}

TEST_CASE("global_trajectory arithmetic") {
    ServerState prev, next;
    prev.global_encoders["a"] = {{2.0}, {{encoder_group_id("a"), 1, 1}}};
    prev.global_classifiers["a"] = {{1.0}, {{kClassifierGroupId, 1, 1}}};
    next.global_encoders["a"] = {{1.5}, {{encoder_group_id("a"), 1, 1}}};
    next.global_classifiers["a"] = {{0.8}, {{kClassifierGroupId, 1, 1}}};
    const ModalityCombination combo{"a"};
    const auto traj = global_trajectory(prev, next, combo);
    CHECK(traj.values[0] == Catch::Approx(0.5));
    CHECK(traj.values[1] == Catch::Approx(0.2).epsilon(1e-12));

    const auto zero = global_trajectory(prev, prev, combo);
    CHECK(zero.values == std::vector<double>{0.0, 0.0});

    ServerState missing = next;
    missing.global_classifiers.clear();
    CHECK_THROWS_AS(global_trajectory(prev, missing, combo), RuntimeError);
}

TEST_CASE("global trajectory collapses to the lone client's displacement") {
    // One institution per modality-combination and one combination overall:
    // aggregation returns that client's parameters, so the global trajectory
    // equals its cumulative gradient.
    const auto reg = tiny_registry();
    const auto ds = tiny_dataset(10, 9);
    const ModalityCombination combo{"a", "b"};
    const auto inst = make_institution(1, combo, ds, 20, 10);

    ServerState prev = init_server(reg, {"a", "b"}, {combo}, 2, 5, 1.0);
    ClientState client;
    client.dataset = &inst;
    client.net = build_network(combo, reg, 2, 5);
    client.gamma = uniform_gamma(combo);
    client.rng = Rng(3);
    synchronize_client(prev, client);
    const auto report = local_train(client, {0.05, 1.0}, 0, 3, 4);

    ServerState next = prev;
    next.global_encoders = aggregate_encoders(std::vector<RoundReport>{report});
    next.global_classifiers = aggregate_classifiers(std::vector<RoundReport>{report});

    const auto traj = global_trajectory(prev, next, combo);
    const auto local = cumulative_gradient(report);
    REQUIRE(traj.values.size() == local.values.size());
    for (std::size_t i = 0; i < traj.values.size(); ++i)
        CHECK(traj.values[i] == Catch::Approx(local.values[i]).margin(1e-15));
}

TEST_CASE("pcw_weights examples") {
    const auto one = [](double v) {
        return ParamVector{{v}, {{kClassifierGroupId, 1, 1}}};
    };
    std::map<std::string, ParamVector> global;
    global["a"] = one(1.0);

    SECTION("single member gets weight one") {
        const auto w = pcw_weights({{1, "a", one(123.0)}}, global, 1.0);
        CHECK(w.rho_bar("a", 1) == 1.0);
    }
    SECTION("equal similarities split evenly") {
        const auto w = pcw_weights({{1, "a", one(0.3)}, {2, "a", one(0.3)}}, global, 1.0);
        CHECK(w.rho_bar("a", 1) == Catch::Approx(0.5));
        CHECK(w.rho_bar("a", 2) == Catch::Approx(0.5));
    }
    SECTION("rho = (ln 2, 0) gives (2/3, 1/3)") {
        const auto w =
            pcw_weights({{1, "a", one(std::log(2.0))}, {2, "a", one(0.0)}}, global, 1.0);
        CHECK(w.rho_bar("a", 1) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
        CHECK(w.rho_bar("a", 2) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SECTION("adding a constant to every similarity changes nothing") {
        Rng rng(8);
        for (int rep = 0; rep < 20; ++rep) {
            const double r1 = rng.normal(), r2 = rng.normal(), r3 = rng.normal();
            const double c = rng.uniform(-500.0, 500.0);
            const auto w = pcw_weights({{1, "a", one(r1)}, {2, "a", one(r2)}, {3, "a", one(r3)}},
                                       global, 1.0);
            const auto shifted = pcw_weights(
                {{1, "a", one(r1 + c)}, {2, "a", one(r2 + c)}, {3, "a", one(r3 + c)}}, global,
                1.0);
            for (int id : {1, 2, 3})
                CHECK(std::abs(w.rho_bar("a", id) - shifted.rho_bar("a", id)) <= 1e-9);
        }
    }
    SECTION("weights sum to one per group") {
        const auto w = pcw_weights(
            {{1, "a", one(4.0)}, {2, "a", one(-2.0)}, {3, "a", one(0.5)}}, global, 1.0);
        CHECK(w.rho_bar("a", 1) + w.rho_bar("a", 2) + w.rho_bar("a", 3) ==
              Catch::Approx(1.0).margin(1e-9));
        for (int id : {1, 2, 3}) CHECK(w.rho_bar("a", id) > 0.0);
    }
}

TEST_CASE("adjusted_losses examples") {
    auto report = [](int id, const std::string& key, double tr, double va) {
        RoundReport r;
        r.institution_id = id;
        r.combo_key = key;
        r.train_loss = tr;
        r.val_loss = va;
        return r;
    };
    SECTION("single institution passes through") {
        const std::vector<RoundReport> reports{report(1, "a", 0.7, 0.7)};
        PcwWeights w;
        w.by_combo["a"][1] = 1.0;
        const auto adj = adjusted_losses(reports, &w);
        CHECK(adj.at("a").train_loss == Catch::Approx(0.7));
    }
    SECTION("equal weights with the group-size factor") {
        const std::vector<RoundReport> reports{report(1, "a", 1.0, 1.0),
                                               report(2, "a", 3.0, 3.0)};
        PcwWeights w;
        w.by_combo["a"][1] = 0.5;
        w.by_combo["a"][2] = 0.5;
        const auto adj = adjusted_losses(reports, &w);
        CHECK(adj.at("a").train_loss == Catch::Approx(1.0));
        CHECK(adj.at("a").val_loss == Catch::Approx(1.0));
    }
    SECTION("uniform mode is the plain mean") {
        const std::vector<RoundReport> reports{report(1, "a", 1.0, 1.0),
                                               report(2, "a", 3.0, 3.0)};
        const auto adj = adjusted_losses(reports, nullptr);
        CHECK(adj.at("a").train_loss == Catch::Approx(2.0));
    }
}

TEST_CASE("overfitting and generalization") {
    const auto og = overfitting_generalization(0.5, 0.9);
    CHECK(og.overfitting == Catch::Approx(0.4).epsilon(1e-12));
    CHECK(og.generalization == Catch::Approx(0.9));
    CHECK(overfitting_generalization(0.7, 0.7).overfitting == 0.0);
    const auto perfect = overfitting_generalization(0.0, 0.6);
    CHECK(perfect.overfitting == perfect.generalization);
}

TEST_CASE("dogr_normalize examples") {
    SECTION("uniform ratios, tri-modal institution") {
        const auto g = dogr_normalize({{"a", 3.0}, {"b", 3.0}, {"c", 3.0}, {"classifier", 3.0}});
        for (const auto& [slot, v] : g) CHECK(v == Catch::Approx(0.5));
    }
    SECTION("ratios (4, 1) normalize to (1.6, 0.4)") {
        const auto g = dogr_normalize({{"m", 4.0}, {"classifier", 1.0}});
        CHECK(g.at("m") == Catch::Approx(1.6).epsilon(1e-12));
        CHECK(g.at("classifier") == Catch::Approx(0.4).epsilon(1e-12));
    }
    SECTION("degenerate ratios fall back to uniform") {
        const auto g = dogr_normalize({{"m", 1e-15}, {"classifier", 0.0}});
        CHECK(g.at("m") == Catch::Approx(1.0));
        CHECK(g.at("classifier") == Catch::Approx(1.0));
    }
    SECTION("coefficients always sum to two") {
        Rng rng(17);
        for (int rep = 0; rep < 50; ++rep) {
            std::map<std::string, double> ratios;
            const std::size_t n = 2 + rng.index(4);
            for (std::size_t i = 0; i < n; ++i)
                ratios["s" + std::to_string(i)] = std::abs(rng.normal()) + 1e-6;
            const auto g = dogr_normalize(ratios);
            double sum = 0.0;
            for (const auto& [slot, v] : g) sum += v;
            CHECK(sum == Catch::Approx(2.0).margin(1e-9));
        }
    }
}

TEST_CASE("dogr_coefficients from history") {
    const ModalityCombination uni{"a"};
    const ModalityCombination bi{"a", "b"};

    SECTION("uni-modal institutions always get (1, 1)") {
        std::map<std::string, std::vector<OgEntry>> history;
        history["a"] = {{0.3, 1.2}, {0.5, 0.9}};
        const auto g = dogr_coefficients(history, uni);
        CHECK(g.at("a") == Catch::Approx(1.0));
        CHECK(g.at("classifier") == Catch::Approx(1.0));
    }
    SECTION("insufficient history returns the initial coefficients") {
        std::map<std::string, std::vector<OgEntry>> history;
        history["a"] = {{0.3, 1.2}};
        const auto g = dogr_coefficients(history, uni);
        CHECK(g.at("a") == 1.0);
        CHECK(g.at("classifier") == 1.0);

        // A bi-modal institution also needs history for the partner modality.
        history["a"] = {{0.3, 1.2}, {0.5, 0.9}};
        history["a+b"] = {{0.1, 1.0}, {0.2, 0.8}};
        const auto h = dogr_coefficients(history, bi);
        CHECK(h.at("a") == 1.0);
        CHECK(h.at("b") == 1.0);
        CHECK(h.at("classifier") == 1.0);
    }
    SECTION("hand-computed bi-modal case") {
        // dG/dO per key: a: dG=2, dO=1 -> r=4; b: dG=1, dO=1 -> r=1;
        // a+b: dG=3, dO=3 -> r=1. phi = (4+1+1)/2 = 3.
        std::map<std::string, std::vector<OgEntry>> history;
        history["a"] = {{0.0, 0.0}, {1.0, 2.0}};
        history["b"] = {{0.0, 0.0}, {1.0, 1.0}};
        history["a+b"] = {{0.0, 0.0}, {3.0, 3.0}};
        const auto g = dogr_coefficients(history, bi, 0.0);
        CHECK(g.at("a") == Catch::Approx(4.0 / 3.0));
        CHECK(g.at("b") == Catch::Approx(1.0 / 3.0));
        CHECK(g.at("classifier") == Catch::Approx(1.0 / 3.0));
        double sum = 0.0;
        for (const auto& [slot, v] : g) sum += v;
        CHECK(sum == Catch::Approx(2.0).margin(1e-12));
    }
}

TEST_CASE("engine reduces to uni-modal parameter averaging") {
    // All institutions share one combination and train with unit
    // coefficients; one engine round must equal a dataset-size weighted mean
    // of the end parameters.
    const auto reg = tiny_registry();
    const auto ds = tiny_dataset(40, 31);
    const ModalityCombination combo{"a", "b"};

    PartitionPlan plan;
    plan.heterogeneity = Heterogeneity::kIid;
    plan.institutions = {{1, combo, 1}, {2, combo, 1}, {3, combo, 1}};
    plan.points_per_institution = 24;
    plan.val_fraction = 0.25;
    plan.seed = 4;
    const auto insts = partition(ds, plan);

    ServerState server = init_server(reg, {"a", "b"}, {combo}, 2, 99, 1.0);
    std::vector<RoundReport> reports;
    for (std::size_t i = 0; i < insts.size(); ++i) {
        ClientState client;
        client.institution_id = static_cast<int>(i + 1);
        client.dataset = &insts[i];
        client.net = build_network(combo, reg, 2, 99);
        client.gamma = uniform_gamma(combo);
        client.rng = Rng(derive_seed(1000, "client", i + 1));
        synchronize_client(server, client);
        reports.push_back(local_train(client, {0.05, 1.0}, 0, 3, 6));
    }

    ServerState next = server;
    next.global_encoders = aggregate_encoders(reports);
    next.global_classifiers = aggregate_classifiers(reports);
    const auto engine = next.assemble(combo);

    ParamVector brute = reports[0].end_params;
    std::fill(brute.values.begin(), brute.values.end(), 0.0);
    double total = 0.0;
    for (const auto& r : reports) total += static_cast<double>(r.dataset_size);
    for (const auto& r : reports)
        for (std::size_t i = 0; i < brute.values.size(); ++i)
            brute.values[i] +=
                static_cast<double>(r.dataset_size) / total * r.end_params.values[i];

    REQUIRE(engine.values.size() == brute.values.size());
    for (std::size_t i = 0; i < engine.values.size(); ++i)
        CHECK(std::abs(engine.values[i] - brute.values[i]) <= 1e-12);
}

TEST_CASE("run_federation: identical seeds are bit-identical") {
    ExperimentConfig cfg;
    cfg.modalities = tiny_dims();
    cfg.cohorts = {"x", "y"};
    cfg.num_classes = 2;
    cfg.dataset.total_points = 240;
    cfg.dataset.cohort_fractions = {0.5, 0.5};
    cfg.dataset.class_fractions = {0.5, 0.5};
    cfg.roster = {{1, ModalityCombination{"a", "b"}, 1},
                  {2, ModalityCombination{"a"}, 2},
                  {3, ModalityCombination{"b"}, 3}};
    cfg.heterogeneity = Heterogeneity::kIid;
    cfg.points_per_institution = 30;
    cfg.batch_size = 6;
    cfg.rounds = 4;
    cfg.local_steps = 3;
    cfg.eta0 = 0.05;
    cfg.mode = MethodMode::kDgbPcw;
    cfg.arch_preset = "desk";

    const auto a = run_federation(cfg);
    const auto b = run_federation(cfg);
    REQUIRE(a.rounds.size() == b.rounds.size());
    for (std::size_t t = 0; t < a.rounds.size(); ++t) {
        CHECK(a.rounds[t].global.accuracy == b.rounds[t].global.accuracy);
        CHECK(a.rounds[t].global.val_accuracy == b.rounds[t].global.val_accuracy);
        for (std::size_t i = 0; i < a.rounds[t].institutions.size(); ++i) {
            CHECK(a.rounds[t].institutions[i].gamma == b.rounds[t].institutions[i].gamma);
            CHECK(a.rounds[t].institutions[i].rho_bar == b.rounds[t].institutions[i].rho_bar);
        }
    }
    CHECK(a.final_server.assemble(ModalityCombination{"a", "b"}).values ==
          b.final_server.assemble(ModalityCombination{"a", "b"}).values);

    // Thread count must not change anything.
    ExperimentConfig threaded = cfg;
    threaded.threads = 3;
    const auto c = run_federation(threaded);
    CHECK(a.final_server.assemble(ModalityCombination{"a", "b"}).values ==
          c.final_server.assemble(ModalityCombination{"a", "b"}).values);
}

TEST_CASE("run_federation: simplex invariants hold every round") {
    ExperimentConfig cfg;
    cfg.modalities = tiny_dims();
    cfg.cohorts = {"x", "y"};
    cfg.num_classes = 2;
    cfg.dataset.total_points = 400;
    cfg.dataset.cohort_fractions = {0.5, 0.5};
    cfg.dataset.class_fractions = {0.5, 0.5};
    cfg.roster = {{1, ModalityCombination{"a", "b"}, 1}, {2, ModalityCombination{"a", "b"}, 2},
                  {3, ModalityCombination{"a"}, 3},      {4, ModalityCombination{"a"}, 1},
                  {5, ModalityCombination{"b"}, 2},      {6, ModalityCombination{"b"}, 3}};
    cfg.heterogeneity = Heterogeneity::kIid;
    cfg.points_per_institution = 30;
    cfg.batch_size = 6;
    cfg.rounds = 6;
    cfg.local_steps = 4;
    cfg.eta0 = 0.08;
    cfg.mode = MethodMode::kDgbPcw;

    const auto run = run_federation(cfg);
    for (const auto& round : run.rounds) {
        std::map<std::string, double> rho_sums;
        for (const auto& inst : round.institutions) {
            double gamma_sum = 0.0;
            for (const auto& [slot, v] : inst.gamma) {
                CHECK(v >= 0.0);
                gamma_sum += v;
            }
            const double expected =
                static_cast<double>(inst.gamma.size());  // ones until DGB kicks in
            if (round.t < 2)
                CHECK(gamma_sum == Catch::Approx(expected));
            else
                CHECK(gamma_sum == Catch::Approx(2.0).margin(1e-9));
            REQUIRE(inst.rho_bar.has_value());
            rho_sums[inst.combo_key] += *inst.rho_bar;
        }
        for (const auto& [key, sum] : rho_sums)
            CHECK(sum == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("run_federation: cm-fl bypasses the blending machinery") {
    ExperimentConfig cfg;
    cfg.modalities = tiny_dims();
    cfg.cohorts = {"x", "y"};
    cfg.num_classes = 2;
    cfg.dataset.total_points = 200;
    cfg.dataset.cohort_fractions = {0.5, 0.5};
    cfg.dataset.class_fractions = {0.5, 0.5};
    cfg.roster = {{1, ModalityCombination{"a", "b"}, 1}, {2, ModalityCombination{"a"}, 2}};
    cfg.heterogeneity = Heterogeneity::kIid;
    cfg.points_per_institution = 20;
    cfg.batch_size = 4;
    cfg.rounds = 4;
    cfg.local_steps = 2;
    cfg.eta0 = 0.05;
    cfg.mode = MethodMode::kCmFl;

    const auto run = run_federation(cfg);
    for (const auto& round : run.rounds) {
        for (const auto& inst : round.institutions) {
            CHECK_FALSE(inst.rho_bar.has_value());
            for (const auto& [slot, v] : inst.gamma) CHECK(v == 1.0);
        }
        for (const auto& combo : round.combos) {
            CHECK_FALSE(combo.overfitting.has_value());
            CHECK_FALSE(combo.generalization.has_value());
        }
    }
}

TEST_CASE("run_federation: um-fl forces the full combination") {
    ExperimentConfig cfg;
    cfg.modalities = tiny_dims();
    cfg.cohorts = {"x", "y"};
    cfg.num_classes = 2;
    cfg.dataset.total_points = 200;
    cfg.dataset.cohort_fractions = {0.5, 0.5};
    cfg.dataset.class_fractions = {0.5, 0.5};
    cfg.roster = {{1, ModalityCombination{"a"}, 1}, {2, ModalityCombination{"b"}, 2}};
    cfg.heterogeneity = Heterogeneity::kIid;
    cfg.points_per_institution = 20;
    cfg.batch_size = 4;
    cfg.rounds = 2;
    cfg.local_steps = 2;
    cfg.eta0 = 0.05;
    cfg.mode = MethodMode::kUmFl;

    const auto run = run_federation(cfg);
    for (const auto& round : run.rounds) {
        REQUIRE(round.combos.size() == 1);
        CHECK(round.combos[0].combo_key == "a+b");
        for (const auto& inst : round.institutions) CHECK(inst.combo_key == "a+b");
    }
}

TEST_CASE("run_federation: symmetric iid institutions get symmetric weights") {
    // Same combination, iid data, equal sizes: time-averaged weights should
    // hover around 1/2 for both members across seeds.
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ExperimentConfig cfg;
        cfg.modalities = tiny_dims();
        cfg.cohorts = {"x", "y"};
        cfg.num_classes = 2;
        cfg.dataset.total_points = 300;
        cfg.dataset.cohort_fractions = {0.5, 0.5};
        cfg.dataset.class_fractions = {0.5, 0.5};
        cfg.roster = {{1, ModalityCombination{"a", "b"}, 1},
                      {2, ModalityCombination{"a", "b"}, 1}};
        cfg.heterogeneity = Heterogeneity::kIid;
        cfg.points_per_institution = 40;
        cfg.batch_size = 8;
        cfg.rounds = 8;
        cfg.local_steps = 4;
        cfg.eta0 = 0.05;
        cfg.mode = MethodMode::kDgbPcw;
        cfg.master_seed = seed;

        const auto run = run_federation(cfg);
        double mean1 = 0.0;
        for (const auto& round : run.rounds) mean1 += *round.institutions[0].rho_bar;
        mean1 /= static_cast<double>(run.rounds.size());
        worst = std::max(worst, std::abs(mean1 - 0.5));
    }
    CHECK(worst < 0.2);
}
