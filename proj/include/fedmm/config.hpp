#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmm/data.hpp"
#include "fedmm/federation.hpp"

namespace fedmm {

struct DatasetSpec {
    std::string source = "synthetic";  // "synthetic" | "csv"
    std::string manifest;              // csv source only
    std::size_t total_points = 1600;
    double signal = 1.0;
    double noise = 1.0;
    double conflict = 0.5;
    std::size_t contest_templates = 8;
    double contest_fraction = 1.0;
    std::map<ModalityId, double> modality_signal;
    std::map<ModalityId, double> modality_noise;
    std::vector<double> cohort_fractions;  // empty -> preset for num_classes
    std::vector<double> class_fractions;   // empty -> preset for num_classes
};

struct ExperimentConfig {
    std::map<ModalityId, std::size_t> modalities = {
        {"clinical", 16}, {"image", 150}, {"mrna", 64}};
    std::string arch_preset = "desk";
    std::size_t num_classes = 3;
    std::vector<std::string> cohorts = {"brca", "lusc", "lihc"};
    DatasetSpec dataset;

    Heterogeneity heterogeneity = Heterogeneity::kTypeBased;
    std::string roster_preset = "tri21";
    std::vector<InstitutionSpec> roster;                   // empty -> resolve preset
    std::map<int, std::vector<double>> category_fractions; // empty -> resolve preset
    std::size_t points_per_institution = 50;
    double val_fraction = 0.2;
    double test_fraction = 0.15;

    MethodMode mode = MethodMode::kDgbPcw;
    int rounds = 20;
    int local_steps = 20;   // SGD iterations per round
    double eta0 = 1e-4;
    double decay = 0.99;
    double tau = 1.0;
    std::size_t batch_size = 16;
    bool signed_dogr = false;  // reserved; the shipped ratio is sign-insensitive

    std::uint64_t master_seed = 1;
    std::string out_dir = "out/run";
    int threads = 0;  // 0 -> hardware concurrency; never affects results
};

// ---------------------------------------------------------------------------
// Presets

// Stage counts per cohort observed in the reference cohorts; used as default
// global mixes so synthetic data keeps realistic imbalance. Falls back to a
// uniform mix when the experiment does not use exactly three cohorts.
inline std::vector<double> default_cohort_fractions(std::size_t num_classes,
                                                    std::size_t num_cohorts = 3) {
    if (num_cohorts != 3)
        return std::vector<double>(num_cohorts, 1.0 / static_cast<double>(num_cohorts));
    if (num_classes == 2) return {643.0 / 1132.0, 260.0 / 1132.0, 229.0 / 1132.0};
    return {851.0 / 1458.0, 304.0 / 1458.0, 303.0 / 1458.0};
}

inline std::vector<double> default_class_fractions(std::size_t num_classes) {
    if (num_classes == 2) return {459.0 / 1132.0, 673.0 / 1132.0};
    if (num_classes == 3) return {459.0 / 1458.0, 673.0 / 1458.0, 326.0 / 1458.0};
    return std::vector<double>(num_classes, 1.0 / static_cast<double>(num_classes));
}

// Category 1 mirrors the global mix; categories 2 and 3 skew progressively
// harder. Type-based rows are cohort fractions (in configured cohort order),
// class-based rows are class fractions.
inline std::map<int, std::vector<double>> preset_category_fractions(Heterogeneity h,
                                                                    std::size_t num_classes) {
    std::map<int, std::vector<double>> out;
    if (h == Heterogeneity::kTypeBased) {
        out[1] = default_cohort_fractions(num_classes);
        if (num_classes == 2) {
            out[2] = {54.0 / 99.0, 10.0 / 99.0, 35.0 / 99.0};
            out[3] = {58.0 / 99.0, 35.0 / 99.0, 6.0 / 99.0};
        } else {
            out[2] = {0.48, 0.28, 0.24};
            out[3] = {0.62, 0.12, 0.26};
        }
    } else if (h == Heterogeneity::kClassBased) {
        out[1] = default_class_fractions(num_classes);
        if (num_classes == 2) {
            out[2] = {0.62, 0.38};
            out[3] = {0.19, 0.81};
        } else {
            out[2] = {0.36, 0.34, 0.30};
            out[3] = {0.30, 0.54, 0.16};
        }
    }
    return out;
}

namespace detail {

inline void require_trio(const std::map<ModalityId, std::size_t>& modalities,
                         const std::string& preset) {
    for (const char* m : {"mrna", "image", "clinical"})
        if (!modalities.count(m))
            throw ConfigError("roster preset '" + preset + "' requires modality '" +
                              std::string(m) + "'");
}

}  // namespace detail

// Institution rosters. Categories cycle 1,2,3 inside each combination block,
// so every combination group spans all heterogeneity categories.
inline std::vector<InstitutionSpec> preset_roster(const std::string& preset,
                                                  const std::map<ModalityId, std::size_t>& dims) {
    std::vector<InstitutionSpec> roster;
    auto add = [&](std::initializer_list<const char*> mods, int copies) {
        std::vector<ModalityId> v;
        for (const char* m : mods) v.emplace_back(m);
        for (int i = 0; i < copies; ++i) {
            InstitutionSpec spec;
            spec.id = static_cast<int>(roster.size()) + 1;
            spec.combination = ModalityCombination(v);
            spec.category = static_cast<int>(roster.size()) % 3 + 1;
            roster.push_back(std::move(spec));
        }
    };
    if (preset == "tri21") {
        detail::require_trio(dims, preset);
        add({"mrna", "image", "clinical"}, 3);
        add({"mrna", "image"}, 3);
        add({"mrna", "clinical"}, 3);
        add({"image", "clinical"}, 3);
        add({"mrna"}, 3);
        add({"image"}, 3);
        add({"clinical"}, 3);
    } else if (preset == "mixed9") {
        detail::require_trio(dims, preset);
        add({"mrna", "image", "clinical"}, 3);
        add({"mrna", "image"}, 1);
        add({"mrna", "clinical"}, 1);
        add({"image", "clinical"}, 1);
        add({"mrna"}, 1);
        add({"image"}, 1);
        add({"clinical"}, 1);
    } else if (preset == "uni_dominant" || preset == "bi_dominant" || preset == "tri_dominant") {
        detail::require_trio(dims, preset);
        const int uni = preset == "uni_dominant" ? 4 : 1;
        const int bi = preset == "bi_dominant" ? 4 : 1;
        const int tri = preset == "tri_dominant" ? 12 : 3;
        add({"mrna", "image", "clinical"}, tri);
        add({"mrna", "image"}, bi);
        add({"mrna", "clinical"}, bi);
        add({"image", "clinical"}, bi);
        add({"mrna"}, uni);
        add({"image"}, uni);
        add({"clinical"}, uni);
    } else {
        throw ConfigError("unknown roster preset '" + preset + "'");
    }
    return roster;
}

inline std::vector<InstitutionSpec> resolved_roster(const ExperimentConfig& cfg) {
    if (!cfg.roster.empty()) return cfg.roster;
    return preset_roster(cfg.roster_preset, cfg.modalities);
}

inline std::map<int, std::vector<double>> resolved_category_fractions(
    const ExperimentConfig& cfg) {
    if (!cfg.category_fractions.empty()) return cfg.category_fractions;
    return preset_category_fractions(cfg.heterogeneity, cfg.num_classes);
}

inline std::vector<ModalityId> modality_universe(const ExperimentConfig& cfg) {
    std::vector<ModalityId> out;
    for (const auto& [m, d] : cfg.modalities) out.push_back(m);
    return out;
}

// ---------------------------------------------------------------------------
// Validation

inline void validate(const ExperimentConfig& cfg) {
    if (cfg.modalities.empty()) throw ConfigError("modalities: at least one required");
    for (const auto& [m, d] : cfg.modalities) {
        if (d == 0) throw ConfigError("modalities." + m + ": dimension must be positive");
        if (m == "classifier") throw ConfigError("modalities: 'classifier' is a reserved name");
    }
    if (cfg.num_classes < 2) throw ConfigError("num_classes: must be at least 2");
    if (cfg.cohorts.empty()) throw ConfigError("cohorts: at least one required");
    if (cfg.dataset.source != "synthetic" && cfg.dataset.source != "csv")
        throw ConfigError("dataset.source: must be 'synthetic' or 'csv'");
    if (cfg.dataset.source == "csv" && cfg.dataset.manifest.empty())
        throw ConfigError("dataset.manifest: required when dataset.source is 'csv'");
    if (cfg.dataset.source == "synthetic") {
        if (cfg.dataset.total_points == 0)
            throw ConfigError("dataset.total_points: must be positive");
        if (cfg.dataset.noise < 0) throw ConfigError("dataset.noise: must be nonnegative");
        if (!cfg.dataset.cohort_fractions.empty() &&
            cfg.dataset.cohort_fractions.size() != cfg.cohorts.size())
            throw ConfigError("dataset.cohort_fractions: one entry per cohort required");
        if (!cfg.dataset.class_fractions.empty() &&
            cfg.dataset.class_fractions.size() != cfg.num_classes)
            throw ConfigError("dataset.class_fractions: one entry per class required");
    }
    if (cfg.rounds < 1) throw ConfigError("training.rounds: must be at least 1");
    if (cfg.local_steps < 1) throw ConfigError("training.local_steps: must be at least 1");
    if (cfg.eta0 <= 0) throw ConfigError("training.eta0: must be positive");
    if (cfg.decay <= 0 || cfg.decay > 1) throw ConfigError("training.decay: must be in (0,1]");
    if (cfg.batch_size == 0) throw ConfigError("training.batch_size: must be positive");
    if (cfg.signed_dogr)
        throw ConfigError("training.signed_dogr: reserved flag, no signed variant is shipped");
    if (cfg.val_fraction <= 0 || cfg.val_fraction >= 1)
        throw ConfigError("partition.val_fraction: must be in (0,1)");
    if (cfg.test_fraction <= 0 || cfg.test_fraction >= 1)
        throw ConfigError("partition.test_fraction: must be in (0,1)");
    if (cfg.points_per_institution == 0)
        throw ConfigError("partition.points_per_institution: must be positive");
    if (cfg.threads < 0) throw ConfigError("threads: must be nonnegative");

    const auto roster = resolved_roster(cfg);
    if (roster.empty()) throw ConfigError("partition.roster: at least one institution");
    std::map<ModalityId, bool> covered;
    bool has_full = false;
    for (const auto& inst : roster) {
        for (const auto& m : inst.combination.modalities()) {
            if (!cfg.modalities.count(m))
                throw ConfigError("partition.roster: institution " + std::to_string(inst.id) +
                                  " references unknown modality '" + m + "'");
            covered[m] = true;
        }
        if (inst.combination.size() == cfg.modalities.size()) has_full = true;
        if (inst.category < 1)
            throw ConfigError("partition.roster: institution " + std::to_string(inst.id) +
                              " has invalid category");
    }
    for (const auto& [m, d] : cfg.modalities)
        if (!covered.count(m) && cfg.mode != MethodMode::kUmFl)
            throw ConfigError("partition.roster: modality '" + m +
                              "' is held by no institution");
    if (!has_full && cfg.mode != MethodMode::kUmFl)
        throw ConfigError(
            "partition.roster: at least one institution must hold every modality "
            "(the global evaluation target)");

    if (cfg.heterogeneity != Heterogeneity::kIid) {
        const auto fractions = resolved_category_fractions(cfg);
        const std::size_t want = cfg.heterogeneity == Heterogeneity::kTypeBased
                                     ? cfg.cohorts.size()
                                     : cfg.num_classes;
        for (const auto& inst : roster) {
            auto it = fractions.find(inst.category);
            if (it == fractions.end())
                throw ConfigError("partition.category_fractions: missing category " +
                                  std::to_string(inst.category));
            if (it->second.size() != want)
                throw ConfigError("partition.category_fractions: category " +
                                  std::to_string(inst.category) + " needs " +
                                  std::to_string(want) + " entries");
        }
    }
}

// ---------------------------------------------------------------------------
// JSON round trip

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["modalities"] = cfg.modalities;
    j["arch_preset"] = cfg.arch_preset;
    j["num_classes"] = cfg.num_classes;
    j["cohorts"] = cfg.cohorts;
    j["dataset"]["source"] = cfg.dataset.source;
    if (!cfg.dataset.manifest.empty()) j["dataset"]["manifest"] = cfg.dataset.manifest;
    j["dataset"]["total_points"] = cfg.dataset.total_points;
    j["dataset"]["signal"] = cfg.dataset.signal;
    j["dataset"]["noise"] = cfg.dataset.noise;
    j["dataset"]["conflict"] = cfg.dataset.conflict;
    j["dataset"]["contest_templates"] = cfg.dataset.contest_templates;
    j["dataset"]["contest_fraction"] = cfg.dataset.contest_fraction;
    j["dataset"]["modality_signal"] = cfg.dataset.modality_signal;
    j["dataset"]["modality_noise"] = cfg.dataset.modality_noise;
    j["dataset"]["cohort_fractions"] =
        cfg.dataset.cohort_fractions.empty() ? default_cohort_fractions(cfg.num_classes, cfg.cohorts.size())
                                             : cfg.dataset.cohort_fractions;
    j["dataset"]["class_fractions"] =
        cfg.dataset.class_fractions.empty() ? default_class_fractions(cfg.num_classes)
                                            : cfg.dataset.class_fractions;
    j["partition"]["heterogeneity"] = to_string(cfg.heterogeneity);
    nlohmann::json roster = nlohmann::json::array();
    for (const auto& inst : resolved_roster(cfg)) {
        roster.push_back({{"id", inst.id},
                          {"modalities", inst.combination.modalities()},
                          {"category", inst.category}});
    }
    j["partition"]["roster"] = roster;
    nlohmann::json fractions;
    for (const auto& [cat, f] : resolved_category_fractions(cfg))
        fractions[std::to_string(cat)] = f;
    j["partition"]["category_fractions"] = fractions;
    j["partition"]["points_per_institution"] = cfg.points_per_institution;
    j["partition"]["val_fraction"] = cfg.val_fraction;
    j["partition"]["test_fraction"] = cfg.test_fraction;
    j["training"]["mode"] = to_string(cfg.mode);
    j["training"]["rounds"] = cfg.rounds;
    j["training"]["local_steps"] = cfg.local_steps;
    j["training"]["eta0"] = cfg.eta0;
    j["training"]["decay"] = cfg.decay;
    j["training"]["tau"] = cfg.tau;
    j["training"]["batch_size"] = cfg.batch_size;
    j["training"]["signed_dogr"] = cfg.signed_dogr;
    j["master_seed"] = cfg.master_seed;
    return j;
}

// Semantic fields only: out_dir and threads never change results, so they do
// not participate in the hash.
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
    return fnv1a(to_json(cfg).dump());
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& scope) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const std::exception&) {
        throw ConfigError(scope + key + ": invalid value");
    }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    detail::read_field(j, "modalities", cfg.modalities, "");
    detail::read_field(j, "arch_preset", cfg.arch_preset, "");
    detail::read_field(j, "num_classes", cfg.num_classes, "");
    detail::read_field(j, "cohorts", cfg.cohorts, "");
    detail::read_field(j, "master_seed", cfg.master_seed, "");
    detail::read_field(j, "out_dir", cfg.out_dir, "");
    detail::read_field(j, "threads", cfg.threads, "");
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        detail::read_field(d, "source", cfg.dataset.source, "dataset.");
        detail::read_field(d, "manifest", cfg.dataset.manifest, "dataset.");
        detail::read_field(d, "total_points", cfg.dataset.total_points, "dataset.");
        detail::read_field(d, "signal", cfg.dataset.signal, "dataset.");
        detail::read_field(d, "noise", cfg.dataset.noise, "dataset.");
        detail::read_field(d, "conflict", cfg.dataset.conflict, "dataset.");
        detail::read_field(d, "contest_templates", cfg.dataset.contest_templates, "dataset.");
        detail::read_field(d, "contest_fraction", cfg.dataset.contest_fraction, "dataset.");
        detail::read_field(d, "modality_signal", cfg.dataset.modality_signal, "dataset.");
        detail::read_field(d, "modality_noise", cfg.dataset.modality_noise, "dataset.");
        detail::read_field(d, "cohort_fractions", cfg.dataset.cohort_fractions, "dataset.");
        detail::read_field(d, "class_fractions", cfg.dataset.class_fractions, "dataset.");
    }
    if (j.contains("partition")) {
        const auto& p = j.at("partition");
        if (p.contains("heterogeneity"))
            cfg.heterogeneity =
                heterogeneity_from_string(p.at("heterogeneity").get<std::string>());
        detail::read_field(p, "roster_preset", cfg.roster_preset, "partition.");
        if (p.contains("roster")) {
            cfg.roster.clear();
            for (const auto& r : p.at("roster")) {
                InstitutionSpec spec;
                spec.id = r.at("id").get<int>();
                spec.combination =
                    ModalityCombination(r.at("modalities").get<std::vector<ModalityId>>());
                if (r.contains("category")) spec.category = r.at("category").get<int>();
                cfg.roster.push_back(std::move(spec));
            }
        }
        if (p.contains("category_fractions")) {
            cfg.category_fractions.clear();
            for (const auto& [key, val] : p.at("category_fractions").items())
                cfg.category_fractions[std::stoi(key)] = val.get<std::vector<double>>();
        }
        detail::read_field(p, "points_per_institution", cfg.points_per_institution, "partition.");
        detail::read_field(p, "val_fraction", cfg.val_fraction, "partition.");
        detail::read_field(p, "test_fraction", cfg.test_fraction, "partition.");
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        if (t.contains("mode")) cfg.mode = mode_from_string(t.at("mode").get<std::string>());
        detail::read_field(t, "rounds", cfg.rounds, "training.");
        detail::read_field(t, "local_steps", cfg.local_steps, "training.");
        detail::read_field(t, "eta0", cfg.eta0, "training.");
        detail::read_field(t, "decay", cfg.decay, "training.");
        detail::read_field(t, "tau", cfg.tau, "training.");
        detail::read_field(t, "batch_size", cfg.batch_size, "training.");
        detail::read_field(t, "signed_dogr", cfg.signed_dogr, "training.");
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

// Everything run_federation needs that is derived from the config.
inline SyntheticSpec make_synthetic_spec(const ExperimentConfig& cfg) {
    SyntheticSpec spec;
    spec.modality_dims = cfg.modalities;
    spec.cohorts = cfg.cohorts;
    spec.num_classes = cfg.num_classes;
    spec.signal = cfg.dataset.signal;
    spec.noise = cfg.dataset.noise;
    spec.conflict = cfg.dataset.conflict;
    spec.contest_templates = cfg.dataset.contest_templates;
    spec.contest_fraction = cfg.dataset.contest_fraction;
    spec.modality_signal = cfg.dataset.modality_signal;
    spec.modality_noise = cfg.dataset.modality_noise;
    const auto cohort_fr = cfg.dataset.cohort_fractions.empty()
                               ? default_cohort_fractions(cfg.num_classes, cfg.cohorts.size())
                               : cfg.dataset.cohort_fractions;
    const auto class_fr = cfg.dataset.class_fractions.empty()
                              ? default_class_fractions(cfg.num_classes)
                              : cfg.dataset.class_fractions;
    spec.counts = make_counts(cfg.dataset.total_points, cohort_fr, class_fr, cfg.cohorts);
    return spec;
}

inline PartitionPlan make_plan(const ExperimentConfig& cfg,
                               const std::vector<InstitutionSpec>& roster) {
    PartitionPlan plan;
    plan.institutions = roster;
    plan.heterogeneity = cfg.heterogeneity;
    plan.category_fractions = resolved_category_fractions(cfg);
    plan.points_per_institution = cfg.points_per_institution;
    plan.val_fraction = cfg.val_fraction;
    plan.seed = derive_seed(cfg.master_seed, "partition");
    return plan;
}

}  // namespace fedmm
