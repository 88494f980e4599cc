#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedmm/config.hpp"
#include "fedmm/federation.hpp"

namespace fedmm {

inline constexpr const char* kVersion = "fedmm-0.1.0";

// All floating-point CSV fields use 9 significant digits.
inline std::string format_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
}

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    std::map<std::string, double> per_cohort_accuracy;
    std::size_t n_points = 0;
};

// Builds the global network for `combo` from server parameters and scores it
// on the given points (restricted to the combination's modalities).
inline EvalResult evaluate_global(const ServerState& server, const ArchRegistry& registry,
                                  std::size_t num_classes, std::span<const Datapoint> points,
                                  const ModalityCombination& combo) {
    if (!server.global_classifiers.count(combo.key()))
        throw RuntimeError("evaluate_global: no global classifier for '" + combo.key() + "'");
    if (points.empty()) throw RuntimeError("evaluate_global: empty dataset");
    MultiModalNet net = build_network(combo, registry, num_classes, /*seed=*/0);
    unflatten_into(server.assemble(combo), net);

    EvalResult res;
    std::map<std::string, std::pair<std::size_t, std::size_t>> cohort_hits;  // correct, total
    double loss = 0.0;
    std::size_t correct = 0;
    FeatureMap view;
    for (const auto& p : points) {
        view.clear();
        for (const auto& m : combo.modalities()) {
            auto it = p.features.find(m);
            if (it == p.features.end())
                throw RuntimeError("evaluate_global: datapoint lacks modality '" + m + "'");
            view[m] = it->second;
        }
        const auto logp = predict(net, view);
        loss += nll(logp, p.label);
        const std::size_t pred =
            std::max_element(logp.begin(), logp.end()) - logp.begin();
        auto& hits = cohort_hits[p.cohort];
        ++hits.second;
        if (pred == p.label) {
            ++correct;
            ++hits.first;
        }
    }
    res.n_points = points.size();
    res.mean_loss = loss / static_cast<double>(points.size());
    res.accuracy = static_cast<double>(correct) / static_cast<double>(points.size());
    for (const auto& [cohort, hits] : cohort_hits)
        res.per_cohort_accuracy[cohort] =
            static_cast<double>(hits.first) / static_cast<double>(hits.second);
    return res;
}

// ---------------------------------------------------------------------------
// Run records

struct ComboRecord {
    std::string combo_key;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::optional<double> overfitting;      // absent when the mode bypasses DGB
    std::optional<double> generalization;
    std::optional<double> test_accuracy;    // per-combination global model
    std::optional<double> test_loss;
};

struct InstitutionRecord {
    int institution_id = 0;
    std::string combo_key;
    int category = 1;
    std::map<std::string, double> gamma;  // modality names + "classifier"
    std::optional<double> rho_bar;        // present in dgb-pcw mode only
};

struct GlobalRecord {
    double accuracy = 0.0;      // held-out test split, full-modality model
    double loss = 0.0;
    double val_accuracy = 0.0;  // pooled institution validation sets
    std::map<std::string, double> per_cohort_accuracy;
};

struct RoundRecord {
    int t = 0;
    std::vector<ComboRecord> combos;
    std::vector<InstitutionRecord> institutions;
    GlobalRecord global;
};

struct RunResult {
    std::vector<RoundRecord> rounds;
    ExperimentConfig config;
    std::uint64_t seed = 0;
    ServerState final_server;  // in-memory only, not exported
};

// Round with the best pooled validation accuracy; earliest on ties.
inline std::size_t best_round(const RunResult& run) {
    if (run.rounds.empty()) throw RuntimeError("best_round: empty run");
    std::size_t best = 0;
    for (std::size_t i = 1; i < run.rounds.size(); ++i)
        if (run.rounds[i].global.val_accuracy > run.rounds[best].global.val_accuracy) best = i;
    return best;
}

// ---------------------------------------------------------------------------
// CSV export / import

namespace detail {

inline std::string opt_g9(const std::optional<double>& v) {
    return v ? format_g9(*v) : std::string();
}

inline std::optional<double> parse_opt(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream out(p);
    if (!out) throw DataError("cannot write " + p.string());
    return out;
}

}  // namespace detail

// Writes rounds.csv, institutions.csv, global.csv, combo_eval.csv and
// manifest.json into out_dir. Re-exporting the same run is byte-identical.
inline void export_metrics(const RunResult& run, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    const auto universe = modality_universe(run.config);
    const auto& cohorts = run.config.cohorts;

    {
        auto out = detail::open_out(out_dir / "rounds.csv");
        out << "t,combo_key,train_loss,val_loss,overfitting,generalization\n";
        for (const auto& round : run.rounds)
            for (const auto& c : round.combos)
                out << round.t << ',' << c.combo_key << ',' << format_g9(c.train_loss) << ','
                    << format_g9(c.val_loss) << ',' << detail::opt_g9(c.overfitting) << ','
                    << detail::opt_g9(c.generalization) << "\n";
    }
    {
        auto out = detail::open_out(out_dir / "institutions.csv");
        out << "t,institution_id,combo_key,category";
        for (const auto& m : universe) out << ",gamma_" << m;
        out << ",gamma_classifier,rho_bar\n";
        for (const auto& round : run.rounds)
            for (const auto& inst : round.institutions) {
                out << round.t << ',' << inst.institution_id << ',' << inst.combo_key << ','
                    << inst.category;
                for (const auto& m : universe) {
                    auto it = inst.gamma.find(m);
                    out << ',' << (it == inst.gamma.end() ? "" : format_g9(it->second));
                }
                out << ',' << format_g9(inst.gamma.at("classifier")) << ','
                    << detail::opt_g9(inst.rho_bar) << "\n";
            }
    }
    {
        auto out = detail::open_out(out_dir / "global.csv");
        out << "t,accuracy,loss,val_accuracy";
        for (const auto& c : cohorts) out << ",acc_" << c;
        out << "\n";
        for (const auto& round : run.rounds) {
            out << round.t << ',' << format_g9(round.global.accuracy) << ','
                << format_g9(round.global.loss) << ',' << format_g9(round.global.val_accuracy);
            for (const auto& c : cohorts) {
                auto it = round.global.per_cohort_accuracy.find(c);
                out << ',' << (it == round.global.per_cohort_accuracy.end()
                                   ? ""
                                   : format_g9(it->second));
            }
            out << "\n";
        }
    }
    {
        auto out = detail::open_out(out_dir / "combo_eval.csv");
        out << "t,combo_key,test_accuracy,test_loss\n";
        for (const auto& round : run.rounds)
            for (const auto& c : round.combos)
                if (c.test_accuracy)
                    out << round.t << ',' << c.combo_key << ',' << detail::opt_g9(c.test_accuracy)
                        << ',' << detail::opt_g9(c.test_loss) << "\n";
    }
    {
        nlohmann::json manifest;
        manifest["version"] = kVersion;
        manifest["mode"] = to_string(run.config.mode);
        manifest["seed"] = run.seed;
        char hex[20];
        std::snprintf(hex, sizeof hex, "%016llx",
                      static_cast<unsigned long long>(config_hash(run.config)));
        manifest["config_hash"] = std::string(hex);
        manifest["config"] = to_json(run.config);
        auto out = detail::open_out(out_dir / "manifest.json");
        out << manifest.dump(2) << "\n";
    }
}

struct ParsedRun {
    std::vector<RoundRecord> rounds;
    nlohmann::json manifest;
};

// Reads back what export_metrics wrote; used by `evaluate` and the round-trip
// tests.
inline ParsedRun parse_metrics(const std::filesystem::path& dir) {
    ParsedRun parsed;
    auto load = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        if (!in) throw DataError("cannot open " + p.string());
        std::vector<std::vector<std::string>> rows;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) rows.push_back(detail::split_csv_line(line));
        return rows;
    };

    std::map<int, RoundRecord> by_t;

    const auto ground = load(dir / "global.csv");
    const auto& ghead = ground.front();
    for (std::size_t i = 1; i < ground.size(); ++i) {
        const auto& row = ground[i];
        RoundRecord& rec = by_t[std::stoi(row[0])];
        rec.t = std::stoi(row[0]);
        rec.global.accuracy = std::stod(row[1]);
        rec.global.loss = std::stod(row[2]);
        rec.global.val_accuracy = std::stod(row[3]);
        for (std::size_t j = 4; j < row.size(); ++j)
            if (!row[j].empty())
                rec.global.per_cohort_accuracy[ghead[j].substr(4)] = std::stod(row[j]);
    }

    const auto rows = load(dir / "rounds.csv");
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        ComboRecord rec;
        rec.combo_key = row[1];
        rec.train_loss = std::stod(row[2]);
        rec.val_loss = std::stod(row[3]);
        rec.overfitting = detail::parse_opt(row[4]);
        rec.generalization = detail::parse_opt(row[5]);
        by_t[std::stoi(row[0])].combos.push_back(std::move(rec));
    }

    const auto ceval = load(dir / "combo_eval.csv");
    for (std::size_t i = 1; i < ceval.size(); ++i) {
        const auto& row = ceval[i];
        auto& combos = by_t[std::stoi(row[0])].combos;
        for (auto& rec : combos)
            if (rec.combo_key == row[1]) {
                rec.test_accuracy = detail::parse_opt(row[2]);
                rec.test_loss = detail::parse_opt(row[3]);
            }
    }

    const auto irows = load(dir / "institutions.csv");
    const auto& ihead = irows.front();
    for (std::size_t i = 1; i < irows.size(); ++i) {
        const auto& row = irows[i];
        InstitutionRecord rec;
        rec.institution_id = std::stoi(row[1]);
        rec.combo_key = row[2];
        rec.category = std::stoi(row[3]);
        for (std::size_t j = 4; j + 1 < row.size(); ++j)
            if (!row[j].empty())
                rec.gamma[ihead[j].substr(6)] = std::stod(row[j]);  // strip "gamma_"
        rec.rho_bar = detail::parse_opt(row.back());
        by_t[std::stoi(row[0])].institutions.push_back(std::move(rec));
    }

    for (auto& [t, rec] : by_t) parsed.rounds.push_back(std::move(rec));

    std::ifstream min(dir / "manifest.json");
    if (!min) throw DataError("cannot open " + (dir / "manifest.json").string());
    min >> parsed.manifest;
    return parsed;
}

// ---------------------------------------------------------------------------
// Grids and summaries

struct GridCell {
    MethodMode mode = MethodMode::kCmFl;
    Heterogeneity heterogeneity = Heterogeneity::kIid;
    std::vector<std::uint64_t> seeds;
};

struct GridCellResult {
    MethodMode mode;
    Heterogeneity heterogeneity;
    std::vector<double> best_accuracies;  // one per seed, seed order
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
};

inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw RuntimeError("quantile: empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = static_cast<std::size_t>(std::ceil(pos));
    const double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

inline GridCellResult summarize_cell(MethodMode mode, Heterogeneity het,
                                     std::vector<double> best_accuracies) {
    GridCellResult res;
    res.mode = mode;
    res.heterogeneity = het;
    res.best_accuracies = std::move(best_accuracies);
    res.median = quantile(res.best_accuracies, 0.5);
    res.q1 = quantile(res.best_accuracies, 0.25);
    res.q3 = quantile(res.best_accuracies, 0.75);
    return res;
}

inline void write_comparison_csv(const std::vector<GridCellResult>& cells,
                                 const std::filesystem::path& path) {
    auto out = detail::open_out(path);
    out << "mode,heterogeneity,n_seeds,median_best_accuracy,q1,q3,iqr\n";
    for (const auto& c : cells)
        out << to_string(c.mode) << ',' << to_string(c.heterogeneity) << ','
            << c.best_accuracies.size() << ',' << format_g9(c.median) << ',' << format_g9(c.q1)
            << ',' << format_g9(c.q3) << ',' << format_g9(c.q3 - c.q1) << "\n";
}

struct RhoStat {
    int institution_id = 0;
    std::string combo_key;
    int category = 1;
    double mean = 0.0;
    double sd = 0.0;
};

// Time-aggregated similarity weights per institution. Empty (with a note on
// stderr) for runs whose mode carries no weights.
inline std::vector<RhoStat> rho_distribution(const RunResult& run) {
    if (run.config.mode != MethodMode::kDgbPcw) {
        std::fprintf(stderr, "note: rho_distribution: mode '%s' has no similarity weights\n",
                     to_string(run.config.mode).c_str());
        return {};
    }
    std::map<int, std::pair<std::string, int>> meta;  // institution -> (combo, category)
    std::map<int, std::vector<double>> series;
    for (const auto& round : run.rounds)
        for (const auto& inst : round.institutions)
            if (inst.rho_bar) {
                meta[inst.institution_id] = {inst.combo_key, inst.category};
                series[inst.institution_id].push_back(*inst.rho_bar);
            }
    std::vector<RhoStat> out;
    for (const auto& [id, values] : series) {
        RhoStat stat;
        stat.institution_id = id;
        stat.combo_key = meta[id].first;
        stat.category = meta[id].second;
        double mean = 0.0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        double var = 0.0;
        for (double v : values) var += (v - mean) * (v - mean);
        stat.mean = mean;
        stat.sd = values.size() > 1
                      ? std::sqrt(var / static_cast<double>(values.size() - 1))
                      : 0.0;
        out.push_back(stat);
    }
    return out;
}

}  // namespace fedmm
