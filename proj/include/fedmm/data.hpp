#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedmm/model.hpp"
#include "fedmm/rng.hpp"

namespace fedmm {

struct Datapoint {
    FeatureMap features;
    std::size_t label = 0;
    std::string cohort;
};

inline std::vector<double> one_hot(std::size_t label, std::size_t num_classes) {
    if (label >= num_classes) throw RuntimeError("one_hot: label out of range");
    std::vector<double> v(num_classes, 0.0);
    v[label] = 1.0;
    return v;
}

struct GlobalDataset {
    std::vector<Datapoint> points;
    std::map<ModalityId, std::size_t> modality_dims;
    std::size_t num_classes = 0;
    std::vector<std::string> cohorts;

    std::size_t cohort_index(const std::string& cohort) const {
        for (std::size_t i = 0; i < cohorts.size(); ++i)
            if (cohorts[i] == cohort) return i;
        throw DataError("unknown cohort '" + cohort + "'");
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (const auto& p : points) ++counts[p.label];
        return counts;
    }

    std::vector<std::size_t> cohort_counts() const {
        std::vector<std::size_t> counts(cohorts.size(), 0);
        for (const auto& p : points) ++counts[cohort_index(p.cohort)];
        return counts;
    }
};

// ---------------------------------------------------------------------------
// Synthetic generation
//
// Features for a point of (cohort c, class y) are Gaussian around a
// deterministic mean. The first cohort is the anchor: its class patterns
// live in a private slice of each modality's coordinates, so anchor-share
// shifts which coordinates matter. The remaining cohorts form contest pairs:
// both members of a pair draw from the same signature and the same set of
// class-slot directions, but the pair's second member uses a cyclically
// shifted class-to-slot assignment (`conflict` scales the slot amplitude).
// Within a pair the noise is drawn from a small set of repeated templates
// keyed by (pair, slot, template): the same feature vector occurs with both
// members' (different) class labels throughout the dataset, so the contest
// is irreducible even for a lookup table. A local model can only resolve a
// slot toward its own cohort mix; skewed mixes resolve decisively while
// global-like mixes stay contested, which is what the heterogeneity
// experiments measure.

struct SyntheticSpec {
    std::map<ModalityId, std::size_t> modality_dims;
    std::vector<std::string> cohorts;
    std::size_t num_classes = 0;
    std::vector<std::vector<std::size_t>> counts;  // [cohort][class]
    double signal = 1.0;
    double noise = 1.0;
    double conflict = 0.5;           // amplitude of the contested slot patterns
    std::size_t contest_templates = 8;  // distinct feature vectors per contested slot
    double contest_fraction = 1.0;   // share of pair points drawn from the templates
    std::map<ModalityId, double> modality_signal;  // multiplies `signal`; default 1
    std::map<ModalityId, double> modality_noise;   // multiplies `noise`; default 1
};

// Integer counts from fractional targets: floor everything, then hand out the
// remainder by largest fractional part. Ties break by `tie_rank` (ascending),
// which callers set to stratum-name order. Guarantees |count - target| < 1.
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& targets,
                                                  std::size_t total,
                                                  const std::vector<std::size_t>& tie_rank) {
    std::vector<std::size_t> counts(targets.size());
    std::vector<std::pair<double, std::size_t>> rema;  // (fractional part, index)
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0.0) throw RuntimeError("largest_remainder: negative target");
        counts[i] = static_cast<std::size_t>(std::floor(targets[i]));
        assigned += counts[i];
        rema.emplace_back(targets[i] - std::floor(targets[i]), i);
    }
    if (assigned > total) throw RuntimeError("largest_remainder: targets exceed total");
    std::sort(rema.begin(), rema.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return tie_rank[a.second] < tie_rank[b.second];
    });
    for (std::size_t k = 0; k < total - assigned; ++k) ++counts[rema[k % rema.size()].second];
    return counts;
}

inline std::vector<std::size_t> identity_rank(std::size_t n) {
    std::vector<std::size_t> r(n);
    std::iota(r.begin(), r.end(), 0);
    return r;
}

// Rank of each position when entries are ordered by name.
inline std::vector<std::size_t> name_rank(const std::vector<std::string>& names) {
    std::vector<std::size_t> order = identity_rank(names.size());
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return names[a] < names[b]; });
    std::vector<std::size_t> rank(names.size());
    for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = i;
    return rank;
}

// Fills SyntheticSpec::counts from overall fractions.
inline std::vector<std::vector<std::size_t>> make_counts(
    std::size_t total, const std::vector<double>& cohort_fractions,
    const std::vector<double>& class_fractions, const std::vector<std::string>& cohort_names) {
    std::vector<double> cohort_targets;
    for (double f : cohort_fractions) cohort_targets.push_back(f * static_cast<double>(total));
    auto per_cohort = largest_remainder(cohort_targets, total, name_rank(cohort_names));
    std::vector<std::vector<std::size_t>> counts;
    for (std::size_t c = 0; c < cohort_fractions.size(); ++c) {
        std::vector<double> class_targets;
        for (double f : class_fractions)
            class_targets.push_back(f * static_cast<double>(per_cohort[c]));
        counts.push_back(largest_remainder(class_targets, per_cohort[c],
                                           identity_rank(class_fractions.size())));
    }
    return counts;
}

namespace detail {

// Deterministic pattern in [-1, 1]^dim for a mean component.
inline std::vector<double> mean_pattern(std::uint64_t seed, const std::string& tag,
                                        std::size_t dim) {
    Rng rng(derive_seed(seed, tag));
    std::vector<double> v(dim);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

// Deterministic standard-normal noise keyed by (tag, index).
inline std::vector<double> noise_pattern(std::uint64_t seed, const std::string& tag,
                                         std::uint64_t index, std::size_t dim) {
    Rng rng(derive_seed(seed, tag, index));
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    return v;
}

}  // namespace detail

inline GlobalDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.cohorts.empty() || spec.num_classes == 0 || spec.modality_dims.empty())
        throw ConfigError("generate_synthetic: cohorts, classes and modalities must be nonempty");
    for (const auto& [m, d] : spec.modality_dims)
        if (d == 0) throw ConfigError("generate_synthetic: modality '" + m + "' has zero dim");
    if (spec.counts.size() != spec.cohorts.size())
        throw ConfigError("generate_synthetic: counts must have one row per cohort");
    for (const auto& row : spec.counts) {
        if (row.size() != spec.num_classes)
            throw ConfigError("generate_synthetic: counts row size != num_classes");
        for (std::size_t n : row)
            if (n == 0) throw ConfigError("generate_synthetic: all (cohort, class) counts must be positive");
    }

    const std::size_t num_cohorts = spec.cohorts.size();

    auto mean_for = [&](const ModalityId& m, std::size_t dim, std::size_t c, std::size_t y) {
        std::vector<double> mu(dim, 0.0);
        double msig = spec.signal;
        if (auto it = spec.modality_signal.find(m); it != spec.modality_signal.end())
            msig *= it->second;
        const std::size_t anchor_end = num_cohorts > 1 ? std::max<std::size_t>(dim / 3, 1) : dim;
        if (c == 0) {
            // Anchor cohort: class patterns in its private slice, signature
            // on the rest.
            const auto cls = detail::mean_pattern(
                seed, "class:" + m + ":" + spec.cohorts[0] + ":" + std::to_string(y),
                anchor_end);
            for (std::size_t j = 0; j < anchor_end; ++j) mu[j] = msig * cls[j];
            const auto sig = detail::mean_pattern(seed, "cohort:" + m + ":" + spec.cohorts[0],
                                                  dim);
            for (std::size_t j = anchor_end; j < dim; ++j) mu[j] = 0.5 * msig * sig[j];
            return mu;
        }
        // Contest pairs share a signature and a slot set; the second member's
        // class-to-slot assignment is shifted by one.
        const std::size_t pair = (c - 1) / 2;
        const std::size_t member = (c - 1) % 2;
        const std::size_t slot = (y + member) % spec.num_classes;
        const std::size_t region = dim - anchor_end;
        const auto sig = detail::mean_pattern(
            seed, "pair:" + m + ":" + std::to_string(pair), region);
        const auto slots = detail::mean_pattern(
            seed, "slot:" + m + ":" + std::to_string(pair) + ":" + std::to_string(slot),
            region);
        for (std::size_t j = 0; j < region; ++j)
            mu[anchor_end + j] = 0.5 * msig * sig[j] + spec.conflict * msig * slots[j];
        return mu;
    };

    GlobalDataset ds;
    ds.modality_dims = spec.modality_dims;
    ds.num_classes = spec.num_classes;
    ds.cohorts = spec.cohorts;
    Rng noise_rng(derive_seed(seed, "noise"));
    for (std::size_t c = 0; c < num_cohorts; ++c) {
        for (std::size_t y = 0; y < spec.num_classes; ++y) {
            std::map<ModalityId, std::vector<double>> means;
            for (const auto& [m, dim] : spec.modality_dims) means[m] = mean_for(m, dim, c, y);
            for (std::size_t i = 0; i < spec.counts[c][y]; ++i) {
                Datapoint p;
                p.label = y;
                p.cohort = spec.cohorts[c];
                for (const auto& [m, dim] : spec.modality_dims) {
                    double scale = spec.noise;
                    if (auto it = spec.modality_noise.find(m); it != spec.modality_noise.end())
                        scale *= it->second;
                    std::vector<double> x = means.at(m);
                    const bool contested =
                        c > 0 && spec.contest_fraction > 0.0 &&
                        static_cast<double>(i % 100) < spec.contest_fraction * 100.0;
                    if (contested) {
                        // Contested pair points draw twin noise keyed by
                        // (pair, slot, template): the same feature vector
                        // recurs with both members' (different) class labels,
                        // so the contest cannot be memorized away. The
                        // remaining pair points get fresh noise and stay
                        // learnable.
                        const std::size_t pair = (c - 1) / 2;
                        const std::size_t member = (c - 1) % 2;
                        const std::size_t slot = (y + member) % spec.num_classes;
                        const std::size_t tpl =
                            spec.contest_templates > 0 ? i % spec.contest_templates : i;
                        const auto noise = detail::noise_pattern(
                            seed,
                            "twin:" + m + ":" + std::to_string(pair) + ":" +
                                std::to_string(slot),
                            tpl, dim);
                        for (std::size_t j = 0; j < dim; ++j) x[j] += scale * noise[j];
                    } else {
                        for (double& v : x) v += scale * noise_rng.normal();
                    }
                    p.features[m] = std::move(x);
                }
                ds.points.push_back(std::move(p));
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// CSV ingestion
//
// Feature file: header "patient_id,f0,...,f{d-1}", one row per patient.
// Labels file: header "patient_id,label,cohort".
// Manifest: {"modalities": {name: path}, "labels": path, "num_classes": N}.

struct LoadResult {
    GlobalDataset dataset;
    std::size_t dropped = 0;  // patients missing at least one modality
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

inline double parse_double(const std::string& s, const std::string& file, std::size_t row) {
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError(file + ":" + std::to_string(row) + ": not a number: '" + s + "'");
    }
}

}  // namespace detail

inline LoadResult load_csv(const std::filesystem::path& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw DataError("cannot open manifest " + manifest_path.string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw DataError("manifest " + manifest_path.string() + ": " + e.what());
    }
    if (!manifest.contains("modalities") || !manifest.contains("labels") ||
        !manifest.contains("num_classes"))
        throw DataError("manifest must contain 'modalities', 'labels' and 'num_classes'");

    const auto base = manifest_path.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };

    LoadResult result;
    GlobalDataset& ds = result.dataset;
    ds.num_classes = manifest.at("num_classes").get<std::size_t>();
    if (ds.num_classes == 0) throw DataError("manifest: num_classes must be positive");

    // patient id -> features per modality
    std::map<std::string, FeatureMap> features;
    for (const auto& [modality, path_json] : manifest.at("modalities").items()) {
        const std::string fname = resolve(path_json.get<std::string>()).string();
        std::ifstream in(fname);
        if (!in) throw DataError("cannot open feature file " + fname);
        std::string line;
        if (!std::getline(in, line)) throw DataError(fname + ": empty file");
        auto header = detail::split_csv_line(line);
        if (header.size() < 2 || header[0] != "patient_id")
            throw DataError(fname + ":1: header must start with patient_id");
        const std::size_t dim = header.size() - 1;
        ds.modality_dims[modality] = dim;
        std::size_t row = 1;
        while (std::getline(in, line)) {
            ++row;
            if (line.empty()) continue;
            auto fields = detail::split_csv_line(line);
            if (fields.size() != dim + 1)
                throw DataError(fname + ":" + std::to_string(row) + ": expected " +
                                std::to_string(dim + 1) + " columns, got " +
                                std::to_string(fields.size()));
            auto& fmap = features[fields[0]];
            if (fmap.count(modality))
                throw DataError(fname + ":" + std::to_string(row) + ": duplicate patient_id '" +
                                fields[0] + "'");
            std::vector<double> x(dim);
            for (std::size_t j = 0; j < dim; ++j)
                x[j] = detail::parse_double(fields[j + 1], fname, row);
            fmap[modality] = std::move(x);
        }
    }

    const std::string lname = resolve(manifest.at("labels").get<std::string>()).string();
    std::ifstream lin(lname);
    if (!lin) throw DataError("cannot open labels file " + lname);
    std::string line;
    if (!std::getline(lin, line)) throw DataError(lname + ": empty file");
    if (detail::split_csv_line(line) != std::vector<std::string>{"patient_id", "label", "cohort"})
        throw DataError(lname + ":1: header must be patient_id,label,cohort");
    std::map<std::string, std::pair<std::size_t, std::string>> labels;
    std::size_t row = 1;
    while (std::getline(lin, line)) {
        ++row;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != 3)
            throw DataError(lname + ":" + std::to_string(row) + ": expected 3 columns");
        if (labels.count(fields[0]))
            throw DataError(lname + ":" + std::to_string(row) + ": duplicate patient_id '" +
                            fields[0] + "'");
        const double lv = detail::parse_double(fields[1], lname, row);
        if (lv < 0 || lv != std::floor(lv) || lv >= static_cast<double>(ds.num_classes))
            throw DataError(lname + ":" + std::to_string(row) + ": label out of range");
        labels[fields[0]] = {static_cast<std::size_t>(lv), fields[2]};
    }

    const std::size_t num_modalities = manifest.at("modalities").size();
    std::vector<std::string> cohort_set;
    for (const auto& [pid, pair] : labels) {
        auto fit = features.find(pid);
        if (fit == features.end() || fit->second.size() != num_modalities) {
            ++result.dropped;
            continue;
        }
        Datapoint p;
        p.features = fit->second;
        p.label = pair.first;
        p.cohort = pair.second;
        if (std::find(cohort_set.begin(), cohort_set.end(), p.cohort) == cohort_set.end())
            cohort_set.push_back(p.cohort);
        ds.points.push_back(std::move(p));
    }
    // Feature rows without a label row also count as incomplete patients.
    for (const auto& [pid, fmap] : features)
        if (!labels.count(pid)) ++result.dropped;

    std::sort(cohort_set.begin(), cohort_set.end());
    ds.cohorts = cohort_set;
    return result;
}

// Writes a dataset in the same schema load_csv reads. Returns the manifest path.
inline std::filesystem::path save_csv(const GlobalDataset& ds,
                                      const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto fmt = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    // Zero-padded ids keep the lexicographic join order equal to row order.
    auto pid = [](std::size_t i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "p%06zu", i);
        return std::string(buf);
    };
    nlohmann::json manifest;
    manifest["num_classes"] = ds.num_classes;
    manifest["labels"] = "labels.csv";
    for (const auto& [m, dim] : ds.modality_dims) {
        const std::string fname = "features_" + m + ".csv";
        std::ofstream out(dir / fname);
        if (!out) throw DataError("cannot write " + (dir / fname).string());
        out << "patient_id";
        for (std::size_t j = 0; j < dim; ++j) out << ",f" << j;
        out << "\n";
        for (std::size_t i = 0; i < ds.points.size(); ++i) {
            out << pid(i);
            for (double v : ds.points[i].features.at(m)) out << "," << fmt(v);
            out << "\n";
        }
        manifest["modalities"][m] = fname;
    }
    {
        std::ofstream out(dir / "labels.csv");
        if (!out) throw DataError("cannot write " + (dir / "labels.csv").string());
        out << "patient_id,label,cohort\n";
        for (std::size_t i = 0; i < ds.points.size(); ++i)
            out << pid(i) << "," << ds.points[i].label << "," << ds.points[i].cohort << "\n";
    }
    const auto mpath = dir / "dataset_manifest.json";
    std::ofstream out(mpath);
    out << manifest.dump(2) << "\n";
    return mpath;
}

// ---------------------------------------------------------------------------
// Partitioning

enum class Heterogeneity { kIid, kTypeBased, kClassBased };

inline std::string to_string(Heterogeneity h) {
    switch (h) {
        case Heterogeneity::kIid: return "iid";
        case Heterogeneity::kTypeBased: return "type_based";
        case Heterogeneity::kClassBased: return "class_based";
    }
    return "?";
}

inline Heterogeneity heterogeneity_from_string(const std::string& s) {
    if (s == "iid") return Heterogeneity::kIid;
    if (s == "type_based") return Heterogeneity::kTypeBased;
    if (s == "class_based") return Heterogeneity::kClassBased;
    throw ConfigError("unknown heterogeneity '" + s + "'");
}

struct InstitutionSpec {
    int id = 0;
    ModalityCombination combination;
    int category = 1;
};

struct PartitionPlan {
    std::vector<InstitutionSpec> institutions;
    Heterogeneity heterogeneity = Heterogeneity::kIid;
    // Per category: fraction per cohort (type-based, aligned with
    // GlobalDataset::cohorts) or per class (class-based). Unused for iid.
    std::map<int, std::vector<double>> category_fractions;
    std::size_t points_per_institution = 50;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct InstitutionDataset {
    int institution_id = 0;
    ModalityCombination combination;
    int category = 1;
    std::vector<Datapoint> train;
    std::vector<Datapoint> val;

    std::size_t size() const { return train.size() + val.size(); }
};

namespace detail {

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t k = idx.size(); k > 1; --k) std::swap(idx[k - 1], idx[rng.index(k)]);
}

inline Datapoint restrict_point(const Datapoint& p, const ModalityCombination& combo) {
    Datapoint out;
    out.label = p.label;
    out.cohort = p.cohort;
    for (const auto& m : combo.modalities()) {
        auto it = p.features.find(m);
        if (it == p.features.end())
            throw DataError("datapoint lacks modality '" + m + "' required by an institution");
        out.features[m] = it->second;
    }
    return out;
}

// Class-stratified train/val split; both sides are guaranteed nonempty.
// Points are shuffled within each class first: the incoming order groups
// cohorts together, and a positional split would push one cohort into val.
inline void split_train_val(std::vector<Datapoint> points, double val_fraction,
                            std::size_t num_classes, InstitutionDataset& out, Rng& rng) {
    const std::size_t n = points.size();
    std::size_t val_total =
        static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    val_total = std::min(std::max<std::size_t>(val_total, 1), n - 1);
    std::vector<std::vector<Datapoint>> by_class(num_classes);
    for (auto& p : points) by_class[p.label].push_back(std::move(p));
    for (auto& cls : by_class)
        for (std::size_t k = cls.size(); k > 1; --k) std::swap(cls[k - 1], cls[rng.index(k)]);
    std::vector<double> targets;
    for (const auto& cls : by_class)
        targets.push_back(val_fraction * static_cast<double>(cls.size()));
    // Fractions may not sum exactly to val_total; rescale before rounding.
    const double tsum = std::accumulate(targets.begin(), targets.end(), 0.0);
    if (tsum > 0)
        for (double& t : targets) t *= static_cast<double>(val_total) / tsum;
    auto val_counts = largest_remainder(targets, val_total, identity_rank(num_classes));
    for (std::size_t y = 0; y < num_classes; ++y) {
        auto& cls = by_class[y];
        std::size_t take = std::min(val_counts[y], cls.size());
        for (std::size_t i = 0; i < cls.size(); ++i) {
            if (i + take >= cls.size())
                out.val.push_back(std::move(cls[i]));
            else
                out.train.push_back(std::move(cls[i]));
        }
    }
    if (out.train.empty() || out.val.empty())
        throw DataError("institution " + std::to_string(out.institution_id) +
                        ": train/val split left an empty side");
}

}  // namespace detail

// Splits off `fraction` of the dataset, stratified by (cohort, class).
// Returns (remainder, withheld).
inline std::pair<GlobalDataset, GlobalDataset> split_fraction(const GlobalDataset& ds,
                                                              double fraction,
                                                              std::uint64_t seed) {
    if (fraction <= 0.0 || fraction >= 1.0)
        throw ConfigError("split_fraction: fraction must be in (0,1)");
    GlobalDataset keep = ds, held = ds;
    keep.points.clear();
    held.points.clear();
    std::map<std::pair<std::string, std::size_t>, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < ds.points.size(); ++i)
        strata[{ds.points[i].cohort, ds.points[i].label}].push_back(i);
    Rng rng(derive_seed(seed, "split"));
    for (auto& [key, idx] : strata) {
        detail::shuffle_indices(idx, rng);
        const std::size_t take = static_cast<std::size_t>(
            std::llround(fraction * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (i < take)
                held.points.push_back(ds.points[idx[i]]);
            else
                keep.points.push_back(ds.points[idx[i]]);
        }
    }
    return {std::move(keep), std::move(held)};
}

inline std::vector<InstitutionDataset> partition(const GlobalDataset& global,
                                                 const PartitionPlan& plan) {
    if (plan.institutions.empty()) throw ConfigError("partition: no institutions");
    if (plan.points_per_institution == 0)
        throw ConfigError("partition: points_per_institution must be positive");
    if (plan.val_fraction <= 0.0 || plan.val_fraction >= 1.0)
        throw ConfigError("partition: val_fraction must be in (0,1)");
    if (plan.institutions.size() * plan.points_per_institution > global.points.size())
        throw DataError("partition: plan needs " +
                        std::to_string(plan.institutions.size() * plan.points_per_institution) +
                        " points, dataset has " + std::to_string(global.points.size()));

    const std::size_t num_cohorts = global.cohorts.size();
    const std::size_t num_classes = global.num_classes;
    const std::size_t n = plan.points_per_institution;

    if (plan.heterogeneity != Heterogeneity::kIid) {
        const std::size_t want =
            plan.heterogeneity == Heterogeneity::kTypeBased ? num_cohorts : num_classes;
        for (const auto& inst : plan.institutions) {
            auto it = plan.category_fractions.find(inst.category);
            if (it == plan.category_fractions.end())
                throw ConfigError("partition: no fractions for category " +
                                  std::to_string(inst.category));
            if (it->second.size() != want)
                throw ConfigError("partition: category " + std::to_string(inst.category) +
                                  " fractions have wrong length");
            const double sum = std::accumulate(it->second.begin(), it->second.end(), 0.0);
            if (std::abs(sum - 1.0) > 1e-9)
                throw ConfigError("partition: category " + std::to_string(inst.category) +
                                  " fractions sum to " + std::to_string(sum));
        }
    }

    // Per-(cohort, class) pools, each shuffled once; institutions consume
    // from the back, which keeps them disjoint by construction.
    std::vector<std::vector<std::vector<std::size_t>>> pools(
        num_cohorts, std::vector<std::vector<std::size_t>>(num_classes));
    for (std::size_t i = 0; i < global.points.size(); ++i)
        pools[global.cohort_index(global.points[i].cohort)][global.points[i].label].push_back(i);
    Rng rng(derive_seed(plan.seed, "partition"));
    for (auto& row : pools)
        for (auto& pool : row) detail::shuffle_indices(pool, rng);

    // Empirical marginals of the pool, used for the axis a plan leaves free.
    const auto class_totals = global.class_counts();
    const auto cohort_totals = global.cohort_counts();
    std::vector<double> class_ratio(num_classes), cohort_ratio(num_cohorts);
    for (std::size_t y = 0; y < num_classes; ++y)
        class_ratio[y] =
            static_cast<double>(class_totals[y]) / static_cast<double>(global.points.size());
    for (std::size_t c = 0; c < num_cohorts; ++c)
        cohort_ratio[c] =
            static_cast<double>(cohort_totals[c]) / static_cast<double>(global.points.size());

    std::vector<std::size_t> iid_pool;
    if (plan.heterogeneity == Heterogeneity::kIid) {
        iid_pool.resize(global.points.size());
        std::iota(iid_pool.begin(), iid_pool.end(), 0);
        detail::shuffle_indices(iid_pool, rng);
    }

    const auto cohort_rank = name_rank(global.cohorts);
    std::vector<InstitutionDataset> out;
    std::size_t iid_cursor = 0;
    for (const auto& inst : plan.institutions) {
        std::vector<std::size_t> chosen;
        if (plan.heterogeneity == Heterogeneity::kIid) {
            for (std::size_t i = 0; i < n; ++i) chosen.push_back(iid_pool[iid_cursor++]);
        } else {
            // cell_counts[c][y]
            std::vector<std::vector<std::size_t>> cell(num_cohorts,
                                                       std::vector<std::size_t>(num_classes));
            const auto& frac = plan.category_fractions.at(inst.category);
            if (plan.heterogeneity == Heterogeneity::kTypeBased) {
                std::vector<double> ct;
                for (double f : frac) ct.push_back(f * static_cast<double>(n));
                auto per_cohort = largest_remainder(ct, n, cohort_rank);
                for (std::size_t c = 0; c < num_cohorts; ++c) {
                    std::vector<double> yt;
                    for (double r : class_ratio)
                        yt.push_back(r * static_cast<double>(per_cohort[c]));
                    cell[c] = largest_remainder(yt, per_cohort[c], identity_rank(num_classes));
                }
            } else {
                std::vector<double> yt;
                for (double f : frac) yt.push_back(f * static_cast<double>(n));
                auto per_class = largest_remainder(yt, n, identity_rank(num_classes));
                for (std::size_t y = 0; y < num_classes; ++y) {
                    std::vector<double> ct;
                    for (double r : cohort_ratio)
                        ct.push_back(r * static_cast<double>(per_class[y]));
                    auto per_cohort = largest_remainder(ct, per_class[y], cohort_rank);
                    for (std::size_t c = 0; c < num_cohorts; ++c) cell[c][y] = per_cohort[c];
                }
            }
            for (std::size_t c = 0; c < num_cohorts; ++c)
                for (std::size_t y = 0; y < num_classes; ++y) {
                    auto& pool = pools[c][y];
                    if (pool.size() < cell[c][y])
                        throw DataError("partition: stratum (cohort=" + global.cohorts[c] +
                                        ", class=" + std::to_string(y) + ") exhausted at institution " +
                                        std::to_string(inst.id) + ": need " +
                                        std::to_string(cell[c][y]) + ", have " +
                                        std::to_string(pool.size()));
                    for (std::size_t k = 0; k < cell[c][y]; ++k) {
                        chosen.push_back(pool.back());
                        pool.pop_back();
                    }
                }
        }

        InstitutionDataset inst_ds;
        inst_ds.institution_id = inst.id;
        inst_ds.combination = inst.combination;
        inst_ds.category = inst.category;
        std::vector<Datapoint> points;
        points.reserve(chosen.size());
        for (std::size_t idx : chosen)
            points.push_back(detail::restrict_point(global.points[idx], inst.combination));
        Rng val_rng(derive_seed(plan.seed, "val-split", static_cast<std::uint64_t>(inst.id)));
        detail::split_train_val(std::move(points), plan.val_fraction, num_classes, inst_ds,
                                val_rng);
        out.push_back(std::move(inst_ds));
    }
    return out;
}

// Uniform minibatch without replacement; deterministic per stream state.
inline std::vector<const Datapoint*> sample_minibatch(const InstitutionDataset& ds,
                                                      std::size_t batch_size, Rng& rng) {
    if (batch_size == 0 || batch_size > ds.train.size())
        throw RuntimeError("sample_minibatch: batch size " + std::to_string(batch_size) +
                           " out of range for train size " + std::to_string(ds.train.size()));
    std::vector<std::size_t> idx(ds.train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<const Datapoint*> batch;
    batch.reserve(batch_size);
    for (std::size_t k = 0; k < batch_size; ++k) {
        const std::size_t j = k + rng.index(idx.size() - k);
        std::swap(idx[k], idx[j]);
        batch.push_back(&ds.train[idx[k]]);
    }
    return batch;
}

}  // namespace fedmm
