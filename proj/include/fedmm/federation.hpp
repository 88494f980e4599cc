#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedmm/data.hpp"
#include "fedmm/model.hpp"

namespace fedmm {

enum class MethodMode { kCmFl, kCmFlDgb, kDgbPcw, kUmFl };

inline std::string to_string(MethodMode m) {
    switch (m) {
        case MethodMode::kCmFl: return "cm-fl";
        case MethodMode::kCmFlDgb: return "cm-fl-dgb";
        case MethodMode::kDgbPcw: return "dgb-pcw";
        case MethodMode::kUmFl: return "um-fl";
    }
    return "?";
}

inline MethodMode mode_from_string(const std::string& s) {
    if (s == "cm-fl") return MethodMode::kCmFl;
    if (s == "cm-fl-dgb") return MethodMode::kCmFlDgb;
    if (s == "dgb-pcw") return MethodMode::kDgbPcw;
    if (s == "um-fl") return MethodMode::kUmFl;
    throw ConfigError("unknown method mode '" + s + "'");
}

// Step size is constant within a round: eta(t) = eta0 * decay^t.
struct LrSchedule {
    double eta0 = 1e-4;
    double decay = 0.99;

    double eta(int t) const {
        if (eta0 <= 0.0) throw ConfigError("LrSchedule: eta0 must be positive");
        if (decay <= 0.0 || decay > 1.0) throw ConfigError("LrSchedule: decay must be in (0,1]");
        return eta0 * std::pow(decay, t);
    }
};

struct ClientState {
    int institution_id = 0;
    const InstitutionDataset* dataset = nullptr;
    MultiModalNet net;
    // Learning-rate coefficients, keyed by modality name plus "classifier".
    std::map<std::string, double> gamma;
    Rng rng{0};
};

inline std::map<std::string, double> uniform_gamma(const ModalityCombination& combo,
                                                   double value = 1.0) {
    std::map<std::string, double> g;
    for (const auto& m : combo.modalities()) g[m] = value;
    g["classifier"] = value;
    return g;
}

struct RoundReport {
    int institution_id = 0;
    std::string combo_key;
    ParamVector start_params;
    ParamVector end_params;
    double train_loss = 0.0;  // full train set, end-of-round parameters
    double val_loss = 0.0;    // full validation set, end-of-round parameters
    std::size_t dataset_size = 0;  // |train| + |val|, the aggregation weight
};

struct OgEntry {
    double overfitting = 0.0;
    double generalization = 0.0;
};

struct ServerState {
    std::map<ModalityId, ParamVector> global_encoders;
    std::map<std::string, ParamVector> global_classifiers;
    // Per combination key, the last two (overfitting, generalization) entries,
    // oldest first.
    std::map<std::string, std::vector<OgEntry>> og_history;
    // Per combination key, per institution: normalized similarity weight.
    std::map<std::string, std::map<int, double>> pcw;
    int round_index = 0;
    double temperature = 1.0;

    // Full parameter vector for a combination: encoders in canonical order,
    // then the combination's classifier.
    ParamVector assemble(const ModalityCombination& combo) const {
        ParamVector out;
        for (const auto& m : combo.modalities()) {
            auto it = global_encoders.find(m);
            if (it == global_encoders.end())
                throw RuntimeError("server state: no global encoder for '" + m + "'");
            out.values.insert(out.values.end(), it->second.values.begin(),
                              it->second.values.end());
            out.layout.insert(out.layout.end(), it->second.layout.begin(),
                              it->second.layout.end());
        }
        auto it = global_classifiers.find(combo.key());
        if (it == global_classifiers.end())
            throw RuntimeError("server state: no global classifier for '" + combo.key() + "'");
        out.values.insert(out.values.end(), it->second.values.begin(), it->second.values.end());
        out.layout.insert(out.layout.end(), it->second.layout.begin(), it->second.layout.end());
        return out;
    }
};

// Initial global parameters; encoder parameters depend only on
// (seed, modality) and classifiers on (seed, combination), exactly as
// build_network derives them, so a freshly built client network matches
// assemble() bit for bit.
inline ServerState init_server(const ArchRegistry& registry,
                               const std::vector<ModalityId>& universe,
                               const std::vector<ModalityCombination>& combos,
                               std::size_t num_classes, std::uint64_t seed, double tau) {
    ServerState server;
    server.temperature = tau;
    for (const auto& m : universe) {
        const EncoderSpec& spec = registry.encoder_spec(m);
        DenseNetwork enc = make_mlp(spec.in_dim, spec.widths, Activation::kRelu, Activation::kRelu);
        Rng rng(derive_seed(seed, encoder_group_id(m)));
        init_params(enc, rng);
        server.global_encoders[m] = flatten(enc, encoder_group_id(m));
    }
    for (const auto& combo : combos) {
        if (server.global_classifiers.count(combo.key())) continue;
        std::vector<std::size_t> widths = registry.classifier_hidden;
        widths.push_back(num_classes);
        DenseNetwork clf = make_mlp(registry.fused_dim(combo), widths, Activation::kRelu,
                                    Activation::kLogSoftmax);
        Rng rng(derive_seed(seed, std::string(kClassifierGroupId) + ":" + combo.key()));
        init_params(clf, rng);
        server.global_classifiers[combo.key()] = flatten(clf, kClassifierGroupId);
    }
    return server;
}

inline void synchronize_client(const ServerState& server, ClientState& client) {
    unflatten_into(server.assemble(client.net.combination), client.net);
}

inline double dataset_loss(const MultiModalNet& net, std::span<const Datapoint> points) {
    if (points.empty()) throw RuntimeError("dataset_loss: empty dataset");
    double total = 0.0;
    for (const auto& p : points) total += nll(predict(net, p.features), p.label);
    return total / static_cast<double>(points.size());
}

// K minibatch SGD steps with per-group learning-rate coefficients. Losses in
// the report are full-set evaluations at the end-of-round parameters.
inline RoundReport local_train(ClientState& client, const LrSchedule& schedule, int t, int K,
                               std::size_t batch_size) {
    if (K < 1) throw RuntimeError("local_train: K must be >= 1");
    if (client.dataset == nullptr) throw RuntimeError("local_train: client has no dataset");
    RoundReport report;
    report.institution_id = client.institution_id;
    report.combo_key = client.net.combination.key();
    report.start_params = flatten(client.net);
    report.dataset_size = client.dataset->size();

    const auto groups = param_groups(client.net, client.gamma);
    const double eta = schedule.eta(t);
    std::vector<SampleView> views(batch_size);
    for (int k = 0; k < K; ++k) {
        const auto batch = sample_minibatch(*client.dataset, batch_size, client.rng);
        for (std::size_t i = 0; i < batch.size(); ++i)
            views[i] = {&batch[i]->features, batch[i]->label};
        BackwardResult res = backward(client.net, views);
        ParamVector next = sgd_step(flatten(client.net), res.grads, eta, groups);
        unflatten_into(next, client.net);
    }

    report.end_params = flatten(client.net);
    report.train_loss = dataset_loss(client.net, client.dataset->train);
    report.val_loss = dataset_loss(client.net, client.dataset->val);
    return report;
}

// Sub-vector of all blocks belonging to one learning-rate group.
inline ParamVector extract_group(const ParamVector& v, const std::string& group_id) {
    ParamVector out;
    std::size_t pos = 0;
    for (const auto& entry : v.layout) {
        if (entry.group_id == group_id) {
            out.values.insert(out.values.end(), v.values.begin() + pos,
                              v.values.begin() + pos + entry.size());
            out.layout.push_back(entry);
        }
        pos += entry.size();
    }
    if (out.layout.empty())
        throw ShapeError("extract_group: no blocks for group '" + group_id + "'");
    return out;
}

inline std::vector<ModalityId> modalities_of_key(const std::string& combo_key) {
    std::vector<ModalityId> out;
    std::string cur;
    for (char c : combo_key) {
        if (c == '+') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

namespace detail {

// Dataset-size weighted mean over parameter segments. Weights are normalized
// before the sum so a single contributor passes through bit-exactly.
inline ParamVector weighted_mean(const std::vector<std::pair<const ParamVector*, double>>& parts) {
    double total = 0.0;
    for (const auto& [v, w] : parts) total += w;
    ParamVector out = *parts.front().first;
    for (double& x : out.values) x = 0.0;
    for (const auto& [v, w] : parts) {
        require_same_layout(out, *v, "aggregate");
        const double coeff = w / total;
        for (std::size_t i = 0; i < out.values.size(); ++i)
            out.values[i] += coeff * v->values[i];
    }
    return out;
}

}  // namespace detail

// Per-modality encoder aggregation: every institution holding the modality
// contributes, weighted by its dataset size. `required` lets callers demand
// coverage for specific modalities.
inline std::map<ModalityId, ParamVector> aggregate_encoders(
    std::span<const RoundReport> reports, const std::vector<ModalityId>& required = {}) {
    if (reports.empty()) throw RuntimeError("aggregate_encoders: no reports");
    std::map<ModalityId, std::vector<ParamVector>> segments;
    std::map<ModalityId, std::vector<double>> weights;
    for (const auto& r : reports) {
        for (const auto& m : modalities_of_key(r.combo_key)) {
            segments[m].push_back(extract_group(r.end_params, encoder_group_id(m)));
            weights[m].push_back(static_cast<double>(r.dataset_size));
        }
    }
    for (const auto& m : required)
        if (!segments.count(m))
            throw RuntimeError("aggregate_encoders: modality '" + m + "' held by no institution");
    std::map<ModalityId, ParamVector> out;
    for (const auto& [m, segs] : segments) {
        std::vector<std::pair<const ParamVector*, double>> parts;
        for (std::size_t i = 0; i < segs.size(); ++i) parts.emplace_back(&segs[i], weights[m][i]);
        out[m] = detail::weighted_mean(parts);
    }
    return out;
}

// Per-combination classifier aggregation: only institutions whose combination
// matches exactly contribute.
inline std::map<std::string, ParamVector> aggregate_classifiers(
    std::span<const RoundReport> reports) {
    if (reports.empty()) throw RuntimeError("aggregate_classifiers: no reports");
    std::map<std::string, std::vector<ParamVector>> segments;
    std::map<std::string, std::vector<double>> weights;
    for (const auto& r : reports) {
        segments[r.combo_key].push_back(extract_group(r.end_params, kClassifierGroupId));
        weights[r.combo_key].push_back(static_cast<double>(r.dataset_size));
    }
    std::map<std::string, ParamVector> out;
    for (const auto& [key, segs] : segments) {
        std::vector<std::pair<const ParamVector*, double>> parts;
        for (std::size_t i = 0; i < segs.size(); ++i)
            parts.emplace_back(&segs[i], weights[key][i]);
        out[key] = detail::weighted_mean(parts);
    }
    return out;
}

// Net parameter displacement of one local round: start - end.
inline ParamVector cumulative_gradient(const RoundReport& report) {
    require_same_layout(report.start_params, report.end_params, "cumulative_gradient");
    ParamVector out = report.start_params;
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] -= report.end_params.values[i];
    return out;
}

// Old-minus-new global parameters for a combination, concatenated in the
// canonical order (encoders sorted by modality, then classifier).
inline ParamVector global_trajectory(const ServerState& prev, const ServerState& next,
                                     const ModalityCombination& combo) {
    ParamVector before = prev.assemble(combo);
    ParamVector after = next.assemble(combo);
    require_same_layout(before, after, "global_trajectory");
    for (std::size_t i = 0; i < before.values.size(); ++i)
        before.values[i] -= after.values[i];
    return before;
}

struct LocalTrajectory {
    int institution_id = 0;
    std::string combo_key;
    ParamVector delta;
};

struct PcwWeights {
    std::map<std::string, std::map<int, double>> by_combo;

    double rho_bar(const std::string& combo_key, int institution_id) const {
        auto it = by_combo.find(combo_key);
        if (it == by_combo.end())
            throw RuntimeError("pcw: no weights for combination '" + combo_key + "'");
        auto jt = it->second.find(institution_id);
        if (jt == it->second.end())
            throw RuntimeError("pcw: no weight for institution " +
                               std::to_string(institution_id));
        return jt->second;
    }
};

// Inner-product similarity of local vs global trajectories, normalized with a
// max-subtracted softmax per combination group.
inline PcwWeights pcw_weights(const std::vector<LocalTrajectory>& locals,
                              const std::map<std::string, ParamVector>& global_trajs,
                              double tau) {
    PcwWeights out;
    std::map<std::string, std::vector<std::pair<int, double>>> rho;  // combo -> (inst, rho)
    for (const auto& l : locals) {
        auto it = global_trajs.find(l.combo_key);
        if (it == global_trajs.end())
            throw RuntimeError("pcw_weights: no global trajectory for '" + l.combo_key + "'");
        rho[l.combo_key].emplace_back(l.institution_id, dot(l.delta, it->second));
    }
    for (const auto& [key, traj] : global_trajs) {
        if (!rho.count(key)) {
            std::fprintf(stderr, "warning: pcw: combination '%s' has no members, skipped\n",
                         key.c_str());
            continue;
        }
        const auto& group = rho.at(key);
        double m = group.front().second * tau;
        for (const auto& [id, r] : group) m = std::max(m, tau * r);
        double denom = 0.0;
        for (const auto& [id, r] : group) denom += std::exp(tau * r - m);
        for (const auto& [id, r] : group) out.by_combo[key][id] = std::exp(tau * r - m) / denom;
    }
    return out;
}

struct AdjustedLosses {
    double train_loss = 0.0;
    double val_loss = 0.0;
};

// Similarity-weighted per-combination losses, including the 1/|group| factor:
//   L_C = (1/count) * sum_n w_n * L_n
// With pcw == nullptr every w_n is 1, i.e. a plain mean.
inline std::map<std::string, AdjustedLosses> adjusted_losses(std::span<const RoundReport> reports,
                                                             const PcwWeights* pcw) {
    std::map<std::string, AdjustedLosses> out;
    std::map<std::string, std::size_t> count;
    for (const auto& r : reports) {
        const double w = pcw ? pcw->rho_bar(r.combo_key, r.institution_id) : 1.0;
        out[r.combo_key].train_loss += w * r.train_loss;
        out[r.combo_key].val_loss += w * r.val_loss;
        ++count[r.combo_key];
    }
    for (auto& [key, losses] : out) {
        losses.train_loss /= static_cast<double>(count[key]);
        losses.val_loss /= static_cast<double>(count[key]);
    }
    return out;
}

inline OgEntry overfitting_generalization(double adjusted_train_loss, double adjusted_val_loss) {
    return {adjusted_val_loss - adjusted_train_loss, adjusted_val_loss};
}

// Normalizes ratio values r_x into coefficients with sum exactly 2:
//   phi = sum_x r_x / 2,  coeff_x = r_x / phi.
// Degenerate ratios (all below the floor) fall back to uniform.
inline std::map<std::string, double> dogr_normalize(const std::map<std::string, double>& ratios,
                                                    double eps_floor = 1e-12) {
    if (ratios.empty()) throw RuntimeError("dogr_normalize: no ratios");
    double max_r = 0.0;
    for (const auto& [slot, r] : ratios) max_r = std::max(max_r, r);
    std::map<std::string, double> out;
    if (max_r < eps_floor) {
        std::fprintf(stderr,
                     "warning: dogr: all ratios below %g, falling back to uniform coefficients\n",
                     eps_floor);
        for (const auto& [slot, r] : ratios)
            out[slot] = 2.0 / static_cast<double>(ratios.size());
        return out;
    }
    double phi = 0.0;
    for (const auto& [slot, r] : ratios) phi += r / 2.0;
    for (const auto& [slot, r] : ratios) out[slot] = r / phi;
    return out;
}

// Learning-rate coefficients for one institution from the last two
// (overfitting, generalization) entries of its own combination and of every
// held modality's singleton combination:
//   r_x = |dG_x|^2 / ((dO_x)^2 + epsilon)
// Until two history entries exist for every needed key the initial
// coefficients (all ones) are returned.
inline std::map<std::string, double> dogr_coefficients(
    const std::map<std::string, std::vector<OgEntry>>& og_history,
    const ModalityCombination& combo, double epsilon = 1e-12) {
    auto delta = [&](const std::string& key) -> std::optional<std::pair<double, double>> {
        auto it = og_history.find(key);
        if (it == og_history.end() || it->second.size() < 2) return std::nullopt;
        const OgEntry& prev = it->second[it->second.size() - 2];
        const OgEntry& cur = it->second.back();
        return std::make_pair(cur.overfitting - prev.overfitting,
                              cur.generalization - prev.generalization);
    };

    std::map<std::string, double> ratios;
    bool ready = true;
    auto ratio_of = [&](const std::string& key) {
        auto d = delta(key);
        if (!d) {
            ready = false;
            return 0.0;
        }
        const auto [d_over, d_gen] = *d;
        return (d_gen * d_gen) / (d_over * d_over + epsilon);
    };
    for (const auto& m : combo.modalities()) ratios[m] = ratio_of(combo_key({m}));
    ratios["classifier"] = ratio_of(combo.key());
    if (!ready) return uniform_gamma(combo, 1.0);
    return dogr_normalize(ratios, epsilon);
}

}  // namespace fedmm
