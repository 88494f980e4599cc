#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedmm/nn.hpp"

namespace fedmm {

using ModalityId = std::string;

inline std::string encoder_group_id(const ModalityId& m) { return "enc:" + m; }
inline constexpr const char* kClassifierGroupId = "clf";

// Canonical, order-insensitive key for a set of modalities.
inline std::string combo_key(const std::vector<ModalityId>& modalities) {
    if (modalities.empty()) throw RuntimeError("combo_key: empty modality set");
    std::vector<ModalityId> sorted(modalities.begin(), modalities.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::string key;
    for (const auto& m : sorted) {
        if (!key.empty()) key += '+';
        key += m;
    }
    return key;
}

// Nonempty, sorted, deduplicated set of modalities. The sorted order is the
// canonical concatenation order everywhere (prediction, flattening,
// aggregation), so classifiers trained at different institutions stay
// parameter-compatible.
class ModalityCombination {
public:
    ModalityCombination() = default;

    explicit ModalityCombination(std::vector<ModalityId> modalities)
        : modalities_(std::move(modalities)) {
        if (modalities_.empty())
            throw RuntimeError("ModalityCombination: at least one modality required");
        std::sort(modalities_.begin(), modalities_.end());
        modalities_.erase(std::unique(modalities_.begin(), modalities_.end()),
                          modalities_.end());
    }

    ModalityCombination(std::initializer_list<ModalityId> modalities)
        : ModalityCombination(std::vector<ModalityId>(modalities)) {}

    const std::vector<ModalityId>& modalities() const { return modalities_; }
    std::size_t size() const { return modalities_.size(); }
    bool contains(const ModalityId& m) const {
        return std::binary_search(modalities_.begin(), modalities_.end(), m);
    }
    std::string key() const { return combo_key(modalities_); }

    bool operator==(const ModalityCombination&) const = default;

private:
    std::vector<ModalityId> modalities_;
};

struct EncoderSpec {
    std::size_t in_dim = 0;
    std::vector<std::size_t> widths;  // hidden + output widths, all ReLU

    std::size_t out_dim() const { return widths.empty() ? 0 : widths.back(); }
};

// Architectures for every modality plus the shared classifier shape. The
// classifier input width is always the sum of the combination's encoder
// output widths.
struct ArchRegistry {
    std::map<ModalityId, EncoderSpec> encoders;
    std::vector<std::size_t> classifier_hidden;

    const EncoderSpec& encoder_spec(const ModalityId& m) const {
        auto it = encoders.find(m);
        if (it == encoders.end())
            throw ConfigError("ArchRegistry: unknown modality '" + m + "'");
        return it->second;
    }

    std::size_t encoder_out_dim(const ModalityId& m) const { return encoder_spec(m).out_dim(); }

    std::size_t fused_dim(const ModalityCombination& combo) const {
        std::size_t total = 0;
        for (const auto& m : combo.modalities()) total += encoder_out_dim(m);
        return total;
    }

    std::vector<ModalityId> universe() const {
        std::vector<ModalityId> out;
        for (const auto& [m, spec] : encoders) out.push_back(m);
        return out;
    }
};

// Named registry presets. "desk" is the default experiment scale; "small",
// "medium" and "large" keep the relative depth ordering of wider production
// stacks at widths that train in seconds.
inline ArchRegistry make_registry(const std::string& preset,
                                  const std::map<ModalityId, std::size_t>& modality_dims) {
    ArchRegistry reg;
    std::vector<std::size_t> mrna_widths;
    if (preset == "desk")
        mrna_widths = {32, 16};
    else if (preset == "small")
        mrna_widths = {64, 32, 16};
    else if (preset == "medium")
        mrna_widths = {128, 64, 32, 16};
    else if (preset == "large")
        mrna_widths = {256, 128, 64, 32, 16};
    else
        throw ConfigError("unknown architecture preset '" + preset + "'");

    for (const auto& [m, dim] : modality_dims) {
        EncoderSpec spec;
        spec.in_dim = dim;
        if (m == "mrna")
            spec.widths = mrna_widths;
        else if (m == "image")
            spec.widths = {64, 16};
        else if (m == "clinical")
            spec.widths = {16, 8};
        else
            spec.widths = {std::max<std::size_t>(dim / 2, 8), 8};
        reg.encoders[m] = spec;
    }
    reg.classifier_hidden = {32};
    return reg;
}

// One institution's network: an encoder per held modality plus a classifier
// over the concatenated encoder outputs.
struct MultiModalNet {
    ModalityCombination combination;
    std::map<ModalityId, DenseNetwork> encoders;
    DenseNetwork classifier;
    std::size_t num_classes = 0;

    std::size_t param_count() const {
        std::size_t n = classifier.param_count();
        for (const auto& [m, e] : encoders) n += e.param_count();
        return n;
    }
};

// Deterministic per (combo, registry, num_classes, seed). Encoder parameters
// depend only on (seed, modality), so the same modality encoder is
// bit-identical across different combinations built from one seed.
inline MultiModalNet build_network(const ModalityCombination& combo, const ArchRegistry& registry,
                                   std::size_t num_classes, std::uint64_t seed) {
    if (num_classes == 0) throw ConfigError("build_network: num_classes must be positive");
    MultiModalNet net;
    net.combination = combo;
    net.num_classes = num_classes;
    for (const auto& m : combo.modalities()) {
        const EncoderSpec& spec = registry.encoder_spec(m);
        DenseNetwork enc = make_mlp(spec.in_dim, spec.widths, Activation::kRelu, Activation::kRelu);
        Rng rng(derive_seed(seed, encoder_group_id(m)));
        init_params(enc, rng);
        net.encoders.emplace(m, std::move(enc));
    }
    std::vector<std::size_t> clf_widths = registry.classifier_hidden;
    clf_widths.push_back(num_classes);
    net.classifier = make_mlp(registry.fused_dim(combo), clf_widths, Activation::kRelu,
                              Activation::kLogSoftmax);
    Rng rng(derive_seed(seed, std::string(kClassifierGroupId) + ":" + combo.key()));
    init_params(net.classifier, rng);
    return net;
}

using FeatureMap = std::map<ModalityId, std::vector<double>>;

namespace detail {

inline std::vector<double> fuse_features(const MultiModalNet& net, const FeatureMap& features,
                                         std::vector<ForwardTrace>* traces) {
    if (features.size() != net.combination.size())
        throw ShapeError("predict: expected " + std::to_string(net.combination.size()) +
                         " modalities, got " + std::to_string(features.size()));
    std::vector<double> fused;
    for (const auto& m : net.combination.modalities()) {
        auto it = features.find(m);
        if (it == features.end()) throw ShapeError("predict: missing modality '" + m + "'");
        ForwardTrace trace = forward_trace(net.encoders.at(m), it->second);
        const auto& out = trace.layers.back().post;
        fused.insert(fused.end(), out.begin(), out.end());
        if (traces) traces->push_back(std::move(trace));
    }
    return fused;
}

}  // namespace detail

// Encoders applied per modality, outputs concatenated in canonical order,
// classifier applied. Returns log-probabilities.
inline std::vector<double> predict(const MultiModalNet& net, const FeatureMap& features) {
    return forward(net.classifier, detail::fuse_features(net, features, nullptr));
}

// Flat order: encoders in canonical modality order, then the classifier.
inline ParamVector flatten(const MultiModalNet& net) {
    ParamVector out;
    out.values.reserve(net.param_count());
    for (const auto& m : net.combination.modalities()) {
        ParamVector enc = flatten(net.encoders.at(m), encoder_group_id(m));
        out.values.insert(out.values.end(), enc.values.begin(), enc.values.end());
        out.layout.insert(out.layout.end(), enc.layout.begin(), enc.layout.end());
    }
    ParamVector clf = flatten(net.classifier, kClassifierGroupId);
    out.values.insert(out.values.end(), clf.values.begin(), clf.values.end());
    out.layout.insert(out.layout.end(), clf.layout.begin(), clf.layout.end());
    return out;
}

inline void unflatten_into(const ParamVector& v, MultiModalNet& net) {
    if (v.layout != flatten(net).layout)
        throw ShapeError("unflatten: layout does not match network for combination '" +
                         net.combination.key() + "'");
    std::size_t pos = 0;
    auto take = [&](DenseNetwork& target) {
        ParamVector part;
        part.values.assign(v.values.begin() + pos, v.values.begin() + pos + target.param_count());
        pos += target.param_count();
        unflatten_into(part, target);
    };
    for (const auto& m : net.combination.modalities()) take(net.encoders.at(m));
    take(net.classifier);
}

struct SampleView {
    const FeatureMap* features = nullptr;
    std::size_t label = 0;
};

// Mean cross-entropy and gradient over a multi-modal batch. The classifier
// gradient is chained back through the concatenation into each encoder.
inline BackwardResult backward(const MultiModalNet& net, std::span<const SampleView> batch) {
    if (batch.empty()) throw RuntimeError("backward: empty batch");
    BackwardResult res;
    res.grads = flatten(net);
    std::fill(res.grads.values.begin(), res.grads.values.end(), 0.0);

    // Flat offsets of each encoder block, canonical order; classifier last.
    std::map<ModalityId, std::size_t> enc_offset;
    std::size_t pos = 0;
    for (const auto& m : net.combination.modalities()) {
        enc_offset[m] = pos;
        pos += net.encoders.at(m).param_count();
    }
    const std::size_t clf_offset = pos;

    for (const auto& sample : batch) {
        std::vector<ForwardTrace> enc_traces;
        std::vector<double> fused = detail::fuse_features(net, *sample.features, &enc_traces);
        ForwardTrace clf_trace = forward_trace(net.classifier, fused);
        res.mean_loss += nll(clf_trace.layers.back().post, sample.label);

        std::vector<double> d_out(net.num_classes, 0.0);
        d_out[sample.label] = -1.0;
        std::span<double> gall(res.grads.values);
        std::vector<double> d_fused =
            backprop_into(net.classifier, clf_trace, std::move(d_out),
                          gall.subspan(clf_offset, net.classifier.param_count()));

        std::size_t seg = 0;
        std::size_t ti = 0;
        for (const auto& m : net.combination.modalities()) {
            const DenseNetwork& enc = net.encoders.at(m);
            std::vector<double> d_seg(d_fused.begin() + seg,
                                      d_fused.begin() + seg + enc.out_dim());
            backprop_into(enc, enc_traces[ti], std::move(d_seg),
                          gall.subspan(enc_offset[m], enc.param_count()));
            seg += enc.out_dim();
            ++ti;
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    res.mean_loss *= inv;
    for (double& g : res.grads.values) g *= inv;
    return res;
}

// Learning-rate groups for a network; scales come from a map keyed by
// modality name plus "classifier".
inline std::vector<ParamGroup> param_groups(const MultiModalNet& net,
                                            const std::map<std::string, double>& scales) {
    std::vector<ParamGroup> groups;
    for (const auto& m : net.combination.modalities()) {
        auto it = scales.find(m);
        if (it == scales.end())
            throw RuntimeError("param_groups: no scale for modality '" + m + "'");
        groups.push_back({encoder_group_id(m), GroupRole::kEncoder, m, it->second});
    }
    auto it = scales.find("classifier");
    if (it == scales.end()) throw RuntimeError("param_groups: no scale for classifier");
    groups.push_back({kClassifierGroupId, GroupRole::kClassifier, "", it->second});
    return groups;
}

}  // namespace fedmm
