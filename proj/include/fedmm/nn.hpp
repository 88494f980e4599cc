#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedmm/errors.hpp"
#include "fedmm/rng.hpp"

namespace fedmm {

enum class Activation { kIdentity, kRelu, kLogSoftmax };

// Log-probabilities are clamped here instead of letting exp underflow to an
// exact zero probability turn cross-entropy into -inf.
inline constexpr double kLogProbFloor = -50.0;

// Describes one contiguous block of a flat parameter vector. Every block
// belongs to exactly one learning-rate group (group_id).
struct LayoutEntry {
    std::string group_id;
    std::size_t rows = 0;
    std::size_t cols = 1;
    std::size_t size() const { return rows * cols; }
    bool operator==(const LayoutEntry&) const = default;
};

// Flat view of trainable parameters plus the layout that maps the flat
// vector back onto layers. Gradients reuse the same representation.
struct ParamVector {
    std::vector<double> values;
    std::vector<LayoutEntry> layout;

    std::size_t size() const { return values.size(); }

    std::size_t layout_size() const {
        std::size_t n = 0;
        for (const auto& e : layout) n += e.size();
        return n;
    }

    bool layout_matches(const ParamVector& other) const { return layout == other.layout; }

    void check_consistent() const {
        if (layout_size() != values.size())
            throw ShapeError("ParamVector: layout covers " + std::to_string(layout_size()) +
                             " values but vector holds " + std::to_string(values.size()));
    }
};

using GradientVector = ParamVector;

inline void require_same_layout(const ParamVector& a, const ParamVector& b, const char* where) {
    if (!a.layout_matches(b))
        throw ShapeError(std::string(where) + ": parameter layouts differ");
}

inline double dot(const ParamVector& a, const ParamVector& b) {
    require_same_layout(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
    return s;
}

inline double norm(const ParamVector& v) {
    double s = 0.0;
    for (double x : v.values) s += x * x;
    return std::sqrt(s);
}

enum class GroupRole { kEncoder, kClassifier };

// Learning-rate group: all parameters in the group share one step scale.
struct ParamGroup {
    std::string group_id;
    GroupRole role = GroupRole::kClassifier;
    std::string modality;  // set when role == kEncoder
    double lr_scale = 1.0;
};

// ---------------------------------------------------------------------------
// Dense network

struct DenseLayer {
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    std::vector<double> weights;  // row-major, out_dim x in_dim
    std::vector<double> bias;     // out_dim
    Activation activation = Activation::kIdentity;
};

struct DenseNetwork {
    std::vector<DenseLayer> layers;

    std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
    std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().out_dim; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weights.size() + l.bias.size();
        return n;
    }
};

// Builds an MLP with the given hidden widths; weights start at zero.
// log_softmax is only valid as the final activation.
inline DenseNetwork make_mlp(std::size_t in_dim, const std::vector<std::size_t>& widths,
                             Activation hidden, Activation final) {
    if (widths.empty()) throw ConfigError("make_mlp: at least one layer width required");
    DenseNetwork net;
    std::size_t prev = in_dim;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        DenseLayer layer;
        layer.in_dim = prev;
        layer.out_dim = widths[i];
        layer.weights.assign(layer.in_dim * layer.out_dim, 0.0);
        layer.bias.assign(layer.out_dim, 0.0);
        layer.activation = (i + 1 == widths.size()) ? final : hidden;
        if (layer.activation == Activation::kLogSoftmax && i + 1 != widths.size())
            throw ConfigError("make_mlp: log_softmax only allowed on the final layer");
        net.layers.push_back(std::move(layer));
        prev = widths[i];
    }
    return net;
}

// Uniform init in +-sqrt(6 / (fan_in + fan_out)), biases zero.
inline void init_params(DenseNetwork& net, Rng& rng) {
    for (auto& layer : net.layers) {
        const double bound =
            std::sqrt(6.0 / static_cast<double>(layer.in_dim + layer.out_dim));
        for (double& w : layer.weights) w = rng.uniform(-bound, bound);
        std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
}

// Flat order per layer: weight matrix (row-major), then bias.
inline ParamVector flatten(const DenseNetwork& net, const std::string& group_id) {
    ParamVector out;
    out.values.reserve(net.param_count());
    for (const auto& layer : net.layers) {
        out.values.insert(out.values.end(), layer.weights.begin(), layer.weights.end());
        out.layout.push_back({group_id, layer.out_dim, layer.in_dim});
        out.values.insert(out.values.end(), layer.bias.begin(), layer.bias.end());
        out.layout.push_back({group_id, layer.out_dim, 1});
    }
    return out;
}

inline void unflatten_into(const ParamVector& v, DenseNetwork& net) {
    if (v.size() != net.param_count())
        throw ShapeError("unflatten: vector has " + std::to_string(v.size()) +
                         " values, network expects " + std::to_string(net.param_count()));
    std::size_t pos = 0;
    for (auto& layer : net.layers) {
        std::copy_n(v.values.begin() + pos, layer.weights.size(), layer.weights.begin());
        pos += layer.weights.size();
        std::copy_n(v.values.begin() + pos, layer.bias.size(), layer.bias.begin());
        pos += layer.bias.size();
    }
}

namespace detail {

inline void apply_activation(Activation act, std::vector<double>& z) {
    switch (act) {
        case Activation::kIdentity:
            return;
        case Activation::kRelu:
            for (double& x : z) x = x > 0.0 ? x : 0.0;
            return;
        case Activation::kLogSoftmax: {
            const double m = *std::max_element(z.begin(), z.end());
            double sum = 0.0;
            for (double x : z) sum += std::exp(x - m);
            const double lse = m + std::log(sum);
            for (double& x : z) x = std::max(x - lse, kLogProbFloor);
            return;
        }
    }
}

}  // namespace detail

struct LayerTrace {
    std::vector<double> pre;   // W x + b
    std::vector<double> post;  // activation(pre)
};

struct ForwardTrace {
    std::vector<double> input;
    std::vector<LayerTrace> layers;
};

inline ForwardTrace forward_trace(const DenseNetwork& net, std::span<const double> x) {
    if (x.size() != net.in_dim())
        throw ShapeError("forward: input has " + std::to_string(x.size()) +
                         " features, network expects " + std::to_string(net.in_dim()));
    ForwardTrace trace;
    trace.input.assign(x.begin(), x.end());
    const std::vector<double>* cur = &trace.input;
    for (const auto& layer : net.layers) {
        LayerTrace lt;
        lt.pre.assign(layer.out_dim, 0.0);
        for (std::size_t i = 0; i < layer.out_dim; ++i) {
            const double* row = layer.weights.data() + i * layer.in_dim;
            double acc = layer.bias[i];
            for (std::size_t j = 0; j < layer.in_dim; ++j) acc += row[j] * (*cur)[j];
            lt.pre[i] = acc;
        }
        lt.post = lt.pre;
        detail::apply_activation(layer.activation, lt.post);
        trace.layers.push_back(std::move(lt));
        cur = &trace.layers.back().post;
    }
    return trace;
}

inline std::vector<double> forward(const DenseNetwork& net, std::span<const double> x) {
    return forward_trace(net, x).layers.back().post;
}

// Negative log-likelihood of the true class, given log-probabilities.
inline double nll(std::span<const double> logp, std::size_t label) {
    if (label >= logp.size()) throw ShapeError("nll: label out of range");
    return -logp[label];
}

inline double cross_entropy(std::span<const double> logp, std::span<const double> onehot) {
    if (logp.size() != onehot.size())
        throw ShapeError("cross_entropy: length mismatch");
    std::size_t hot = onehot.size();
    for (std::size_t i = 0; i < onehot.size(); ++i) {
        if (onehot[i] == 1.0) {
            if (hot != onehot.size())
                throw RuntimeError("cross_entropy: label vector has multiple ones");
            hot = i;
        } else if (onehot[i] != 0.0) {
            throw RuntimeError("cross_entropy: label vector is not one-hot");
        }
    }
    if (hot == onehot.size()) throw RuntimeError("cross_entropy: label vector has no one");
    return nll(logp, hot);
}

// Backpropagates d_out (dLoss/d_output) through the network. Parameter
// gradients are accumulated (+=) into grad_out, which must cover the
// network's flat parameter block. Returns dLoss/d_input.
inline std::vector<double> backprop_into(const DenseNetwork& net, const ForwardTrace& trace,
                                         std::vector<double> d_out, std::span<double> grad_out) {
    if (grad_out.size() != net.param_count())
        throw ShapeError("backprop: gradient span size mismatch");
    // Flat offsets of each layer's weight block.
    std::vector<std::size_t> offset(net.layers.size());
    std::size_t pos = 0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        offset[l] = pos;
        pos += net.layers[l].weights.size() + net.layers[l].bias.size();
    }
    std::vector<double> grad = std::move(d_out);
    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const auto& layer = net.layers[li];
        const auto& lt = trace.layers[li];
        if (grad.size() != layer.out_dim) throw ShapeError("backprop: output gradient mismatch");

        // d post -> d pre
        std::vector<double> dz(layer.out_dim);
        switch (layer.activation) {
            case Activation::kIdentity:
                dz = grad;
                break;
            case Activation::kRelu:
                for (std::size_t i = 0; i < layer.out_dim; ++i)
                    dz[i] = lt.pre[i] > 0.0 ? grad[i] : 0.0;
                break;
            case Activation::kLogSoftmax: {
                double gsum = std::accumulate(grad.begin(), grad.end(), 0.0);
                for (std::size_t i = 0; i < layer.out_dim; ++i)
                    dz[i] = grad[i] - std::exp(lt.post[i]) * gsum;
                break;
            }
        }

        const std::vector<double>& x = li == 0 ? trace.input : trace.layers[li - 1].post;
        double* gw = grad_out.data() + offset[li];
        double* gb = gw + layer.weights.size();
        std::vector<double> dx(layer.in_dim, 0.0);
        for (std::size_t i = 0; i < layer.out_dim; ++i) {
            const double d = dz[i];
            gb[i] += d;
            double* grow = gw + i * layer.in_dim;
            const double* wrow = layer.weights.data() + i * layer.in_dim;
            for (std::size_t j = 0; j < layer.in_dim; ++j) {
                grow[j] += d * x[j];
                dx[j] += wrow[j] * d;
            }
        }
        grad = std::move(dx);
    }
    return grad;
}

struct LabeledVec {
    std::vector<double> x;
    std::size_t label = 0;
};

struct BackwardResult {
    double mean_loss = 0.0;
    GradientVector grads;
};

// Mean cross-entropy and its gradient over a batch; the network's final
// layer must emit log-probabilities.
inline BackwardResult backward(const DenseNetwork& net, std::span<const LabeledVec> batch,
                               const std::string& group_id = "net") {
    if (batch.empty()) throw RuntimeError("backward: empty batch");
    BackwardResult res;
    res.grads = flatten(net, group_id);
    std::fill(res.grads.values.begin(), res.grads.values.end(), 0.0);
    for (const auto& sample : batch) {
        ForwardTrace trace = forward_trace(net, sample.x);
        const auto& logp = trace.layers.back().post;
        res.mean_loss += nll(logp, sample.label);
        std::vector<double> d_out(net.out_dim(), 0.0);
        d_out[sample.label] = -1.0;
        backprop_into(net, trace, std::move(d_out), res.grads.values);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    res.mean_loss *= inv;
    for (double& g : res.grads.values) g *= inv;
    return res;
}

// One SGD step with per-group learning-rate scales:
//   out[i] = params[i] - eta * scale(group(i)) * grads[i]
inline ParamVector sgd_step(const ParamVector& params, const GradientVector& grads, double eta,
                            std::span<const ParamGroup> groups) {
    if (eta <= 0.0) throw RuntimeError("sgd_step: eta must be positive");
    require_same_layout(params, grads, "sgd_step");
    params.check_consistent();
    ParamVector out = params;
    std::size_t pos = 0;
    for (const auto& entry : params.layout) {
        const ParamGroup* group = nullptr;
        for (const auto& g : groups)
            if (g.group_id == entry.group_id) {
                group = &g;
                break;
            }
        if (group == nullptr)
            throw ShapeError("sgd_step: no learning-rate group for '" + entry.group_id + "'");
        if (group->lr_scale < 0.0)
            throw RuntimeError("sgd_step: negative lr scale for '" + entry.group_id + "'");
        const double step = eta * group->lr_scale;
        for (std::size_t i = pos; i < pos + entry.size(); ++i)
            out.values[i] = params.values[i] - step * grads.values[i];
        pos += entry.size();
    }
    return out;
}

// Central-difference gradient estimate; the independent check for backward().
inline GradientVector finite_diff_grad(const std::function<double(const ParamVector&)>& loss_fn,
                                       const ParamVector& params, double eps) {
    if (eps <= 0.0) throw RuntimeError("finite_diff_grad: eps must be positive");
    GradientVector grads = params;
    ParamVector probe = params;
    for (std::size_t i = 0; i < params.values.size(); ++i) {
        const double orig = params.values[i];
        probe.values[i] = orig + eps;
        const double up = loss_fn(probe);
        probe.values[i] = orig - eps;
        const double down = loss_fn(probe);
        probe.values[i] = orig;
        grads.values[i] = (up - down) / (2.0 * eps);
    }
    return grads;
}

}  // namespace fedmm
