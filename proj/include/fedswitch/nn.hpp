#pragma once

// Fixed-graph MLP: flat parameter storage, softmax forward pass, masked
// cross-entropy with analytic backprop, heavy-ball SGD, and a central
// finite-difference gradient used as a test oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedswitch/error.hpp"
#include "fedswitch/rng.hpp"

namespace fedswitch {

enum class Activation { relu, tanh };

inline std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

/// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

struct ModelSpec {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden_dims;
    std::size_t num_classes = 2;
    Activation activation = Activation::relu;

    void validate() const {
        detail::require(input_dim >= 1, "model: input_dim must be >= 1");
        detail::require(num_classes >= 2, "model: num_classes must be >= 2");
        for (auto h : hidden_dims) detail::require(h >= 1, "model: hidden dims must be >= 1");
    }

    /// Layer widths from input to output, inclusive.
    std::vector<std::size_t> widths() const {
        std::vector<std::size_t> w{input_dim};
        w.insert(w.end(), hidden_dims.begin(), hidden_dims.end());
        w.push_back(num_classes);
        return w;
    }

    std::size_t param_count() const {
        const auto w = widths();
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l] * w[l + 1] + w[l + 1];
        return n;
    }

    std::uint64_t layout_hash() const {
        std::uint64_t h = detail::splitmix64(static_cast<std::uint64_t>(activation) + 1);
        for (auto w : widths()) h = detail::splitmix64(h ^ w);
        return h;
    }
};

/// All trainable parameters of one model, flattened layer by layer as
/// [W_0 (out x in, row-major), b_0, W_1, b_1, ...].
struct ParamVector {
    std::vector<double> values;
    std::uint64_t spec_hash = 0;

    std::size_t size() const { return values.size(); }
    bool operator==(const ParamVector&) const = default;

    static ParamVector zeros_like(const ParamVector& p) { return {std::vector<double>(p.size(), 0.0), p.spec_hash}; }
};

inline void check_same_layout(const ParamVector& a, const ParamVector& b, std::string_view where) {
    if (a.size() != b.size() || a.spec_hash != b.spec_hash)
        throw ShapeError(std::string(where) + ": parameter vectors have different layouts (" +
                         std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
}

inline void check_bound(const ParamVector& p, const ModelSpec& spec, std::string_view where) {
    if (p.size() != spec.param_count() || p.spec_hash != spec.layout_hash())
        throw ShapeError(std::string(where) + ": parameter vector is not bound to this model spec");
}

/// a - b
inline ParamVector difference(const ParamVector& a, const ParamVector& b) {
    check_same_layout(a, b, "difference");
    ParamVector out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= b.values[i];
    return out;
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

struct Batch {
    Matrix inputs;
    std::optional<std::vector<int>> labels;

    std::size_t size() const { return inputs.rows; }
};

struct OptimState {
    double learning_rate = 0.01;
    double momentum = 0.0;
    double weight_decay = 0.0;
    std::vector<double> velocity;

    void validate() const {
        detail::require(learning_rate > 0.0, "optimizer: learning_rate must be positive");
        detail::require(momentum >= 0.0 && momentum < 1.0, "optimizer: momentum must be in [0, 1)");
        detail::require(weight_decay >= 0.0, "optimizer: weight_decay must be non-negative");
    }
};

/// He fan-in initialisation: W ~ N(0, 2 / fan_in), zero biases.
inline ParamVector init_params(const ModelSpec& spec, Seed seed) {
    spec.validate();
    Rng rng(seed);
    ParamVector p{std::vector<double>(spec.param_count(), 0.0), spec.layout_hash()};
    const auto w = spec.widths();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(w[l]));
        for (std::size_t k = 0; k < w[l] * w[l + 1]; ++k) p.values[off + k] = rng.normal(0.0, stddev);
        off += w[l] * w[l + 1] + w[l + 1];
    }
    return p;
}

namespace detail {

inline double activate(Activation a, double z) { return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z); }

inline double activate_grad(Activation a, double z, double out) {
    return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - out * out;
}

/// Forward pass for one example. `pre[l]`/`post[l]` hold layer l's
/// pre-activation and output; post[0] is the input itself. The final layer
/// output is raw logits.
inline void forward_one(const ParamVector& params, const ModelSpec& spec, std::span<const double> x,
                        std::vector<std::vector<double>>& pre, std::vector<std::vector<double>>& post) {
    const auto w = spec.widths();
    const std::size_t layers = w.size() - 1;
    pre.resize(layers + 1);
    post.resize(layers + 1);
    post[0].assign(x.begin(), x.end());
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t in = w[l], out = w[l + 1];
        const double* W = params.values.data() + off;
        const double* b = W + in * out;
        pre[l + 1].assign(out, 0.0);
        post[l + 1].assign(out, 0.0);
        for (std::size_t o = 0; o < out; ++o) {
            double z = b[o];
            const double* wr = W + o * in;
            for (std::size_t i = 0; i < in; ++i) z += wr[i] * post[l][i];
            pre[l + 1][o] = z;
            post[l + 1][o] = (l + 1 == layers) ? z : activate(spec.activation, z);
        }
        off += in * out + out;
    }
}

}  // namespace detail

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows, logits.cols);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        auto z = logits.row(r);
        const double hi = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        for (std::size_t c = 0; c < logits.cols; ++c) total += (out(r, c) = std::exp(z[c] - hi));
        for (std::size_t c = 0; c < logits.cols; ++c) out(r, c) /= total;
    }
    return out;
}

inline Matrix forward_logits(const ParamVector& params, const ModelSpec& spec, const Matrix& inputs) {
    check_bound(params, spec, "forward");
    if (inputs.cols != spec.input_dim)
        throw ShapeError("forward: input has " + std::to_string(inputs.cols) + " columns, model expects " +
                         std::to_string(spec.input_dim));
    Matrix logits(inputs.rows, spec.num_classes);
    std::vector<std::vector<double>> pre, post;
    for (std::size_t r = 0; r < inputs.rows; ++r) {
        detail::forward_one(params, spec, inputs.row(r), pre, post);
        std::copy(post.back().begin(), post.back().end(), logits.row(r).begin());
    }
    return logits;
}

inline Matrix forward_probs(const ParamVector& params, const ModelSpec& spec, const Matrix& inputs) {
    return softmax_rows(forward_logits(params, spec, inputs));
}

struct LossGrad {
    double loss = 0.0;
    ParamVector grad;
};

/// Masked, batch-averaged cross-entropy:
///   loss = (1/B) * sum_i weights[i] * CE(x_i, targets[i])
/// Examples with zero weight are skipped entirely, so a fully masked batch
/// yields exactly zero loss and an exactly zero gradient.
inline LossGrad loss_and_grad(const ParamVector& params, const ModelSpec& spec, const Matrix& inputs,
                              std::span<const int> targets, std::span<const double> weights,
                              std::string_view context = {}) {
    check_bound(params, spec, "loss_and_grad");
    const std::size_t B = inputs.rows;
    if (B == 0) throw ShapeError("loss_and_grad: empty batch");
    if (targets.size() != B || weights.size() != B)
        throw ShapeError("loss_and_grad: targets/weights length must equal batch size");
    if (inputs.cols != spec.input_dim) throw ShapeError("loss_and_grad: input width does not match model");

    const auto w = spec.widths();
    const std::size_t layers = w.size() - 1;
    const std::size_t C = spec.num_classes;
    LossGrad out{0.0, ParamVector::zeros_like(params)};

    std::vector<std::size_t> offsets(layers);
    for (std::size_t l = 0, off = 0; l < layers; ++l) {
        offsets[l] = off;
        off += w[l] * w[l + 1] + w[l + 1];
    }

    std::vector<std::vector<double>> pre, post;
    std::vector<double> delta, prev;
    const double inv_b = 1.0 / static_cast<double>(B);
    for (std::size_t i = 0; i < B; ++i) {
        if (weights[i] == 0.0) continue;
        const int y = targets[i];
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw ShapeError("loss_and_grad: target " + std::to_string(y) + " out of range");
        detail::forward_one(params, spec, inputs.row(i), pre, post);

        const auto& z = post.back();
        const double hi = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        delta.assign(C, 0.0);
        for (std::size_t c = 0; c < C; ++c) total += (delta[c] = std::exp(z[c] - hi));
        const double lse = hi + std::log(total);
        out.loss += weights[i] * inv_b * (lse - z[static_cast<std::size_t>(y)]);

        const double scale = weights[i] * inv_b;
        for (std::size_t c = 0; c < C; ++c) delta[c] = scale * (delta[c] / total - (c == static_cast<std::size_t>(y)));

        for (std::size_t l = layers; l-- > 0;) {
            const std::size_t in = w[l], o_n = w[l + 1];
            double* gW = out.grad.values.data() + offsets[l];
            double* gb = gW + in * o_n;
            const double* W = params.values.data() + offsets[l];
            for (std::size_t o = 0; o < o_n; ++o) {
                gb[o] += delta[o];
                double* gr = gW + o * in;
                for (std::size_t k = 0; k < in; ++k) gr[k] += delta[o] * post[l][k];
            }
            if (l == 0) break;
            prev.assign(in, 0.0);
            for (std::size_t o = 0; o < o_n; ++o) {
                const double* wr = W + o * in;
                for (std::size_t k = 0; k < in; ++k) prev[k] += wr[k] * delta[o];
            }
            for (std::size_t k = 0; k < in; ++k) prev[k] *= detail::activate_grad(spec.activation, pre[l][k], post[l][k]);
            delta.swap(prev);
        }
    }

    if (!std::isfinite(out.loss) || !all_finite(out.grad.values)) {
        std::string msg = "loss_and_grad: non-finite loss or gradient";
        if (!context.empty()) msg += " (" + std::string(context) + ")";
        throw NumericError(msg);
    }
    return out;
}

inline LossGrad loss_and_grad(const ParamVector& params, const ModelSpec& spec, const Batch& batch,
                              std::span<const int> targets, std::span<const double> weights,
                              std::string_view context = {}) {
    return loss_and_grad(params, spec, batch.inputs, targets, weights, context);
}

/// Heavy-ball SGD with L2 weight decay folded into the velocity:
///   v <- momentum * v + grad + weight_decay * params
///   params <- params - lr * v
inline ParamVector sgd_step(const ParamVector& params, const ParamVector& grad, OptimState& opt) {
    check_same_layout(params, grad, "sgd_step");
    if (opt.velocity.empty()) opt.velocity.assign(params.size(), 0.0);
    if (opt.velocity.size() != params.size()) throw ShapeError("sgd_step: velocity length mismatch");
    ParamVector next = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& v = opt.velocity[i];
        v = opt.momentum * v + grad.values[i] + opt.weight_decay * params.values[i];
        next.values[i] -= opt.learning_rate * v;
    }
    return next;
}

/// Central differences, one coordinate at a time. Test oracle only: costs
/// 2 * |params| forward passes over the batch.
inline ParamVector finite_diff_grad(const ParamVector& params, const ModelSpec& spec, const Matrix& inputs,
                                    std::span<const int> targets, std::span<const double> weights, double step) {
    detail::require(step > 0.0, "finite_diff_grad: step must be positive");
    ParamVector g = ParamVector::zeros_like(params);
    ParamVector probe = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = probe.values[i];
        probe.values[i] = orig + step;
        const double up = loss_and_grad(probe, spec, inputs, targets, weights).loss;
        probe.values[i] = orig - step;
        const double down = loss_and_grad(probe, spec, inputs, targets, weights).loss;
        probe.values[i] = orig;
        g.values[i] = (up - down) / (2.0 * step);
    }
    return g;
}

}  // namespace fedswitch
