#pragma once

// Confidence-thresholded pseudo-labelling, the client objective
// (supervised + unsupervised + proximal), and KL-to-uniform diagnostics of
// per-batch prediction histograms.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "fedswitch/data.hpp"
#include "fedswitch/error.hpp"
#include "fedswitch/nn.hpp"

namespace fedswitch {

enum class PseudoSource { teacher, student };

struct PseudoBatch {
    std::vector<int> pseudo_labels;
    std::vector<double> mask;
    PseudoSource source = PseudoSource::student;

    std::size_t size() const { return pseudo_labels.size(); }
    std::size_t unmasked() const {
        std::size_t n = 0;
        for (double m : mask) n += m != 0.0;
        return n;
    }
};

struct SslHyper {
    double tau = 0.95;
    double lambda_u = 1.0;
    double mu = 0.001;

    void validate() const {
        detail::require(tau > 0.0 && tau <= 1.0, "ssl: tau must be in (0, 1]");
        detail::require(lambda_u >= 0.0, "ssl: lambda_u must be >= 0");
        detail::require(mu >= 0.0, "ssl: mu must be >= 0");
    }
};

/// Per-client KL-to-uniform statistics. The `*_sum` fields keep the raw
/// accumulation over batches; the reported values are the per-batch mean.
struct KlStats {
    double dkl_teacher = 0.0;
    double dkl_student = 0.0;
    std::size_t num_batches = 0;
    double sum_teacher = 0.0;
    double sum_student = 0.0;
    /// True when no teacher was present and the teacher slot holds the
    /// student's weak-view statistic instead.
    bool teacher_proxy = false;
};

inline int argmax_lowest(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[best]) best = c;
    return static_cast<int>(best);
}

inline PseudoBatch pseudo_label(const Matrix& probs, double tau, PseudoSource source = PseudoSource::student) {
    PseudoBatch pb;
    pb.source = source;
    pb.pseudo_labels.resize(probs.rows);
    pb.mask.resize(probs.rows);
    for (std::size_t r = 0; r < probs.rows; ++r) {
        const int c = argmax_lowest(probs.row(r));
        pb.pseudo_labels[r] = c;
        pb.mask[r] = probs(r, static_cast<std::size_t>(c)) >= tau ? 1.0 : 0.0;
    }
    return pb;
}

/// Normalised histogram of hard (argmax) predictions.
inline std::vector<double> batch_prediction_distribution(const Matrix& probs) {
    detail::require(probs.rows > 0, "batch_prediction_distribution: empty batch");
    std::vector<double> hist(probs.cols, 0.0);
    for (std::size_t r = 0; r < probs.rows; ++r) hist[static_cast<std::size_t>(argmax_lowest(probs.row(r)))] += 1.0;
    for (auto& h : hist) h /= static_cast<double>(probs.rows);
    return hist;
}

inline std::vector<double> normalized(std::vector<double> counts) {
    double total = 0.0;
    for (double c : counts) total += c;
    detail::require(total > 0.0, "normalized: all-zero histogram");
    for (auto& c : counts) c /= total;
    return counts;
}

/// D_KL(p || U) = sum_c p_c ln(p_c C), with 0 ln 0 = 0. Lies in [0, ln C].
inline double kl_to_uniform(std::span<const double> p) {
    detail::require(!p.empty(), "kl_to_uniform: empty distribution");
    const double C = static_cast<double>(p.size());
    double total = 0.0, kl = 0.0;
    for (double v : p) {
        if (v < 0.0 || !std::isfinite(v)) throw ConfigError("kl_to_uniform: negative or non-finite entry");
        total += v;
        if (v > 0.0) kl += v * std::log(v * C);
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("kl_to_uniform: entries do not sum to 1");
    return std::clamp(kl, 0.0, std::log(C));
}

/// Mean over batches of kl_to_uniform(batch_prediction_distribution(.)) for
/// the teacher's and the student's prediction matrices.
inline KlStats client_kl_stats(std::span<const Matrix> teacher_probs, std::span<const Matrix> student_probs) {
    if (teacher_probs.empty() || teacher_probs.size() != student_probs.size())
        throw ConfigError("client_kl_stats: need equally many (>= 1) teacher and student batches");
    KlStats s;
    for (std::size_t l = 0; l < teacher_probs.size(); ++l) {
        s.sum_teacher += kl_to_uniform(batch_prediction_distribution(teacher_probs[l]));
        s.sum_student += kl_to_uniform(batch_prediction_distribution(student_probs[l]));
    }
    s.num_batches = teacher_probs.size();
    s.dkl_teacher = s.sum_teacher / static_cast<double>(s.num_batches);
    s.dkl_student = s.sum_student / static_cast<double>(s.num_batches);
    return s;
}

/// Masked cross-entropy of the student on an already strongly augmented view
/// against fixed pseudo-labels. The pseudo-label source contributes nothing
/// to the gradient.
inline LossGrad unsupervised_loss_grad(const ParamVector& student, const ModelSpec& spec, const Matrix& strong_view,
                                       const PseudoBatch& pseudo, std::string_view context = {}) {
    if (pseudo.size() != strong_view.rows || pseudo.mask.size() != strong_view.rows)
        throw ShapeError("unsupervised_loss_grad: pseudo batch does not match unlabeled batch");
    return loss_and_grad(student, spec, strong_view, pseudo.pseudo_labels, pseudo.mask, context);
}

/// Draws the strong view of `unlabeled` from `rng` first, then as above.
inline LossGrad unsupervised_loss_grad(const ParamVector& student, const ModelSpec& spec, const Batch& unlabeled,
                                       const PseudoBatch& pseudo, const AugmentConfig& cfg, Rng& rng) {
    return unsupervised_loss_grad(student, spec, strong_augment(unlabeled.inputs, cfg, rng), pseudo);
}

/// Labeled part of a client step: weakly augmented inputs and their labels.
struct LabeledView {
    const Matrix& inputs;
    std::span<const int> labels;
};

/// grad = dL_s (when labeled data is present) + lambda_u * dL_u + mu * (theta - theta_s)
/// loss = L_s + lambda_u * L_u + (mu / 2) * ||theta - theta_s||^2
inline LossGrad combined_client_grad(const ParamVector& student, const ParamVector& snapshot, const ModelSpec& spec,
                                     const std::optional<LabeledView>& labeled, const Matrix& strong_view,
                                     const PseudoBatch& pseudo, const SslHyper& hyper, std::string_view context = {}) {
    check_same_layout(student, snapshot, "combined_client_grad");
    LossGrad total{0.0, ParamVector::zeros_like(student)};
    if (labeled) {
        std::vector<double> ones(labeled->labels.size(), 1.0);
        auto sup = loss_and_grad(student, spec, labeled->inputs, labeled->labels, ones, context);
        total.loss += sup.loss;
        total.grad = std::move(sup.grad);
    }
    if (hyper.lambda_u != 0.0) {
        auto uns = unsupervised_loss_grad(student, spec, strong_view, pseudo, context);
        total.loss += hyper.lambda_u * uns.loss;
        for (std::size_t i = 0; i < total.grad.size(); ++i) total.grad.values[i] += hyper.lambda_u * uns.grad.values[i];
    }
    if (hyper.mu != 0.0) {
        double sq = 0.0;
        for (std::size_t i = 0; i < total.grad.size(); ++i) {
            const double d = student.values[i] - snapshot.values[i];
            sq += d * d;
            total.grad.values[i] += hyper.mu * d;
        }
        total.loss += 0.5 * hyper.mu * sq;
    }
    return total;
}

}  // namespace fedswitch
