#pragma once

// Protocol variants. Each one decides
//   * which global models travel server -> client,
//   * which model produces pseudo-labels on a client batch,
//   * whether and how the client-side teacher moves during local training,
//   * which models travel client -> server, and
//   * how the server forms the next global teacher.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedswitch/error.hpp"
#include "fedswitch/nn.hpp"
#include "fedswitch/ssl.hpp"

namespace fedswitch {

enum class VariantKind { fedprox_fixmatch, ts_server_ema, ts_client_ema, fedswitch };

inline std::string_view to_string(VariantKind k) {
    switch (k) {
        case VariantKind::fedprox_fixmatch: return "fedprox_fixmatch";
        case VariantKind::ts_server_ema: return "ts_server_ema";
        case VariantKind::ts_client_ema: return "ts_client_ema";
        case VariantKind::fedswitch: return "fedswitch";
    }
    return "?";
}

inline VariantKind parse_variant_kind(std::string_view s) {
    for (auto k : {VariantKind::fedprox_fixmatch, VariantKind::ts_server_ema, VariantKind::ts_client_ema,
                   VariantKind::fedswitch})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown variant '" + std::string(s) +
                      "' (expected fedprox_fixmatch, ts_server_ema, ts_client_ema or fedswitch)");
}

/// True for every variant that keeps a global teacher on the server.
inline bool has_global_teacher(VariantKind k) { return k != VariantKind::fedprox_fixmatch; }

struct VariantConfig {
    VariantKind kind = VariantKind::fedswitch;
    /// Round-level EMA ratio for the global teacher.
    double ema_alpha = 0.99;
    /// Batch-level EMA ratio for client-side teachers (ts_client_ema, fedswitch).
    double local_ema_alpha = 0.999;
    /// IIDness prior beta used by the fedswitch switch rule.
    double iidness_prior = 0.0;
    /// Pseudo-label source override: the client-side teacher is reset to the
    /// live local student before every batch (T = S). Used to check that the
    /// teacher variants collapse onto FedProx-FixMatch.
    bool teacher_tracks_student = false;

    void validate() const {
        detail::require(ema_alpha >= 0.0 && ema_alpha <= 1.0, "variant: ema_alpha must be in [0, 1]");
        detail::require(local_ema_alpha >= 0.0 && local_ema_alpha <= 1.0, "variant: local_ema_alpha must be in [0, 1]");
        detail::require(iidness_prior >= 0.0 && std::isfinite(iidness_prior), "variant: iidness_prior must be >= 0");
    }
};

/// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
inline ParamVector ema_update(const ParamVector& teacher, const ParamVector& student, double alpha) {
    check_same_layout(teacher, student, "ema_update");
    detail::require(alpha >= 0.0 && alpha <= 1.0, "ema_update: alpha must be in [0, 1]");
    if (alpha == 0.0) return student;
    ParamVector out = teacher;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values[i] += (1.0 - alpha) * (student.values[i] - teacher.values[i]);
    return out;
}

struct SwitchDecision {
    bool send_teacher = false;
    double dkl_teacher = 0.0;
    double dkl_student = 0.0;
    std::size_t round = 0;
};

/// KL state before any round has reported: the teacher sits exactly on the
/// prior and the student infinitely far from it, so round 0 sends the teacher.
inline KlStats initial_kl(double beta) {
    KlStats s;
    s.dkl_teacher = beta;
    s.dkl_student = std::numeric_limits<double>::infinity();
    return s;
}

/// Send the teacher iff |D_T - beta| < |D_S - beta|. Ties send the student.
inline SwitchDecision switch_decide(const KlStats& last_kl, double beta, std::size_t round = 0) {
    SwitchDecision d;
    d.dkl_teacher = last_kl.dkl_teacher;
    d.dkl_student = last_kl.dkl_student;
    d.round = round;
    d.send_teacher = std::abs(last_kl.dkl_teacher - beta) < std::abs(last_kl.dkl_student - beta);
    return d;
}

/// The models the server holds (or sends): a student and maybe a teacher.
struct ModelPair {
    ParamVector student;
    std::optional<ParamVector> teacher;

    std::size_t model_count() const { return teacher ? 2 : 1; }
};

inline ModelPair variant_downlink(const VariantConfig& cfg, const ModelPair& global,
                                  const std::optional<SwitchDecision>& decision) {
    const bool is_switch = cfg.kind == VariantKind::fedswitch;
    if (is_switch != decision.has_value())
        throw ConfigError("variant_downlink: a switch decision is required for fedswitch and only for fedswitch");
    ModelPair down{global.student, std::nullopt};
    const bool send_teacher = cfg.kind == VariantKind::ts_server_ema || cfg.kind == VariantKind::ts_client_ema ||
                              (is_switch && decision->send_teacher);
    if (send_teacher) {
        if (!global.teacher) throw ConfigError("variant_downlink: variant needs a global teacher but none exists");
        down.teacher = global.teacher;
    }
    return down;
}

struct LocalTeacher {
    ParamVector params;
    bool updated_this_round = false;
};

inline void variant_before_batch(const VariantConfig& cfg, std::optional<LocalTeacher>& teacher,
                                 const ParamVector& student) {
    if (cfg.teacher_tracks_student && teacher) teacher->params = student;
}

/// Chooses the pseudo-label source for one batch. Both prediction matrices
/// are on the weakly augmented view.
inline PseudoBatch variant_batch_hook(const VariantConfig& cfg, const std::optional<LocalTeacher>& teacher,
                                      const Matrix* weak_probs_teacher, const Matrix& weak_probs_student,
                                      double tau) {
    const bool needs_teacher = cfg.kind == VariantKind::ts_server_ema || cfg.kind == VariantKind::ts_client_ema;
    if (needs_teacher && (!teacher || !weak_probs_teacher))
        throw ConfigError(std::string("variant_batch_hook: ") + std::string(to_string(cfg.kind)) +
                          " requires a downlinked teacher");
    const bool use_teacher = cfg.kind != VariantKind::fedprox_fixmatch && teacher && weak_probs_teacher;
    return use_teacher ? pseudo_label(*weak_probs_teacher, tau, PseudoSource::teacher)
                       : pseudo_label(weak_probs_student, tau, PseudoSource::student);
}

/// Client-side teacher maintenance after the student's optimizer step.
/// ts_server_ema keeps its teacher frozen; ts_client_ema and fedswitch (when
/// a teacher was sent) move it toward the fresh student.
inline void variant_after_step(const VariantConfig& cfg, std::optional<LocalTeacher>& teacher,
                               const ParamVector& student_after) {
    if (!teacher) return;
    if (cfg.kind == VariantKind::ts_client_ema || cfg.kind == VariantKind::fedswitch) {
        teacher->params = ema_update(teacher->params, student_after, cfg.local_ema_alpha);
        teacher->updated_this_round = true;
    }
}

/// Everything a client sends back: parameter deltas and two KL scalars.
struct Uplink {
    ParamVector student_delta;
    std::optional<ParamVector> teacher_delta;
    double dkl_teacher = 0.0;
    double dkl_student = 0.0;

    std::size_t model_count() const { return teacher_delta ? 2 : 1; }
};

inline Uplink variant_uplink(const VariantConfig& cfg, ParamVector student_delta, const KlStats& kl,
                             const std::optional<LocalTeacher>& final_teacher,
                             const std::optional<ParamVector>& downlinked_teacher) {
    Uplink up{std::move(student_delta), std::nullopt, kl.dkl_teacher, kl.dkl_student};
    if (cfg.kind == VariantKind::ts_client_ema) {
        if (!final_teacher || !downlinked_teacher)
            throw ConfigError("variant_uplink: ts_client_ema must hold a local teacher");
        up.teacher_delta = difference(final_teacher->params, *downlinked_teacher);
    }
    return up;
}

/// base + (1/n) * sum(deltas), summed in the given order.
inline ParamVector apply_mean_delta(const ParamVector& base, std::span<const ParamVector> deltas) {
    if (deltas.empty()) throw ConfigError("apply_mean_delta: no deltas");
    ParamVector sum = ParamVector::zeros_like(base);
    for (const auto& d : deltas) {
        check_same_layout(base, d, "apply_mean_delta");
        for (std::size_t i = 0; i < sum.size(); ++i) sum.values[i] += d.values[i];
    }
    const double inv = 1.0 / static_cast<double>(deltas.size());
    ParamVector out = base;
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += sum.values[i] * inv;
    return out;
}

/// Forms the next global pair from the aggregated student.
inline ModelPair variant_server_merge(const VariantConfig& cfg, const ModelPair& current, ParamVector new_student,
                                      std::optional<std::span<const ParamVector>> teacher_deltas = std::nullopt) {
    const bool client_ema = cfg.kind == VariantKind::ts_client_ema;
    if (client_ema != teacher_deltas.has_value())
        throw ConfigError("variant_server_merge: teacher deltas are required for ts_client_ema and only for it");
    ModelPair next{std::move(new_student), std::nullopt};
    if (!has_global_teacher(cfg.kind)) return next;
    if (!current.teacher) throw ConfigError("variant_server_merge: missing global teacher");
    const ParamVector base = client_ema ? apply_mean_delta(*current.teacher, *teacher_deltas) : *current.teacher;
    next.teacher = ema_update(base, next.student, cfg.ema_alpha);
    return next;
}

}  // namespace fedswitch
