#pragma once

// Round orchestration: client selection, ClientUpdate, delta aggregation,
// labels-at-server ServerUpdate (sequential and parallel), global teacher
// maintenance and per-round reporting.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedswitch/data.hpp"
#include "fedswitch/error.hpp"
#include "fedswitch/metrics.hpp"
#include "fedswitch/nn.hpp"
#include "fedswitch/rng.hpp"
#include "fedswitch/ssl.hpp"
#include "fedswitch/variants.hpp"

namespace fedswitch {

enum class Topology { labels_at_client, labels_at_server_sequential, labels_at_server_parallel };

inline std::string_view to_string(Topology t) {
    switch (t) {
        case Topology::labels_at_client: return "labels_at_client";
        case Topology::labels_at_server_sequential: return "labels_at_server_sequential";
        case Topology::labels_at_server_parallel: return "labels_at_server_parallel";
    }
    return "?";
}

inline Topology parse_topology(std::string_view s) {
    for (auto t : {Topology::labels_at_client, Topology::labels_at_server_sequential, Topology::labels_at_server_parallel})
        if (s == to_string(t)) return t;
    throw ConfigError("unknown topology '" + std::string(s) + "'");
}

inline bool labels_at_server(Topology t) { return t != Topology::labels_at_client; }

struct RoundPlan {
    double participation_rate = 1.0;
    std::size_t local_epochs = 1;
    std::size_t server_epochs = 1;
    Topology topology = Topology::labels_at_client;
    std::size_t labeled_batch = 10;
    std::size_t unlabeled_batch = 50;
    std::size_t server_batch = 50;
    double client_lr = 0.03;
    double server_lr = 0.03;
    double momentum = 0.9;
    double weight_decay = 0.0;

    /// m = max(floor(C * K), 1)
    std::size_t clients_per_round(std::size_t num_clients) const {
        const double m = std::floor(participation_rate * static_cast<double>(num_clients) + 1e-9);
        return std::max<std::size_t>(static_cast<std::size_t>(m), 1);
    }

    void validate() const {
        detail::require(participation_rate > 0.0 && participation_rate <= 1.0, "training: participation_rate must be in (0, 1]");
        detail::require(labeled_batch >= 1 && unlabeled_batch >= 1 && server_batch >= 1, "training: batch sizes must be >= 1");
        detail::require(client_lr > 0.0 && server_lr > 0.0, "training: learning rates must be positive");
        detail::require(momentum >= 0.0 && momentum < 1.0, "training: momentum must be in [0, 1)");
        detail::require(weight_decay >= 0.0, "training: weight_decay must be >= 0");
    }
};

/// Read-only description of one simulated federation.
struct Federation {
    ModelSpec spec;
    Dataset data;  // every shard indexes into this
    Dataset test;
    std::vector<ClientShard> shards;
    VariantConfig variant;
    SslHyper hyper;
    RoundPlan plan;
    AugmentConfig augment;
    Seed selection_seed = 0;
    Seed augment_seed = 0;
    std::size_t bytes_per_param = 8;
};

struct ServerState {
    ModelPair global;
    std::size_t round = 0;
    KlStats last_kl;
    std::optional<Dataset> server_labeled_pool;
};

inline ServerState initial_server_state(const Federation& fed, const ParamVector& init,
                                        std::optional<Dataset> server_pool = std::nullopt) {
    ServerState s;
    s.global.student = init;
    if (has_global_teacher(fed.variant.kind)) s.global.teacher = init;
    s.last_kl = initial_kl(fed.variant.iidness_prior);
    s.server_labeled_pool = std::move(server_pool);
    if (labels_at_server(fed.plan.topology) && (!s.server_labeled_pool || s.server_labeled_pool->size() == 0))
        throw ConfigError("labels-at-server topology needs a non-empty server labeled pool");
    return s;
}

/// Simulator-side bookkeeping that is never transmitted: it uses true labels.
struct ClientDiagnostics {
    std::vector<double> pseudo_histogram;
    std::vector<double> true_histogram;
    ParamVector final_student;
};

struct ClientUpdateResult {
    std::size_t client_id = 0;
    KlStats kl;
    std::size_t num_examples = 0;
    Uplink uplink;
    ClientDiagnostics diagnostics;

    const ParamVector& delta() const { return uplink.student_delta; }
};

/// m clients uniformly without replacement, a pure function of
/// (seed, round), returned in ascending id order.
inline std::vector<std::size_t> select_clients(std::size_t num_clients, std::size_t m, std::size_t round, Seed seed) {
    if (m < 1 || m > num_clients)
        throw ConfigError("select_clients: need 1 <= m <= K (m=" + std::to_string(m) + ", K=" + std::to_string(num_clients) + ")");
    Rng rng(derive_seed(seed, "select", round));
    std::vector<std::size_t> ids(num_clients);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    for (std::size_t i = 0; i < m; ++i) std::swap(ids[i], ids[i + rng.below(num_clients - i)]);
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// One participation of a stateless client. The result depends only on the
/// arguments: the shard, which stream segment is visible, the downlinked
/// models and the client's rng seed.
inline ClientUpdateResult client_update(const Federation& fed, const ClientShard& shard, std::size_t participation,
                                        const ModelPair& downlink, std::size_t round, Seed client_seed) {
    const auto& plan = fed.plan;
    const auto& cfg = fed.variant;
    const std::size_t C = fed.spec.num_classes;
    Rng rng(client_seed);

    ClientUpdateResult res;
    res.client_id = shard.client_id;
    res.diagnostics.pseudo_histogram.assign(C, 0.0);
    res.diagnostics.true_histogram.assign(C, 0.0);

    ParamVector student = downlink.student;
    std::optional<LocalTeacher> teacher;
    if (downlink.teacher) teacher = LocalTeacher{*downlink.teacher, false};
    OptimState opt{plan.client_lr, plan.momentum, plan.weight_decay, {}};

    std::vector<Index> unlabeled = shard.visible_unlabeled(participation);
    std::vector<Index> labeled;
    if (!labels_at_server(plan.topology)) labeled = shard.labeled_idx;
    res.num_examples = unlabeled.size() + labeled.size();
    if (unlabeled.empty()) throw ConfigError("client " + std::to_string(shard.client_id) + " has no unlabeled data");

    std::size_t labeled_cursor = 0;
    std::size_t batch_no = 0;
    for (std::size_t epoch = 0; epoch < plan.local_epochs; ++epoch) {
        rng.shuffle(unlabeled);
        if (!labeled.empty()) rng.shuffle(labeled);
        for (std::size_t start = 0; start < unlabeled.size(); start += plan.unlabeled_batch, ++batch_no) {
            const std::size_t end = std::min(unlabeled.size(), start + plan.unlabeled_batch);
            const std::span<const Index> idx(unlabeled.data() + start, end - start);
            const Matrix raw = gather_rows(fed.data.inputs, idx);
            const Matrix weak = weak_augment(raw, fed.augment, rng);
            const Matrix strong = strong_augment(raw, fed.augment, rng);

            std::optional<Matrix> lab_inputs;
            std::vector<int> lab_targets;
            if (!labeled.empty()) {
                std::vector<Index> lab_idx;
                const std::size_t take = std::min(plan.labeled_batch, labeled.size());
                for (std::size_t j = 0; j < take; ++j) lab_idx.push_back(labeled[(labeled_cursor + j) % labeled.size()]);
                labeled_cursor = (labeled_cursor + take) % labeled.size();
                lab_inputs = weak_augment(gather_rows(fed.data.inputs, lab_idx), fed.augment, rng);
                lab_targets = gather_labels(fed.data, lab_idx);
            }

            variant_before_batch(cfg, teacher, student);
            const Matrix student_weak = forward_probs(student, fed.spec, weak);
            std::optional<Matrix> teacher_weak;
            if (teacher) teacher_weak = forward_probs(teacher->params, fed.spec, weak);
            const PseudoBatch pseudo =
                variant_batch_hook(cfg, teacher, teacher_weak ? &*teacher_weak : nullptr, student_weak, fed.hyper.tau);

            const Matrix student_strong = forward_probs(student, fed.spec, strong);
            res.kl.sum_teacher += kl_to_uniform(batch_prediction_distribution(teacher_weak ? *teacher_weak : student_weak));
            res.kl.sum_student += kl_to_uniform(batch_prediction_distribution(student_strong));
            res.kl.teacher_proxy = res.kl.teacher_proxy || !teacher_weak;
            ++res.kl.num_batches;
            for (std::size_t i = 0; i < idx.size(); ++i) {
                res.diagnostics.pseudo_histogram[static_cast<std::size_t>(pseudo.pseudo_labels[i])] += 1.0;
                res.diagnostics.true_histogram[static_cast<std::size_t>(fed.data.labels[idx[i]])] += 1.0;
            }

            const std::string context = "round " + std::to_string(round) + ", client " +
                                        std::to_string(shard.client_id) + ", batch " + std::to_string(batch_no);
            std::optional<LabeledView> lab_view;
            if (lab_inputs) lab_view.emplace(LabeledView{*lab_inputs, lab_targets});
            const LossGrad lg = combined_client_grad(student, downlink.student, fed.spec, lab_view, strong, pseudo,
                                                     fed.hyper, context);
            student = sgd_step(student, lg.grad, opt);
            if (!all_finite(student.values)) throw NumericError("non-finite client parameters (" + context + ")");
            variant_after_step(cfg, teacher, student);
        }
    }

    if (res.kl.num_batches > 0) {
        res.kl.dkl_teacher = res.kl.sum_teacher / static_cast<double>(res.kl.num_batches);
        res.kl.dkl_student = res.kl.sum_student / static_cast<double>(res.kl.num_batches);
    }
    res.uplink = variant_uplink(cfg, difference(student, downlink.student), res.kl, teacher, downlink.teacher);
    res.diagnostics.final_student = std::move(student);
    return res;
}

namespace detail {

inline std::vector<const ClientUpdateResult*> canonical_order(std::span<const ClientUpdateResult> results) {
    std::vector<const ClientUpdateResult*> order;
    for (const auto& r : results) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const auto* a, const auto* b) { return a->client_id < b->client_id; });
    return order;
}

}  // namespace detail

/// theta_s + mean of client deltas, summed in ascending client id order so
/// the outcome does not depend on arrival order.
inline ParamVector aggregate(const ParamVector& snapshot, std::span<const ClientUpdateResult> results) {
    if (results.empty()) throw ConfigError("aggregate: no client results");
    std::vector<ParamVector> deltas;
    for (const auto* r : detail::canonical_order(results)) {
        check_same_layout(snapshot, r->delta(), "aggregate");
        deltas.push_back(r->delta());
    }
    return apply_mean_delta(snapshot, deltas);
}

/// E_s epochs of plain supervised SGD over the server's labeled pool.
inline ParamVector server_update(ParamVector params, const ModelSpec& spec, const Dataset& pool, std::size_t epochs,
                                 double lr, std::size_t batch_size, double weight_decay, Rng& rng) {
    if (pool.size() == 0) throw ConfigError("server_update: empty server labeled pool");
    detail::require(batch_size >= 1, "server_update: batch_size must be >= 1");
    OptimState opt{lr, 0.0, weight_decay, {}};
    std::vector<Index> order(pool.size());
    std::iota(order.begin(), order.end(), Index{0});
    for (std::size_t e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::span<const Index> idx(order.data() + start, std::min(order.size(), start + batch_size) - start);
            const Matrix x = gather_rows(pool.inputs, idx);
            const std::vector<int> y = gather_labels(pool, idx);
            const std::vector<double> ones(idx.size(), 1.0);
            auto lg = loss_and_grad(params, spec, x, y, ones, "server update");
            params = sgd_step(params, lg.grad, opt);
        }
    }
    return params;
}

struct RoundOutcome {
    RoundReport report;
    std::vector<ClientUpdateResult> results;
    std::optional<SwitchDecision> decision;
};

/// Mutable per-run bookkeeping that lives beside the server: how often each
/// client has been selected (its position in its own data stream) and the
/// transmission ledger.
struct RunTrack {
    std::vector<std::size_t> participations;
    CommLedger ledger;
};

inline RoundOutcome run_round(ServerState& server, const Federation& fed, RunTrack& track) {
    const std::size_t K = fed.shards.size();
    const std::size_t t = server.round;
    const std::size_t P = fed.spec.param_count();
    if (track.participations.size() != K) track.participations.assign(K, 0);
    track.ledger.bytes_per_param = fed.bytes_per_param;

    RoundOutcome out;
    const auto selected = select_clients(K, fed.plan.clients_per_round(K), t, fed.selection_seed);
    if (fed.variant.kind == VariantKind::fedswitch)
        out.decision = switch_decide(server.last_kl, fed.variant.iidness_prior, t);
    const ModelPair down = variant_downlink(fed.variant, server.global, out.decision);

    for (std::size_t k : selected) {
        record_transmission(track.ledger, t, Direction::downlink, ModelRole::student, k, P);
        if (down.teacher) record_transmission(track.ledger, t, Direction::downlink, ModelRole::teacher, k, P);
        out.results.push_back(client_update(fed, fed.shards[k], track.participations[k], down, t,
                                            derive_seed(fed.augment_seed, "client", t, k)));
        ++track.participations[k];
        const auto& up = out.results.back().uplink;
        record_transmission(track.ledger, t, Direction::uplink, ModelRole::student, k, P);
        if (up.teacher_delta) record_transmission(track.ledger, t, Direction::uplink, ModelRole::teacher, k, P);
        record_transmission(track.ledger, t, Direction::uplink, ModelRole::kl_scalars, k, 2);
    }

    ParamVector student = aggregate(down.student, out.results);
    if (labels_at_server(fed.plan.topology)) {
        Rng srng(derive_seed(fed.augment_seed, "server", t));
        const auto& pool = *server.server_labeled_pool;
        if (fed.plan.topology == Topology::labels_at_server_sequential) {
            student = server_update(std::move(student), fed.spec, pool, fed.plan.server_epochs, fed.plan.server_lr,
                                    fed.plan.server_batch, fed.plan.weight_decay, srng);
        } else {
            const ParamVector trained = server_update(server.global.student, fed.spec, pool, fed.plan.server_epochs,
                                                      fed.plan.server_lr, fed.plan.server_batch, fed.plan.weight_decay, srng);
            double n = static_cast<double>(pool.size());
            for (const auto& r : out.results) n += static_cast<double>(r.num_examples);
            const double w = static_cast<double>(pool.size()) / n;
            for (std::size_t i = 0; i < student.size(); ++i)
                student.values[i] = w * trained.values[i] + (1.0 - w) * student.values[i];
        }
    }

    std::optional<std::vector<ParamVector>> teacher_deltas;
    if (fed.variant.kind == VariantKind::ts_client_ema) {
        teacher_deltas.emplace();
        for (const auto* r : detail::canonical_order(out.results)) teacher_deltas->push_back(*r->uplink.teacher_delta);
    }
    server.global = variant_server_merge(
        fed.variant, server.global, std::move(student),
        teacher_deltas ? std::optional<std::span<const ParamVector>>(*teacher_deltas) : std::nullopt);

    KlStats agg;
    std::vector<std::size_t> ids;
    std::vector<std::vector<double>> pseudo, truth;
    for (const auto* r : detail::canonical_order(out.results)) {
        agg.dkl_teacher += r->uplink.dkl_teacher;
        agg.dkl_student += r->uplink.dkl_student;
        agg.sum_teacher += r->kl.sum_teacher;
        agg.sum_student += r->kl.sum_student;
        agg.num_batches += r->kl.num_batches;
        agg.teacher_proxy = agg.teacher_proxy || r->kl.teacher_proxy;
        ids.push_back(r->client_id);
        pseudo.push_back(r->diagnostics.pseudo_histogram);
        truth.push_back(r->diagnostics.true_histogram);
    }
    const double inv_m = 1.0 / static_cast<double>(out.results.size());
    agg.dkl_teacher *= inv_m;
    agg.dkl_student *= inv_m;
    server.last_kl = agg;

    auto& rep = out.report;
    rep.round = t;
    rep.eval_accuracy_student = evaluate(server.global.student, fed.spec, fed.test);
    if (server.global.teacher) rep.eval_accuracy_teacher = evaluate(*server.global.teacher, fed.spec, fed.test);
    rep.dkl_teacher = agg.dkl_teacher;
    rep.dkl_student = agg.dkl_student;
    rep.dkl_teacher_sum = agg.sum_teacher;
    rep.dkl_student_sum = agg.sum_student;
    rep.teacher_proxy = agg.teacher_proxy;
    if (out.decision) rep.send_teacher = out.decision->send_teacher;
    rep.ledger_delta = track.ledger.entry_for(t);

    const auto ratios = kl_ratio_stats(ids, pseudo, truth);
    rep.kl_ratio_mean = ratios.mean_ratio;
    for (const auto& c : ratios.clients) {
        rep.pseudo_kl_mean += c.pseudo_kl * inv_m;
        rep.truth_kl_mean += c.ground_truth_kl * inv_m;
    }

    ++server.round;
    return out;
}

}  // namespace fedswitch
