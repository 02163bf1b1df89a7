#pragma once

// Datasets, Dirichlet non-IID sharding, streaming schedules and the
// feature-space weak/strong augmentation pair.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>
#include <string>
#include <system_error>
#include <vector>

#include "fedswitch/error.hpp"
#include "fedswitch/nn.hpp"
#include "fedswitch/rng.hpp"

namespace fedswitch {

using Index = std::size_t;

struct Dataset {
    Matrix inputs;
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return inputs.cols; }

    void validate() const {
        if (labels.empty()) throw ConfigError("empty dataset");
        detail::require(num_classes >= 2, "dataset: num_classes must be >= 2");
        detail::require_shape(inputs.rows == labels.size(), "dataset: inputs/labels row count mismatch");
        for (int y : labels)
            detail::require(y >= 0 && static_cast<std::size_t>(y) < num_classes,
                            "dataset: label " + std::to_string(y) + " out of range");
    }
};

inline Matrix gather_rows(const Matrix& m, std::span<const Index> idx) {
    Matrix out(idx.size(), m.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        auto src = m.row(idx[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

inline std::vector<int> gather_labels(const Dataset& ds, std::span<const Index> idx) {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = ds.labels[idx[i]];
    return out;
}

inline Dataset subset(const Dataset& ds, std::span<const Index> idx) {
    return {gather_rows(ds.inputs, idx), gather_labels(ds, idx), ds.num_classes};
}

inline std::vector<double> label_histogram(const Dataset& ds, std::span<const Index> idx) {
    std::vector<double> h(ds.num_classes, 0.0);
    for (Index i : idx) h[static_cast<std::size_t>(ds.labels[i])] += 1.0;
    return h;
}

/// Isotropic Gaussian blobs. Class c is centred on a seed-determined point of
/// the unit sphere; examples are stored class-major.
inline Dataset gen_blobs(std::size_t num_classes, std::size_t dim, std::size_t per_class, double spread, Seed seed) {
    detail::require(num_classes >= 2, "gen_blobs: num_classes must be >= 2");
    detail::require(dim >= 1, "gen_blobs: dim must be >= 1");
    detail::require(per_class >= 1, "gen_blobs: per_class must be >= 1");
    detail::require(spread >= 0.0, "gen_blobs: spread must be non-negative");

    Rng center_rng(derive_seed(seed, "blob-centers"));
    Matrix centers(num_classes, dim);
    for (std::size_t c = 0; c < num_classes; ++c) {
        double norm = 0.0;
        while (norm < 1e-12) {
            norm = 0.0;
            for (auto& v : centers.row(c)) {
                v = center_rng.normal();
                norm += v * v;
            }
        }
        norm = std::sqrt(norm);
        for (auto& v : centers.row(c)) v /= norm;
    }

    Rng noise(derive_seed(seed, "blob-noise"));
    Dataset ds{Matrix(num_classes * per_class, dim), std::vector<int>(num_classes * per_class), num_classes};
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k) {
            const std::size_t r = c * per_class + k;
            ds.labels[r] = static_cast<int>(c);
            for (std::size_t j = 0; j < dim; ++j)
                ds.inputs(r, j) = centers(c, j) + (spread > 0.0 ? spread * noise.normal() : 0.0);
        }
    }
    return ds;
}

/// Reads `label,f1,...,fd` rows (no header). With scale_to_unit each feature
/// column is min-max scaled to [0, 1]; constant columns map to 0.
inline Dataset load_csv(const std::string& path, std::size_t num_classes, bool scale_to_unit = false) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_csv: cannot open " + path);

    Dataset ds;
    ds.num_classes = num_classes;
    std::vector<double> values;
    std::string line;
    std::size_t line_no = 0, dim = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;

        std::vector<double> fields;
        std::size_t start = 0;
        for (;;) {
            const std::size_t comma = line.find(',', start);
            std::string_view tok(line.data() + start, (comma == std::string::npos ? line.size() : comma) - start);
            while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
            while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (tok.empty() || ec != std::errc{} || ptr != tok.data() + tok.size() || !std::isfinite(v))
                throw ConfigError(path + ":" + std::to_string(line_no) + ": malformed field '" + std::string(tok) + "'");
            fields.push_back(v);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() < 2)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected a label and at least one feature");
        const double label = fields.front();
        if (label != std::floor(label) || label < 0 || label >= static_cast<double>(num_classes))
            throw ConfigError(path + ":" + std::to_string(line_no) + ": label out of range");
        if (dim == 0) dim = fields.size() - 1;
        if (fields.size() - 1 != dim)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                              " features, found " + std::to_string(fields.size() - 1));
        ds.labels.push_back(static_cast<int>(label));
        values.insert(values.end(), fields.begin() + 1, fields.end());
    }
    if (ds.labels.empty()) throw ConfigError("load_csv: " + path + ": empty dataset");

    ds.inputs.rows = ds.labels.size();
    ds.inputs.cols = dim;
    ds.inputs.data = std::move(values);
    if (scale_to_unit) {
        for (std::size_t j = 0; j < dim; ++j) {
            double lo = ds.inputs(0, j), hi = lo;
            for (std::size_t r = 0; r < ds.size(); ++r) {
                lo = std::min(lo, ds.inputs(r, j));
                hi = std::max(hi, ds.inputs(r, j));
            }
            for (std::size_t r = 0; r < ds.size(); ++r)
                ds.inputs(r, j) = hi > lo ? (ds.inputs(r, j) - lo) / (hi - lo) : 0.0;
        }
    }
    ds.validate();
    return ds;
}

struct ClientShard {
    std::size_t client_id = 0;
    std::vector<Index> labeled_idx;
    std::vector<Index> unlabeled_idx;
    /// One segment per participation when streaming; empty otherwise.
    std::vector<std::vector<Index>> stream_splits;
    /// Draws that hit an exhausted class and were re-routed.
    std::size_t fallback_draws = 0;
    /// The client's Dirichlet class preference.
    std::vector<double> class_prior;

    bool streaming() const { return !stream_splits.empty(); }

    /// Unlabeled examples visible at the client's `participation`-th selection
    /// (0-based). Streams wrap around once exhausted.
    const std::vector<Index>& visible_unlabeled(std::size_t participation) const {
        return streaming() ? stream_splits[participation % stream_splits.size()] : unlabeled_idx;
    }
};

struct ShardPlan {
    std::size_t num_clients = 1;
    double dirichlet_alpha = 1.0;
    /// 0 splits the labeled pool evenly over clients.
    std::size_t labeled_per_client = 0;
    bool server_holds_labels = false;
    Seed seed = 0;

    void validate() const {
        detail::require(num_clients >= 1, "shard: num_clients must be >= 1");
        detail::require(dirichlet_alpha > 0.0 && std::isfinite(dirichlet_alpha), "shard: dirichlet_alpha must be > 0");
    }
};

struct Sharding {
    std::vector<ClientShard> clients;
    /// Labeled pool withheld at the server (labels-at-server), else empty.
    std::vector<Index> server_labeled;
};

namespace detail {

/// Per-class stacks of the pool's indices, each shuffled.
inline std::vector<std::vector<Index>> class_pools(const Dataset& ds, std::span<const Index> pool, Rng& rng) {
    std::vector<std::vector<Index>> by_class(ds.num_classes);
    for (Index i : pool) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    for (auto& v : by_class) rng.shuffle(v);
    return by_class;
}

/// Pops `quota` examples, drawing each one's class from `prior`. A draw that
/// lands on an exhausted class is re-drawn from the prior restricted to
/// classes with stock left, or from the remaining stock itself when the
/// prior puts no mass there. Returns the number of such re-routed draws.
inline std::size_t fill_quota(std::vector<std::vector<Index>>& pools, const std::vector<double>& prior,
                              std::size_t quota, Rng& rng, std::vector<Index>& out) {
    std::size_t fallbacks = 0;
    std::vector<double> w(pools.size());
    for (std::size_t n = 0; n < quota; ++n) {
        std::size_t c = rng.categorical(prior);
        if (c >= pools.size() || pools[c].empty()) {
            ++fallbacks;
            for (std::size_t k = 0; k < pools.size(); ++k) w[k] = pools[k].empty() ? 0.0 : prior[k];
            c = rng.categorical(w);
            if (c >= pools.size()) {
                for (std::size_t k = 0; k < pools.size(); ++k) w[k] = static_cast<double>(pools[k].size());
                c = rng.categorical(w);
            }
            if (c >= pools.size()) throw ConfigError("dirichlet_shard: pool exhausted");
        }
        out.push_back(pools[c].back());
        pools[c].pop_back();
    }
    return fallbacks;
}

inline std::vector<std::size_t> even_quotas(std::size_t total, std::size_t parts) {
    std::vector<std::size_t> q(parts, total / parts);
    for (std::size_t k = 0; k < total % parts; ++k) ++q[k];
    return q;
}

}  // namespace detail

/// Quota-based Dirichlet sharding. Every client draws one class preference
/// p ~ Dir(alpha * 1_C) and then fills equal-sized labeled and unlabeled
/// quotas by sampling classes from p without replacement from the pools.
inline Sharding dirichlet_shard(const Dataset& ds, const ShardPlan& plan, std::span<const Index> labeled_pool,
                                std::span<const Index> unlabeled_pool) {
    plan.validate();
    ds.validate();
    const std::size_t K = plan.num_clients;
    if (unlabeled_pool.size() < K)
        throw ConfigError("dirichlet_shard: " + std::to_string(unlabeled_pool.size()) + " unlabeled examples cannot cover " +
                          std::to_string(K) + " clients");

    Rng rng(plan.seed);
    Sharding out;
    out.clients.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
        out.clients[k].client_id = k;
        out.clients[k].class_prior = rng.dirichlet(ds.num_classes, plan.dirichlet_alpha);
    }

    if (plan.server_holds_labels) {
        out.server_labeled.assign(labeled_pool.begin(), labeled_pool.end());
    } else if (!labeled_pool.empty()) {
        std::vector<std::size_t> quotas;
        if (plan.labeled_per_client == 0) {
            quotas = detail::even_quotas(labeled_pool.size(), K);
        } else {
            detail::require(plan.labeled_per_client * K <= labeled_pool.size(),
                            "dirichlet_shard: labeled pool too small for labeled_per_client");
            quotas.assign(K, plan.labeled_per_client);
        }
        auto pools = detail::class_pools(ds, labeled_pool, rng);
        for (std::size_t k = 0; k < K; ++k)
            out.clients[k].fallback_draws +=
                detail::fill_quota(pools, out.clients[k].class_prior, quotas[k], rng, out.clients[k].labeled_idx);
    }

    auto pools = detail::class_pools(ds, unlabeled_pool, rng);
    const auto quotas = detail::even_quotas(unlabeled_pool.size(), K);
    for (std::size_t k = 0; k < K; ++k)
        out.clients[k].fallback_draws +=
            detail::fill_quota(pools, out.clients[k].class_prior, quotas[k], rng, out.clients[k].unlabeled_idx);
    return out;
}

/// Whole dataset as the unlabeled pool, no labels placed.
inline Sharding dirichlet_shard(const Dataset& ds, const ShardPlan& plan) {
    std::vector<Index> all(ds.size());
    std::iota(all.begin(), all.end(), Index{0});
    return dirichlet_shard(ds, plan, {}, all);
}

/// Splits the shard's unlabeled data into `num_steps` near-equal segments in
/// a seeded random order.
inline ClientShard make_stream_schedule(ClientShard shard, std::size_t num_steps, Seed seed) {
    detail::require(num_steps >= 1, "make_stream_schedule: num_steps must be >= 1");
    if (shard.unlabeled_idx.size() < num_steps)
        throw ConfigError("make_stream_schedule: client " + std::to_string(shard.client_id) + " has " +
                          std::to_string(shard.unlabeled_idx.size()) + " unlabeled examples for " +
                          std::to_string(num_steps) + " steps");
    std::vector<Index> order = shard.unlabeled_idx;
    if (num_steps > 1) {
        Rng rng(seed);
        rng.shuffle(order);
    }
    shard.stream_splits.clear();
    std::size_t pos = 0;
    for (std::size_t q : detail::even_quotas(order.size(), num_steps)) {
        shard.stream_splits.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                         order.begin() + static_cast<std::ptrdiff_t>(pos + q));
        pos += q;
    }
    return shard;
}

/// Streaming non-IID variant: each segment draws its own class mix
/// q_k ~ Dir(stream_alpha * 1_C) and fills its quota from the shard's
/// remaining unlabeled examples, so consecutive participations see shifting
/// label skew on top of the client's own.
inline ClientShard make_stream_schedule(ClientShard shard, const Dataset& ds, std::size_t num_steps,
                                        double stream_alpha, Seed seed) {
    detail::require(stream_alpha > 0.0, "make_stream_schedule: stream_alpha must be > 0");
    shard = make_stream_schedule(std::move(shard), num_steps, seed);
    if (num_steps == 1) return shard;
    Rng rng(derive_seed(seed, "stream-skew"));
    auto pools = detail::class_pools(ds, shard.unlabeled_idx, rng);
    for (auto& seg : shard.stream_splits) {
        const std::size_t q = seg.size();
        seg.clear();
        shard.fallback_draws += detail::fill_quota(pools, rng.dirichlet(ds.num_classes, stream_alpha), q, rng, seg);
    }
    return shard;
}

struct AugmentConfig {
    double weak_noise_sigma = 0.0;
    double weak_shift_fraction = 0.0;
    double strong_noise_sigma = 0.0;
    double strong_mask_prob = 0.0;

    void validate() const {
        detail::require(weak_noise_sigma >= 0.0, "augment: weak_noise_sigma must be >= 0");
        detail::require(strong_noise_sigma >= 0.0, "augment: strong_noise_sigma must be >= 0");
        detail::require(weak_shift_fraction >= 0.0 && weak_shift_fraction < 1.0, "augment: weak_shift_fraction must be in [0,1)");
        detail::require(strong_mask_prob >= 0.0 && strong_mask_prob < 1.0 + 1e-12, "augment: strong_mask_prob must be in [0,1]");
        detail::require(strong_noise_sigma >= weak_noise_sigma, "augment: strong_noise_sigma must be >= weak_noise_sigma");
    }
};

namespace detail {

// Gaussian jitter plus a per-example translation of every coordinate by
// u ~ U(-f * range, f * range), range being the example's own feature span.
inline void jitter_and_shift(Matrix& x, double sigma, double shift_fraction, Rng& rng) {
    for (std::size_t r = 0; r < x.rows; ++r) {
        auto row = x.row(r);
        if (shift_fraction > 0.0) {
            const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
            const double reach = shift_fraction * (*hi - *lo);
            const double shift = rng.uniform(-reach, reach);
            for (auto& v : row) v += shift;
        }
        if (sigma > 0.0)
            for (auto& v : row) v += sigma * rng.normal();
    }
}

}  // namespace detail

inline Matrix weak_augment(Matrix x, const AugmentConfig& cfg, Rng& rng) {
    detail::jitter_and_shift(x, cfg.weak_noise_sigma, cfg.weak_shift_fraction, rng);
    return x;
}

/// Stronger jitter and the same shift as the weak view, then each coordinate
/// is zeroed independently with probability strong_mask_prob.
inline Matrix strong_augment(Matrix x, const AugmentConfig& cfg, Rng& rng) {
    detail::jitter_and_shift(x, cfg.strong_noise_sigma, cfg.weak_shift_fraction, rng);
    if (cfg.strong_mask_prob > 0.0)
        for (auto& v : x.data)
            if (rng.bernoulli(cfg.strong_mask_prob)) v = 0.0;
    return x;
}

inline Batch weak_augment(Batch b, const AugmentConfig& cfg, Rng& rng) {
    b.inputs = weak_augment(std::move(b.inputs), cfg, rng);
    return b;
}

inline Batch strong_augment(Batch b, const AugmentConfig& cfg, Rng& rng) {
    b.inputs = strong_augment(std::move(b.inputs), cfg, rng);
    return b;
}

}  // namespace fedswitch
