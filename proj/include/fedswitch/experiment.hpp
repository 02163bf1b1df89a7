#pragma once

// Experiment configuration (strict JSON), multi-trial runs with per-purpose
// seed derivation, variant x Dirichlet-alpha sweeps, and result emission.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedswitch/data.hpp"
#include "fedswitch/engine.hpp"
#include "fedswitch/error.hpp"
#include "fedswitch/metrics.hpp"
#include "fedswitch/nn.hpp"
#include "fedswitch/variants.hpp"

namespace fedswitch {

using Json = nlohmann::ordered_json;

struct DatasetBlock {
    std::string source = "blobs";  // "blobs" or "csv"
    std::string path;
    std::string test_path;
    std::size_t num_classes = 10;
    std::size_t dim = 16;
    std::size_t labeled = 200;
    /// 0 keeps every remaining example as unlabeled data.
    std::size_t unlabeled = 4000;
    std::size_t test = 1000;
    double spread = 0.35;
    bool scale_features = false;
};

struct ShardBlock {
    std::size_t num_clients = 20;
    double dirichlet_alpha = 100.0;
    /// 0 disables streaming.
    std::size_t streaming_steps = 0;
    /// Dirichlet concentration of each stream segment's class mix; 0 streams
    /// uniformly random segments of the client's shard.
    double stream_alpha = 0.0;
};

struct MetricsBlock {
    double window_fraction = 0.125;
    double accuracy_threshold = 0.9;
};

struct SweepBlock {
    std::vector<double> alphas;
    std::vector<VariantKind> variants;
};

struct ExperimentConfig {
    DatasetBlock dataset;
    ShardBlock shard;
    ModelSpec model{16, {32}, 10, Activation::relu};
    VariantConfig variant;
    /// iidness_prior = "auto": mean KL-to-uniform of the clients' true
    /// unlabeled label histograms.
    bool iidness_prior_auto = false;
    std::size_t rounds = 0;
    RoundPlan plan;
    SslHyper hyper;
    AugmentConfig augment{0.05, 0.05, 0.25, 0.3};
    std::size_t bytes_per_param = 8;
    MetricsBlock metrics;
    SweepBlock sweep;
    std::size_t trials = 1;
    Seed seed = 0;
    std::string output = "out";

    void validate() const {
        detail::require(dataset.source == "blobs" || dataset.source == "csv", "dataset.source must be 'blobs' or 'csv'");
        detail::require(dataset.source != "csv" || !dataset.path.empty(), "dataset.path is required for csv datasets");
        detail::require(dataset.num_classes >= 2, "dataset.num_classes must be >= 2");
        detail::require(dataset.test >= 1 || !dataset.test_path.empty(), "dataset.test must be >= 1");
        detail::require(shard.num_clients >= 1, "shard.num_clients must be >= 1");
        detail::require(shard.dirichlet_alpha > 0.0, "shard.dirichlet_alpha must be > 0");
        detail::require(shard.stream_alpha >= 0.0, "shard.stream_alpha must be >= 0");
        detail::require(rounds >= 1, "training.rounds must be >= 1");
        detail::require(trials >= 1, "trials must be >= 1");
        detail::require(bytes_per_param == 4 || bytes_per_param == 8, "training.bytes_per_param must be 4 or 8");
        detail::require(metrics.window_fraction > 0.0 && metrics.window_fraction <= 1.0,
                        "metrics.window_fraction must be in (0, 1]");
        for (double a : sweep.alphas) detail::require(a > 0.0, "sweep.alphas must be > 0");
        model.validate();
        variant.validate();
        plan.validate();
        hyper.validate();
        augment.validate();
    }
};

namespace detail {

/// Walks one JSON object, handing out typed fields and rejecting any key
/// that was never asked for.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        out = convert<T>(j_.at(key), key);
    }

    template <typename T>
    void require(const std::string& key, T& out) {
        if (!j_.contains(key)) throw ConfigError("missing required key '" + where(key) + "'");
        get(key, out);
    }

    std::optional<ObjectReader> child(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) return std::nullopt;
        return ObjectReader(j_.at(key), where(key));
    }

    const Json* raw(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string where(const std::string& key) const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
    }

private:
    template <typename T>
    T convert(const Json& v, const std::string& key) const {
        const auto fail = [&](const char* want) {
            return ConfigError("type mismatch at '" + where(key) + "': expected " + want + ", got " + v.type_name());
        };
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw fail("boolean");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw fail("string");
            return v.get<std::string>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
                throw fail("non-negative integer");
            return v.get<T>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw fail("number");
            return v.get<T>();
        } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
            if (!v.is_array()) throw fail("array of integers");
            T out;
            for (const auto& e : v) {
                if (!e.is_number_unsigned()) throw fail("array of non-negative integers");
                out.push_back(e.get<std::size_t>());
            }
            return out;
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            if (!v.is_array()) throw fail("array of numbers");
            T out;
            for (const auto& e : v) {
                if (!e.is_number()) throw fail("array of numbers");
                out.push_back(e.get<double>());
            }
            return out;
        } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
            if (!v.is_array()) throw fail("array of strings");
            T out;
            for (const auto& e : v) {
                if (!e.is_string()) throw fail("array of strings");
                out.push_back(e.get<std::string>());
            }
            return out;
        } else {
            static_assert(sizeof(T) == 0, "unsupported config field type");
        }
    }

    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig parse_config_json(const Json& root) {
    ExperimentConfig cfg;
    detail::ObjectReader r(root, "");

    if (auto d = r.child("dataset")) {
        auto& ds = cfg.dataset;
        d->get("source", ds.source);
        d->get("path", ds.path);
        d->get("test_path", ds.test_path);
        d->get("num_classes", ds.num_classes);
        d->get("dim", ds.dim);
        d->get("labeled", ds.labeled);
        d->get("unlabeled", ds.unlabeled);
        d->get("test", ds.test);
        d->get("spread", ds.spread);
        d->get("scale_features", ds.scale_features);
        d->finish();
    }
    if (auto s = r.child("shard")) {
        s->get("num_clients", cfg.shard.num_clients);
        s->get("dirichlet_alpha", cfg.shard.dirichlet_alpha);
        s->get("streaming_steps", cfg.shard.streaming_steps);
        s->get("stream_alpha", cfg.shard.stream_alpha);
        s->finish();
    }
    if (auto m = r.child("model")) {
        m->get("hidden", cfg.model.hidden_dims);
        std::string act(to_string(cfg.model.activation));
        m->get("activation", act);
        if (act == "relu") cfg.model.activation = Activation::relu;
        else if (act == "tanh") cfg.model.activation = Activation::tanh;
        else throw ConfigError("model.activation must be 'relu' or 'tanh'");
        m->finish();
    }
    {
        auto v = r.child("variant");
        if (!v) throw ConfigError("missing required key 'variant'");
        std::string kind;
        v->require("kind", kind);
        cfg.variant.kind = parse_variant_kind(kind);
        v->get("ema_alpha", cfg.variant.ema_alpha);
        v->get("local_ema_alpha", cfg.variant.local_ema_alpha);
        v->get("teacher_tracks_student", cfg.variant.teacher_tracks_student);
        if (const Json* beta = v->raw("iidness_prior")) {
            if (beta->is_string() && beta->get<std::string>() == "auto") cfg.iidness_prior_auto = true;
            else if (beta->is_number()) cfg.variant.iidness_prior = beta->get<double>();
            else throw ConfigError("type mismatch at 'variant.iidness_prior': expected number or \"auto\"");
        }
        v->finish();
    }
    {
        auto t = r.child("training");
        if (!t) throw ConfigError("missing required key 'training'");
        t->require("rounds", cfg.rounds);
        auto& p = cfg.plan;
        t->get("participation_rate", p.participation_rate);
        t->get("local_epochs", p.local_epochs);
        t->get("server_epochs", p.server_epochs);
        std::string topo(to_string(p.topology));
        t->get("topology", topo);
        p.topology = parse_topology(topo);
        t->get("labeled_batch", p.labeled_batch);
        t->get("unlabeled_batch", p.unlabeled_batch);
        t->get("server_batch", p.server_batch);
        t->get("client_lr", p.client_lr);
        t->get("server_lr", p.server_lr);
        t->get("momentum", p.momentum);
        t->get("weight_decay", p.weight_decay);
        t->get("tau", cfg.hyper.tau);
        t->get("lambda_u", cfg.hyper.lambda_u);
        t->get("mu", cfg.hyper.mu);
        t->get("bytes_per_param", cfg.bytes_per_param);
        t->finish();
    }
    if (auto a = r.child("augment")) {
        a->get("weak_noise_sigma", cfg.augment.weak_noise_sigma);
        a->get("weak_shift_fraction", cfg.augment.weak_shift_fraction);
        a->get("strong_noise_sigma", cfg.augment.strong_noise_sigma);
        a->get("strong_mask_prob", cfg.augment.strong_mask_prob);
        a->finish();
    }
    if (auto m = r.child("metrics")) {
        m->get("window_fraction", cfg.metrics.window_fraction);
        m->get("accuracy_threshold", cfg.metrics.accuracy_threshold);
        m->finish();
    }
    if (auto s = r.child("sweep")) {
        s->get("alphas", cfg.sweep.alphas);
        std::vector<std::string> kinds;
        s->get("variants", kinds);
        for (const auto& k : kinds) cfg.sweep.variants.push_back(parse_variant_kind(k));
        s->finish();
    }
    r.get("trials", cfg.trials);
    r.get("seed", cfg.seed);
    r.get("output", cfg.output);
    r.finish();

    cfg.validate();
    return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    Json root;
    try {
        root = Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_config_json(root);
}

/// Every field with its resolved value.
inline Json to_json(const ExperimentConfig& c) {
    Json j;
    j["dataset"] = {{"source", c.dataset.source},       {"path", c.dataset.path},
                    {"test_path", c.dataset.test_path}, {"num_classes", c.dataset.num_classes},
                    {"dim", c.dataset.dim},             {"labeled", c.dataset.labeled},
                    {"unlabeled", c.dataset.unlabeled}, {"test", c.dataset.test},
                    {"spread", c.dataset.spread},       {"scale_features", c.dataset.scale_features}};
    j["shard"] = {{"num_clients", c.shard.num_clients},
                  {"dirichlet_alpha", c.shard.dirichlet_alpha},
                  {"streaming_steps", c.shard.streaming_steps},
                  {"stream_alpha", c.shard.stream_alpha}};
    j["model"] = {{"hidden", c.model.hidden_dims}, {"activation", std::string(to_string(c.model.activation))}};
    j["variant"] = {{"kind", std::string(to_string(c.variant.kind))},
                    {"ema_alpha", c.variant.ema_alpha},
                    {"local_ema_alpha", c.variant.local_ema_alpha},
                    {"teacher_tracks_student", c.variant.teacher_tracks_student}};
    if (c.iidness_prior_auto) j["variant"]["iidness_prior"] = "auto";
    else j["variant"]["iidness_prior"] = c.variant.iidness_prior;
    j["training"] = {{"rounds", c.rounds},
                     {"participation_rate", c.plan.participation_rate},
                     {"local_epochs", c.plan.local_epochs},
                     {"server_epochs", c.plan.server_epochs},
                     {"topology", std::string(to_string(c.plan.topology))},
                     {"labeled_batch", c.plan.labeled_batch},
                     {"unlabeled_batch", c.plan.unlabeled_batch},
                     {"server_batch", c.plan.server_batch},
                     {"client_lr", c.plan.client_lr},
                     {"server_lr", c.plan.server_lr},
                     {"momentum", c.plan.momentum},
                     {"weight_decay", c.plan.weight_decay},
                     {"tau", c.hyper.tau},
                     {"lambda_u", c.hyper.lambda_u},
                     {"mu", c.hyper.mu},
                     {"bytes_per_param", c.bytes_per_param}};
    j["augment"] = {{"weak_noise_sigma", c.augment.weak_noise_sigma},
                    {"weak_shift_fraction", c.augment.weak_shift_fraction},
                    {"strong_noise_sigma", c.augment.strong_noise_sigma},
                    {"strong_mask_prob", c.augment.strong_mask_prob}};
    j["metrics"] = {{"window_fraction", c.metrics.window_fraction},
                    {"accuracy_threshold", c.metrics.accuracy_threshold}};
    std::vector<std::string> kinds;
    for (auto k : c.sweep.variants) kinds.emplace_back(to_string(k));
    j["sweep"] = {{"alphas", c.sweep.alphas}, {"variants", kinds}};
    j["trials"] = c.trials;
    j["seed"] = c.seed;
    j["output"] = c.output;
    return j;
}

/// Labeled / unlabeled / test index pools over one dataset.
struct DataSplit {
    Dataset data;
    Dataset test;
    std::vector<Index> labeled;
    std::vector<Index> unlabeled;
};

namespace detail {

/// Takes `count` indices from per-class stacks round-robin over classes, so
/// the taken set is as class-balanced as the stock allows.
inline std::vector<Index> take_stratified(std::vector<std::vector<Index>>& by_class, std::size_t count) {
    std::vector<Index> out;
    while (out.size() < count) {
        bool any = false;
        for (auto& stack : by_class) {
            if (out.size() == count) break;
            if (stack.empty()) continue;
            out.push_back(stack.back());
            stack.pop_back();
            any = true;
        }
        if (!any) throw ConfigError("dataset too small for the requested labeled/test sizes");
    }
    return out;
}

}  // namespace detail

inline DataSplit prepare_data(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    DataSplit split;
    if (d.source == "blobs") {
        const std::size_t total = d.labeled + d.unlabeled + d.test;
        const std::size_t per_class = (total + d.num_classes - 1) / d.num_classes;
        split.data = gen_blobs(d.num_classes, d.dim, per_class, d.spread, derive_seed(cfg.seed, "data"));
    } else {
        split.data = load_csv(d.path, d.num_classes, d.scale_features);
    }

    Rng rng(derive_seed(cfg.seed, "split"));
    std::vector<std::vector<Index>> by_class(d.num_classes);
    for (Index i = 0; i < split.data.size(); ++i) by_class[static_cast<std::size_t>(split.data.labels[i])].push_back(i);
    for (auto& v : by_class) rng.shuffle(v);

    if (!d.test_path.empty()) {
        split.test = load_csv(d.test_path, d.num_classes, d.scale_features);
    } else {
        split.test = subset(split.data, detail::take_stratified(by_class, d.test));
    }
    split.labeled = detail::take_stratified(by_class, d.labeled);
    for (auto& v : by_class) split.unlabeled.insert(split.unlabeled.end(), v.begin(), v.end());
    std::sort(split.unlabeled.begin(), split.unlabeled.end());
    rng.shuffle(split.unlabeled);
    if (d.unlabeled > 0 && split.unlabeled.size() > d.unlabeled) split.unlabeled.resize(d.unlabeled);
    std::sort(split.unlabeled.begin(), split.unlabeled.end());
    std::sort(split.labeled.begin(), split.labeled.end());
    if (split.test.dim() != split.data.dim()) throw ConfigError("test set feature width differs from training data");
    return split;
}

/// A fully built trial: the federation, its initial server state and the
/// seeds it was derived from.
struct TrialSetup {
    Federation fed;
    ServerState server;
    Seed init_seed = 0;
    Seed shard_seed = 0;
};

inline TrialSetup prepare_trial(const ExperimentConfig& cfg, const DataSplit& split, std::size_t trial) {
    TrialSetup t;
    auto& fed = t.fed;
    fed.spec = cfg.model;
    fed.spec.input_dim = split.data.dim();
    fed.spec.num_classes = cfg.dataset.num_classes;
    fed.data = split.data;
    fed.test = split.test;
    fed.variant = cfg.variant;
    fed.hyper = cfg.hyper;
    fed.plan = cfg.plan;
    fed.augment = cfg.augment;
    fed.bytes_per_param = cfg.bytes_per_param;
    fed.selection_seed = derive_seed(cfg.seed, "select", trial);
    fed.augment_seed = derive_seed(cfg.seed, "augment", trial);
    t.init_seed = derive_seed(cfg.seed, "init", trial);
    t.shard_seed = derive_seed(cfg.seed, "shard", trial);

    ShardPlan plan;
    plan.num_clients = cfg.shard.num_clients;
    plan.dirichlet_alpha = cfg.shard.dirichlet_alpha;
    plan.server_holds_labels = labels_at_server(cfg.plan.topology);
    plan.seed = t.shard_seed;
    Sharding sh = dirichlet_shard(split.data, plan, split.labeled, split.unlabeled);
    if (cfg.shard.streaming_steps >= 1) {
        for (auto& s : sh.clients) {
            const Seed ss = derive_seed(cfg.seed, "stream", trial, s.client_id);
            s = cfg.shard.stream_alpha > 0.0
                    ? make_stream_schedule(std::move(s), split.data, cfg.shard.streaming_steps, cfg.shard.stream_alpha, ss)
                    : make_stream_schedule(std::move(s), cfg.shard.streaming_steps, ss);
        }
    }
    fed.shards = std::move(sh.clients);

    if (cfg.iidness_prior_auto) {
        double beta = 0.0;
        for (const auto& s : fed.shards) beta += kl_to_uniform(normalized(label_histogram(split.data, s.unlabeled_idx)));
        fed.variant.iidness_prior = beta / static_cast<double>(fed.shards.size());
    }

    std::optional<Dataset> pool;
    if (plan.server_holds_labels) pool = subset(split.data, sh.server_labeled);
    t.server = initial_server_state(fed, init_params(fed.spec, t.init_seed), std::move(pool));
    return t;
}

struct TrialSummary {
    std::size_t trial = 0;
    Seed trial_seed = 0;
    double final_accuracy = 0.0;
    std::optional<double> final_teacher_accuracy;
    double best_accuracy = 0.0;
    std::optional<std::size_t> rounds_to_threshold;
    std::size_t downlink_bytes = 0;
    std::size_t uplink_bytes = 0;
    std::size_t downlink_models = 0;
    std::size_t uplink_models = 0;
    std::size_t teacher_rounds = 0;
    double trailing_accuracy_std = 0.0;
    double trailing_accuracy_mean = 0.0;
    std::optional<double> trailing_kl_ratio;
    double iidness_prior = 0.0;
};

struct TrialResult {
    TrialSummary summary;
    std::vector<RoundReport> reports;
    CommLedger ledger;
};

inline TrialSummary summarize(const ExperimentConfig& cfg, std::size_t trial, Seed trial_seed,
                              std::span<const RoundReport> reports, const CommLedger& ledger, double beta) {
    TrialSummary s;
    s.trial = trial;
    s.trial_seed = trial_seed;
    s.iidness_prior = beta;
    s.final_accuracy = reports.back().eval_accuracy_student;
    s.final_teacher_accuracy = reports.back().eval_accuracy_teacher;
    for (const auto& r : reports) {
        s.best_accuracy = std::max(s.best_accuracy, r.eval_accuracy_student);
        if (!s.rounds_to_threshold && r.eval_accuracy_student >= cfg.metrics.accuracy_threshold)
            s.rounds_to_threshold = r.round + 1;
        s.teacher_rounds += r.send_teacher.value_or(false);
    }
    const auto tot = ledger.totals();
    s.downlink_bytes = tot.downlink_bytes;
    s.uplink_bytes = tot.uplink_bytes;
    s.downlink_models = tot.downlink_models;
    s.uplink_models = tot.uplink_models;

    const std::size_t w = trailing_window(reports.size(), cfg.metrics.window_fraction);
    s.trailing_accuracy_std = stability_stats(reports, w).rolling_std;
    double acc = 0.0, ratio = 0.0;
    std::size_t n_ratio = 0;
    for (const auto& r : reports.last(w)) {
        acc += r.eval_accuracy_student;
        if (r.kl_ratio_mean) {
            ratio += *r.kl_ratio_mean;
            ++n_ratio;
        }
    }
    s.trailing_accuracy_mean = acc / static_cast<double>(w);
    if (n_ratio > 0) s.trailing_kl_ratio = ratio / static_cast<double>(n_ratio);
    return s;
}

inline Json to_json(const TrialSummary& s) {
    Json j;
    j["trial"] = s.trial;
    j["trial_seed"] = s.trial_seed;
    j["final_accuracy"] = s.final_accuracy;
    j["final_teacher_accuracy"] = s.final_teacher_accuracy ? Json(*s.final_teacher_accuracy) : Json(nullptr);
    j["best_accuracy"] = s.best_accuracy;
    j["rounds_to_threshold"] = s.rounds_to_threshold ? Json(*s.rounds_to_threshold) : Json(nullptr);
    j["downlink_bytes"] = s.downlink_bytes;
    j["uplink_bytes"] = s.uplink_bytes;
    j["downlink_models"] = s.downlink_models;
    j["uplink_models"] = s.uplink_models;
    j["teacher_rounds"] = s.teacher_rounds;
    j["trailing_accuracy_mean"] = s.trailing_accuracy_mean;
    j["trailing_accuracy_std"] = s.trailing_accuracy_std;
    j["trailing_kl_ratio"] = s.trailing_kl_ratio ? Json(*s.trailing_kl_ratio) : Json(nullptr);
    j["iidness_prior"] = s.iidness_prior;
    return j;
}

inline TrialResult run_trial(const ExperimentConfig& cfg, const DataSplit& split, std::size_t trial) {
    TrialSetup setup = prepare_trial(cfg, split, trial);
    RunTrack track;
    TrialResult out;
    out.reports.reserve(cfg.rounds);
    try {
        for (std::size_t r = 0; r < cfg.rounds; ++r) out.reports.push_back(run_round(setup.server, setup.fed, track).report);
    } catch (const Error& e) {
        throw Error("trial " + std::to_string(trial) + ": " + e.what());
    }
    out.ledger = std::move(track.ledger);
    out.summary = summarize(cfg, trial, setup.shard_seed, out.reports, out.ledger, setup.fed.variant.iidness_prior);
    return out;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Sample standard deviation; 0 for a single value.
inline MeanStd mean_std(std::span<const double> v) {
    MeanStd m;
    if (v.empty()) return m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return m;
}

struct ExperimentResult {
    std::vector<TrialResult> trials;
    MeanStd final_accuracy;
    MeanStd trailing_kl_ratio;

    std::vector<TrialSummary> summaries() const {
        std::vector<TrialSummary> s;
        for (const auto& t : trials) s.push_back(t.summary);
        return s;
    }
};

struct RunOptions {
    bool write_outputs = true;
    std::ostream* log = nullptr;
};

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + p.string());
    out << text;
}

}  // namespace detail

/// Runs every trial of `cfg`. Trial i draws sharding, initialisation,
/// client selection and augmentation from independent seeds derived from
/// (cfg.seed, i, purpose).
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    cfg.validate();
    const DataSplit split = prepare_data(cfg);
    ExperimentResult res;
    for (std::size_t i = 0; i < cfg.trials; ++i) res.trials.push_back(run_trial(cfg, split, i));

    std::vector<double> finals, ratios;
    for (const auto& t : res.trials) {
        finals.push_back(t.summary.final_accuracy);
        if (t.summary.trailing_kl_ratio) ratios.push_back(*t.summary.trailing_kl_ratio);
    }
    res.final_accuracy = mean_std(finals);
    res.trailing_kl_ratio = mean_std(ratios);

    if (opts.write_outputs) {
        namespace fs = std::filesystem;
        const fs::path root(cfg.output);
        fs::create_directories(root);
        detail::write_text(root / "config.resolved.json", to_json(cfg).dump(2) + "\n");
        Json summary;
        summary["variant"] = std::string(to_string(cfg.variant.kind));
        summary["dirichlet_alpha"] = cfg.shard.dirichlet_alpha;
        summary["final_accuracy_mean"] = res.final_accuracy.mean;
        summary["final_accuracy_std"] = res.final_accuracy.std;
        summary["trailing_kl_ratio_mean"] = res.trailing_kl_ratio.mean;
        summary["trials"] = Json::array();
        for (const auto& t : res.trials) {
            const fs::path dir = root / ("trial_" + std::to_string(t.summary.trial));
            fs::create_directories(dir);
            std::ostringstream rounds, diag, tx;
            write_rounds_csv(rounds, t.reports);
            write_diagnostics_csv(diag, t.reports);
            write_transmissions_csv(tx, t.ledger);
            detail::write_text(dir / "rounds.csv", rounds.str());
            detail::write_text(dir / "diagnostics.csv", diag.str());
            detail::write_text(dir / "transmissions.csv", tx.str());
            detail::write_text(dir / "summary.json", to_json(t.summary).dump(2) + "\n");
            summary["trials"].push_back(to_json(t.summary));
        }
        detail::write_text(root / "summary.json", summary.dump(2) + "\n");
    }
    if (opts.log) {
        std::ostringstream line;
        line << to_string(cfg.variant.kind) << " alpha=" << format_double(cfg.shard.dirichlet_alpha)
             << " final accuracy " << format_double(res.final_accuracy.mean) << " +/- "
             << format_double(res.final_accuracy.std) << " over " << cfg.trials << " trial(s)\n";
        *opts.log << line.str();
    }
    return res;
}

struct SweepRow {
    VariantKind variant = VariantKind::fedswitch;
    double alpha = 0.0;
    MeanStd final_accuracy;
    MeanStd trailing_kl_ratio;
    std::size_t downlink_bytes = 0;
    std::size_t uplink_bytes = 0;
};

inline std::string sweep_dir_name(VariantKind v, double alpha) {
    return std::string(to_string(v)) + "_alpha_" + format_double(alpha);
}

/// Cartesian product variants x alphas; each cell is a full run_experiment
/// written to <output>/<variant>_alpha_<alpha>/, plus <output>/grid.csv.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::vector<double>& alphas,
                                       const std::vector<VariantKind>& variants, const RunOptions& opts = {}) {
    if (alphas.empty() || variants.empty()) throw ConfigError("run_sweep: alphas and variants must be non-empty");
    std::vector<SweepRow> rows;
    for (auto v : variants) {
        for (double a : alphas) {
            ExperimentConfig cfg = base;
            cfg.variant.kind = v;
            cfg.shard.dirichlet_alpha = a;
            cfg.output = (std::filesystem::path(base.output) / sweep_dir_name(v, a)).string();
            const auto res = run_experiment(cfg, opts);
            SweepRow row{v, a, res.final_accuracy, res.trailing_kl_ratio, 0, 0};
            for (const auto& t : res.trials) {
                row.downlink_bytes += t.summary.downlink_bytes;
                row.uplink_bytes += t.summary.uplink_bytes;
            }
            rows.push_back(row);
        }
    }
    if (opts.write_outputs) {
        std::filesystem::create_directories(base.output);
        std::ostringstream grid;
        grid << "variant,alpha,final_acc_mean,final_acc_std,kl_ratio_mean,kl_ratio_std,downlink_bytes,uplink_bytes\n";
        for (const auto& r : rows)
            grid << to_string(r.variant) << ',' << format_double(r.alpha) << ',' << format_double(r.final_accuracy.mean)
                 << ',' << format_double(r.final_accuracy.std) << ',' << format_double(r.trailing_kl_ratio.mean) << ','
                 << format_double(r.trailing_kl_ratio.std) << ',' << r.downlink_bytes << ',' << r.uplink_bytes << '\n';
        detail::write_text(std::filesystem::path(base.output) / "grid.csv", grid.str());
    }
    return rows;
}

}  // namespace fedswitch
