#pragma once

// Accuracy, the transmission log / communication ledger, KL-ratio analysis,
// stability statistics and CSV emission.

#include <charconv>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedswitch/data.hpp"
#include "fedswitch/error.hpp"
#include "fedswitch/nn.hpp"
#include "fedswitch/ssl.hpp"

namespace fedswitch {

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return ec == std::errc{} ? std::string(buf, ptr) : std::string("nan");
}

/// Fraction of argmax predictions (lowest index on ties) equal to the label.
inline double evaluate(const ParamVector& params, const ModelSpec& spec, const Dataset& test) {
    detail::require(test.size() > 0, "evaluate: empty test set");
    const Matrix logits = forward_logits(params, spec, test.inputs);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < test.size(); ++r) hits += argmax_lowest(logits.row(r)) == test.labels[r];
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

enum class Direction { downlink, uplink };
enum class ModelRole { student, teacher, kl_scalars };

inline std::string_view to_string(Direction d) { return d == Direction::downlink ? "downlink" : "uplink"; }
inline std::string_view to_string(ModelRole r) {
    switch (r) {
        case ModelRole::student: return "student";
        case ModelRole::teacher: return "teacher";
        case ModelRole::kl_scalars: return "kl_scalars";
    }
    return "?";
}

struct Transmission {
    std::size_t round = 0;
    Direction direction = Direction::downlink;
    ModelRole role = ModelRole::student;
    std::size_t client_id = 0;
    std::size_t num_params = 0;
    std::size_t bytes = 0;
};

/// Per-round model traffic. Scalar side-channel bytes (the two KL values)
/// are kept apart so that model bytes = params * bytes_per_param * models.
struct LedgerEntry {
    std::size_t round = 0;
    std::size_t downlink_models = 0;
    std::size_t downlink_bytes = 0;
    std::size_t uplink_models = 0;
    std::size_t uplink_bytes = 0;
    std::size_t uplink_scalar_bytes = 0;
};

struct CommLedger {
    std::size_t bytes_per_param = 8;
    std::vector<Transmission> log;
    std::vector<LedgerEntry> rounds;

    LedgerEntry& entry_for(std::size_t round) {
        if (rounds.empty() || rounds.back().round != round) {
            detail::require(rounds.empty() || rounds.back().round < round, "ledger: rounds must be appended in order");
            rounds.push_back(LedgerEntry{round});
        }
        return rounds.back();
    }

    LedgerEntry totals() const {
        LedgerEntry t;
        for (const auto& e : rounds) {
            t.downlink_models += e.downlink_models;
            t.downlink_bytes += e.downlink_bytes;
            t.uplink_models += e.uplink_models;
            t.uplink_bytes += e.uplink_bytes;
            t.uplink_scalar_bytes += e.uplink_scalar_bytes;
        }
        return t;
    }

    /// Models of `role` moved in `dir`, summed over the whole log.
    std::size_t model_count(Direction dir, ModelRole role) const {
        std::size_t n = 0;
        for (const auto& t : log) n += t.direction == dir && t.role == role;
        return n;
    }
};

inline CommLedger& record_transmission(CommLedger& ledger, std::size_t round, Direction dir, ModelRole role,
                                       std::size_t client_id, std::size_t num_params) {
    detail::require(ledger.bytes_per_param == 4 || ledger.bytes_per_param == 8, "ledger: bytes_per_param must be 4 or 8");
    detail::require(role != ModelRole::kl_scalars || dir == Direction::uplink, "ledger: KL scalars only travel uplink");
    const std::size_t bytes = num_params * ledger.bytes_per_param;
    ledger.log.push_back({round, dir, role, client_id, num_params, bytes});
    auto& e = ledger.entry_for(round);
    if (role == ModelRole::kl_scalars) {
        e.uplink_scalar_bytes += bytes;
    } else if (dir == Direction::downlink) {
        ++e.downlink_models;
        e.downlink_bytes += bytes;
    } else {
        ++e.uplink_models;
        e.uplink_bytes += bytes;
    }
    return ledger;
}

struct RoundReport {
    std::size_t round = 0;
    double eval_accuracy_student = 0.0;
    std::optional<double> eval_accuracy_teacher;
    double dkl_teacher = 0.0;
    double dkl_student = 0.0;
    std::optional<bool> send_teacher;
    LedgerEntry ledger_delta;

    // Diagnostics that never leave the simulator (they use true labels).
    std::optional<double> kl_ratio_mean;
    double pseudo_kl_mean = 0.0;
    double truth_kl_mean = 0.0;
    double dkl_teacher_sum = 0.0;
    double dkl_student_sum = 0.0;
    bool teacher_proxy = false;
};

struct KlRatioStat {
    std::size_t client_id = 0;
    double pseudo_kl = 0.0;
    double ground_truth_kl = 0.0;
    std::optional<double> ratio;
};

struct KlRatioSummary {
    std::vector<KlRatioStat> clients;
    std::optional<double> mean_ratio;
};

/// Per-client KL(pseudo-label distribution || U) / KL(true label histogram || U).
/// The ratio is absent when the client's true histogram is uniform or when
/// the client produced no predictions.
inline KlRatioSummary kl_ratio_stats(std::span<const std::size_t> client_ids,
                                     std::span<const std::vector<double>> pseudo_dists,
                                     std::span<const std::vector<double>> true_histograms) {
    if (client_ids.size() != pseudo_dists.size() || client_ids.size() != true_histograms.size())
        throw ShapeError("kl_ratio_stats: argument lengths differ");
    KlRatioSummary out;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < client_ids.size(); ++k) {
        KlRatioStat s;
        s.client_id = client_ids[k];
        const auto mass = [](const std::vector<double>& h) { return std::accumulate(h.begin(), h.end(), 0.0); };
        if (mass(pseudo_dists[k]) <= 0.0 || mass(true_histograms[k]) <= 0.0) {
            out.clients.push_back(s);
            continue;
        }
        s.pseudo_kl = kl_to_uniform(normalized(pseudo_dists[k]));
        s.ground_truth_kl = kl_to_uniform(normalized(true_histograms[k]));
        if (s.ground_truth_kl > 1e-12) {
            s.ratio = s.pseudo_kl / s.ground_truth_kl;
            sum += *s.ratio;
            ++n;
        }
        out.clients.push_back(s);
    }
    if (n > 0) out.mean_ratio = sum / static_cast<double>(n);
    return out;
}

struct StabilityStats {
    double rolling_std = 0.0;
    double max_drawdown = 0.0;
};

/// Population standard deviation over the trailing `window` values and the
/// largest peak-to-trough drop over the whole sequence.
inline StabilityStats stability_stats(std::span<const double> accuracy, std::size_t window) {
    if (window == 0) throw ConfigError("stability_stats: window must be >= 1");
    if (window > accuracy.size()) throw ConfigError("stability_stats: window longer than the run");
    StabilityStats s;
    const auto tail = accuracy.last(window);
    double mean = 0.0;
    for (double a : tail) mean += a;
    mean /= static_cast<double>(window);
    double var = 0.0;
    for (double a : tail) var += (a - mean) * (a - mean);
    s.rolling_std = std::sqrt(var / static_cast<double>(window));

    double peak = accuracy.front();
    for (double a : accuracy) {
        peak = std::max(peak, a);
        s.max_drawdown = std::max(s.max_drawdown, peak - a);
    }
    return s;
}

inline StabilityStats stability_stats(std::span<const RoundReport> reports, std::size_t window) {
    std::vector<double> acc;
    acc.reserve(reports.size());
    for (const auto& r : reports) acc.push_back(r.eval_accuracy_student);
    return stability_stats(acc, window);
}

/// Trailing window length for steady-state statistics: `fraction` of the
/// run, at least one round.
inline std::size_t trailing_window(std::size_t rounds, double fraction) {
    const auto w = static_cast<std::size_t>(std::llround(static_cast<double>(rounds) * fraction));
    return std::clamp<std::size_t>(w, 1, std::max<std::size_t>(rounds, 1));
}

inline void write_rounds_csv(std::ostream& os, std::span<const RoundReport> reports) {
    os << "round,acc_student,acc_teacher,dkl_T,dkl_S,send_teacher,downlink_bytes,uplink_bytes\n";
    for (const auto& r : reports) {
        os << r.round << ',' << format_double(r.eval_accuracy_student) << ','
           << (r.eval_accuracy_teacher ? format_double(*r.eval_accuracy_teacher) : "") << ','
           << format_double(r.dkl_teacher) << ',' << format_double(r.dkl_student) << ','
           << (r.send_teacher ? (*r.send_teacher ? "1" : "0") : "") << ',' << r.ledger_delta.downlink_bytes << ','
           << r.ledger_delta.uplink_bytes << '\n';
    }
}

inline void write_diagnostics_csv(std::ostream& os, std::span<const RoundReport> reports) {
    os << "round,kl_ratio_mean,pseudo_kl_mean,truth_kl_mean,dkl_T_sum,dkl_S_sum,teacher_proxy,downlink_models,"
          "uplink_models,uplink_scalar_bytes\n";
    for (const auto& r : reports) {
        os << r.round << ',' << (r.kl_ratio_mean ? format_double(*r.kl_ratio_mean) : "") << ','
           << format_double(r.pseudo_kl_mean) << ',' << format_double(r.truth_kl_mean) << ','
           << format_double(r.dkl_teacher_sum) << ',' << format_double(r.dkl_student_sum) << ','
           << (r.teacher_proxy ? 1 : 0) << ',' << r.ledger_delta.downlink_models << ','
           << r.ledger_delta.uplink_models << ',' << r.ledger_delta.uplink_scalar_bytes << '\n';
    }
}

inline void write_transmissions_csv(std::ostream& os, const CommLedger& ledger) {
    os << "round,direction,model_role,client_id,num_params,bytes\n";
    for (const auto& t : ledger.log)
        os << t.round << ',' << to_string(t.direction) << ',' << to_string(t.role) << ',' << t.client_id << ','
           << t.num_params << ',' << t.bytes << '\n';
}

}  // namespace fedswitch
