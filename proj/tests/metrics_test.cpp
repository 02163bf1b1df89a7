#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fedswitch/metrics.hpp"

using namespace fedswitch;

TEST(FormatDouble, ShortestRoundTrip) {
    EXPECT_EQ(format_double(0.1), "0.1");
    EXPECT_EQ(format_double(2.0), "2");
    const double v = std::log(10.0);
    EXPECT_EQ(std::stod(format_double(v)), v);
}

TEST(Evaluate, UniformModelPicksClassZero) {
    ModelSpec s{2, {}, 4};
    ParamVector p{std::vector<double>(s.param_count(), 0.0), s.layout_hash()};
    Dataset d{Matrix(8, 2, 0.3), {0, 1, 0, 3, 2, 0, 1, 1}, 4};
    EXPECT_DOUBLE_EQ(evaluate(p, s, d), 3.0 / 8.0);
}

TEST(Evaluate, MemorizedSingleExample) {
    ModelSpec s{1, {}, 3};
    ParamVector p{std::vector<double>(s.param_count(), 0.0), s.layout_hash()};
    p.values[3 + 2] = 5.0;  // bias of class 2
    Dataset d{Matrix(1, 1, 0.7), {2}, 3};
    EXPECT_EQ(evaluate(p, s, d), 1.0);
    Dataset empty{Matrix(0, 1), {}, 3};
    EXPECT_THROW(evaluate(p, s, empty), Error);
}

TEST(Evaluate, RandomLabelsNearChance) {
    ModelSpec s{6, {8}, 10};
    Rng rng(4);
    Dataset d{Matrix(1000, 6), std::vector<int>(1000), 10};
    for (auto& v : d.inputs.data) v = rng.normal();
    for (auto& y : d.labels) y = static_cast<int>(rng.below(10));
    EXPECT_NEAR(evaluate(init_params(s, 2), s, d), 0.10, 0.03);
}

TEST(Ledger, BytesAndCounts) {
    CommLedger l;
    record_transmission(l, 0, Direction::downlink, ModelRole::student, 3, 100);
    record_transmission(l, 0, Direction::downlink, ModelRole::teacher, 3, 100);
    record_transmission(l, 0, Direction::uplink, ModelRole::student, 3, 100);
    record_transmission(l, 0, Direction::uplink, ModelRole::kl_scalars, 3, 2);
    record_transmission(l, 1, Direction::downlink, ModelRole::student, 5, 100);
    ASSERT_EQ(l.rounds.size(), 2u);
    EXPECT_EQ(l.rounds[0].downlink_models, 2u);
    EXPECT_EQ(l.rounds[0].downlink_bytes, 1600u);
    EXPECT_EQ(l.rounds[0].uplink_models, 1u);
    EXPECT_EQ(l.rounds[0].uplink_bytes, 800u);
    EXPECT_EQ(l.rounds[0].uplink_scalar_bytes, 16u);
    EXPECT_EQ(l.totals().downlink_models, 3u);
    EXPECT_EQ(l.model_count(Direction::downlink, ModelRole::teacher), 1u);
    EXPECT_EQ(l.log[3].bytes, 16u);
}

TEST(Ledger, VariantRoundShapes) {
    const std::size_t m = 5, P = 10;
    auto round = [&](bool teacher_down, bool teacher_up) {
        CommLedger l;
        for (std::size_t k = 0; k < m; ++k) {
            record_transmission(l, 0, Direction::downlink, ModelRole::student, k, P);
            if (teacher_down) record_transmission(l, 0, Direction::downlink, ModelRole::teacher, k, P);
            record_transmission(l, 0, Direction::uplink, ModelRole::student, k, P);
            if (teacher_up) record_transmission(l, 0, Direction::uplink, ModelRole::teacher, k, P);
            record_transmission(l, 0, Direction::uplink, ModelRole::kl_scalars, k, 2);
        }
        return l.totals();
    };
    EXPECT_EQ(round(true, true).uplink_models, 2 * m);
    EXPECT_EQ(round(false, false).downlink_models, m);
    EXPECT_EQ(round(false, false).uplink_models, m);
    EXPECT_EQ(round(true, false).downlink_models, 2 * m);
    EXPECT_EQ(round(true, false).uplink_models, m);
}

TEST(Ledger, Validation) {
    CommLedger l;
    EXPECT_THROW(record_transmission(l, 0, Direction::downlink, ModelRole::kl_scalars, 0, 2), Error);
    l.bytes_per_param = 2;
    EXPECT_THROW(record_transmission(l, 0, Direction::uplink, ModelRole::student, 0, 2), Error);
    CommLedger f;
    f.bytes_per_param = 4;
    record_transmission(f, 2, Direction::uplink, ModelRole::student, 0, 10);
    EXPECT_EQ(f.totals().uplink_bytes, 40u);
    EXPECT_THROW(record_transmission(f, 1, Direction::uplink, ModelRole::student, 0, 10), Error);
}

TEST(KlRatio, WorkedExamples) {
    const std::vector<std::size_t> ids{0, 1, 2};
    std::vector<double> skew{6, 2, 1, 1, 0, 0, 0, 0, 0, 0};
    std::vector<double> one_class(10, 0.0);
    one_class[4] = 30.0;
    const std::vector<std::vector<double>> pseudo{skew, std::vector<double>(10, 3.0), one_class};
    const std::vector<std::vector<double>> truth{skew, one_class, one_class};
    const auto r = kl_ratio_stats(ids, pseudo, truth);
    EXPECT_NEAR(*r.clients[0].ratio, 1.0, 1e-12);
    EXPECT_NEAR(*r.clients[1].ratio, 0.0, 1e-12);
    EXPECT_NEAR(r.clients[1].ground_truth_kl, std::log(10.0), 1e-12);
    EXPECT_NEAR(r.clients[2].pseudo_kl, 2.302585, 1e-6);
    EXPECT_NEAR(*r.clients[2].ratio, 1.0, 1e-12);
    EXPECT_NEAR(*r.mean_ratio, 2.0 / 3.0, 1e-12);
}

TEST(KlRatio, UniformTruthExcluded) {
    const std::vector<std::size_t> ids{0, 1};
    const std::vector<std::vector<double>> pseudo{{1, 0}, {3, 1}};
    const std::vector<std::vector<double>> truth{{5, 5}, {3, 1}};
    const auto r = kl_ratio_stats(ids, pseudo, truth);
    EXPECT_FALSE(r.clients[0].ratio);
    EXPECT_NEAR(*r.mean_ratio, 1.0, 1e-12);
    EXPECT_FALSE(kl_ratio_stats(std::vector<std::size_t>{0}, std::vector<std::vector<double>>{{1, 0}},
                                std::vector<std::vector<double>>{{1, 1}})
                     .mean_ratio);
    EXPECT_THROW(kl_ratio_stats(ids, pseudo, std::vector<std::vector<double>>{{1, 1}}), ShapeError);
}

TEST(KlRatio, SilentClientHasNoRatio) {
    const std::vector<std::size_t> ids{0, 1};
    const std::vector<std::vector<double>> pseudo{{0, 0, 0}, {4, 0, 0}};
    const std::vector<std::vector<double>> truth{{3, 0, 0}, {4, 0, 0}};
    const auto r = kl_ratio_stats(ids, pseudo, truth);
    EXPECT_FALSE(r.clients[0].ratio);
    EXPECT_NEAR(*r.mean_ratio, 1.0, 1e-12);
}

TEST(Stability, WorkedExamples) {
    const std::vector<double> flat(10, 0.6);
    auto s = stability_stats(flat, 5);
    EXPECT_EQ(s.rolling_std, 0.0);
    EXPECT_EQ(s.max_drawdown, 0.0);
    const std::vector<double> alt{0.5, 0.7, 0.5, 0.7, 0.5, 0.7};
    EXPECT_NEAR(stability_stats(alt, 4).rolling_std, 0.1, 1e-12);
    EXPECT_NEAR(stability_stats(alt, 4).max_drawdown, 0.2, 1e-12);
    const std::vector<double> up{0.1, 0.2, 0.3, 0.4};
    EXPECT_EQ(stability_stats(up, 2).max_drawdown, 0.0);
    EXPECT_THROW(stability_stats(up, 0), ConfigError);
    EXPECT_THROW(stability_stats(up, 5), ConfigError);
}

TEST(Stability, DrawdownIsPeakToTrough) {
    const std::vector<double> acc{0.3, 0.8, 0.6, 0.9, 0.4, 0.85};
    EXPECT_NEAR(stability_stats(acc, 6).max_drawdown, 0.5, 1e-12);
}

TEST(Stability, ReportsOverloadUsesStudentAccuracy) {
    std::vector<RoundReport> reps(4);
    const double acc[] = {0.5, 0.7, 0.5, 0.7};
    for (std::size_t i = 0; i < 4; ++i) {
        reps[i].eval_accuracy_student = acc[i];
        reps[i].eval_accuracy_teacher = 0.9;
    }
    EXPECT_NEAR(stability_stats(reps, 4).rolling_std, 0.1, 1e-12);
}

TEST(TrailingWindow, Rounding) {
    EXPECT_EQ(trailing_window(300, 0.125), 38u);
    EXPECT_EQ(trailing_window(4, 0.01), 1u);
    EXPECT_EQ(trailing_window(10, 1.0), 10u);
}

TEST(Csv, RoundsHeaderAndRows) {
    std::vector<RoundReport> reps(2);
    reps[0].eval_accuracy_student = 0.5;
    reps[0].send_teacher = true;
    reps[0].ledger_delta.downlink_bytes = 160;
    reps[1].round = 1;
    reps[1].eval_accuracy_student = 0.25;
    reps[1].eval_accuracy_teacher = 0.75;
    std::ostringstream os;
    write_rounds_csv(os, reps);
    EXPECT_EQ(os.str(),
              "round,acc_student,acc_teacher,dkl_T,dkl_S,send_teacher,downlink_bytes,uplink_bytes\n"
              "0,0.5,,0,0,1,160,0\n"
              "1,0.25,0.75,0,0,,0,0\n");
}

TEST(Csv, TransmissionsLog) {
    CommLedger l;
    record_transmission(l, 0, Direction::uplink, ModelRole::kl_scalars, 4, 2);
    std::ostringstream os;
    write_transmissions_csv(os, l);
    EXPECT_EQ(os.str(), "round,direction,model_role,client_id,num_params,bytes\n0,uplink,kl_scalars,4,2,16\n");
}
