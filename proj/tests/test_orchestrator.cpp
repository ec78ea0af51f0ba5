#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "pbnn/orchestrator.hpp"

using namespace pbnn;

namespace {

// Linearly separable 1-D task: label = (x > 0).
Dataset line_dataset(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.2, 1.0);
    Dataset ds;
    ds.inputs = Tensor({n, 1});
    ds.labels.resize(n);
    ds.class_count = 2;
    ds.name = "line";
    for (std::size_t i = 0; i < n; ++i) {
        int label = int(i % 2);
        ds.inputs.data[i] = (label == 1 ? 1.0 : -1.0) * u(rng);
        ds.labels[i] = label;
    }
    return ds;
}

Splits line_splits(std::uint64_t seed) {
    Splits s;
    s.train = line_dataset(64, mix_seed(seed, 1));
    s.val = line_dataset(16, mix_seed(seed, 2));
    s.test = line_dataset(16, mix_seed(seed, 3));
    return s;
}

ExperimentConfig line_config() {
    ExperimentConfig c;
    c.input_shape = {1};
    c.architecture = {LayerSpec::dense(2, Activation::Identity)};
    c.patience = 3;
    c.max_epochs_per_cycle = 60;
    c.batch_size = 16;
    c.optimizer.learning_rate = 0.05;
    c.seed = 11;
    c.candidate.pool_size = 2;
    c.candidate.max_epochs = 5;
    return c;
}

CycleRecord fake_cycle(std::vector<double> val, std::vector<double> test,
                       CycleRecord::Kind kind = CycleRecord::Kind::Neuron) {
    CycleRecord r;
    r.kind = kind;
    r.val_scores = val;
    r.test_scores = test;
    r.train_scores.assign(val.size(), 0.0);
    double best = -1e300;
    for (std::size_t e = 0; e < val.size(); ++e)
        if (val[e] > best) {
            best = val[e];
            r.best_val_epoch = int(e);
        }
    r.cycle_val_score = best;
    r.cycle_test_score = test[std::size_t(r.best_val_epoch)];
    return r;
}

}  // namespace

TEST_CASE("ablation names round-trip and unknown names are rejected") {
    for (auto m : {AblationMode::FullPb, AblationMode::OnlyHead,
                   AblationMode::OnlyBackbone, AblationMode::CcNoPerforation,
                   AblationMode::GdDendrites, AblationMode::BaselineNoDendrites})
        CHECK(ablation_from_name(ablation_name(m)) == m);
    CHECK_THROWS_AS(ablation_from_name("fullpb"), std::invalid_argument);
}

TEST_CASE("make_target builds labels, one-hot rows, or scalar targets") {
    LossTarget ce = make_target(LossKind::CrossEntropySoftmax, {2, 0, 1}, 3);
    CHECK(ce.labels == std::vector<int>{2, 0, 1});

    LossTarget hot = make_target(LossKind::Mse, {2, 0}, 3);
    CHECK(hot.targets.shape == std::vector<std::size_t>{2, 3});
    CHECK(hot.targets.data == std::vector<double>{0, 0, 1, 1, 0, 0});

    LossTarget scalar = make_target(LossKind::Mse, {1, 0, 1}, 1);
    CHECK(scalar.targets.data == std::vector<double>{1, 0, 1});
}

TEST_CASE("sgd steps match the closed form, with and without momentum") {
    OptimizerSettings s;
    s.kind = OptimizerSettings::Kind::Sgd;
    s.learning_rate = 0.1;
    double p = 1.0;
    Optimizer plain(s, 1);
    plain.step({&p}, {2.0});
    CHECK(p == doctest::Approx(0.8).epsilon(1e-12));

    s.momentum = 0.9;
    double q = 1.0;
    Optimizer mom(s, 1);
    mom.step({&q}, {1.0});  // v = 1,   q = 1 - 0.1
    mom.step({&q}, {1.0});  // v = 1.9, q = 0.9 - 0.19
    CHECK(q == doctest::Approx(0.71).epsilon(1e-12));
}

TEST_CASE("adam's first step follows the bias-corrected update") {
    OptimizerSettings s;  // adam defaults
    s.learning_rate = 0.001;
    double p = 0.5, g = 3.0;
    Optimizer opt(s, 1);
    opt.step({&p}, {g});
    // after bias correction the first step is lr * g / (|g| + eps)
    double expect = 0.5 - 0.001 * g / (std::abs(g) + s.eps);
    CHECK(p == doctest::Approx(expect).epsilon(1e-12));

    auto st = opt.flat_state();
    REQUIRE(st.size() == 3);  // t, m, v
    CHECK(st[0] == 1.0);
    CHECK(st[1] == doctest::Approx(0.1 * g).epsilon(1e-12));
    CHECK(st[2] == doctest::Approx(0.001 * g * g).epsilon(1e-12));
}

TEST_CASE("evaluate_score: argmax accuracy on a pass-through network") {
    Network net = build_network({3}, {LayerSpec::dense(3, Activation::Identity)});
    for (std::size_t i = 0; i < 3; ++i) net.layers[0].weights.at2(i, i) = 1.0;
    Dataset ds;
    ds.inputs = Tensor({4, 3}, {0.9, 0.1, 0.0,   //
                                0.0, 1.0, 0.0,   //
                                0.2, 0.3, 0.5,   //
                                0.8, 0.1, 0.1});
    ds.labels = {0, 2, 2, 0};  // sample 1 predicted as class 1: wrong
    ds.class_count = 3;
    CHECK(evaluate_score(net, ds, LossKind::CrossEntropySoftmax, Metric::Accuracy) ==
          doctest::Approx(0.75).epsilon(1e-12));
    Dataset empty;
    CHECK_THROWS_AS(
        evaluate_score(net, empty, LossKind::CrossEntropySoftmax, Metric::Accuracy),
        std::invalid_argument);
}

TEST_CASE("evaluate_score: single-output threshold accuracy and rank auc") {
    Network net = build_network({1}, {LayerSpec::dense(1, Activation::Identity)});
    net.layers[0].weights.data = {1.0};
    Dataset ds;
    ds.inputs = Tensor({4, 1}, {0.1, 0.4, 0.35, 0.8});
    ds.labels = {0, 0, 1, 1};
    ds.class_count = 2;
    // thresholds at 0.5: predictions 0,0,0,1 -> 3 of 4 right
    CHECK(evaluate_score(net, ds, LossKind::Mse, Metric::Accuracy) ==
          doctest::Approx(0.75).epsilon(1e-12));
    // rank pairs: (0.35 vs 0.1) win, (0.35 vs 0.4) loss, 0.8 beats both
    CHECK(evaluate_score(net, ds, LossKind::Mse, Metric::Auc) ==
          doctest::Approx(0.75).epsilon(1e-12));

    Dataset ties = ds;
    ties.inputs.fill(0.5);
    CHECK(evaluate_score(net, ties, LossKind::Mse, Metric::Auc) ==
          doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("ablation modes map onto backprop modes and host filters") {
    CHECK(backprop_mode_for(AblationMode::FullPb, false) == BackpropMode::Standard);
    CHECK(backprop_mode_for(AblationMode::FullPb, true) == BackpropMode::Perforated);
    CHECK(backprop_mode_for(AblationMode::CcNoPerforation, true) ==
          BackpropMode::CcNoPerforation);
    CHECK(backprop_mode_for(AblationMode::GdDendrites, true) ==
          BackpropMode::GdDendrites);
    CHECK(host_filter_for(AblationMode::OnlyHead) == HostFilter::HeadOnly);
    CHECK(host_filter_for(AblationMode::OnlyBackbone) == HostFilter::BackboneOnly);
    CHECK(host_filter_for(AblationMode::FullPb) == HostFilter::All);
}

TEST_CASE("run_neuron_cycle: patience, best-epoch bookkeeping, restore") {
    Splits splits = line_splits(5);
    ExperimentConfig config = line_config();
    Network net = build_network(config.input_shape, config.architecture);
    init_params(net, 7);

    CycleRecord rec = run_neuron_cycle(net, splits, config, 0);
    REQUIRE(!rec.val_scores.empty());
    CHECK(rec.cycle_val_score >= 0.9);

    double max_val = *std::max_element(rec.val_scores.begin(), rec.val_scores.end());
    CHECK(rec.cycle_val_score == max_val);
    CHECK(rec.val_scores[std::size_t(rec.best_val_epoch)] == rec.cycle_val_score);
    CHECK(rec.cycle_test_score == rec.test_scores[std::size_t(rec.best_val_epoch)]);
    if (int(rec.val_scores.size()) < config.max_epochs_per_cycle)
        CHECK(int(rec.val_scores.size()) == rec.best_val_epoch + config.patience + 1);

    // the network handed back is the best-val snapshot
    CHECK(evaluate_score(net, splits.val, config.loss, config.metric) ==
          rec.cycle_val_score);
    CHECK(rec.checkpoint_id.size() == 64);
}

TEST_CASE("run_neuron_cycle: fixed_epochs overrides early stopping") {
    Splits splits = line_splits(6);
    ExperimentConfig config = line_config();
    config.fixed_epochs = 4;
    config.patience = 1;
    Network net = build_network(config.input_shape, config.architecture);
    init_params(net, 8);
    CycleRecord rec = run_neuron_cycle(net, splits, config, 0);
    CHECK(rec.val_scores.size() == 4);
}

TEST_CASE("run_neuron_cycle leaves frozen dendrite inputs untouched") {
    Splits splits = line_splits(9);
    ExperimentConfig config = line_config();
    Network net = build_network(config.input_shape, config.architecture);
    init_params(net, 10);
    DendriteNode dn;
    dn.input_weights = Tensor({1}, {0.4});
    dn.output_weight = 0.3;
    net.layers[0].dendrites[0].push_back(dn);

    std::string before = dendrite_input_digest(net);
    double ow_before = net.layers[0].dendrites[0][0].output_weight;
    run_neuron_cycle(net, splits, config, 1);
    CHECK(dendrite_input_digest(net) == before);
    CHECK(net.layers[0].dendrites[0][0].output_weight != ow_before);
}

TEST_CASE("run_dendrite_cycle: flat scores, zero-init, head-only placement") {
    Splits splits = line_splits(12);
    ExperimentConfig config = line_config();
    config.ablation = AblationMode::OnlyHead;
    config.architecture = {LayerSpec::dense(4, Activation::Tanh),
                           LayerSpec::dense(2, Activation::Identity)};
    Network net = build_network(config.input_shape, config.architecture);
    init_params(net, 13);
    run_neuron_cycle(net, splits, config, 0);
    double val_before = evaluate_score(net, splits.val, config.loss, config.metric);

    DendriteCycleResult dc = run_dendrite_cycle(net, splits, config, 1);
    CHECK(dc.record.kind == CycleRecord::Kind::Dendrite);
    CHECK(dc.record.cycle_val_score == val_before);
    for (double v : dc.record.val_scores) CHECK(v == val_before);

    // head-only: nothing lands on the hidden layer
    for (const auto& unit : net.layers[0].dendrites) CHECK(unit.empty());
    for (const auto& unit : net.layers[1].dendrites) {
        REQUIRE(unit.size() == 1);
        CHECK(unit[0].input_frozen);
        CHECK(unit[0].output_weight == 0.0);
    }
    CHECK(dc.promotions.size() == 2);
    CHECK(!dc.candidate_scores.empty());

    // zero output weights: the model's behavior is unchanged
    CHECK(evaluate_score(net, splits.val, config.loss, config.metric) == val_before);
}

TEST_CASE("run_dendrite_cycle: gd_dendrites promotes unfrozen random dendrites") {
    Splits splits = line_splits(14);
    ExperimentConfig config = line_config();
    config.ablation = AblationMode::GdDendrites;
    Network net = build_network(config.input_shape, config.architecture);
    init_params(net, 15);
    DendriteCycleResult dc = run_dendrite_cycle(net, splits, config, 1);
    CHECK(dc.promotions.size() == 2);
    CHECK(dc.candidate_scores.empty());
    for (const auto& unit : net.layers[0].dendrites) {
        REQUIRE(unit.size() == 1);
        CHECK(!unit[0].input_frozen);
    }
}

TEST_CASE("run_dendrite_cycle refuses the no-dendrite baseline") {
    Splits splits = line_splits(16);
    ExperimentConfig config = line_config();
    config.ablation = AblationMode::BaselineNoDendrites;
    Network net = build_network(config.input_shape, config.architecture);
    CHECK_THROWS_AS(run_dendrite_cycle(net, splits, config, 1),
                    std::invalid_argument);
}

TEST_CASE("run_experiment: baseline runs exactly one neuron cycle") {
    Splits splits = line_splits(17);
    ExperimentConfig config = line_config();
    config.ablation = AblationMode::BaselineNoDendrites;
    ExperimentReport report = run_experiment(config, splits);
    CHECK(report.cycles.size() == 1);
    CHECK(report.dendrites_added == 0);
    CHECK(report.cycles[0].kind == CycleRecord::Kind::Neuron);
    CHECK(report.final_checkpoint_id == report.cycles[0].checkpoint_id);
}

TEST_CASE("run_experiment: cycles alternate and the run is deterministic") {
    Splits splits = line_splits(18);
    ExperimentConfig config = line_config();
    config.max_dendrite_rounds = 2;
    ExperimentReport a = run_experiment(config, splits);
    ExperimentReport b = run_experiment(config, splits);
    CHECK(report_to_json(a, false) == report_to_json(b, false));

    REQUIRE(!a.cycles.empty());
    CHECK(a.cycles[0].kind == CycleRecord::Kind::Neuron);
    for (std::size_t i = 1; i < a.cycles.size(); ++i) {
        auto expect = (i % 2 == 1) ? CycleRecord::Kind::Dendrite
                                   : CycleRecord::Kind::Neuron;
        CHECK(a.cycles[i].kind == expect);
    }
    // dendrite rounds come in (dendrite, neuron) pairs after the first cycle
    CHECK(a.cycles.size() % 2 == 1);
    CHECK(a.first_cycle_test == a.cycles[0].cycle_test_score);
}

TEST_CASE("experiment_score picks the test score at the global best-val epoch") {
    std::vector<CycleRecord> recs;
    recs.push_back(fake_cycle({0.80}, {0.79}));
    recs.push_back(fake_cycle({0.85}, {0.84}));
    recs.push_back(fake_cycle({0.83}, {0.86}));
    auto [best_test, err_red] = experiment_score(recs);
    CHECK(best_test == 0.84);
    CHECK(err_red ==
          doctest::Approx(100.0 * (0.21 - 0.16) / 0.21).epsilon(1e-12));
}

TEST_CASE("experiment_score: single record, val ties keep the earliest epoch") {
    std::vector<CycleRecord> one;
    one.push_back(fake_cycle({0.9}, {0.7}));
    auto [t1, e1] = experiment_score(one);
    CHECK(t1 == 0.7);
    CHECK(e1 == 0.0);

    std::vector<CycleRecord> tie;
    tie.push_back(fake_cycle({0.9, 0.9}, {0.7, 0.3}));
    auto [t2, e2] = experiment_score(tie);
    CHECK(t2 == 0.7);

    CHECK_THROWS_AS(experiment_score({}), std::invalid_argument);
}

TEST_CASE("experiment_score error reduction on the documented pair") {
    std::vector<CycleRecord> recs;
    recs.push_back(fake_cycle({0.86}, {0.8655}));
    recs.push_back(fake_cycle({0.87}, {0.8713}));
    auto [best_test, err_red] = experiment_score(recs);
    CHECK(best_test == 0.8713);
    CHECK(err_red == doctest::Approx(4.312).epsilon(1e-3));
}

TEST_CASE("report_to_json: null tests, stable shape, optional timing") {
    ExperimentReport r;
    CycleRecord rec = fake_cycle({0.5, 0.6}, {0.4, 0.55});
    rec.test_scores[0] = std::numeric_limits<double>::quiet_NaN();
    rec.checkpoint_id = "abc";
    rec.seconds = 1.5;
    r.cycles.push_back(rec);
    r.first_cycle_test = 0.55;

    std::string without = report_to_json(r, false);
    CHECK(without.find("\"seconds\"") == std::string::npos);
    CHECK(without.find("null") != std::string::npos);
    std::string with = report_to_json(r, true);
    CHECK(with.find("\"seconds\"") != std::string::npos);
    CHECK(report_to_json(r, false) == without);
}

TEST_CASE("nearest-rank quartiles of 1..7 and edge cases") {
    Quartiles q = nearest_rank_quartiles({4, 2, 7, 1, 5, 3, 6});
    CHECK(q.min == 1);
    CHECK(q.q1 == 2);
    CHECK(q.q3 == 6);
    CHECK(q.max == 7);

    Quartiles single = nearest_rank_quartiles({3.5});
    CHECK(single.min == 3.5);
    CHECK(single.q1 == 3.5);
    CHECK(single.q3 == 3.5);
    CHECK(single.max == 3.5);
    CHECK_THROWS_AS(nearest_rank_quartiles({}), std::invalid_argument);
}
