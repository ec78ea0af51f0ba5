#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "pbnn/grad.hpp"

using namespace pbnn;

namespace {

Tensor random_tensor(const std::vector<std::size_t>& shape, std::mt19937_64& rng) {
    Tensor t(shape);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : t.data) v = u(rng);
    return t;
}

// Attaches `count` random dendrites to every unit of every hosting layer.
void attach_dendrites(Network& net, std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.8, 0.8);
    for (auto& layer : net.layers)
        for (auto& unit : layer.dendrites)
            for (std::size_t d = 0; d < count; ++d) {
                DendriteNode dn;
                std::vector<std::size_t> ws(layer.weights.shape.begin() + 1,
                                            layer.weights.shape.end());
                dn.input_weights = random_tensor(ws, rng);
                dn.sibling_weights.resize(d);
                for (auto& s : dn.sibling_weights) s = u(rng);
                dn.output_weight = u(rng);
                dn.activation = layer.spec.activation;
                unit.push_back(std::move(dn));
            }
}

LossTarget mse_target(const Tensor& t) {
    LossTarget lt;
    lt.kind = LossKind::Mse;
    lt.targets = t;
    return lt;
}

}  // namespace

TEST_CASE("dense 1->1 identity with mse: dL/dw = 2(wx - t) x") {
    Network net = build_network({1}, {LayerSpec::dense(1, Activation::Identity)});
    double w = 0.7, x = 1.3, t = -0.4;
    net.layers[0].weights.data = {w};
    Tensor batch({1, 1}, {x});
    ForwardCache cache;
    Tensor out = forward(net, batch, RunMode::Eval, 0, &cache);
    LossResult lr = loss_and_grad(mse_target(Tensor({1, 1}, {t})), out);
    GradBuffer gb = backprop_standard(net, cache, lr.output_grad);
    CHECK(gb.layers[0].weights[0] == doctest::Approx(2.0 * (w * x - t) * x).epsilon(1e-12));
}

TEST_CASE("zero output gradient produces all-zero parameter gradients") {
    Network net = build_network({3}, {LayerSpec::dense(4, Activation::Tanh),
                                      LayerSpec::dense(2, Activation::Identity)});
    init_params(net, 1);
    std::mt19937_64 rng(2);
    Tensor batch = random_tensor({5, 3}, rng);
    ForwardCache cache;
    forward(net, batch, RunMode::Eval, 0, &cache);
    Tensor zero({5, 2});
    GradBuffer gb = backprop_standard(net, cache, zero);
    for (const auto& lg : gb.layers) {
        for (double v : lg.weights.data) CHECK(v == 0.0);
        for (double v : lg.bias.data) CHECK(v == 0.0);
    }
}

TEST_CASE("random 3-layer net passes the finite-difference check") {
    Network net = build_network({4}, {LayerSpec::dense(6, Activation::Tanh),
                                      LayerSpec::dense(5, Activation::Sigmoid),
                                      LayerSpec::dense(3, Activation::Identity)});
    init_params(net, 77);
    std::mt19937_64 rng(78);
    Tensor batch = random_tensor({4, 4}, rng);
    LossTarget t;
    t.kind = LossKind::CrossEntropySoftmax;
    t.labels = {0, 2, 1, 0};
    CHECK(finite_diff_check(net, t, batch, false, 1e-5) < 1e-5);
}

TEST_CASE("with zero dendrites perforated equals standard bit-for-bit") {
    Network net = build_network({1, 5, 5},
                                {LayerSpec::conv2d(2, 3, 3, 1, 0, Activation::Relu),
                                 LayerSpec::flatten(),
                                 LayerSpec::dense(3, Activation::Identity)});
    init_params(net, 10);
    std::mt19937_64 rng(11);
    Tensor batch = random_tensor({2, 1, 5, 5}, rng);
    ForwardCache cache;
    Tensor out = forward(net, batch, RunMode::Eval, 0, &cache);
    LossTarget t;
    t.kind = LossKind::CrossEntropySoftmax;
    t.labels = {1, 2};
    LossResult lr = loss_and_grad(t, out);
    GradBuffer a = backprop_standard(net, cache, lr.output_grad);
    GradBuffer b = backprop_perforated(net, cache, lr.output_grad);
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        CHECK(a.layers[li].weights.data == b.layers[li].weights.data);
        CHECK(a.layers[li].bias.data == b.layers[li].bias.data);
    }
}

TEST_CASE("zero-output-weight dendrites leave neuron gradients unchanged") {
    Network bare = build_network({3}, {LayerSpec::dense(4, Activation::Tanh),
                                       LayerSpec::dense(2, Activation::Identity)});
    init_params(bare, 21);
    Network with = bare;
    attach_dendrites(with, 2, 22);
    for (auto& layer : with.layers)
        for (auto& unit : layer.dendrites)
            for (auto& dn : unit) dn.output_weight = 0.0;

    std::mt19937_64 rng(23);
    Tensor batch = random_tensor({4, 3}, rng);
    LossTarget t;
    t.kind = LossKind::CrossEntropySoftmax;
    t.labels = {0, 1, 0, 1};

    ForwardCache c1, c2;
    Tensor o1 = forward(bare, batch, RunMode::Eval, 0, &c1);
    Tensor o2 = forward(with, batch, RunMode::Eval, 0, &c2);
    REQUIRE(o1.data == o2.data);
    GradBuffer g1 = backprop_standard(bare, c1, loss_and_grad(t, o1).output_grad);
    GradBuffer g2 = backprop_perforated(with, c2, loss_and_grad(t, o2).output_grad);
    for (std::size_t li = 0; li < bare.layers.size(); ++li) {
        CHECK(g1.layers[li].weights.data == g2.layers[li].weights.data);
        CHECK(g1.layers[li].bias.data == g2.layers[li].bias.data);
    }
}

TEST_CASE("perforated gradients match finite differences of the detached graph") {
    Network net = build_network({3}, {LayerSpec::dense(4, Activation::Tanh),
                                      LayerSpec::dense(2, Activation::Identity)});
    init_params(net, 31);
    attach_dendrites(net, 1, 32);
    std::mt19937_64 rng(33);
    Tensor batch = random_tensor({4, 3}, rng);
    LossTarget t;
    t.kind = LossKind::CrossEntropySoftmax;
    t.labels = {0, 1, 1, 0};
    CHECK(finite_diff_check(net, t, batch, true, 1e-5) < 1e-5);
}

TEST_CASE("cc_no_perforation deltas differ from perforated ones") {
    Network net = build_network({3}, {LayerSpec::dense(4, Activation::Tanh),
                                      LayerSpec::dense(2, Activation::Identity)});
    init_params(net, 41);
    attach_dendrites(net, 1, 42);  // nonzero input and output weights
    std::mt19937_64 rng(43);
    Tensor batch = random_tensor({4, 3}, rng);
    ForwardCache cache;
    Tensor out = forward(net, batch, RunMode::Eval, 0, &cache);
    LossTarget t;
    t.kind = LossKind::CrossEntropySoftmax;
    t.labels = {0, 1, 1, 0};
    LossResult lr = loss_and_grad(t, out);
    GradBuffer perf = backprop(net, cache, lr.output_grad, BackpropMode::Perforated);
    GradBuffer thru = backprop(net, cache, lr.output_grad, BackpropMode::CcNoPerforation);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < perf.layers[0].delta.size(); ++i)
        max_diff = std::max(max_diff, std::abs(perf.layers[0].delta[i] -
                                               thru.layers[0].delta[i]));
    CHECK(max_diff > 1e-8);
}

TEST_CASE("perforated mode never allocates dendrite input-weight gradients") {
    Network net = build_network({3}, {LayerSpec::dense(2, Activation::Tanh),
                                      LayerSpec::dense(2, Activation::Identity)});
    init_params(net, 51);
    attach_dendrites(net, 2, 52);
    std::mt19937_64 rng(53);
    Tensor batch = random_tensor({3, 3}, rng);
    ForwardCache cache;
    Tensor out = forward(net, batch, RunMode::Eval, 0, &cache);
    LossTarget t;
    t.kind = LossKind::CrossEntropySoftmax;
    t.labels = {0, 1, 0};
    GradBuffer gb = backprop_perforated(net, cache, loss_and_grad(t, out).output_grad);
    for (const auto& lg : gb.layers)
        for (const auto& unit : lg.dendrites)
            for (const auto& dg : unit) {
                CHECK(!dg.has_input_grads);
                CHECK(dg.input_weights.size() == 0);
            }
}

TEST_CASE("gd_dendrites writes input gradients only for unfrozen dendrites") {
    Network net = build_network({3}, {LayerSpec::dense(2, Activation::Identity)});
    init_params(net, 61);
    attach_dendrites(net, 2, 62);
    net.layers[0].dendrites[0][0].input_frozen = false;
    net.layers[0].dendrites[1][1].input_frozen = false;
    std::mt19937_64 rng(63);
    Tensor batch = random_tensor({3, 3}, rng);
    ForwardCache cache;
    Tensor out = forward(net, batch, RunMode::Eval, 0, &cache);
    LossTarget t;
    t.kind = LossKind::CrossEntropySoftmax;
    t.labels = {0, 1, 0};
    GradBuffer gb =
        backprop(net, cache, loss_and_grad(t, out).output_grad, BackpropMode::GdDendrites);
    CHECK(gb.layers[0].dendrites[0][0].has_input_grads);
    CHECK(!gb.layers[0].dendrites[0][1].has_input_grads);
    CHECK(!gb.layers[0].dendrites[1][0].has_input_grads);
    CHECK(gb.layers[0].dendrites[1][1].has_input_grads);
    double magnitude = 0.0;
    for (double v : gb.layers[0].dendrites[0][0].input_weights.data)
        magnitude += std::abs(v);
    CHECK(magnitude > 0.0);
}

TEST_CASE("standard backprop refuses networks with dendrites") {
    Network net = build_network({2}, {LayerSpec::dense(1, Activation::Identity)});
    attach_dendrites(net, 1, 71);
    Tensor batch({1, 2}, {1.0, 2.0});
    ForwardCache cache;
    forward(net, batch, RunMode::Eval, 0, &cache);
    Tensor og({1, 1}, {1.0});
    CHECK_THROWS_AS(backprop_standard(net, cache, og), std::invalid_argument);
}

TEST_CASE("loss output gradients match finite differences") {
    std::mt19937_64 rng(81);
    Tensor out = random_tensor({3, 4}, rng);
    LossTarget ce;
    ce.kind = LossKind::CrossEntropySoftmax;
    ce.labels = {1, 3, 0};
    LossTarget mse = mse_target(random_tensor({3, 4}, rng));
    for (const LossTarget* t : {&ce, &mse}) {
        LossResult lr = loss_and_grad(*t, out);
        CHECK(lr.value >= 0.0);
        for (std::size_t i = 0; i < out.size(); ++i) {
            Tensor o = out;
            double eps = 1e-6;
            o.data[i] += eps;
            double lp = loss_value(*t, o);
            o.data[i] -= 2 * eps;
            double lm = loss_value(*t, o);
            double num = (lp - lm) / (2 * eps);
            CHECK(std::abs(num - lr.output_grad.data[i]) /
                      std::max(1.0, std::abs(num)) <
                  1e-6);
        }
    }
}

TEST_CASE("finite_diff_check rejects non-positive eps") {
    Network net = build_network({2}, {LayerSpec::dense(1, Activation::Identity)});
    Tensor batch({1, 2}, {1.0, 2.0});
    LossTarget t = mse_target(Tensor({1, 1}, {0.0}));
    CHECK_THROWS_AS(finite_diff_check(net, t, batch, false, 0.0),
                    std::invalid_argument);
}
