#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "defectlab/network.hpp"
#include "defectlab/optim.hpp"
#include "defectlab/train.hpp"
#include "oracles.hpp"

using namespace defectlab;
using namespace defectlab::nn;

namespace {

NetworkSpec tiny_spec(int side = 8, int classes = 2) {
    NetworkSpec s;
    s.input_shape = {side, side, 1};
    s.layers = {Conv2D(4, 3), ReLU(), MaxPool(2), Flatten(), Dense(8), ReLU(), Dense(classes), Softmax()};
    s.embedding_layer = 4;
    return s;
}

// Class 0: dark square in a bright field; class 1: bright square in a dark field.
PatchSet toy_set(int per_class, std::uint64_t seed, int side = 8) {
    Rng rng(seed);
    PatchSet set(Split::train);
    for (int i = 0; i < 2 * per_class; ++i) {
        const int c = i % 2;
        LabeledPatch p;
        p.id = "t" + std::to_string(i);
        p.patch = GrayImage(side, side);
        const int x0 = static_cast<int>(rng.uniform_int(0, side / 2)), y0 = static_cast<int>(rng.uniform_int(0, side / 2));
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                const bool inside = x >= x0 && x < x0 + side / 2 && y >= y0 && y < y0 + side / 2;
                const double base = (inside == (c == 0)) ? 40 : 210;
                p.patch.at(x, y) = clamp_to_u8(base + 10 * rng.normal());
            }
        p.label = c;
        set.add(p);
    }
    return set;
}

bool same_bits(const NetworkParams& a, const NetworkParams& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const auto& x = a.layers[i];
        const auto& y = b.layers[i];
        if (x.weight.size() != y.weight.size() || x.bias.size() != y.bias.size()) return false;
        if (std::memcmp(x.weight.data(), y.weight.data(), x.weight.size() * sizeof(double)) != 0) return false;
        if (std::memcmp(x.bias.data(), y.bias.data(), x.bias.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

}  // namespace

class LayerGradient : public ::testing::TestWithParam<oracle::LayerCase> {};

TEST_P(LayerGradient, MatchesCentralDifferencesOn20Seeds) {
    const auto& c = GetParam();
    oracle::GradCheck total;
    for (std::uint64_t seed = 0; seed < 20; ++seed) total.merge(oracle::layer_gradcheck(c.layer, c.sample_shape, seed));
    EXPECT_LE(total.worst, oracle::kGradTolerance) << c.name;
    EXPECT_GT(total.checked, 10 * total.skipped) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllKinds, LayerGradient, ::testing::ValuesIn(oracle::layer_cases()),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(NetworkGradient, WholeNetworkOn20Seeds) {
    const auto spec = oracle::gradcheck_spec();
    oracle::GradCheck total;
    for (std::uint64_t seed = 0; seed < 20; ++seed) total.merge(oracle::network_gradcheck(spec, seed));
    EXPECT_LE(total.worst, oracle::kGradTolerance);
    EXPECT_GT(total.checked, 10 * total.skipped);
}

TEST(NetworkGradient, FrozenLayersGetNoGradient) {
    const auto spec = oracle::gradcheck_spec();
    const auto params = build(spec, 3);
    Rng rng(1);
    const auto x = oracle::random_tensor({2, 8, 8, 2}, rng);
    auto fr = forward(spec, params, x);
    const auto g = loss_and_grad(spec, params, std::move(fr.trace), fr.probs, {0, 2}, {}, 7).grads;
    for (std::size_t i = 0; i < 7; ++i)
        for (double v : g.layers[i].weight.values()) EXPECT_EQ(v, 0.0);
    double mass = 0;
    for (double v : g.layers[9].weight.values()) mass += std::abs(v);
    EXPECT_GT(mass, 0);
}

TEST(NetworkGradient, TraceIsConsumedOnce) {
    const auto spec = tiny_spec();
    const auto params = build(spec, 1);
    Rng rng(2);
    auto fr = forward(spec, params, oracle::random_tensor({1, 8, 8, 1}, rng));
    const auto probs = fr.probs;
    ForwardTrace t = std::move(fr.trace);
    t.mark_consumed();
    EXPECT_THROW(loss_and_grad(spec, params, std::move(t), probs, {0}, {}), InputError);
}

TEST(Loss, WeightedMeanWithProbabilityFloor) {
    NetworkSpec spec;
    spec.input_shape = {1, 1, 1};
    spec.layers = {Flatten(), Dense(3), Softmax()};
    auto params = build(spec, 0);
    params.layers[1].weight.fill(0.0);
    params.layers[1].bias = Tensor({3}, {0.0, 0.0, -1e6});  // class 2 probability underflows
    Tensor x({2, 1, 1, 1}, {0.3, 0.7});
    auto fr = forward(spec, params, x);
    EXPECT_EQ(fr.probs[2], 0.0);
    const auto lg = loss_and_grad(spec, params, std::move(fr.trace), fr.probs, {0, 2}, {2.0, 1.0, 0.5});
    const double expect = (2.0 * -std::log(0.5) + 0.5 * -std::log(kProbabilityFloor)) / 2;
    EXPECT_NEAR(lg.loss, expect, 1e-12);
    auto fr2 = forward(spec, params, x);
    EXPECT_THROW(loss_and_grad(spec, params, std::move(fr2.trace), fr2.probs, {0, 3}, {}), LabelError);
}

TEST(Softmax, RowsSumToOneAndStayFinite) {
    Rng rng(5);
    Tensor logits({4, 6});
    for (auto& v : logits.values()) v = rng.normal(0.0, 300.0);
    const auto p = layer_forward(Softmax(), {}, logits);
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int c = 0; c < 6; ++c) {
            const double v = p[static_cast<std::size_t>(r * 6 + c)];
            ASSERT_TRUE(std::isfinite(v));
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    const auto shifted = [&] {
        Tensor t = logits;
        for (auto& v : t.values()) v += 1000.0;
        return layer_forward(Softmax(), {}, t);
    }();
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], shifted[i], 1e-12);
}

TEST(Spec, StandardShapes) {
    const auto spec = NetworkSpec::standard(64, 4);
    const auto shapes = spec.output_shapes();
    EXPECT_EQ(shapes[0], (Shape{62, 62, 16}));
    EXPECT_EQ(shapes[2], (Shape{31, 31, 16}));
    EXPECT_EQ(shapes[3], (Shape{29, 29, 32}));
    EXPECT_EQ(shapes[5], (Shape{14, 14, 32}));
    EXPECT_EQ(shapes[6], (Shape{6272}));
    EXPECT_EQ(shapes[7], (Shape{128}));
    EXPECT_EQ(shapes.back(), (Shape{4}));
    EXPECT_EQ(spec.classes(), 4);
    EXPECT_EQ(spec.embedding_dim(), 128);
    EXPECT_EQ(NetworkSpec::from_json(spec.to_json()), spec);
}

TEST(Spec, InvalidSpecsAreRejected) {
    auto s = tiny_spec();
    s.layers.push_back(Softmax());
    EXPECT_THROW(s.validate(), SpecError);
    s = tiny_spec();
    s.layers.pop_back();
    EXPECT_THROW(s.validate(), SpecError);
    s = tiny_spec();
    s.embedding_layer = 6;
    EXPECT_THROW(s.validate(), SpecError);
    s = tiny_spec();
    s.embedding_layer = 1;
    EXPECT_THROW(s.validate(), SpecError);
    s = tiny_spec();
    s.layers[0] = Conv2D(4, 9);
    EXPECT_THROW(s.validate(), SpecError);
    s = tiny_spec();
    s.layers.insert(s.layers.begin(), Dense(3));
    EXPECT_THROW(s.validate(), SpecError);
    EXPECT_THROW(NetworkSpec::from_json({{"layers", 3}}), SpecError);
    EXPECT_THROW(build(s, 0), SpecError);
}

TEST(Build, HeNormalStatisticsAndDeterminism) {
    NetworkSpec s;
    s.input_shape = {1, 1, 400};
    s.layers = {Flatten(), Dense(500), Dense(2), Softmax()};
    const auto p = build(s, 9);
    double sum = 0, sq = 0;
    for (double v : p.layers[1].weight.values()) {
        sum += v;
        sq += v * v;
    }
    const double n = static_cast<double>(p.layers[1].weight.size());
    const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
    EXPECT_NEAR(mean, 0.0, 0.005);
    EXPECT_NEAR(sd, std::sqrt(2.0 / 400), 0.01 * std::sqrt(2.0 / 400));
    for (double b : p.layers[1].bias.values()) EXPECT_EQ(b, 0.0);
    EXPECT_TRUE(same_bits(p, build(s, 9)));
    EXPECT_FALSE(same_bits(p, build(s, 10)));
}

TEST(Forward, RejectsWrongBatchShape) {
    const auto spec = tiny_spec();
    const auto params = build(spec, 1);
    EXPECT_THROW(forward(spec, params, Tensor({1, 9, 8, 1})), InputError);
    EXPECT_THROW(forward(spec, params, Tensor({8, 8, 1, 1})), InputError);
}

TEST(Optimizer, SgdExamples) {
    std::vector<double> p{1.0, -2.0}, g{0.5, -1.0};
    Optimizer sgd(OptimizerConfig::sgd(0.1));
    sgd.step({{p, g}});
    EXPECT_DOUBLE_EQ(p[0], 0.95);
    EXPECT_DOUBLE_EQ(p[1], -1.9);
    std::vector<double> q{1.0};
    const std::vector<double> gq{1.0};
    Optimizer mom(OptimizerConfig::sgd(0.1, 0.9));
    mom.step({{q, gq}});
    mom.step({{q, gq}});
    EXPECT_NEAR(q[0], 1.0 - 0.1 - 0.1 * 1.9, 1e-15);
}

TEST(Optimizer, AdamFirstStepHasLearningRateMagnitude) {
    for (double g0 : {1e-3, 0.5, -7.0, 1e4}) {
        std::vector<double> p{0.0};
        const std::vector<double> g{g0};
        Optimizer adam(OptimizerConfig::adam(0.01));
        adam.step({{p, g}});
        EXPECT_NEAR(p[0], -0.01 * g0 / (std::abs(g0) + 1e-8), 1e-12) << g0;
    }
}

TEST(Optimizer, AdamMatchesHandComputedTwoSteps) {
    std::vector<double> p{1.0};
    std::vector<double> g{0.2};
    Optimizer adam(OptimizerConfig::adam(0.1));
    adam.step({{p, g}});
    g[0] = -0.4;
    adam.step({{p, g}});
    double m = 0, v = 0, x = 1.0;
    for (int t = 1; t <= 2; ++t) {
        const double gt = t == 1 ? 0.2 : -0.4;
        m = 0.9 * m + 0.1 * gt;
        v = 0.999 * v + 0.001 * gt * gt;
        x -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    }
    EXPECT_NEAR(p[0], x, 1e-15);
    EXPECT_EQ(adam.steps(), 2);
}

TEST(Optimizer, InvalidConfigs) {
    EXPECT_THROW(Optimizer(OptimizerConfig::sgd(0.0)), ParameterError);
    EXPECT_THROW(Optimizer(OptimizerConfig::sgd(0.1, 1.0)), ParameterError);
    EXPECT_THROW(Optimizer(OptimizerConfig::adam(0.1, 1.0)), ParameterError);
}

TEST(Train, DeterministicUnderFixedSeed) {
    const auto spec = tiny_spec();
    const auto set = toy_set(12, 4);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 5;
    cfg.seed = 77;
    auto a = build(spec, 1), b = build(spec, 1), c = build(spec, 1);
    const auto ha = train(spec, a, set, cfg);
    const auto hb = train(spec, b, set, cfg);
    EXPECT_TRUE(same_bits(a, b));
    EXPECT_EQ(ha, hb);
    cfg.seed = 78;
    train(spec, c, set, cfg);
    EXPECT_FALSE(same_bits(a, c));
}

TEST(Train, SeparableToyReachesPerfectAccuracy) {
    const auto spec = tiny_spec();
    auto params = build(spec, 2);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.optimizer = OptimizerConfig::adam(0.01);
    cfg.seed = 1;
    const auto hist = train(spec, params, toy_set(40, 8), cfg);
    EXPECT_LT(hist.back().loss, hist.front().loss);
    const auto test = toy_set(25, 99);
    const auto e = evaluate(spec, params, test);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < e.truths.size(); ++i) correct += e.truths[i] == e.predictions[i];
    EXPECT_EQ(correct, test.size());
}

TEST(Train, UniformWeightsEqualBalancedOnBalancedSet) {
    const auto spec = tiny_spec();
    const auto set = toy_set(10, 3);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 5;
    auto a = build(spec, 4), b = build(spec, 4);
    train(spec, a, set, cfg);
    cfg.class_weights = balanced_weights(set.class_counts(2)).weights;
    train(spec, b, set, cfg);
    EXPECT_TRUE(same_bits(a, b));
}

TEST(Train, TinyLearningRateBarelyMoves) {
    const auto spec = tiny_spec();
    auto params = build(spec, 6);
    const auto before = params;
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.optimizer = OptimizerConfig::sgd(1e-12);
    train(spec, params, toy_set(6, 1), cfg);
    double worst = 0;
    for (std::size_t i = 0; i < params.layers.size(); ++i)
        for (std::size_t j = 0; j < params.layers[i].weight.size(); ++j)
            worst = std::max(worst, std::abs(params.layers[i].weight[j] - before.layers[i].weight[j]));
    EXPECT_LT(worst, 1e-9);
}

TEST(Train, FrozenLayersStayBitIdentical) {
    const auto spec = tiny_spec();
    auto params = build(spec, 6);
    const auto before = params;
    TrainConfig cfg;
    cfg.epochs = 2;
    train(spec, params, toy_set(6, 1), cfg, 4);
    EXPECT_EQ(params.layers[0], before.layers[0]);
    EXPECT_NE(params.layers[4], before.layers[4]);
    EXPECT_NE(params.layers[6], before.layers[6]);
}

TEST(Train, ZeroEpochsAndBadInputs) {
    const auto spec = tiny_spec();
    auto params = build(spec, 6);
    TrainConfig cfg;
    cfg.epochs = 0;
    EXPECT_TRUE(train(spec, params, PatchSet(Split::train), cfg).empty());
    cfg.epochs = 1;
    EXPECT_THROW(train(spec, params, PatchSet(Split::train), cfg), InputError);
    auto bad = toy_set(2, 1);
    LabeledPatch p = bad[0];
    p.label = 5;
    bad.add(p);
    EXPECT_THROW(train(spec, params, bad, cfg), LabelError);
    cfg.batch_size = 0;
    EXPECT_THROW(train(spec, params, toy_set(2, 1), cfg), ParameterError);
}

TEST(Predict, TiesGoToLowestIndex) {
    auto spec = tiny_spec(8, 3);
    auto params = build(spec, 1);
    params.layers[6].weight.fill(0.0);
    params.layers[6].bias.fill(0.0);
    const auto preds = predict(spec, params, toy_set(3, 2));
    for (const auto& p : preds) {
        EXPECT_EQ(p.label, 0);
        EXPECT_NEAR(p.confidence, 1.0 / 3, 1e-15);
    }
    EXPECT_EQ(argmax(std::vector<double>{0.2, 0.4, 0.4}), 1);
}

TEST(Predict, ChunkingDoesNotChangeResults) {
    const auto spec = tiny_spec();
    const auto params = build(spec, 3);
    const auto set = toy_set(70, 5);
    const auto all = predict(spec, params, set);
    ASSERT_EQ(all.size(), 140u);
    for (std::size_t i : {0u, 63u, 64u, 139u}) {
        const auto one = predict(spec, params, set.subset({i}));
        EXPECT_EQ(one[0].distribution, all[i].distribution);
    }
}
