#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "deepedm/nn.hpp"
#include "test_util.hpp"

using namespace deepedm;
using deepedm::testing::check_gradients;
using deepedm::testing::random_tensor;

namespace {

double gelu_ref(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// Plain-loop evaluation of an MLP, independent of the tensor ops.
std::vector<double> mlp_ref(const Mlp& mlp, const std::vector<double>& x) {
    std::vector<double> h = x;
    for (std::size_t l = 0; l < mlp.layers().size(); ++l) {
        const auto& layer = mlp.layers()[l];
        std::vector<double> next(layer.out_features());
        for (std::size_t o = 0; o < next.size(); ++o) {
            double s = layer.bias()[o];
            for (std::size_t i = 0; i < h.size(); ++i) s += layer.weight().at(o, i) * h[i];
            next[o] = l + 1 < mlp.layers().size() ? gelu_ref(s) : s;
        }
        h = next;
    }
    return h;
}

}  // namespace

TEST(Linear, OutputReplacesLastDimension) {
    Rng rng(1);
    const auto layer = LinearLayer::init(4, 3, rng);
    EXPECT_EQ(layer.forward(Tensor::zeros({5, 4})).shape(), (Shape{5, 3}));
    EXPECT_EQ(layer.forward(Tensor::zeros({2, 5, 4})).shape(), (Shape{2, 5, 3}));
    EXPECT_EQ(layer.forward(Tensor::zeros({4})).shape(), (Shape{3}));
    EXPECT_THROW((void)layer.forward(Tensor::zeros({5, 3})), DimensionError);
}

TEST(Linear, FanInUniformInitAndZeroBias) {
    Rng rng(2);
    const auto layer = LinearLayer::init(16, 8, rng);
    const double bound = 0.25;
    for (double w : layer.weight().data()) {
        EXPECT_GE(w, -bound);
        EXPECT_LE(w, bound);
    }
    for (double b : layer.bias().data()) EXPECT_EQ(b, 0.0);
}

TEST(Mlp, IdentityLayerPassesInputThrough) {
    const LinearLayer eye(Tensor::parameter({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor::parameter({3}, {0, 0, 0}));
    const Mlp mlp({eye}, 0.0);
    const auto x = Tensor::from({2, 3}, {1.5, -2, 7, 0, 3, -1});
    EXPECT_EQ(mlp.forward(x, {}).to_vector(), x.to_vector());
}

TEST(Mlp, ZeroDropoutTrainEqualsEval) {
    Rng rng(3);
    const auto mlp = Mlp::init({5, 8, 2}, 0.0, rng);
    const auto x = random_tensor({4, 5}, rng);
    Rng drop(4);
    const auto train = mlp.forward(x, {Mode::train, &drop});
    const auto eval = mlp.forward(x, {Mode::eval, nullptr});
    EXPECT_EQ(train.to_vector(), eval.to_vector());
}

TEST(Mlp, MatchesStraightLineEvaluation) {
    Rng rng(5);
    const auto mlp = Mlp::init({6, 9, 3}, 0.1, rng);
    const auto x = random_tensor({1, 6}, rng, -2, 2);
    const auto got = mlp.forward(x, {}).to_vector();
    const auto want = mlp_ref(mlp, x.to_vector());
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-13);
}

TEST(Mlp, EvalModeIsDeterministicTrainModeIsNot) {
    Rng rng(6);
    const auto mlp = Mlp::init({6, 32, 3}, 0.5, rng);
    const auto x = random_tensor({4, 6}, rng);
    EXPECT_EQ(mlp.forward(x, {}).to_vector(), mlp.forward(x, {}).to_vector());
    Rng d1(1), d2(2);
    EXPECT_NE(mlp.forward(x, {Mode::train, &d1}).to_vector(), mlp.forward(x, {Mode::train, &d2}).to_vector());
}

TEST(Dropout, InvertedScalingPreservesExpectation) {
    Rng rng(7);
    const auto x = Tensor::full({20000}, 1.0);
    const auto y = dropout(x, 0.25, rng);
    double total = 0.0;
    std::size_t zeros = 0;
    for (double v : y.data()) {
        EXPECT_TRUE(v == 0.0 || std::abs(v - 4.0 / 3.0) < 1e-15);
        zeros += v == 0.0;
        total += v;
    }
    EXPECT_NEAR(total / 20000.0, 1.0, 0.02);
    EXPECT_NEAR(static_cast<double>(zeros) / 20000.0, 0.25, 0.01);
}

TEST(Mlp, GradientsMatchFiniteDifferences) {
    Rng rng(8);
    const auto mlp = Mlp::init({4, 7, 7, 2}, 0.0, rng);
    const auto x = random_tensor({3, 4}, rng, -3, 3);
    ParameterList params;
    mlp.collect("mlp", params);
    const auto r = check_gradients(params, [&] { return mean(square(mlp.forward(x, {}))); });
    EXPECT_LE(r.max_rel, 1e-4) << r.worst;
}

TEST(Attention, SingleKeyReturnsItsValue) {
    Rng rng(9);
    const auto k = random_tensor({1, 3}, rng);
    const auto v = Tensor::from({1, 3}, {4, -5, 6});
    for (int i = 0; i < 5; ++i) {
        const auto q = random_tensor({2, 3}, rng, -10, 10);
        const auto out = attention(q, k, v, 1.0);
        for (std::size_t r = 0; r < 2; ++r) {
            for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.at(r, c), v.at(0, c), 1e-15);
        }
    }
}

TEST(Attention, IdenticalValuesAreReturned) {
    Rng rng(10);
    const auto q = random_tensor({4, 2}, rng);
    const auto k = random_tensor({6, 2}, rng);
    std::vector<double> vv;
    for (int i = 0; i < 6; ++i) vv.insert(vv.end(), {1.25, -0.5});
    const auto out = attention(q, k, Tensor::from({6, 2}, vv), 0.7);
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_NEAR(out.at(r, 0), 1.25, 1e-14);
        EXPECT_NEAR(out.at(r, 1), -0.5, 1e-14);
    }
}

TEST(Attention, HandSetLogitsUseSoftmaxWeights) {
    // q = [1], keys = [1], [2], [3] -> logits 1, 2, 3.
    const auto q = Tensor::from({1, 1}, {1});
    const auto k = Tensor::from({3, 1}, {1, 2, 3});
    const auto v = Tensor::from({3, 2}, {1, 0, 0, 1, 2, 2});
    const double w0 = 0.09003057, w1 = 0.24472847, w2 = 0.66524096;
    const auto out = attention(q, k, v, 1.0);
    EXPECT_NEAR(out.at(0, 0), w0 * 1 + w2 * 2, 1e-7);
    EXPECT_NEAR(out.at(0, 1), w1 * 1 + w2 * 2, 1e-7);
}

TEST(Attention, OutputsLieInConvexHullOfValues) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto q = random_tensor({3, 4}, rng, -5, 5);
        const auto k = random_tensor({7, 4}, rng, -5, 5);
        const auto v = random_tensor({7, 2}, rng, -5, 5);
        const auto out = attention(q, k, v, 1.0);
        // Recover the weights independently and check they form a distribution.
        for (std::size_t r = 0; r < 3; ++r) {
            std::vector<double> w(7);
            double mx = -1e300, total = 0.0;
            for (std::size_t t = 0; t < 7; ++t) {
                double s = 0.0;
                for (std::size_t c = 0; c < 4; ++c) s += q.at(r, c) * k.at(t, c);
                w[t] = s;
                mx = std::max(mx, s);
            }
            for (double& x : w) total += (x = std::exp(x - mx));
            double wsum = 0.0;
            for (double& x : w) {
                x /= total;
                EXPECT_GE(x, 0.0);
                wsum += x;
            }
            EXPECT_NEAR(wsum, 1.0, 1e-12);
            for (std::size_t c = 0; c < 2; ++c) {
                double e = 0.0, lo = 1e300, hi = -1e300;
                for (std::size_t t = 0; t < 7; ++t) {
                    e += w[t] * v.at(t, c);
                    lo = std::min(lo, v.at(t, c));
                    hi = std::max(hi, v.at(t, c));
                }
                EXPECT_NEAR(out.at(r, c), e, 1e-12);
                EXPECT_GE(out.at(r, c), lo - 1e-12);
                EXPECT_LE(out.at(r, c), hi + 1e-12);
            }
        }
    }
}

TEST(Attention, InvariantToConstantLogitShiftPerQuery) {
    // Appending a constant coordinate to the query and a matching 1 to every key
    // adds the same constant to all logits of that query.
    Rng rng(12);
    const auto q = random_tensor({1, 3}, rng);
    const auto k = random_tensor({5, 3}, rng);
    const auto v = random_tensor({5, 2}, rng);
    auto qe = q.to_vector();
    qe.push_back(17.0);
    std::vector<double> ke;
    for (std::size_t t = 0; t < 5; ++t) {
        for (std::size_t c = 0; c < 3; ++c) ke.push_back(k.at(t, c));
        ke.push_back(1.0);
    }
    const auto a = attention(q, k, v, 1.0);
    const auto b = attention(Tensor::from({1, 4}, qe), Tensor::from({5, 4}, ke), v, 1.0);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-13);
}

TEST(Attention, NonPositiveTemperatureThrows) {
    const auto x = Tensor::zeros({2, 2});
    EXPECT_THROW((void)attention(x, x, x, 0.0), std::invalid_argument);
    EXPECT_THROW((void)attention(x, x, x, -1.0), std::invalid_argument);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParameters) {
    const auto p = Tensor::parameter({3}, {1, -2, 3});
    AdamW opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 5; ++i) opt.step();
    EXPECT_EQ(p.to_vector(), (std::vector<double>{1, -2, 3}));
}

TEST(AdamW, FirstStepHandValue) {
    const auto p = Tensor::parameter({1}, {1.0});
    p.mutable_grad()[0] = 1.0;
    AdamW opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8, 0.0});
    opt.step();
    // m_hat = 1, sqrt(v_hat) = 1, so p' = 1 - 0.1 / (1 + 1e-8).
    EXPECT_NEAR(p[0], 0.9, 1e-8);
    EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdamW, PureDecayWithZeroGradient) {
    const auto p = Tensor::parameter({2}, {2.0, -4.0});
    AdamW opt({{"p", p}}, {0.01, 0.9, 0.999, 1e-8, 0.5});
    opt.step();
    EXPECT_DOUBLE_EQ(p[0], 2.0 * (1 - 0.01 * 0.5));
    EXPECT_DOUBLE_EQ(p[1], -4.0 * (1 - 0.01 * 0.5));
}

TEST(AdamW, MomentsMirrorShapesAndStepIncreases) {
    const auto a = Tensor::parameter({2, 3}, std::vector<double>(6, 1.0));
    const auto b = Tensor::parameter({4}, std::vector<double>(4, 1.0));
    AdamW opt({{"a", a}, {"b", b}});
    EXPECT_EQ(opt.first_moment(0).size(), 6u);
    EXPECT_EQ(opt.second_moment(1).size(), 4u);
    for (std::size_t i = 1; i <= 3; ++i) {
        opt.step();
        EXPECT_EQ(opt.step_count(), i);
    }
    EXPECT_EQ(opt.options().lr, 5e-4);
    EXPECT_EQ(opt.options().weight_decay, 1e-4);
}

TEST(AdamW, NanGradientNamesParameter) {
    const auto p = Tensor::parameter({2}, {1, 2});
    p.mutable_grad()[1] = std::nan("");
    AdamW opt({{"blocks.0.gate.bias", p}});
    try {
        opt.step();
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("blocks.0.gate.bias"), std::string::npos);
    }
    EXPECT_EQ(p[0], 1.0);
}

TEST(AdamW, BitDeterministic) {
    std::vector<double> first;
    for (int run = 0; run < 2; ++run) {
        Rng rng(13);
        const auto mlp = Mlp::init({3, 5, 1}, 0.0, rng);
        ParameterList params;
        mlp.collect("m", params);
        AdamW opt(params);
        const auto x = random_tensor({8, 3}, rng);
        for (int s = 0; s < 10; ++s) {
            opt.zero_grad();
            backward(mean(square(mlp.forward(x, {}))));
            opt.step();
        }
        const auto w = snapshot(params);
        std::vector<double> flat;
        for (const auto& v : w) flat.insert(flat.end(), v.begin(), v.end());
        if (run == 0) {
            first = flat;
        } else {
            EXPECT_EQ(first, flat);
        }
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Rng rng(14);
    const auto mlp = Mlp::init({4, 6, 2}, 0.1, rng);
    ParameterList params;
    mlp.collect("base", params);
    params[0].tensor.mutable_data()[0] = 1.0 / 3.0;
    params[1].tensor.mutable_data()[0] = -1e-300;
    std::stringstream ss;
    write_checkpoint(ss, params);

    Rng other(99);
    const auto fresh = Mlp::init({4, 6, 2}, 0.1, other);
    ParameterList target;
    fresh.collect("base", target);
    load_into(read_checkpoint(ss), target);
    for (std::size_t i = 0; i < params.size(); ++i) {
        EXPECT_EQ(params[i].tensor.to_vector(), target[i].tensor.to_vector()) << params[i].path;
    }
}

TEST(Checkpoint, ShapeMismatchAndMissingEntriesAreErrors) {
    Rng rng(15);
    ParameterList small, large;
    Mlp::init({4, 2}, 0.0, rng).collect("m", small);
    Mlp::init({5, 2}, 0.0, rng).collect("m", large);
    std::stringstream ss;
    write_checkpoint(ss, small);
    EXPECT_THROW(load_into(read_checkpoint(ss), large), CheckpointError);

    std::stringstream bad("not-a-checkpoint 1\n0\n");
    EXPECT_THROW((void)read_checkpoint(bad), CheckpointError);

    ParameterList renamed;
    Mlp::init({4, 2}, 0.0, rng).collect("other", renamed);
    std::stringstream ss2;
    write_checkpoint(ss2, small);
    EXPECT_THROW(load_into(read_checkpoint(ss2), renamed), CheckpointError);
}

TEST(Checkpoint, FormatDoubleRoundTrips) {
    Rng rng(16);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.normal() * std::pow(10.0, rng.uniform(-30, 30));
        EXPECT_EQ(parse_double(format_double(v)), v);
    }
    EXPECT_THROW((void)parse_double("1.5x"), std::invalid_argument);
}
