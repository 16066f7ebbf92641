#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "deepedm/simplex.hpp"
#include "deepedm/train.hpp"
#include "oracles.hpp"

using namespace deepedm;

using deepedm::testing::simplex_oracle;

TEST(Simplex, ConstantSeriesForecastsConstant) {
    const std::vector<double> x(40, 3.25);
    for (double v : simplex_forecast(x, {}, 5)) EXPECT_EQ(v, 3.25);
}

TEST(Simplex, PeriodicSeriesOneStepIsExact) {
    const std::size_t p = 8;
    std::vector<double> x(60);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2.0 * M_PI * static_cast<double>(i) / p);
    const auto f = simplex_forecast(x, {3, 1, {}}, 1);
    EXPECT_NEAR(f[0], std::sin(2.0 * M_PI * 60.0 / p), 1e-9);
}

TEST(Simplex, MatchesBruteForceOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t e = 1 + rng.below(4);
        const std::size_t tau = 1 + rng.below(2);
        const std::size_t steps = 1 + rng.below(4);
        SimplexConfig cfg{e, tau, {}};
        if (trial % 3 == 0) cfg.rbf_sigma = rng.uniform(0.2, 2.0);
        const std::size_t n = simplex_min_length(cfg, steps) + rng.below(20);
        std::vector<double> x(n);
        for (double& v : x) v = rng.normal();
        const auto got = simplex_forecast(x, cfg, steps);
        const auto want = simplex_oracle(x, e, tau, steps, cfg.rbf_sigma);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10) << "trial " << trial;
    }
}

TEST(Simplex, TinyCaseMatchesOracle) {
    const std::vector<double> x{0.3, -1.2, 0.8, 2.1, -0.4, 0.0, 1.7, -2.2, 0.9, 0.5, -0.7, 1.1};
    const auto got = simplex_forecast(x, {2, 1, {}}, 2);
    const auto want = simplex_oracle(x, 2, 1, 2);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Simplex, ForecastIsConvexCombinationOfNeighborFutures) {
    Rng rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> x(50);
        for (double& v : x) v = rng.uniform(-5, 5);
        const auto f = simplex_forecast(x, {3, 1, {}}, 4);
        const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
        for (double v : f) {
            EXPECT_GE(v, *lo);
            EXPECT_LE(v, *hi);
        }
    }
}

TEST(Simplex, ScalingWithCoScaledSigmaAndShiftInvariance) {
    Rng rng(3);
    std::vector<double> x(60);
    for (double& v : x) v = rng.normal();
    const double a = 3.5, c = -7.0;
    std::vector<double> xs(x), xc(x);
    for (double& v : xs) v *= a;
    for (double& v : xc) v += c;
    const auto f = simplex_forecast(x, {3, 1, 0.8}, 3);
    const auto fs = simplex_forecast(xs, {3, 1, 0.8 * a}, 3);
    const auto fc = simplex_forecast(xc, {3, 1, 0.8}, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(fs[i], a * f[i], 1e-10);
        EXPECT_NEAR(fc[i], f[i] + c, 1e-10);
    }
}

TEST(Simplex, TooShortHistoryStatesMinimum) {
    const std::vector<double> x(6, 1.0);
    try {
        (void)simplex_forecast(x, {3, 1, {}}, 4);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find(std::to_string(simplex_min_length({3, 1, {}}, 4))), std::string::npos);
    }
    EXPECT_THROW((void)simplex_forecast(std::vector<double>(50, 1.0), {3, 1, -1.0}, 2), std::invalid_argument);
}

TEST(SimplexMultivariate, SingleChannelEqualsUnivariate) {
    Rng rng(4);
    std::vector<double> x(40);
    for (double& v : x) v = rng.normal();
    const TimeSeries s({"a"}, 40, x);
    const auto m = simplex_multivariate(s, {}, 5);
    EXPECT_EQ(std::vector<double>(m.row(0).begin(), m.row(0).end()), simplex_forecast(x, {}, 5));
}

TEST(SimplexMultivariate, ChannelPermutationPermutesOutput) {
    const auto obs = integrate_rk4(lorenz_chaotic(0.01, 200)).states;
    const auto f = simplex_multivariate(obs, {}, 6);
    const auto g = simplex_multivariate(obs.select_channels({2, 0, 1}), {}, 6);
    EXPECT_EQ(g.row(0)[3], f.row(2)[3]);
    EXPECT_EQ(g.row(1)[5], f.row(0)[5]);
    EXPECT_EQ(g.row(2)[0], f.row(1)[0]);
}

// Clean chaotic Lorenz, lookback 192, horizon 48, every test window: the
// reference MSE is 30.985 with a +-50% band.
TEST(SimplexMultivariate, CleanLorenzMseAtHorizon48) {
    const auto series = std::make_shared<const TimeSeries>(integrate_rk4(lorenz_chaotic()).observations);
    const auto b = temporal_split_bounds(series->length(), 0.7, 0.1, 0.2);
    const auto test = make_windows(series, 192, 48, 1, b.test_begin, b.test_end);
    double se = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto f = simplex_multivariate(test.lookback_of(i), {}, 48);
        const auto y = test.target_of(i);
        for (std::size_t k = 0; k < y.values().size(); ++k) {
            se += std::pow(f.values()[k] - y.values()[k], 2);
            ++count;
        }
    }
    const double mse = se / static_cast<double>(count);
    EXPECT_GE(mse, 30.985 * 0.5);
    EXPECT_LE(mse, 30.985 * 1.5);
}

TEST(Recall, GroundTruthSourceIsPerfect) {
    RecallConfig rc;
    rc.n_steps = 600;
    rc.k = 3;
    const auto traj = recall_trajectory(rc);
    EXPECT_DOUBLE_EQ(knn_recall(traj, rc, DistanceSource::ground_truth), 1.0);
}

TEST(Recall, CleanDelayEmbeddingTracksStateNeighbors) {
    RecallConfig rc;
    rc.delta_t = 5;
    const auto traj = recall_trajectory(rc);
    EXPECT_NEAR(knn_recall(traj, rc, DistanceSource::delay_embedding), 0.986, 0.1);
}

TEST(Recall, NoisyScalarObservationCollapses) {
    RecallConfig rc;
    rc.sigma_noise = 2.5;
    const auto traj = recall_trajectory(rc);
    EXPECT_NEAR(knn_recall(traj, rc, DistanceSource::delay_embedding), 0.082, 0.1);
}

TEST(Recall, LongerEmbeddingIsNotHarderOnCleanData) {
    RecallConfig rc;
    const auto traj = recall_trajectory(rc);
    const double r1 = knn_recall(traj, rc, DistanceSource::delay_embedding);
    rc.delta_t = 10;
    const double r10 = knn_recall(traj, rc, DistanceSource::delay_embedding);
    EXPECT_GE(r10, r1 - 0.02);
}

TEST(Recall, LatentKernelRanksByInnerProduct) {
    RecallConfig rc;
    rc.n_steps = 400;
    const auto traj = recall_trajectory(rc);
    // A latent equal to the observed value itself: inner-product ranking picks
    // the largest same-sign values, so recall is a number in [0, 1].
    const LatentMap identity = [](std::span<const double> w) {
        return Tensor::from({w.size(), 1}, std::vector<double>(w.begin(), w.end()));
    };
    const double r = knn_recall(traj, rc, DistanceSource::latent_kernel, identity);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
    EXPECT_THROW((void)knn_recall(traj, rc, DistanceSource::latent_kernel), std::invalid_argument);
}

TEST(Recall, KLargerThanPoolThrows) {
    RecallConfig rc;
    rc.n_steps = 300;
    rc.window = 10;
    rc.k = 10;
    const auto traj = recall_trajectory(rc);
    EXPECT_THROW((void)knn_recall(traj, rc, DistanceSource::delay_embedding), std::invalid_argument);
}
