#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "deepedm/dynamics.hpp"

using namespace deepedm;
namespace fs = std::filesystem;

namespace {

State3 endpoint(OdeSystem sys, double dt, double horizon) {
    sys.dt = dt;
    sys.n_steps = static_cast<std::size_t>(std::llround(horizon / dt)) + 1;
    const auto traj = integrate_rk4(sys);
    const auto n = traj.states.length() - 1;
    return {traj.states.at(0, n), traj.states.at(1, n), traj.states.at(2, n)};
}

double distance(const State3& a, const State3& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST(LorenzRhs, ChaoticInitialCondition) {
    const auto r = lorenz_rhs({0.0, 1.0, 1.05}, 10.0, 28.0, 2.667);
    EXPECT_DOUBLE_EQ(r[0], 10.0);
    EXPECT_DOUBLE_EQ(r[1], -1.0);
    EXPECT_NEAR(r[2], -2.80035, 1e-12);
}

TEST(LorenzRhs, OriginIsFixedPoint) {
    const auto r = lorenz_rhs({0, 0, 0}, 10.0, 28.0, 2.667);
    EXPECT_EQ(r, (State3{0, 0, 0}));
}

TEST(LorenzRhs, NonChaoticInitialCondition) {
    const auto sys = lorenz_nonchaotic();
    const auto r = sys.rhs(sys.initial_state);
    EXPECT_DOUBLE_EQ(r[0], 0.0);
    EXPECT_DOUBLE_EQ(r[1], -20.0);
    EXPECT_NEAR(r[2], 73.33, 1e-9);
}

TEST(RosslerRhs, HandValues) {
    const auto r = rossler_rhs({1, 1, 1}, 0.2, 0.2, 5.7);
    EXPECT_DOUBLE_EQ(r[0], -2.0);
    EXPECT_DOUBLE_EQ(r[1], 1.2);
    EXPECT_NEAR(r[2], -4.5, 1e-12);
    EXPECT_EQ(rossler_rhs({0, 0, 0}, 0.2, 0.0, 5.7), (State3{0, 0, 0}));
    const auto z = rossler_rhs({0, 0, 0}, 0.2, 0.2, 5.7);
    EXPECT_EQ(z, (State3{0, 0, 0.2}));
}

TEST(Rk4, SelfConvergenceIsFourthOrder) {
    const auto sys = lorenz_chaotic();
    // Several Lyapunov times; over ~1 time unit the error vector of the
    // chaotic orbit passes near a cancellation and the ratio is erratic.
    const double horizon = 5.0;
    const auto ref = endpoint(sys, 0.01 / 8, horizon);
    const double e1 = distance(endpoint(sys, 0.01, horizon), ref);
    const double e2 = distance(endpoint(sys, 0.005, horizon), ref);
    const double ratio = e1 / e2;
    EXPECT_GE(ratio, 8.0) << "e1=" << e1 << " e2=" << e2;
    EXPECT_LE(ratio, 32.0) << "e1=" << e1 << " e2=" << e2;
}

TEST(Rk4, SingleStepTrajectoryIsInitialState) {
    auto sys = lorenz_chaotic(0.01, 1);
    const auto traj = integrate_rk4(sys);
    ASSERT_EQ(traj.states.length(), 1u);
    for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(traj.states.at(d, 0), sys.initial_state[d]);
}

TEST(Rk4, LinearDecayMatchesExponential) {
    // x' = -x: one RK4 step multiplies by 1 - h + h^2/2 - h^3/6 + h^4/24.
    for (double h : {0.1, 0.05, 0.01}) {
        const auto f = [](const std::array<double, 1>& x) { return std::array<double, 1>{-x[0]}; };
        const auto y = rk4_step(f, std::array<double, 1>{1.0}, h);
        EXPECT_NEAR(y[0], std::exp(-h), std::pow(h, 5) / 60.0) << "h=" << h;
    }
}

TEST(Rk4, DivergenceReportsStep) {
    OdeSystem blow{"blowup", SystemKind::lorenz, {10.0, 28.0, -1e6}, {1e200, 1e200, 1e200}, 0.01, 50};
    try {
        (void)integrate_rk4(blow);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
    EXPECT_THROW((void)integrate_rk4(lorenz_chaotic(0.0, 10)), std::invalid_argument);
}

TEST(Rk4, ChaoticLorenzStaysBounded) {
    const auto traj = integrate_rk4(lorenz_chaotic());
    for (double v : traj.states.values()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_LT(std::abs(v), 100.0);
    }
}

TEST(Noise, ZeroSigmaKeepsStates) {
    const auto clean = integrate_rk4(lorenz_chaotic(0.01, 500));
    const auto noisy = add_noise(clean, 0.0, 3);
    EXPECT_EQ(noisy.observations, noisy.states);
}

TEST(Noise, SampleStdAndMean) {
    const auto clean = integrate_rk4(rossler(0.01, 100000));
    const auto noisy = add_noise(clean, 2.5, 42);
    EXPECT_EQ(noisy.states, clean.states);
    for (std::size_t d = 0; d < 3; ++d) {
        double s = 0.0, s2 = 0.0;
        const auto n = static_cast<double>(clean.states.length());
        for (std::size_t t = 0; t < clean.states.length(); ++t) {
            const double e = noisy.observations.at(d, t) - clean.states.at(d, t);
            s += e;
            s2 += e * e;
        }
        const double mean = s / n;
        const double sd = std::sqrt((s2 - n * mean * mean) / (n - 1));
        EXPECT_GE(sd, 2.45);
        EXPECT_LE(sd, 2.55);
        EXPECT_LT(std::abs(mean), 3.0 * 2.5 / std::sqrt(n));
    }
}

TEST(Noise, SameSeedSameObservations) {
    const auto clean = integrate_rk4(lorenz_chaotic(0.01, 1000));
    EXPECT_EQ(add_noise(clean, 1.0, 5).observations, add_noise(clean, 1.0, 5).observations);
    EXPECT_NE(add_noise(clean, 1.0, 5).observations, add_noise(clean, 1.0, 6).observations);
    EXPECT_THROW((void)add_noise(clean, -0.1, 5), std::invalid_argument);
}

TEST(Split, SequentialNonOverlapping) {
    const auto b = temporal_split_bounds(10000, 0.7, 0.1, 0.2);
    EXPECT_EQ(b.train_begin, 0u);
    EXPECT_EQ(b.train_end, 7000u);
    EXPECT_EQ(b.val_begin, 7000u);
    EXPECT_EQ(b.val_end, 8000u);
    EXPECT_EQ(b.test_begin, 8000u);
    EXPECT_EQ(b.test_end, 10000u);
    EXPECT_THROW((void)temporal_split_bounds(100, 0.5, 0.1, 0.1), std::invalid_argument);
}

class SuiteTest : public ::testing::Test {
protected:
    fs::path dir = fs::temp_directory_path() / "deepedm_suite_test";
    void SetUp() override { fs::remove_all(dir); }
    void TearDown() override { fs::remove_all(dir); }
};

TEST_F(SuiteTest, EighteenFilesByteIdenticalOnRegeneration) {
    SuiteOptions opt;
    opt.n_steps = 300;
    const auto files = build_synthetic_suite(dir / "a", opt);
    ASSERT_EQ(files.size(), 18u);
    std::set<std::string> names;
    for (const auto& f : files) {
        names.insert(f.filename().string());
        EXPECT_TRUE(fs::exists(f));
        auto sidecar = f;
        sidecar.replace_extension(".json");
        ASSERT_TRUE(fs::exists(sidecar));
        const auto meta = nlohmann::json::parse(slurp(sidecar));
        EXPECT_TRUE(meta.contains("split"));
        EXPECT_TRUE(meta.contains("seed"));
        EXPECT_EQ(meta.at("dt"), 0.01);
    }
    EXPECT_EQ(names.size(), 18u);
    EXPECT_TRUE(names.count("lorenz_chaotic_noise2.5.csv"));
    EXPECT_TRUE(names.count("rossler_noise0.0.csv"));

    const auto again = build_synthetic_suite(dir / "b", opt);
    for (std::size_t i = 0; i < files.size(); ++i) EXPECT_EQ(slurp(files[i]), slurp(again[i]));

    EXPECT_EQ(slurp(files[0]).substr(0, 14), "t,ch0,ch1,ch2\n");
    EXPECT_NE(slurp(dir / "a" / "lorenz_chaotic_noise0.0.csv"), slurp(dir / "a" / "lorenz_nonchaotic_noise0.0.csv"));
}

TEST_F(SuiteTest, CsvRoundTripRecoversObservations) {
    const auto traj = add_noise(integrate_rk4(lorenz_chaotic(0.01, 200)), 1.5, 11);
    save_csv(dir / "x.csv", traj.observations);
    EXPECT_EQ(load_csv(dir / "x.csv"), traj.observations);
}
