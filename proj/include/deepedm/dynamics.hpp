#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepedm/rng.hpp"
#include "deepedm/timeseries.hpp"

namespace deepedm {

using State3 = std::array<double, 3>;

inline State3 lorenz_rhs(const State3& s, double sigma, double rho, double beta) noexcept {
    return {sigma * (s[1] - s[0]), s[0] * (rho - s[2]) - s[1], s[0] * s[1] - beta * s[2]};
}

inline State3 rossler_rhs(const State3& s, double a, double b, double c) noexcept {
    return {-s[1] - s[2], s[0] + a * s[1], b + s[2] * (s[0] - c)};
}

enum class SystemKind { lorenz, rossler };

struct OdeSystem {
    std::string name;
    SystemKind kind = SystemKind::lorenz;
    std::array<double, 3> params{};  // (sigma, rho, beta) or (a, b, c)
    State3 initial_state{};
    double dt = 0.01;
    std::size_t n_steps = 10000;

    [[nodiscard]] State3 rhs(const State3& s) const noexcept {
        return kind == SystemKind::lorenz ? lorenz_rhs(s, params[0], params[1], params[2])
                                          : rossler_rhs(s, params[0], params[1], params[2]);
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json p;
        if (kind == SystemKind::lorenz) {
            p = {{"sigma", params[0]}, {"rho", params[1]}, {"beta", params[2]}};
        } else {
            p = {{"a", params[0]}, {"b", params[1]}, {"c", params[2]}};
        }
        return {{"system", name},
                {"family", kind == SystemKind::lorenz ? "lorenz" : "rossler"},
                {"params", p},
                {"initial_state", initial_state},
                {"dt", dt},
                {"n_steps", n_steps}};
    }
};

inline OdeSystem lorenz_chaotic(double dt = 0.01, std::size_t n_steps = 10000) {
    return {"lorenz_chaotic", SystemKind::lorenz, {10.0, 28.0, 2.667}, {0.0, 1.0, 1.05}, dt, n_steps};
}

inline OdeSystem lorenz_nonchaotic(double dt = 0.01, std::size_t n_steps = 10000) {
    return {"lorenz_nonchaotic", SystemKind::lorenz, {10.0, 9.0, 2.667}, {10.0, 10.0, 10.0}, dt, n_steps};
}

inline OdeSystem rossler(double dt = 0.01, std::size_t n_steps = 10000) {
    return {"rossler", SystemKind::rossler, {0.2, 0.2, 5.7}, {1.0, 1.0, 1.0}, dt, n_steps};
}

/// One classical Runge-Kutta step of size dt for x' = f(x).
template <typename Vec, typename F>
Vec rk4_step(const F& f, const Vec& x, double dt) {
    auto axpy = [](const Vec& a, double s, const Vec& b) {
        Vec r = a;
        for (std::size_t i = 0; i < r.size(); ++i) r[i] += s * b[i];
        return r;
    };
    const Vec k1 = f(x);
    const Vec k2 = f(axpy(x, 0.5 * dt, k1));
    const Vec k3 = f(axpy(x, 0.5 * dt, k2));
    const Vec k4 = f(axpy(x, dt, k3));
    Vec out = x;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    return out;
}

/// Ground-truth states alongside noisy observations, both 3 x n_steps.
struct Trajectory {
    TimeSeries states;
    TimeSeries observations;
    double sigma_noise = 0.0;
    std::uint64_t seed = 0;
};

/// RK4 trajectory with states[0] == initial_state. Observations start as a copy.
inline Trajectory integrate_rk4(const OdeSystem& sys) {
    if (!(sys.dt > 0.0) || sys.n_steps < 1) {
        throw std::invalid_argument("integrate_rk4: need dt > 0 and n_steps >= 1");
    }
    TimeSeries states = TimeSeries::zeros(3, sys.n_steps);
    State3 x = sys.initial_state;
    auto f = [&](const State3& s) { return sys.rhs(s); };
    for (std::size_t t = 0; t < sys.n_steps; ++t) {
        for (std::size_t d = 0; d < 3; ++d) {
            if (!std::isfinite(x[d])) {
                throw NumericError("integrate_rk4: non-finite state at step " + std::to_string(t) + " of " +
                                   sys.name);
            }
            states.at(d, t) = x[d];
        }
        if (t + 1 < sys.n_steps) x = rk4_step(f, x, sys.dt);
    }
    return {states, states, 0.0, 0};
}

/// observations = states + N(0, sigma^2), drawn channel by channel from Rng(seed).
inline Trajectory add_noise(const Trajectory& traj, double sigma_noise, std::uint64_t seed) {
    if (!(sigma_noise >= 0.0)) {
        throw std::invalid_argument("add_noise: sigma_noise must be >= 0");
    }
    Trajectory out = traj;
    out.sigma_noise = sigma_noise;
    out.seed = seed;
    out.observations = traj.states;
    if (sigma_noise == 0.0) return out;
    Rng rng(seed);
    for (std::size_t d = 0; d < out.observations.channels(); ++d) {
        for (double& v : out.observations.row(d)) v += sigma_noise * rng.normal();
    }
    return out;
}

/// Half-open [begin, end) step ranges of a sequential train/val/test split.
struct SplitBounds {
    std::size_t train_begin = 0, train_end = 0;
    std::size_t val_begin = 0, val_end = 0;
    std::size_t test_begin = 0, test_end = 0;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"train", {train_begin, train_end}}, {"val", {val_begin, val_end}}, {"test", {test_begin, test_end}}};
    }
};

inline SplitBounds temporal_split_bounds(std::size_t length, double train, double val, double test) {
    if (train <= 0.0 || val < 0.0 || test <= 0.0 || std::abs(train + val + test - 1.0) > 1e-9) {
        throw std::invalid_argument("split fractions must be positive and sum to 1");
    }
    const auto cut = [&](double f) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(length) * f + 1e-9));
    };
    SplitBounds b;
    b.train_end = cut(train);
    b.val_begin = b.train_end;
    b.val_end = cut(train + val);
    b.test_begin = b.val_end;
    b.test_end = length;
    return b;
}

struct SuiteOptions {
    double dt = 0.01;
    std::size_t n_steps = 10000;
    std::uint64_t seed = 2024;
    std::vector<double> noise_levels{0.0, 0.5, 1.0, 1.5, 2.0, 2.5};
    double train_fraction = 0.7;
    double val_fraction = 0.1;
    double test_fraction = 0.2;
};

inline std::string noise_tag(double sigma) {
    const auto s = format_double(sigma);
    return s.find('.') == std::string::npos ? s + ".0" : s;
}

inline std::string dataset_name(const std::string& system, double sigma) {
    return system + "_noise" + noise_tag(sigma);
}

/// Noise seed for one (system, level) pair; distinct per dataset and stable under reordering.
inline std::uint64_t suite_noise_seed(std::uint64_t base, std::size_t system_index, std::size_t level_index) {
    return Rng(base).fork(system_index * 1000 + level_index).next_u64();
}

/// Writes `<system>_noise<sigma>.csv` plus a `.json` sidecar for every system and
/// noise level. Returns the CSV paths in generation order.
inline std::vector<std::filesystem::path> build_synthetic_suite(const std::filesystem::path& out_dir,
                                                                const SuiteOptions& opt = {}) {
    std::filesystem::create_directories(out_dir);
    const std::vector<OdeSystem> systems{lorenz_chaotic(opt.dt, opt.n_steps), lorenz_nonchaotic(opt.dt, opt.n_steps),
                                         rossler(opt.dt, opt.n_steps)};
    const auto split = temporal_split_bounds(opt.n_steps, opt.train_fraction, opt.val_fraction, opt.test_fraction);
    std::vector<std::filesystem::path> written;
    for (std::size_t si = 0; si < systems.size(); ++si) {
        const Trajectory clean = integrate_rk4(systems[si]);
        for (std::size_t ni = 0; ni < opt.noise_levels.size(); ++ni) {
            const double sigma = opt.noise_levels[ni];
            const std::uint64_t seed = suite_noise_seed(opt.seed, si, ni);
            const Trajectory traj = add_noise(clean, sigma, seed);
            const auto name = dataset_name(systems[si].name, sigma);
            const auto csv = out_dir / (name + ".csv");
            save_csv(csv, traj.observations);
            nlohmann::json meta = systems[si].to_json();
            meta["dataset"] = name;
            meta["sigma_noise"] = sigma;
            meta["seed"] = seed;
            meta["suite_seed"] = opt.seed;
            meta["integrator"] = "rk4";
            meta["split_fractions"] = {opt.train_fraction, opt.val_fraction, opt.test_fraction};
            meta["split"] = split.to_json();
            write_file_atomic(out_dir / (name + ".json"), [&](std::ostream& os) { os << meta.dump(2) << '\n'; });
            written.push_back(csv);
        }
    }
    return written;
}

}  // namespace deepedm
