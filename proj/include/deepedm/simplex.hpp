#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepedm/dynamics.hpp"
#include "deepedm/tensor.hpp"
#include "deepedm/timeseries.hpp"

namespace deepedm {

struct SimplexConfig {
    std::size_t embed_dim = 3;           // E; E + 1 neighbors are used
    std::size_t tau = 1;
    std::optional<double> rbf_sigma;     // unset: distance to the nearest neighbor
    [[nodiscard]] std::size_t neighbors() const noexcept { return embed_dim + 1; }
};

/// Smallest history length for which every horizon step up to `steps` has
/// embed_dim + 1 admissible neighbors.
inline std::size_t simplex_min_length(const SimplexConfig& cfg, std::size_t steps) {
    const std::size_t span = (cfg.embed_dim - 1) * cfg.tau;
    const std::size_t k = cfg.neighbors();
    return std::max(k + steps + span, k + 1 + 2 * span);
}

namespace detail {

struct Neighbor {
    double dist2;
    std::size_t index;
};

inline bool neighbor_less(const Neighbor& a, const Neighbor& b) noexcept {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

/// First k of `pool` in (distance, index) order.
inline std::vector<Neighbor> nearest(std::vector<Neighbor> pool, std::size_t k) {
    k = std::min(k, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(), neighbor_less);
    pool.resize(k);
    return pool;
}

}  // namespace detail

/// Simplex projection from the final delay vector of `history`. Each horizon
/// step dt uses its own neighbor set, drawn from delay vectors that neither
/// overlap the query's window nor lack a value dt steps ahead.
inline std::vector<double> simplex_forecast(std::span<const double> history, const SimplexConfig& cfg,
                                            std::size_t steps) {
    if (cfg.embed_dim < 1 || cfg.tau < 1) {
        throw std::invalid_argument("simplex: embed_dim and tau must be >= 1");
    }
    if (cfg.rbf_sigma && !(*cfg.rbf_sigma > 0.0)) {
        throw std::invalid_argument("simplex: rbf_sigma must be > 0");
    }
    const std::size_t n = history.size();
    const std::size_t need = simplex_min_length(cfg, steps);
    if (n < need) {
        throw std::invalid_argument("simplex: history of length " + std::to_string(n) + " is too short; embed_dim=" +
                                    std::to_string(cfg.embed_dim) + ", tau=" + std::to_string(cfg.tau) +
                                    " and " + std::to_string(steps) + " steps need at least " +
                                    std::to_string(need));
    }
    const std::size_t span = (cfg.embed_dim - 1) * cfg.tau;
    const std::size_t q = n - 1;
    auto dist2 = [&](std::size_t t) {
        double s = 0.0;
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
            const double d = history[q - j * cfg.tau] - history[t - j * cfg.tau];
            s += d * d;
        }
        return s;
    };
    // Distances do not depend on dt; compute once for every admissible vector.
    const std::size_t last_any = n - 2 - span;
    std::vector<detail::Neighbor> all;
    for (std::size_t t = span; t <= last_any; ++t) all.push_back({dist2(t), t});

    std::vector<double> out(steps);
    for (std::size_t dt = 1; dt <= steps; ++dt) {
        const std::size_t last = std::min(n - 1 - dt, last_any);
        std::vector<detail::Neighbor> pool;
        for (const auto& c : all) {
            if (c.index <= last) pool.push_back(c);
        }
        const auto nb = detail::nearest(std::move(pool), cfg.neighbors());
        const double dmin2 = nb.front().dist2;
        const double sigma = cfg.rbf_sigma ? *cfg.rbf_sigma : std::sqrt(dmin2);
        double wsum = 0.0;
        double acc = 0.0;
        for (const auto& c : nb) {
            double w = 0.0;
            if (sigma > 0.0) {
                w = std::exp(-(c.dist2 - dmin2) / (2.0 * sigma * sigma));
            } else {
                w = c.dist2 == dmin2 ? 1.0 : 0.0;
            }
            wsum += w;
            acc += w * history[c.index + dt];
        }
        out[dt - 1] = acc / wsum;
    }
    return out;
}

/// Channel-wise simplex over a [D x T] history; returns [D x H].
inline TimeSeries simplex_multivariate(const TimeSeries& series, const SimplexConfig& cfg, std::size_t steps) {
    std::vector<double> values;
    values.reserve(series.channels() * steps);
    for (std::size_t d = 0; d < series.channels(); ++d) {
        const auto f = simplex_forecast(series.row(d), cfg, steps);
        values.insert(values.end(), f.begin(), f.end());
    }
    return {series.channel_names(), steps, std::move(values)};
}

// ---------------------------------------------------------------------------
// Neighbor recall against ground-truth states.
//
// The trajectory is cut into consecutive non-overlapping windows of `window`
// points. Inside a window, the neighbors of step t are searched among earlier
// steps t' < t whose delay vectors lie entirely within the window. Recall at
// t is |topK_source(t) n topK_state(t)| / K, averaged over all steps with at
// least K candidates, over windows, and over the observed coordinates.

enum class DistanceSource { ground_truth, delay_embedding, latent_kernel };

inline std::string to_string(DistanceSource s) {
    switch (s) {
        case DistanceSource::ground_truth: return "ground_truth";
        case DistanceSource::delay_embedding: return "delay_embedding";
        case DistanceSource::latent_kernel: return "latent_kernel";
    }
    return "?";
}

inline DistanceSource parse_distance_source(const std::string& s) {
    if (s == "ground_truth") return DistanceSource::ground_truth;
    if (s == "delay_embedding" || s == "time_delay") return DistanceSource::delay_embedding;
    if (s == "latent_kernel" || s == "learned") return DistanceSource::latent_kernel;
    throw std::invalid_argument("unknown distance source '" + s + "'");
}

struct RecallConfig {
    std::size_t k = 1;
    std::size_t delta_t = 1;
    std::size_t tau = 1;
    double sigma_noise = 0.0;
    std::optional<std::size_t> coordinate;  // unset: average over every coordinate
    std::size_t window = 96;
    double dt = 0.005;
    std::size_t n_steps = 3000;
    std::uint64_t seed = 7;
};

/// Maps one window of scalar observations (length W) to per-step latents [W x M].
using LatentMap = std::function<Tensor(std::span<const double>)>;

/// Chaotic Lorenz trajectory sampled at rc.dt with rc.sigma_noise observation noise.
inline Trajectory recall_trajectory(const RecallConfig& rc) {
    return add_noise(integrate_rk4(lorenz_chaotic(rc.dt, rc.n_steps)), rc.sigma_noise, rc.seed);
}

inline double knn_recall(const Trajectory& traj, const RecallConfig& rc, DistanceSource source,
                         const LatentMap& latent = {}) {
    if (rc.k < 1 || rc.delta_t < 1 || rc.tau < 1) {
        throw std::invalid_argument("recall: k, delta_t and tau must be >= 1");
    }
    if (source == DistanceSource::latent_kernel && !latent) {
        throw std::invalid_argument("recall: latent_kernel source needs a latent map");
    }
    const std::size_t n = traj.states.length();
    const std::size_t dims = traj.states.channels();
    const std::size_t span = (rc.delta_t - 1) * rc.tau;
    const std::size_t w = rc.window;
    if (w <= span || w - span <= rc.k) {
        throw std::invalid_argument("recall: K=" + std::to_string(rc.k) + " exceeds the candidate pool of a " +
                                    std::to_string(w) + "-step window at delta_t=" + std::to_string(rc.delta_t));
    }
    if (n < w) {
        throw std::invalid_argument("recall: trajectory shorter than one window");
    }
    if (rc.coordinate && *rc.coordinate >= traj.observations.channels()) {
        throw std::out_of_range("recall: coordinate out of range");
    }

    std::vector<std::size_t> coords;
    if (rc.coordinate) {
        coords.push_back(*rc.coordinate);
    } else {
        for (std::size_t c = 0; c < traj.observations.channels(); ++c) coords.push_back(c);
    }

    double total = 0.0;
    std::size_t count = 0;
    const std::size_t m = w - span;  // usable steps per window
    std::vector<detail::Neighbor> pool;
    for (std::size_t c : coords) {
        const auto obs = traj.observations.row(c);
        for (std::size_t s = 0; s + w <= n; s += w) {
            Tensor z;
            if (source == DistanceSource::latent_kernel) {
                z = latent(obs.subspan(s, w));
                if (z.rank() != 2 || z.dim(0) != w) {
                    throw DimensionError("recall: latent map must return [window x M], got " + to_string(z.shape()));
                }
            }
            const auto surrogate = [&](std::size_t a, std::size_t b) {
                double acc = 0.0;
                switch (source) {
                    case DistanceSource::ground_truth:
                        for (std::size_t d = 0; d < dims; ++d) {
                            const double e = traj.states.at(d, a) - traj.states.at(d, b);
                            acc += e * e;
                        }
                        return acc;
                    case DistanceSource::delay_embedding:
                        for (std::size_t j = 0; j < rc.delta_t; ++j) {
                            const double e = obs[a - j * rc.tau] - obs[b - j * rc.tau];
                            acc += e * e;
                        }
                        return acc;
                    case DistanceSource::latent_kernel: {
                        // Larger similarity ranks nearer.
                        const auto zv = z.data();
                        const std::size_t mm = z.dim(1);
                        for (std::size_t j = 0; j < mm; ++j) acc += zv[(a - s) * mm + j] * zv[(b - s) * mm + j];
                        return -acc;
                    }
                }
                return acc;
            };
            for (std::size_t i = rc.k; i < m; ++i) {
                const std::size_t t = s + span + i;
                pool.clear();
                for (std::size_t jj = 0; jj < i; ++jj) {
                    const std::size_t u = s + span + jj;
                    double g = 0.0;
                    for (std::size_t d = 0; d < dims; ++d) {
                        const double e = traj.states.at(d, t) - traj.states.at(d, u);
                        g += e * e;
                    }
                    pool.push_back({g, u});
                }
                const auto truth = detail::nearest(pool, rc.k);
                for (auto& p : pool) p.dist2 = surrogate(t, p.index);
                const auto found = detail::nearest(pool, rc.k);
                std::size_t hits = 0;
                for (const auto& a : found) {
                    for (const auto& b : truth) hits += a.index == b.index ? 1 : 0;
                }
                total += static_cast<double>(hits) / static_cast<double>(rc.k);
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

}  // namespace deepedm
