#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepedm/timeseries.hpp"

namespace deepedm {

/// Pairwise (cascade) summation; error grows as O(log n) instead of O(n).
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 16) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

namespace detail {

inline void check_same_size(std::span<const double> y, std::span<const double> yhat, const char* what) {
    if (y.size() != yhat.size()) {
        throw DimensionError(std::string(what) + ": " + std::to_string(y.size()) + " actuals vs " +
                             std::to_string(yhat.size()) + " forecasts");
    }
}

inline double mean_of(const std::vector<double>& terms) {
    if (terms.empty()) return std::numeric_limits<double>::quiet_NaN();
    return pairwise_sum(terms) / static_cast<double>(terms.size());
}

}  // namespace detail

inline double mse(std::span<const double> y, std::span<const double> yhat) {
    detail::check_same_size(y, yhat, "mse");
    std::vector<double> t(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) t[i] = (y[i] - yhat[i]) * (y[i] - yhat[i]);
    return detail::mean_of(t);
}

inline double mae(std::span<const double> y, std::span<const double> yhat) {
    detail::check_same_size(y, yhat, "mae");
    std::vector<double> t(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) t[i] = std::abs(y[i] - yhat[i]);
    return detail::mean_of(t);
}

inline double smape_term(double y, double f) {
    const double den = std::abs(y) + std::abs(f);
    return den == 0.0 ? 0.0 : std::abs(y - f) / den;
}

/// 200/n * sum |y - f| / (|y| + |f|); terms with 0/0 contribute 0.
inline double smape(std::span<const double> y, std::span<const double> yhat) {
    detail::check_same_size(y, yhat, "smape");
    std::vector<double> t(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) t[i] = smape_term(y[i], yhat[i]);
    return 200.0 * detail::mean_of(t);
}

/// 100/n * sum |y - f| / |y| over nonzero actuals; NaN when every actual is zero.
inline double mape(std::span<const double> y, std::span<const double> yhat) {
    detail::check_same_size(y, yhat, "mape");
    std::vector<double> t;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] != 0.0) t.push_back(std::abs(y[i] - yhat[i]) / std::abs(y[i]));
    }
    return 100.0 * detail::mean_of(t);
}

class ZeroScaleError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Which observations the MASE scale is computed over.
enum class MaseScale {
    full,     // insample followed by the actuals, j = m+1 .. T+H
    insample  // insample only, j = m+1 .. T
};

/// Mean absolute seasonal-difference of the scale range.
inline double mase_scale(std::span<const double> insample, std::span<const double> y, std::size_t m,
                         MaseScale mode = MaseScale::full) {
    if (m < 1) {
        throw std::invalid_argument("mase: seasonality m must be >= 1");
    }
    if (insample.size() < m + 1) {
        throw std::invalid_argument("mase: insample of length " + std::to_string(insample.size()) +
                                    " needs at least m + 1 = " + std::to_string(m + 1) + " values");
    }
    std::vector<double> z(insample.begin(), insample.end());
    if (mode == MaseScale::full) z.insert(z.end(), y.begin(), y.end());
    std::vector<double> t(z.size() - m);
    for (std::size_t j = m; j < z.size(); ++j) t[j - m] = std::abs(z[j] - z[j - m]);
    return detail::mean_of(t);
}

inline double mase(std::span<const double> y, std::span<const double> yhat, std::span<const double> insample,
                   std::size_t m, MaseScale mode = MaseScale::full) {
    detail::check_same_size(y, yhat, "mase");
    const double scale = mase_scale(insample, y, m, mode);
    if (!(scale > 0.0)) {
        throw ZeroScaleError("mase: zero scale (series is constant at lag " + std::to_string(m) + ")");
    }
    return mae(y, yhat) / scale;
}

inline double owa(double smape_model, double mase_model, double smape_naive2, double mase_naive2) {
    if (!(smape_naive2 > 0.0) || !(mase_naive2 > 0.0)) {
        throw std::domain_error("owa: Naive2 reference values must be > 0");
    }
    return 0.5 * (smape_model / smape_naive2 + mase_model / mase_naive2);
}

// ---------------------------------------------------------------------------
// Reference forecasters

inline std::vector<double> naive_forecast(std::span<const double> lookback, std::size_t horizon) {
    if (lookback.empty()) {
        throw std::invalid_argument("naive: empty lookback");
    }
    return std::vector<double>(horizon, lookback.back());
}

inline TimeSeries naive_forecast(const TimeSeries& lookback, std::size_t horizon) {
    std::vector<double> v;
    for (std::size_t d = 0; d < lookback.channels(); ++d) {
        const auto f = naive_forecast(lookback.row(d), horizon);
        v.insert(v.end(), f.begin(), f.end());
    }
    return {lookback.channel_names(), horizon, std::move(v)};
}

/// Sample autocorrelation at lag k.
inline double acf(std::span<const double> x, std::size_t k) {
    const double n = static_cast<double>(x.size());
    const double mean = pairwise_sum(x) / n;
    double den = 0.0;
    for (double v : x) den += (v - mean) * (v - mean);
    if (den == 0.0 || k >= x.size()) return 0.0;
    double num = 0.0;
    for (std::size_t t = 0; t + k < x.size(); ++t) num += (x[t] - mean) * (x[t + k] - mean);
    return num / den;
}

/// 90% autocorrelation test at lag m, as used for the M4 benchmarks.
inline bool seasonality_test(std::span<const double> x, std::size_t m) {
    if (m <= 1 || x.size() < 3 * m) return false;
    double s = 0.0;
    for (std::size_t i = 1; i < m; ++i) {
        const double r = acf(x, i);
        s += r * r;
    }
    const double limit = 1.645 * std::sqrt((1.0 + 2.0 * s) / static_cast<double>(x.size()));
    return std::abs(acf(x, m)) > limit;
}

/// Multiplicative seasonal indices (one per phase t mod m) from a centred moving average.
inline std::vector<double> seasonal_indices(std::span<const double> x, std::size_t m) {
    const std::size_t n = x.size();
    std::vector<double> ratio_sum(m, 0.0);
    std::vector<std::size_t> ratio_count(m, 0);
    const std::size_t half = m / 2;
    for (std::size_t t = half; t + half < n; ++t) {
        double ma = 0.0;
        if (m % 2 == 1) {
            for (std::size_t j = t - half; j <= t + half; ++j) ma += x[j];
            ma /= static_cast<double>(m);
        } else {
            // 2 x m moving average: end points carry half weight.
            ma = 0.5 * x[t - half] + 0.5 * x[t + half];
            for (std::size_t j = t - half + 1; j < t + half; ++j) ma += x[j];
            ma /= static_cast<double>(m);
        }
        ratio_sum[t % m] += x[t] / ma;
        ++ratio_count[t % m];
    }
    std::vector<double> idx(m);
    double total = 0.0;
    for (std::size_t p = 0; p < m; ++p) {
        idx[p] = ratio_sum[p] / static_cast<double>(ratio_count[p]);
        total += idx[p];
    }
    for (double& v : idx) v *= static_cast<double>(m) / total;
    return idx;
}

/// Seasonally adjusted naive forecast. When the lag-m autocorrelation test
/// passes and the lookback is strictly positive, the series is divided by
/// multiplicative seasonal indices, the last adjusted value is repeated, and
/// the indices are re-applied. Otherwise this is the plain naive forecast.
inline std::vector<double> naive2_forecast(std::span<const double> lookback, std::size_t horizon, std::size_t m) {
    if (m < 1) {
        throw std::invalid_argument("naive2: seasonality m must be >= 1");
    }
    if (lookback.size() < m || lookback.empty()) {
        throw std::invalid_argument("naive2: lookback of length " + std::to_string(lookback.size()) +
                                    " is shorter than m = " + std::to_string(m));
    }
    bool positive = true;
    for (double v : lookback) positive = positive && v > 0.0;
    if (m == 1 || !positive || !seasonality_test(lookback, m)) {
        return naive_forecast(lookback, horizon);
    }
    const auto idx = seasonal_indices(lookback, m);
    const std::size_t n = lookback.size();
    const double level = lookback[n - 1] / idx[(n - 1) % m];
    std::vector<double> out(horizon);
    for (std::size_t i = 0; i < horizon; ++i) out[i] = level * idx[(n + i) % m];
    return out;
}

// ---------------------------------------------------------------------------
// Aggregate report over many forecast windows.

struct MetricReport {
    double mse = 0.0;
    double mae = 0.0;
    double smape = 0.0;
    double mape = 0.0;
    double mase = 0.0;
    double owa = std::numeric_limits<double>::quiet_NaN();
    std::size_t n_windows = 0;
};

struct MetricOptions {
    std::size_t seasonality = 1;
    std::optional<std::size_t> prefix;  // evaluate only the first p steps
    MaseScale mase_scale = MaseScale::full;
    bool with_owa = true;
};

namespace detail {

struct Accumulator {
    std::vector<double> sq, ab, sm, mp, ms;

    void add(std::span<const double> y, std::span<const double> f, std::span<const double> insample,
             const MetricOptions& opt) {
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double e = y[i] - f[i];
            sq.push_back(e * e);
            ab.push_back(std::abs(e));
            sm.push_back(smape_term(y[i], f[i]));
            if (y[i] != 0.0) mp.push_back(std::abs(e) / std::abs(y[i]));
        }
        // Series whose scale is zero carry no MASE information and are skipped.
        const double scale = mase_scale(insample, y, opt.seasonality, opt.mase_scale);
        if (scale > 0.0) {
            for (std::size_t i = 0; i < y.size(); ++i) ms.push_back(std::abs(y[i] - f[i]) / scale);
        }
    }
};

}  // namespace detail

/// Pooled metrics: every (window, channel, step) error counts once. `insample`
/// holds the lookback of each window and feeds MASE and the Naive2 reference
/// used for OWA.
inline MetricReport evaluate_forecasts(const std::vector<TimeSeries>& actual, const std::vector<TimeSeries>& forecast,
                                       const std::vector<TimeSeries>& insample, const MetricOptions& opt = {}) {
    if (actual.size() != forecast.size() || actual.size() != insample.size()) {
        throw DimensionError("evaluate: " + std::to_string(actual.size()) + " actual, " +
                             std::to_string(forecast.size()) + " forecast and " + std::to_string(insample.size()) +
                             " insample windows");
    }
    detail::Accumulator model;
    detail::Accumulator ref;
    for (std::size_t w = 0; w < actual.size(); ++w) {
        const auto& a = actual[w];
        const auto& f = forecast[w];
        if (a.channels() != f.channels() || a.length() != f.length() || insample[w].channels() != a.channels()) {
            throw DimensionError("evaluate: window " + std::to_string(w) + " shapes disagree");
        }
        const std::size_t p = opt.prefix ? std::min(*opt.prefix, a.length()) : a.length();
        for (std::size_t d = 0; d < a.channels(); ++d) {
            const auto y = a.row(d).first(p);
            const auto in = insample[w].row(d);
            model.add(y, f.row(d).first(p), in, opt);
            if (opt.with_owa) {
                const auto n2 = naive2_forecast(in, p, opt.seasonality);
                ref.add(y, n2, in, opt);
            }
        }
    }
    MetricReport r;
    r.n_windows = actual.size();
    r.mse = detail::mean_of(model.sq);
    r.mae = detail::mean_of(model.ab);
    r.smape = 200.0 * detail::mean_of(model.sm);
    r.mape = 100.0 * detail::mean_of(model.mp);
    r.mase = detail::mean_of(model.ms);
    if (opt.with_owa) {
        const double s2 = 200.0 * detail::mean_of(ref.sm);
        const double m2 = detail::mean_of(ref.ms);
        if (s2 > 0.0 && m2 > 0.0) r.owa = owa(r.smape, r.mase, s2, m2);
    }
    return r;
}

}  // namespace deepedm
