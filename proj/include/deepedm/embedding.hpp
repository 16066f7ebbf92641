#pragma once

#include <cstddef>

#include "deepedm/tensor.hpp"
#include "deepedm/timeseries.hpp"

namespace deepedm {

/// Delay coordinates of a D-channel series: data[d, j, t] = x[d, t - j*tau],
/// zero-padded before the first step. Lag 0 is the current value.
struct DelayEmbedding {
    std::size_t delta_t = 1;
    std::size_t tau = 1;
    Tensor data;  // [D x delta_t x L]

    [[nodiscard]] std::size_t channels() const { return data.dim(0); }
    [[nodiscard]] std::size_t length() const { return data.dim(2); }

    /// The delta_t-vector for channel d at step t.
    [[nodiscard]] std::vector<double> vector_at(std::size_t d, std::size_t t) const {
        std::vector<double> v(delta_t);
        for (std::size_t j = 0; j < delta_t; ++j) v[j] = data.at(d, j, t);
        return v;
    }
};

/// Tensor form: series is [D x L], on the gradient tape if it requires one.
inline DelayEmbedding make_delay_embedding(const Tensor& series, std::size_t delta_t, std::size_t tau = 1) {
    return {delta_t, tau, delay_embed(series, delta_t, tau)};
}

inline DelayEmbedding delay_embed(const TimeSeries& series, std::size_t delta_t, std::size_t tau = 1) {
    if (series.length() < 1) {
        throw std::invalid_argument("delay_embed: empty series");
    }
    return make_delay_embedding(series.to_tensor(), delta_t, tau);
}

/// Embed the lookback followed by an initial forecast, [D x T] ++ [D x H] -> [D x delta_t x (T+H)].
inline DelayEmbedding embed_extended(const Tensor& lookback, const Tensor& initial_forecast, std::size_t delta_t,
                                     std::size_t tau = 1) {
    if (lookback.rank() != 2 || initial_forecast.rank() != 2 || lookback.dim(0) != initial_forecast.dim(0)) {
        throw DimensionError("embed_extended: lookback " + to_string(lookback.shape()) + " and forecast " +
                             to_string(initial_forecast.shape()) + " must be [D x T] and [D x H]");
    }
    if (initial_forecast.dim(1) == 0) {
        return make_delay_embedding(lookback, delta_t, tau);
    }
    return make_delay_embedding(concat(lookback, initial_forecast, 1), delta_t, tau);
}

}  // namespace deepedm
