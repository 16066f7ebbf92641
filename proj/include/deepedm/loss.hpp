#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepedm/config.hpp"
#include "deepedm/tensor.hpp"

namespace deepedm {

enum class ErrNorm { mae, mse };

struct LossConfig {
    ErrNorm err_norm = ErrNorm::mae;
    bool adaptive_lambda = true;
    double fixed_lambda = 0.5;  // used when adaptive_lambda is off

    void validate() const {
        if (fixed_lambda < 0.0 || fixed_lambda > 1.0) {
            throw ConfigError("loss: fixed_lambda must lie in [0, 1]");
        }
    }
};

inline nlohmann::json to_json(const LossConfig& c) {
    return {{"err_norm", c.err_norm == ErrNorm::mae ? "mae" : "mse"},
            {"adaptive_lambda", c.adaptive_lambda},
            {"fixed_lambda", c.fixed_lambda}};
}

inline LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig c = {}) {
    constexpr std::string_view where = "loss";
    detail::check_keys(j, where, {"err_norm", "adaptive_lambda", "fixed_lambda"});
    if (j.contains("err_norm")) {
        std::string v;
        detail::read_key(j, where, "err_norm", v);
        if (v == "mae") {
            c.err_norm = ErrNorm::mae;
        } else if (v == "mse") {
            c.err_norm = ErrNorm::mse;
        } else {
            throw ConfigError("loss.err_norm: expected 'mae' or 'mse', got '" + v + "'");
        }
    }
    detail::read_key(j, where, "adaptive_lambda", c.adaptive_lambda);
    detail::read_key(j, where, "fixed_lambda", c.fixed_lambda);
    c.validate();
    return c;
}

namespace detail {

inline void check_pair(const Tensor& y, const Tensor& yhat, const char* what) {
    if (y.rank() != 2 || y.shape() != yhat.shape()) {
        throw DimensionError(std::string(what) + ": target " + to_string(y.shape()) + " and prediction " +
                             to_string(yhat.shape()) + " must be equal [rows x H]");
    }
}

/// First differences along the horizon. With an anchor (one value per row,
/// the last lookback value) there are H of them, otherwise H - 1.
inline Tensor first_differences(const Tensor& x, std::span<const double> anchor) {
    const std::size_t rows = x.dim(0);
    const std::size_t h = x.dim(1);
    if (!anchor.empty()) {
        if (anchor.size() != rows) {
            throw DimensionError("first differences: " + std::to_string(anchor.size()) + " anchors for " +
                                 std::to_string(rows) + " rows");
        }
        const Tensor ext = concat(Tensor::from({rows, 1}, {anchor.begin(), anchor.end()}), x, 1);
        return sub(slice(ext, 1, 1, h), slice(ext, 1, 0, h));
    }
    if (h < 2) {
        throw std::invalid_argument("temporal difference loss needs H >= 2 without a lookback anchor");
    }
    return sub(slice(x, 1, 1, h - 1), slice(x, 1, 0, h - 1));
}

}  // namespace detail

/// Mean over all elements of |yhat - y| (mae) or (yhat - y)^2 (mse).
inline Tensor loss_err(const Tensor& y, const Tensor& yhat, ErrNorm norm) {
    detail::check_pair(y, yhat, "loss_err");
    const Tensor e = sub(yhat, y);
    return mean(norm == ErrNorm::mae ? abs(e) : square(e));
}

/// Mean absolute error between first differences of target and prediction.
inline Tensor loss_td(const Tensor& y, const Tensor& yhat, std::span<const double> lookback_last = {}) {
    detail::check_pair(y, yhat, "loss_td");
    return mean(abs(sub(detail::first_differences(yhat, lookback_last), detail::first_differences(y, lookback_last))));
}

/// Per-row fraction of steps whose difference signs disagree (sgn(0) = 0),
/// averaged over rows. A plain number: no gradient flows through it.
inline double adaptive_lambda(const Tensor& y, const Tensor& yhat, std::span<const double> lookback_last = {}) {
    detail::check_pair(y, yhat, "adaptive_lambda");
    const Tensor dy = detail::first_differences(y.detach(), lookback_last);
    const Tensor dp = detail::first_differences(yhat.detach(), lookback_last);
    const std::size_t rows = dy.dim(0);
    const std::size_t n = dy.dim(1);
    const auto a = dy.data();
    const auto b = dp.data();
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t mismatched = 0;
        for (std::size_t i = 0; i < n; ++i) mismatched += sgn(a[r * n + i]) != sgn(b[r * n + i]) ? 1 : 0;
        total += static_cast<double>(mismatched) / static_cast<double>(n);
    }
    return total / static_cast<double>(rows);
}

/// lambda * L_err + (1 - lambda) * L_td. Writes the lambda used to `lambda_out`.
inline Tensor composite_loss(const Tensor& y, const Tensor& yhat, std::span<const double> lookback_last,
                             const LossConfig& cfg, double* lambda_out = nullptr) {
    const double lambda = cfg.adaptive_lambda ? adaptive_lambda(y, yhat, lookback_last) : cfg.fixed_lambda;
    if (lambda_out) *lambda_out = lambda;
    const Tensor err = loss_err(y, yhat, cfg.err_norm);
    const Tensor td = loss_td(y, yhat, lookback_last);
    return add(scale(err, lambda), scale(td, 1.0 - lambda));
}

}  // namespace deepedm
