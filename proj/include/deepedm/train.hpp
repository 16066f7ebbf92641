#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepedm/config.hpp"
#include "deepedm/loss.hpp"
#include "deepedm/model.hpp"
#include "deepedm/nn.hpp"
#include "deepedm/rng.hpp"
#include "deepedm/timeseries.hpp"

namespace deepedm {

/// Sliding (lookback, target) pairs over one series. Window i covers steps
/// [start_i, start_i + T) as lookback and [start_i + T, start_i + T + H) as target.
class WindowSet {
public:
    WindowSet() = default;
    WindowSet(std::shared_ptr<const TimeSeries> series, std::vector<std::size_t> starts, std::size_t lookback,
              std::size_t horizon)
        : series_(std::move(series)), starts_(std::move(starts)), lookback_(lookback), horizon_(horizon) {}

    [[nodiscard]] std::size_t size() const noexcept { return starts_.size(); }
    [[nodiscard]] bool empty() const noexcept { return starts_.empty(); }
    [[nodiscard]] std::size_t lookback() const noexcept { return lookback_; }
    [[nodiscard]] std::size_t horizon() const noexcept { return horizon_; }
    [[nodiscard]] std::size_t channels() const { return series_ ? series_->channels() : 0; }
    [[nodiscard]] std::size_t start(std::size_t i) const { return starts_.at(i); }
    [[nodiscard]] const std::vector<std::size_t>& starts() const noexcept { return starts_; }
    [[nodiscard]] const TimeSeries& series() const { return *series_; }

    [[nodiscard]] TimeSeries lookback_of(std::size_t i) const { return series_->slice_time(start(i), lookback_); }
    [[nodiscard]] TimeSeries target_of(std::size_t i) const {
        return series_->slice_time(start(i) + lookback_, horizon_);
    }

    /// Rows ordered (window, channel): lookback [n*D x T], target [n*D x H],
    /// and the last lookback value of every row.
    struct Batch {
        Tensor lookback;
        Tensor target;
        std::vector<double> last;
    };

    [[nodiscard]] Batch batch(std::span<const std::size_t> idx) const {
        const std::size_t d = channels();
        const std::size_t rows = idx.size() * d;
        std::vector<double> x(rows * lookback_);
        std::vector<double> y(rows * horizon_);
        std::vector<double> last(rows);
        std::size_t r = 0;
        for (std::size_t i : idx) {
            const std::size_t s = start(i);
            for (std::size_t c = 0; c < d; ++c, ++r) {
                const auto row = series_->row(c);
                std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(s), lookback_,
                            x.begin() + static_cast<std::ptrdiff_t>(r * lookback_));
                std::copy_n(row.begin() + static_cast<std::ptrdiff_t>(s + lookback_), horizon_,
                            y.begin() + static_cast<std::ptrdiff_t>(r * horizon_));
                last[r] = row[s + lookback_ - 1];
            }
        }
        return {Tensor::from({rows, lookback_}, std::move(x)), Tensor::from({rows, horizon_}, std::move(y)),
                std::move(last)};
    }

private:
    std::shared_ptr<const TimeSeries> series_;
    std::vector<std::size_t> starts_;
    std::size_t lookback_ = 0;
    std::size_t horizon_ = 0;
};

/// Windows lying entirely inside steps [begin, end). With stride 1 there are
/// (end - begin) - T - H + 1 of them.
inline WindowSet make_windows(std::shared_ptr<const TimeSeries> series, std::size_t lookback, std::size_t horizon,
                              std::size_t stride = 1, std::size_t begin = 0,
                              std::size_t end = std::numeric_limits<std::size_t>::max()) {
    if (stride < 1 || lookback < 1) {
        throw std::invalid_argument("make_windows: stride and lookback must be >= 1");
    }
    end = std::min(end, series->length());
    if (begin > end || end - begin < lookback + horizon) {
        throw std::invalid_argument("make_windows: range of " + std::to_string(end > begin ? end - begin : 0) +
                                    " steps is shorter than T + H = " + std::to_string(lookback + horizon));
    }
    std::vector<std::size_t> starts;
    for (std::size_t s = begin; s + lookback + horizon <= end; s += stride) starts.push_back(s);
    return {std::move(series), std::move(starts), lookback, horizon};
}

inline WindowSet make_windows(const TimeSeries& series, std::size_t lookback, std::size_t horizon,
                              std::size_t stride = 1) {
    return make_windows(std::make_shared<const TimeSeries>(series), lookback, horizon, stride);
}

struct TrainConfig {
    std::size_t epochs = 250;
    std::size_t batch_size = 32;
    double lr = 5e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t patience = 10;
    std::size_t train_stride = 1;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs < 1 || batch_size < 1 || train_stride < 1) {
            throw ConfigError("train: epochs, batch_size and train_stride must be >= 1");
        }
        if (!(lr > 0.0) || weight_decay < 0.0) {
            throw ConfigError("train: lr must be > 0 and weight_decay >= 0");
        }
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},       {"batch_size", c.batch_size},     {"lr", c.lr},
            {"weight_decay", c.weight_decay}, {"beta1", c.beta1},          {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},   {"patience", c.patience},         {"train_stride", c.train_stride},
            {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    constexpr std::string_view where = "train";
    detail::check_keys(j, where,
                       {"epochs", "batch_size", "lr", "weight_decay", "beta1", "beta2", "adam_eps", "patience",
                        "train_stride", "seed"});
    detail::read_key(j, where, "epochs", c.epochs);
    detail::read_key(j, where, "batch_size", c.batch_size);
    detail::read_key(j, where, "lr", c.lr);
    detail::read_key(j, where, "weight_decay", c.weight_decay);
    detail::read_key(j, where, "beta1", c.beta1);
    detail::read_key(j, where, "beta2", c.beta2);
    detail::read_key(j, where, "adam_eps", c.adam_eps);
    detail::read_key(j, where, "patience", c.patience);
    detail::read_key(j, where, "train_stride", c.train_stride);
    detail::read_key(j, where, "seed", c.seed);
    c.validate();
    return c;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lambda_mean = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
};

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
    os << "epoch,train_loss,val_loss,lambda_mean\n";
    for (const auto& r : history) {
        os << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_loss) << ','
           << format_double(r.lambda_mean) << '\n';
    }
}

/// Composite loss of the model over every window (eval mode), weighted by rows.
inline double evaluate_loss(const DeepEdmModel& model, const WindowSet& windows, const LossConfig& loss_cfg,
                            std::size_t batch_size = 256) {
    if (windows.empty()) {
        throw std::invalid_argument("evaluate_loss: no windows");
    }
    const ForwardContext ctx{Mode::eval, nullptr};
    std::vector<std::size_t> idx(windows.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    double total = 0.0;
    for (std::size_t b = 0; b < idx.size(); b += batch_size) {
        const std::size_t n = std::min(batch_size, idx.size() - b);
        const auto batch = windows.batch(std::span<const std::size_t>(idx).subspan(b, n));
        const Tensor pred = model.forward(batch.lookback, ctx);
        total += composite_loss(batch.target, pred.detach(), batch.last, loss_cfg).item() * static_cast<double>(n);
    }
    return total / static_cast<double>(windows.size());
}

/// Forecasts for every window, each [D x H], in window order.
inline std::vector<TimeSeries> predict(const DeepEdmModel& model, const WindowSet& windows,
                                       std::size_t batch_size = 256) {
    const ForwardContext ctx{Mode::eval, nullptr};
    std::vector<std::size_t> idx(windows.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<TimeSeries> out;
    const std::size_t d = windows.channels();
    const std::size_t h = windows.horizon();
    for (std::size_t b = 0; b < idx.size(); b += batch_size) {
        const std::size_t n = std::min(batch_size, idx.size() - b);
        const auto batch = windows.batch(std::span<const std::size_t>(idx).subspan(b, n));
        const auto pv = model.forward(batch.lookback, ctx).to_vector();
        for (std::size_t w = 0; w < n; ++w) {
            out.emplace_back(windows.series().channel_names(), h,
                             std::vector<double>(pv.begin() + static_cast<std::ptrdiff_t>(w * d * h),
                                                 pv.begin() + static_cast<std::ptrdiff_t>((w + 1) * d * h)));
        }
    }
    return out;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// AdamW over shuffled mini-batches (the last partial batch included), early
/// stopping on validation composite loss. Stops once more than `patience`
/// consecutive epochs fail to improve, then restores the best parameters.
inline TrainResult train(DeepEdmModel& model, const WindowSet& train_set, const WindowSet& val_set,
                         const TrainConfig& cfg, const LossConfig& loss_cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    loss_cfg.validate();
    if (train_set.empty() || val_set.empty()) {
        throw std::invalid_argument("train: train and validation windows must be non-empty");
    }
    const ParameterList params = model.parameters();
    AdamW opt(params, {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
    Rng order_rng(cfg.seed);
    Rng dropout_rng = order_rng.fork(1);
    const ForwardContext ctx{Mode::train, &dropout_rng};

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < train_set.size(); i += cfg.train_stride) order.push_back(i);

    TrainResult result;
    auto best = snapshot(params);
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle(std::span<std::size_t>(order), order_rng);
        double loss_sum = 0.0;
        double lambda_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - b);
            const auto batch = train_set.batch(std::span<const std::size_t>(order).subspan(b, n));
            opt.zero_grad();
            const Tensor pred = model.forward(batch.lookback, ctx);
            double lambda = 0.0;
            const Tensor loss = composite_loss(batch.target, pred, batch.last, loss_cfg, &lambda);
            if (!std::isfinite(loss.item())) {
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batches));
            }
            backward(loss);
            opt.step();
            loss_sum += loss.item() * static_cast<double>(n);
            lambda_sum += lambda;
            ++batches;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.lambda_mean = lambda_sum / static_cast<double>(batches);
        rec.val_loss = evaluate_loss(model, val_set, loss_cfg);
        if (!std::isfinite(rec.val_loss)) {
            throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
        }
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (rec.val_loss < result.best_val_loss) {
            result.best_val_loss = rec.val_loss;
            result.best_epoch = epoch;
            best = snapshot(params);
            since_best = 0;
        } else if (++since_best > cfg.patience) {
            result.stopped_early = true;
            break;
        }
    }
    restore(params, best);
    return result;
}

}  // namespace deepedm
