#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deepedm/config.hpp"
#include "deepedm/embedding.hpp"
#include "deepedm/nn.hpp"
#include "deepedm/rng.hpp"
#include "deepedm/tensor.hpp"
#include "deepedm/timeseries.hpp"

namespace deepedm {

/// What the kernel regression averages: encoded latents z_{t+1} (M-dim, default)
/// or the raw delay vectors themselves (delta_t-dim).
enum class KernelValues { latent, delay };

struct ModelConfig {
    std::size_t lookback = 96;       // T
    std::size_t horizon = 48;        // H
    std::size_t delta_t = 5;
    std::size_t tau_delay = 1;
    std::size_t latent_dim = 32;     // M
    std::size_t n_blocks = 1;
    std::size_t base_mlp_layers = 2;
    std::size_t dec_mlp_layers = 2;
    std::size_t base_hidden = 0;     // 0: 2 * lookback
    std::size_t dec_hidden = 0;      // 0: 2 * horizon
    double dropout_p = 0.1;
    double temperature = 1.0;
    double gate_bias_init = 2.0;
    KernelValues kernel_values = KernelValues::latent;
    std::uint64_t seed = 1;

    [[nodiscard]] std::size_t base_width() const noexcept { return base_hidden ? base_hidden : 2 * lookback; }
    [[nodiscard]] std::size_t dec_width() const noexcept { return dec_hidden ? dec_hidden : 2 * horizon; }
    [[nodiscard]] std::size_t value_dim() const noexcept {
        return kernel_values == KernelValues::latent ? latent_dim : delta_t;
    }

    void validate() const {
        const auto bad = [](const std::string& m) { throw ConfigError("model: " + m); };
        if (lookback < 1 || horizon < 1) bad("lookback and horizon must be >= 1");
        if (delta_t < 1 || tau_delay < 1) bad("delta_t and tau_delay must be >= 1");
        if (latent_dim < delta_t) bad("latent_dim must be >= delta_t");
        if (n_blocks < 1 || n_blocks > 3) bad("n_blocks must lie in [1, 3]");
        if (base_mlp_layers < 1 || base_mlp_layers > 3) bad("base_mlp_layers must lie in [1, 3]");
        if (dec_mlp_layers < 1 || dec_mlp_layers > 3) bad("dec_mlp_layers must lie in [1, 3]");
        if (dropout_p < 0.0 || dropout_p >= 1.0) bad("dropout_p must lie in [0, 1)");
        if (!(temperature > 0.0)) bad("temperature must be > 0");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"lookback", c.lookback},
            {"horizon", c.horizon},
            {"delta_t", c.delta_t},
            {"tau_delay", c.tau_delay},
            {"latent_dim", c.latent_dim},
            {"n_blocks", c.n_blocks},
            {"base_mlp_layers", c.base_mlp_layers},
            {"dec_mlp_layers", c.dec_mlp_layers},
            {"base_hidden", c.base_width()},
            {"dec_hidden", c.dec_width()},
            {"dropout_p", c.dropout_p},
            {"temperature", c.temperature},
            {"gate_bias_init", c.gate_bias_init},
            {"kernel_values", c.kernel_values == KernelValues::latent ? "latent" : "delay"},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
    constexpr std::string_view where = "model";
    detail::check_keys(j, where,
                       {"lookback", "horizon", "delta_t", "tau_delay", "latent_dim", "n_blocks", "base_mlp_layers",
                        "dec_mlp_layers", "base_hidden", "dec_hidden", "dropout_p", "temperature", "gate_bias_init",
                        "kernel_values", "seed"});
    detail::read_key(j, where, "lookback", c.lookback);
    detail::read_key(j, where, "horizon", c.horizon);
    detail::read_key(j, where, "delta_t", c.delta_t);
    detail::read_key(j, where, "tau_delay", c.tau_delay);
    detail::read_key(j, where, "latent_dim", c.latent_dim);
    detail::read_key(j, where, "n_blocks", c.n_blocks);
    detail::read_key(j, where, "base_mlp_layers", c.base_mlp_layers);
    detail::read_key(j, where, "dec_mlp_layers", c.dec_mlp_layers);
    detail::read_key(j, where, "base_hidden", c.base_hidden);
    detail::read_key(j, where, "dec_hidden", c.dec_hidden);
    detail::read_key(j, where, "dropout_p", c.dropout_p);
    detail::read_key(j, where, "temperature", c.temperature);
    detail::read_key(j, where, "gate_bias_init", c.gate_bias_init);
    detail::read_key(j, where, "seed", c.seed);
    if (j.contains("kernel_values")) {
        std::string v;
        detail::read_key(j, where, "kernel_values", v);
        if (v == "latent") {
            c.kernel_values = KernelValues::latent;
        } else if (v == "delay") {
            c.kernel_values = KernelValues::delay;
        } else {
            throw ConfigError("model.kernel_values: expected 'latent' or 'delay', got '" + v + "'");
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Reversible instance normalization, per row of a [rows x T] lookback.

struct RevinState {
    std::vector<double> mean;
    std::vector<double> stdev;
    double eps = 1e-5;
    static constexpr double degenerate_std = 1e-8;

    [[nodiscard]] bool degenerate(std::size_t r) const { return stdev[r] < degenerate_std; }
};

inline std::pair<Tensor, RevinState> revin(const Tensor& x, double eps = 1e-5) {
    if (x.rank() != 2 || x.dim(1) == 0) {
        throw DimensionError("revin: expected non-empty [rows x T], got " + to_string(x.shape()));
    }
    const std::size_t rows = x.dim(0);
    const std::size_t len = x.dim(1);
    RevinState st;
    st.eps = eps;
    st.mean.resize(rows);
    st.stdev.resize(rows);
    std::vector<double> scale(rows);
    std::vector<double> shift(rows);
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double m = 0.0;
        for (std::size_t t = 0; t < len; ++t) m += xv[r * len + t];
        m /= static_cast<double>(len);
        double v = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            const double e = xv[r * len + t] - m;
            v += e * e;
        }
        st.mean[r] = m;
        st.stdev[r] = std::sqrt(v / static_cast<double>(len));
        if (st.degenerate(r)) {
            scale[r] = 0.0;
            shift[r] = 0.0;
        } else {
            scale[r] = 1.0 / (st.stdev[r] + eps);
            shift[r] = -m * scale[r];
        }
    }
    return {affine_rows(x, scale, shift), std::move(st)};
}

/// Undo revin. Degenerate rows map back to their mean.
inline Tensor revin_inverse(const Tensor& y, const RevinState& st) {
    if (y.rank() != 2 || y.dim(0) != st.mean.size()) {
        throw DimensionError("revin_inverse: " + to_string(y.shape()) + " does not match " +
                             std::to_string(st.mean.size()) + " normalized rows");
    }
    std::vector<double> scale(st.mean.size());
    for (std::size_t r = 0; r < scale.size(); ++r) scale[r] = st.degenerate(r) ? 0.0 : st.stdev[r] + st.eps;
    return affine_rows(y, scale, st.mean);
}

// ---------------------------------------------------------------------------
// Stages

/// Channel-wise base forecast: each length-T row through the shared MLP.
inline Tensor base_predict(const Mlp& f, const Tensor& lookback, const ForwardContext& ctx) {
    if (lookback.rank() != 2 || lookback.dim(1) != f.in_features()) {
        throw DimensionError("base_predict: lookback " + to_string(lookback.shape()) + " needs [D x " +
                             std::to_string(f.in_features()) + "]");
    }
    return f.forward(lookback, ctx);
}

/// [D x delta_t x L] delay vectors -> [D x M x L] latents via the shared encoder.
inline Tensor encode(const LinearLayer& enc, const DelayEmbedding& emb) {
    if (emb.data.dim(1) != enc.in_features()) {
        throw DimensionError("encode: embedding has delta_t=" + std::to_string(emb.data.dim(1)) +
                             ", encoder expects " + std::to_string(enc.in_features()));
    }
    return transpose(enc.forward(transpose(emb.data)));
}

/// Nadaraya-Watson over the lookback region. z is [D x M x (T+H)] and values
/// [D x V x (T+H)]. Forecast step i (0-based) uses the query z[:, T-1+i],
/// keys z[:, 0..T-1] and values[:, 1..T]. Returns [D x V x H].
inline Tensor kernel_regress(const Tensor& z, const Tensor& values, std::size_t lookback, std::size_t horizon,
                             double temperature) {
    if (z.rank() != 3 || values.rank() != 3 || z.dim(2) != lookback + horizon || values.dim(2) != z.dim(2) ||
        values.dim(0) != z.dim(0)) {
        throw DimensionError("kernel_regress: z " + to_string(z.shape()) + " and values " +
                             to_string(values.shape()) + " must both span T+H=" +
                             std::to_string(lookback + horizon) + " steps");
    }
    if (lookback < 1 || horizon < 1) {
        throw DimensionError("kernel_regress: needs T >= 1 and H >= 1");
    }
    const Tensor zt = transpose(z);  // [D x (T+H) x M]
    const Tensor vt = transpose(values);
    const Tensor keys = slice(zt, 1, 0, lookback);
    const Tensor vals = slice(vt, 1, 1, lookback);
    const Tensor queries = slice(zt, 1, lookback - 1, horizon);
    return transpose(attention(queries, keys, vals, temperature));
}

inline Tensor kernel_regress(const Tensor& z, std::size_t lookback, std::size_t horizon, double temperature) {
    return kernel_regress(z, z, lookback, horizon, temperature);
}

/// [D x M x H] -> flatten each channel row-major -> shared MLP -> [D x H].
inline Tensor decode(const Mlp& dec, const Tensor& ybar, const ForwardContext& ctx) {
    if (ybar.rank() != 3 || ybar.dim(1) * ybar.dim(2) != dec.in_features()) {
        throw DimensionError("decode: input " + to_string(ybar.shape()) + " does not flatten to " +
                             std::to_string(dec.in_features()) + " features");
    }
    return dec.forward(reshape(ybar, {ybar.dim(0), ybar.dim(1) * ybar.dim(2)}), ctx);
}

struct DeepEdmBlock {
    LinearLayer encoder;  // delta_t -> M
    Mlp decoder;          // V*H -> H
    LinearLayer gate;     // H -> H

    static DeepEdmBlock init(const ModelConfig& cfg, Rng& rng) {
        DeepEdmBlock b;
        b.encoder = LinearLayer::init(cfg.delta_t, cfg.latent_dim, rng);
        std::vector<std::size_t> widths{cfg.value_dim() * cfg.horizon};
        for (std::size_t i = 1; i < cfg.dec_mlp_layers; ++i) widths.push_back(cfg.dec_width());
        widths.push_back(cfg.horizon);
        b.decoder = Mlp::init(widths, cfg.dropout_p, rng);
        b.gate = LinearLayer::init(cfg.horizon, cfg.horizon, rng);
        for (double& v : b.gate.bias().mutable_data()) v = cfg.gate_bias_init;
        return b;
    }

    void collect(const std::string& prefix, ParameterList& out) const {
        encoder.collect(prefix + ".encoder", out);
        decoder.collect(prefix + ".decoder", out);
        gate.collect(prefix + ".gate", out);
    }
};

/// g * forecast_in + (1 - g) * refinement, with g = sigmoid(gate(forecast_in)).
inline Tensor block_forward(const DeepEdmBlock& block, const ModelConfig& cfg, const Tensor& lookback,
                            const Tensor& forecast_in, const ForwardContext& ctx) {
    const DelayEmbedding emb = embed_extended(lookback, forecast_in, cfg.delta_t, cfg.tau_delay);
    const Tensor z = encode(block.encoder, emb);
    const Tensor& vals = cfg.kernel_values == KernelValues::latent ? z : emb.data;
    const Tensor ybar = kernel_regress(z, vals, cfg.lookback, cfg.horizon, cfg.temperature);
    const Tensor refined = decode(block.decoder, ybar, ctx);
    const Tensor g = sigmoid(block.gate.forward(forecast_in));
    return add(refined, mul(g, sub(forecast_in, refined)));
}

class DeepEdmModel {
public:
    DeepEdmModel() = default;

    explicit DeepEdmModel(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        std::vector<std::size_t> widths{cfg_.lookback};
        for (std::size_t i = 1; i < cfg_.base_mlp_layers; ++i) widths.push_back(cfg_.base_width());
        widths.push_back(cfg_.horizon);
        base_ = Mlp::init(widths, cfg_.dropout_p, rng);
        for (std::size_t b = 0; b < cfg_.n_blocks; ++b) blocks_.push_back(DeepEdmBlock::init(cfg_, rng));
    }

    [[nodiscard]] const ModelConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] const Mlp& base() const noexcept { return base_; }
    [[nodiscard]] const std::vector<DeepEdmBlock>& blocks() const noexcept { return blocks_; }

    [[nodiscard]] ParameterList parameters() const {
        ParameterList out;
        base_.collect("base", out);
        for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect("blocks." + std::to_string(b), out);
        return out;
    }

    /// [rows x T] -> [rows x H]. Rows are independent channels (or channel-windows).
    [[nodiscard]] Tensor forward(const Tensor& lookback, const ForwardContext& ctx) const {
        if (lookback.rank() != 2 || lookback.dim(1) != cfg_.lookback) {
            throw DimensionError("model: lookback " + to_string(lookback.shape()) + " needs [D x " +
                                 std::to_string(cfg_.lookback) + "]");
        }
        const auto [xn, st] = revin(lookback);
        Tensor f = base_predict(base_, xn, ctx);
        for (const auto& block : blocks_) f = block_forward(block, cfg_, xn, f, ctx);
        return revin_inverse(f, st);
    }

    /// Encoder-0 latents of one normalized window, [W x M]. Used for neighbor recall.
    [[nodiscard]] Tensor window_latents(std::span<const double> window) const {
        const Tensor x = Tensor::from({1, window.size()}, {window.begin(), window.end()});
        const auto [xn, st] = revin(x);
        const Tensor z = encode(blocks_.front().encoder, make_delay_embedding(xn, cfg_.delta_t, cfg_.tau_delay));
        return reshape(transpose(z), {window.size(), cfg_.latent_dim}).detach();
    }

    void save(const std::filesystem::path& checkpoint) const {
        write_file_atomic(checkpoint, [&](std::ostream& os) { write_checkpoint(os, parameters()); });
        write_file_atomic(config_path(checkpoint), [&](std::ostream& os) { os << to_json(cfg_).dump(2) << '\n'; });
    }

    /// Rebuild from a checkpoint and its config echo.
    static DeepEdmModel load(const std::filesystem::path& checkpoint) {
        std::ifstream cj(config_path(checkpoint));
        if (!cj) {
            throw CheckpointError("checkpoint: missing config echo '" + config_path(checkpoint).string() + "'");
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(cj);
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError(std::string("checkpoint: bad config echo: ") + e.what());
        }
        DeepEdmModel m(model_config_from_json(j));
        std::ifstream is(checkpoint);
        if (!is) {
            throw CheckpointError("checkpoint: cannot open '" + checkpoint.string() + "'");
        }
        load_into(read_checkpoint(is), m.parameters());
        return m;
    }

    static std::filesystem::path config_path(const std::filesystem::path& checkpoint) {
        auto p = checkpoint;
        p += ".json";
        return p;
    }

private:
    ModelConfig cfg_;
    Mlp base_;
    std::vector<DeepEdmBlock> blocks_;
};

/// Full forward for one [D x T] lookback.
inline Tensor model_forward(const DeepEdmModel& model, const Tensor& lookback, const ForwardContext& ctx) {
    return model.forward(lookback, ctx);
}

}  // namespace deepedm
