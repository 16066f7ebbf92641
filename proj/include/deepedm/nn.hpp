#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "deepedm/rng.hpp"
#include "deepedm/tensor.hpp"

namespace deepedm {

enum class Mode { train, eval };

/// Per-forward-pass settings. Dropout draws from `rng` in train mode.
struct ForwardContext {
    Mode mode = Mode::eval;
    Rng* rng = nullptr;

    [[nodiscard]] bool training() const noexcept { return mode == Mode::train; }
};

struct NamedParameter {
    std::string path;
    Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

inline void zero_grad(const ParameterList& params) {
    for (const auto& p : params) {
        p.tensor.zero_grad();
    }
}

/// y = x W^T + b over the last dimension of x.
class LinearLayer {
public:
    LinearLayer() = default;

    LinearLayer(Tensor weight, Tensor bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
        if (weight_.rank() != 2 || bias_.rank() != 1 || bias_.dim(0) != weight_.dim(0)) {
            throw DimensionError("linear: weight " + to_string(weight_.shape()) + " and bias " +
                                 to_string(bias_.shape()) + " disagree");
        }
    }

    /// Fan-in uniform init U(-1/sqrt(in), 1/sqrt(in)) for weights, zero bias.
    static LinearLayer init(std::size_t in, std::size_t out, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::vector<double> w(in * out);
        for (double& v : w) v = rng.uniform(-bound, bound);
        return {Tensor::parameter({out, in}, std::move(w)), Tensor::parameter({out}, std::vector<double>(out, 0.0))};
    }

    [[nodiscard]] std::size_t in_features() const { return weight_.dim(1); }
    [[nodiscard]] std::size_t out_features() const { return weight_.dim(0); }

    [[nodiscard]] Tensor forward(const Tensor& x) const {
        if (x.rank() == 0 || x.shape().back() != in_features()) {
            throw DimensionError("linear: input " + to_string(x.shape()) + " does not end in " +
                                 std::to_string(in_features()) + " features");
        }
        Shape out_shape = x.shape();
        out_shape.back() = out_features();
        const Tensor flat = x.rank() == 2 ? x : reshape(x, {x.size() / in_features(), in_features()});
        const Tensor y = add(matmul(flat, weight_, /*transpose_b=*/true), bias_);
        return y.rank() == out_shape.size() && y.shape() == out_shape ? y : reshape(y, out_shape);
    }

    [[nodiscard]] const Tensor& weight() const noexcept { return weight_; }
    [[nodiscard]] const Tensor& bias() const noexcept { return bias_; }

    void collect(const std::string& prefix, ParameterList& out) const {
        out.push_back({prefix + ".weight", weight_});
        out.push_back({prefix + ".bias", bias_});
    }

private:
    Tensor weight_;
    Tensor bias_;
};

/// Stack of linear layers; every layer but the last is followed by GELU and
/// dropout. The final layer is purely linear.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::vector<LinearLayer> layers, double dropout_p) : layers_(std::move(layers)), dropout_p_(dropout_p) {
        if (layers_.empty()) {
            throw std::invalid_argument("mlp: needs at least one layer");
        }
        if (dropout_p_ < 0.0 || dropout_p_ >= 1.0) {
            throw std::invalid_argument("mlp: dropout probability must lie in [0, 1)");
        }
        for (std::size_t i = 1; i < layers_.size(); ++i) {
            if (layers_[i].in_features() != layers_[i - 1].out_features()) {
                throw DimensionError("mlp: layer " + std::to_string(i) + " expects " +
                                     std::to_string(layers_[i].in_features()) + " inputs, previous layer gives " +
                                     std::to_string(layers_[i - 1].out_features()));
            }
        }
    }

    /// widths = {in, hidden..., out}.
    static Mlp init(const std::vector<std::size_t>& widths, double dropout_p, Rng& rng) {
        if (widths.size() < 2) {
            throw std::invalid_argument("mlp: widths must include input and output sizes");
        }
        std::vector<LinearLayer> layers;
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
            layers.push_back(LinearLayer::init(widths[i], widths[i + 1], rng));
        }
        return {std::move(layers), dropout_p};
    }

    [[nodiscard]] Tensor forward(const Tensor& x, const ForwardContext& ctx) const {
        Tensor h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i].forward(h);
            if (i + 1 < layers_.size()) {
                h = gelu(h);
                if (ctx.training() && dropout_p_ > 0.0) {
                    if (ctx.rng == nullptr) {
                        throw std::logic_error("mlp: train mode with dropout requires an Rng");
                    }
                    h = dropout(h, dropout_p_, *ctx.rng);
                }
            }
        }
        return h;
    }

    [[nodiscard]] std::size_t in_features() const { return layers_.front().in_features(); }
    [[nodiscard]] std::size_t out_features() const { return layers_.back().out_features(); }
    [[nodiscard]] const std::vector<LinearLayer>& layers() const noexcept { return layers_; }
    [[nodiscard]] double dropout_p() const noexcept { return dropout_p_; }

    void collect(const std::string& prefix, ParameterList& out) const {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            layers_[i].collect(prefix + ".layers." + std::to_string(i), out);
        }
    }

private:
    std::vector<LinearLayer> layers_;
    double dropout_p_ = 0.0;
};

/// softmax(q k^T / temperature) v. Accepts [rows x dim] or batched
/// [batch x rows x dim] operands; each output row is a convex combination
/// of value rows.
inline Tensor attention(const Tensor& queries, const Tensor& keys, const Tensor& values, double temperature) {
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("attention: temperature must be > 0");
    }
    const std::size_t r = keys.rank();
    if (queries.rank() != r || values.rank() != r || (r != 2 && r != 3)) {
        throw DimensionError("attention: operands must share rank 2 or 3");
    }
    if (keys.dim(r - 2) != values.dim(r - 2)) {
        throw DimensionError("attention: " + std::to_string(keys.dim(r - 2)) + " keys but " +
                             std::to_string(values.dim(r - 2)) + " values");
    }
    Tensor logits = matmul(queries, keys, /*transpose_b=*/true);
    if (temperature != 1.0) {
        logits = scale(logits, 1.0 / temperature);
    }
    return matmul(softmax(logits, logits.rank() - 1), values);
}

/// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
public:
    struct Options {
        double lr = 5e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 1e-4;
    };

    explicit AdamW(ParameterList params) : AdamW(std::move(params), Options()) {}

    AdamW(ParameterList params, Options options) : params_(std::move(params)), opt_(options) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.size(), 0.0);
            v_.emplace_back(p.tensor.size(), 0.0);
        }
    }

    void zero_grad() const { deepedm::zero_grad(params_); }

    void step() {
        for (const auto& p : params_) {
            for (double g : p.tensor.grad()) {
                if (!std::isfinite(g)) {
                    throw NumericError("adamw: non-finite gradient in parameter '" + p.path + "'");
                }
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto w = params_[i].tensor.mutable_data();
            const auto g = params_[i].tensor.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g.empty() ? 0.0 : g[j];
                w[j] -= opt_.lr * opt_.weight_decay * w[j];
                m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj;
                v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
            }
        }
    }

    [[nodiscard]] std::size_t step_count() const noexcept { return step_; }
    [[nodiscard]] const Options& options() const noexcept { return opt_; }
    [[nodiscard]] const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
    [[nodiscard]] const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

private:
    ParameterList params_;
    Options opt_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Text format, one parameter per line after a magic header:
//
//   deepedm-checkpoint 1
//   <count>
//   <path> <rank> <dim0> ... <dimN-1> <value0> ... <valueM-1>
//
// Values are written in shortest round-trip decimal form, so loading a saved
// checkpoint reproduces every parameter bit-for-bit. Paths never contain
// whitespace.

inline constexpr std::string_view kCheckpointMagic = "deepedm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return {buf, res.ptr};
}

inline double parse_double(std::string_view text) {
    double v = 0.0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    if (!text.empty() && *first == '+') ++first;
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last) {
        throw std::invalid_argument("not a number: '" + std::string(text) + "'");
    }
    return v;
}

inline void write_checkpoint(std::ostream& os, const ParameterList& params) {
    os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n' << params.size() << '\n';
    for (const auto& p : params) {
        os << p.path << ' ' << p.tensor.rank();
        for (std::size_t d : p.tensor.shape()) os << ' ' << d;
        for (double v : p.tensor.data()) os << ' ' << format_double(v);
        os << '\n';
    }
}

struct CheckpointEntry {
    Shape shape;
    std::vector<double> values;
};

inline std::map<std::string, CheckpointEntry> read_checkpoint(std::istream& is) {
    std::string magic;
    int version = 0;
    std::size_t count = 0;
    if (!(is >> magic >> version >> count) || magic != kCheckpointMagic) {
        throw CheckpointError("checkpoint: missing '" + std::string(kCheckpointMagic) + "' header");
    }
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    }
    std::map<std::string, CheckpointEntry> entries;
    for (std::size_t i = 0; i < count; ++i) {
        std::string path;
        std::size_t rank = 0;
        if (!(is >> path >> rank)) {
            throw CheckpointError("checkpoint: truncated at entry " + std::to_string(i));
        }
        CheckpointEntry e;
        e.shape.resize(rank);
        for (auto& d : e.shape) {
            if (!(is >> d)) throw CheckpointError("checkpoint: bad shape for '" + path + "'");
        }
        e.values.resize(numel(e.shape));
        std::string token;
        for (auto& v : e.values) {
            if (!(is >> token)) throw CheckpointError("checkpoint: truncated values for '" + path + "'");
            v = parse_double(token);
        }
        entries.emplace(std::move(path), std::move(e));
    }
    return entries;
}

/// Copy checkpoint values into matching parameters. Every parameter must be
/// present with an identical shape.
inline void load_into(const std::map<std::string, CheckpointEntry>& entries, const ParameterList& params) {
    for (const auto& p : params) {
        const auto it = entries.find(p.path);
        if (it == entries.end()) {
            throw CheckpointError("checkpoint: missing parameter '" + p.path + "'");
        }
        if (it->second.shape != p.tensor.shape()) {
            throw CheckpointError("checkpoint: parameter '" + p.path + "' has shape " +
                                  to_string(it->second.shape) + ", model expects " + to_string(p.tensor.shape()));
        }
        std::copy(it->second.values.begin(), it->second.values.end(), p.tensor.mutable_data().begin());
    }
    if (entries.size() != params.size()) {
        throw CheckpointError("checkpoint: holds " + std::to_string(entries.size()) + " parameters, model has " +
                              std::to_string(params.size()));
    }
}

/// Deep copy of parameter values, used to snapshot the best epoch.
inline std::vector<std::vector<double>> snapshot(const ParameterList& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.tensor.to_vector());
    return out;
}

inline void restore(const ParameterList& params, const std::vector<std::vector<double>>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::copy(values.at(i).begin(), values.at(i).end(), params[i].tensor.mutable_data().begin());
    }
}

}  // namespace deepedm
