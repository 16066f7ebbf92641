#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deepedm/config.hpp"
#include "deepedm/dynamics.hpp"
#include "deepedm/loss.hpp"
#include "deepedm/metrics.hpp"
#include "deepedm/model.hpp"
#include "deepedm/simplex.hpp"
#include "deepedm/timeseries.hpp"
#include "deepedm/train.hpp"

namespace deepedm {

/// Names a failing experiment stage; the message starts with the stage.
class StageError : public std::runtime_error {
public:
    StageError(const std::string& stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(stage) {}
    [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

// ---------------------------------------------------------------------------
// Configuration

struct SyntheticSpec {
    std::string system = "lorenz_chaotic";
    double sigma_noise = 0.0;
    double dt = 0.01;
    std::size_t n_steps = 10000;
    std::uint64_t seed = 2024;
};

struct ChannelSplit {
    std::vector<std::size_t> train_channels;
    std::vector<std::size_t> test_channels;
};

struct ExperimentConfig {
    std::optional<std::filesystem::path> dataset_path;
    std::optional<SyntheticSpec> synthetic;
    std::string dataset_name;  // derived when empty
    double train_fraction = 0.7;
    double val_fraction = 0.1;
    double test_fraction = 0.2;
    std::optional<ChannelSplit> channel_split;
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    std::vector<std::size_t> horizons{48};
    std::optional<std::size_t> lookback;  // unset: 2 * H
    std::vector<std::size_t> prefix_lengths{1, 5, 15, 48};
    std::vector<std::uint64_t> seeds{1};
    std::vector<std::string> models{"deepedm", "simplex", "naive"};
    SimplexConfig simplex;
    std::size_t seasonality = 1;
    std::size_t eval_stride = 1;
    std::filesystem::path output_dir = "out";
    std::size_t threads = 1;

    [[nodiscard]] std::size_t lookback_for(std::size_t horizon) const { return lookback ? *lookback : 2 * horizon; }

    [[nodiscard]] bool uses(const std::string& m) const {
        return std::find(models.begin(), models.end(), m) != models.end();
    }

    void validate() const {
        if (dataset_path.has_value() == synthetic.has_value()) {
            throw ConfigError("experiment: exactly one of dataset.path and dataset.synthetic must be set");
        }
        if (train_fraction <= 0.0 || val_fraction <= 0.0 || test_fraction <= 0.0 ||
            std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
            throw ConfigError("split: train, val and test fractions must be positive and sum to 1");
        }
        if (horizons.empty() || seeds.empty() || models.empty()) {
            throw ConfigError("experiment: horizons, seeds and models must be non-empty");
        }
        for (const auto& m : models) {
            if (m != "deepedm" && m != "simplex" && m != "naive") {
                throw ConfigError("experiment: unknown model '" + m + "' (expected deepedm, simplex or naive)");
            }
        }
        for (auto h : horizons) {
            if (h < 1) throw ConfigError("experiment: horizons must be >= 1");
        }
        for (auto p : prefix_lengths) {
            if (p < 1) throw ConfigError("experiment: prefix lengths must be >= 1");
        }
        if (eval_stride < 1 || threads < 1 || seasonality < 1) {
            throw ConfigError("experiment: eval_stride, threads and seasonality must be >= 1");
        }
        if (channel_split) {
            std::set<std::size_t> a(channel_split->train_channels.begin(), channel_split->train_channels.end());
            for (auto c : channel_split->test_channels) {
                if (a.count(c)) throw ConfigError("split: channel " + std::to_string(c) + " is in both sets");
            }
            if (channel_split->train_channels.empty() || channel_split->test_channels.empty()) {
                throw ConfigError("split: channel sets must be non-empty");
            }
        }
        model.validate();
        train.validate();
        loss.validate();
    }
};

inline const std::vector<std::string>& synthetic_systems() {
    static const std::vector<std::string> names{"lorenz_chaotic", "lorenz_nonchaotic", "rossler"};
    return names;
}

inline OdeSystem make_system(const SyntheticSpec& s) {
    if (s.system == "lorenz_chaotic") return lorenz_chaotic(s.dt, s.n_steps);
    if (s.system == "lorenz_nonchaotic") return lorenz_nonchaotic(s.dt, s.n_steps);
    if (s.system == "rossler") return rossler(s.dt, s.n_steps);
    throw ConfigError("dataset.synthetic.system: unknown system '" + s.system + "'");
}

/// Noise seed matching build_synthetic_suite for the same base seed.
inline std::uint64_t synthetic_noise_seed(const SyntheticSpec& s) {
    const auto& names = synthetic_systems();
    const auto si = static_cast<std::size_t>(std::find(names.begin(), names.end(), s.system) - names.begin());
    const SuiteOptions defaults;
    std::size_t ni = 1000 + static_cast<std::size_t>(std::llround(s.sigma_noise * 1000.0));
    for (std::size_t i = 0; i < defaults.noise_levels.size(); ++i) {
        if (defaults.noise_levels[i] == s.sigma_noise) ni = i;
    }
    return suite_noise_seed(s.seed, si, ni);
}

inline Trajectory generate(const SyntheticSpec& s) {
    return add_noise(integrate_rk4(make_system(s)), s.sigma_noise, synthetic_noise_seed(s));
}

namespace detail {

template <typename T>
std::vector<T> read_list(const nlohmann::json& j, std::string_view where, const char* key, std::vector<T> dflt) {
    read_key(j, where, key, dflt);
    return dflt;
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    constexpr std::string_view where = "experiment";
    detail::check_keys(j, where,
                       {"dataset", "split", "model", "train", "loss", "horizons", "lookback", "prefix_lengths",
                        "seeds", "models", "simplex", "seasonality", "eval_stride", "output_dir", "threads"});
    if (!j.contains("dataset")) throw ConfigError("experiment: missing 'dataset'");
    const auto& ds = j.at("dataset");
    detail::check_keys(ds, "dataset", {"path", "synthetic", "name"});
    if (ds.contains("path")) {
        std::string p;
        detail::read_key(ds, "dataset", "path", p);
        c.dataset_path = p;
    }
    if (ds.contains("synthetic")) {
        const auto& sj = ds.at("synthetic");
        detail::check_keys(sj, "dataset.synthetic", {"system", "sigma_noise", "dt", "n_steps", "seed"});
        SyntheticSpec s;
        detail::read_key(sj, "dataset.synthetic", "system", s.system);
        detail::read_key(sj, "dataset.synthetic", "sigma_noise", s.sigma_noise);
        detail::read_key(sj, "dataset.synthetic", "dt", s.dt);
        detail::read_key(sj, "dataset.synthetic", "n_steps", s.n_steps);
        detail::read_key(sj, "dataset.synthetic", "seed", s.seed);
        make_system(s);
        if (s.sigma_noise < 0.0) throw ConfigError("dataset.synthetic.sigma_noise must be >= 0");
        c.synthetic = s;
    }
    detail::read_key(ds, "dataset", "name", c.dataset_name);
    if (j.contains("split")) {
        const auto& sp = j.at("split");
        detail::check_keys(sp, "split", {"train", "val", "test", "train_channels", "test_channels"});
        detail::read_key(sp, "split", "train", c.train_fraction);
        detail::read_key(sp, "split", "val", c.val_fraction);
        detail::read_key(sp, "split", "test", c.test_fraction);
        if (sp.contains("train_channels") || sp.contains("test_channels")) {
            ChannelSplit cs;
            detail::read_key(sp, "split", "train_channels", cs.train_channels);
            detail::read_key(sp, "split", "test_channels", cs.test_channels);
            c.channel_split = cs;
        }
    }
    if (j.contains("model")) {
        c.model = model_config_from_json(j.at("model"));
        if (j.at("model").contains("lookback")) c.lookback = c.model.lookback;
        if (j.at("model").contains("horizon")) c.horizons = {c.model.horizon};
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
    c.horizons = detail::read_list(j, where, "horizons", c.horizons);
    if (j.contains("lookback")) {
        std::size_t t = 0;
        detail::read_key(j, where, "lookback", t);
        c.lookback = t;
    }
    c.prefix_lengths = detail::read_list(j, where, "prefix_lengths", c.prefix_lengths);
    c.seeds = detail::read_list(j, where, "seeds", c.seeds);
    c.models = detail::read_list(j, where, "models", c.models);
    if (j.contains("simplex")) {
        const auto& sj = j.at("simplex");
        detail::check_keys(sj, "simplex", {"embed_dim", "tau", "rbf_sigma"});
        detail::read_key(sj, "simplex", "embed_dim", c.simplex.embed_dim);
        detail::read_key(sj, "simplex", "tau", c.simplex.tau);
        if (sj.contains("rbf_sigma") && !sj.at("rbf_sigma").is_null()) {
            double s = 0.0;
            detail::read_key(sj, "simplex", "rbf_sigma", s);
            c.simplex.rbf_sigma = s;
        }
    }
    detail::read_key(j, where, "seasonality", c.seasonality);
    detail::read_key(j, where, "eval_stride", c.eval_stride);
    if (j.contains("output_dir")) {
        std::string o;
        detail::read_key(j, where, "output_dir", o);
        c.output_dir = o;
    }
    detail::read_key(j, where, "threads", c.threads);
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
    try {
        return experiment_config_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
}

/// Fully resolved configuration, defaults included.
inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json ds;
    if (c.dataset_path) ds["path"] = c.dataset_path->string();
    if (c.synthetic) {
        ds["synthetic"] = {{"system", c.synthetic->system},
                           {"sigma_noise", c.synthetic->sigma_noise},
                           {"dt", c.synthetic->dt},
                           {"n_steps", c.synthetic->n_steps},
                           {"seed", c.synthetic->seed}};
    }
    if (!c.dataset_name.empty()) ds["name"] = c.dataset_name;
    nlohmann::json split{{"train", c.train_fraction}, {"val", c.val_fraction}, {"test", c.test_fraction}};
    if (c.channel_split) {
        split["train_channels"] = c.channel_split->train_channels;
        split["test_channels"] = c.channel_split->test_channels;
    }
    nlohmann::json model = to_json(c.model);
    model.erase("lookback");
    model.erase("horizon");
    nlohmann::json j{{"dataset", ds},
                     {"split", split},
                     {"model", model},
                     {"train", to_json(c.train)},
                     {"loss", to_json(c.loss)},
                     {"horizons", c.horizons},
                     {"prefix_lengths", c.prefix_lengths},
                     {"seeds", c.seeds},
                     {"models", c.models},
                     {"simplex",
                      {{"embed_dim", c.simplex.embed_dim},
                       {"tau", c.simplex.tau},
                       {"rbf_sigma", c.simplex.rbf_sigma ? nlohmann::json(*c.simplex.rbf_sigma) : nlohmann::json()}}},
                     {"seasonality", c.seasonality},
                     {"eval_stride", c.eval_stride},
                     {"output_dir", c.output_dir.string()},
                     {"threads", c.threads}};
    if (c.lookback) j["lookback"] = *c.lookback;
    return j;
}

// ---------------------------------------------------------------------------
// Splits

/// Two full-length series holding disjoint channel subsets.
inline std::pair<TimeSeries, TimeSeries> channel_split(const TimeSeries& series,
                                                       const std::vector<std::size_t>& train_idx,
                                                       const std::vector<std::size_t>& test_idx) {
    std::set<std::size_t> seen(train_idx.begin(), train_idx.end());
    for (auto c : test_idx) {
        if (seen.count(c)) {
            throw std::invalid_argument("channel_split: channel " + std::to_string(c) +
                                        " appears in both train and test sets");
        }
    }
    return {series.select_channels(train_idx), series.select_channels(test_idx)};
}

struct SplitWindows {
    WindowSet train;
    WindowSet val;
    WindowSet test;
};

/// Train/val/test windows, each confined to its own temporal range. With a
/// channel split, train and val use the training channels and test uses the
/// test channels.
inline SplitWindows make_split_windows(const TimeSeries& series, const ExperimentConfig& cfg, std::size_t lookback,
                                       std::size_t horizon) {
    const auto b = temporal_split_bounds(series.length(), cfg.train_fraction, cfg.val_fraction, cfg.test_fraction);
    std::shared_ptr<const TimeSeries> fit = std::make_shared<const TimeSeries>(series);
    std::shared_ptr<const TimeSeries> eval = fit;
    if (cfg.channel_split) {
        auto [a, t] = channel_split(series, cfg.channel_split->train_channels, cfg.channel_split->test_channels);
        fit = std::make_shared<const TimeSeries>(std::move(a));
        eval = std::make_shared<const TimeSeries>(std::move(t));
    }
    return {make_windows(fit, lookback, horizon, 1, b.train_begin, b.train_end),
            make_windows(fit, lookback, horizon, 1, b.val_begin, b.val_end),
            make_windows(eval, lookback, horizon, cfg.eval_stride, b.test_begin, b.test_end)};
}

// ---------------------------------------------------------------------------
// Results

struct MetricRow {
    std::string dataset;
    std::string model;
    std::size_t horizon = 0;
    std::size_t prefix = 0;
    std::uint64_t seed = 0;
    MetricReport report;
};

inline constexpr const char* kMetricHeader = "dataset,model,H,p,seed,mse,mae,smape,mape,mase,owa";

inline void write_metric_row(std::ostream& os, const MetricRow& r) {
    const auto& m = r.report;
    os << r.dataset << ',' << r.model << ',' << r.horizon << ',' << r.prefix << ',' << r.seed << ','
       << format_double(m.mse) << ',' << format_double(m.mae) << ',' << format_double(m.smape) << ','
       << format_double(m.mape) << ',' << format_double(m.mase) << ',' << format_double(m.owa) << '\n';
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
    os << kMetricHeader << '\n';
    for (const auto& r : rows) write_metric_row(os, r);
}

/// Mean and sample standard deviation over seeds for every (dataset, model, H, p).
inline void write_summary_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
    os << "dataset,model,H,p,n_seeds";
    for (const char* m : {"mse", "mae", "smape", "mape", "mase", "owa"}) os << ',' << m << "_mean," << m << "_std";
    os << '\n';
    std::vector<std::tuple<std::string, std::string, std::size_t, std::size_t>> keys;
    std::map<std::tuple<std::string, std::string, std::size_t, std::size_t>, std::vector<MetricReport>> groups;
    for (const auto& r : rows) {
        const auto k = std::make_tuple(r.dataset, r.model, r.horizon, r.prefix);
        if (!groups.count(k)) keys.push_back(k);
        groups[k].push_back(r.report);
    }
    for (const auto& k : keys) {
        const auto& g = groups[k];
        os << std::get<0>(k) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << std::get<3>(k) << ','
           << g.size();
        for (double MetricReport::*field : {&MetricReport::mse, &MetricReport::mae, &MetricReport::smape,
                                            &MetricReport::mape, &MetricReport::mase, &MetricReport::owa}) {
            std::vector<double> v;
            for (const auto& r : g) v.push_back(r.*field);
            const double mean = pairwise_sum(v) / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - mean) * (x - mean);
            const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1))
                                           : std::numeric_limits<double>::quiet_NaN();
            os << ',' << format_double(mean) << ',' << format_double(sd);
        }
        os << '\n';
    }
}

struct ExperimentResult {
    std::vector<MetricRow> rows;
    std::vector<std::filesystem::path> checkpoints;
};

inline std::string derive_dataset_name(const ExperimentConfig& cfg) {
    if (!cfg.dataset_name.empty()) return cfg.dataset_name;
    if (cfg.synthetic) return dataset_name(cfg.synthetic->system, cfg.synthetic->sigma_noise);
    return cfg.dataset_path->stem().string();
}

inline TimeSeries load_dataset(const ExperimentConfig& cfg) {
    if (cfg.synthetic) return generate(*cfg.synthetic).observations;
    return load_csv(*cfg.dataset_path);
}

/// Metric rows of one forecaster at every prefix length (prefixes beyond H are skipped).
inline std::vector<MetricRow> score(const std::string& dataset, const std::string& model, std::size_t horizon,
                                    std::uint64_t seed, const std::vector<TimeSeries>& actual,
                                    const std::vector<TimeSeries>& forecast, const std::vector<TimeSeries>& insample,
                                    const ExperimentConfig& cfg) {
    std::vector<MetricRow> rows;
    std::vector<std::size_t> prefixes;
    for (auto p : cfg.prefix_lengths) {
        if (p <= horizon) prefixes.push_back(p);
    }
    if (prefixes.empty()) prefixes.push_back(horizon);
    for (auto p : prefixes) {
        MetricOptions opt;
        opt.seasonality = cfg.seasonality;
        opt.prefix = p;
        rows.push_back({dataset, model, horizon, p, seed, evaluate_forecasts(actual, forecast, insample, opt)});
    }
    return rows;
}

inline std::string run_tag(std::size_t horizon, std::uint64_t seed) {
    return "H" + std::to_string(horizon) + "_seed" + std::to_string(seed);
}

/// Train DeepEDM per (horizon, seed) and score it with Simplex and Naive on the
/// test windows. Writes metrics.csv, summary.csv, config.json and, per run,
/// history_<tag>.csv and checkpoint_<tag>.ckpt into cfg.output_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    std::mutex log_mutex;
    const auto say = [&](const std::string& msg) {
        if (!log) return;
        std::lock_guard<std::mutex> lock(log_mutex);
        *log << msg << '\n' << std::flush;
    };
    const auto stage = [](const std::string& name, auto&& fn) {
        try {
            return fn();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
    };

    const std::string dataset = derive_dataset_name(cfg);
    const TimeSeries series = stage("load", [&] { return load_dataset(cfg); });
    std::filesystem::create_directories(cfg.output_dir);
    write_file_atomic(cfg.output_dir / "config.json", [&](std::ostream& os) { os << to_json(cfg).dump(2) << '\n'; });

    struct Job {
        std::size_t horizon;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (auto h : cfg.horizons) {
        for (auto s : cfg.seeds) jobs.push_back({h, s});
    }
    std::vector<std::vector<MetricRow>> job_rows(jobs.size());
    std::vector<std::filesystem::path> job_ckpt(jobs.size());

    // Reference forecasters do not depend on the seed; score them once per horizon.
    struct Reference {
        std::vector<MetricRow> simplex, naive;
    };
    std::map<std::size_t, Reference> refs;
    std::map<std::size_t, SplitWindows> windows;
    for (auto h : cfg.horizons) {
        const std::size_t t = cfg.lookback_for(h);
        windows.emplace(h, stage("windows", [&] { return make_split_windows(series, cfg, t, h); }));
        const auto& test = windows.at(h).test;
        std::vector<TimeSeries> actual, insample;
        for (std::size_t i = 0; i < test.size(); ++i) {
            actual.push_back(test.target_of(i));
            insample.push_back(test.lookback_of(i));
        }
        Reference ref;
        if (cfg.uses("naive")) {
            std::vector<TimeSeries> f;
            for (const auto& in : insample) f.push_back(naive_forecast(in, h));
            ref.naive = stage("naive", [&] { return score(dataset, "naive", h, 0, actual, f, insample, cfg); });
        }
        if (cfg.uses("simplex")) {
            std::vector<TimeSeries> f;
            stage("simplex", [&] {
                for (const auto& in : insample) f.push_back(simplex_multivariate(in, cfg.simplex, h));
                return 0;
            });
            ref.simplex = stage("simplex", [&] { return score(dataset, "simplex", h, 0, actual, f, insample, cfg); });
            say("simplex H=" + std::to_string(h) + " mse=" + format_double(ref.simplex.back().report.mse));
        }
        refs.emplace(h, std::move(ref));
    }

    const auto run_job = [&](std::size_t ji) {
        const auto [h, seed] = jobs[ji];
        const auto& sw = windows.at(h);
        std::vector<MetricRow> rows;
        if (cfg.uses("deepedm")) {
            ModelConfig mc = cfg.model;
            mc.lookback = cfg.lookback_for(h);
            mc.horizon = h;
            mc.seed = seed;
            TrainConfig tc = cfg.train;
            tc.seed = seed;
            DeepEdmModel model = stage("model", [&] { return DeepEdmModel(mc); });
            const auto tag = run_tag(h, seed);
            const TrainResult tr = stage("train", [&] {
                return train(model, sw.train, sw.val, tc, cfg.loss, [&](const EpochRecord& r) {
                    say(tag + " epoch " + std::to_string(r.epoch) + " train=" + format_double(r.train_loss) +
                        " val=" + format_double(r.val_loss));
                });
            });
            stage("write", [&] {
                write_file_atomic(cfg.output_dir / ("history_" + tag + ".csv"),
                                  [&](std::ostream& os) { write_history_csv(os, tr.history); });
                job_ckpt[ji] = cfg.output_dir / ("checkpoint_" + tag + ".ckpt");
                model.save(job_ckpt[ji]);
                return 0;
            });
            std::vector<TimeSeries> actual, insample;
            for (std::size_t i = 0; i < sw.test.size(); ++i) {
                actual.push_back(sw.test.target_of(i));
                insample.push_back(sw.test.lookback_of(i));
            }
            const auto forecast = stage("predict", [&] { return predict(model, sw.test); });
            rows = stage("evaluate", [&] { return score(dataset, "deepedm", h, seed, actual, forecast, insample, cfg); });
            say(tag + " deepedm mse=" + format_double(rows.back().report.mse));
        }
        for (auto r : refs.at(h).simplex) {
            r.seed = seed;
            rows.push_back(r);
        }
        for (auto r : refs.at(h).naive) {
            r.seed = seed;
            rows.push_back(r);
        }
        job_rows[ji] = std::move(rows);
    };

    // Worker pool over (horizon, seed); results land in job order.
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto worker = [&] {
        for (std::size_t ji = next++; ji < jobs.size(); ji = next++) {
            try {
                run_job(ji);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = jobs.size();
            }
        }
    };
    const std::size_t n_threads = std::min(cfg.threads, jobs.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    ExperimentResult result;
    for (std::size_t ji = 0; ji < jobs.size(); ++ji) {
        result.rows.insert(result.rows.end(), job_rows[ji].begin(), job_rows[ji].end());
        if (!job_ckpt[ji].empty()) result.checkpoints.push_back(job_ckpt[ji]);
    }
    stage("write", [&] {
        write_file_atomic(cfg.output_dir / "metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, result.rows); });
        write_file_atomic(cfg.output_dir / "summary.csv", [&](std::ostream& os) { write_summary_csv(os, result.rows); });
        return 0;
    });
    return result;
}

// ---------------------------------------------------------------------------
// Ablation sweeps over one embedding or window knob.

inline const std::vector<std::string>& ablation_params() {
    static const std::vector<std::string> p{"delta_t", "tau_delay", "lookback"};
    return p;
}

struct AblationRow {
    std::string param;
    std::size_t value = 0;
    MetricRow metrics;
};

/// One DeepEDM run per value, scored at the full horizon. Each run writes into
/// `<output_dir>/<param>_<value>/`; the combined table goes to ablation.csv.
inline std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::string& param,
                                       const std::vector<std::size_t>& values, std::ostream* log = nullptr) {
    if (std::find(ablation_params().begin(), ablation_params().end(), param) == ablation_params().end()) {
        throw ConfigError("ablate: unknown parameter '" + param + "' (expected delta_t, tau_delay or lookback)");
    }
    if (values.empty()) throw ConfigError("ablate: no values given");
    std::vector<AblationRow> out;
    for (auto v : values) {
        ExperimentConfig cfg = base;
        cfg.models = {"deepedm"};
        cfg.prefix_lengths = {};
        if (param == "delta_t") {
            cfg.model.delta_t = v;
            cfg.model.latent_dim = std::max(cfg.model.latent_dim, v);
        } else if (param == "tau_delay") {
            cfg.model.tau_delay = v;
        } else {
            cfg.lookback = v;
        }
        cfg.output_dir = base.output_dir / (param + "_" + std::to_string(v));
        const auto res = run_experiment(cfg, log);
        for (const auto& r : res.rows) out.push_back({param, v, r});
    }
    write_file_atomic(base.output_dir / "ablation.csv", [&](std::ostream& os) {
        os << "param,value," << kMetricHeader << '\n';
        for (const auto& r : out) {
            os << r.param << ',' << r.value << ',';
            write_metric_row(os, r.metrics);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Neighbor-recall experiment.

struct RecallExperimentConfig {
    std::vector<std::size_t> ks{1, 7};
    std::vector<std::size_t> delta_ts{1, 5, 10};
    std::vector<double> sigmas{0.0, 2.5};
    std::vector<DistanceSource> sources{DistanceSource::delay_embedding};
    RecallConfig base;
    // Model used for the latent_kernel source, trained per (sigma, delta_t).
    std::size_t horizon = 48;
    TrainConfig train;
    LossConfig loss;
    ModelConfig model;
};

inline RecallExperimentConfig recall_config_from_json(const nlohmann::json& j) {
    RecallExperimentConfig c;
    constexpr std::string_view where = "recall";
    detail::check_keys(j, where,
                       {"ks", "delta_ts", "sigmas", "sources", "tau", "coordinate", "window", "dt", "n_steps", "seed",
                        "horizon", "model", "train", "loss"});
    c.ks = detail::read_list(j, where, "ks", c.ks);
    c.delta_ts = detail::read_list(j, where, "delta_ts", c.delta_ts);
    c.sigmas = detail::read_list(j, where, "sigmas", c.sigmas);
    if (j.contains("sources")) {
        std::vector<std::string> names;
        detail::read_key(j, where, "sources", names);
        c.sources.clear();
        for (const auto& n : names) {
            try {
                c.sources.push_back(parse_distance_source(n));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("recall: ") + e.what());
            }
        }
    }
    detail::read_key(j, where, "tau", c.base.tau);
    if (j.contains("coordinate") && !j.at("coordinate").is_null()) {
        std::size_t coord = 0;
        detail::read_key(j, where, "coordinate", coord);
        c.base.coordinate = coord;
    }
    detail::read_key(j, where, "window", c.base.window);
    detail::read_key(j, where, "dt", c.base.dt);
    detail::read_key(j, where, "n_steps", c.base.n_steps);
    detail::read_key(j, where, "seed", c.base.seed);
    detail::read_key(j, where, "horizon", c.horizon);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
    if (c.ks.empty() || c.delta_ts.empty() || c.sigmas.empty() || c.sources.empty()) {
        throw ConfigError("recall: ks, delta_ts, sigmas and sources must be non-empty");
    }
    for (double s : c.sigmas) {
        if (s < 0.0) throw ConfigError("recall: sigmas must be >= 0");
    }
    if (c.base.dt <= 0.0 || c.base.window < 2 || c.base.n_steps < c.base.window) {
        throw ConfigError("recall: need dt > 0, window >= 2 and n_steps >= window");
    }
    return c;
}

struct RecallRow {
    std::size_t k = 0;
    std::size_t delta_t = 0;
    double sigma_noise = 0.0;
    DistanceSource source = DistanceSource::delay_embedding;
    double recall = 0.0;
};

inline void write_recall_csv(std::ostream& os, const std::vector<RecallRow>& rows) {
    os << "K,delta_t,sigma_noise,source,recall\n";
    for (const auto& r : rows) {
        os << r.k << ',' << r.delta_t << ',' << format_double(r.sigma_noise) << ',' << to_string(r.source) << ','
           << format_double(r.recall) << '\n';
    }
}

/// Train DeepEDM on the observations of a recall trajectory, lookback equal to
/// the recall window, so its encoder can rank neighbors.
inline DeepEdmModel train_recall_model(const Trajectory& traj, std::size_t delta_t, const RecallExperimentConfig& rc,
                                       std::ostream* log = nullptr) {
    ModelConfig mc = rc.model;
    mc.lookback = rc.base.window;
    mc.horizon = rc.horizon;
    mc.delta_t = delta_t;
    mc.latent_dim = std::max(mc.latent_dim, delta_t);
    DeepEdmModel model(mc);
    const auto series = std::make_shared<const TimeSeries>(traj.observations);
    const auto b = temporal_split_bounds(series->length(), 0.8, 0.1, 0.1);
    const auto tr = make_windows(series, mc.lookback, mc.horizon, 1, b.train_begin, b.train_end);
    const auto va = make_windows(series, mc.lookback, mc.horizon, 1, b.val_begin, b.test_end);
    train(model, tr, va, rc.train, rc.loss, [&](const EpochRecord& r) {
        if (log) *log << "recall model delta_t=" << delta_t << " epoch " << r.epoch << " val=" << r.val_loss << '\n';
    });
    return model;
}

inline std::vector<RecallRow> run_recall(const RecallExperimentConfig& rc, std::ostream* log = nullptr) {
    std::vector<RecallRow> rows;
    for (double sigma : rc.sigmas) {
        RecallConfig base = rc.base;
        base.sigma_noise = sigma;
        const Trajectory traj = recall_trajectory(base);
        for (auto dt : rc.delta_ts) {
            std::optional<DeepEdmModel> model;
            for (auto src : rc.sources) {
                LatentMap latent;
                if (src == DistanceSource::latent_kernel) {
                    if (!model) model = train_recall_model(traj, dt, rc, log);
                    latent = [&m = *model](std::span<const double> w) { return m.window_latents(w); };
                }
                for (auto k : rc.ks) {
                    RecallConfig c = base;
                    c.k = k;
                    c.delta_t = dt;
                    rows.push_back({k, dt, sigma, src, knn_recall(traj, c, src, latent)});
                }
            }
        }
    }
    return rows;
}

/// Default output directory: $DEEPEDM_OUT_DIR when set, else "out".
inline std::filesystem::path default_output_dir() {
    if (const char* env = std::getenv("DEEPEDM_OUT_DIR"); env && *env) return env;
    return "out";
}

}  // namespace deepedm
