// deepedm: command-line front end for simulation, training, forecasting,
// evaluation, baselines, neighbor recall and ablation sweeps.
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deepedm/deepedm.hpp"

namespace fs = std::filesystem;
using namespace deepedm;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string out;
    std::optional<std::size_t> threads;
};

// Overrides shared by the experiment subcommands.
struct ExperimentFlags {
    std::string data;
    std::string system;
    std::optional<double> sigma;
    std::optional<std::size_t> horizon;
    std::optional<std::size_t> lookback;
    std::optional<std::size_t> epochs;

    void attach(CLI::App* cmd) {
        cmd->add_option("--data", data, "Dataset CSV (instead of a config dataset)");
        cmd->add_option("--system", system, "Synthetic system: lorenz_chaotic, lorenz_nonchaotic or rossler");
        cmd->add_option("--sigma", sigma, "Observation noise for --system");
        cmd->add_option("--horizon", horizon, "Forecast horizon H");
        cmd->add_option("--lookback", lookback, "Lookback T (default 2H)");
        cmd->add_option("--epochs", epochs, "Training epochs");
    }
};

fs::path output_dir(const Globals& g) { return g.out.empty() ? default_output_dir() : fs::path(g.out); }

ExperimentConfig experiment_config(const Globals& g, const ExperimentFlags& f) {
    ExperimentConfig cfg;
    if (!g.config.empty()) cfg = load_experiment_config(g.config);
    if (!f.data.empty() && !f.system.empty()) throw ConfigError("--data and --system are mutually exclusive");
    if (!f.data.empty()) {
        cfg.dataset_path = f.data;
        cfg.synthetic.reset();
        cfg.dataset_name.clear();
    }
    if (!f.system.empty()) {
        SyntheticSpec s;
        s.system = f.system;
        make_system(s);
        cfg.synthetic = s;
        cfg.dataset_path.reset();
        cfg.dataset_name.clear();
    }
    if (f.sigma) {
        if (!cfg.synthetic) throw ConfigError("--sigma needs a synthetic dataset");
        cfg.synthetic->sigma_noise = *f.sigma;
        cfg.dataset_name.clear();
    }
    if (!cfg.dataset_path && !cfg.synthetic) {
        throw ConfigError("no dataset: pass --config, --data or --system");
    }
    if (f.horizon) cfg.horizons = {*f.horizon};
    if (f.lookback) cfg.lookback = *f.lookback;
    if (f.epochs) cfg.train.epochs = *f.epochs;
    if (g.seed) cfg.seeds = {*g.seed};
    if (g.threads) cfg.threads = *g.threads;
    if (!g.out.empty() || g.config.empty()) cfg.output_dir = output_dir(g);
    cfg.validate();
    return cfg;
}

void print_rows(const std::vector<MetricRow>& rows) {
    std::cout << kMetricHeader << '\n';
    for (const auto& r : rows) write_metric_row(std::cout, r);
}

int cmd_simulate(const Globals& g, double dt, std::size_t steps) {
    SuiteOptions opt;
    opt.dt = dt;
    opt.n_steps = steps;
    if (g.seed) opt.seed = *g.seed;
    if (!(dt > 0.0) || steps < 10) throw ConfigError("simulate: need dt > 0 and at least 10 steps");
    const auto files = build_synthetic_suite(output_dir(g), opt);
    for (const auto& f : files) std::cout << f.string() << '\n';
    return 0;
}

int cmd_experiment(const Globals& g, const ExperimentFlags& f, const std::vector<std::string>& models) {
    ExperimentConfig cfg = experiment_config(g, f);
    if (!models.empty()) cfg.models = models;
    const auto res = run_experiment(cfg, &std::cerr);
    print_rows(res.rows);
    return 0;
}

int cmd_forecast(const Globals& g, const std::string& checkpoint, const std::string& input, std::string output) {
    const DeepEdmModel model = DeepEdmModel::load(checkpoint);
    const TimeSeries series = load_csv(input);
    const std::size_t t = model.config().lookback;
    const std::size_t h = model.config().horizon;
    if (series.length() < t) {
        throw ConfigError("forecast: input has " + std::to_string(series.length()) + " steps, model needs T = " +
                          std::to_string(t));
    }
    const TimeSeries lookback = series.slice_time(series.length() - t, t);
    const Tensor y = model_forward(model, lookback.to_tensor(), ForwardContext{Mode::eval, nullptr});
    const TimeSeries forecast(series.channel_names(), h, y.to_vector());
    if (output.empty()) output = (output_dir(g) / "forecast.csv").string();
    if (const auto parent = fs::path(output).parent_path(); !parent.empty()) fs::create_directories(parent);
    save_csv(output, forecast, series.length());
    std::cout << output << '\n';
    return 0;
}

int cmd_evaluate(const Globals& g, const std::string& actual_path, const std::string& forecast_path,
                 const std::string& insample_path, std::vector<std::size_t> prefixes, std::size_t m) {
    const TimeSeries actual_in = load_csv(actual_path);
    const TimeSeries forecast = load_csv(forecast_path);
    const std::size_t h = forecast.length();
    if (actual_in.channels() != forecast.channels() || actual_in.length() < h) {
        throw ConfigError("evaluate: actual must have the forecast's channels and at least its length");
    }
    // The actual file may carry history ahead of the forecast span.
    const TimeSeries actual = actual_in.slice_time(actual_in.length() - h, h);
    std::optional<TimeSeries> insample;
    if (!insample_path.empty()) {
        insample = load_csv(insample_path);
    } else if (actual_in.length() > h) {
        insample = actual_in.slice_time(0, actual_in.length() - h);
    }
    if (prefixes.empty()) prefixes = {h};
    std::vector<MetricRow> rows;
    const std::string name = fs::path(forecast_path).stem().string();
    for (auto p : prefixes) {
        if (p < 1 || p > h) throw ConfigError("evaluate: prefix " + std::to_string(p) + " outside 1.." + std::to_string(h));
        MetricRow row{name, "forecast", h, p, g.seed.value_or(0), {}};
        if (insample && insample->length() > m) {
            MetricOptions opt;
            opt.seasonality = m;
            opt.prefix = p;
            row.report = evaluate_forecasts({actual}, {forecast}, {*insample}, opt);
        } else {
            // Without history there is no MASE scale; the scale-free metrics still apply.
            std::vector<double> y, f;
            for (std::size_t d = 0; d < actual.channels(); ++d) {
                const auto a = actual.row(d).first(p);
                const auto b = forecast.row(d).first(p);
                y.insert(y.end(), a.begin(), a.end());
                f.insert(f.end(), b.begin(), b.end());
            }
            row.report.mse = mse(y, f);
            row.report.mae = mae(y, f);
            row.report.smape = smape(y, f);
            row.report.mape = mape(y, f);
            row.report.mase = std::numeric_limits<double>::quiet_NaN();
            row.report.n_windows = 1;
        }
        rows.push_back(row);
    }
    const fs::path dir = output_dir(g);
    fs::create_directories(dir);
    write_file_atomic(dir / "metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, rows); });
    print_rows(rows);
    return 0;
}

int cmd_recall(const Globals& g, const std::vector<std::size_t>& ks, const std::vector<std::size_t>& deltas,
               const std::vector<double>& sigmas, const std::vector<std::string>& sources,
               std::optional<std::size_t> epochs) {
    RecallExperimentConfig rc;
    if (!g.config.empty()) {
        std::ifstream is(g.config);
        if (!is) throw ConfigError("cannot open config '" + g.config + "'");
        try {
            rc = recall_config_from_json(nlohmann::json::parse(is));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config '" + g.config + "': " + e.what());
        }
    }
    if (!ks.empty()) rc.ks = ks;
    if (!deltas.empty()) rc.delta_ts = deltas;
    if (!sigmas.empty()) rc.sigmas = sigmas;
    if (!sources.empty()) {
        rc.sources.clear();
        for (const auto& s : sources) {
            try {
                rc.sources.push_back(parse_distance_source(s));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        }
    }
    if (epochs) rc.train.epochs = *epochs;
    if (g.seed) {
        rc.base.seed = *g.seed;
        rc.train.seed = *g.seed;
        rc.model.seed = *g.seed;
    }
    const auto rows = run_recall(rc, &std::cerr);
    const fs::path dir = output_dir(g);
    fs::create_directories(dir);
    write_file_atomic(dir / "recall.csv", [&](std::ostream& os) { write_recall_csv(os, rows); });
    write_recall_csv(std::cout, rows);
    return 0;
}

int cmd_ablate(const Globals& g, const ExperimentFlags& f, const std::string& param,
               const std::vector<std::size_t>& values) {
    const ExperimentConfig cfg = experiment_config(g, f);
    const auto rows = ablate(cfg, param, values, &std::cerr);
    std::cout << "param,value," << kMetricHeader << '\n';
    for (const auto& r : rows) {
        std::cout << r.param << ',' << r.value << ',';
        write_metric_row(std::cout, r.metrics);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DeepEDM forecasting toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "Random seed (overrides the config)");
    app.add_option("--config", g.config, "JSON configuration file");
    app.add_option("--out", g.out, "Output directory (default $DEEPEDM_OUT_DIR or ./out)");
    app.add_option("--threads", g.threads, "Worker pool size for independent runs")->check(CLI::PositiveNumber);

    double sim_dt = 0.01;
    std::size_t sim_steps = 10000;
    auto* simulate = app.add_subcommand("simulate", "Write the 18-file synthetic Lorenz/Rossler suite");
    simulate->add_option("--dt", sim_dt, "Integration step");
    simulate->add_option("--steps", sim_steps, "Number of steps");

    ExperimentFlags train_flags, run_flags, base_flags, ablate_flags;
    auto* train_cmd = app.add_subcommand("train", "Train DeepEDM and write checkpoints, history and metrics");
    train_flags.attach(train_cmd);
    auto* run_cmd = app.add_subcommand("run", "Train DeepEDM and compare it with Simplex and Naive");
    run_flags.attach(run_cmd);
    auto* base_cmd = app.add_subcommand("baseline", "Score the Simplex and Naive forecasters only");
    base_flags.attach(base_cmd);

    std::string checkpoint, input, forecast_out;
    auto* forecast_cmd = app.add_subcommand("forecast", "Forecast the step after a CSV's last lookback window");
    forecast_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    forecast_cmd->add_option("--input", input, "History CSV; its last T steps are the lookback")->required();
    forecast_cmd->add_option("--output", forecast_out, "Forecast CSV (default <out>/forecast.csv)");

    std::string eval_actual, eval_forecast, eval_insample;
    std::vector<std::size_t> eval_prefix;
    std::size_t eval_m = 1;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a forecast CSV against actuals");
    evaluate_cmd->add_option("--actual", eval_actual, "Actual CSV (may include history before the forecast)")
        ->required();
    evaluate_cmd->add_option("--forecast", eval_forecast, "Forecast CSV")->required();
    evaluate_cmd->add_option("--insample", eval_insample, "History CSV for MASE and Naive2");
    evaluate_cmd->add_option("--prefix", eval_prefix, "Prefix lengths p")->delimiter(',');
    evaluate_cmd->add_option("--seasonality", eval_m, "Seasonal period m")->check(CLI::PositiveNumber);

    std::vector<std::size_t> rec_k, rec_delta;
    std::vector<double> rec_sigma;
    std::vector<std::string> rec_sources;
    std::optional<std::size_t> rec_epochs;
    auto* recall_cmd = app.add_subcommand("recall", "Nearest-neighbor recall under several distances");
    recall_cmd->add_option("--k", rec_k, "Neighbor counts")->delimiter(',');
    recall_cmd->add_option("--delta-t", rec_delta, "Embedding dimensions")->delimiter(',');
    recall_cmd->add_option("--sigma", rec_sigma, "Noise levels")->delimiter(',');
    recall_cmd->add_option("--sources", rec_sources, "delay_embedding, ground_truth, latent_kernel")->delimiter(',');
    recall_cmd->add_option("--epochs", rec_epochs, "Training epochs for the latent_kernel model");

    std::string ablate_param;
    std::vector<std::size_t> ablate_values;
    auto* ablate_cmd = app.add_subcommand("ablate", "Sweep delta_t, tau_delay or lookback");
    ablate_flags.attach(ablate_cmd);
    ablate_cmd->add_option("--param", ablate_param, "delta_t, tau_delay or lookback")->required();
    ablate_cmd->add_option("--values", ablate_values, "Comma-separated values")->required()->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*simulate) return cmd_simulate(g, sim_dt, sim_steps);
        if (*train_cmd) return cmd_experiment(g, train_flags, {"deepedm"});
        if (*run_cmd) return cmd_experiment(g, run_flags, {});
        if (*base_cmd) return cmd_experiment(g, base_flags, {"simplex", "naive"});
        if (*forecast_cmd) return cmd_forecast(g, checkpoint, input, forecast_out);
        if (*evaluate_cmd) return cmd_evaluate(g, eval_actual, eval_forecast, eval_insample, eval_prefix, eval_m);
        if (*recall_cmd) return cmd_recall(g, rec_k, rec_delta, rec_sigma, rec_sources, rec_epochs);
        if (*ablate_cmd) return cmd_ablate(g, ablate_flags, ablate_param, ablate_values);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
