#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "deepedm/harness.hpp"

using namespace deepedm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
}

json small_config_json(const fs::path& out) {
    return {{"dataset", {{"synthetic", {{"system", "lorenz_chaotic"}, {"sigma_noise", 1.0}, {"n_steps", 700}}}}},
            {"model", {{"delta_t", 3}, {"latent_dim", 8}}},
            {"train", {{"epochs", 2}, {"train_stride", 4}, {"lr", 0.002}}},
            {"horizons", {8}},
            {"lookback", 16},
            {"prefix_lengths", {1, 4, 8}},
            {"eval_stride", 6},
            {"output_dir", out.string()}};
}

class HarnessDir : public ::testing::Test {
protected:
    fs::path dir = fs::temp_directory_path() / ("deepedm_harness_" + std::string(
                       ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    void SetUp() override { fs::remove_all(dir); }
    void TearDown() override { fs::remove_all(dir); }
};

}  // namespace

TEST(ExperimentConfigParse, DefaultsAndOverrides) {
    const auto c = experiment_config_from_json(small_config_json("o"));
    ASSERT_TRUE(c.synthetic);
    EXPECT_EQ(c.synthetic->n_steps, 700u);
    EXPECT_EQ(c.synthetic->dt, 0.01);
    EXPECT_EQ(c.model.delta_t, 3u);
    EXPECT_EQ(c.train.epochs, 2u);
    EXPECT_EQ(c.train.batch_size, 32u);
    EXPECT_EQ(c.horizons, (std::vector<std::size_t>{8}));
    EXPECT_EQ(c.lookback_for(8), 16u);
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1}));
    // Round trip through the resolved echo.
    EXPECT_EQ(to_json(experiment_config_from_json(to_json(c))), to_json(c));
}

TEST(ExperimentConfigParse, LookbackDefaultsToTwiceHorizon) {
    auto j = small_config_json("o");
    j.erase("lookback");
    const auto c = experiment_config_from_json(j);
    EXPECT_EQ(c.lookback_for(48), 96u);
    EXPECT_EQ(c.lookback_for(8), 16u);
}

TEST(ExperimentConfigParse, RejectsBadInput) {
    auto j = small_config_json("o");
    j["horizon"] = 5;  // misspelt key
    EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);

    j = small_config_json("o");
    j["dataset"]["path"] = "x.csv";
    EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);

    j = small_config_json("o");
    j["split"] = {{"train", 0.5}, {"val", 0.1}, {"test", 0.1}};
    EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);

    j = small_config_json("o");
    j["models"] = {"arima"};
    EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);

    j = small_config_json("o");
    j["dataset"]["synthetic"]["system"] = "chua";
    EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);

    j = small_config_json("o");
    j["model"]["latent_dim"] = 1;
    EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);

    j = small_config_json("o");
    j["train"]["epochs"] = "ten";
    EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);

    j = small_config_json("o");
    j["split"] = {{"train", 0.7}, {"val", 0.1}, {"test", 0.2}, {"train_channels", {0, 1}}, {"test_channels", {1}}};
    EXPECT_THROW((void)experiment_config_from_json(j), ConfigError);

    EXPECT_THROW((void)load_experiment_config("/nonexistent/config.json"), ConfigError);
}

TEST(ChannelSplit, SevenChannelsSplitDisjointly) {
    std::vector<double> v(7 * 5);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    const TimeSeries s(TimeSeries::default_names(7), 5, v);
    const auto [a, b] = channel_split(s, {0, 1, 2}, {4, 5, 6});
    EXPECT_EQ(a.channels(), 3u);
    EXPECT_EQ(b.channels(), 3u);
    EXPECT_EQ(a.length(), 5u);
    EXPECT_EQ(b.at(0, 0), s.at(4, 0));
    EXPECT_EQ(b.at(2, 4), s.at(6, 4));
    EXPECT_THROW((void)channel_split(s, {0, 1, 2}, {2, 3}), std::invalid_argument);
}

TEST(SplitWindows, TemporalRangesDoNotOverlap) {
    auto c = experiment_config_from_json(small_config_json("o"));
    const auto series = load_dataset(c);
    const auto sw = make_split_windows(series, c, 16, 8);
    const auto last_end = [](const WindowSet& w) { return w.start(w.size() - 1) + w.lookback() + w.horizon(); };
    EXPECT_LE(last_end(sw.train), sw.val.start(0));
    EXPECT_LE(last_end(sw.val), sw.test.start(0));
    EXPECT_EQ(last_end(sw.val), 560u);
    EXPECT_EQ(sw.test.start(1) - sw.test.start(0), 6u);
}

TEST(Synthetic, GenerateMatchesSuiteFile) {
    const auto dir = fs::temp_directory_path() / "deepedm_harness_suite";
    fs::remove_all(dir);
    SuiteOptions opt;
    opt.n_steps = 250;
    (void)build_synthetic_suite(dir, opt);
    SyntheticSpec s;
    s.system = "rossler";
    s.sigma_noise = 1.5;
    s.n_steps = 250;
    EXPECT_EQ(generate(s).observations, load_csv(dir / "rossler_noise1.5.csv"));
    fs::remove_all(dir);
}

TEST_F(HarnessDir, ThreeSeedsGiveThreeCheckpointsAndSummary) {
    auto j = small_config_json(dir);
    j["seeds"] = {1, 2, 3};
    const auto cfg = experiment_config_from_json(j);
    const auto res = run_experiment(cfg);
    ASSERT_EQ(res.checkpoints.size(), 3u);
    for (const auto& p : res.checkpoints) EXPECT_TRUE(fs::exists(p));
    for (const char* f : {"metrics.csv", "summary.csv", "config.json", "history_H8_seed2.csv"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    // 3 seeds x 3 models x 3 prefixes.
    EXPECT_EQ(res.rows.size(), 27u);
    const auto metrics = lines_of(slurp(dir / "metrics.csv"));
    EXPECT_EQ(metrics.front(), kMetricHeader);
    EXPECT_EQ(metrics.size(), 28u);

    // Reference forecasters do not depend on the seed.
    std::map<std::size_t, std::vector<double>> naive_mse;
    for (const auto& r : res.rows) {
        if (r.model == "naive") naive_mse[r.prefix].push_back(r.report.mse);
    }
    for (const auto& [p, v] : naive_mse) {
        ASSERT_EQ(v.size(), 3u);
        EXPECT_EQ(v[0], v[1]);
        EXPECT_EQ(v[1], v[2]);
    }

    const auto summary = lines_of(slurp(dir / "summary.csv"));
    EXPECT_EQ(summary.size(), 1u + 9u);
    EXPECT_EQ(summary[0].substr(0, 21), "dataset,model,H,p,n_s");
    EXPECT_NE(summary[1].find("lorenz_chaotic_noise1.0,deepedm,8,1,3,"), std::string::npos) << summary[1];

    // Every checkpoint reloads and matches its config.
    const auto m = DeepEdmModel::load(res.checkpoints[1]);
    EXPECT_EQ(m.config().seed, 2u);
    EXPECT_EQ(m.config().lookback, 16u);

    const auto echo = json::parse(slurp(dir / "config.json"));
    EXPECT_EQ(echo.at("train").at("batch_size"), 32);
    EXPECT_EQ(echo.at("seeds"), json({1, 2, 3}));
}

TEST_F(HarnessDir, RerunIsByteIdentical) {
    auto ja = small_config_json(dir / "a");
    auto jb = small_config_json(dir / "b");
    ja["threads"] = 2;
    ja["seeds"] = {4, 5};
    jb["seeds"] = {4, 5};
    (void)run_experiment(experiment_config_from_json(ja));
    (void)run_experiment(experiment_config_from_json(jb));
    for (const char* f : {"metrics.csv", "summary.csv", "history_H8_seed5.csv", "checkpoint_H8_seed4.ckpt"}) {
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    }
}

TEST_F(HarnessDir, CsvDatasetAndChannelSplit) {
    fs::create_directories(dir);
    SyntheticSpec s;
    s.n_steps = 500;
    auto series = generate(s).observations;
    // Seven channels from the three Lorenz coordinates and their combinations.
    std::vector<double> v;
    for (std::size_t c = 0; c < 7; ++c) {
        for (std::size_t t = 0; t < 500; ++t) v.push_back(series.at(c % 3, t) + static_cast<double>(c));
    }
    save_csv(dir / "seven.csv", TimeSeries(TimeSeries::default_names(7), 500, v));
    json j = small_config_json(dir / "out");
    j["dataset"] = {{"path", (dir / "seven.csv").string()}};
    j["split"] = {{"train", 0.7}, {"val", 0.1}, {"test", 0.2}, {"train_channels", {0, 1, 2}}, {"test_channels", {4, 5, 6}}};
    j["models"] = {"deepedm", "naive"};
    const auto res = run_experiment(experiment_config_from_json(j));
    ASSERT_FALSE(res.rows.empty());
    EXPECT_EQ(res.rows.front().dataset, "seven");
    const auto model = DeepEdmModel::load(res.checkpoints.at(0));
    EXPECT_EQ(model.config().horizon, 8u);
}

TEST_F(HarnessDir, FailingStageIsNamed) {
    json j = small_config_json(dir);
    j["dataset"] = {{"path", (dir / "missing.csv").string()}};
    try {
        (void)run_experiment(experiment_config_from_json(j));
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "load");
        EXPECT_EQ(std::string(e.what()).rfind("load: ", 0), 0u);
    }
    j = small_config_json(dir);
    j["lookback"] = 600;  // no room for windows in the train range
    try {
        (void)run_experiment(experiment_config_from_json(j));
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "windows");
    }
}

TEST_F(HarnessDir, AblationWritesOneRowPerValue) {
    const auto cfg = experiment_config_from_json(small_config_json(dir));
    const auto rows = ablate(cfg, "delta_t", {1, 5});
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].value, 1u);
    EXPECT_EQ(rows[1].metrics.horizon, 8u);
    EXPECT_EQ(lines_of(slurp(dir / "ablation.csv")).size(), 3u);
    EXPECT_TRUE(fs::exists(dir / "delta_t_5" / "metrics.csv"));
    EXPECT_THROW((void)ablate(cfg, "latent_dim", {4}), ConfigError);
}

TEST(RecallConfigParse, ListsAndErrors) {
    const auto c = recall_config_from_json(
        {{"ks", {1, 3}}, {"delta_ts", {2}}, {"sigmas", {0.5}}, {"sources", {"delay_embedding", "ground_truth"}},
         {"n_steps", 800}});
    EXPECT_EQ(c.ks, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(c.sources.size(), 2u);
    EXPECT_EQ(c.base.n_steps, 800u);
    EXPECT_EQ(c.base.window, 96u);
    EXPECT_THROW((void)recall_config_from_json({{"ks", json::array()}}), ConfigError);
    EXPECT_THROW((void)recall_config_from_json({{"sigmas", {-1.0}}}), ConfigError);
    EXPECT_THROW((void)recall_config_from_json({{"sources", {"cosine"}}}), ConfigError);
    EXPECT_THROW((void)recall_config_from_json({{"k", 1}}), ConfigError);
}

TEST(Recall, RunProducesOneRowPerCombination) {
    RecallExperimentConfig rc;
    rc.ks = {1, 2};
    rc.delta_ts = {1, 4};
    rc.sigmas = {0.0};
    rc.sources = {DistanceSource::delay_embedding, DistanceSource::ground_truth};
    rc.base.n_steps = 700;
    const auto rows = run_recall(rc);
    ASSERT_EQ(rows.size(), 8u);
    for (const auto& r : rows) {
        EXPECT_GE(r.recall, 0.0);
        EXPECT_LE(r.recall, 1.0);
        if (r.source == DistanceSource::ground_truth) EXPECT_EQ(r.recall, 1.0);
    }
    std::ostringstream os;
    write_recall_csv(os, {rows.front()});
    EXPECT_EQ(lines_of(os.str()).front(), "K,delta_t,sigma_noise,source,recall");
    EXPECT_EQ(lines_of(os.str()).at(1).substr(0, 8), "1,1,0,de");
}

TEST(OutputDir, EnvironmentOverride) {
    ::setenv("DEEPEDM_OUT_DIR", "/tmp/deepedm_env_out", 1);
    EXPECT_EQ(default_output_dir(), fs::path("/tmp/deepedm_env_out"));
    ::unsetenv("DEEPEDM_OUT_DIR");
    EXPECT_EQ(default_output_dir(), fs::path("out"));
}
