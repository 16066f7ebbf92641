// Train a small DeepEDM on noisy chaotic Lorenz and compare its test error
// with the last-value forecast. Usage: demo_lorenz_forecast [epochs]

#include <cstdlib>
#include <iostream>

#include "deepedm/deepedm.hpp"

using namespace deepedm;

int main(int argc, char** argv) {
    const std::size_t epochs = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 5;

    SyntheticSpec spec;
    spec.sigma_noise = 1.0;
    spec.n_steps = 4000;
    const auto series = std::make_shared<const TimeSeries>(generate(spec).observations);

    const std::size_t t = 48, h = 24;
    const auto b = temporal_split_bounds(series->length(), 0.7, 0.1, 0.2);
    const auto tr = make_windows(series, t, h, 1, b.train_begin, b.train_end);
    const auto va = make_windows(series, t, h, 1, b.val_begin, b.val_end);
    const auto te = make_windows(series, t, h, 4, b.test_begin, b.test_end);

    ModelConfig mc;
    mc.lookback = t;
    mc.horizon = h;
    DeepEdmModel model(mc);
    TrainConfig tc;
    tc.epochs = epochs;
    tc.train_stride = 2;
    tc.lr = 1e-3;
    train(model, tr, va, tc, LossConfig{}, [](const EpochRecord& r) {
        std::cout << "epoch " << r.epoch << "  train " << r.train_loss << "  val " << r.val_loss << "  lambda "
                  << r.lambda_mean << '\n';
    });

    std::vector<TimeSeries> actual, insample, naive;
    for (std::size_t i = 0; i < te.size(); ++i) {
        actual.push_back(te.target_of(i));
        insample.push_back(te.lookback_of(i));
        naive.push_back(naive_forecast(insample.back(), h));
    }
    const auto deep = predict(model, te);
    const auto rd = evaluate_forecasts(actual, deep, insample);
    const auto rn = evaluate_forecasts(actual, naive, insample);
    std::cout << "test windows " << te.size() << '\n'
              << "deepedm  mse " << rd.mse << "  mae " << rd.mae << "  mase " << rd.mase << '\n'
              << "naive    mse " << rn.mse << "  mae " << rn.mae << "  mase " << rn.mase << '\n';
}
