// Simplex projection against the last-value forecast on the Rossler system at
// several horizons and noise levels.

#include <iomanip>
#include <iostream>

#include "deepedm/deepedm.hpp"

using namespace deepedm;

int main() {
    std::cout << std::setw(8) << "sigma" << std::setw(6) << "H" << std::setw(14) << "simplex" << std::setw(14)
              << "naive" << '\n';
    for (double sigma : {0.0, 0.5, 2.0}) {
        SyntheticSpec spec;
        spec.system = "rossler";
        spec.sigma_noise = sigma;
        spec.n_steps = 3000;
        const auto series = generate(spec).observations;
        for (std::size_t h : {5u, 20u, 50u}) {
            const std::size_t t = 4 * h;
            const auto w = make_windows(series.slice_time(2400, 600), t, h, 10);
            std::vector<TimeSeries> actual, insample, sx, nv;
            for (std::size_t i = 0; i < w.size(); ++i) {
                actual.push_back(w.target_of(i));
                insample.push_back(w.lookback_of(i));
                sx.push_back(simplex_multivariate(insample.back(), {}, h));
                nv.push_back(naive_forecast(insample.back(), h));
            }
            MetricOptions opt;
            opt.with_owa = false;
            std::cout << std::setw(8) << sigma << std::setw(6) << h << std::setw(14)
                      << evaluate_forecasts(actual, sx, insample, opt).mse << std::setw(14)
                      << evaluate_forecasts(actual, nv, insample, opt).mse << '\n';
        }
    }
}
