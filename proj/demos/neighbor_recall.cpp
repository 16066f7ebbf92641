// How well do delay-coordinate neighbors match true state-space neighbors?
// Prints recall for a few embedding dimensions, clean and noisy.

#include <iomanip>
#include <iostream>

#include "deepedm/deepedm.hpp"

using namespace deepedm;

int main() {
    RecallExperimentConfig rc;
    rc.ks = {1, 7};
    rc.delta_ts = {1, 3, 5, 10};
    rc.sigmas = {0.0, 1.0, 2.5};
    const auto rows = run_recall(rc);
    std::cout << std::setw(6) << "sigma" << std::setw(10) << "delta_t" << std::setw(4) << "K" << std::setw(10)
              << "recall" << '\n'
              << std::fixed << std::setprecision(3);
    for (const auto& r : rows) {
        std::cout << std::setw(6) << r.sigma_noise << std::setw(10) << r.delta_t << std::setw(4) << r.k
                  << std::setw(10) << r.recall << '\n';
    }
}
