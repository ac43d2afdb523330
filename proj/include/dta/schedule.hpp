#pragma once

#include <algorithm>
#include <stdexcept>
#include <utility>

namespace dta {

/// Linear ramp factor: min(1, t / ramp_epochs).
inline double ramp_factor(int epoch, int ramp_epochs) {
    if (ramp_epochs < 1) throw std::invalid_argument("ramp_factor: ramp period must be >= 1");
    if (epoch < 0) throw std::invalid_argument("ramp_factor: negative epoch");
    return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(ramp_epochs));
}

/// Perturbation-magnitude ramp. The same period applies to both kinds; the
/// loss weights stay constant while the magnitudes grow.
struct RampSchedule {
    int ramp_epochs = 1;
    double max_delta_e = 0.0;
    double max_delta_c = 0.0;

    /// (delta_e(t), delta_c(t)) = ramp * (max_e, max_c).
    std::pair<double, double> current_magnitudes(int epoch) const {
        const double beta = ramp_factor(epoch, ramp_epochs);
        return {beta * max_delta_e, beta * max_delta_c};
    }
};

}  // namespace dta
