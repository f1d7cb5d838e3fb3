#pragma once

#include <functional>

#include "flexssm/tensor.hpp"

namespace flexssm {

// Central-difference check of reverse-mode gradients, 64-bit only. `f` receives
// a fresh tape and a leaf holding `x` and must return a scalar on that tape.
// Returns max over coordinates of |analytic - numeric| / max(1e-8, |numeric|).
inline double gradcheck(const std::function<Tensor<double>(Tape<double>&, Tensor<double>)>& f,
                        const std::vector<double>& x, Shape shape, double eps = 1e-5) {
    {
        Tape<double> tape;
        Tensor<double> leaf = tape.leaf(shape, x, true);
        Tensor<double> out = f(tape, leaf);
        if (out.numel() != 1)
            throw std::invalid_argument("gradcheck: function output is not scalar " + shape_str(out.shape()));
    }
    std::vector<double> analytic;
    {
        Tape<double> tape;
        Tensor<double> leaf = tape.leaf(shape, x, true);
        Tensor<double> out = f(tape, leaf);
        tape.backward(out);
        analytic = leaf.grad();
    }
    double worst = 0.0;
    std::vector<double> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double h = eps * std::max(1.0, std::fabs(x[i]));
        double fp, fm;
        {
            Tape<double> tape;
            probe[i] = x[i] + h;
            fp = f(tape, tape.leaf(shape, probe, false)).item();
        }
        {
            Tape<double> tape;
            probe[i] = x[i] - h;
            fm = f(tape, tape.leaf(shape, probe, false)).item();
        }
        probe[i] = x[i];
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::fabs(analytic[i] - numeric) / std::max(1e-8, std::fabs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace flexssm
