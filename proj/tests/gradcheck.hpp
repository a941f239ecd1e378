#pragma once

// Central finite-difference gradient checking for tape-built scalars.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "csadapt/tape.hpp"

namespace gradcheck {

using csadapt::Mat;

struct Result {
    double max_rel_err = 0.0;
    std::string where;
    bool ok(double tol) const { return max_rel_err < tol; }
};

// loss_fn maps a set of input matrices to a scalar loss; it must rebuild the
// whole computation from plain values so the numeric probe sees the same
// function the tape differentiated.
//
// `floor` is the gradient scale below which the comparison turns absolute:
// central differences on an O(1) loss carry ~1e-10 of roundoff, so demanding
// relative agreement against a truly tiny gradient only measures that noise.
inline Result check(const std::function<double(const std::vector<Mat>&)>& loss_fn,
                    std::vector<Mat> inputs, const std::vector<Mat>& analytic_grads,
                    double h = 1e-5, double floor = 1e-5) {
    Result res;
    for (size_t k = 0; k < inputs.size(); ++k) {
        for (int r = 0; r < inputs[k].rows(); ++r) {
            for (int c = 0; c < inputs[k].cols(); ++c) {
                double orig = inputs[k](r, c);
                inputs[k](r, c) = orig + h;
                double up = loss_fn(inputs);
                inputs[k](r, c) = orig - h;
                double down = loss_fn(inputs);
                inputs[k](r, c) = orig;
                double fd = (up - down) / (2.0 * h);
                double an = analytic_grads[k](r, c);
                double denom = std::max({std::abs(fd), std::abs(an), floor});
                double rel = std::abs(fd - an) / denom;
                if (rel > res.max_rel_err) {
                    res.max_rel_err = rel;
                    res.where = "input " + std::to_string(k) + " (" + std::to_string(r) + "," + std::to_string(c) + ")";
                }
            }
        }
    }
    return res;
}

}  // namespace gradcheck
