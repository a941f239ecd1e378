#pragma once

// Connectionist temporal classification: sequence loss over per-frame label
// posteriors, its exact gradient, a greedy collapse decoder, and a
// path-enumeration reference implementation used to cross-check the dynamic
// program on small instances.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "csadapt/errors.hpp"
#include "csadapt/tape.hpp"

namespace csadapt {
namespace ctc {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Frames needed to emit `targets`: one per label plus one mandatory blank
// between each adjacent equal pair.
inline int min_frames(const std::vector<int>& targets) {
    int need = static_cast<int>(targets.size());
    for (size_t i = 1; i < targets.size(); ++i)
        if (targets[i] == targets[i - 1]) ++need;
    return need;
}

inline void validate_inputs(const Mat& log_probs, const std::vector<int>& targets, int blank) {
    const int T = static_cast<int>(log_probs.rows());
    const int K = static_cast<int>(log_probs.cols());
    if (T == 0 || K < 2) throw InputError("ctc: log_probs must be [T>=1, K>=2]");
    if (blank < 0 || blank >= K) throw InputError("ctc: blank index out of range");
    for (int v : targets)
        if (v < 0 || v >= K || v == blank)
            throw InputError("ctc: target symbol " + std::to_string(v) + " out of range");
    // Rows must be (approximate) log-distributions. The gate is deliberately
    // loose so that small numerical probes on individual entries still pass.
    for (int t = 0; t < T; ++t) {
        double lse = kNegInf;
        for (int k = 0; k < K; ++k) lse = log_add(lse, log_probs(t, k));
        if (std::abs(lse) > 1e-3)
            throw InputError("ctc: row " + std::to_string(t) + " of log_probs is not normalized");
    }
    if (T < min_frames(targets))
        throw FeasibilityError("ctc: " + std::to_string(T) + " frames cannot emit a label sequence needing " +
                               std::to_string(min_frames(targets)));
}

// Remove consecutive duplicates, then drop blanks.
inline std::vector<int> collapse(const std::vector<int>& frame_labels, int blank) {
    std::vector<int> out;
    int prev = -1;
    for (int v : frame_labels) {
        if (v != prev && v != blank) out.push_back(v);
        prev = v;
    }
    return out;
}

// Reference loss by explicit enumeration of all K^T frame labelings.
// Exponential; intentionally restricted to tiny instances.
inline double brute_force_loss(const Mat& log_probs, const std::vector<int>& targets, int blank) {
    const int T = static_cast<int>(log_probs.rows());
    const int K = static_cast<int>(log_probs.cols());
    if (T > 8 || K > 6) throw InputError("ctc: brute force capped at T<=8, K<=6");
    validate_inputs(log_probs, targets, blank);

    double total = kNegInf;
    std::vector<int> path(T, 0);
    while (true) {
        if (collapse(path, blank) == targets) {
            double lp = 0.0;
            for (int t = 0; t < T; ++t) lp += log_probs(t, path[t]);
            total = log_add(total, lp);
        }
        int pos = T - 1;
        while (pos >= 0 && path[pos] == K - 1) path[pos--] = 0;
        if (pos < 0) break;
        ++path[pos];
    }
    return -total;
}

namespace detail {

// Extended label sequence: blank, t0, blank, t1, ..., blank.
inline std::vector<int> extend(const std::vector<int>& targets, int blank) {
    std::vector<int> ext(2 * targets.size() + 1, blank);
    for (size_t i = 0; i < targets.size(); ++i) ext[2 * i + 1] = targets[i];
    return ext;
}

inline Mat alpha_pass(const Mat& lp, const std::vector<int>& ext) {
    const int T = static_cast<int>(lp.rows());
    const int S = static_cast<int>(ext.size());
    Mat a = Mat::Constant(T, S, kNegInf);
    a(0, 0) = lp(0, ext[0]);
    if (S > 1) a(0, 1) = lp(0, ext[1]);
    for (int t = 1; t < T; ++t) {
        for (int s = 0; s < S; ++s) {
            double acc = a(t - 1, s);
            if (s >= 1) acc = log_add(acc, a(t - 1, s - 1));
            if (s >= 2 && ext[s] != ext[s - 2]) acc = log_add(acc, a(t - 1, s - 2));
            a(t, s) = acc + lp(t, ext[s]);
        }
    }
    return a;
}

inline Mat beta_pass(const Mat& lp, const std::vector<int>& ext) {
    const int T = static_cast<int>(lp.rows());
    const int S = static_cast<int>(ext.size());
    Mat b = Mat::Constant(T, S, kNegInf);
    b(T - 1, S - 1) = lp(T - 1, ext[S - 1]);
    if (S > 1) b(T - 1, S - 2) = lp(T - 1, ext[S - 2]);
    for (int t = T - 2; t >= 0; --t) {
        for (int s = S - 1; s >= 0; --s) {
            double acc = b(t + 1, s);
            if (s + 1 < S) acc = log_add(acc, b(t + 1, s + 1));
            if (s + 2 < S && ext[s] != ext[s + 2]) acc = log_add(acc, b(t + 1, s + 2));
            b(t, s) = acc + lp(t, ext[s]);
        }
    }
    return b;
}

}  // namespace detail

// Negative log-likelihood of `targets` under per-frame log posteriors,
// computed with the standard forward dynamic program in log space.
inline double loss(const Mat& log_probs, const std::vector<int>& targets, int blank) {
    validate_inputs(log_probs, targets, blank);
    const auto ext = detail::extend(targets, blank);
    const Mat a = detail::alpha_pass(log_probs, ext);
    const int T = static_cast<int>(log_probs.rows());
    const int S = static_cast<int>(ext.size());
    double ll = a(T - 1, S - 1);
    if (S > 1) ll = log_add(ll, a(T - 1, S - 2));
    return -ll;
}

struct LossAndGrad {
    double loss;
    Mat grad;  // d loss / d log_probs, same shape as log_probs
};

// Loss plus exact gradient via the forward-backward decomposition:
// summing alpha*beta over extended positions carrying symbol k recovers, for
// every frame, the total path likelihood weighted by that frame's posterior.
inline LossAndGrad loss_and_grad(const Mat& log_probs, const std::vector<int>& targets, int blank) {
    validate_inputs(log_probs, targets, blank);
    const auto ext = detail::extend(targets, blank);
    const Mat a = detail::alpha_pass(log_probs, ext);
    const Mat b = detail::beta_pass(log_probs, ext);
    const int T = static_cast<int>(log_probs.rows());
    const int S = static_cast<int>(ext.size());
    double ll = a(T - 1, S - 1);
    if (S > 1) ll = log_add(ll, a(T - 1, S - 2));

    Mat g = Mat::Zero(T, static_cast<int>(log_probs.cols()));
    for (int t = 0; t < T; ++t) {
        // log sum over extended positions with symbol k of alpha*beta
        std::vector<double> per_symbol(static_cast<size_t>(log_probs.cols()), kNegInf);
        for (int s = 0; s < S; ++s)
            per_symbol[static_cast<size_t>(ext[s])] =
                log_add(per_symbol[static_cast<size_t>(ext[s])], a(t, s) + b(t, s));
        for (int k = 0; k < log_probs.cols(); ++k) {
            if (per_symbol[static_cast<size_t>(k)] == kNegInf) continue;
            g(t, k) = -std::exp(per_symbol[static_cast<size_t>(k)] - log_probs(t, k) - ll);
        }
    }
    return {-ll, g};
}

// Greedy frame-wise argmax followed by collapse.
inline std::vector<int> greedy_decode(const Mat& log_probs, int blank) {
    std::vector<int> frames(static_cast<size_t>(log_probs.rows()));
    for (int t = 0; t < log_probs.rows(); ++t) {
        int best = 0;
        for (int k = 1; k < log_probs.cols(); ++k)
            if (log_probs(t, k) > log_probs(t, best)) best = k;
        frames[static_cast<size_t>(t)] = best;
    }
    return collapse(frames, blank);
}

}  // namespace ctc

// Differentiable CTC loss node: 1x1 output attached to a [T,K] log-prob node.
inline Var ctc_loss_node(Tape& tape, Var log_probs, const std::vector<int>& targets, int blank) {
    const Mat& lp = tape.value(log_probs);
    auto lg = ctc::loss_and_grad(lp, targets, blank);
    Mat out = Mat::Constant(1, 1, lg.loss);
    return tape.custom_unary(log_probs, std::move(out),
                             [grad = std::move(lg.grad)](const Mat&, const Mat& gout) -> Mat {
                                 return gout(0, 0) * grad;
                             });
}

}  // namespace csadapt
