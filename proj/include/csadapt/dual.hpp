#pragma once

// Two-path decoding: the same encoder memory is decoded once under each
// language prompt (optionally with per-language bottleneck modules on the
// decoder), and a learned gate blends the two output distributions position
// by position. The gate's score heads start at zero, so both paths weigh
// exactly one half at init. A small shared language-identification head over
// pooled decoder states supplies an auxiliary loss.

#include <string>
#include <utility>
#include <vector>

#include "csadapt/adapters.hpp"
#include "csadapt/model.hpp"

namespace csadapt {

inline constexpr int kLangZh = 0;
inline constexpr int kLangEn = 1;

inline void add_fusion_params(ParamStore& ps, const ModelConfig& cfg) {
    ps.add("adapt.fusion.zh.w", Mat::Zero(cfg.d_model, 1));
    ps.add("adapt.fusion.zh.b", Mat::Zero(1, 1));
    ps.add("adapt.fusion.en.w", Mat::Zero(cfg.d_model, 1));
    ps.add("adapt.fusion.en.b", Mat::Zero(1, 1));
}

inline void add_lid_params(ParamStore& ps, Rng& rng, const ModelConfig& cfg) {
    add_linear_params(ps, rng, "adapt.lid", cfg.d_model, 2);
}

struct DualStates {
    Var zh;  // [P+L, d] decoder states under the zh prompt
    Var en;  // [P+L, d] decoder states under the en prompt
    int prompt_len = 0;
};

// Decode the shared suffix under both language prompts. Base weights are
// fetched through the session cache, so both passes read the very same leaf
// nodes; only prompts and per-path hooks differ.
inline DualStates dual_decode_states(Session& s, const ModelConfig& cfg, const std::vector<int>& suffix,
                                     Var memory, const StackHooks* hooks_zh = nullptr,
                                     const StackHooks* hooks_en = nullptr) {
    const auto prompt_zh = build_prompt(cfg.special, PromptMode::single_zh);
    const auto prompt_en = build_prompt(cfg.special, PromptMode::single_en);
    DualStates out;
    out.prompt_len = static_cast<int>(prompt_zh.size());
    out.zh = decode_states(s, cfg, decoder_input(prompt_zh, suffix), memory, hooks_zh);
    out.en = decode_states(s, cfg, decoder_input(prompt_en, suffix), memory, hooks_en);
    return out;
}

struct FusedPrediction {
    Var log_mix;  // [n_targets+1, vocab] log of the blended distribution
    Var weights;  // [n_targets+1, 2] per-position path weights
};

// Blend the per-position output distributions of the two paths. Each path
// contributes a scalar score per prediction row from its own decoder state;
// a two-way softmax over the scores gives the convex blending weights.
inline FusedPrediction fuse_predictions(Session& s, const DualStates& d, int n_targets) {
    Tape& t = s.tape;
    const int rows = n_targets + 1;
    Var st_zh = t.slice_rows(d.zh, d.prompt_len - 1, rows);
    Var st_en = t.slice_rows(d.en, d.prompt_len - 1, rows);
    Var score_zh = linear(s, "adapt.fusion.zh", st_zh);  // [rows, 1]
    Var score_en = linear(s, "adapt.fusion.en", st_en);
    Var w = t.softmax_rows(t.concat_cols({score_zh, score_en}));  // [rows, 2]
    Var p_zh = t.softmax_rows(output_logits(s, st_zh));
    Var p_en = t.softmax_rows(output_logits(s, st_en));
    Var mix = t.add(t.scale_rows(p_zh, t.slice_cols(w, 0, 1)), t.scale_rows(p_en, t.slice_cols(w, 1, 1)));
    return {t.log_op(mix), w};
}

// Summed NLL of targets + end token under the blended distribution.
inline Var fused_nll(Session& s, const ModelConfig& cfg, const FusedPrediction& f,
                     const std::vector<int>& targets) {
    std::vector<int> wanted = targets;
    wanted.push_back(cfg.special.eot);
    return s.tape.scale(s.tape.sum_all(s.tape.pick_per_row(f.log_mix, wanted)), -1.0);
}

// Auxiliary language-identification loss: mean-pool each path's decoder
// states over the target positions (prompt rows excluded), classify with a
// shared two-way head, and sum the cross-entropies. `dominant` is kLangZh or
// kLangEn.
inline Var lid_loss(Session& s, const DualStates& d, int n_targets, int dominant) {
    if (n_targets < 1) throw InputError("lid loss needs at least one target position");
    if (dominant != kLangZh && dominant != kLangEn) throw InputError("dominant language must be 0 or 1");
    Tape& t = s.tape;
    Var total;
    bool first = true;
    for (Var states : {d.zh, d.en}) {
        Var pooled = t.mean_rows(t.slice_rows(states, d.prompt_len, n_targets));  // [1, d]
        Var lp = t.log_softmax_rows(linear(s, "adapt.lid", pooled));              // [1, 2]
        Var ce = t.scale(t.pick_per_row(lp, {dominant}), -1.0);
        total = first ? ce : t.add(total, ce);
        first = false;
    }
    return total;
}

// ---------------------------------------------------------------------------
// greedy decoding over the blended distribution
// ---------------------------------------------------------------------------

struct DualDecodeResult {
    std::vector<int> tokens;
    std::vector<std::pair<double, double>> weights;  // (zh, en) gate at each emitted position
};

inline DualDecodeResult dual_greedy_decode(Session& s, const ModelConfig& cfg, Var memory,
                                           const StackHooks* hooks_zh = nullptr,
                                           const StackHooks* hooks_en = nullptr, int max_new = -1) {
    const int prompt_len = static_cast<int>(build_prompt(cfg.special, PromptMode::single_zh).size());
    if (max_new < 0) max_new = cfg.max_tgt_tokens - prompt_len - 1;
    DualDecodeResult out;
    for (int step = 0; step < max_new; ++step) {
        DualStates d = dual_decode_states(s, cfg, out.tokens, memory, hooks_zh, hooks_en);
        FusedPrediction f = fuse_predictions(s, d, static_cast<int>(out.tokens.size()));
        const Mat& lp = s.tape.value(f.log_mix);
        const Mat& w = s.tape.value(f.weights);
        const int last = static_cast<int>(lp.rows()) - 1;
        int best = 0;
        for (int k = 1; k < lp.cols(); ++k)
            if (lp(last, k) > lp(last, best)) best = k;
        if (best == cfg.special.eot) break;
        out.tokens.push_back(best);
        out.weights.emplace_back(w(last, 0), w(last, 1));
    }
    return out;
}

}  // namespace csadapt
