#pragma once

// Miniature pre-norm transformer encoder-decoder over acoustic feature frames,
// with hook points where residual bottleneck modules can graft onto sublayer
// outputs. The token embedding is tied to the output projection.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "csadapt/config.hpp"
#include "csadapt/errors.hpp"
#include "csadapt/rng.hpp"
#include "csadapt/session.hpp"

namespace csadapt {

// ---------------------------------------------------------------------------
// parameter construction
// ---------------------------------------------------------------------------

inline Mat randn_mat(Rng& rng, int rows, int cols, double stddev) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
    return m;
}

inline void add_linear_params(ParamStore& ps, Rng& rng, const std::string& prefix, int in, int out,
                              double stddev = 0.02) {
    ps.add(prefix + ".w", randn_mat(rng, in, out, stddev));
    ps.add(prefix + ".b", Mat::Zero(1, out));
}

inline void add_layer_norm_params(ParamStore& ps, const std::string& prefix, int d) {
    ps.add(prefix + ".g", Mat::Ones(1, d));
    ps.add(prefix + ".b", Mat::Zero(1, d));
}

inline void add_attention_params(ParamStore& ps, Rng& rng, const std::string& prefix, int d) {
    for (const char* part : {".q", ".k", ".v", ".o"}) add_linear_params(ps, rng, prefix + part, d, d);
}

inline void add_mlp_params(ParamStore& ps, Rng& rng, const std::string& prefix, int d, int d_ff) {
    add_linear_params(ps, rng, prefix + ".fc1", d, d_ff);
    add_linear_params(ps, rng, prefix + ".fc2", d_ff, d);
}

// All backbone weights live under the "base." namespace; the freezing policy
// keys off that prefix.
inline void build_base_params(ParamStore& ps, const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ps.add("base.embed", randn_mat(rng, cfg.vocab_size, cfg.d_model, 0.02));
    add_linear_params(ps, rng, "base.feat_proj", cfg.n_feat, cfg.d_model);
    for (int i = 0; i < cfg.n_enc_layers; ++i) {
        const std::string l = "base.enc.l" + std::to_string(i);
        add_layer_norm_params(ps, l + ".ln1", cfg.d_model);
        add_attention_params(ps, rng, l + ".attn", cfg.d_model);
        add_layer_norm_params(ps, l + ".ln2", cfg.d_model);
        add_mlp_params(ps, rng, l + ".mlp", cfg.d_model, cfg.d_ff);
    }
    add_layer_norm_params(ps, "base.enc.ln_f", cfg.d_model);
    for (int i = 0; i < cfg.n_dec_layers; ++i) {
        const std::string l = "base.dec.l" + std::to_string(i);
        add_layer_norm_params(ps, l + ".ln1", cfg.d_model);
        add_attention_params(ps, rng, l + ".self", cfg.d_model);
        add_layer_norm_params(ps, l + ".ln2", cfg.d_model);
        add_attention_params(ps, rng, l + ".cross", cfg.d_model);
        add_layer_norm_params(ps, l + ".ln3", cfg.d_model);
        add_mlp_params(ps, rng, l + ".mlp", cfg.d_model, cfg.d_ff);
    }
    add_layer_norm_params(ps, "base.dec.ln_f", cfg.d_model);
}

// ---------------------------------------------------------------------------
// forward building blocks
// ---------------------------------------------------------------------------

inline Mat sinusoidal_positions(int n, int d) {
    Mat pe(n, d);
    for (int pos = 0; pos < n; ++pos) {
        for (int i = 0; i < d; i += 2) {
            double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
            pe(pos, i) = std::sin(angle);
            if (i + 1 < d) pe(pos, i + 1) = std::cos(angle);
        }
    }
    return pe;
}

inline Mat causal_mask(int n) {
    Mat m = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m(i, j) = -1e30;
    return m;
}

// Per-sublayer grafting points. A hook receives the sublayer output (before
// the residual add) and returns its replacement; empty means identity.
struct StackHooks {
    std::function<Var(Session&, int layer, Var)> attn_out;
    std::function<Var(Session&, int layer, Var)> mlp_out;
};

inline Var linear(Session& s, const std::string& prefix, Var x) {
    return s.tape.add_rowvec(s.tape.matmul(x, s.p(prefix + ".w")), s.p(prefix + ".b"));
}

inline Var layer_norm_p(Session& s, const std::string& prefix, Var x) {
    return s.tape.layer_norm(x, s.p(prefix + ".g"), s.p(prefix + ".b"));
}

inline Var mlp_block(Session& s, const std::string& prefix, Var x) {
    return linear(s, prefix + ".fc2", s.tape.gelu(linear(s, prefix + ".fc1", x)));
}

inline Var attention_block(Session& s, const std::string& prefix, const ModelConfig& cfg, Var q_in, Var kv_in,
                           const Mat* mask) {
    const int dh = cfg.d_model / cfg.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Var q = linear(s, prefix + ".q", q_in);
    Var k = linear(s, prefix + ".k", kv_in);
    Var v = linear(s, prefix + ".v", kv_in);
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
        Var qh = s.tape.slice_cols(q, h * dh, dh);
        Var kh = s.tape.slice_cols(k, h * dh, dh);
        Var vh = s.tape.slice_cols(v, h * dh, dh);
        Var scores = s.tape.scale(s.tape.matmul_nt(qh, kh), inv_sqrt);
        if (mask) scores = s.tape.add_const(scores, *mask);
        heads.push_back(s.tape.matmul(s.tape.softmax_rows(scores), vh));
    }
    return linear(s, prefix + ".o", s.tape.concat_cols(heads));
}

// ---------------------------------------------------------------------------
// encoder / decoder passes
// ---------------------------------------------------------------------------

inline Var encode(Session& s, const ModelConfig& cfg, const Mat& features, const StackHooks* hooks = nullptr) {
    if (features.rows() < 1 || features.rows() > cfg.max_src_frames)
        throw InputError("encode: frame count " + std::to_string(features.rows()) + " outside [1, " +
                         std::to_string(cfg.max_src_frames) + "]");
    if (features.cols() != cfg.n_feat)
        throw InputError("encode: expected " + std::to_string(cfg.n_feat) + " feature dims, got " +
                         std::to_string(features.cols()));
    Var x = linear(s, "base.feat_proj", s.tape.constant(features));
    x = s.tape.add_const(x, sinusoidal_positions(static_cast<int>(features.rows()), cfg.d_model));
    for (int i = 0; i < cfg.n_enc_layers; ++i) {
        const std::string l = "base.enc.l" + std::to_string(i);
        Var n1 = layer_norm_p(s, l + ".ln1", x);
        Var a = attention_block(s, l + ".attn", cfg, n1, n1, nullptr);
        if (hooks && hooks->attn_out) a = hooks->attn_out(s, i, a);
        x = s.tape.add(x, a);
        Var m = mlp_block(s, l + ".mlp", layer_norm_p(s, l + ".ln2", x));
        if (hooks && hooks->mlp_out) m = hooks->mlp_out(s, i, m);
        x = s.tape.add(x, m);
    }
    return layer_norm_p(s, "base.enc.ln_f", x);
}

inline void validate_tokens(const ModelConfig& cfg, const std::vector<int>& tokens) {
    if (tokens.empty() || static_cast<int>(tokens.size()) > cfg.max_tgt_tokens)
        throw InputError("decode: token count " + std::to_string(tokens.size()) + " outside [1, " +
                         std::to_string(cfg.max_tgt_tokens) + "]");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw InputError("decode: token " + std::to_string(t) + " outside vocabulary");
}

inline Var decode_states(Session& s, const ModelConfig& cfg, const std::vector<int>& tokens, Var memory,
                         const StackHooks* hooks = nullptr) {
    validate_tokens(cfg, tokens);
    const int L = static_cast<int>(tokens.size());
    Var x = s.tape.gather_rows(s.p("base.embed"), tokens);
    x = s.tape.add_const(x, sinusoidal_positions(L, cfg.d_model));
    const Mat mask = causal_mask(L);
    for (int i = 0; i < cfg.n_dec_layers; ++i) {
        const std::string l = "base.dec.l" + std::to_string(i);
        Var n1 = layer_norm_p(s, l + ".ln1", x);
        Var a = attention_block(s, l + ".self", cfg, n1, n1, &mask);
        if (hooks && hooks->attn_out) a = hooks->attn_out(s, i, a);
        x = s.tape.add(x, a);
        Var c = attention_block(s, l + ".cross", cfg, layer_norm_p(s, l + ".ln2", x), memory, nullptr);
        x = s.tape.add(x, c);
        Var m = mlp_block(s, l + ".mlp", layer_norm_p(s, l + ".ln3", x));
        if (hooks && hooks->mlp_out) m = hooks->mlp_out(s, i, m);
        x = s.tape.add(x, m);
    }
    return layer_norm_p(s, "base.dec.ln_f", x);
}

// Tied output head: scores against every embedding row.
inline Var output_logits(Session& s, Var states) { return s.tape.matmul_nt(states, s.p("base.embed")); }

// ---------------------------------------------------------------------------
// prompts and teacher-forced loss
// ---------------------------------------------------------------------------

// The two-prompt mode expands to two separate passes and has no single
// sequence; callers handle it one language at a time.
inline std::vector<int> build_prompt(const SpecialTokens& sp, PromptMode mode) {
    switch (mode) {
        case PromptMode::single_zh: return {sp.sot, sp.lang_zh, sp.task};
        case PromptMode::single_en: return {sp.sot, sp.lang_en, sp.task};
        case PromptMode::concat: return {sp.sot, sp.lang_en, sp.lang_zh, sp.task};
        case PromptMode::pair: throw InternalError("pair prompt expands to two single-language passes");
    }
    throw InternalError("unreachable prompt mode");
}

inline std::vector<int> decoder_input(const std::vector<int>& prompt, const std::vector<int>& targets) {
    std::vector<int> in = prompt;
    in.insert(in.end(), targets.begin(), targets.end());
    return in;
}

// Teacher-forced token log-probabilities: given decoder states over
// prompt + targets, rows prompt_len-1 ... end predict targets followed by the
// end token. Returns the [len(targets)+1, vocab] log-distribution slice.
inline Var prediction_log_probs(Session& s, Var dec_states, int prompt_len, int n_targets) {
    if (prompt_len < 1) throw InputError("prompt must be non-empty");
    Var lp = s.tape.log_softmax_rows(output_logits(s, dec_states));
    return s.tape.slice_rows(lp, prompt_len - 1, n_targets + 1);
}

// Summed negative log-likelihood of targets + end token (a sequence-level
// quantity, commensurate with the CTC sequence loss).
inline Var attention_nll(Session& s, const ModelConfig& cfg, Var dec_states, int prompt_len,
                         const std::vector<int>& targets) {
    Var lp = prediction_log_probs(s, dec_states, prompt_len, static_cast<int>(targets.size()));
    std::vector<int> wanted = targets;
    wanted.push_back(cfg.special.eot);
    return s.tape.scale(s.tape.sum_all(s.tape.pick_per_row(lp, wanted)), -1.0);
}

// ---------------------------------------------------------------------------
// greedy decoding
// ---------------------------------------------------------------------------

inline std::vector<int> greedy_decode(Session& s, const ModelConfig& cfg, Var memory,
                                      const std::vector<int>& prompt, const StackHooks* hooks = nullptr,
                                      int max_new = -1) {
    if (max_new < 0) max_new = cfg.max_tgt_tokens - static_cast<int>(prompt.size()) - 1;
    std::vector<int> tokens = prompt;
    std::vector<int> emitted;
    for (int step = 0; step < max_new; ++step) {
        Var states = decode_states(s, cfg, tokens, memory, hooks);
        Var lg = output_logits(s, states);
        const Mat& logits = s.tape.value(lg);
        int best = 0;
        for (int k = 1; k < logits.cols(); ++k)
            if (logits(logits.rows() - 1, k) > logits(logits.rows() - 1, best)) best = k;
        if (best == cfg.special.eot) break;
        emitted.push_back(best);
        tokens.push_back(best);
    }
    return emitted;
}

}  // namespace csadapt
