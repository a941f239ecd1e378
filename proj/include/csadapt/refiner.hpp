#pragma once

// Recurrent refinement of encoder states: an LSTM stack reads the encoder
// output and a zero-initialized projection adds its states back residually,
// so the refined sequence equals the raw encoder output at step zero. The
// refined states feed both the frame-level classification head and the
// decoder's cross-attention.

#include <string>
#include <vector>

#include "csadapt/config.hpp"
#include "csadapt/model.hpp"

namespace csadapt {

namespace detail {

// Gate layout within the fused [*, 4H] matrices: input, forget, cell, output.
inline void add_lstm_cell_params(ParamStore& ps, Rng& rng, const std::string& prefix, int in, int hidden) {
    ps.add(prefix + ".wx", randn_mat(rng, in, 4 * hidden, 0.08));
    ps.add(prefix + ".wh", randn_mat(rng, hidden, 4 * hidden, 0.08));
    Mat b = Mat::Zero(1, 4 * hidden);
    b.block(0, hidden, 1, hidden).setOnes();  // open forget gates at init
    ps.add(prefix + ".b", b);
}

// One direction of one layer over input x [T, D] -> hidden states [T, H].
// reversed=true scans the frames back to front (states returned in frame order).
inline Var lstm_direction(Session& s, const std::string& prefix, Var x, int hidden, bool reversed) {
    Tape& t = s.tape;
    const int T = static_cast<int>(t.value(x).rows());
    Var xw = t.matmul(x, s.p(prefix + ".wx"));  // [T, 4H]
    Var b = s.p(prefix + ".b");
    Var h = t.constant(Mat::Zero(1, hidden));
    Var c = t.constant(Mat::Zero(1, hidden));
    std::vector<Var> rows(static_cast<size_t>(T));
    for (int step = 0; step < T; ++step) {
        const int row = reversed ? T - 1 - step : step;
        Var gates = t.add(t.add(t.slice_rows(xw, row, 1), t.matmul(h, s.p(prefix + ".wh"))), b);
        Var gi = t.sigmoid(t.slice_cols(gates, 0, hidden));
        Var gf = t.sigmoid(t.slice_cols(gates, hidden, hidden));
        Var gc = t.tanh_op(t.slice_cols(gates, 2 * hidden, hidden));
        Var go = t.sigmoid(t.slice_cols(gates, 3 * hidden, hidden));
        c = t.add(t.mul(gf, c), t.mul(gi, gc));
        h = t.mul(go, t.tanh_op(c));
        rows[static_cast<size_t>(row)] = h;
    }
    return t.concat_rows(rows);
}

}  // namespace detail

inline void add_refiner_params(ParamStore& ps, Rng& rng, const RefinerConfig& rc, int d_model) {
    if (rc.n_layers < 1 || rc.hidden < 1) throw ConfigError("refiner needs >=1 layer and >=1 hidden unit");
    const int dir_width = rc.bidirectional ? 2 * rc.hidden : rc.hidden;
    int in = d_model;
    for (int i = 0; i < rc.n_layers; ++i) {
        const std::string l = "adapt.refiner.l" + std::to_string(i);
        detail::add_lstm_cell_params(ps, rng, l + ".fwd", in, rc.hidden);
        if (rc.bidirectional) detail::add_lstm_cell_params(ps, rng, l + ".bwd", in, rc.hidden);
        in = dir_width;
    }
    // residual read-out starts at zero: refined == encoder output at init
    ps.add("adapt.refiner.proj.w", Mat::Zero(dir_width, d_model));
    ps.add("adapt.refiner.proj.b", Mat::Zero(1, d_model));
}

// Hidden-state sequence of the full stack, [T, H] or [T, 2H].
inline Var refiner_lstm_states(Session& s, const RefinerConfig& rc, Var x) {
    Var h = x;
    for (int i = 0; i < rc.n_layers; ++i) {
        const std::string l = "adapt.refiner.l" + std::to_string(i);
        Var fwd = detail::lstm_direction(s, l + ".fwd", h, rc.hidden, false);
        h = rc.bidirectional ? s.tape.concat_cols({fwd, detail::lstm_direction(s, l + ".bwd", h, rc.hidden, true)})
                             : fwd;
    }
    return h;
}

inline Var refine(Session& s, const RefinerConfig& rc, Var enc_states) {
    Var read = linear(s, "adapt.refiner.proj", refiner_lstm_states(s, rc, enc_states));
    return s.tape.add(enc_states, read);
}

// Frame-level classification head over vocab + 1 (the extra class marks
// "no emission"). Attaches to refined states, or directly to the encoder
// output when no refiner is configured.
inline void add_ctc_head_params(ParamStore& ps, Rng& rng, const ModelConfig& cfg) {
    add_linear_params(ps, rng, "adapt.ctc", cfg.d_model, cfg.vocab_size + 1);
}

inline Var ctc_head_log_probs(Session& s, Var states) {
    return s.tape.log_softmax_rows(linear(s, "adapt.ctc", states));
}

}  // namespace csadapt
