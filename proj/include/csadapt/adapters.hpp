#pragma once

// Low-rank residual bottleneck modules. Each grafts onto a sublayer output as
// x + (x . down) . up, with `up` zero-initialized so a freshly added module is
// an exact identity and the surrounding network is undisturbed at step zero.

#include <string>

#include "csadapt/model.hpp"

namespace csadapt {

inline void add_adapter_params(ParamStore& ps, Rng& rng, const std::string& prefix, int d, int rank) {
    if (rank < 1 || rank > d) throw ConfigError("adapter rank must be in [1, d_model]");
    ps.add(prefix + ".down", randn_mat(rng, d, rank, 0.02));
    ps.add(prefix + ".up", Mat::Zero(rank, d));
}

// One adapter after the self-attention output and one after the feed-forward
// output of every layer under `root` (e.g. "adapt.enc" -> adapt.enc.l0.attn...).
inline void add_adapter_set(ParamStore& ps, Rng& rng, const std::string& root, int n_layers, int d, int rank) {
    for (int i = 0; i < n_layers; ++i) {
        const std::string l = root + ".l" + std::to_string(i);
        add_adapter_params(ps, rng, l + ".attn", d, rank);
        add_adapter_params(ps, rng, l + ".mlp", d, rank);
    }
}

inline Var apply_adapter(Session& s, const std::string& prefix, Var x) {
    Var squeezed = s.tape.matmul(x, s.p(prefix + ".down"));
    return s.tape.add(x, s.tape.matmul(squeezed, s.p(prefix + ".up")));
}

// Hook set routing every grafting point of a stack through the adapters
// stored under `root`.
inline StackHooks adapter_hooks(std::string root) {
    StackHooks h;
    h.attn_out = [root](Session& s, int layer, Var x) {
        return apply_adapter(s, root + ".l" + std::to_string(layer) + ".attn", x);
    };
    h.mlp_out = [root](Session& s, int layer, Var x) {
        return apply_adapter(s, root + ".l" + std::to_string(layer) + ".mlp", x);
    };
    return h;
}

}  // namespace csadapt
