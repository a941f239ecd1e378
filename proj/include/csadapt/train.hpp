#pragma once

// Two-stage training orchestration. Stage "base" trains the full backbone on
// its corpus with a per-utterance single-language prompt; stage "adapt"
// freezes the backbone and trains only the grafted modules selected by the
// variant flags. Batches are averaged by gradient accumulation over
// per-utterance tapes, clipped by global norm, and stepped with Adam.
// Checkpoint selection follows the lowest dev loss across epochs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "csadapt/adapters.hpp"
#include "csadapt/ctc.hpp"
#include "csadapt/data.hpp"
#include "csadapt/dual.hpp"
#include "csadapt/metrics.hpp"
#include "csadapt/model.hpp"
#include "csadapt/refiner.hpp"

namespace csadapt {

// ---------------------------------------------------------------------------
// loss combinators (free-function twins of the tape-side compositions; both
// call mix2, so the identities hold to the last bit)
// ---------------------------------------------------------------------------

inline double enc_ref_loss(double alpha, double l_att, double l_ctc) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0,1]");
    return mix2(alpha, l_att, 1.0 - alpha, l_ctc);
}

inline double final_loss(double l_dec, double l_ctc, double lam) {
    if (lam < 0.0 || lam > 1.0) throw ConfigError("lambda must be in [0,1]");
    return mix2(lam, l_dec, 1.0 - lam, l_ctc);
}

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

struct Model {
    ModelConfig model_cfg;
    RefinerConfig refiner_cfg;
    VariantConfig variant;
    ParamStore params;
};

// Adaptation parameters implied by the variant flags, created in a fixed
// order so a seed pins every init.
inline void add_variant_params(ParamStore& ps, const ModelConfig& mc, const RefinerConfig& rc,
                               const VariantConfig& v, Rng& rng) {
    if (v.enc_adapters) add_adapter_set(ps, rng, "adapt.enc", mc.n_enc_layers, mc.d_model, v.adapter_rank);
    if (v.dec_adapters) {
        if (v.prompt_mode == PromptMode::pair) {
            add_adapter_set(ps, rng, "adapt.dual.zh", mc.n_dec_layers, mc.d_model, v.adapter_rank);
            add_adapter_set(ps, rng, "adapt.dual.en", mc.n_dec_layers, mc.d_model, v.adapter_rank);
        } else {
            add_adapter_set(ps, rng, "adapt.dec", mc.n_dec_layers, mc.d_model, v.adapter_rank);
        }
    }
    if (v.refiner) add_refiner_params(ps, rng, rc, mc.d_model);
    if (v.ctc) add_ctc_head_params(ps, rng, mc);
    if (v.prompt_mode == PromptMode::pair) {
        add_fusion_params(ps, mc);
        add_lid_params(ps, rng, mc);
    }
}

inline Model model_from_checkpoint(const Checkpoint& ckpt) {
    return Model{ckpt.model, ckpt.refiner, ckpt.variant, ckpt.params};
}

// ---------------------------------------------------------------------------
// per-utterance forward pass
// ---------------------------------------------------------------------------

struct ForwardLosses {
    double att = 0.0;    // teacher-forced token NLL (fused NLL when two-path)
    double ctc = 0.0;    // frame-level sequence NLL (0 when no head)
    double dec = 0.0;    // decoder-side loss incl. the language-id auxiliary
    double total = 0.0;  // the optimized objective
    Var total_node;      // valid while the owning session lives
};

// The prompt a forward pass conditions on: stage base teaches the backbone
// its single-language prompts (picked per utterance); adaptation passes use
// the variant's prompt mode.
inline PromptMode forward_prompt_mode(TrainStage stage, const VariantConfig& v, const Utterance& u) {
    if (stage == TrainStage::base) return u.dominant_lang == "zh" ? PromptMode::single_zh : PromptMode::single_en;
    return v.prompt_mode;
}

inline ForwardLosses utterance_forward(Session& s, const Model& m, const TrainConfig& tc, const Utterance& u) {
    const ModelConfig& mc = m.model_cfg;
    const VariantConfig& v = m.variant;
    Tape& t = s.tape;

    StackHooks enc_hooks = adapter_hooks("adapt.enc");
    Var enc = encode(s, mc, u.features, v.enc_adapters ? &enc_hooks : nullptr);
    Var mem = v.refiner ? refine(s, m.refiner_cfg, enc) : enc;

    Var l_ctc;
    if (v.ctc) l_ctc = ctc_loss_node(t, ctc_head_log_probs(s, mem), u.tokens, mc.special.ctc_blank);

    ForwardLosses out;
    const PromptMode pm = forward_prompt_mode(tc.stage, v, u);
    Var l_dec;
    if (pm == PromptMode::pair) {
        StackHooks hz = adapter_hooks("adapt.dual.zh"), he = adapter_hooks("adapt.dual.en");
        DualStates d = dual_decode_states(s, mc, u.tokens, mem, v.dec_adapters ? &hz : nullptr,
                                          v.dec_adapters ? &he : nullptr);
        FusedPrediction f = fuse_predictions(s, d, static_cast<int>(u.tokens.size()));
        Var l_att = fused_nll(s, mc, f, u.tokens);
        Var l_lid = lid_loss(s, d, static_cast<int>(u.tokens.size()), u.dominant_lang == "zh" ? kLangZh : kLangEn);
        l_dec = t.add(l_att, l_lid);
        out.att = t.value(l_att)(0, 0);
    } else {
        StackHooks hd = adapter_hooks("adapt.dec");
        const auto prompt = build_prompt(mc.special, pm);
        Var states = decode_states(s, mc, decoder_input(prompt, u.tokens), mem,
                                   v.dec_adapters ? &hd : nullptr);
        l_dec = attention_nll(s, mc, states, static_cast<int>(prompt.size()), u.tokens);
        out.att = t.value(l_dec)(0, 0);
    }
    out.dec = t.value(l_dec)(0, 0);
    if (v.ctc) {
        out.ctc = t.value(l_ctc)(0, 0);
        out.total_node = t.scalar_affine(tc.alpha, l_dec, 1.0 - tc.alpha, l_ctc);
    } else {
        out.total_node = l_dec;
    }
    out.total = t.value(out.total_node)(0, 0);
    return out;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ParamStore& params, const std::map<std::string, Mat>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (const auto& [name, g] : grads) {
            Mat& p = params.at(name);
            auto [mit, inserted] = state_.try_emplace(name, Moments{Mat::Zero(p.rows(), p.cols()),
                                                                    Mat::Zero(p.rows(), p.cols())});
            Mat& m = mit->second.m;
            Mat& v = mit->second.v;
            m = b1_ * m + (1.0 - b1_) * g;
            v = b2_ * v + (1.0 - b2_) * g.cwiseProduct(g);
            p.array() -= lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
        }
    }

    int64_t steps() const { return t_; }

private:
    struct Moments {
        Mat m, v;
    };
    double lr_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

// Scale gradients so their global norm does not exceed `clip`.
inline void clip_global_norm(std::map<std::string, Mat>& grads, double clip) {
    if (clip <= 0.0) return;
    double sq = 0.0;
    for (const auto& [_, g] : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > clip) {
        const double scale = clip / norm;
        for (auto& [_, g] : grads) g *= scale;
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochLog {
    double att = 0.0, ctc = 0.0, dec = 0.0, total = 0.0;  // train means per utterance
    double dev = 0.0;                                     // mean dev objective
};

struct TrainReport {
    std::vector<EpochLog> epochs;
    int best_epoch = -1;  // -1 when no training happened (no trainable params)
    double best_dev = std::numeric_limits<double>::quiet_NaN();
    nlohmann::ordered_json final_eval;  // per-split reports when requested
};

inline nlohmann::ordered_json report_to_json(const TrainReport& r) {
    nlohmann::ordered_json j;
    j["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : r.epochs) {
        nlohmann::ordered_json je;
        je["l_att"] = e.att;
        je["l_ctc"] = e.ctc;
        je["l_dec"] = e.dec;
        je["l_final"] = e.total;
        je["dev_loss"] = e.dev;
        j["epochs"].push_back(je);
    }
    j["best_epoch"] = r.best_epoch;
    if (std::isfinite(r.best_dev)) j["best_dev_loss"] = r.best_dev;
    if (!r.final_eval.is_null()) j["final_eval"] = r.final_eval;
    return j;
}

namespace detail {

inline std::vector<size_t> shuffled_indices(size_t n, uint64_t seed, int epoch) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng = Rng::substream(seed, 0x53485546ULL + static_cast<uint64_t>(epoch));
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

inline void ensure_finite(const ForwardLosses& fl, const std::string& id, int epoch, int step) {
    if (std::isfinite(fl.total)) return;
    throw InternalError("non-finite loss (epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                        ", utterance " + id + "): att=" + std::to_string(fl.att) +
                        " ctc=" + std::to_string(fl.ctc) + " dec=" + std::to_string(fl.dec));
}

inline double mean_dev_objective(Model& m, const TrainConfig& tc,
                                 const std::vector<const Utterance*>& dev) {
    double sum = 0.0;
    for (const Utterance* u : dev) {
        Session s(m.params);
        sum += utterance_forward(s, m, tc, *u).total;
    }
    return dev.empty() ? 0.0 : sum / static_cast<double>(dev.size());
}

}  // namespace detail

struct EvalResult {
    metrics::ErrorReport report;
    std::vector<std::pair<std::string, std::string>> hyps;  // (utterance id, hypothesis text)
    std::vector<double> mean_gate_zh;  // per utterance, two-path decoding only
};

// Greedy-decode and score one split. For two-path variants the fused
// distribution drives decoding; emitted non-language tokens are dropped from
// the surface (they score as errors via the alignment).
inline EvalResult evaluate_model(Model& m, const std::vector<const Utterance*>& split, PromptMode pm,
                                 int max_new = 18) {
    if (split.empty()) throw ValidationError("cannot evaluate an empty split");
    const ModelConfig& mc = m.model_cfg;
    const VariantConfig& v = m.variant;
    EvalResult out;
    for (const Utterance* u : split) {
        Session s(m.params);
        StackHooks enc_hooks = adapter_hooks("adapt.enc");
        Var enc = encode(s, mc, u->features, v.enc_adapters ? &enc_hooks : nullptr);
        Var mem = v.refiner ? refine(s, m.refiner_cfg, enc) : enc;
        std::vector<int> emitted;
        if (pm == PromptMode::pair) {
            StackHooks hz = adapter_hooks("adapt.dual.zh"), he = adapter_hooks("adapt.dual.en");
            DualDecodeResult r = dual_greedy_decode(s, mc, mem, v.dec_adapters ? &hz : nullptr,
                                                    v.dec_adapters ? &he : nullptr, max_new);
            emitted = r.tokens;
            double zh_sum = 0.0;
            for (auto [wz, we] : r.weights) zh_sum += wz;
            out.mean_gate_zh.push_back(r.weights.empty() ? 0.5 : zh_sum / static_cast<double>(r.weights.size()));
        } else {
            StackHooks hd = adapter_hooks("adapt.dec");
            emitted = greedy_decode(s, mc, mem, build_prompt(mc.special, pm),
                                    v.dec_adapters ? &hd : nullptr, max_new);
        }
        std::vector<int> symbols;
        for (int tkn : emitted)
            if (tkn >= kZhBase && tkn < kEnBase + kSymbolsPerLang) symbols.push_back(tkn);
        const std::string hyp = render_text(symbols);
        out.report.accumulate(metrics::score(u->text, hyp));
        out.hyps.emplace_back(u->id, hyp);
    }
    return out;
}

// Evaluation prompt rule for harness runs: two-path variants decode two-path;
// the concatenated prompt stays as configured; a single-language prompt means
// "the split's dominant language" (the zero-shot row).
inline PromptMode eval_prompt_for(const VariantConfig& v, const std::string& split) {
    if (v.prompt_mode == PromptMode::pair || v.prompt_mode == PromptMode::concat) return v.prompt_mode;
    return split == "dev_sge" ? PromptMode::single_en : PromptMode::single_zh;
}

inline std::pair<Checkpoint, TrainReport> train(const TrainConfig& tc, const ModelConfig& mc,
                                                const RefinerConfig& rc, const CorpusManifest& corpus,
                                                const Checkpoint* base_ckpt, bool with_final_eval = true) {
    tc.validate();
    mc.validate();

    Model m;
    m.model_cfg = mc;
    m.refiner_cfg = rc;
    m.variant = tc.variant;
    if (tc.stage == TrainStage::base) {
        Rng rng = Rng::substream(tc.seed, 0xBA5E);
        build_base_params(m.params, mc, rng);
    } else {
        if (!base_ckpt) throw ConfigError("stage adapt requires a base checkpoint");
        if (base_ckpt->stage != TrainStage::base)
            throw ConfigError("adaptation must start from a stage-base checkpoint");
        if (nlohmann::json(base_ckpt->model) != nlohmann::json(mc))
            throw ConfigError("base checkpoint was built for a different model configuration");
        for (const auto& name : base_ckpt->params.names())
            m.params.add(name, base_ckpt->params.at(name));
        Rng rng = Rng::substream(tc.seed, 0xADA7);
        add_variant_params(m.params, mc, rc, tc.variant, rng);
    }

    const FreezePolicy policy{tc.stage};
    const ParamPartition part = classify_parameters(policy, m.params);

    auto train_split = corpus.split("train");
    std::vector<const Utterance*> dev;
    for (const auto* u : corpus.split("dev_man")) dev.push_back(u);
    for (const auto* u : corpus.split("dev_sge")) dev.push_back(u);

    TrainReport report;
    if (!part.trainable.empty() && !train_split.empty() && tc.epochs > 0) {
        Adam opt(tc.lr);
        ParamStore best;
        double best_dev = std::numeric_limits<double>::infinity();
        int best_epoch = -1;
        int step = 0;
        for (int epoch = 0; epoch < tc.epochs; ++epoch) {
            EpochLog log;
            const auto order = detail::shuffled_indices(train_split.size(), tc.seed, epoch);
            size_t cursor = 0;
            while (cursor < order.size()) {
                const size_t batch_end = std::min(cursor + static_cast<size_t>(tc.batch_size), order.size());
                std::map<std::string, Mat> grads;
                const double inv_batch = 1.0 / static_cast<double>(batch_end - cursor);
                for (; cursor < batch_end; ++cursor) {
                    const Utterance& u = *train_split[order[cursor]];
                    Session s(m.params, policy, true);
                    ForwardLosses fl = utterance_forward(s, m, tc, u);
                    detail::ensure_finite(fl, u.id, epoch, step);
                    log.att += fl.att;
                    log.ctc += fl.ctc;
                    log.dec += fl.dec;
                    log.total += fl.total;
                    s.tape.backward(fl.total_node);
                    for (const auto& name : part.trainable) {
                        if (!s.used(name)) continue;
                        const Mat& g = s.param_grad(name);
                        auto it = grads.find(name);
                        if (it == grads.end())
                            grads.emplace(name, inv_batch * g);
                        else
                            it->second += inv_batch * g;
                    }
                }
                clip_global_norm(grads, tc.grad_clip);
                opt.step(m.params, grads);
                ++step;
            }
            const double n = static_cast<double>(train_split.size());
            log.att /= n;
            log.ctc /= n;
            log.dec /= n;
            log.total /= n;
            log.dev = detail::mean_dev_objective(m, tc, dev);
            report.epochs.push_back(log);
            if (log.dev < best_dev) {
                best_dev = log.dev;
                best_epoch = epoch;
                best = m.params;
            }
        }
        if (best_epoch >= 0) {
            m.params = best;
            report.best_epoch = best_epoch;
            report.best_dev = best_dev;
        }
    }

    if (with_final_eval) {
        nlohmann::ordered_json fe;
        for (const std::string split : {"dev_man", "dev_sge"}) {
            auto members = corpus.split(split);
            if (members.empty()) continue;
            EvalResult er = evaluate_model(m, members, eval_prompt_for(m.variant, split));
            fe[split] = metrics::report_json(er.report);
        }
        report.final_eval = fe;
    }

    Checkpoint ckpt{mc, rc, tc.variant, tc.stage, std::move(m.params)};
    return {std::move(ckpt), std::move(report)};
}

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

struct AblationRow {
    int id = 0;
    VariantConfig variant;
    metrics::ErrorReport dev_man, dev_sge;
    int best_epoch = -1;
};

inline nlohmann::ordered_json ablation_to_json(const std::vector<AblationRow>& rows) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        nlohmann::ordered_json row;
        row["id"] = r.id;
        row["variant"] = nlohmann::json(r.variant);
        row["dev_man"] = metrics::report_json(r.dev_man);
        row["dev_sge"] = metrics::report_json(r.dev_sge);
        row["best_epoch"] = r.best_epoch;
        j.push_back(row);
    }
    return j;
}

// Adapt-train and score every variant row under one seed and budget.
inline std::vector<AblationRow> ablate(const CorpusManifest& corpus, const Checkpoint& base,
                                       const TrainConfig& proto) {
    std::vector<AblationRow> rows;
    for (int id = 0; id <= 8; ++id) {
        TrainConfig tc = proto;
        tc.stage = TrainStage::adapt;
        tc.variant = variant_for_id(id);
        auto [ckpt, rep] = train(tc, base.model, base.refiner, corpus, &base, false);
        Model m = model_from_checkpoint(ckpt);
        AblationRow row;
        row.id = id;
        row.variant = tc.variant;
        row.best_epoch = rep.best_epoch;
        row.dev_man = evaluate_model(m, corpus.split("dev_man"), eval_prompt_for(tc.variant, "dev_man")).report;
        row.dev_sge = evaluate_model(m, corpus.split("dev_sge"), eval_prompt_for(tc.variant, "dev_sge")).report;
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace csadapt
