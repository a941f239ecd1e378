#pragma once

#include <string>

#include <json.hpp>

#include "csadapt/errors.hpp"

namespace csadapt {

struct SpecialTokens {
    int sot = 32;
    int eot = 33;
    int lang_zh = 34;
    int lang_en = 35;
    int task = 36;
    int pad = 37;
    int ctc_blank = 40;  // == vocab_size, the appended CTC class
};

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_enc_layers = 2;
    int n_dec_layers = 2;
    int d_ff = 128;
    int n_feat = 16;
    int vocab_size = 40;
    int max_src_frames = 512;
    int max_tgt_tokens = 64;
    SpecialTokens special;

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || n_enc_layers <= 0 || n_dec_layers <= 0 ||
            d_ff <= 0 || n_feat <= 0 || vocab_size <= 0 || max_src_frames <= 0 || max_tgt_tokens <= 0)
            throw ConfigError("model dimensions must be positive");
        if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
        const int ids[6] = {special.sot, special.eot, special.lang_zh, special.lang_en, special.task, special.pad};
        for (int k = 0; k < 6; ++k) {
            if (ids[k] < 0 || ids[k] >= vocab_size)
                throw ConfigError("special token id out of vocab range");
            for (int j = k + 1; j < 6; ++j)
                if (ids[k] == ids[j]) throw ConfigError("special token ids must be distinct");
        }
        if (special.ctc_blank != vocab_size)
            throw ConfigError("ctc_blank must equal vocab_size (appended class)");
    }
};

struct RefinerConfig {
    int n_layers = 2;
    int hidden = 64;
    bool bidirectional = false;

    void validate() const {
        if (n_layers <= 0 || hidden <= 0) throw ConfigError("refiner dimensions must be positive");
    }
};

enum class PromptMode { single_zh, single_en, concat, pair };

inline std::string to_string(PromptMode m) {
    switch (m) {
        case PromptMode::single_zh: return "single-zh";
        case PromptMode::single_en: return "single-en";
        case PromptMode::concat: return "concat";
        case PromptMode::pair: return "pair";
    }
    throw InternalError("unreachable prompt mode");
}

inline PromptMode prompt_mode_from_string(const std::string& s) {
    if (s == "single-zh") return PromptMode::single_zh;
    if (s == "single-en") return PromptMode::single_en;
    if (s == "concat") return PromptMode::concat;
    if (s == "pair") return PromptMode::pair;
    throw ValidationError("unknown prompt mode: " + s);
}

// Which adaptation pieces exist and train. Rows of the standard ablation
// table map onto these flags via variant_for_id().
struct VariantConfig {
    bool enc_adapters = false;
    bool dec_adapters = false;
    bool refiner = false;
    bool ctc = false;  // CTC supervision head; attaches to the refined states
                       // when the refiner is on, else to the encoder output
    PromptMode prompt_mode = PromptMode::concat;
    int adapter_rank = 8;

    void validate() const {
        if (adapter_rank < 1) throw ConfigError("adapter_rank must be >= 1");
    }
};

// Table rows: 0 zero-shot; 1 enc; 2 dec; 3 enc+dec; 4 enc+dec+ctc;
// 5 enc+dec+refiner; 6 enc+dec+refiner+ctc; 7 enc+dec dual-prompt;
// 8 full method.
inline VariantConfig variant_for_id(int id) {
    VariantConfig v;
    switch (id) {
        case 0: v.prompt_mode = PromptMode::single_zh; break;  // language chosen per split at eval
        case 1: v.enc_adapters = true; break;
        case 2: v.dec_adapters = true; break;
        case 3: v.enc_adapters = v.dec_adapters = true; break;
        case 4: v.enc_adapters = v.dec_adapters = v.ctc = true; break;
        case 5: v.enc_adapters = v.dec_adapters = v.refiner = true; break;
        case 6: v.enc_adapters = v.dec_adapters = v.refiner = v.ctc = true; break;
        case 7:
            v.enc_adapters = v.dec_adapters = true;
            v.prompt_mode = PromptMode::pair;
            break;
        case 8:
            v.enc_adapters = v.dec_adapters = v.refiner = v.ctc = true;
            v.prompt_mode = PromptMode::pair;
            break;
        default: throw ConfigError("variant id must be in 0..8");
    }
    return v;
}

enum class TrainStage { base, adapt };

inline std::string to_string(TrainStage s) { return s == TrainStage::base ? "base" : "adapt"; }

inline TrainStage train_stage_from_string(const std::string& s) {
    if (s == "base") return TrainStage::base;
    if (s == "adapt") return TrainStage::adapt;
    throw ConfigError("unknown training stage: " + s);
}

struct TrainConfig {
    TrainStage stage = TrainStage::adapt;
    double lr = 1e-4;
    int epochs = 8;
    int batch_size = 4;
    double alpha = 0.7;       // attention/CTC mix for the encoder-side loss
    double lambda_ = 1.0;     // decoder/CTC mix when routing CTC that way
    uint64_t seed = 0;
    double grad_clip = 1.0;   // global-norm clip; <=0 disables
    VariantConfig variant;

    void validate() const {
        if (lr <= 0) throw ConfigError("lr must be positive");
        if (epochs <= 0) throw ConfigError("epochs must be positive");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0,1]");
        if (lambda_ < 0.0 || lambda_ > 1.0) throw ConfigError("lambda must be in [0,1]");
        variant.validate();
    }
};

// --- JSON ---

inline void to_json(nlohmann::json& j, const SpecialTokens& s) {
    j = {{"sot", s.sot},         {"eot", s.eot},   {"lang_zh", s.lang_zh}, {"lang_en", s.lang_en},
         {"task", s.task},       {"pad", s.pad},   {"ctc_blank", s.ctc_blank}};
}
inline void from_json(const nlohmann::json& j, SpecialTokens& s) {
    j.at("sot").get_to(s.sot);
    j.at("eot").get_to(s.eot);
    j.at("lang_zh").get_to(s.lang_zh);
    j.at("lang_en").get_to(s.lang_en);
    j.at("task").get_to(s.task);
    j.at("pad").get_to(s.pad);
    j.at("ctc_blank").get_to(s.ctc_blank);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"d_model", c.d_model},         {"n_heads", c.n_heads},
         {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers},
         {"d_ff", c.d_ff},               {"n_feat", c.n_feat},
         {"vocab_size", c.vocab_size},   {"max_src_frames", c.max_src_frames},
         {"max_tgt_tokens", c.max_tgt_tokens}, {"special", c.special}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("n_enc_layers").get_to(c.n_enc_layers);
    j.at("n_dec_layers").get_to(c.n_dec_layers);
    j.at("d_ff").get_to(c.d_ff);
    j.at("n_feat").get_to(c.n_feat);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_src_frames").get_to(c.max_src_frames);
    j.at("max_tgt_tokens").get_to(c.max_tgt_tokens);
    j.at("special").get_to(c.special);
}

inline void to_json(nlohmann::json& j, const RefinerConfig& c) {
    j = {{"n_layers", c.n_layers}, {"hidden", c.hidden}, {"bidirectional", c.bidirectional}};
}
inline void from_json(const nlohmann::json& j, RefinerConfig& c) {
    j.at("n_layers").get_to(c.n_layers);
    j.at("hidden").get_to(c.hidden);
    j.at("bidirectional").get_to(c.bidirectional);
}

inline void to_json(nlohmann::json& j, const VariantConfig& v) {
    j = {{"enc_adapters", v.enc_adapters}, {"dec_adapters", v.dec_adapters},
         {"refiner", v.refiner},           {"ctc", v.ctc},
         {"prompt_mode", to_string(v.prompt_mode)}, {"adapter_rank", v.adapter_rank}};
}
inline void from_json(const nlohmann::json& j, VariantConfig& v) {
    j.at("enc_adapters").get_to(v.enc_adapters);
    j.at("dec_adapters").get_to(v.dec_adapters);
    j.at("refiner").get_to(v.refiner);
    j.at("ctc").get_to(v.ctc);
    v.prompt_mode = prompt_mode_from_string(j.at("prompt_mode").get<std::string>());
    j.at("adapter_rank").get_to(v.adapter_rank);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"stage", to_string(c.stage)}, {"lr", c.lr},
         {"epochs", c.epochs},          {"batch_size", c.batch_size},
         {"alpha", c.alpha},            {"lambda", c.lambda_},
         {"seed", c.seed},              {"grad_clip", c.grad_clip},
         {"variant", c.variant}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.stage = train_stage_from_string(j.at("stage").get<std::string>());
    j.at("lr").get_to(c.lr);
    j.at("epochs").get_to(c.epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("alpha").get_to(c.alpha);
    j.at("lambda").get_to(c.lambda_);
    j.at("seed").get_to(c.seed);
    j.at("grad_clip").get_to(c.grad_clip);
    j.at("variant").get_to(c.variant);
}

}  // namespace csadapt
