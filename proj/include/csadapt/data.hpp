#pragma once

// Synthetic two-language code-switching corpus: each utterance is a token
// sequence whose language flips after any token with a fixed probability;
// frames are per-symbol acoustic prototypes plus Gaussian noise. Everything
// is a pure function of the seed, down to the serialized bytes. Features are
// quantized to float32 at generation time so a manifest round-trip is exact.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csadapt/ctc.hpp"
#include "csadapt/errors.hpp"
#include "csadapt/rng.hpp"
#include "csadapt/tape.hpp"

namespace csadapt {

// ---------------------------------------------------------------------------
// token surfaces
// ---------------------------------------------------------------------------

inline constexpr int kSymbolsPerLang = 16;
inline constexpr int kZhBase = 0;
inline constexpr int kEnBase = 16;

inline const std::vector<std::string>& en_syllables() {
    static const std::vector<std::string> syl = {"ba", "be", "bi", "bo", "bu", "da", "de", "di",
                                                 "do", "du", "ga", "ge", "gi", "go", "gu", "ka"};
    return syl;
}

inline std::string utf8_codepoint(uint32_t cp) {
    std::string s;
    if (cp < 0x80) {
        s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        s.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return s;
}

inline std::string token_lang(int token) {
    if (token >= kZhBase && token < kZhBase + kSymbolsPerLang) return "zh";
    if (token >= kEnBase && token < kEnBase + kSymbolsPerLang) return "en";
    throw InputError("token " + std::to_string(token) + " is not a language symbol");
}

inline std::string token_surface(int token) {
    if (token_lang(token) == "zh") return utf8_codepoint(0x4E00 + static_cast<uint32_t>(token - kZhBase));
    return en_syllables()[static_cast<size_t>(token - kEnBase)];
}

inline std::string render_text(const std::vector<int>& tokens) {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += token_surface(tokens[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

struct ToyLanguageSpec {
    std::string lang;          // "zh" or "en"
    std::vector<int> symbols;  // token ids owned by this language
    Mat prototypes;            // [n_symbols, n_feat]
    int min_frames = 3;        // frames emitted per symbol: uniform in range
    int max_frames = 5;

    void validate() const {
        if (symbols.empty()) throw ConfigError("language spec has zero symbols");
        if (prototypes.rows() != static_cast<int>(symbols.size()))
            throw ConfigError("one prototype row per symbol required");
        if (min_frames < 1 || max_frames < min_frames) throw ConfigError("bad frames_per_symbol range");
    }
};

// Prototypes for the two languages sit in mean-shifted clouds on either side
// of a fixed direction, so clean frames are linearly separable by language.
inline std::pair<ToyLanguageSpec, ToyLanguageSpec> default_language_specs(int n_feat, uint64_t seed,
                                                                          double lang_shift = 2.0) {
    Rng rng = Rng::substream(seed, 0x70726f746f);  // dedicated prototype stream
    auto make = [&](const std::string& lang, int base, double shift) {
        ToyLanguageSpec spec;
        spec.lang = lang;
        spec.prototypes = Mat(kSymbolsPerLang, n_feat);
        for (int i = 0; i < kSymbolsPerLang; ++i) {
            spec.symbols.push_back(base + i);
            for (int j = 0; j < n_feat; ++j) spec.prototypes(i, j) = rng.normal() + shift;
        }
        return spec;
    };
    auto zh = make("zh", kZhBase, -lang_shift / std::sqrt(static_cast<double>(n_feat)));
    auto en = make("en", kEnBase, +lang_shift / std::sqrt(static_cast<double>(n_feat)));
    return {zh, en};
}

struct Utterance {
    std::string id;
    std::string split;          // train | dev_man | dev_sge
    std::string dominant_lang;  // zh | en
    std::vector<int> tokens;
    std::vector<std::string> lang_tags;  // per-token language
    std::string text;
    Mat features;  // [n_frames, n_feat], float32-valued
};

struct CorpusManifest {
    std::vector<Utterance> utterances;

    std::vector<const Utterance*> split(const std::string& name) const {
        std::vector<const Utterance*> out;
        for (const auto& u : utterances)
            if (u.split == name) out.push_back(&u);
        return out;
    }
};

inline void validate_utterance(const Utterance& u) {
    static const std::set<std::string> kSplits = {"train", "dev_man", "dev_sge"};
    if (!kSplits.count(u.split)) throw ValidationError("utterance " + u.id + ": unknown split " + u.split);
    if (u.dominant_lang != "zh" && u.dominant_lang != "en")
        throw ValidationError("utterance " + u.id + ": unknown dominant_lang " + u.dominant_lang);
    if (u.tokens.size() != u.lang_tags.size())
        throw ValidationError("utterance " + u.id + ": tokens and lang_tags differ in length");
    if (u.tokens.empty()) throw ValidationError("utterance " + u.id + ": empty token sequence");
    for (size_t i = 0; i < u.tokens.size(); ++i)
        if (token_lang(u.tokens[i]) != u.lang_tags[i])
            throw ValidationError("utterance " + u.id + ": token " + std::to_string(u.tokens[i]) +
                                  " does not belong to language " + u.lang_tags[i]);
    if (static_cast<int>(u.features.rows()) < ctc::min_frames(u.tokens))
        throw ValidationError("utterance " + u.id + ": too few frames for its token sequence");
    if (u.split == "dev_man" && u.dominant_lang != "zh")
        throw ValidationError("utterance " + u.id + ": dev_man must be zh-dominant");
    if (u.split == "dev_sge" && u.dominant_lang != "en")
        throw ValidationError("utterance " + u.id + ": dev_sge must be en-dominant");
}

inline void validate_manifest(const CorpusManifest& m) {
    std::set<std::string> ids;
    for (const auto& u : m.utterances) {
        validate_utterance(u);
        if (!ids.insert(u.id).second) throw ValidationError("duplicate utterance id " + u.id);
    }
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

namespace detail {

inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

// Fixed per-split stream offsets keep utterance RNGs stable regardless of how
// many utterances the other splits request.
inline uint64_t split_stream(const std::string& split, int index) {
    if (split == "train") return 0x100000ULL + static_cast<uint64_t>(index);
    if (split == "dev_man") return 0x200000ULL + static_cast<uint64_t>(index);
    return 0x300000ULL + static_cast<uint64_t>(index);
}

inline Utterance generate_utterance(uint64_t seed, const std::string& split, int index,
                                    const std::string& dominant, double switch_prob, double noise_std,
                                    const ToyLanguageSpec& zh, const ToyLanguageSpec& en, int min_tokens,
                                    int max_tokens) {
    Rng rng = Rng::substream(seed, split_stream(split, index));
    Utterance u;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", index);
    u.id = split + "-" + buf;
    u.split = split;
    u.dominant_lang = dominant;

    const int len = rng.uniform_int(min_tokens, max_tokens);
    std::string lang = rng.uniform() < 0.8 ? dominant : (dominant == "zh" ? "en" : "zh");
    std::vector<int> frames_per_token(static_cast<size_t>(len));
    for (int j = 0; j < len; ++j) {
        const ToyLanguageSpec& spec = (lang == "zh") ? zh : en;
        int pick = rng.uniform_int(0, static_cast<int>(spec.symbols.size()) - 1);
        u.tokens.push_back(spec.symbols[static_cast<size_t>(pick)]);
        u.lang_tags.push_back(lang);
        frames_per_token[static_cast<size_t>(j)] = rng.uniform_int(spec.min_frames, spec.max_frames);
        if (rng.uniform() < switch_prob) lang = (lang == "zh") ? "en" : "zh";
    }
    u.text = render_text(u.tokens);

    int n_frames = 0;
    for (int f : frames_per_token) n_frames += f;
    const int n_feat = static_cast<int>(zh.prototypes.cols());
    u.features = Mat(n_frames, n_feat);
    int row = 0;
    for (int j = 0; j < len; ++j) {
        const ToyLanguageSpec& spec = (u.lang_tags[static_cast<size_t>(j)] == "zh") ? zh : en;
        int local = u.tokens[static_cast<size_t>(j)] - spec.symbols.front();
        for (int f = 0; f < frames_per_token[static_cast<size_t>(j)]; ++f, ++row)
            for (int d = 0; d < n_feat; ++d)
                u.features(row, d) = to_f32(spec.prototypes(local, d) + noise_std * rng.normal());
    }
    return u;
}

}  // namespace detail

// Train utterances draw their dominant language 50/50; each dev split is
// homogeneous in its dominant language by construction.
inline CorpusManifest generate_corpus(uint64_t seed, int n_train, int n_dev_each, double switch_prob,
                                      double noise_std,
                                      const std::pair<ToyLanguageSpec, ToyLanguageSpec>& specs,
                                      int min_tokens = 4, int max_tokens = 9) {
    if (n_train < 0 || n_dev_each < 0) throw ConfigError("negative corpus sizes");
    if (switch_prob < 0.0 || switch_prob > 1.0) throw ConfigError("switch_prob must be in [0,1]");
    if (noise_std < 0.0) throw ConfigError("noise_std must be nonnegative");
    if (min_tokens < 1 || max_tokens < min_tokens) throw ConfigError("bad token length range");
    specs.first.validate();
    specs.second.validate();
    if (specs.first.lang != "zh" || specs.second.lang != "en")
        throw ConfigError("specs must be ordered (zh, en)");
    for (int a : specs.first.symbols)
        for (int b : specs.second.symbols)
            if (a == b) throw ConfigError("language symbol sets overlap");

    CorpusManifest m;
    Rng dom_rng = Rng::substream(seed, 0x646f6d);  // dominant-language stream
    for (int i = 0; i < n_train; ++i) {
        std::string dominant = dom_rng.uniform() < 0.5 ? "zh" : "en";
        m.utterances.push_back(detail::generate_utterance(seed, "train", i, dominant, switch_prob, noise_std,
                                                          specs.first, specs.second, min_tokens, max_tokens));
    }
    for (int i = 0; i < n_dev_each; ++i)
        m.utterances.push_back(detail::generate_utterance(seed, "dev_man", i, "zh", switch_prob, noise_std,
                                                          specs.first, specs.second, min_tokens, max_tokens));
    for (int i = 0; i < n_dev_each; ++i)
        m.utterances.push_back(detail::generate_utterance(seed, "dev_sge", i, "en", switch_prob, noise_std,
                                                          specs.first, specs.second, min_tokens, max_tokens));
    validate_manifest(m);
    return m;
}

// ---------------------------------------------------------------------------
// manifest serialization (JSON lines; features as base64 of f32 LE)
// ---------------------------------------------------------------------------

namespace detail {

inline const char* b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string b64_encode(const std::vector<unsigned char>& bytes) {
    const char* tab = b64_alphabet();
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back(tab[v & 63]);
    }
    const size_t rem = bytes.size() - i;
    if (rem == 1) {
        uint32_t v = bytes[i] << 16;
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out += "==";
    } else if (rem == 2) {
        uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<unsigned char> b64_decode(const std::string& s) {
    std::vector<int> rev(256, -1);
    const char* tab = b64_alphabet();
    for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(tab[i])] = i;
    if (s.size() % 4 != 0) throw ValidationError("base64 payload length not a multiple of 4");
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (size_t i = 0; i < s.size(); i += 4) {
        uint32_t v = 0;
        int pad = 0;
        for (int j = 0; j < 4; ++j) {
            char c = s[i + j];
            if (c == '=') {
                ++pad;
                v <<= 6;
            } else {
                if (rev[static_cast<unsigned char>(c)] < 0 || pad > 0)
                    throw ValidationError("invalid base64 character");
                v = (v << 6) | static_cast<uint32_t>(rev[static_cast<unsigned char>(c)]);
            }
        }
        out.push_back(static_cast<unsigned char>((v >> 16) & 0xFF));
        if (pad < 2) out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
        if (pad < 1) out.push_back(static_cast<unsigned char>(v & 0xFF));
    }
    return out;
}

inline std::string encode_features(const Mat& features) {
    std::vector<unsigned char> bytes;
    bytes.reserve(static_cast<size_t>(features.size()) * 4);
    for (int r = 0; r < features.rows(); ++r)
        for (int c = 0; c < features.cols(); ++c) {
            float f = static_cast<float>(features(r, c));
            unsigned char b[4];
            std::memcpy(b, &f, 4);
            bytes.insert(bytes.end(), b, b + 4);  // little-endian host assumed
        }
    return b64_encode(bytes);
}

inline Mat decode_features(const std::string& b64, int n_frames, int n_feat, const std::string& id) {
    auto bytes = b64_decode(b64);
    if (bytes.size() != static_cast<size_t>(n_frames) * static_cast<size_t>(n_feat) * 4)
        throw ValidationError("utterance " + id + ": features payload has wrong byte count");
    Mat m(n_frames, n_feat);
    size_t off = 0;
    for (int r = 0; r < n_frames; ++r)
        for (int c = 0; c < n_feat; ++c, off += 4) {
            float f;
            std::memcpy(&f, bytes.data() + off, 4);
            m(r, c) = static_cast<double>(f);
        }
    return m;
}

}  // namespace detail

inline std::string utterance_to_json_line(const Utterance& u) {
    nlohmann::ordered_json j;
    j["id"] = u.id;
    j["split"] = u.split;
    j["dominant_lang"] = u.dominant_lang;
    j["tokens"] = u.tokens;
    j["lang_tags"] = u.lang_tags;
    j["text"] = u.text;
    j["n_frames"] = static_cast<int>(u.features.rows());
    j["n_feat"] = static_cast<int>(u.features.cols());
    j["features"] = detail::encode_features(u.features);
    return j.dump();
}

inline void save_manifest(const std::string& path, const CorpusManifest& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open " + path + " for writing");
    for (const auto& u : m.utterances) out << utterance_to_json_line(u) << "\n";
    if (!out) throw InputError("write failed for " + path);
}

inline CorpusManifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open manifest " + path);
    static const std::set<std::string> kKeys = {"id",        "split", "dominant_lang",
                                               "tokens",    "lang_tags", "text",
                                               "n_frames",  "n_feat",    "features"};
    CorpusManifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw InputError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        for (const auto& [key, _] : j.items())
            if (!kKeys.count(key))
                throw ValidationError("manifest line " + std::to_string(lineno) + ": unknown key " + key);
        for (const auto& key : kKeys)
            if (!j.contains(key))
                throw ValidationError("manifest line " + std::to_string(lineno) + ": missing key " + key);
        Utterance u;
        try {
            u.id = j.at("id").get<std::string>();
            u.split = j.at("split").get<std::string>();
            u.dominant_lang = j.at("dominant_lang").get<std::string>();
            u.tokens = j.at("tokens").get<std::vector<int>>();
            u.lang_tags = j.at("lang_tags").get<std::vector<std::string>>();
            u.text = j.at("text").get<std::string>();
            int n_frames = j.at("n_frames").get<int>();
            int n_feat = j.at("n_feat").get<int>();
            if (n_frames < 1 || n_feat < 1)
                throw ValidationError("utterance " + u.id + ": bad frame dimensions");
            u.features = detail::decode_features(j.at("features").get<std::string>(), n_frames, n_feat, u.id);
        } catch (const nlohmann::json::exception& e) {
            throw InputError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        m.utterances.push_back(std::move(u));
    }
    validate_manifest(m);
    return m;
}

}  // namespace csadapt
