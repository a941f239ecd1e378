#pragma once

// Mixed-unit scoring for two-language transcripts: CJK-range characters count
// one unit each, everything else groups into whitespace-delimited words. A
// single Levenshtein alignment over the mixed units yields the overall rate
// and per-language attributions: substitutions and deletions belong to the
// reference unit's language, insertions to the inserted (hypothesis) unit's
// language. Word comparison is case-insensitive for ASCII letters.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csadapt/errors.hpp"

namespace csadapt {
namespace metrics {

// ---------------------------------------------------------------------------
// tokenization
// ---------------------------------------------------------------------------

struct MixedUnit {
    std::string surface;
    std::string lang;  // "zh" or "en"
};

inline bool is_cjk(uint32_t cp) {
    return (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF);
}

inline bool is_space_cp(uint32_t cp) {
    return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v' || cp == 0xA0 ||
           cp == 0x3000;
}

namespace detail {

// Lenient UTF-8 scan: an invalid lead byte is consumed as a single unit so
// tokenization never fails on arbitrary input.
inline uint32_t next_codepoint(const std::string& s, size_t& i) {
    const unsigned char b0 = static_cast<unsigned char>(s[i]);
    int extra = 0;
    uint32_t cp = b0;
    if (b0 >= 0xF0)
        extra = 3, cp = b0 & 0x07;
    else if (b0 >= 0xE0)
        extra = 2, cp = b0 & 0x0F;
    else if (b0 >= 0xC0)
        extra = 1, cp = b0 & 0x1F;
    if (i + static_cast<size_t>(extra) >= s.size()) extra = 0, cp = b0;
    for (int k = 0; k < extra; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + 1 + k]) & 0x3F);
    i += 1 + static_cast<size_t>(extra);
    return cp;
}

inline std::string fold_ascii(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace detail

inline std::vector<MixedUnit> tokenize_mixed(const std::string& text) {
    std::vector<MixedUnit> units;
    std::string run;
    auto flush = [&]() {
        if (!run.empty()) {
            units.push_back({run, "en"});
            run.clear();
        }
    };
    size_t i = 0;
    while (i < text.size()) {
        const size_t start = i;
        const uint32_t cp = detail::next_codepoint(text, i);
        if (is_space_cp(cp)) {
            flush();
        } else if (is_cjk(cp)) {
            flush();
            units.push_back({text.substr(start, i - start), "zh"});
        } else {
            run += text.substr(start, i - start);
        }
    }
    flush();
    return units;
}

inline bool units_equal(const MixedUnit& a, const MixedUnit& b) {
    if (a.lang != b.lang) return false;
    if (a.lang == "en") return detail::fold_ascii(a.surface) == detail::fold_ascii(b.surface);
    return a.surface == b.surface;
}

// ---------------------------------------------------------------------------
// alignment
// ---------------------------------------------------------------------------

enum class EditOp { match, sub, del, ins };

// Minimal-cost alignment, unit costs 1 for sub/del/ins. On ties the backtrace
// prefers match, then sub, then del, then ins.
inline std::vector<EditOp> align(const std::vector<MixedUnit>& ref, const std::vector<MixedUnit>& hyp) {
    const int R = static_cast<int>(ref.size()), H = static_cast<int>(hyp.size());
    std::vector<std::vector<int>> cost(static_cast<size_t>(R + 1), std::vector<int>(static_cast<size_t>(H + 1)));
    std::vector<std::vector<EditOp>> from(static_cast<size_t>(R + 1),
                                          std::vector<EditOp>(static_cast<size_t>(H + 1), EditOp::match));
    for (int j = 0; j <= H; ++j) cost[0][static_cast<size_t>(j)] = j, from[0][static_cast<size_t>(j)] = EditOp::ins;
    for (int i = 0; i <= R; ++i) cost[static_cast<size_t>(i)][0] = i, from[static_cast<size_t>(i)][0] = EditOp::del;
    for (int i = 1; i <= R; ++i) {
        for (int j = 1; j <= H; ++j) {
            const bool eq = units_equal(ref[static_cast<size_t>(i - 1)], hyp[static_cast<size_t>(j - 1)]);
            const int diag = cost[static_cast<size_t>(i - 1)][static_cast<size_t>(j - 1)] + (eq ? 0 : 1);
            const int up = cost[static_cast<size_t>(i - 1)][static_cast<size_t>(j)] + 1;
            const int left = cost[static_cast<size_t>(i)][static_cast<size_t>(j - 1)] + 1;
            int best = diag;
            EditOp op = eq ? EditOp::match : EditOp::sub;
            if (up < best) best = up, op = EditOp::del;
            if (left < best) best = left, op = EditOp::ins;
            cost[static_cast<size_t>(i)][static_cast<size_t>(j)] = best;
            from[static_cast<size_t>(i)][static_cast<size_t>(j)] = op;
        }
    }
    std::vector<EditOp> ops;
    int i = R, j = H;
    while (i > 0 || j > 0) {
        const EditOp op = from[static_cast<size_t>(i)][static_cast<size_t>(j)];
        ops.push_back(op);
        if (op == EditOp::match || op == EditOp::sub)
            --i, --j;
        else if (op == EditOp::del)
            --i;
        else
            --j;
    }
    std::reverse(ops.begin(), ops.end());
    return ops;
}

// Exhaustive-recursion reference for small sequences.
inline int brute_force_distance(const std::vector<MixedUnit>& ref, const std::vector<MixedUnit>& hyp) {
    if (ref.size() > 6 || hyp.size() > 6) throw InputError("brute force capped at 6 units");
    std::function<int(size_t, size_t)> go = [&](size_t i, size_t j) -> int {
        if (i == ref.size()) return static_cast<int>(hyp.size() - j);
        if (j == hyp.size()) return static_cast<int>(ref.size() - i);
        int best = go(i + 1, j + 1) + (units_equal(ref[i], hyp[j]) ? 0 : 1);
        best = std::min(best, go(i + 1, j) + 1);
        best = std::min(best, go(i, j + 1) + 1);
        return best;
    };
    return go(0, 0);
}

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

struct ScopeCounts {
    int64_t s = 0, d = 0, i = 0, n = 0;

    int64_t errors() const { return s + d + i; }
    // Undefined (no value) when errors exist against an empty reference scope.
    std::optional<double> rate() const {
        if (n == 0) return errors() == 0 ? std::optional<double>(0.0) : std::nullopt;
        return static_cast<double>(errors()) / static_cast<double>(n);
    }
};

struct ErrorReport {
    ScopeCounts overall, zh, en;

    void accumulate(const ErrorReport& other) {
        for (auto [mine, theirs] : {std::pair<ScopeCounts*, const ScopeCounts*>{&overall, &other.overall},
                                    {&zh, &other.zh},
                                    {&en, &other.en}}) {
            mine->s += theirs->s;
            mine->d += theirs->d;
            mine->i += theirs->i;
            mine->n += theirs->n;
        }
    }
};

inline ErrorReport score_units(const std::vector<MixedUnit>& ref, const std::vector<MixedUnit>& hyp) {
    ErrorReport rep;
    rep.overall.n = static_cast<int64_t>(ref.size());
    for (const auto& u : ref) (u.lang == "zh" ? rep.zh : rep.en).n += 1;
    size_t ri = 0, hi = 0;
    for (const EditOp op : align(ref, hyp)) {
        switch (op) {
            case EditOp::match:
                ++ri, ++hi;
                break;
            case EditOp::sub:
                rep.overall.s += 1;
                (ref[ri].lang == "zh" ? rep.zh : rep.en).s += 1;
                ++ri, ++hi;
                break;
            case EditOp::del:
                rep.overall.d += 1;
                (ref[ri].lang == "zh" ? rep.zh : rep.en).d += 1;
                ++ri;
                break;
            case EditOp::ins:
                rep.overall.i += 1;
                (hyp[hi].lang == "zh" ? rep.zh : rep.en).i += 1;
                ++hi;
                break;
        }
    }
    return rep;
}

inline ErrorReport score(const std::string& ref_text, const std::string& hyp_text) {
    return score_units(tokenize_mixed(ref_text), tokenize_mixed(hyp_text));
}

// ---------------------------------------------------------------------------
// report serialization
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json scope_json(const ScopeCounts& c) {
    nlohmann::ordered_json j;
    auto r = c.rate();
    if (r)
        j["mer"] = *r;
    else
        j["mer"] = nullptr;
    j["s"] = c.s;
    j["d"] = c.d;
    j["i"] = c.i;
    j["n"] = c.n;
    return j;
}

inline nlohmann::ordered_json report_json(const ErrorReport& rep) {
    nlohmann::ordered_json j;
    j["overall"] = scope_json(rep.overall);
    j["zh"] = scope_json(rep.zh);
    j["en"] = scope_json(rep.en);
    return j;
}

// One-line human-readable view, rates in percent.
inline std::string format_report(const ErrorReport& rep) {
    auto pct = [](const ScopeCounts& c) {
        auto r = c.rate();
        if (!r) return std::string("undef");
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.1f", *r * 100.0);
        return std::string(buf);
    };
    return "Overall " + pct(rep.overall) + " | ZH " + pct(rep.zh) + " | EN " + pct(rep.en);
}

}  // namespace metrics
}  // namespace csadapt
