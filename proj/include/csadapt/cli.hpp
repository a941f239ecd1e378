#pragma once

// Command-line front end. Subcommands cover the whole workflow: synthesize a
// corpus (gen-data), pretrain the backbone (train-base), graft and train the
// adaptation modules (adapt), score a checkpoint on a split (eval), dump
// transcripts (decode), score transcript files against references (score),
// and run the full variant sweep (ablate). Declared outputs are never
// overwritten without --force. Exit codes: 0 success, 1 bad configuration or
// input, 2 internal failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csadapt/train.hpp"

namespace csadapt::cli {

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

inline void guard_output(const std::string& path, bool force) {
    if (path.empty()) return;
    if (!force && std::filesystem::exists(path))
        throw InputError("output already exists: " + path + " (pass --force to overwrite)");
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot open for writing: " + path);
    os << content;
    if (!os) throw InputError("failed writing: " + path);
}

inline nlohmann::json read_config_file(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    std::ifstream is(path);
    if (!is) throw InputError("cannot open config file: " + path);
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("config file " + path + " is not valid JSON: " + e.what());
    }
}

// Section-merged config: defaults, overlaid by the named object of the config
// file when present. Flag overrides are applied by the caller afterwards.
template <class T>
T config_section(const nlohmann::json& file, const char* section, const T& defaults) {
    nlohmann::json j = nlohmann::json(defaults);
    if (file.contains(section)) {
        if (!file.at(section).is_object()) throw InputError(std::string("config section '") + section + "' must be an object");
        j.update(file.at(section));
    }
    try {
        return j.template get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("bad values in config section '") + section + "': " + e.what());
    }
}

inline std::string pct_cell(const std::optional<double>& rate) {
    if (!rate) return "   --";
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%5.1f", 100.0 * *rate);
    return buf;
}

inline CorpusManifest load_corpus(const std::string& path) { return load_manifest(path); }

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string out_path;
    uint64_t seed = 1;
    int n_train = 2000;
    int n_dev = 200;
    double switch_prob = 0.3;
    double noise_std = 0.5;
    double lang_shift = 2.0;
    int n_feat = 16;
    int min_tokens = 4;
    int max_tokens = 9;
    bool force = false;
};

inline void run_gen_data(const GenDataArgs& a, std::ostream& out) {
    guard_output(a.out_path, a.force);
    auto specs = default_language_specs(a.n_feat, a.seed, a.lang_shift);
    CorpusManifest corpus =
        generate_corpus(a.seed, a.n_train, a.n_dev, a.switch_prob, a.noise_std, specs, a.min_tokens, a.max_tokens);
    save_manifest(a.out_path, corpus);
    out << "wrote " << corpus.utterances.size() << " utterances (" << corpus.split("train").size() << " train, "
        << corpus.split("dev_man").size() << " dev_man, " << corpus.split("dev_sge").size() << " dev_sge) to "
        << a.out_path << "\n";
}

// ---------------------------------------------------------------------------
// train-base / adapt
// ---------------------------------------------------------------------------

struct TrainCommonArgs {
    std::string data_path;
    std::string out_ckpt;
    std::string report_path;
    std::string config_path;
    std::optional<double> lr;
    std::optional<int> epochs;
    std::optional<int> batch_size;
    std::optional<double> alpha;
    std::optional<double> grad_clip;
    std::optional<uint64_t> seed;
    bool force = false;
};

struct TrainBaseArgs {
    TrainCommonArgs common;
    std::optional<int> d_model, n_heads, n_enc_layers, n_dec_layers, d_ff, n_feat;
};

struct AdaptArgs {
    TrainCommonArgs common;
    std::string base_ckpt;
    int variant_id = 8;
    std::optional<int> enc_adapters, dec_adapters, refiner, ctc;  // 0/1 overrides
    std::optional<std::string> prompt;
    std::optional<int> adapter_rank;
    std::optional<int> refiner_layers, refiner_hidden, refiner_bidirectional;
};

inline TrainConfig resolve_train_config(const nlohmann::json& file, const TrainCommonArgs& a, TrainStage stage) {
    TrainConfig tc = config_section(file, "train", TrainConfig{});
    if (a.lr) tc.lr = *a.lr;
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.alpha) tc.alpha = *a.alpha;
    if (a.grad_clip) tc.grad_clip = *a.grad_clip;
    if (a.seed) tc.seed = *a.seed;
    tc.stage = stage;
    return tc;
}

inline void check_corpus_features(const CorpusManifest& corpus, int n_feat) {
    if (!corpus.utterances.empty() && corpus.utterances.front().features.cols() != n_feat)
        throw ConfigError("corpus has " + std::to_string(corpus.utterances.front().features.cols()) +
                          " feature dims but the model expects " + std::to_string(n_feat));
}

inline void print_train_summary(const TrainReport& rep, std::ostream& out) {
    if (rep.epochs.empty()) {
        out << "no trainable parameters; checkpoint passes the base weights through\n";
        return;
    }
    const EpochLog& last = rep.epochs.back();
    out << "epochs " << rep.epochs.size() << " | final train loss " << last.total << " (att " << last.att << ", ctc "
        << last.ctc << ") | best epoch " << rep.best_epoch << " (dev " << rep.best_dev << ")\n";
}

inline void run_train_base(const TrainBaseArgs& a, std::ostream& out) {
    guard_output(a.common.out_ckpt, a.common.force);
    guard_output(a.common.report_path, a.common.force);
    const nlohmann::json file = read_config_file(a.common.config_path);
    ModelConfig mc = config_section(file, "model", ModelConfig{});
    if (a.d_model) mc.d_model = *a.d_model;
    if (a.n_heads) mc.n_heads = *a.n_heads;
    if (a.n_enc_layers) mc.n_enc_layers = *a.n_enc_layers;
    if (a.n_dec_layers) mc.n_dec_layers = *a.n_dec_layers;
    if (a.d_ff) mc.d_ff = *a.d_ff;
    if (a.n_feat) mc.n_feat = *a.n_feat;
    RefinerConfig rc = config_section(file, "refiner", RefinerConfig{});
    TrainConfig tc = resolve_train_config(file, a.common, TrainStage::base);
    tc.variant = VariantConfig{};

    CorpusManifest corpus = load_corpus(a.common.data_path);
    check_corpus_features(corpus, mc.n_feat);
    auto [ckpt, rep] = train(tc, mc, rc, corpus, nullptr, !a.common.report_path.empty());
    save_checkpoint(ckpt, a.common.out_ckpt);
    if (!a.common.report_path.empty()) write_text_file(a.common.report_path, report_to_json(rep).dump(2) + "\n");
    print_train_summary(rep, out);
    out << "checkpoint written to " << a.common.out_ckpt << "\n";
}

inline void run_adapt(const AdaptArgs& a, std::ostream& out) {
    guard_output(a.common.out_ckpt, a.common.force);
    guard_output(a.common.report_path, a.common.force);
    const nlohmann::json file = read_config_file(a.common.config_path);
    Checkpoint base = load_checkpoint(a.base_ckpt);

    RefinerConfig rc = file.contains("refiner") ? config_section(file, "refiner", base.refiner) : base.refiner;
    if (a.refiner_layers) rc.n_layers = *a.refiner_layers;
    if (a.refiner_hidden) rc.hidden = *a.refiner_hidden;
    if (a.refiner_bidirectional) rc.bidirectional = *a.refiner_bidirectional != 0;

    TrainConfig tc = resolve_train_config(file, a.common, TrainStage::adapt);
    if (a.variant_id < 0 || a.variant_id > 8) throw ConfigError("variant id must be in [0,8]");
    tc.variant = variant_for_id(a.variant_id);
    if (a.enc_adapters) tc.variant.enc_adapters = *a.enc_adapters != 0;
    if (a.dec_adapters) tc.variant.dec_adapters = *a.dec_adapters != 0;
    if (a.refiner) tc.variant.refiner = *a.refiner != 0;
    if (a.ctc) tc.variant.ctc = *a.ctc != 0;
    if (a.prompt) tc.variant.prompt_mode = prompt_mode_from_string(*a.prompt);
    if (a.adapter_rank) tc.variant.adapter_rank = *a.adapter_rank;

    CorpusManifest corpus = load_corpus(a.common.data_path);
    check_corpus_features(corpus, base.model.n_feat);
    auto [ckpt, rep] = train(tc, base.model, rc, corpus, &base, !a.common.report_path.empty());
    save_checkpoint(ckpt, a.common.out_ckpt);
    if (!a.common.report_path.empty()) write_text_file(a.common.report_path, report_to_json(rep).dump(2) + "\n");
    print_train_summary(rep, out);
    out << "checkpoint written to " << a.common.out_ckpt << "\n";
}

// ---------------------------------------------------------------------------
// eval / decode
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt_path;
    std::string data_path;
    std::string split = "dev_man";
    std::string prompt = "auto";
    std::string out_path;  // report JSON, optional
    int max_new = 18;
    bool force = false;
};

inline PromptMode resolve_eval_prompt(const std::string& prompt, const VariantConfig& v, const std::string& split) {
    if (prompt == "auto") return eval_prompt_for(v, split);
    return prompt_mode_from_string(prompt);
}

inline void run_eval(const EvalArgs& a, std::ostream& out) {
    guard_output(a.out_path, a.force);
    Checkpoint ckpt = load_checkpoint(a.ckpt_path);
    Model m = model_from_checkpoint(ckpt);
    CorpusManifest corpus = load_corpus(a.data_path);
    auto members = corpus.split(a.split);
    if (members.empty()) throw ValidationError("split '" + a.split + "' is empty in " + a.data_path);
    const PromptMode pm = resolve_eval_prompt(a.prompt, m.variant, a.split);
    EvalResult er = evaluate_model(m, members, pm, a.max_new);
    out << a.split << ": " << metrics::format_report(er.report) << "\n";
    if (!a.out_path.empty()) write_text_file(a.out_path, metrics::report_json(er.report).dump(2) + "\n");
}

struct DecodeArgs {
    std::string ckpt_path;
    std::string data_path;
    std::string split = "dev_man";
    std::string prompt = "auto";
    std::string out_path;  // TSV of transcripts
    bool gates = false;    // add the two-path gate column
    int max_new = 18;
    bool force = false;
};

inline void run_decode(const DecodeArgs& a, std::ostream& out) {
    guard_output(a.out_path, a.force);
    Checkpoint ckpt = load_checkpoint(a.ckpt_path);
    Model m = model_from_checkpoint(ckpt);
    CorpusManifest corpus = load_corpus(a.data_path);
    auto members = corpus.split(a.split);
    if (members.empty()) throw ValidationError("split '" + a.split + "' is empty in " + a.data_path);
    const PromptMode pm = resolve_eval_prompt(a.prompt, m.variant, a.split);
    if (a.gates && pm != PromptMode::pair)
        throw ConfigError("--gates needs two-path decoding (prompt mode 'pair')");
    EvalResult er = evaluate_model(m, members, pm, a.max_new);
    std::ostringstream tsv;
    for (size_t i = 0; i < er.hyps.size(); ++i) {
        tsv << er.hyps[i].first << "\t" << er.hyps[i].second;
        if (a.gates) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", er.mean_gate_zh[i]);
            tsv << "\t" << buf;
        }
        tsv << "\n";
    }
    write_text_file(a.out_path, tsv.str());
    out << "decoded " << er.hyps.size() << " utterances from " << a.split << " to " << a.out_path << "\n";
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

struct ScoreArgs {
    std::string ref_path;
    std::string hyp_path;
    std::string out_path;       // report JSON, optional
    std::string per_line_path;  // per-line TSV, optional
    bool force = false;
};

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    return lines;
}

inline void run_score(const ScoreArgs& a, std::ostream& out) {
    guard_output(a.out_path, a.force);
    guard_output(a.per_line_path, a.force);
    const auto refs = read_lines(a.ref_path);
    const auto hyps = read_lines(a.hyp_path);
    if (refs.size() != hyps.size())
        throw InputError("reference and hypothesis files differ in length (" + std::to_string(refs.size()) + " vs " +
                         std::to_string(hyps.size()) + ")");
    if (refs.empty()) throw InputError("reference file is empty: " + a.ref_path);
    metrics::ErrorReport total;
    std::ostringstream tsv;
    tsv << "line\ts\td\ti\tn\tmer\n";
    for (size_t i = 0; i < refs.size(); ++i) {
        metrics::ErrorReport one = metrics::score(refs[i], hyps[i]);
        total.accumulate(one);
        const auto r = one.overall.rate();
        tsv << (i + 1) << "\t" << one.overall.s << "\t" << one.overall.d << "\t" << one.overall.i << "\t"
            << one.overall.n << "\t";
        if (r) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", *r);
            tsv << buf;
        } else {
            tsv << "n/a";
        }
        tsv << "\n";
    }
    out << metrics::format_report(total) << "\n";
    if (!a.out_path.empty()) write_text_file(a.out_path, metrics::report_json(total).dump(2) + "\n");
    if (!a.per_line_path.empty()) write_text_file(a.per_line_path, tsv.str());
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArgs {
    std::string data_path;
    std::string base_ckpt;
    std::string out_path;  // JSON table
    std::string config_path;
    std::optional<double> lr;
    std::optional<int> epochs;
    std::optional<int> batch_size;
    std::optional<double> alpha;
    std::optional<uint64_t> seed;
    bool force = false;
};

inline std::string ablation_text_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "id | dev_man  all    zh    en | dev_sge  all    zh    en\n";
    for (const auto& r : rows) {
        os << " " << r.id << " |         " << pct_cell(r.dev_man.overall.rate()) << " " << pct_cell(r.dev_man.zh.rate())
           << " " << pct_cell(r.dev_man.en.rate()) << " |         " << pct_cell(r.dev_sge.overall.rate()) << " "
           << pct_cell(r.dev_sge.zh.rate()) << " " << pct_cell(r.dev_sge.en.rate()) << "\n";
    }
    return os.str();
}

inline void run_ablate(const AblateArgs& a, std::ostream& out) {
    guard_output(a.out_path, a.force);
    const nlohmann::json file = read_config_file(a.config_path);
    TrainCommonArgs common;
    common.lr = a.lr;
    common.epochs = a.epochs;
    common.batch_size = a.batch_size;
    common.alpha = a.alpha;
    common.seed = a.seed;
    common.config_path = a.config_path;
    TrainConfig proto = resolve_train_config(file, common, TrainStage::adapt);
    Checkpoint base = load_checkpoint(a.base_ckpt);
    CorpusManifest corpus = load_corpus(a.data_path);
    check_corpus_features(corpus, base.model.n_feat);
    auto rows = ablate(corpus, base, proto);
    if (!a.out_path.empty()) write_text_file(a.out_path, ablation_to_json(rows).dump(2) + "\n");
    out << ablation_text_table(rows);
}

// ---------------------------------------------------------------------------
// argument wiring
// ---------------------------------------------------------------------------

inline void add_train_common(CLI::App* sub, TrainCommonArgs& a) {
    sub->add_option("--data", a.data_path, "corpus manifest (JSON lines)")->required();
    sub->add_option("--out", a.out_ckpt, "checkpoint output path")->required();
    sub->add_option("--report", a.report_path, "training report JSON output");
    sub->add_option("--config", a.config_path, "JSON config file (sections: model, refiner, train)");
    sub->add_option("--lr", a.lr, "learning rate");
    sub->add_option("--epochs", a.epochs, "training epochs");
    sub->add_option("--batch-size", a.batch_size, "utterances per optimizer step");
    sub->add_option("--alpha", a.alpha, "attention/frame-loss mix in [0,1]");
    sub->add_option("--grad-clip", a.grad_clip, "global gradient-norm clip (<=0 disables)");
    sub->add_option("--seed", a.seed, "training seed");
    sub->add_flag("--force", a.force, "overwrite existing outputs");
}

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"code-switching adaptation workbench"};
    app.require_subcommand(1);

    GenDataArgs gd;
    CLI::App* gen = app.add_subcommand("gen-data", "synthesize a two-language corpus manifest");
    gen->add_option("--out", gd.out_path, "manifest output path")->required();
    gen->add_option("--seed", gd.seed, "corpus seed");
    gen->add_option("--n-train", gd.n_train, "training utterances");
    gen->add_option("--n-dev", gd.n_dev, "utterances per dev split");
    gen->add_option("--switch-prob", gd.switch_prob, "per-token language-switch probability");
    gen->add_option("--noise-std", gd.noise_std, "feature noise level");
    gen->add_option("--lang-shift", gd.lang_shift, "prototype separation between languages");
    gen->add_option("--n-feat", gd.n_feat, "feature dimensions");
    gen->add_option("--min-tokens", gd.min_tokens, "minimum utterance length");
    gen->add_option("--max-tokens", gd.max_tokens, "maximum utterance length");
    gen->add_flag("--force", gd.force, "overwrite existing outputs");

    TrainBaseArgs tb;
    CLI::App* trb = app.add_subcommand("train-base", "pretrain the backbone");
    add_train_common(trb, tb.common);
    trb->add_option("--d-model", tb.d_model, "model width");
    trb->add_option("--n-heads", tb.n_heads, "attention heads");
    trb->add_option("--n-enc-layers", tb.n_enc_layers, "encoder layers");
    trb->add_option("--n-dec-layers", tb.n_dec_layers, "decoder layers");
    trb->add_option("--d-ff", tb.d_ff, "feed-forward width");
    trb->add_option("--n-feat", tb.n_feat, "input feature dimensions");

    AdaptArgs ad;
    CLI::App* adp = app.add_subcommand("adapt", "train adaptation modules on a frozen backbone");
    add_train_common(adp, ad.common);
    adp->add_option("--base", ad.base_ckpt, "stage-base checkpoint")->required();
    adp->add_option("--variant-id", ad.variant_id, "ablation row 0..8 (default 8, the full method)");
    adp->add_option("--enc-adapters", ad.enc_adapters, "override: encoder adapters (0/1)");
    adp->add_option("--dec-adapters", ad.dec_adapters, "override: decoder adapters (0/1)");
    adp->add_option("--refiner", ad.refiner, "override: encoder refiner (0/1)");
    adp->add_option("--ctc", ad.ctc, "override: frame-level supervision head (0/1)");
    adp->add_option("--prompt", ad.prompt, "override: prompt mode (single-zh|single-en|concat|pair)");
    adp->add_option("--rank", ad.adapter_rank, "override: adapter bottleneck rank");
    adp->add_option("--refiner-layers", ad.refiner_layers, "refiner depth");
    adp->add_option("--refiner-hidden", ad.refiner_hidden, "refiner hidden size");
    adp->add_option("--refiner-bidirectional", ad.refiner_bidirectional, "refiner reads both directions (0/1)");

    EvalArgs ev;
    CLI::App* evl = app.add_subcommand("eval", "greedy-decode a split and report error rates");
    evl->add_option("--ckpt", ev.ckpt_path, "checkpoint")->required();
    evl->add_option("--data", ev.data_path, "corpus manifest")->required();
    evl->add_option("--split", ev.split, "corpus split (train|dev_man|dev_sge)");
    evl->add_option("--prompt", ev.prompt, "prompt mode, or 'auto' for the checkpoint's rule");
    evl->add_option("--out", ev.out_path, "report JSON output");
    evl->add_option("--max-new", ev.max_new, "decoding step cap");
    evl->add_flag("--force", ev.force, "overwrite existing outputs");

    DecodeArgs dc;
    CLI::App* dec = app.add_subcommand("decode", "greedy-decode a split to a transcript TSV");
    dec->add_option("--ckpt", dc.ckpt_path, "checkpoint")->required();
    dec->add_option("--data", dc.data_path, "corpus manifest")->required();
    dec->add_option("--split", dc.split, "corpus split (train|dev_man|dev_sge)");
    dec->add_option("--prompt", dc.prompt, "prompt mode, or 'auto' for the checkpoint's rule");
    dec->add_option("--out", dc.out_path, "transcript TSV output")->required();
    dec->add_flag("--gates", dc.gates, "append the mean zh gate weight per utterance");
    dec->add_option("--max-new", dc.max_new, "decoding step cap");
    dec->add_flag("--force", dc.force, "overwrite existing outputs");

    ScoreArgs sc;
    CLI::App* sco = app.add_subcommand("score", "score parallel reference/hypothesis text files");
    sco->add_option("--ref", sc.ref_path, "reference transcripts, one per line")->required();
    sco->add_option("--hyp", sc.hyp_path, "hypothesis transcripts, one per line")->required();
    sco->add_option("--out", sc.out_path, "report JSON output");
    sco->add_option("--per-line", sc.per_line_path, "per-line TSV output");
    sco->add_flag("--force", sc.force, "overwrite existing outputs");

    AblateArgs ab;
    CLI::App* abl = app.add_subcommand("ablate", "train and score all nine variant rows");
    abl->add_option("--data", ab.data_path, "corpus manifest")->required();
    abl->add_option("--base", ab.base_ckpt, "stage-base checkpoint")->required();
    abl->add_option("--out", ab.out_path, "results table JSON output");
    abl->add_option("--config", ab.config_path, "JSON config file (section: train)");
    abl->add_option("--lr", ab.lr, "learning rate");
    abl->add_option("--epochs", ab.epochs, "training epochs per row");
    abl->add_option("--batch-size", ab.batch_size, "utterances per optimizer step");
    abl->add_option("--alpha", ab.alpha, "attention/frame-loss mix in [0,1]");
    abl->add_option("--seed", ab.seed, "adaptation seed shared by all rows");
    abl->add_flag("--force", ab.force, "overwrite existing outputs");

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
        if (gen->parsed()) run_gen_data(gd, out);
        if (trb->parsed()) run_train_base(tb, out);
        if (adp->parsed()) run_adapt(ad, out);
        if (evl->parsed()) run_eval(ev, out);
        if (dec->parsed()) run_decode(dc, out);
        if (sco->parsed()) run_score(sc, out);
        if (abl->parsed()) run_ablate(ab, out);
        return 0;
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    } catch (const InternalError& e) {
        err << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        err << e.what() << "\n";
        return 1;
    } catch (const InputError& e) {
        err << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        err << e.what() << "\n";
        return 1;
    } catch (const FeasibilityError& e) {
        err << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace csadapt::cli
