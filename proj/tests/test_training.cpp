#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "csadapt/train.hpp"

using namespace csadapt;

namespace {

// Small-but-real geometry: the token layout (32 symbols + specials) is fixed,
// so vocab and special ids stay at full size while width shrinks.
ModelConfig train_test_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.d_ff = 32;
    c.n_feat = 4;
    c.vocab_size = 40;
    c.max_src_frames = 64;
    c.max_tgt_tokens = 24;
    return c;
}

RefinerConfig small_refiner() {
    RefinerConfig rc;
    rc.n_layers = 1;
    rc.hidden = 12;
    rc.bidirectional = false;
    return rc;
}

CorpusManifest small_corpus(uint64_t seed, int n_train, int n_dev_each, double switch_prob = 0.3) {
    auto specs = default_language_specs(4, seed);
    return generate_corpus(seed, n_train, n_dev_each, switch_prob, 0.3, specs, 4, 6);
}

TrainConfig base_config(uint64_t seed, int epochs, double lr) {
    TrainConfig tc;
    tc.stage = TrainStage::base;
    tc.lr = lr;
    tc.epochs = epochs;
    tc.batch_size = 8;
    tc.seed = seed;
    return tc;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("loss combinators match their worked examples and reject bad mixes") {
    CHECK(final_loss(2.0, 4.0, 1.0) == 2.0);
    CHECK(final_loss(2.0, 4.0, 0.0) == 4.0);
    CHECK(final_loss(2.0, 4.0, 0.5) == 3.0);
    CHECK_THROWS_AS(final_loss(1.0, 1.0, -0.1), ConfigError);
    CHECK_THROWS_AS(final_loss(1.0, 1.0, 1.1), ConfigError);

    CHECK(enc_ref_loss(1.0, 2.0, 4.0) == 2.0);
    CHECK(enc_ref_loss(0.0, 2.0, 4.0) == 4.0);
    CHECK(enc_ref_loss(0.25, 2.0, 4.0) == mix2(0.25, 2.0, 0.75, 4.0));
    CHECK_THROWS_AS(enc_ref_loss(1.5, 1.0, 1.0), ConfigError);
}

TEST_CASE("free-function losses and the tape composition agree to the last bit") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        const double a = std::exp(rng.normal()), b = std::exp(rng.normal());
        const double lam = rng.uniform();
        Tape t(false);
        Var va = t.constant(Mat::Constant(1, 1, a));
        Var vb = t.constant(Mat::Constant(1, 1, b));
        Var mixed = t.scalar_affine(lam, va, 1.0 - lam, vb);
        CHECK(t.value(mixed)(0, 0) == final_loss(a, b, lam));
        CHECK(t.value(mixed)(0, 0) == enc_ref_loss(lam, a, b));
    }
}

TEST_CASE("adam minimizes a separable quadratic") {
    ParamStore ps;
    ps.add("adapt.x", Mat::Constant(1, 2, 10.0));
    Adam opt(0.2);
    for (int step = 0; step < 400; ++step) {
        const Mat& x = ps.at("adapt.x");
        std::map<std::string, Mat> grads;
        Mat target(1, 2);
        target << 3.0, -1.5;
        grads["adapt.x"] = 2.0 * (x - target);
        opt.step(ps, grads);
    }
    CHECK(ps.at("adapt.x")(0, 0) == Catch::Approx(3.0).margin(1e-3));
    CHECK(ps.at("adapt.x")(0, 1) == Catch::Approx(-1.5).margin(1e-3));
    CHECK(opt.steps() == 400);
}

TEST_CASE("global-norm clipping rescales only oversized gradients") {
    std::map<std::string, Mat> grads;
    grads["adapt.a"] = Mat::Constant(1, 1, 3.0);
    grads["adapt.b"] = Mat::Constant(1, 1, 4.0);  // norm 5
    auto copy = grads;
    clip_global_norm(copy, 10.0);
    CHECK(copy["adapt.a"](0, 0) == 3.0);
    clip_global_norm(copy, 1.0);
    CHECK(copy["adapt.a"](0, 0) == Catch::Approx(0.6));
    CHECK(copy["adapt.b"](0, 0) == Catch::Approx(0.8));
    copy = grads;
    clip_global_norm(copy, 0.0);  // disabled
    CHECK(copy["adapt.b"](0, 0) == 4.0);
}

TEST_CASE("epoch shuffles are permutations and pure functions of seed and epoch") {
    auto a = detail::shuffled_indices(50, 7, 3);
    auto b = detail::shuffled_indices(50, 7, 3);
    auto c = detail::shuffled_indices(50, 7, 4);
    CHECK(a == b);
    CHECK(a != c);
    std::vector<size_t> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("base training reduces the teacher-forced loss over two epochs") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(901, 200, 12);
    TrainConfig tc = base_config(11, 2, 3e-3);
    auto [ckpt, report] = train(tc, mc, small_refiner(), corpus, nullptr, false);
    REQUIRE(report.epochs.size() == 2);
    CHECK(report.epochs.back().att < report.epochs.front().att);
    CHECK(ckpt.stage == TrainStage::base);
    CHECK(ckpt.params.has("base.embed"));
    CHECK_FALSE(ckpt.params.has("adapt.ctc.w"));
    // base stage has no CTC head: the frame-level term is identically zero
    for (const auto& e : report.epochs) CHECK(e.ctc == 0.0);
}

TEST_CASE("training twice with one configuration is bitwise reproducible") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(902, 24, 6);
    TrainConfig tc = base_config(21, 2, 3e-3);
    auto [ckpt_a, rep_a] = train(tc, mc, small_refiner(), corpus, nullptr, false);
    auto [ckpt_b, rep_b] = train(tc, mc, small_refiner(), corpus, nullptr, false);
    REQUIRE(rep_a.epochs.size() == rep_b.epochs.size());
    for (size_t i = 0; i < rep_a.epochs.size(); ++i) {
        CHECK(rep_a.epochs[i].att == rep_b.epochs[i].att);
        CHECK(rep_a.epochs[i].total == rep_b.epochs[i].total);
        CHECK(rep_a.epochs[i].dev == rep_b.epochs[i].dev);
    }
    std::set<std::string> names(ckpt_a.params.names().begin(), ckpt_a.params.names().end());
    CHECK(hash_params(ckpt_a.params, names) == hash_params(ckpt_b.params, names));
}

TEST_CASE("adaptation changes only unfrozen parameters") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(903, 32, 6);
    auto [base_ckpt, base_rep] = train(base_config(31, 1, 3e-3), mc, small_refiner(), corpus, nullptr, false);

    TrainConfig tc;
    tc.stage = TrainStage::adapt;
    tc.lr = 1e-3;
    tc.epochs = 1;
    tc.batch_size = 8;
    tc.seed = 32;
    tc.variant = variant_for_id(8);  // every module in play
    auto [ckpt, rep] = train(tc, mc, small_refiner(), corpus, &base_ckpt, false);

    const FreezePolicy policy{TrainStage::adapt};
    const ParamPartition part = classify_parameters(policy, ckpt.params);
    REQUIRE_FALSE(part.frozen.empty());
    REQUIRE_FALSE(part.trainable.empty());
    CHECK(hash_params(ckpt.params, part.frozen) == hash_params(base_ckpt.params, part.frozen));
    // the trainable side moved: freshly built adaptation params under the same
    // seed hash differently from the trained ones
    ParamStore rebuilt;
    for (const auto& n : base_ckpt.params.names()) rebuilt.add(n, base_ckpt.params.at(n));
    Rng rng = Rng::substream(tc.seed, 0xADA7);
    add_variant_params(rebuilt, mc, small_refiner(), tc.variant, rng);
    CHECK(hash_params(ckpt.params, part.trainable) != hash_params(rebuilt, part.trainable));
}

TEST_CASE("zero-shot row adapts nothing and still evaluates") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(904, 16, 5);
    auto [base_ckpt, base_rep] = train(base_config(41, 1, 3e-3), mc, small_refiner(), corpus, nullptr, false);

    TrainConfig tc;
    tc.stage = TrainStage::adapt;
    tc.epochs = 4;
    tc.batch_size = 4;
    tc.seed = 42;
    tc.variant = variant_for_id(0);
    auto [ckpt, rep] = train(tc, mc, small_refiner(), corpus, &base_ckpt, true);
    CHECK(rep.epochs.empty());  // nothing trainable, so no steps ran
    CHECK(rep.best_epoch == -1);
    std::set<std::string> names(ckpt.params.names().begin(), ckpt.params.names().end());
    CHECK(hash_params(ckpt.params, names) == hash_params(base_ckpt.params, names));
    REQUIRE(rep.final_eval.contains("dev_man"));
    REQUIRE(rep.final_eval.contains("dev_sge"));
    CHECK(rep.final_eval["dev_man"]["overall"]["n"].get<int>() > 0);
}

TEST_CASE("adaptation without a base checkpoint or with the wrong one is rejected") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(905, 8, 4);
    TrainConfig tc;
    tc.stage = TrainStage::adapt;
    tc.epochs = 1;
    tc.seed = 43;
    tc.variant = variant_for_id(1);
    CHECK_THROWS_AS(train(tc, mc, small_refiner(), corpus, nullptr, false), ConfigError);

    auto [base_ckpt, rep] = train(base_config(44, 1, 3e-3), mc, small_refiner(), corpus, nullptr, false);
    ModelConfig other = mc;
    other.d_model = 32;
    CHECK_THROWS_AS(train(tc, other, small_refiner(), corpus, &base_ckpt, false), ConfigError);
}

TEST_CASE("a non-finite loss aborts with a diagnostic") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(906, 8, 4);
    ParamStore ps;
    Rng rng = Rng::substream(45, 0xBA5E);
    build_base_params(ps, mc, rng);
    ps.at("base.embed")(0, 0) = std::numeric_limits<double>::quiet_NaN();
    Checkpoint bad{mc, small_refiner(), VariantConfig{}, TrainStage::base, std::move(ps)};

    TrainConfig tc;
    tc.stage = TrainStage::adapt;
    tc.epochs = 1;
    tc.seed = 46;
    tc.variant = variant_for_id(2);
    CHECK_THROWS_MATCHES(train(tc, mc, small_refiner(), corpus, &bad, false), InternalError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("non-finite")));
}

TEST_CASE("the optimized objective is the exact attention/frame-level mixture") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(907, 6, 3);
    Model m;
    m.model_cfg = mc;
    m.refiner_cfg = small_refiner();
    m.variant = variant_for_id(8);
    Rng rb = Rng::substream(47, 0xBA5E);
    build_base_params(m.params, mc, rb);
    Rng ra = Rng::substream(47, 0xADA7);
    add_variant_params(m.params, mc, m.refiner_cfg, m.variant, ra);

    TrainConfig tc;
    tc.stage = TrainStage::adapt;
    tc.alpha = 0.7;
    tc.variant = m.variant;
    for (const Utterance* u : corpus.split("train")) {
        Session s(m.params);
        ForwardLosses fl = utterance_forward(s, m, tc, *u);
        CHECK(fl.total == mix2(tc.alpha, fl.dec, 1.0 - tc.alpha, fl.ctc));
        CHECK(fl.ctc > 0.0);
        CHECK(fl.dec >= fl.att);  // language-id term is a non-negative CE
    }

    // without the frame-level head the objective is the decoder loss itself
    Model plain;
    plain.model_cfg = mc;
    plain.refiner_cfg = small_refiner();
    plain.variant = variant_for_id(3);
    Rng rb2 = Rng::substream(48, 0xBA5E);
    build_base_params(plain.params, mc, rb2);
    Rng ra2 = Rng::substream(48, 0xADA7);
    add_variant_params(plain.params, mc, plain.refiner_cfg, plain.variant, ra2);
    TrainConfig tc3 = tc;
    tc3.variant = plain.variant;
    const Utterance& u0 = *corpus.split("train").front();
    Session s(plain.params);
    ForwardLosses fl = utterance_forward(s, plain, tc3, u0);
    CHECK(fl.total == fl.dec);
    CHECK(fl.ctc == 0.0);
    CHECK(fl.dec == fl.att);  // single-path: no language-id term
}

TEST_CASE("evaluation is deterministic and demands a non-empty split") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(908, 10, 5);
    auto [ckpt, rep] = train(base_config(51, 1, 3e-3), mc, small_refiner(), corpus, nullptr, false);
    Model m = model_from_checkpoint(ckpt);

    auto dev = corpus.split("dev_man");
    EvalResult a = evaluate_model(m, dev, PromptMode::single_zh);
    EvalResult b = evaluate_model(m, dev, PromptMode::single_zh);
    CHECK(metrics::report_json(a.report).dump() == metrics::report_json(b.report).dump());
    REQUIRE(a.hyps.size() == dev.size());
    for (size_t i = 0; i < a.hyps.size(); ++i) {
        CHECK(a.hyps[i].first == dev[i]->id);
        CHECK(a.hyps[i].second == b.hyps[i].second);
    }
    CHECK(a.report.overall.n > 0);

    std::vector<const Utterance*> empty;
    CHECK_THROWS_AS(evaluate_model(m, empty, PromptMode::single_zh), ValidationError);
}

TEST_CASE("checkpoints round-trip through disk and evaluate identically") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(909, 12, 4);
    auto [ckpt, rep] = train(base_config(61, 1, 3e-3), mc, small_refiner(), corpus, nullptr, false);

    TempFile f("csadapt_train_ckpt_test.bin");
    save_checkpoint(ckpt, f.path);
    Checkpoint back = load_checkpoint(f.path);
    std::set<std::string> names(ckpt.params.names().begin(), ckpt.params.names().end());
    REQUIRE(hash_params(back.params, names) == hash_params(ckpt.params, names));

    Model m1 = model_from_checkpoint(ckpt);
    Model m2 = model_from_checkpoint(back);
    auto dev = corpus.split("dev_sge");
    CHECK(metrics::report_json(evaluate_model(m1, dev, PromptMode::single_en).report).dump() ==
          metrics::report_json(evaluate_model(m2, dev, PromptMode::single_en).report).dump());
}

TEST_CASE("two-path evaluation reports gate weights per utterance") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(910, 8, 4);
    auto [base_ckpt, rep0] = train(base_config(71, 1, 3e-3), mc, small_refiner(), corpus, nullptr, false);
    TrainConfig tc;
    tc.stage = TrainStage::adapt;
    tc.epochs = 1;
    tc.batch_size = 4;
    tc.seed = 72;
    tc.variant = variant_for_id(8);
    auto [ckpt, rep] = train(tc, mc, small_refiner(), corpus, &base_ckpt, false);
    Model m = model_from_checkpoint(ckpt);
    auto dev = corpus.split("dev_man");
    EvalResult er = evaluate_model(m, dev, PromptMode::pair);
    REQUIRE(er.mean_gate_zh.size() == dev.size());
    for (double w : er.mean_gate_zh) {
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
    }
}

TEST_CASE("harness prompt rule: dominant language per split, fixed otherwise") {
    CHECK(eval_prompt_for(variant_for_id(0), "dev_man") == PromptMode::single_zh);
    CHECK(eval_prompt_for(variant_for_id(0), "dev_sge") == PromptMode::single_en);
    CHECK(eval_prompt_for(variant_for_id(3), "dev_man") == PromptMode::concat);
    CHECK(eval_prompt_for(variant_for_id(8), "dev_sge") == PromptMode::pair);
}

TEST_CASE("the ablation harness produces all nine scored rows") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(911, 16, 4);
    auto [base_ckpt, rep0] = train(base_config(81, 1, 3e-3), mc, small_refiner(), corpus, nullptr, false);

    TrainConfig proto;
    proto.lr = 1e-3;
    proto.epochs = 1;
    proto.batch_size = 8;
    proto.seed = 82;
    auto rows = ablate(corpus, base_ckpt, proto);
    REQUIRE(rows.size() == 9);
    for (int id = 0; id <= 8; ++id) {
        CHECK(rows[id].id == id);
        CHECK(rows[id].dev_man.overall.n > 0);
        CHECK(rows[id].dev_sge.overall.n > 0);
    }
    // rows 3 and 5 differ only by the refiner flag
    VariantConfig v3 = rows[3].variant, v5 = rows[5].variant;
    CHECK_FALSE(v3.refiner);
    CHECK(v5.refiner);
    v5.refiner = false;
    CHECK(nlohmann::json(v3) == nlohmann::json(v5));

    auto j = ablation_to_json(rows);
    REQUIRE(j.size() == 9);
    CHECK(j[8]["dev_man"].contains("overall"));
    CHECK(j[8]["variant"]["prompt_mode"] == "pair");
}

TEST_CASE("train reports serialize every logged component") {
    const ModelConfig mc = train_test_config();
    CorpusManifest corpus = small_corpus(912, 10, 4);
    auto [ckpt, rep] = train(base_config(91, 2, 3e-3), mc, small_refiner(), corpus, nullptr, true);
    auto j = report_to_json(rep);
    REQUIRE(j["epochs"].size() == 2);
    for (const auto& e : j["epochs"]) {
        CHECK(e.contains("l_att"));
        CHECK(e.contains("l_ctc"));
        CHECK(e.contains("l_dec"));
        CHECK(e.contains("l_final"));
        CHECK(e.contains("dev_loss"));
    }
    CHECK(j["best_epoch"].get<int>() >= 0);
    CHECK(j.contains("final_eval"));
}
