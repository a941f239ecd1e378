#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "csadapt/dual.hpp"
#include "csadapt/rng.hpp"
#include "gradcheck.hpp"

using namespace csadapt;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.d_ff = 16;
    cfg.n_feat = 4;
    cfg.vocab_size = 12;
    cfg.special = SpecialTokens{4, 5, 6, 7, 8, 9, 12};
    return cfg;
}

struct Fixture {
    ModelConfig cfg = tiny_config();
    ParamStore ps;
    Mat feats;
    StackHooks hooks_zh = adapter_hooks("adapt.dual.zh");
    StackHooks hooks_en = adapter_hooks("adapt.dual.en");

    explicit Fixture(uint64_t seed, int rank = 2) {
        Rng rng(seed);
        build_base_params(ps, cfg, rng);
        add_adapter_set(ps, rng, "adapt.dual.zh", cfg.n_dec_layers, cfg.d_model, rank);
        add_adapter_set(ps, rng, "adapt.dual.en", cfg.n_dec_layers, cfg.d_model, rank);
        add_fusion_params(ps, cfg);
        add_lid_params(ps, rng, cfg);
        feats = randn_mat(rng, 5, cfg.n_feat, 1.0);
    }
};

}  // namespace

TEST_CASE("dual: zero-init gate weighs both paths exactly one half") {
    Fixture fx(101);
    Session s(fx.ps);
    Var mem = encode(s, fx.cfg, fx.feats);
    std::vector<int> targets = {0, 2};
    DualStates d = dual_decode_states(s, fx.cfg, targets, mem, &fx.hooks_zh, &fx.hooks_en);
    FusedPrediction f = fuse_predictions(s, d, 2);
    const Mat& w = s.tape.value(f.weights);
    CHECK((w.array() == 0.5).all());

    // blended distribution is exactly the average of the two paths
    Mat st_zh = s.tape.value(d.zh).middleRows(d.prompt_len - 1, 3);
    Mat st_en = s.tape.value(d.en).middleRows(d.prompt_len - 1, 3);
    auto softmax = [](Mat m) {
        for (int r = 0; r < m.rows(); ++r) {
            double mx = m.row(r).maxCoeff();
            m.row(r) = (m.row(r).array() - mx).exp();
            m.row(r) /= m.row(r).sum();
        }
        return m;
    };
    Mat expect = 0.5 * softmax(st_zh * fx.ps.at("base.embed").transpose()) +
                 0.5 * softmax(st_en * fx.ps.at("base.embed").transpose());
    CHECK((s.tape.value(f.log_mix).array().exp().matrix() - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dual: gate outputs form a convex combination for any head values") {
    Fixture fx(102);
    Rng rng(103);
    fx.ps.at("adapt.fusion.zh.w") = randn_mat(rng, fx.cfg.d_model, 1, 0.5);
    fx.ps.at("adapt.fusion.en.w") = randn_mat(rng, fx.cfg.d_model, 1, 0.5);
    fx.ps.at("adapt.fusion.zh.b")(0, 0) = 0.3;
    Session s(fx.ps);
    Var mem = encode(s, fx.cfg, fx.feats);
    std::vector<int> targets = {1, 0, 3};
    DualStates d = dual_decode_states(s, fx.cfg, targets, mem, &fx.hooks_zh, &fx.hooks_en);
    FusedPrediction f = fuse_predictions(s, d, 3);
    const Mat& w = s.tape.value(f.weights);
    const Mat mix = s.tape.value(f.log_mix).array().exp().matrix();
    for (int r = 0; r < w.rows(); ++r) {
        CHECK(w(r, 0) > 0.0);
        CHECK(w(r, 1) > 0.0);
        CHECK(w(r, 0) + w(r, 1) == Catch::Approx(1.0).margin(1e-12));
        CHECK(mix.row(r).sum() == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("dual: per-path modules touch only their own path") {
    Fixture fx(104);
    Rng perturb(105);
    fx.ps.at("adapt.dual.zh.l0.attn.up") = randn_mat(perturb, 2, fx.cfg.d_model, 0.3);

    Fixture ref(104);  // identical weights except the zh module above
    auto states = [&](Fixture& f) {
        Session s(f.ps);
        Var mem = encode(s, f.cfg, f.feats);
        DualStates d = dual_decode_states(s, f.cfg, {0, 1}, mem, &f.hooks_zh, &f.hooks_en);
        return std::pair<Mat, Mat>(s.tape.value(d.zh), s.tape.value(d.en));
    };
    auto [zh_a, en_a] = states(fx);
    auto [zh_b, en_b] = states(ref);
    CHECK((zh_a - zh_b).cwiseAbs().maxCoeff() > 0.0);
    CHECK((en_a - en_b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("dual: at init each path equals a plain single-prompt decode") {
    Fixture fx(106);
    Session s(fx.ps);
    Var mem = encode(s, fx.cfg, fx.feats);
    std::vector<int> targets = {2, 0};
    DualStates d = dual_decode_states(s, fx.cfg, targets, mem, &fx.hooks_zh, &fx.hooks_en);

    Session plain(fx.ps);
    Var pmem = encode(plain, fx.cfg, fx.feats);
    Var zh = decode_states(plain, fx.cfg,
                           decoder_input(build_prompt(fx.cfg.special, PromptMode::single_zh), targets), pmem);
    Var en = decode_states(plain, fx.cfg,
                           decoder_input(build_prompt(fx.cfg.special, PromptMode::single_en), targets), pmem);
    CHECK((s.tape.value(d.zh) - plain.tape.value(zh)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((s.tape.value(d.en) - plain.tape.value(en)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("dual: lid loss matches a by-hand cross-entropy") {
    Fixture fx(107);
    Rng rng(108);
    fx.ps.at("adapt.lid.w") = randn_mat(rng, fx.cfg.d_model, 2, 0.4);
    Session s(fx.ps);
    Var mem = encode(s, fx.cfg, fx.feats);
    std::vector<int> targets = {1, 3, 0};
    DualStates d = dual_decode_states(s, fx.cfg, targets, mem, &fx.hooks_zh, &fx.hooks_en);
    Var loss = lid_loss(s, d, 3, kLangEn);

    double expect = 0.0;
    for (const Mat& st : {s.tape.value(d.zh), s.tape.value(d.en)}) {
        Eigen::RowVectorXd pooled = st.middleRows(d.prompt_len, 3).colwise().mean();
        Eigen::RowVectorXd lg = pooled * fx.ps.at("adapt.lid.w") + fx.ps.at("adapt.lid.b").row(0);
        double mx = lg.maxCoeff();
        double lse = std::log((lg.array() - mx).exp().sum()) + mx;
        expect -= lg(kLangEn) - lse;
    }
    CHECK(s.tape.value(loss)(0, 0) == Catch::Approx(expect).margin(1e-10));
    CHECK_THROWS_AS(lid_loss(s, d, 0, kLangZh), InputError);
    CHECK_THROWS_AS(lid_loss(s, d, 3, 2), InputError);
}

TEST_CASE("dual: adaptation gradients flow, frozen base stays untouched") {
    Fixture fx(109);
    Rng rng(110);
    // move modules off their zero inits so every gradient path is live
    fx.ps.at("adapt.dual.zh.l0.attn.up") = randn_mat(rng, 2, fx.cfg.d_model, 0.05);
    fx.ps.at("adapt.dual.en.l0.mlp.up") = randn_mat(rng, 2, fx.cfg.d_model, 0.05);
    fx.ps.at("adapt.fusion.zh.w") = randn_mat(rng, fx.cfg.d_model, 1, 0.3);
    fx.ps.at("adapt.fusion.en.w") = randn_mat(rng, fx.cfg.d_model, 1, 0.3);
    std::vector<int> targets = {0, 2};

    const std::vector<std::string> checked = {"adapt.fusion.zh.w", "adapt.fusion.en.b",
                                              "adapt.dual.zh.l0.attn.down", "adapt.dual.zh.l0.attn.up",
                                              "adapt.dual.en.l0.mlp.up", "adapt.lid.w", "adapt.lid.b"};
    auto forward = [&](Session& s) {
        StackHooks hz = adapter_hooks("adapt.dual.zh"), he = adapter_hooks("adapt.dual.en");
        Var mem = encode(s, fx.cfg, fx.feats);
        DualStates d = dual_decode_states(s, fx.cfg, targets, mem, &hz, &he);
        FusedPrediction f = fuse_predictions(s, d, static_cast<int>(targets.size()));
        return s.tape.add(fused_nll(s, fx.cfg, f, targets), lid_loss(s, d, static_cast<int>(targets.size()), kLangZh));
    };

    Session s(fx.ps, FreezePolicy{TrainStage::adapt}, true);
    Var loss = forward(s);
    s.tape.backward(loss);
    CHECK(s.param_grad("base.embed").isZero());
    CHECK(s.param_grad("base.dec.l0.self.q.w").isZero());

    std::vector<Mat> inputs, analytic;
    for (const auto& name : checked) {
        inputs.push_back(fx.ps.at(name));
        analytic.push_back(s.param_grad(name));
    }
    auto loss_fn = [&](const std::vector<Mat>& in) {
        ParamStore scratch;
        for (const auto& name : fx.ps.names()) scratch.add(name, fx.ps.at(name));
        for (size_t i = 0; i < checked.size(); ++i) scratch.at(checked[i]) = in[i];
        Session fs(scratch);
        Var l = forward(fs);
        return fs.tape.value(l)(0, 0);
    };
    auto res = gradcheck::check(loss_fn, inputs, analytic);
    INFO(res.where);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("dual: base-stage gradients reach shared weights from both paths") {
    Fixture fx(111);
    std::vector<int> targets = {0, 1};
    Session s(fx.ps, FreezePolicy{TrainStage::base}, true);
    Var mem = encode(s, fx.cfg, fx.feats);
    DualStates d = dual_decode_states(s, fx.cfg, targets, mem);
    FusedPrediction f = fuse_predictions(s, d, 2);
    Var loss = fused_nll(s, fx.cfg, f, targets);
    s.tape.backward(loss);
    CHECK(s.param_grad("base.embed").cwiseAbs().maxCoeff() > 0.0);
    CHECK(s.param_grad("base.dec.l0.self.q.w").cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("dual: greedy decode emits tokens with recorded gate weights") {
    Fixture fx(112);
    Session s(fx.ps);
    Var mem = encode(s, fx.cfg, fx.feats);
    DualDecodeResult r = dual_greedy_decode(s, fx.cfg, mem, &fx.hooks_zh, &fx.hooks_en, 6);
    CHECK(r.tokens.size() == r.weights.size());
    CHECK(static_cast<int>(r.tokens.size()) <= 6);
    for (auto [wz, we] : r.weights) {
        CHECK(wz > 0.0);
        CHECK(we > 0.0);
        CHECK(wz + we == Catch::Approx(1.0).margin(1e-12));
    }
    for (int t : r.tokens) {
        CHECK(t >= 0);
        CHECK(t < fx.cfg.vocab_size);
        CHECK(t != fx.cfg.special.eot);
    }
}
