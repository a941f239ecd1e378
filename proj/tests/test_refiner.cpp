#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "csadapt/ctc.hpp"
#include "csadapt/refiner.hpp"
#include "csadapt/rng.hpp"
#include "gradcheck.hpp"

using namespace csadapt;

namespace {

// Plain-Eigen reference for one unidirectional layer.
Mat lstm_reference(const Mat& X, const Mat& wx, const Mat& wh, const Mat& b, int H) {
    const int T = static_cast<int>(X.rows());
    Mat out(T, H);
    Eigen::RowVectorXd h = Eigen::RowVectorXd::Zero(H);
    Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(H);
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (int t = 0; t < T; ++t) {
        Eigen::RowVectorXd g = X.row(t) * wx + h * wh + b.row(0);
        for (int j = 0; j < H; ++j) {
            double gi = sig(g(j)), gf = sig(g(H + j)), gc = std::tanh(g(2 * H + j)), go = sig(g(3 * H + j));
            c(j) = gf * c(j) + gi * gc;
            h(j) = go * std::tanh(c(j));
        }
        out.row(t) = h;
    }
    return out;
}

}  // namespace

TEST_CASE("refiner: lstm states match a by-hand recurrence") {
    Rng rng(61);
    RefinerConfig rc{1, 5, false};
    const int D = 6, T = 4;
    ParamStore ps;
    add_refiner_params(ps, rng, rc, D);
    Mat X = randn_mat(rng, T, D, 1.0);

    Session s(ps);
    Mat got = s.tape.value(refiner_lstm_states(s, rc, s.tape.constant(X)));
    Mat want = lstm_reference(X, ps.at("adapt.refiner.l0.fwd.wx"), ps.at("adapt.refiner.l0.fwd.wh"),
                              ps.at("adapt.refiner.l0.fwd.b"), rc.hidden);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-13);

    // two stacked layers: second layer reads the first layer's states
    Rng rng2(62);
    RefinerConfig rc2{2, 5, false};
    ParamStore ps2;
    add_refiner_params(ps2, rng2, rc2, D);
    Session s2(ps2);
    Mat got2 = s2.tape.value(refiner_lstm_states(s2, rc2, s2.tape.constant(X)));
    Mat l0 = lstm_reference(X, ps2.at("adapt.refiner.l0.fwd.wx"), ps2.at("adapt.refiner.l0.fwd.wh"),
                            ps2.at("adapt.refiner.l0.fwd.b"), rc2.hidden);
    Mat l1 = lstm_reference(l0, ps2.at("adapt.refiner.l1.fwd.wx"), ps2.at("adapt.refiner.l1.fwd.wh"),
                            ps2.at("adapt.refiner.l1.fwd.b"), rc2.hidden);
    CHECK((got2 - l1).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("refiner: forget gates start open, read-out starts at zero") {
    Rng rng(63);
    RefinerConfig rc{1, 4, false};
    ParamStore ps;
    add_refiner_params(ps, rng, rc, 6);
    const Mat& b = ps.at("adapt.refiner.l0.fwd.b");
    CHECK(b.block(0, 0, 1, 4).isZero());
    CHECK(b.block(0, 4, 1, 4).isOnes());
    CHECK(b.block(0, 8, 1, 8).isZero());
    CHECK(ps.at("adapt.refiner.proj.w").isZero());
    CHECK(ps.at("adapt.refiner.proj.b").isZero());
}

TEST_CASE("refiner: residual refinement is the identity at init") {
    Rng rng(64);
    RefinerConfig rc{2, 5, false};
    const int D = 6;
    ParamStore ps;
    add_refiner_params(ps, rng, rc, D);
    Mat enc = randn_mat(rng, 7, D, 1.0);
    Session s(ps);
    Var refined = refine(s, rc, s.tape.constant(enc));
    CHECK((s.tape.value(refined) - enc).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("refiner: unidirectional states are prefix-causal, bidirectional are not") {
    Rng rng(65);
    const int D = 6, T = 5;
    Mat X = randn_mat(rng, T, D, 1.0);
    Mat X2 = X;
    X2.row(3).setConstant(2.0);  // perturb a late frame only

    {
        RefinerConfig rc{1, 4, false};
        ParamStore ps;
        Rng r(66);
        add_refiner_params(ps, r, rc, D);
        Session sa(ps), sb(ps);
        Mat a = sa.tape.value(refiner_lstm_states(sa, rc, sa.tape.constant(X)));
        Mat b = sb.tape.value(refiner_lstm_states(sb, rc, sb.tape.constant(X2)));
        CHECK((a.topRows(3) - b.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((a.row(3) - b.row(3)).cwiseAbs().maxCoeff() > 0.0);
    }
    {
        RefinerConfig rc{1, 4, true};
        ParamStore ps;
        Rng r(67);
        add_refiner_params(ps, r, rc, D);
        Session sa(ps), sb(ps);
        Mat a = sa.tape.value(refiner_lstm_states(sa, rc, sa.tape.constant(X)));
        Mat b = sb.tape.value(refiner_lstm_states(sb, rc, sb.tape.constant(X2)));
        // the backward scan carries the late change into earlier rows
        CHECK((a.topRows(3) - b.topRows(3)).cwiseAbs().maxCoeff() > 0.0);
        CHECK(a.cols() == 8);
    }
}

TEST_CASE("refiner: gradients through recurrence, read-out and head") {
    Rng rng(68);
    RefinerConfig rc{1, 4, false};
    ModelConfig cfg;
    cfg.d_model = 6;
    cfg.n_feat = 3;
    cfg.vocab_size = 8;
    cfg.special = SpecialTokens{2, 3, 4, 5, 6, 7, 8};
    ParamStore ps;
    add_refiner_params(ps, rng, rc, cfg.d_model);
    add_ctc_head_params(ps, rng, cfg);
    // non-zero read-out so its gradient path is informative
    ps.at("adapt.refiner.proj.w") = randn_mat(rng, rc.hidden, cfg.d_model, 0.1);
    Mat enc = randn_mat(rng, 5, cfg.d_model, 0.8);
    std::vector<int> tgt = {0, 1};

    const std::vector<std::string> checked = {"adapt.refiner.l0.fwd.wx", "adapt.refiner.l0.fwd.wh",
                                              "adapt.refiner.l0.fwd.b", "adapt.refiner.proj.w",
                                              "adapt.ctc.w", "adapt.ctc.b"};
    Session s(ps, FreezePolicy{TrainStage::adapt}, true);
    Var lp = ctc_head_log_probs(s, refine(s, rc, s.tape.constant(enc)));
    Var loss = ctc_loss_node(s.tape, lp, tgt, cfg.special.ctc_blank);
    s.tape.backward(loss);

    std::vector<Mat> inputs, analytic;
    for (const auto& name : checked) {
        inputs.push_back(ps.at(name));
        analytic.push_back(s.param_grad(name));
    }
    auto loss_fn = [&](const std::vector<Mat>& in) {
        ParamStore scratch;
        for (const auto& name : ps.names()) scratch.add(name, ps.at(name));
        for (size_t i = 0; i < checked.size(); ++i) scratch.at(checked[i]) = in[i];
        Session fs(scratch);
        Var flp = ctc_head_log_probs(fs, refine(fs, rc, fs.tape.constant(enc)));
        return ctc::loss(fs.tape.value(flp), tgt, cfg.special.ctc_blank);
    };
    auto res = gradcheck::check(loss_fn, inputs, analytic);
    INFO(res.where);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("refiner: head emits one extra no-emission class, rows normalized") {
    Rng rng(69);
    ModelConfig cfg;
    cfg.d_model = 6;
    cfg.vocab_size = 8;
    cfg.special = SpecialTokens{2, 3, 4, 5, 6, 7, 8};
    ParamStore ps;
    add_ctc_head_params(ps, rng, cfg);
    Session s(ps);
    Mat states = randn_mat(rng, 4, cfg.d_model, 1.0);
    Mat lp = s.tape.value(ctc_head_log_probs(s, s.tape.constant(states)));
    CHECK(lp.cols() == cfg.vocab_size + 1);
    for (int r = 0; r < lp.rows(); ++r)
        CHECK(lp.row(r).array().exp().sum() == Catch::Approx(1.0).margin(1e-12));
}
