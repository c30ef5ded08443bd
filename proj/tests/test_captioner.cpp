#include <doctest.h>

#include <cmath>
#include <fstream>
#include <vector>

#include "xmq/activations.hpp"
#include "xmq/captioner.hpp"
#include "xmq/util.hpp"

using namespace xmq;

namespace {

Mat random_mat(int r, int c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
    return m;
}

ModelConfig tiny_config(int vocab = 7, int feat_dim = 3) {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.context = 10;
    cfg.vocab = vocab;
    cfg.feat_dim = feat_dim;
    cfg.proto_dim = 5;
    cfg.dropout = 0.0;
    return cfg;
}

double sample_loss(const ModelParams& p, const CaptionSample& s) {
    ModelParams scratch = ModelParams::zeros_like(p);
    Rng rng(0);
    auto l = detail::sample_gradient(p, s, nullptr, 1.0, true, &rng, scratch);
    return l.ce + p.cfg.lambda_scl * l.scl;
}

}  // namespace

TEST_CASE("activation landmark values") {
    CHECK(phish(1.0) == doctest::Approx(0.6865206717).epsilon(1e-8));
    CHECK(phish(0.0) == doctest::Approx(0.0));
    CHECK(gelu(0.0) == doctest::Approx(0.0));
    // numeric derivative agreement
    for (double x : {-2.0, -0.5, 0.3, 1.7}) {
        double h = 1e-6;
        CHECK(phish_grad(x) == doctest::Approx((phish(x + h) - phish(x - h)) / (2 * h)).epsilon(1e-5));
        CHECK(gelu_grad(x) == doctest::Approx((gelu(x + h) - gelu(x - h)) / (2 * h)).epsilon(1e-5));
    }
}

TEST_CASE("layer norm on an arithmetic row") {
    Mat x(1, 3);
    x << 1, 2, 3;
    Mat g = Mat::Ones(1, 3), b = Mat::Zero(1, 3);
    Mat out = layer_norm(x, g, b, 1e-5);
    CHECK(out(0, 0) == doctest::Approx(-1.2247356859).epsilon(1e-8));
    CHECK(out(0, 1) == doctest::Approx(0.0));
    CHECK(out(0, 2) == doctest::Approx(1.2247356859).epsilon(1e-8));
    // gain/bias applied after normalization
    Mat g2 = 2.0 * Mat::Ones(1, 3), b2 = Mat::Ones(1, 3);
    Mat out2 = layer_norm(x, g2, b2, 1e-5);
    CHECK(out2(0, 2) == doctest::Approx(1.0 + 2.0 * 1.2247356859).epsilon(1e-8));
}

TEST_CASE("layer norm backward matches finite differences") {
    Rng rng(2);
    Mat x = random_mat(3, 6, rng);
    Mat gain = random_mat(1, 6, rng, 0.5);
    gain.array() += 1.0;
    Mat bias = random_mat(1, 6, rng, 0.3);
    Mat r = random_mat(3, 6, rng);  // loss = sum(out .* r)
    LayerNormCache cache;
    layer_norm(x, gain, bias, 1e-5, &cache);
    Mat dg = Mat::Zero(1, 6), db = Mat::Zero(1, 6);
    Mat dx = layer_norm_backward(r, gain, cache, dg, db);
    double h = 1e-6;
    auto loss_at = [&](const Mat& xx, const Mat& gg, const Mat& bb) {
        return (layer_norm(xx, gg, bb, 1e-5).cwiseProduct(r)).sum();
    };
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 6; ++j) {
            Mat xp = x, xm = x;
            xp(i, j) += h;
            xm(i, j) -= h;
            double num = (loss_at(xp, gain, bias) - loss_at(xm, gain, bias)) / (2 * h);
            CHECK(dx(i, j) == doctest::Approx(num).epsilon(1e-4).scale(1.0));
        }
    for (int j = 0; j < 6; ++j) {
        Mat gp = gain, gm = gain;
        gp(0, j) += h;
        gm(0, j) -= h;
        double num = (loss_at(x, gp, bias) - loss_at(x, gm, bias)) / (2 * h);
        CHECK(dg(0, j) == doctest::Approx(num).epsilon(1e-4).scale(1.0));
        Mat bp = bias, bm = bias;
        bp(0, j) += h;
        bm(0, j) -= h;
        num = (loss_at(x, bias, bp) - loss_at(x, bias, bm)) / (2 * h);
        // bias check reuses the same offsets
        CHECK(db(0, j) == doctest::Approx((loss_at(x, gain, bp) - loss_at(x, gain, bm)) / (2 * h))
                              .epsilon(1e-4)
                              .scale(1.0));
    }
}

TEST_CASE("causal attention ignores future positions") {
    Rng rng(3);
    int d = 8, heads = 2;
    Mat wq = random_mat(d, d, rng, 0.3), wk = random_mat(d, d, rng, 0.3);
    Mat wv = random_mat(d, d, rng, 0.3), wo = random_mat(d, d, rng, 0.3);
    Mat x = random_mat(4, d, rng);
    Mat out = attention(x, x, wq, wk, wv, wo, heads, true);
    Mat x2 = x;
    x2.row(3) += Mat::Ones(1, d);  // perturb the last position only
    Mat out2 = attention(x2, x2, wq, wk, wv, wo, heads, true);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < d; ++j) CHECK(out(i, j) == doctest::Approx(out2(i, j)).epsilon(1e-12));
    CHECK((out.row(3) - out2.row(3)).norm() > 1e-6);
}

TEST_CASE("attention backward matches finite differences") {
    Rng rng(4);
    int d = 8, heads = 2;
    Mat wq = random_mat(d, d, rng, 0.3), wk = random_mat(d, d, rng, 0.3);
    Mat wv = random_mat(d, d, rng, 0.3), wo = random_mat(d, d, rng, 0.3);
    Mat x = random_mat(3, d, rng);
    Mat mem = random_mat(5, d, rng);
    Mat r = random_mat(3, d, rng);
    auto loss_at = [&](const Mat& xx, const Mat& mm, const Mat& q, const Mat& k, const Mat& v,
                       const Mat& o) {
        return (attention(xx, mm, q, k, v, o, heads, false).cwiseProduct(r)).sum();
    };
    AttentionCache cache;
    attention(x, mem, wq, wk, wv, wo, heads, false, &cache);
    Mat dwq = Mat::Zero(d, d), dwk = Mat::Zero(d, d), dwv = Mat::Zero(d, d), dwo = Mat::Zero(d, d);
    Mat dmem = Mat::Zero(5, d);
    Mat dx = attention_backward(r, x, mem, wq, wk, wv, wo, heads, cache, dwq, dwk, dwv, dwo, dmem);
    double h = 1e-6;
    Rng pick(9);
    for (int trial = 0; trial < 30; ++trial) {
        int i = int(pick.below(3)), j = int(pick.below(uint64_t(d)));
        Mat xp = x, xm = x;
        xp(i, j) += h;
        xm(i, j) -= h;
        double num = (loss_at(xp, mem, wq, wk, wv, wo) - loss_at(xm, mem, wq, wk, wv, wo)) / (2 * h);
        CHECK(dx(i, j) == doctest::Approx(num).epsilon(1e-4).scale(1.0));

        int mi = int(pick.below(5));
        Mat mp = mem, mmn = mem;
        mp(mi, j) += h;
        mmn(mi, j) -= h;
        num = (loss_at(x, mp, wq, wk, wv, wo) - loss_at(x, mmn, wq, wk, wv, wo)) / (2 * h);
        CHECK(dmem(mi, j) == doctest::Approx(num).epsilon(1e-4).scale(1.0));

        int wi = int(pick.below(uint64_t(d))), wj = int(pick.below(uint64_t(d)));
        Mat qp = wq, qm = wq;
        qp(wi, wj) += h;
        qm(wi, wj) -= h;
        num = (loss_at(x, mem, qp, wk, wv, wo) - loss_at(x, mem, qm, wk, wv, wo)) / (2 * h);
        CHECK(dwq(wi, wj) == doctest::Approx(num).epsilon(1e-4).scale(1.0));
        Mat op = wo, om = wo;
        op(wi, wj) += h;
        om(wi, wj) -= h;
        num = (loss_at(x, mem, wq, wk, wv, op) - loss_at(x, mem, wq, wk, wv, om)) / (2 * h);
        CHECK(dwo(wi, wj) == doctest::Approx(num).epsilon(1e-4).scale(1.0));
    }
}

TEST_CASE("ffn backward matches finite differences") {
    Rng rng(5);
    int d = 6, ff = 10;
    Mat w1 = random_mat(d, ff, rng, 0.4), b1 = random_mat(1, ff, rng, 0.1);
    Mat w2 = random_mat(ff, d, rng, 0.4), b2 = random_mat(1, d, rng, 0.1);
    Mat x = random_mat(3, d, rng);
    Mat r = random_mat(3, d, rng);
    FfnCache cache;
    ffn(x, w1, b1, w2, b2, &cache);
    Mat dw1 = Mat::Zero(d, ff), db1 = Mat::Zero(1, ff), dw2 = Mat::Zero(ff, d), db2 = Mat::Zero(1, d);
    Mat dx = ffn_backward(r, x, w1, w2, cache, dw1, db1, dw2, db2);
    double h = 1e-6;
    auto loss_at = [&](const Mat& xx, const Mat& a1, const Mat& c1, const Mat& a2, const Mat& c2) {
        return (ffn(xx, a1, c1, a2, c2).cwiseProduct(r)).sum();
    };
    Rng pick(11);
    for (int trial = 0; trial < 25; ++trial) {
        int i = int(pick.below(3)), j = int(pick.below(uint64_t(d)));
        Mat xp = x, xm = x;
        xp(i, j) += h;
        xm(i, j) -= h;
        double num = (loss_at(xp, w1, b1, w2, b2) - loss_at(xm, w1, b1, w2, b2)) / (2 * h);
        CHECK(dx(i, j) == doctest::Approx(num).epsilon(1e-4).scale(1.0));
        int fi = int(pick.below(uint64_t(ff)));
        Mat p1 = w1, m1 = w1;
        p1(j, fi) += h;
        m1(j, fi) -= h;
        num = (loss_at(x, p1, b1, w2, b2) - loss_at(x, m1, b1, w2, b2)) / (2 * h);
        CHECK(dw1(j, fi) == doctest::Approx(num).epsilon(1e-4).scale(1.0));
        Mat p2 = w2, m2 = w2;
        p2(fi, j) += h;
        m2(fi, j) -= h;
        num = (loss_at(x, w1, b1, p2, b2) - loss_at(x, w1, b1, m2, b2)) / (2 * h);
        CHECK(dw2(fi, j) == doctest::Approx(num).epsilon(1e-4).scale(1.0));
    }
}

TEST_CASE("mixup blends streams and is bit-exact at v = 1") {
    Rng rng(6);
    Mat xa = random_mat(4, 5, rng), xb = random_mat(4, 5, rng);
    Mat ya = random_mat(4, 3, rng), yb = random_mat(4, 3, rng);
    Mat xo, yo;
    mixup(xa, xb, ya, yb, 1.0, xo, yo);
    CHECK(xo == xa);  // 1.0*a + 0.0*b is bitwise a
    CHECK(yo == ya);
    mixup(xa, xb, ya, yb, 0.25, xo, yo);
    CHECK(xo(1, 2) == doctest::Approx(0.25 * xa(1, 2) + 0.75 * xb(1, 2)));
    Mat bad = random_mat(3, 5, rng);
    CHECK_THROWS_AS(mixup(xa, bad, ya, yb, 0.5, xo, yo), std::invalid_argument);
}

TEST_CASE("scl loss hand arithmetic") {
    Mat g(2, 2), t(2, 2), t2(2, 2);
    g << 1, 0, 0, 0;
    t << 0, 0, 0, 0;
    t2 << 0, 1, 0, 2;
    // row0: 1 + 1, row1: 0 + 4 -> mean over rows = 3
    CHECK(scl_loss(g, t, t2) == doctest::Approx(3.0));
    Mat bad(1, 2);
    CHECK_THROWS_AS(scl_loss(bad, t, t2), std::invalid_argument);
}

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    cfg.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.vocab = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("fresh model cross-entropy starts near log vocab") {
    ModelConfig cfg = tiny_config(12, 3);
    Rng rng(21);
    ModelParams p = ModelParams::init(cfg, rng);
    Rng fr(22);
    CaptionSample s;
    s.image_feats = random_mat(2, 3, fr);
    s.tokens = {kBos, 4, 5, 6, kEos};
    ModelParams scratch = ModelParams::zeros_like(p);
    Rng dr(0);
    auto l = detail::sample_gradient(p, s, nullptr, 1.0, true, &dr, scratch);
    CHECK(l.ce == doctest::Approx(std::log(12.0)).epsilon(0.05));
}

TEST_CASE("full model gradient matches finite differences") {
    ModelConfig cfg = tiny_config();
    Rng rng(31);
    ModelParams p = ModelParams::init(cfg, rng);
    Rng fr(32);
    CaptionSample s;
    s.image_feats = random_mat(2, cfg.feat_dim, fr);
    s.tokens = {kBos, 3, 4, kEos};
    s.proto_target = Eigen::RowVectorXd::LinSpaced(cfg.proto_dim, -0.5, 0.5);

    ModelParams g = ModelParams::zeros_like(p);
    Rng dr(0);
    detail::sample_gradient(p, s, nullptr, 1.0, true, &dr, g);

    double h = 1e-5;
    Rng pick(33);
    std::vector<Mat*> params, grads;
    p.visit([&](const std::string&, Mat& m) { params.push_back(&m); });
    g.visit([&](const std::string&, Mat& m) { grads.push_back(&m); });
    int checked = 0;
    for (int trial = 0; trial < 120 && checked < 60; ++trial) {
        size_t ti = pick.below(params.size());
        Mat& w = *params[ti];
        if (w.size() == 0) continue;
        int i = int(pick.below(uint64_t(w.rows()))), j = int(pick.below(uint64_t(w.cols())));
        double orig = w(i, j);
        w(i, j) = orig + h;
        double lp = sample_loss(p, s);
        w(i, j) = orig - h;
        double lm = sample_loss(p, s);
        w(i, j) = orig;
        double num = (lp - lm) / (2 * h);
        CHECK((*grads[ti])(i, j) == doctest::Approx(num).epsilon(1e-3).scale(1.0));
        ++checked;
    }
    CHECK(checked >= 60);
}

TEST_CASE("forward probabilities are rowwise distributions") {
    ModelConfig cfg = tiny_config();
    Rng rng(41);
    ModelParams p = ModelParams::init(cfg, rng);
    Rng fr(42);
    CaptionSample s;
    s.image_feats = random_mat(2, cfg.feat_dim, fr);
    s.tokens = {kBos, 3, kEos};
    Mat probs = forward(p, s);
    CHECK(probs.rows() == 5);  // 2 prefix + 3 text positions
    CHECK(probs.cols() == cfg.vocab);
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        CHECK(probs.row(r).sum() == doctest::Approx(1.0));
        CHECK(probs.row(r).minCoeff() >= 0.0);
    }
}

TEST_CASE("over-length sequences are truncated to the context") {
    ModelConfig cfg = tiny_config();
    Rng rng(43);
    ModelParams p = ModelParams::init(cfg, rng);
    Rng fr(44);
    CaptionSample s;
    s.image_feats = random_mat(4, cfg.feat_dim, fr);
    s.tokens = std::vector<int>(20, 3);  // 4 + 20 > context 10
    Mat probs = forward(p, s);
    CHECK(probs.rows() == cfg.context);
    // prefix alone over the context is an error
    CaptionSample bad;
    bad.image_feats = random_mat(cfg.context, cfg.feat_dim, fr);
    bad.tokens = {kBos};
    CHECK_THROWS_AS(forward(p, bad), std::invalid_argument);
}

TEST_CASE("training overfits two samples and decoding reproduces them") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.context = 12;
    cfg.vocab = 8;
    cfg.feat_dim = 2;
    cfg.proto_dim = 4;
    cfg.dropout = 0.0;
    cfg.lambda_scl = 0.1;
    Rng rng(51);
    ModelParams p = ModelParams::init(cfg, rng);

    Mat fa(1, 2), fb(1, 2);
    fa << 1.0, 0.0;
    fb << 0.0, 1.0;
    CaptionSample a{fa, {kBos, 3, 4, kEos}, Eigen::RowVectorXd::Zero(4)};
    CaptionSample b{fb, {kBos, 5, 6, kEos}, Eigen::RowVectorXd::Ones(4)};

    TrainConfig tc;
    tc.epochs = 200;
    tc.batch = 2;
    tc.lr = 0.05;
    tc.mixup_enabled = false;
    tc.seed = 5;
    TrainResult res = train(p, {a, b}, tc);
    REQUIRE(res.loss_trace.size() == 200);
    CHECK(res.loss_trace.back() < res.loss_trace.front() * 0.2);
    CHECK(generate_caption(p, fa) == std::vector<int>{3, 4});
    CHECK(generate_caption(p, fb) == std::vector<int>{5, 6});
}

TEST_CASE("training is seed-deterministic with mixup and dropout on") {
    ModelConfig cfg = tiny_config();
    cfg.dropout = 0.1;
    cfg.mixup_beta = 0.2;
    auto run = [&]() {
        Rng rng(61);
        ModelParams p = ModelParams::init(cfg, rng);
        Rng fr(62);
        CaptionSample a{random_mat(2, cfg.feat_dim, fr), {kBos, 3, 4, kEos}, {}};
        CaptionSample b{random_mat(2, cfg.feat_dim, fr), {kBos, 5, 3, kEos}, {}};
        TrainConfig tc;
        tc.epochs = 4;
        tc.batch = 2;
        tc.seed = 63;
        train(p, {a, b}, tc);
        return p.out_w;
    };
    Mat w1 = run(), w2 = run();
    CHECK(w1 == w2);
}

TEST_CASE("zsl predict balances probability and prototype distance") {
    ModelConfig cfg = tiny_config();
    Rng rng(71);
    ModelParams p = ModelParams::init(cfg, rng);
    Rng fr(72);
    CaptionSample s;
    s.image_feats = random_mat(2, cfg.feat_dim, fr);
    s.tokens = {kBos, 3};

    Eigen::RowVectorXd gen = generated_representation(p, s);
    ClassPrototypes protos;
    protos.names = {"match", "far"};
    protos.vectors = {gen, gen + 10.0 * Eigen::RowVectorXd::Ones(cfg.proto_dim)};
    protos.vocab_id = {-1, -1};  // head-absent: equal log-uniform term
    CHECK(zsl_predict(p, protos, s) == 0);

    // with lambda 0 only the head probability matters
    ModelParams p0 = p;
    p0.cfg.lambda_scl = 0.0;
    Mat probs = forward(p0, s);
    Eigen::RowVectorXd last = probs.row(probs.rows() - 1);
    ClassPrototypes head;
    head.names = {"tok3", "tok4"};
    head.vectors = {gen + 5.0 * Eigen::RowVectorXd::Ones(cfg.proto_dim), gen};
    head.vocab_id = {3, 4};
    int expect = last(3) >= last(4) ? 0 : 1;
    CHECK(zsl_predict(p0, head, s) == expect);
    CHECK_THROWS_AS(zsl_predict(p, ClassPrototypes{}, s), std::invalid_argument);
}

TEST_CASE("model checkpoint round-trips") {
    ModelConfig cfg = tiny_config();
    Rng rng(81);
    ModelParams p = ModelParams::init(cfg, rng);
    save_model(p, "cap_roundtrip.bin");
    ModelParams q = load_model("cap_roundtrip.bin");
    CHECK(q.cfg.d_model == cfg.d_model);
    CHECK(q.cfg.vocab == cfg.vocab);
    CHECK(q.cfg.proto_dim == cfg.proto_dim);
    std::vector<Mat*> pa, qa;
    p.visit([&](const std::string&, Mat& m) { pa.push_back(&m); });
    q.visit([&](const std::string&, Mat& m) { qa.push_back(&m); });
    REQUIRE(pa.size() == qa.size());
    for (size_t k = 0; k < pa.size(); ++k) {
        REQUIRE(pa[k]->rows() == qa[k]->rows());
        for (Eigen::Index i = 0; i < pa[k]->rows(); ++i)
            for (Eigen::Index j = 0; j < pa[k]->cols(); ++j)
                CHECK((*qa[k])(i, j) == doctest::Approx((*pa[k])(i, j)).epsilon(1e-6));
    }
    // same image features decode identically after reload
    Rng fr(82);
    Mat feats = random_mat(2, cfg.feat_dim, fr);
    CHECK(generate_caption(p, feats) == generate_caption(q, feats));

    std::ofstream bad("cap_bad.bin", std::ios::binary);
    bad << "NOPE";
    bad.close();
    CHECK_THROWS_AS(load_model("cap_bad.bin"), std::runtime_error);
}
