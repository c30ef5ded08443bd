#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "xmq/activations.hpp"
#include "xmq/util.hpp"

namespace xmq {

using Mat = Eigen::MatrixXd;

struct ModelConfig {
    int d_model = 64;
    int heads = 4;
    int blocks = 2;
    int context = 32;
    int vocab = 0;     // corpus tokens + PAD/BOS/EOS
    int feat_dim = 0;  // per-position image feature width
    int proto_dim = 64;
    double dropout = 0.1;
    double mixup_beta = 0.2;  // Beta parameter; <= 0 forces v = 1
    double lambda_scl = 1.0;
    double eps = 1e-5;

    int d_ff() const { return 4 * d_model; }
    int d_head() const { return d_model / heads; }

    void validate() const {
        if (d_model % heads != 0) throw std::invalid_argument("d_model must divide by heads");
        if (context < 2) throw std::invalid_argument("context must be >= 2");
        if (vocab < 4 || feat_dim < 1) throw std::invalid_argument("vocab/feat_dim unset");
    }
};

// Special token ids.
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;

struct BlockParams {
    Mat ln1_g, ln1_b;
    Mat wq, wk, wv, wo;  // self-attention
    Mat ln2_g, ln2_b;
    Mat cq, ck, cv, co;  // cross-attention
    Mat ln3_g, ln3_b;
    Mat w1, b1, w2, b2;  // FFN with Phish
};

struct ModelParams {
    ModelConfig cfg;
    Mat tok_emb;         // vocab x d
    Mat pos_emb;         // context x d
    Mat img_w, img_b;    // feat_dim x d, 1 x d
    std::vector<BlockParams> blocks;
    Mat lnf_g, lnf_b;
    Mat out_w, out_b;    // d x vocab, 1 x vocab
    Mat proto_w, proto_b;  // d x proto_dim, 1 x proto_dim

    template <typename F>
    void visit(F&& fn) {
        fn("tok_emb", tok_emb);
        fn("pos_emb", pos_emb);
        fn("img_w", img_w);
        fn("img_b", img_b);
        for (size_t i = 0; i < blocks.size(); ++i) {
            std::string p = "block" + std::to_string(i) + ".";
            BlockParams& b = blocks[i];
            fn(p + "ln1_g", b.ln1_g);
            fn(p + "ln1_b", b.ln1_b);
            fn(p + "wq", b.wq);
            fn(p + "wk", b.wk);
            fn(p + "wv", b.wv);
            fn(p + "wo", b.wo);
            fn(p + "ln2_g", b.ln2_g);
            fn(p + "ln2_b", b.ln2_b);
            fn(p + "cq", b.cq);
            fn(p + "ck", b.ck);
            fn(p + "cv", b.cv);
            fn(p + "co", b.co);
            fn(p + "ln3_g", b.ln3_g);
            fn(p + "ln3_b", b.ln3_b);
            fn(p + "w1", b.w1);
            fn(p + "b1", b.b1);
            fn(p + "w2", b.w2);
            fn(p + "b2", b.b2);
        }
        fn("lnf_g", lnf_g);
        fn("lnf_b", lnf_b);
        fn("out_w", out_w);
        fn("out_b", out_b);
        fn("proto_w", proto_w);
        fn("proto_b", proto_b);
    }

    static ModelParams init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        ModelParams p;
        p.cfg = cfg;
        int d = cfg.d_model;
        auto randm = [&](int r, int c, double scale) {
            Mat m(r, c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
            return m;
        };
        double s = 0.02;
        p.tok_emb = randm(cfg.vocab, d, s);
        p.pos_emb = randm(cfg.context, d, s);
        p.img_w = randm(cfg.feat_dim, d, s);
        p.img_b = Mat::Zero(1, d);
        for (int bi = 0; bi < cfg.blocks; ++bi) {
            BlockParams b;
            b.ln1_g = Mat::Ones(1, d);
            b.ln1_b = Mat::Zero(1, d);
            b.wq = randm(d, d, s);
            b.wk = randm(d, d, s);
            b.wv = randm(d, d, s);
            b.wo = randm(d, d, s);
            b.ln2_g = Mat::Ones(1, d);
            b.ln2_b = Mat::Zero(1, d);
            b.cq = randm(d, d, s);
            b.ck = randm(d, d, s);
            b.cv = randm(d, d, s);
            b.co = randm(d, d, s);
            b.ln3_g = Mat::Ones(1, d);
            b.ln3_b = Mat::Zero(1, d);
            b.w1 = randm(d, cfg.d_ff(), s);
            b.b1 = Mat::Zero(1, cfg.d_ff());
            b.w2 = randm(cfg.d_ff(), d, s);
            b.b2 = Mat::Zero(1, d);
            p.blocks.push_back(std::move(b));
        }
        p.lnf_g = Mat::Ones(1, d);
        p.lnf_b = Mat::Zero(1, d);
        p.out_w = randm(d, cfg.vocab, s);
        p.out_b = Mat::Zero(1, cfg.vocab);
        p.proto_w = randm(d, cfg.proto_dim, s);
        p.proto_b = Mat::Zero(1, cfg.proto_dim);
        return p;
    }

    static ModelParams zeros_like(const ModelParams& other) {
        ModelParams g = other;
        g.visit([](const std::string&, Mat& m) { m.setZero(); });
        return g;
    }
};

// --------------------------------------------------------------------------
// Primitive layers (forward + backward).

struct LayerNormCache {
    Mat x_hat;
    Eigen::VectorXd inv_std;
};

// Per-row normalization with gain and bias.
inline Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps,
                      LayerNormCache* cache = nullptr) {
    Mat out(x.rows(), x.cols());
    Mat x_hat(x.rows(), x.cols());
    Eigen::VectorXd inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mu = x.row(r).mean();
        double var = (x.row(r).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_std(r) = is;
        x_hat.row(r) = (x.row(r).array() - mu) * is;
        out.row(r) = x_hat.row(r).cwiseProduct(gain.row(0)) + bias.row(0);
    }
    if (cache) {
        cache->x_hat = x_hat;
        cache->inv_std = inv_std;
    }
    return out;
}

inline Mat layer_norm_backward(const Mat& d_out, const Mat& gain, const LayerNormCache& cache,
                               Mat& d_gain, Mat& d_bias) {
    Mat dx(d_out.rows(), d_out.cols());
    double n = double(d_out.cols());
    for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
        Eigen::RowVectorXd dxhat = d_out.row(r).cwiseProduct(gain.row(0));
        double sum_dxhat = dxhat.sum();
        double sum_dxhat_xhat = dxhat.cwiseProduct(cache.x_hat.row(r)).sum();
        dx.row(r) = (dxhat.array() - sum_dxhat / n -
                     cache.x_hat.row(r).array() * sum_dxhat_xhat / n) *
                    cache.inv_std(r);
        d_gain.row(0) += d_out.row(r).cwiseProduct(cache.x_hat.row(r));
        d_bias.row(0) += d_out.row(r);
    }
    return dx;
}

struct AttentionCache {
    Mat q, k, v;                  // T x d (or M x d for keys/values)
    std::vector<Mat> softmax;     // per head, Tq x Tk
    Mat concat;                   // Tq x d, pre-Wo
};

// Multi-head scaled dot-product attention. Queries come from `x`, keys and
// values from `mem` (== x for self-attention). causal masks future positions.
inline Mat attention(const Mat& x, const Mat& mem, const Mat& wq, const Mat& wk, const Mat& wv,
                     const Mat& wo, int heads, bool causal, AttentionCache* cache = nullptr) {
    if (x.cols() != wq.rows() || mem.cols() != wk.rows())
        throw std::invalid_argument("attention: dimension mismatch");
    int d = int(x.cols());
    int dh = d / heads;
    Mat q = x * wq, k = mem * wk, v = mem * wv;
    Mat concat(x.rows(), d);
    std::vector<Mat> softmaxes;
    for (int h = 0; h < heads; ++h) {
        Mat qh = q.middleCols(h * dh, dh);
        Mat kh = k.middleCols(h * dh, dh);
        Mat vh = v.middleCols(h * dh, dh);
        Mat scores = qh * kh.transpose() / std::sqrt(double(dh));
        if (causal)
            for (Eigen::Index i = 0; i < scores.rows(); ++i)
                for (Eigen::Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = -1e30;
        Mat a(scores.rows(), scores.cols());
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            double mx = scores.row(i).maxCoeff();
            Eigen::RowVectorXd e = (scores.row(i).array() - mx).exp();
            a.row(i) = e / e.sum();
        }
        concat.middleCols(h * dh, dh) = a * vh;
        softmaxes.push_back(std::move(a));
    }
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->softmax = softmaxes;
        cache->concat = concat;
    }
    return concat * wo;
}

// Backward pass; returns gradient wrt x and accumulates into d_mem and the
// weight gradients.
inline Mat attention_backward(const Mat& d_out, const Mat& x, const Mat& mem, const Mat& wq,
                              const Mat& wk, const Mat& wv, const Mat& wo, int heads,
                              const AttentionCache& c, Mat& d_wq, Mat& d_wk, Mat& d_wv, Mat& d_wo,
                              Mat& d_mem) {
    int d = int(x.cols());
    int dh = d / heads;
    d_wo += c.concat.transpose() * d_out;
    Mat d_concat = d_out * wo.transpose();
    Mat dq = Mat::Zero(c.q.rows(), d), dk = Mat::Zero(c.k.rows(), d), dv = Mat::Zero(c.v.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const Mat& a = c.softmax[size_t(h)];
        Mat d_oh = d_concat.middleCols(h * dh, dh);
        Mat vh = c.v.middleCols(h * dh, dh);
        Mat da = d_oh * vh.transpose();
        dv.middleCols(h * dh, dh) += a.transpose() * d_oh;
        // softmax rows backward
        Mat ds(a.rows(), a.cols());
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            double dot = da.row(i).cwiseProduct(a.row(i)).sum();
            ds.row(i) = (a.row(i).array() * (da.row(i).array() - dot)).matrix();
        }
        ds /= std::sqrt(double(dh));
        dq.middleCols(h * dh, dh) += ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) += ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    d_wq += x.transpose() * dq;
    d_wk += mem.transpose() * dk;
    d_wv += mem.transpose() * dv;
    d_mem += dk * wk.transpose() + dv * wv.transpose();
    return dq * wq.transpose();
}

struct FfnCache {
    Mat pre;  // x*w1 + b1
    Mat act;  // phish(pre)
};

inline Mat ffn(const Mat& x, const Mat& w1, const Mat& b1, const Mat& w2, const Mat& b2,
               FfnCache* cache = nullptr) {
    Mat pre = (x * w1).rowwise() + b1.row(0);
    Mat act = pre.unaryExpr([](double v) { return phish(v); });
    if (cache) {
        cache->pre = pre;
        cache->act = act;
    }
    return (act * w2).rowwise() + b2.row(0);
}

inline Mat ffn_backward(const Mat& d_out, const Mat& x, const Mat& w1, const Mat& w2,
                        const FfnCache& c, Mat& d_w1, Mat& d_b1, Mat& d_w2, Mat& d_b2) {
    d_w2 += c.act.transpose() * d_out;
    d_b2.row(0) += d_out.colwise().sum();
    Mat d_act = d_out * w2.transpose();
    Mat d_pre = d_act.cwiseProduct(c.pre.unaryExpr([](double v) { return phish_grad(v); }));
    d_w1 += x.transpose() * d_pre;
    d_b1.row(0) += d_pre.colwise().sum();
    return d_pre * w1.transpose();
}

// Convex blend of two equally-shaped streams and their label rows.
inline void mixup(const Mat& xa, const Mat& xb, const Mat& ya, const Mat& yb, double v, Mat& x_out,
                  Mat& y_out) {
    if (xa.rows() != xb.rows() || xa.cols() != xb.cols() || ya.rows() != yb.rows() ||
        ya.cols() != yb.cols())
        throw std::invalid_argument("mixup: shape mismatch");
    x_out = v * xa + (1.0 - v) * xb;
    y_out = v * ya + (1.0 - v) * yb;
}

// Semantic consistency loss of Eq-style squared alignment terms.
inline double scl_loss(const Mat& generated, const Mat& target, const Mat& target2) {
    if (generated.rows() != target.rows() || generated.cols() != target.cols() ||
        target2.rows() != target.rows() || target2.cols() != target.cols())
        throw std::invalid_argument("scl_loss: dimension mismatch");
    double n = double(generated.rows());
    double loss = 0;
    for (Eigen::Index r = 0; r < generated.rows(); ++r) {
        loss += (generated.row(r) - target.row(r)).squaredNorm();
        loss += (target2.row(r) - target.row(r)).squaredNorm();
    }
    return loss / n;
}

// --------------------------------------------------------------------------
// Full model forward/backward.

// One training/inference sample: an image-feature sequence plus text tokens.
struct CaptionSample {
    Mat image_feats;          // M x feat_dim rows, prepended as prefix and used
                              // as the cross-attention memory
    std::vector<int> tokens;  // BOS ... EOS
    Eigen::RowVectorXd proto_target;  // T-tilde; size 0 disables the SCL term
};

namespace detail {

struct BlockCache {
    LayerNormCache ln1, ln2, ln3;
    AttentionCache self_attn, cross_attn;
    FfnCache ffn;
    Mat x_in, ln1_out, x_after_self, ln2_out, x_after_cross, ln3_out;
    Mat ffn_drop_mask;
};

struct ForwardCache {
    Mat embedded;   // before dropout/mixup
    Mat stream;     // block input after dropout (and mixup when active)
    Mat mem;        // projected image features
    Mat emb_drop_mask;
    std::vector<BlockCache> blocks;
    LayerNormCache lnf;
    Mat final_hidden;  // after final norm
    Mat logits;
    Mat probs;
    int prefix_len = 0;
    int text_len = 0;
};

// Embedding: projected image prefix + token embeddings + positions.
inline Mat embed_sequence(const ModelParams& p, const std::vector<int>& tokens,
                          const Mat& image_feats, int* prefix_len) {
    int m = int(image_feats.rows());
    int t = int(tokens.size());
    int total = m + t;
    if (total > p.cfg.context) {
        // over-length input: truncate text to fit
        t = p.cfg.context - m;
        if (t < 1) throw std::invalid_argument("embed: image prefix exceeds context");
        total = p.cfg.context;
    }
    Mat seq(total, p.cfg.d_model);
    if (m > 0) seq.topRows(m) = (image_feats * p.img_w).rowwise() + p.img_b.row(0);
    for (int i = 0; i < t; ++i) seq.row(m + i) = p.tok_emb.row(tokens[size_t(i)]);
    for (int i = 0; i < total; ++i) seq.row(i) += p.pos_emb.row(i);
    *prefix_len = m;
    return seq;
}

inline Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    Mat m(rows, cols);
    double keep = 1.0 - rate;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j)
            m(i, j) = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return m;
}

// Blocks + final norm + output head, from an already-embedded stream.
inline void run_blocks(const ModelParams& p, ForwardCache& fc, bool training, Rng* rng) {
    Mat x = fc.stream;
    fc.blocks.resize(p.blocks.size());
    for (size_t bi = 0; bi < p.blocks.size(); ++bi) {
        const BlockParams& b = p.blocks[bi];
        BlockCache& bc = fc.blocks[bi];
        bc.x_in = x;
        bc.ln1_out = layer_norm(x, b.ln1_g, b.ln1_b, p.cfg.eps, &bc.ln1);
        x = x + attention(bc.ln1_out, bc.ln1_out, b.wq, b.wk, b.wv, b.wo, p.cfg.heads, true,
                          &bc.self_attn);
        bc.x_after_self = x;
        bc.ln2_out = layer_norm(x, b.ln2_g, b.ln2_b, p.cfg.eps, &bc.ln2);
        x = x + attention(bc.ln2_out, fc.mem, b.cq, b.ck, b.cv, b.co, p.cfg.heads, false,
                          &bc.cross_attn);
        bc.x_after_cross = x;
        bc.ln3_out = layer_norm(x, b.ln3_g, b.ln3_b, p.cfg.eps, &bc.ln3);
        Mat f = ffn(bc.ln3_out, b.w1, b.b1, b.w2, b.b2, &bc.ffn);
        if (training && p.cfg.dropout > 0) {
            bc.ffn_drop_mask = dropout_mask(f.rows(), f.cols(), p.cfg.dropout, *rng);
            f = f.cwiseProduct(bc.ffn_drop_mask);
        }
        x = x + f;
    }
    fc.final_hidden = layer_norm(x, p.lnf_g, p.lnf_b, p.cfg.eps, &fc.lnf);
    fc.logits = (fc.final_hidden * p.out_w).rowwise() + p.out_b.row(0);
    fc.probs.resize(fc.logits.rows(), fc.logits.cols());
    for (Eigen::Index r = 0; r < fc.logits.rows(); ++r) {
        double mx = fc.logits.row(r).maxCoeff();
        Eigen::RowVectorXd e = (fc.logits.row(r).array() - mx).exp();
        fc.probs.row(r) = e / e.sum();
    }
}

inline ForwardCache forward_pass(const ModelParams& p, const CaptionSample& s, bool training,
                                 Rng* rng) {
    ForwardCache fc;
    fc.embedded = embed_sequence(p, s.tokens, s.image_feats, &fc.prefix_len);
    fc.text_len = int(fc.embedded.rows()) - fc.prefix_len;
    fc.mem = (s.image_feats * p.img_w).rowwise() + p.img_b.row(0);
    if (training && p.cfg.dropout > 0) {
        fc.emb_drop_mask = dropout_mask(fc.embedded.rows(), fc.embedded.cols(), p.cfg.dropout, *rng);
        fc.stream = fc.embedded.cwiseProduct(fc.emb_drop_mask);
    } else {
        fc.stream = fc.embedded;
    }
    run_blocks(p, fc, training, rng);
    return fc;
}

// Backward through blocks given d(final pre-norm input) assembled from the
// logits and SCL paths. d_stream is returned; weight grads accumulate in g.
inline Mat run_blocks_backward(const ModelParams& p, const ForwardCache& fc, const Mat& d_logits,
                               const Mat& d_final_hidden_extra, ModelParams& g, Mat& d_mem) {
    g.out_w += fc.final_hidden.transpose() * d_logits;
    g.out_b.row(0) += d_logits.colwise().sum();
    Mat d_final = d_logits * p.out_w.transpose() + d_final_hidden_extra;
    Mat dx = layer_norm_backward(d_final, p.lnf_g, fc.lnf, g.lnf_g, g.lnf_b);
    for (int bi = int(p.blocks.size()) - 1; bi >= 0; --bi) {
        const BlockParams& b = p.blocks[size_t(bi)];
        const BlockCache& bc = fc.blocks[size_t(bi)];
        BlockParams& gb = g.blocks[size_t(bi)];
        // ffn sublayer
        Mat d_f = dx;
        if (bc.ffn_drop_mask.size() > 0) d_f = d_f.cwiseProduct(bc.ffn_drop_mask);
        Mat d_ln3 = ffn_backward(d_f, bc.ln3_out, b.w1, b.w2, bc.ffn, gb.w1, gb.b1, gb.w2, gb.b2);
        Mat d_after_cross = dx + layer_norm_backward(d_ln3, b.ln3_g, bc.ln3, gb.ln3_g, gb.ln3_b);
        // cross-attention sublayer
        Mat d_ln2 = attention_backward(d_after_cross, bc.ln2_out, fc.mem, b.cq, b.ck, b.cv, b.co,
                                       p.cfg.heads, bc.cross_attn, gb.cq, gb.ck, gb.cv, gb.co,
                                       d_mem);
        Mat d_after_self =
            d_after_cross + layer_norm_backward(d_ln2, b.ln2_g, bc.ln2, gb.ln2_g, gb.ln2_b);
        // self-attention sublayer
        Mat d_self_mem = Mat::Zero(bc.ln1_out.rows(), bc.ln1_out.cols());
        Mat d_ln1 = attention_backward(d_after_self, bc.ln1_out, bc.ln1_out, b.wq, b.wk, b.wv,
                                       b.wo, p.cfg.heads, bc.self_attn, gb.wq, gb.wk, gb.wv,
                                       gb.wo, d_self_mem);
        d_ln1 += d_self_mem;
        dx = d_after_self + layer_norm_backward(d_ln1, b.ln1_g, bc.ln1, gb.ln1_g, gb.ln1_b);
    }
    return dx;
}

}  // namespace detail

// Forward pass producing next-token distributions for the text positions.
inline Mat forward(const ModelParams& p, const CaptionSample& s) {
    detail::ForwardCache fc = detail::forward_pass(p, s, false, nullptr);
    return fc.probs;
}

// Pooled hidden state projected into prototype space (G-tilde).
inline Eigen::RowVectorXd generated_representation(const ModelParams& p, const CaptionSample& s) {
    detail::ForwardCache fc = detail::forward_pass(p, s, false, nullptr);
    Eigen::RowVectorXd pooled = fc.final_hidden.colwise().mean();
    return pooled * p.proto_w + p.proto_b.row(0);
}

// --------------------------------------------------------------------------
// Training.

struct TrainConfig {
    int epochs = 30;
    int batch = 16;
    double lr = 0.05;
    double momentum = 0.9;
    double grad_clip = 1.0;  // global norm
    bool mixup_enabled = true;
    uint64_t seed = 42;
};

// Per-sample loss + gradient. Mixup blends the embedded stream and the
// one-hot targets of two samples with the same shape.
namespace detail {

struct SampleLoss {
    double ce = 0;
    double scl = 0;
};

inline SampleLoss sample_gradient(const ModelParams& p, const CaptionSample& a,
                                  const CaptionSample* b, double mix_v, bool training, Rng* rng,
                                  ModelParams& g) {
    ForwardCache fc = forward_pass(p, a, training, rng);
    int m = fc.prefix_len, t = fc.text_len;

    // soft targets over text positions predicting the next token
    Mat targets = Mat::Zero(fc.embedded.rows(), p.cfg.vocab);
    int n_pred = 0;
    for (int i = 0; i + 1 < t; ++i) {
        targets(m + i, a.tokens[size_t(i + 1)]) = 1.0;
        ++n_pred;
    }

    ForwardCache fcb;
    if (b) {
        // re-embed b, blend streams and labels, re-run the blocks
        fcb = fc;
        int mb = 0;
        Mat emb_b = embed_sequence(p, b->tokens, b->image_feats, &mb);
        if (emb_b.rows() == fc.embedded.rows() && mb == m) {
            Mat tb = Mat::Zero(emb_b.rows(), p.cfg.vocab);
            for (int i = 0; i + 1 < int(emb_b.rows()) - mb; ++i)
                tb(mb + i, b->tokens[size_t(i + 1)]) = 1.0;
            Mat mixed_stream, mixed_targets;
            Mat stream_b = fc.emb_drop_mask.size() > 0 ? emb_b.cwiseProduct(fc.emb_drop_mask)
                                                       : emb_b;
            mixup(fc.stream, stream_b, targets, tb, mix_v, mixed_stream, mixed_targets);
            fc.stream = mixed_stream;
            targets = mixed_targets;
            run_blocks(p, fc, training, rng);
        }
    }

    SampleLoss loss;
    Mat d_logits = Mat::Zero(fc.logits.rows(), fc.logits.cols());
    if (n_pred > 0) {
        for (int i = 0; i < int(fc.logits.rows()); ++i) {
            if (targets.row(i).sum() <= 0) continue;
            for (int v = 0; v < p.cfg.vocab; ++v)
                if (targets(i, v) > 0)
                    loss.ce -= targets(i, v) * std::log(std::max(fc.probs(i, v), 1e-12));
            d_logits.row(i) = (fc.probs.row(i) - targets.row(i)) / double(n_pred);
        }
        loss.ce /= double(n_pred);
    }

    // SCL term on the pooled projection
    Mat d_final_extra = Mat::Zero(fc.final_hidden.rows(), fc.final_hidden.cols());
    if (a.proto_target.size() > 0 && p.cfg.lambda_scl > 0) {
        Eigen::RowVectorXd pooled = fc.final_hidden.colwise().mean();
        Eigen::RowVectorXd gen = pooled * p.proto_w + p.proto_b.row(0);
        Eigen::RowVectorXd diff = gen - a.proto_target;
        loss.scl = diff.squaredNorm();
        Eigen::RowVectorXd d_gen = 2.0 * p.cfg.lambda_scl * diff;
        g.proto_w += pooled.transpose() * d_gen;
        g.proto_b.row(0) += d_gen;
        Eigen::RowVectorXd d_pooled = d_gen * p.proto_w.transpose();
        for (Eigen::Index r = 0; r < d_final_extra.rows(); ++r)
            d_final_extra.row(r) = d_pooled / double(fc.final_hidden.rows());
    }

    Mat d_mem = Mat::Zero(fc.mem.rows(), fc.mem.cols());
    Mat d_stream = run_blocks_backward(p, fc, d_logits, d_final_extra, g, d_mem);

    // stream -> (mixup) -> dropout -> embedding
    if (b) d_stream *= mix_v;
    Mat d_embedded = fc.emb_drop_mask.size() > 0 ? d_stream.cwiseProduct(fc.emb_drop_mask)
                                                 : d_stream;
    for (Eigen::Index i = 0; i < d_embedded.rows(); ++i) g.pos_emb.row(i) += d_embedded.row(i);
    for (int i = 0; i < t; ++i)
        g.tok_emb.row(a.tokens[size_t(i)]) += d_embedded.row(m + i);
    if (m > 0) {
        Mat d_prefix = d_embedded.topRows(m) + d_mem;
        g.img_w += a.image_feats.transpose() * d_prefix;
        g.img_b.row(0) += d_prefix.colwise().sum();
    }
    return loss;
}

}  // namespace detail

struct TrainResult {
    std::vector<double> loss_trace;  // per epoch
};

inline TrainResult train(ModelParams& p, const std::vector<CaptionSample>& data,
                         const TrainConfig& tc) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    Rng rng(tc.seed);
    ModelParams vel = ModelParams::zeros_like(p);
    TrainResult res;
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        double epoch_loss = 0;
        size_t n_batches = 0;
        for (size_t start = 0; start < order.size(); start += size_t(tc.batch)) {
            size_t end = std::min(order.size(), start + size_t(tc.batch));
            ModelParams g = ModelParams::zeros_like(p);
            double batch_loss = 0;
            for (size_t bi = start; bi < end; ++bi) {
                const CaptionSample& a = data[order[bi]];
                const CaptionSample* b = nullptr;
                double v = 1.0;
                if (tc.mixup_enabled) {
                    const CaptionSample& cand = data[order[(bi + 1 - start) % (end - start) + start]];
                    if (p.cfg.mixup_beta > 0) v = rng.beta(p.cfg.mixup_beta);
                    b = &cand;
                }
                auto l = detail::sample_gradient(p, a, b, v, true, &rng, g);
                batch_loss += l.ce + p.cfg.lambda_scl * l.scl;
            }
            double scale = 1.0 / double(end - start);
            double norm_sq = 0;
            g.visit([&](const std::string&, Mat& m) {
                m *= scale;
                norm_sq += m.squaredNorm();
            });
            double norm = std::sqrt(norm_sq);
            double clip = tc.grad_clip > 0 && norm > tc.grad_clip ? tc.grad_clip / norm : 1.0;

            auto it_v = &vel;
            ModelParams* pp = &p;
            // SGD with momentum
            std::vector<Mat*> pw, vw, gw;
            pp->visit([&](const std::string&, Mat& m) { pw.push_back(&m); });
            it_v->visit([&](const std::string&, Mat& m) { vw.push_back(&m); });
            g.visit([&](const std::string&, Mat& m) { gw.push_back(&m); });
            for (size_t k = 0; k < pw.size(); ++k) {
                *vw[k] = tc.momentum * (*vw[k]) - tc.lr * clip * (*gw[k]);
                *pw[k] += *vw[k];
            }
            batch_loss *= scale;
            if (!std::isfinite(batch_loss)) throw std::runtime_error("train: NaN loss");
            epoch_loss += batch_loss;
            ++n_batches;
        }
        res.loss_trace.push_back(epoch_loss / double(n_batches));
    }
    return res;
}

// --------------------------------------------------------------------------
// Decoding.

// Greedy decoding from BOS until EOS or the context limit.
inline std::vector<int> generate_caption(const ModelParams& p, const Mat& image_feats) {
    std::vector<int> tokens{kBos};
    int budget = p.cfg.context - int(image_feats.rows());
    for (int step = 0; step < budget - 1; ++step) {
        CaptionSample s{image_feats, tokens, {}};
        Mat probs = forward(p, s);
        Eigen::Index best;
        probs.row(probs.rows() - 1).maxCoeff(&best);
        if (int(best) == kEos) break;
        tokens.push_back(int(best));
    }
    return std::vector<int>(tokens.begin() + 1, tokens.end());
}

// --------------------------------------------------------------------------
// Zero-shot scoring.

struct ClassPrototypes {
    std::vector<std::string> names;
    std::vector<Eigen::RowVectorXd> vectors;
    std::vector<int> vocab_id;  // token id in the output head, -1 if absent
};

// score(class) = log P(class | input) - lambda * ||G - prototype||^2; classes
// absent from the output head take a log-uniform probability term.
inline int zsl_predict(const ModelParams& p, const ClassPrototypes& protos,
                       const CaptionSample& input) {
    if (protos.names.empty()) throw std::invalid_argument("zsl_predict: empty prototype set");
    detail::ForwardCache fc = detail::forward_pass(p, input, false, nullptr);
    Eigen::RowVectorXd pooled = fc.final_hidden.colwise().mean();
    Eigen::RowVectorXd gen = pooled * p.proto_w + p.proto_b.row(0);
    Eigen::RowVectorXd last = fc.probs.row(fc.probs.rows() - 1);
    double log_uniform = -std::log(double(protos.names.size()));
    int best = 0;
    double best_score = -1e300;
    for (size_t c = 0; c < protos.names.size(); ++c) {
        int vid = protos.vocab_id[c];
        double logp = vid >= 0 ? std::log(std::max(last(vid), 1e-12)) : log_uniform;
        double dist = (gen - protos.vectors[c]).squaredNorm();
        double score = logp - p.cfg.lambda_scl * dist;
        if (score > best_score) {
            best_score = score;
            best = int(c);
        }
    }
    return best;
}

// --------------------------------------------------------------------------
// Checkpoints: "XMQ1", version byte, JSON header, float32 payload.

inline void save_model(const ModelParams& p, const std::string& path) {
    nlohmann::json header;
    header["config"] = {{"d_model", p.cfg.d_model},   {"heads", p.cfg.heads},
                        {"blocks", p.cfg.blocks},     {"context", p.cfg.context},
                        {"vocab", p.cfg.vocab},       {"feat_dim", p.cfg.feat_dim},
                        {"proto_dim", p.cfg.proto_dim}, {"dropout", p.cfg.dropout},
                        {"mixup_beta", p.cfg.mixup_beta}, {"lambda_scl", p.cfg.lambda_scl},
                        {"eps", p.cfg.eps}};
    nlohmann::json tensors = nlohmann::json::array();
    const_cast<ModelParams&>(p).visit([&](const std::string& name, Mat& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    });
    header["tensors"] = tensors;
    std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out.write("XMQ1", 4);
    uint8_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 1);
    uint32_t hlen = uint32_t(hs.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(hs.data(), hlen);
    const_cast<ModelParams&>(p).visit([&](const std::string&, Mat& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                float f = float(m(i, j));
                out.write(reinterpret_cast<const char*>(&f), 4);
            }
    });
}

inline ModelParams load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (std::string(magic, 4) != "XMQ1") throw std::runtime_error("bad model checkpoint");
    uint8_t version;
    in.read(reinterpret_cast<char*>(&version), 1);
    uint32_t hlen;
    in.read(reinterpret_cast<char*>(&hlen), 4);
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    nlohmann::json header = nlohmann::json::parse(hs);
    ModelConfig cfg;
    auto& c = header["config"];
    cfg.d_model = c["d_model"];
    cfg.heads = c["heads"];
    cfg.blocks = c["blocks"];
    cfg.context = c["context"];
    cfg.vocab = c["vocab"];
    cfg.feat_dim = c["feat_dim"];
    cfg.proto_dim = c["proto_dim"];
    cfg.dropout = c["dropout"];
    cfg.mixup_beta = c["mixup_beta"];
    cfg.lambda_scl = c["lambda_scl"];
    cfg.eps = c["eps"];
    Rng dummy(0);
    ModelParams p = ModelParams::init(cfg, dummy);
    p.visit([&](const std::string&, Mat& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                float f;
                in.read(reinterpret_cast<char*>(&f), 4);
                m(i, j) = f;
            }
    });
    if (!in) throw std::runtime_error("truncated model checkpoint");
    return p;
}

}  // namespace xmq
