#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmq/activations.hpp"
#include "xmq/image.hpp"
#include "xmq/util.hpp"

namespace xmq {

// Box relative to its owning grid cell: center in [0,1] within the cell,
// height/width as fractions of the whole image.
struct BBox {
    double cx = 0, cy = 0;
    double h = 0, w = 0;
    double confidence = 0;
};

// Absolute pixel-space box, top-left + size.
struct AbsBox {
    double x = 0, y = 0, w = 0, h = 0;
};

struct Detection {
    AbsBox bbox;
    std::vector<double> class_probs;
    int class_id = 0;
    double score = 0;
};

struct DetectorConfig {
    int grid = 7;
    int boxes_per_cell = 2;
    int num_classes = 3;
    double nms_iou = 0.5;
    double score_floor = 0.25;
    double easom_gain = 0.5;
};

// --------------------------------------------------------------------------
// Easom function and box scaling.

inline double easom(double i, double j) {
    return -std::cos(i) * std::cos(j) * std::exp(-((i - M_PI) * (i - M_PI) + (j - M_PI) * (j - M_PI)));
}

// Box dims mapped to the Easom domain via (i,j) = 2*pi*(h,w); dims are scaled
// by S = 1 + gain*|easom| and clamped to (0,1].
inline BBox apply_easom_scaling(const BBox& box, const DetectorConfig& cfg) {
    double z = easom(2.0 * M_PI * box.h, 2.0 * M_PI * box.w);
    double s = 1.0 + cfg.easom_gain * std::fabs(z);
    BBox out = box;
    out.h = std::min(1.0, box.h * s);
    out.w = std::min(1.0, box.w * s);
    return out;
}

// --------------------------------------------------------------------------
// Softmax, IOU, NMS.

inline std::vector<double> class_probs(const std::vector<double>& raw_scores) {
    if (raw_scores.empty()) throw std::invalid_argument("class_probs: empty scores");
    double mx = *std::max_element(raw_scores.begin(), raw_scores.end());
    std::vector<double> out(raw_scores.size());
    double sum = 0;
    for (size_t i = 0; i < raw_scores.size(); ++i) {
        out[i] = std::exp(raw_scores[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

inline double iou(const AbsBox& a, const AbsBox& b) {
    if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0)
        throw std::invalid_argument("iou: zero-area box");
    double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    double inter = ix * iy;
    double uni = a.w * a.h + b.w * b.h - inter;
    return inter / uni;
}

// Greedy per-class suppression: sort by score descending, keep a detection iff
// its IOU with every already-kept same-class detection is below the threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, const DetectorConfig& cfg) {
    std::erase_if(dets, [&](const Detection& d) { return d.score < cfg.score_floor; });
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        bool suppressed = false;
        for (const Detection& k : kept)
            if (k.class_id == d.class_id && iou(k.bbox, d.bbox) >= cfg.nms_iou) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

// --------------------------------------------------------------------------
// Desk-scale backbone: two 3x3 stride-2 Phish convolutions over the grayscale
// image, then an affine head over a 3x3 cell neighborhood of backbone features.

struct DetectorModel {
    DetectorConfig cfg;
    int input_size = 0;  // grid * 4
    int c1 = 16, c2 = 32;
    std::vector<double> conv1_w, conv1_b;  // [c1][1][3][3]
    std::vector<double> conv2_w, conv2_b;  // [c2][c1][3][3]
    std::vector<double> head_w, head_b;    // [out][c2*9]

    int head_in() const { return c2 * 9; }
    int head_out() const { return cfg.boxes_per_cell * 5 + cfg.num_classes; }

    static DetectorModel zero_init(const DetectorConfig& cfg) {
        DetectorModel m;
        m.cfg = cfg;
        m.input_size = cfg.grid * 4;
        m.conv1_w.assign(size_t(m.c1) * 9, 0.0);
        m.conv1_b.assign(size_t(m.c1), 0.0);
        m.conv2_w.assign(size_t(m.c2) * m.c1 * 9, 0.0);
        m.conv2_b.assign(size_t(m.c2), 0.0);
        m.head_w.assign(size_t(m.head_out()) * m.head_in(), 0.0);
        m.head_b.assign(size_t(m.head_out()), 0.0);
        return m;
    }

    static DetectorModel random_init(const DetectorConfig& cfg, Rng& rng) {
        DetectorModel m = zero_init(cfg);
        auto fill = [&](std::vector<double>& w, int fan_in) {
            double s = std::sqrt(2.0 / fan_in);
            for (double& v : w) v = s * rng.normal();
        };
        fill(m.conv1_w, 9);
        fill(m.conv2_w, m.c1 * 9);
        fill(m.head_w, m.head_in());
        return m;
    }
};

namespace detail {

struct ConvActs {
    std::vector<double> input;            // [S][S]
    std::vector<double> pre1, act1;       // [c1][S/2][S/2]
    std::vector<double> pre2, act2;       // [c2][G][G]
    std::vector<double> head_in;          // [G*G][c2*9]
    std::vector<double> head_out;         // [G*G][out]
};

// stride-2 pad-1 3x3 convolution
inline void conv_forward(const std::vector<double>& in, int in_c, int in_s,
                         const std::vector<double>& w, const std::vector<double>& b, int out_c,
                         std::vector<double>& pre, std::vector<double>& act) {
    int out_s = in_s / 2;
    pre.assign(size_t(out_c) * out_s * out_s, 0.0);
    act.resize(pre.size());
    for (int oc = 0; oc < out_c; ++oc)
        for (int oy = 0; oy < out_s; ++oy)
            for (int ox = 0; ox < out_s; ++ox) {
                double sum = b[size_t(oc)];
                for (int ic = 0; ic < in_c; ++ic)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            int iy = 2 * oy + ky - 1, ix = 2 * ox + kx - 1;
                            if (ix < 0 || iy < 0 || ix >= in_s || iy >= in_s) continue;
                            sum += w[((size_t(oc) * in_c + ic) * 3 + ky) * 3 + kx] *
                                   in[(size_t(ic) * in_s + iy) * in_s + ix];
                        }
                size_t idx = (size_t(oc) * out_s + oy) * out_s + ox;
                pre[idx] = sum;
                act[idx] = phish(sum);
            }
}

inline void conv_backward(const std::vector<double>& in, int in_c, int in_s,
                          const std::vector<double>& w, int out_c,
                          const std::vector<double>& pre, const std::vector<double>& d_act,
                          std::vector<double>& dw, std::vector<double>& db,
                          std::vector<double>& d_in) {
    int out_s = in_s / 2;
    d_in.assign(size_t(in_c) * in_s * in_s, 0.0);
    for (int oc = 0; oc < out_c; ++oc)
        for (int oy = 0; oy < out_s; ++oy)
            for (int ox = 0; ox < out_s; ++ox) {
                size_t idx = (size_t(oc) * out_s + oy) * out_s + ox;
                double g = d_act[idx] * phish_grad(pre[idx]);
                db[size_t(oc)] += g;
                for (int ic = 0; ic < in_c; ++ic)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            int iy = 2 * oy + ky - 1, ix = 2 * ox + kx - 1;
                            if (ix < 0 || iy < 0 || ix >= in_s || iy >= in_s) continue;
                            size_t widx = ((size_t(oc) * in_c + ic) * 3 + ky) * 3 + kx;
                            size_t iidx = (size_t(ic) * in_s + iy) * in_s + ix;
                            dw[widx] += g * in[iidx];
                            d_in[iidx] += g * w[widx];
                        }
            }
}

inline ConvActs backbone_forward(const DetectorModel& m, const Image& img) {
    if (img.width != m.input_size || img.height != m.input_size)
        throw std::invalid_argument("predict_grid: wrong input size");
    ConvActs a;
    Image gray = img.gray();
    a.input.resize(size_t(m.input_size) * m.input_size);
    for (size_t i = 0; i < a.input.size(); ++i) a.input[i] = gray.data[i] / 255.0;
    conv_forward(a.input, 1, m.input_size, m.conv1_w, m.conv1_b, m.c1, a.pre1, a.act1);
    conv_forward(a.act1, m.c1, m.input_size / 2, m.conv2_w, m.conv2_b, m.c2, a.pre2, a.act2);

    int g = m.cfg.grid;
    int nin = m.head_in(), nout = m.head_out();
    a.head_in.assign(size_t(g) * g * nin, 0.0);
    a.head_out.assign(size_t(g) * g * nout, 0.0);
    for (int cy = 0; cy < g; ++cy)
        for (int cx = 0; cx < g; ++cx) {
            double* fin = a.head_in.data() + (size_t(cy) * g + cx) * nin;
            int k = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    for (int c = 0; c < m.c2; ++c, ++k) {
                        int ny = cy + dy, nx = cx + dx;
                        if (nx < 0 || ny < 0 || nx >= g || ny >= g) continue;
                        fin[k] = a.act2[(size_t(c) * g + ny) * g + nx];
                    }
            double* fout = a.head_out.data() + (size_t(cy) * g + cx) * nout;
            for (int o = 0; o < nout; ++o) {
                double sum = m.head_b[size_t(o)];
                const double* wr = m.head_w.data() + size_t(o) * nin;
                for (int i = 0; i < nin; ++i) sum += wr[i] * fin[i];
                fout[o] = sum;
            }
        }
    return a;
}

}  // namespace detail

// Per-cell raw predictions: sigmoid-squashed boxes plus raw class scores.
struct CellPrediction {
    std::vector<BBox> boxes;
    std::vector<double> class_scores;
};

inline std::vector<CellPrediction> predict_grid(const DetectorModel& m, const Image& img) {
    detail::ConvActs a = detail::backbone_forward(m, img);
    int g = m.cfg.grid, nout = m.head_out();
    std::vector<CellPrediction> cells(size_t(g) * g);
    for (int ci = 0; ci < g * g; ++ci) {
        const double* z = a.head_out.data() + size_t(ci) * nout;
        CellPrediction& cp = cells[size_t(ci)];
        for (int r = 0; r < m.cfg.boxes_per_cell; ++r) {
            const double* t = z + r * 5;
            BBox b;
            b.cx = sigmoid(t[0]);
            b.cy = sigmoid(t[1]);
            b.h = sigmoid(t[2]);
            b.w = sigmoid(t[3]);
            b.confidence = sigmoid(t[4]);
            cp.boxes.push_back(b);
        }
        cp.class_scores.assign(z + m.cfg.boxes_per_cell * 5, z + nout);
    }
    return cells;
}

// Cell-relative box -> absolute pixel box for an img_w x img_h image.
inline AbsBox to_absolute(const BBox& b, int cell_x, int cell_y, int grid, int img_w, int img_h) {
    double cx = (cell_x + b.cx) / grid * img_w;
    double cy = (cell_y + b.cy) / grid * img_h;
    double w = b.w * img_w, h = b.h * img_h;
    return {cx - w / 2, cy - h / 2, w, h};
}

struct DetectResult {
    std::vector<Detection> detections;
    std::vector<Image> crops;
};

inline DetectResult detect(const DetectorModel& m, const Image& img, const DetectorConfig& cfg) {
    if (img.width != m.input_size || img.height != m.input_size)
        throw std::invalid_argument("detect: image size does not match model input");
    std::vector<Detection> all;
    auto cells = predict_grid(m, img);
    int g = cfg.grid;
    for (int cy = 0; cy < g; ++cy)
        for (int cx = 0; cx < g; ++cx) {
            const CellPrediction& cp = cells[size_t(cy) * g + cx];
            std::vector<double> probs = class_probs(cp.class_scores);
            for (const BBox& raw : cp.boxes) {
                BBox scaled = apply_easom_scaling(raw, cfg);
                Detection d;
                d.class_probs = probs;
                d.class_id = int(std::max_element(probs.begin(), probs.end()) - probs.begin());
                d.score = scaled.confidence * probs[size_t(d.class_id)];
                d.bbox = to_absolute(scaled, cx, cy, g, img.width, img.height);
                all.push_back(d);
            }
        }
    DetectResult res;
    res.detections = nms(std::move(all), cfg);
    for (const Detection& d : res.detections) {
        int x0 = std::clamp(int(d.bbox.x), 0, img.width - 1);
        int y0 = std::clamp(int(d.bbox.y), 0, img.height - 1);
        int x1 = std::clamp(int(d.bbox.x + d.bbox.w + 0.5), x0 + 1, img.width);
        int y1 = std::clamp(int(d.bbox.y + d.bbox.h + 0.5), y0 + 1, img.height);
        Image crop(x1 - x0, y1 - y0, img.channels);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                for (int c = 0; c < img.channels; ++c)
                    crop.at(x - x0, y - y0, c) = img.at(x, y, c);
        res.crops.push_back(std::move(crop));
    }
    return res;
}

// --------------------------------------------------------------------------
// Training.

struct GtBox {
    AbsBox box;  // absolute pixels in the training image
    int class_id = 0;
};

struct TrainSample {
    Image image;  // already at model input size
    std::vector<GtBox> boxes;
};

struct DetectorTrainConfig {
    int epochs = 60;
    double lr = 0.02;
    double momentum = 0.9;
    double lambda_coord = 5.0;
    double lambda_noobj = 0.5;
    uint64_t seed = 42;
};

inline std::vector<double> train_detector(DetectorModel& m, const std::vector<TrainSample>& data,
                                          const DetectorTrainConfig& tc) {
    if (data.empty()) throw std::invalid_argument("train_detector: empty dataset");
    Rng rng(tc.seed);
    int g = m.cfg.grid, nb = m.cfg.boxes_per_cell, nc = m.cfg.num_classes;
    int nin = m.head_in(), nout = m.head_out();

    std::vector<double> v_c1w(m.conv1_w.size(), 0), v_c1b(m.conv1_b.size(), 0);
    std::vector<double> v_c2w(m.conv2_w.size(), 0), v_c2b(m.conv2_b.size(), 0);
    std::vector<double> v_hw(m.head_w.size(), 0), v_hb(m.head_b.size(), 0);
    std::vector<double> loss_trace;

    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        // deterministic shuffle
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        double epoch_loss = 0;
        for (size_t si : order) {
            const TrainSample& s = data[si];
            detail::ConvActs a = detail::backbone_forward(m, s.image);
            std::vector<double> d_out(a.head_out.size(), 0.0);

            // which box slot is responsible per gt: best IOU against current preds
            std::vector<std::vector<std::pair<int, const GtBox*>>> cell_gt(size_t(g) * g);
            for (const GtBox& gt : s.boxes) {
                double gcx = (gt.box.x + gt.box.w / 2) / m.input_size * g;
                double gcy = (gt.box.y + gt.box.h / 2) / m.input_size * g;
                int cx = std::clamp(int(gcx), 0, g - 1), cy = std::clamp(int(gcy), 0, g - 1);
                cell_gt[size_t(cy) * g + cx].push_back({-1, &gt});
            }

            double loss = 0;
            for (int ci = 0; ci < g * g; ++ci) {
                const double* z = a.head_out.data() + size_t(ci) * nout;
                double* dz = d_out.data() + size_t(ci) * nout;
                auto& gts = cell_gt[size_t(ci)];
                int cx = ci % g, cy = ci / g;

                std::vector<bool> responsible(size_t(nb), false);
                if (!gts.empty()) {
                    const GtBox& gt = *gts.front().second;  // one object per cell at desk scale
                    // pick the slot with best IOU to the target
                    double best = -1;
                    int best_r = 0;
                    for (int r = 0; r < nb; ++r) {
                        BBox pb;
                        pb.cx = sigmoid(z[r * 5 + 0]);
                        pb.cy = sigmoid(z[r * 5 + 1]);
                        pb.h = sigmoid(z[r * 5 + 2]);
                        pb.w = sigmoid(z[r * 5 + 3]);
                        AbsBox ab = to_absolute(pb, cx, cy, g, m.input_size, m.input_size);
                        double ov = (ab.w > 0 && ab.h > 0) ? iou(ab, gt.box) : 0.0;
                        if (ov > best) {
                            best = ov;
                            best_r = r;
                        }
                    }
                    responsible[size_t(best_r)] = true;

                    double tcx = (gt.box.x + gt.box.w / 2) / m.input_size * g - cx;
                    double tcy = (gt.box.y + gt.box.h / 2) / m.input_size * g - cy;
                    double tw = gt.box.w / m.input_size, th = gt.box.h / m.input_size;
                    const double tgt[5] = {tcx, tcy, th, tw, 1.0};
                    int r = best_r;
                    for (int k = 0; k < 5; ++k) {
                        double p = sigmoid(z[r * 5 + k]);
                        double wgt = (k < 4) ? tc.lambda_coord : 1.0;
                        loss += wgt * (p - tgt[k]) * (p - tgt[k]);
                        dz[r * 5 + k] += 2 * wgt * (p - tgt[k]) * p * (1 - p);
                    }
                    // cross-entropy on classes
                    std::vector<double> probs =
                        class_probs(std::vector<double>(z + nb * 5, z + nout));
                    loss += -std::log(std::max(probs[size_t(gt.class_id)], 1e-12));
                    for (int k = 0; k < nc; ++k)
                        dz[nb * 5 + k] += probs[size_t(k)] - (k == gt.class_id ? 1.0 : 0.0);
                }
                for (int r = 0; r < nb; ++r) {
                    if (responsible[size_t(r)]) continue;
                    double p = sigmoid(z[r * 5 + 4]);
                    loss += tc.lambda_noobj * p * p;
                    dz[r * 5 + 4] += 2 * tc.lambda_noobj * p * p * (1 - p);
                }
            }
            epoch_loss += loss;

            // backward: head -> conv2 -> conv1
            std::vector<double> d_hw(m.head_w.size(), 0.0), d_hb(m.head_b.size(), 0.0);
            std::vector<double> d_act2(a.act2.size(), 0.0);
            for (int ci = 0; ci < g * g; ++ci) {
                const double* fin = a.head_in.data() + size_t(ci) * nin;
                const double* dz = d_out.data() + size_t(ci) * nout;
                int cx = ci % g, cy = ci / g;
                for (int o = 0; o < nout; ++o) {
                    if (dz[o] == 0) continue;
                    d_hb[size_t(o)] += dz[o];
                    double* dwr = d_hw.data() + size_t(o) * nin;
                    const double* wr = m.head_w.data() + size_t(o) * nin;
                    for (int i = 0; i < nin; ++i) dwr[i] += dz[o] * fin[i];
                    int k = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx)
                            for (int c = 0; c < m.c2; ++c, ++k) {
                                int ny = cy + dy, nx2 = cx + dx;
                                if (nx2 < 0 || ny < 0 || nx2 >= g || ny >= g) continue;
                                d_act2[(size_t(c) * g + ny) * g + nx2] += dz[o] * wr[k];
                            }
                }
            }
            std::vector<double> d_c2w(m.conv2_w.size(), 0.0), d_c2b(m.conv2_b.size(), 0.0);
            std::vector<double> d_act1;
            detail::conv_backward(a.act1, m.c1, m.input_size / 2, m.conv2_w, m.c2, a.pre2, d_act2,
                                  d_c2w, d_c2b, d_act1);
            std::vector<double> d_c1w(m.conv1_w.size(), 0.0), d_c1b(m.conv1_b.size(), 0.0);
            std::vector<double> d_input;
            detail::conv_backward(a.input, 1, m.input_size, m.conv1_w, m.c1, a.pre1, d_act1, d_c1w,
                                  d_c1b, d_input);

            auto sgd = [&](std::vector<double>& w, std::vector<double>& v,
                           const std::vector<double>& dw) {
                for (size_t i = 0; i < w.size(); ++i) {
                    double grad = std::clamp(dw[i], -1.0, 1.0);
                    v[i] = tc.momentum * v[i] - tc.lr * grad;
                    w[i] += v[i];
                }
            };
            sgd(m.head_w, v_hw, d_hw);
            sgd(m.head_b, v_hb, d_hb);
            sgd(m.conv2_w, v_c2w, d_c2w);
            sgd(m.conv2_b, v_c2b, d_c2b);
            sgd(m.conv1_w, v_c1w, d_c1w);
            sgd(m.conv1_b, v_c1b, d_c1b);
        }
        loss_trace.push_back(epoch_loss / double(data.size()));
    }
    return loss_trace;
}

// --------------------------------------------------------------------------
// Serialization: "XMQD", config ints, float32 payload.

inline void save_detector(const DetectorModel& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path);
    out.write("XMQD", 4);
    int32_t ints[8] = {int32_t(m.cfg.grid), int32_t(m.cfg.boxes_per_cell),
                       int32_t(m.cfg.num_classes), int32_t(m.input_size), int32_t(m.c1),
                       int32_t(m.c2), 0, 0};
    out.write(reinterpret_cast<const char*>(ints), sizeof(ints));
    auto dump = [&](const std::vector<double>& w) {
        for (double v : w) {
            float f = float(v);
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
    };
    dump(m.conv1_w);
    dump(m.conv1_b);
    dump(m.conv2_w);
    dump(m.conv2_b);
    dump(m.head_w);
    dump(m.head_b);
}

inline DetectorModel load_detector(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (std::string(magic, 4) != "XMQD") throw std::runtime_error("bad detector checkpoint");
    int32_t ints[8];
    in.read(reinterpret_cast<char*>(ints), sizeof(ints));
    DetectorConfig cfg;
    cfg.grid = ints[0];
    cfg.boxes_per_cell = ints[1];
    cfg.num_classes = ints[2];
    DetectorModel m = DetectorModel::zero_init(cfg);
    m.input_size = ints[3];
    m.c1 = ints[4];
    m.c2 = ints[5];
    m.conv1_w.assign(size_t(m.c1) * 9, 0);
    m.conv1_b.assign(size_t(m.c1), 0);
    m.conv2_w.assign(size_t(m.c2) * m.c1 * 9, 0);
    m.conv2_b.assign(size_t(m.c2), 0);
    m.head_w.assign(size_t(m.head_out()) * m.head_in(), 0);
    m.head_b.assign(size_t(m.head_out()), 0);
    auto slurp = [&](std::vector<double>& w) {
        for (double& v : w) {
            float f;
            in.read(reinterpret_cast<char*>(&f), 4);
            v = f;
        }
    };
    slurp(m.conv1_w);
    slurp(m.conv1_b);
    slurp(m.conv2_w);
    slurp(m.conv2_b);
    slurp(m.head_w);
    slurp(m.head_b);
    if (!in) throw std::runtime_error("truncated detector checkpoint");
    return m;
}

}  // namespace xmq
