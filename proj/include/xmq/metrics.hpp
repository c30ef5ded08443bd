#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmq/detector.hpp"
#include "xmq/image.hpp"

namespace xmq {

// --------------------------------------------------------------------------
// Image error metrics.

struct ImageErrors {
    double mae = 0, mse = 0, rmse = 0;
};

inline ImageErrors image_errors(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw std::invalid_argument("image_errors: dimension mismatch");
    ImageErrors e;
    double n = double(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = double(a.data[i]) - double(b.data[i]);
        e.mae += std::fabs(d);
        e.mse += d * d;
    }
    e.mae /= n;
    e.mse /= n;
    e.rmse = std::sqrt(e.mse);
    return e;
}

// --------------------------------------------------------------------------
// Detection metrics.

struct PredBox {
    int image_id = 0;
    AbsBox box;
    int class_id = 0;
    double score = 0;
};

struct GroundTruthBox {
    int image_id = 0;
    AbsBox box;
    int class_id = 0;
};

struct DetectionMetrics {
    std::map<int, double> avp_per_class;
    double map = 0;
    double mean_iou = 0;
    int matched = 0;
};

// Greedy score-ordered matching at the IOU threshold; AvP is the area under
// the all-points interpolated precision-recall curve.
inline DetectionMetrics detection_metrics(std::vector<PredBox> preds,
                                          const std::vector<GroundTruthBox>& gts,
                                          double iou_thresh = 0.5) {
    DetectionMetrics out;
    std::map<int, int> gt_count;
    for (const auto& g : gts) gt_count[g.class_id]++;

    std::stable_sort(preds.begin(), preds.end(),
                     [](const PredBox& a, const PredBox& b) { return a.score > b.score; });
    std::vector<bool> gt_used(gts.size(), false);
    // per class: (is_tp) in score order
    std::map<int, std::vector<bool>> tp_flags;
    double iou_sum = 0;
    for (const PredBox& p : preds) {
        double best = 0;
        int best_gt = -1;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_used[gi] || gts[gi].image_id != p.image_id || gts[gi].class_id != p.class_id)
                continue;
            double ov = iou(p.box, gts[gi].box);
            if (ov > best) {
                best = ov;
                best_gt = int(gi);
            }
        }
        bool tp = best_gt >= 0 && best >= iou_thresh;
        if (tp) {
            gt_used[size_t(best_gt)] = true;
            iou_sum += best;
            out.matched++;
        }
        tp_flags[p.class_id].push_back(tp);
    }
    out.mean_iou = out.matched ? iou_sum / out.matched : 0.0;

    for (const auto& [cls, total_gt] : gt_count) {
        const auto& flags = tp_flags[cls];
        std::vector<double> precision, recall;
        int tp = 0, fp = 0;
        for (bool f : flags) {
            f ? ++tp : ++fp;
            precision.push_back(double(tp) / double(tp + fp));
            recall.push_back(double(tp) / double(total_gt));
        }
        // precision envelope, then sum over recall steps
        double avp = 0;
        double prev_r = 0;
        for (size_t i = 0; i < precision.size(); ++i) {
            double pmax = 0;
            for (size_t j = i; j < precision.size(); ++j) pmax = std::max(pmax, precision[j]);
            avp += (recall[i] - prev_r) * pmax;
            prev_r = recall[i];
        }
        out.avp_per_class[cls] = avp;
        out.map += avp;
    }
    if (!gt_count.empty()) out.map /= double(gt_count.size());
    return out;
}

// --------------------------------------------------------------------------
// Classification metrics.

struct ConfusionCounts {
    long tp = 0, fp = 0, tn = 0, fn = 0;
};

struct ClassificationMetrics {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
    double specificity = 0, fpr = 0, fnr = 0;
};

// Macro average over classes; zero-denominator cells are 0.
inline ClassificationMetrics classification_metrics(const std::vector<ConfusionCounts>& counts) {
    if (counts.empty()) throw std::invalid_argument("classification_metrics: no classes");
    ClassificationMetrics m;
    auto frac = [](double num, double den) { return den > 0 ? num / den : 0.0; };
    for (const ConfusionCounts& c : counts) {
        double total = double(c.tp + c.fp + c.tn + c.fn);
        m.accuracy += frac(double(c.tp + c.tn), total);
        double p = frac(double(c.tp), double(c.tp + c.fp));
        double r = frac(double(c.tp), double(c.tp + c.fn));
        m.precision += p;
        m.recall += r;
        m.f1 += frac(2 * p * r, p + r);
        m.specificity += frac(double(c.tn), double(c.tn + c.fp));
        m.fpr += frac(double(c.fp), double(c.fp + c.tn));
        m.fnr += frac(double(c.fn), double(c.fn + c.tp));
    }
    double n = double(counts.size());
    m.accuracy /= n;
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    m.specificity /= n;
    m.fpr /= n;
    m.fnr /= n;
    return m;
}

// --------------------------------------------------------------------------
// Caption metrics.

// BLEU with brevity penalty; add-one smoothing on orders above 1 so single
// missing n-grams do not zero the score.
inline double bleu(const std::vector<std::string>& candidate,
                   const std::vector<std::string>& reference, int max_n = 4) {
    if (candidate.empty()) return 0;
    int effective_n = std::min<int>(max_n, int(candidate.size()));
    double log_sum = 0;
    for (int n = 1; n <= effective_n; ++n) {
        std::map<std::vector<std::string>, int> ref_counts;
        for (size_t i = 0; i + size_t(n) <= reference.size(); ++i)
            ref_counts[{reference.begin() + long(i), reference.begin() + long(i) + n}]++;
        std::map<std::vector<std::string>, int> cand_counts;
        int total = 0;
        for (size_t i = 0; i + size_t(n) <= candidate.size(); ++i) {
            cand_counts[{candidate.begin() + long(i), candidate.begin() + long(i) + n}]++;
            ++total;
        }
        int clipped = 0;
        for (const auto& [gram, cnt] : cand_counts) {
            auto it = ref_counts.find(gram);
            clipped += std::min(cnt, it == ref_counts.end() ? 0 : it->second);
        }
        double p;
        if (n == 1) {
            p = total > 0 ? double(clipped) / total : 0.0;
            if (p == 0) return 0;
        } else {
            p = double(clipped + 1) / double(total + 1);
        }
        log_sum += std::log(p) / effective_n;
    }
    double bp = candidate.size() >= reference.size()
                    ? 1.0
                    : std::exp(1.0 - double(reference.size()) / double(candidate.size()));
    return bp * std::exp(log_sum);
}

// Exact-match METEOR: leftmost-greedy unigram alignment, alpha=0.9 F-mean,
// fragmentation penalty 0.5*(chunks/matches)^3.
inline double meteor(const std::vector<std::string>& candidate,
                     const std::vector<std::string>& reference) {
    if (candidate.empty() || reference.empty()) return 0;
    std::vector<bool> ref_used(reference.size(), false);
    std::vector<int> match_pos(candidate.size(), -1);
    int m = 0;
    for (size_t i = 0; i < candidate.size(); ++i)
        for (size_t j = 0; j < reference.size(); ++j)
            if (!ref_used[j] && candidate[i] == reference[j]) {
                ref_used[j] = true;
                match_pos[i] = int(j);
                ++m;
                break;
            }
    if (m == 0) return 0;
    double p = double(m) / double(candidate.size());
    double r = double(m) / double(reference.size());
    const double alpha = 0.9;
    double fmean = p * r / (alpha * p + (1 - alpha) * r);
    // chunks: maximal runs matched to consecutive reference positions
    int chunks = 0;
    int prev = -2;
    for (size_t i = 0; i < candidate.size(); ++i) {
        if (match_pos[i] < 0) {
            prev = -2;
            continue;
        }
        if (match_pos[i] != prev + 1) ++chunks;
        prev = match_pos[i];
    }
    double penalty = 0.5 * std::pow(double(chunks) / double(m), 3.0);
    return fmean * (1.0 - penalty);
}

// --------------------------------------------------------------------------
// Timing (monotonic clock).

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        auto now = std::chrono::steady_clock::now();
        return std::chrono::duration<double>(now - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

template <typename F>
double timer(F&& op) {
    Timer t;
    op();
    return t.seconds();
}

}  // namespace xmq
