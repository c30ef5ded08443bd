#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "xmq/metrics.hpp"
#include "xmq/util.hpp"

using namespace xmq;

TEST_CASE("image errors on a constant offset") {
    Image a(4, 4, 1), b(4, 4, 1);
    for (int i = 0; i < 16; ++i) {
        a.data[size_t(i)] = 100;
        b.data[size_t(i)] = 103;
    }
    ImageErrors e = image_errors(a, b);
    CHECK(e.mae == doctest::Approx(3.0));
    CHECK(e.mse == doctest::Approx(9.0));
    CHECK(e.rmse == doctest::Approx(3.0));
    Image c(3, 3, 1);
    CHECK_THROWS_AS(image_errors(a, c), std::invalid_argument);
}

TEST_CASE("detection metrics on perfect and disjoint predictions") {
    std::vector<GroundTruthBox> gts{{0, {10, 10, 20, 20}, 0}, {0, {50, 50, 10, 10}, 1}};
    std::vector<PredBox> perfect{{0, {10, 10, 20, 20}, 0, 0.9}, {0, {50, 50, 10, 10}, 1, 0.8}};
    DetectionMetrics m = detection_metrics(perfect, gts);
    CHECK(m.map == doctest::Approx(1.0));
    CHECK(m.mean_iou == doctest::Approx(1.0));
    CHECK(m.matched == 2);

    std::vector<PredBox> wrong{{0, {200, 200, 5, 5}, 0, 0.9}};
    DetectionMetrics z = detection_metrics(wrong, gts);
    CHECK(z.map == doctest::Approx(0.0));
    CHECK(z.matched == 0);
}

TEST_CASE("detection metrics penalize a high-scoring false positive") {
    std::vector<GroundTruthBox> gts{{0, {0, 0, 10, 10}, 0}};
    // false positive outranks the true positive: interpolated AvP stays 1 only
    // when the FP scores lower
    std::vector<PredBox> fp_first{{0, {100, 100, 5, 5}, 0, 0.9}, {0, {0, 0, 10, 10}, 0, 0.5}};
    std::vector<PredBox> tp_first{{0, {0, 0, 10, 10}, 0, 0.9}, {0, {100, 100, 5, 5}, 0, 0.5}};
    CHECK(detection_metrics(fp_first, gts).map == doctest::Approx(0.5));
    CHECK(detection_metrics(tp_first, gts).map == doctest::Approx(1.0));
}

TEST_CASE("detection matching is one-to-one per ground truth") {
    std::vector<GroundTruthBox> gts{{0, {0, 0, 10, 10}, 0}};
    std::vector<PredBox> dups{{0, {0, 0, 10, 10}, 0, 0.9}, {0, {1, 1, 10, 10}, 0, 0.8}};
    DetectionMetrics m = detection_metrics(dups, gts);
    CHECK(m.matched == 1);
}

TEST_CASE("classification metric identities") {
    std::vector<ConfusionCounts> counts{{30, 10, 50, 10}, {5, 20, 70, 5}};
    ClassificationMetrics m = classification_metrics(counts);
    CHECK(m.fpr + m.specificity == doctest::Approx(1.0));
    CHECK(m.fnr + m.recall == doctest::Approx(1.0));
    CHECK(m.accuracy >= 0.0);
    CHECK(m.accuracy <= 1.0);
    // single-class hand arithmetic
    ClassificationMetrics s = classification_metrics({{8, 2, 85, 5}});
    CHECK(s.accuracy == doctest::Approx(0.93));
    CHECK(s.precision == doctest::Approx(0.8));
    CHECK(s.recall == doctest::Approx(8.0 / 13.0));
    CHECK(s.f1 == doctest::Approx(2 * 0.8 * (8.0 / 13.0) / (0.8 + 8.0 / 13.0)));
    CHECK_THROWS_AS(classification_metrics({}), std::invalid_argument);
}

TEST_CASE("bleu-1 brevity penalty hand case") {
    // two matching words against a three-word reference: p1 = 1, BP = e^(1-3/2)
    std::vector<std::string> cand{"red", "circle"};
    std::vector<std::string> ref{"red", "circle", "here"};
    CHECK(bleu(cand, ref, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-4));
    CHECK(bleu(cand, ref, 1) == doctest::Approx(0.6065).epsilon(1e-3));
}

TEST_CASE("bleu bounds and degenerate cases") {
    std::vector<std::string> ref{"a", "b", "c", "d"};
    CHECK(bleu(ref, ref) == doctest::Approx(1.0));
    CHECK(bleu({}, ref) == doctest::Approx(0.0));
    CHECK(bleu({"x", "y"}, ref) == doctest::Approx(0.0));  // zero unigram overlap
    // clipping: repeated candidate words cannot over-count
    double clipped = bleu({"a", "a", "a", "a"}, ref, 1);
    CHECK(clipped == doctest::Approx(0.25));
}

TEST_CASE("meteor exact-match hand case") {
    std::vector<std::string> four{"a", "red", "circle", "here"};
    // identical strings: fmean 1, one chunk of four matches
    CHECK(meteor(four, four) == doctest::Approx(1.0 - 0.5 * std::pow(0.25, 3.0)));
    CHECK(meteor(four, four) == doctest::Approx(0.9921875));
    CHECK(meteor({}, four) == doctest::Approx(0.0));
    CHECK(meteor({"x"}, four) == doctest::Approx(0.0));
}

TEST_CASE("meteor fragmentation lowers the score") {
    std::vector<std::string> ref{"a", "b", "c", "d"};
    std::vector<std::string> ordered{"a", "b", "c", "d"};
    std::vector<std::string> shuffled{"b", "a", "d", "c"};
    CHECK(meteor(ordered, ref) > meteor(shuffled, ref));
}

TEST_CASE("timer measures nonnegative elapsed time") {
    double t = timer([] {
        volatile double acc = 0;
        for (int i = 0; i < 10000; ++i) acc = acc + std::sqrt(double(i));
    });
    CHECK(t >= 0.0);
    Timer watch;
    CHECK(watch.seconds() >= 0.0);
}
