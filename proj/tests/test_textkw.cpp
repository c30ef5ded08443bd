#include <doctest.h>

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "xmq/textkw.hpp"

using namespace xmq;

namespace {

// Recursive optimal-string-alignment oracle, memoized.
int osa_oracle(const std::string& s, const std::string& t) {
    std::map<std::pair<size_t, size_t>, int> memo;
    std::function<int(size_t, size_t)> go = [&](size_t i, size_t j) -> int {
        if (i == 0) return int(j);
        if (j == 0) return int(i);
        auto key = std::make_pair(i, j);
        auto it = memo.find(key);
        if (it != memo.end()) return it->second;
        int best = go(i - 1, j) + 1;
        best = std::min(best, go(i, j - 1) + 1);
        best = std::min(best, go(i - 1, j - 1) + (s[i - 1] == t[j - 1] ? 0 : 1));
        if (i > 1 && j > 1 && s[i - 1] == t[j - 2] && s[i - 2] == t[j - 1])
            best = std::min(best, go(i - 2, j - 2) + 1);
        memo[key] = best;
        return best;
    };
    return go(s.size(), t.size());
}

std::vector<std::string> all_strings_up_to(size_t max_len) {
    std::vector<std::string> out{""};
    std::vector<std::string> frontier{""};
    for (size_t l = 0; l < max_len; ++l) {
        std::vector<std::string> next;
        for (const auto& s : frontier)
            for (char c : {'a', 'b', 'c'}) {
                next.push_back(s + c);
                out.push_back(next.back());
            }
        frontier = std::move(next);
    }
    return out;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on non-alphanumerics") {
    auto toks = tokenize("A red Circle, left-of the BLUE square!");
    std::vector<std::string> surfaces;
    for (const auto& t : toks) surfaces.push_back(t.surface);
    CHECK(surfaces == std::vector<std::string>{"a", "red", "circle", "left", "of", "the", "blue",
                                               "square"});
    for (size_t i = 0; i < toks.size(); ++i) CHECK(toks[i].position == int(i));
    CHECK(tokenize("  ,,;; ").empty());
}

TEST_CASE("dl distance landmark values") {
    CHECK(dl_distance("ab", "ba") == 1);        // one transposition
    CHECK(dl_distance("kitten", "sitting") == 3);
    CHECK(dl_distance("", "abc") == 3);
    CHECK(dl_distance("same", "same") == 0);
    CHECK(dl_distance("word", "ward") == 1);    // dl_norm 1/4 against len-4 token
}

TEST_CASE("dl distance matches the recursive oracle on short strings") {
    auto strings = all_strings_up_to(4);
    for (const auto& s : strings)
        for (const auto& t : strings) CHECK(dl_distance(s, t) == osa_oracle(s, t));
    // spot checks at length 6
    CHECK(dl_distance("abcabc", "cbacba") == osa_oracle("abcabc", "cbacba"));
    CHECK(dl_distance("aabbcc", "ccbbaa") == osa_oracle("aabbcc", "ccbbaa"));
}

TEST_CASE("dl distance is a metric on samples") {
    auto strings = all_strings_up_to(3);
    for (const auto& s : strings)
        for (const auto& t : strings) {
            int d = dl_distance(s, t);
            CHECK(d == dl_distance(t, s));
            CHECK((d == 0) == (s == t));
        }
}

TEST_CASE("candidate extraction keeps first-occurrence order and drops stopwords") {
    auto toks = tokenize("the red circle and the red square");
    auto cands = candidates(toks, default_stoplist());
    CHECK(cands == std::vector<std::string>{"red", "circle", "square", "red circle",
                                            "red square"});
}

TEST_CASE("encoder embeds related words closer than unrelated ones") {
    std::vector<std::string> corpus;
    for (int i = 0; i < 30; ++i) {
        corpus.push_back("red circle on the table");
        corpus.push_back("red square on the table");
        corpus.push_back("blue sky above the hill");
        corpus.push_back("blue sea below the hill");
    }
    Encoder enc = Encoder::train(corpus, 16);
    CHECK(enc.dim() == 16);
    CHECK(enc.contains("red"));
    CHECK(!enc.contains("elephant"));
    double related = cosine(enc.embed_word("circle"), enc.embed_word("square"));
    double unrelated = cosine(enc.embed_word("circle"), enc.embed_word("sky"));
    CHECK(related > unrelated);
    // OOV falls back to the mean vector
    CHECK(enc.embed_word("elephant") == enc.embed_word("giraffe"));
    CHECK_THROWS_AS(enc.embed_tokens({}), std::invalid_argument);
    CHECK_THROWS_AS(Encoder::train({}), std::invalid_argument);
}

TEST_CASE("encoder round-trips through its file format") {
    Encoder enc = Encoder::train({"one two three", "two three four", "three four five"}, 8);
    enc.save("enc_roundtrip.bin");
    Encoder back = Encoder::load("enc_roundtrip.bin");
    CHECK(back.dim() == enc.dim());
    CHECK(back.vocabulary() == enc.vocabulary());
    for (const std::string& w : enc.vocabulary()) {
        Eigen::VectorXd a = enc.embed_word(w), b = back.embed_word(w);
        for (int i = 0; i < enc.dim(); ++i) CHECK(b(i) == doctest::Approx(a(i)).epsilon(1e-6));
    }
    CHECK_THROWS_AS(Encoder::load("missing_encoder.bin"), std::runtime_error);
}

TEST_CASE("cosine of degenerate vectors is zero") {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(4), o = Eigen::VectorXd::Ones(4);
    CHECK(cosine(z, o) == 0.0);
    CHECK(cosine(o, o) == doctest::Approx(1.0));
}

TEST_CASE("keyword ranking blends cosine and edit-distance terms") {
    std::vector<std::string> corpus;
    for (int i = 0; i < 20; ++i) corpus.push_back("red circle left of blue square");
    Encoder enc = Encoder::train(corpus, 16);
    auto ranked = rank_keywords(enc, "red circle left of blue square", 5);
    REQUIRE(!ranked.empty());
    CHECK(ranked.size() <= 5);
    for (size_t i = 1; i < ranked.size(); ++i) CHECK(ranked[i - 1].score >= ranked[i].score);
    for (const auto& r : ranked) {
        CHECK(r.score == doctest::Approx(0.7 * r.cosine + 0.3 * (1.0 - r.dl_norm)));
        CHECK(r.dl_norm >= 0.0);
        CHECK(r.dl_norm <= 1.0);
        // exact-token unigrams have zero edit distance to themselves
        if (r.keyword.find(' ') == std::string::npos) CHECK(r.dl_norm == doctest::Approx(0.0));
    }
    CHECK_THROWS_AS(rank_keywords(enc, "red circle", 0), std::invalid_argument);
    CHECK(rank_keywords(enc, "", 3).empty());
}
