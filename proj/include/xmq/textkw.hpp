#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace xmq {

struct Token {
    std::string surface;
    int position = 0;
};

// Lowercase, split on non-alphanumerics, drop empties.
inline std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> out;
    std::string cur;
    int pos = 0;
    auto flush = [&]() {
        if (!cur.empty()) {
            out.push_back({cur, pos++});
            cur.clear();
        }
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            cur.push_back(char(std::tolower(static_cast<unsigned char>(c))));
        else
            flush();
    }
    flush();
    return out;
}

// Corpus word embeddings: positive-PMI co-occurrence (symmetric window 5)
// followed by truncated SVD. Stands in for a pretrained transformer encoder
// behind the same interface.
class Encoder {
public:
    static constexpr int kDefaultDim = 64;

    static Encoder train(const std::vector<std::string>& corpus, int dim = kDefaultDim,
                         int window = 5) {
        Encoder enc;
        enc.dim_ = dim;
        std::map<std::string, size_t> index;
        std::vector<std::vector<size_t>> docs;
        for (const std::string& text : corpus) {
            std::vector<size_t> ids;
            for (const Token& t : tokenize(text)) {
                auto it = index.find(t.surface);
                if (it == index.end()) {
                    it = index.emplace(t.surface, index.size()).first;
                }
                ids.push_back(it->second);
            }
            docs.push_back(std::move(ids));
        }
        if (index.empty()) throw std::invalid_argument("Encoder::train: empty corpus");
        size_t v = index.size();
        enc.vocab_.resize(v);
        for (const auto& [word, id] : index) enc.vocab_[id] = word;

        Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(Eigen::Index(v), Eigen::Index(v));
        for (const auto& ids : docs)
            for (size_t i = 0; i < ids.size(); ++i)
                for (size_t j = i + 1; j < ids.size() && j <= i + size_t(window); ++j) {
                    counts(Eigen::Index(ids[i]), Eigen::Index(ids[j])) += 1;
                    counts(Eigen::Index(ids[j]), Eigen::Index(ids[i])) += 1;
                }
        double total = counts.sum();
        if (total <= 0) total = 1;
        Eigen::VectorXd row = counts.rowwise().sum();
        Eigen::MatrixXd ppmi = Eigen::MatrixXd::Zero(Eigen::Index(v), Eigen::Index(v));
        for (Eigen::Index i = 0; i < ppmi.rows(); ++i)
            for (Eigen::Index j = 0; j < ppmi.cols(); ++j) {
                if (counts(i, j) <= 0 || row(i) <= 0 || row(j) <= 0) continue;
                double pmi = std::log(counts(i, j) * total / (row(i) * row(j)));
                if (pmi > 0) ppmi(i, j) = pmi;
            }

        Eigen::BDCSVD<Eigen::MatrixXd> svd(ppmi, Eigen::ComputeThinU);
        int rank = int(std::min<Eigen::Index>(svd.singularValues().size(), dim));
        enc.table_ = Eigen::MatrixXd::Zero(Eigen::Index(v), dim);
        for (int k = 0; k < rank; ++k)
            enc.table_.col(k) = svd.matrixU().col(k) * std::sqrt(svd.singularValues()(k));
        enc.mean_ = enc.table_.colwise().mean();
        return enc;
    }

    int dim() const { return dim_; }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    bool contains(const std::string& word) const { return lookup(word) >= 0; }

    // word vector; out-of-vocabulary words fall back to the corpus mean
    Eigen::VectorXd embed_word(const std::string& word) const {
        Eigen::Index i = lookup(word);
        return i >= 0 ? Eigen::VectorXd(table_.row(i)) : Eigen::VectorXd(mean_);
    }

    Eigen::VectorXd embed_tokens(const std::vector<Token>& tokens) const {
        if (tokens.empty()) throw std::invalid_argument("embed_tokens: empty token list");
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim_);
        for (const Token& t : tokens) acc += embed_word(t.surface);
        return acc / double(tokens.size());
    }

    Eigen::VectorXd embed_text(const std::string& text) const {
        return embed_tokens(tokenize(text));
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open for write: " + path);
        out.write("XMQE", 4);
        int32_t d = dim_, v = int32_t(vocab_.size());
        out.write(reinterpret_cast<const char*>(&d), 4);
        out.write(reinterpret_cast<const char*>(&v), 4);
        for (const std::string& w : vocab_) {
            int32_t len = int32_t(w.size());
            out.write(reinterpret_cast<const char*>(&len), 4);
            out.write(w.data(), len);
        }
        for (Eigen::Index i = 0; i < table_.rows(); ++i)
            for (int j = 0; j < dim_; ++j) {
                float f = float(table_(i, j));
                out.write(reinterpret_cast<const char*>(&f), 4);
            }
    }

    static Encoder load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open: " + path);
        char magic[4];
        in.read(magic, 4);
        if (std::string(magic, 4) != "XMQE") throw std::runtime_error("bad encoder file");
        Encoder enc;
        int32_t d, v;
        in.read(reinterpret_cast<char*>(&d), 4);
        in.read(reinterpret_cast<char*>(&v), 4);
        enc.dim_ = d;
        enc.vocab_.resize(size_t(v));
        for (auto& w : enc.vocab_) {
            int32_t len;
            in.read(reinterpret_cast<char*>(&len), 4);
            w.resize(size_t(len));
            in.read(w.data(), len);
        }
        enc.table_ = Eigen::MatrixXd::Zero(v, d);
        for (Eigen::Index i = 0; i < v; ++i)
            for (int j = 0; j < d; ++j) {
                float f;
                in.read(reinterpret_cast<char*>(&f), 4);
                enc.table_(i, j) = f;
            }
        if (!in) throw std::runtime_error("truncated encoder file");
        enc.mean_ = enc.table_.colwise().mean();
        return enc;
    }

private:
    Eigen::Index lookup(const std::string& word) const {
        for (size_t i = 0; i < vocab_.size(); ++i)
            if (vocab_[i] == word) return Eigen::Index(i);
        return -1;
    }

    int dim_ = kDefaultDim;
    std::vector<std::string> vocab_;
    Eigen::MatrixXd table_;      // [vocab][dim]
    Eigen::RowVectorXd mean_;
};

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double na = a.norm(), nb = b.norm();
    if (na <= 0 || nb <= 0) return 0;
    return a.dot(b) / (na * nb);
}

// Unique unigrams and bigrams containing no stoplist word, first-occurrence order.
inline std::vector<std::string> candidates(const std::vector<Token>& tokens,
                                           const std::set<std::string>& stoplist) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    auto add = [&](const std::string& s) {
        if (seen.insert(s).second) out.push_back(s);
    };
    for (const Token& t : tokens)
        if (!stoplist.count(t.surface)) add(t.surface);
    for (size_t i = 0; i + 1 < tokens.size(); ++i)
        if (!stoplist.count(tokens[i].surface) && !stoplist.count(tokens[i + 1].surface))
            add(tokens[i].surface + " " + tokens[i + 1].surface);
    return out;
}

inline const std::set<std::string>& default_stoplist() {
    static const std::set<std::string> s = {"a",  "an", "the", "of",  "is", "are", "on",
                                            "in", "to", "and", "with"};
    return s;
}

// Restricted Damerau-Levenshtein (optimal string alignment): unit-cost
// deletion, insertion, substitution and adjacent transposition.
inline int dl_distance(const std::string& s, const std::string& t) {
    size_t n = s.size(), m = t.size();
    std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1));
    for (size_t i = 0; i <= n; ++i) d[i][0] = int(i);
    for (size_t j = 0; j <= m; ++j) d[0][j] = int(j);
    for (size_t i = 1; i <= n; ++i)
        for (size_t j = 1; j <= m; ++j) {
            int sub = s[i - 1] == t[j - 1] ? 0 : 1;
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + sub});
            if (i > 1 && j > 1 && s[i - 1] == t[j - 2] && s[i - 2] == t[j - 1])
                d[i][j] = std::min(d[i][j], d[i - 2][j - 2] + 1);
        }
    return d[n][m];
}

struct KeywordResult {
    std::string keyword;
    double cosine = 0;
    double dl_norm = 0;  // [0,1]
    double score = 0;    // 0.7*cosine + 0.3*(1 - dl_norm)
    Eigen::VectorXd vector;
};

inline std::vector<KeywordResult> rank_keywords(const Encoder& enc, const std::string& text,
                                                int top_n,
                                                const std::set<std::string>& stoplist =
                                                    default_stoplist()) {
    if (top_n < 1) throw std::invalid_argument("rank_keywords: top_n must be >= 1");
    auto tokens = tokenize(text);
    if (tokens.empty()) return {};
    Eigen::VectorXd doc = enc.embed_tokens(tokens);
    std::vector<KeywordResult> results;
    for (const std::string& cand : candidates(tokens, stoplist)) {
        KeywordResult r;
        r.keyword = cand;
        r.vector = enc.embed_text(cand);
        r.cosine = cosine(r.vector, doc);
        double best = 1.0;
        for (const Token& t : tokens) {
            double len = double(std::max(cand.size(), t.surface.size()));
            if (len > 0) best = std::min(best, dl_distance(cand, t.surface) / len);
        }
        r.dl_norm = best;
        r.score = 0.7 * r.cosine + 0.3 * (1.0 - r.dl_norm);
        results.push_back(std::move(r));
    }
    std::stable_sort(results.begin(), results.end(),
                     [](const KeywordResult& a, const KeywordResult& b) { return a.score > b.score; });
    if (int(results.size()) > top_n) results.resize(size_t(top_n));
    return results;
}

}  // namespace xmq
