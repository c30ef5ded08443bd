#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "xmq/util.hpp"

namespace xmq {

struct FoaConfig {
    int population = 20;  // D
    int dims = 0;         // u
    int iterations = 50;  // T
    double lb = 0.0, ub = 1.0;
    uint64_t seed = 42;
};

struct FeatureMask {
    std::vector<uint8_t> bits;

    size_t count() const {
        size_t n = 0;
        for (uint8_t b : bits) n += b != 0;
        return n;
    }
};

// Continuous position -> mask via the 0.5 threshold; empty masks are repaired
// by selecting the max-component bit.
inline FeatureMask mask_from_position(const std::vector<double>& pos) {
    FeatureMask m;
    m.bits.resize(pos.size(), 0);
    for (size_t i = 0; i < pos.size(); ++i) m.bits[i] = pos[i] > 0.5 ? 1 : 0;
    if (m.count() == 0 && !pos.empty()) {
        size_t best = size_t(std::max_element(pos.begin(), pos.end()) - pos.begin());
        m.bits[best] = 1;
    }
    return m;
}

// --------------------------------------------------------------------------
// Fitness: 1 - accuracy of a 1-NN proxy classifier on the validation split,
// z-score normalized on the training split, masked features only.

struct FitnessData {
    std::vector<std::vector<double>> train_x;
    std::vector<int> train_y;
    std::vector<std::vector<double>> val_x;
    std::vector<int> val_y;
};

inline double fitness(const FeatureMask& mask, const FitnessData& d) {
    if (d.train_x.empty() || d.val_x.empty()) throw std::invalid_argument("fitness: empty split");
    size_t u = d.train_x[0].size();
    if (mask.bits.size() != u) throw std::invalid_argument("fitness: mask/feature dim mismatch");
    for (const auto& r : d.train_x)
        if (r.size() != u) throw std::invalid_argument("fitness: ragged train matrix");
    for (const auto& r : d.val_x)
        if (r.size() != u) throw std::invalid_argument("fitness: ragged val matrix");
    if (d.train_y.size() != d.train_x.size() || d.val_y.size() != d.val_x.size())
        throw std::invalid_argument("fitness: label count mismatch");
    if (std::set<int>(d.train_y.begin(), d.train_y.end()).size() < 2)
        throw std::invalid_argument("fitness: need >= 2 classes");

    std::vector<size_t> sel;
    for (size_t i = 0; i < u; ++i)
        if (mask.bits[i]) sel.push_back(i);
    if (sel.empty()) throw std::invalid_argument("fitness: empty mask");

    std::vector<double> mu(sel.size(), 0), sd(sel.size(), 0);
    double n = double(d.train_x.size());
    for (const auto& r : d.train_x)
        for (size_t k = 0; k < sel.size(); ++k) mu[k] += r[sel[k]];
    for (double& v : mu) v /= n;
    for (const auto& r : d.train_x)
        for (size_t k = 0; k < sel.size(); ++k) {
            double dlt = r[sel[k]] - mu[k];
            sd[k] += dlt * dlt;
        }
    for (double& v : sd) v = std::sqrt(v / n);

    auto project = [&](const std::vector<double>& r) {
        std::vector<double> out(sel.size());
        for (size_t k = 0; k < sel.size(); ++k)
            out[k] = sd[k] > 0 ? (r[sel[k]] - mu[k]) / sd[k] : 0.0;
        return out;
    };
    std::vector<std::vector<double>> tr;
    tr.reserve(d.train_x.size());
    for (const auto& r : d.train_x) tr.push_back(project(r));

    size_t correct = 0;
    for (size_t vi = 0; vi < d.val_x.size(); ++vi) {
        auto q = project(d.val_x[vi]);
        double best = 1e300;
        int pred = d.train_y[0];
        for (size_t ti = 0; ti < tr.size(); ++ti) {
            double dist = 0;
            for (size_t k = 0; k < q.size(); ++k) {
                double dd = q[k] - tr[ti][k];
                dist += dd * dd;
            }
            if (dist < best) {
                best = dist;
                pred = d.train_y[ti];
            }
        }
        correct += pred == d.val_y[vi];
    }
    return 1.0 - double(correct) / double(d.val_x.size());
}

// --------------------------------------------------------------------------
// Population mechanics.

inline std::vector<std::vector<double>> initialize(const FoaConfig& cfg, Rng& rng) {
    if (cfg.population < 2 || cfg.iterations < 1 || cfg.dims < 1 || cfg.lb > cfg.ub)
        throw std::invalid_argument("foa: bad config");
    std::vector<std::vector<double>> pop(size_t(cfg.population),
                                         std::vector<double>(size_t(cfg.dims)));
    for (auto& p : pop)
        for (double& z : p) z = (cfg.ub - cfg.lb) * rng.uniform() + cfg.lb;
    return pop;
}

// Lemur-guided exploration move toward a strictly better fossa.
inline std::vector<double> exploration_candidate(const std::vector<double>& pos,
                                                 const std::vector<double>& lemur,
                                                 const FoaConfig& cfg, Rng& rng) {
    std::vector<double> out(pos.size());
    for (size_t t = 0; t < pos.size(); ++t) {
        double phi = rng.uniform();
        double I = 1.0 + double(rng.below(2));  // {1,2}
        out[t] = std::clamp(pos[t] + phi * (lemur[t] - I * pos[t]), cfg.lb, cfg.ub);
    }
    return out;
}

// Shrinking-radius exploitation perturbation; radius decays as 1/iteration.
inline std::vector<double> exploitation_candidate(const std::vector<double>& pos, int iteration,
                                                  const FoaConfig& cfg, Rng& rng) {
    if (iteration < 1) throw std::invalid_argument("exploitation: iteration must be >= 1");
    std::vector<double> out(pos.size());
    for (size_t t = 0; t < pos.size(); ++t) {
        double phi = rng.uniform();
        out[t] = std::clamp(pos[t] + (1.0 - 2.0 * phi) * (cfg.ub - cfg.lb) / iteration, cfg.lb,
                            cfg.ub);
    }
    return out;
}

struct FoaResult {
    FeatureMask mask;
    double best_error = 1.0;
    std::vector<double> trace;  // best error per iteration, non-increasing
};

inline FoaResult select_features(const FoaConfig& cfg, const FitnessData& data) {
    Rng master(cfg.seed);
    auto pop = initialize(cfg, master);
    std::vector<Rng> streams;
    for (int k = 0; k < cfg.population; ++k) streams.push_back(master.fork(uint64_t(k)));

    std::vector<double> fit(size_t(cfg.population));
    for (int k = 0; k < cfg.population; ++k)
        fit[size_t(k)] = fitness(mask_from_position(pop[size_t(k)]), data);

    FoaResult res;
    auto record_best = [&]() {
        for (int k = 0; k < cfg.population; ++k)
            if (fit[size_t(k)] < res.best_error) {
                res.best_error = fit[size_t(k)];
                res.mask = mask_from_position(pop[size_t(k)]);
            }
    };
    record_best();

    for (int it = 1; it <= cfg.iterations; ++it) {
        for (int k = 0; k < cfg.population; ++k) {
            Rng& rng = streams[size_t(k)];
            // exploration: chase a uniformly chosen strictly better fossa
            std::vector<int> lemurs;
            for (int h = 0; h < cfg.population; ++h)
                if (h != k && fit[size_t(h)] < fit[size_t(k)]) lemurs.push_back(h);
            if (!lemurs.empty()) {
                int pick = lemurs[size_t(rng.below(lemurs.size()))];
                auto cand = exploration_candidate(pop[size_t(k)], pop[size_t(pick)], cfg, rng);
                double cf = fitness(mask_from_position(cand), data);
                if (cf < fit[size_t(k)]) {
                    pop[size_t(k)] = std::move(cand);
                    fit[size_t(k)] = cf;
                }
            }
            // exploitation: local shrinking-radius probe
            auto cand = exploitation_candidate(pop[size_t(k)], it, cfg, rng);
            double cf = fitness(mask_from_position(cand), data);
            if (cf < fit[size_t(k)]) {
                pop[size_t(k)] = std::move(cand);
                fit[size_t(k)] = cf;
            }
        }
        record_best();
        res.trace.push_back(res.best_error);
    }
    return res;
}

}  // namespace xmq
