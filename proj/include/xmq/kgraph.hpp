#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmq/detector.hpp"

namespace xmq {

// Region statistics feeding the CRF feature functions.
struct Region {
    AbsBox box;
    double mean_intensity = 0;  // [0,255]
    double area_frac = 0;       // box area / image area
    int detector_class = -1;    // -1 when the region came from a skeleton component
};

enum class RelationKind { LeftOf, RightOf, Above, Below, Overlaps, Near };

inline const char* relation_name(RelationKind k) {
    switch (k) {
        case RelationKind::LeftOf: return "left-of";
        case RelationKind::RightOf: return "right-of";
        case RelationKind::Above: return "above";
        case RelationKind::Below: return "below";
        case RelationKind::Overlaps: return "overlaps";
        case RelationKind::Near: return "near";
    }
    return "?";
}

struct Entity {
    int id = 0;
    int label = 0;
    std::string label_name;
    AbsBox region;
    double cx = 0, cy = 0;
    std::string source;  // "detection" or "skeleton"
};

struct Relation {
    int src = 0, dst = 0;
    RelationKind kind = RelationKind::Near;

    auto operator<=>(const Relation&) const = default;
};

// Log-linear model over region labelings. Unary indicator basis:
//   0: area fraction above 0.05
//   1: wide aspect (w/h > 1.2)
//   2: bright region (mean intensity > 127)
//   3: detector class prior (label equals the detector's class)
// Pairwise: same-label bonus for adjacent regions, label-order bonus for
// left-to-right pairs.
struct CrfModel {
    std::vector<std::string> labels;
    std::vector<std::array<double, 4>> unary;  // [label][feature]
    double w_adjacent_same = 0;
    double w_leftof_order = 0;
    int enumeration_cap = 8;

    int num_labels() const { return int(labels.size()); }

    static CrfModel with_labels(std::vector<std::string> names) {
        CrfModel m;
        m.labels = std::move(names);
        m.unary.assign(m.labels.size(), {0, 0, 0, 0});
        return m;
    }
};

namespace detail {

inline std::array<double, 4> unary_indicators(const Region& r, int label) {
    double wide = r.box.h > 0 && (r.box.w / r.box.h) > 1.2 ? 1.0 : 0.0;
    return {r.area_frac > 0.05 ? 1.0 : 0.0, wide, r.mean_intensity > 127 ? 1.0 : 0.0,
            r.detector_class == label ? 1.0 : 0.0};
}

inline bool regions_adjacent(const Region& a, const Region& b) {
    double ix = std::min(a.box.x + a.box.w, b.box.x + b.box.w) - std::max(a.box.x, b.box.x);
    double iy = std::min(a.box.y + a.box.h, b.box.y + b.box.h) - std::max(a.box.y, b.box.y);
    return ix > 0 && iy > 0;
}

}  // namespace detail

// Unnormalized log-score of a labeling.
inline double crf_score(const CrfModel& m, const std::vector<Region>& regions,
                        const std::vector<int>& labeling) {
    if (labeling.size() != regions.size()) throw std::invalid_argument("crf_score: |Y| mismatch");
    double score = 0;
    for (size_t i = 0; i < regions.size(); ++i) {
        int y = labeling[i];
        if (y < 0 || y >= m.num_labels()) throw std::invalid_argument("crf_score: label outside vocabulary");
        auto f = detail::unary_indicators(regions[i], y);
        for (int k = 0; k < 4; ++k) score += m.unary[size_t(y)][size_t(k)] * f[size_t(k)];
    }
    for (size_t i = 0; i < regions.size(); ++i)
        for (size_t j = i + 1; j < regions.size(); ++j) {
            if (detail::regions_adjacent(regions[i], regions[j]) && labeling[i] == labeling[j])
                score += m.w_adjacent_same;
            double cxi = regions[i].box.x + regions[i].box.w / 2;
            double cxj = regions[j].box.x + regions[j].box.w / 2;
            if (cxi < cxj && labeling[i] < labeling[j]) score += m.w_leftof_order;
            if (cxj < cxi && labeling[j] < labeling[i]) score += m.w_leftof_order;
        }
    return score;
}

// log normalization factor via exact enumeration; nullopt when the instance
// exceeds the enumeration cap.
inline std::optional<double> crf_normalize(const CrfModel& m, const std::vector<Region>& regions) {
    int n = int(regions.size());
    if (n > m.enumeration_cap) return std::nullopt;
    int L = m.num_labels();
    if (L < 1) throw std::invalid_argument("crf_normalize: empty label set");
    std::vector<int> y(size_t(n), 0);
    double max_score = -1e300;
    std::vector<double> scores;
    for (;;) {
        scores.push_back(crf_score(m, regions, y));
        max_score = std::max(max_score, scores.back());
        int i = n - 1;
        while (i >= 0 && ++y[size_t(i)] == L) y[size_t(i--)] = 0;
        if (i < 0) break;
    }
    double sum = 0;
    for (double s : scores) sum += std::exp(s - max_score);
    return max_score + std::log(sum);
}

// Argmax labeling; exact within the cap, ties broken toward the
// lexicographically smallest label vector. Over the cap each region takes its
// independent unary argmax.
inline std::vector<int> decode_labels(const CrfModel& m, const std::vector<Region>& regions) {
    int n = int(regions.size());
    int L = m.num_labels();
    if (n == 0) return {};
    if (L < 1) throw std::invalid_argument("decode_labels: empty label set");
    if (n > m.enumeration_cap) {
        std::vector<int> out(size_t(n), 0);
        for (int i = 0; i < n; ++i) {
            double best = -1e300;
            for (int y = 0; y < L; ++y) {
                auto f = detail::unary_indicators(regions[size_t(i)], y);
                double s = 0;
                for (int k = 0; k < 4; ++k) s += m.unary[size_t(y)][size_t(k)] * f[size_t(k)];
                if (s > best) {
                    best = s;
                    out[size_t(i)] = y;
                }
            }
        }
        return out;
    }
    std::vector<int> y(size_t(n), 0), best_y = y;
    double best = -1e300;
    for (;;) {
        double s = crf_score(m, regions, y);
        if (s > best) {
            best = s;
            best_y = y;
        }
        int i = n - 1;
        while (i >= 0 && ++y[size_t(i)] == L) y[size_t(i--)] = 0;
        if (i < 0) break;
    }
    return best_y;
}

struct RegionSource {
    Region region;
    std::string source;
};

inline std::vector<Entity> label_entities(const CrfModel& m,
                                          const std::vector<RegionSource>& sources) {
    std::vector<Region> regions;
    regions.reserve(sources.size());
    for (const auto& s : sources) regions.push_back(s.region);
    std::vector<int> labels = decode_labels(m, regions);
    std::vector<Entity> out;
    for (size_t i = 0; i < sources.size(); ++i) {
        Entity e;
        e.id = int(i);
        e.label = labels[i];
        e.label_name = m.labels[size_t(labels[i])];
        e.region = sources[i].region.box;
        e.cx = e.region.x + e.region.w / 2;
        e.cy = e.region.y + e.region.h / 2;
        e.source = sources[i].source;
        out.push_back(e);
    }
    return out;
}

// Spatial predicate table over ordered entity pairs.
inline std::vector<Relation> extract_relations(const std::vector<Entity>& entities) {
    std::vector<Relation> rels;
    auto diag = [](const Entity& e) { return std::hypot(e.region.w, e.region.h); };
    for (size_t i = 0; i < entities.size(); ++i)
        for (size_t j = 0; j < entities.size(); ++j) {
            if (i == j) continue;
            const Entity& a = entities[i];
            const Entity& b = entities[j];
            double ix = std::min(a.region.x + a.region.w, b.region.x + b.region.w) -
                        std::max(a.region.x, b.region.x);
            double iy = std::min(a.region.y + a.region.h, b.region.y + b.region.h) -
                        std::max(a.region.y, b.region.y);
            if (ix > 0 && iy > 0) {
                rels.push_back({a.id, b.id, RelationKind::Overlaps});
            } else {
                double dx = b.cx - a.cx, dy = b.cy - a.cy;
                RelationKind k = std::fabs(dx) >= std::fabs(dy)
                                     ? (dx > 0 ? RelationKind::LeftOf : RelationKind::RightOf)
                                     : (dy > 0 ? RelationKind::Above : RelationKind::Below);
                rels.push_back({a.id, b.id, k});
            }
            double dist = std::hypot(b.cx - a.cx, b.cy - a.cy);
            if (dist < 1.5 * 0.5 * (diag(a) + diag(b)))
                rels.push_back({a.id, b.id, RelationKind::Near});
        }
    return rels;
}

struct KnowledgeGraph {
    std::vector<Entity> nodes;
    std::vector<Relation> edges;
};

inline KnowledgeGraph build_graph(std::vector<Entity> entities, const std::vector<Relation>& rels) {
    KnowledgeGraph g;
    std::set<int> ids;
    for (const Entity& e : entities) ids.insert(e.id);
    std::set<Relation> seen;
    for (const Relation& r : rels) {
        if (!ids.count(r.src) || !ids.count(r.dst))
            throw std::invalid_argument("build_graph: dangling edge");
        if (seen.insert(r).second) g.edges.push_back(r);
    }
    g.nodes = std::move(entities);
    return g;
}

// Per-node degree, closeness and PageRank over the undirected simple graph,
// plus graph-level aggregates.
struct GraphFeatures {
    std::vector<double> degree;
    std::vector<double> closeness;
    std::vector<double> pagerank;
    std::map<std::string, double> aggregates;
};

inline GraphFeatures graph_features(const KnowledgeGraph& g) {
    GraphFeatures f;
    size_t n = g.nodes.size();
    if (n == 0) return f;
    std::map<int, size_t> index;
    for (size_t i = 0; i < n; ++i) index[g.nodes[i].id] = i;

    std::vector<std::set<size_t>> adj(n);
    for (const Relation& r : g.edges) {
        size_t u = index.at(r.src), v = index.at(r.dst);
        if (u == v) continue;
        adj[u].insert(v);
        adj[v].insert(u);
    }

    f.degree.resize(n);
    for (size_t i = 0; i < n; ++i) f.degree[i] = double(adj[i].size());

    // closeness = (n-1) / sum of BFS distances to reachable nodes; 0 if none
    f.closeness.assign(n, 0.0);
    for (size_t s = 0; s < n; ++s) {
        std::vector<int> dist(n, -1);
        std::vector<size_t> queue{s};
        dist[s] = 0;
        for (size_t qi = 0; qi < queue.size(); ++qi) {
            size_t u = queue[qi];
            for (size_t v : adj[u])
                if (dist[v] < 0) {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
        }
        long sum = 0;
        for (size_t v = 0; v < n; ++v)
            if (v != s && dist[v] > 0) sum += dist[v];
        if (sum > 0) f.closeness[s] = double(n - 1) / double(sum);
    }

    // PageRank, damping 0.85, dangling mass spread uniformly
    const double d = 0.85;
    f.pagerank.assign(n, 1.0 / double(n));
    for (int it = 0; it < 100; ++it) {
        std::vector<double> next(n, (1.0 - d) / double(n));
        double dangling = 0;
        for (size_t u = 0; u < n; ++u) {
            if (adj[u].empty()) {
                dangling += f.pagerank[u];
                continue;
            }
            double share = f.pagerank[u] / double(adj[u].size());
            for (size_t v : adj[u]) next[v] += d * share;
        }
        for (size_t v = 0; v < n; ++v) next[v] += d * dangling / double(n);
        double delta = 0;
        for (size_t v = 0; v < n; ++v) delta += std::fabs(next[v] - f.pagerank[v]);
        f.pagerank = std::move(next);
        if (delta < 1e-8) break;
    }

    auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / double(v.size());
    };
    auto maxv = [](const std::vector<double>& v) {
        return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
    };
    f.aggregates["node_count"] = double(n);
    f.aggregates["edge_count"] = double(g.edges.size());
    f.aggregates["degree_mean"] = mean(f.degree);
    f.aggregates["degree_max"] = maxv(f.degree);
    f.aggregates["closeness_mean"] = mean(f.closeness);
    f.aggregates["closeness_max"] = maxv(f.closeness);
    f.aggregates["pagerank_mean"] = mean(f.pagerank);
    f.aggregates["pagerank_max"] = maxv(f.pagerank);
    return f;
}

}  // namespace xmq
