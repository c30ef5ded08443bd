#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmq/image.hpp"
#include "xmq/kgraph.hpp"
#include "xmq/skeleton.hpp"

namespace xmq {

struct FeatureVector {
    std::vector<std::string> names;
    std::vector<double> values;

    void push(const std::string& name, double v) {
        names.push_back(name);
        values.push_back(v);
    }

    size_t size() const { return values.size(); }

    double get(const std::string& name) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return values[i];
        throw std::invalid_argument("feature not found: " + name);
    }
};

// --------------------------------------------------------------------------
// Image features.

namespace detail {

struct Moments {
    double mean = 0, variance = 0, skewness = 0, kurtosis = 0;
};

inline Moments moments_of(const std::vector<uint8_t>& data) {
    Moments m;
    double n = double(data.size());
    for (uint8_t v : data) m.mean += v;
    m.mean /= n;
    double m2 = 0, m3 = 0, m4 = 0;
    for (uint8_t v : data) {
        double d = v - m.mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    m.variance = m2;
    if (m2 > 0) {
        m.skewness = m3 / std::pow(m2, 1.5);
        m.kurtosis = m4 / (m2 * m2) - 3.0;  // Fisher
    }
    return m;
}

inline void sobel(const Image& gray, std::vector<double>& gx, std::vector<double>& gy) {
    int w = gray.width, h = gray.height;
    gx.assign(size_t(w) * h, 0.0);
    gy.assign(size_t(w) * h, 0.0);
    auto px = [&](int x, int y) {
        return double(gray.at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)));
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            gx[size_t(y) * w + x] = px(x + 1, y - 1) + 2 * px(x + 1, y) + px(x + 1, y + 1) -
                                    px(x - 1, y - 1) - 2 * px(x - 1, y) - px(x - 1, y + 1);
            gy[size_t(y) * w + x] = px(x - 1, y + 1) + 2 * px(x, y + 1) + px(x + 1, y + 1) -
                                    px(x - 1, y - 1) - 2 * px(x, y - 1) - px(x + 1, y - 1);
        }
}

}  // namespace detail

// GLCM over 8 gray levels with offset (1,0); returns normalized co-occurrence
// probabilities.
inline std::vector<double> glcm_matrix(const Image& gray, int levels = 8) {
    std::vector<double> p(size_t(levels) * levels, 0.0);
    double total = 0;
    for (int y = 0; y < gray.height; ++y)
        for (int x = 0; x + 1 < gray.width; ++x) {
            int a = int(gray.at(x, y)) * levels / 256;
            int b = int(gray.at(x + 1, y)) * levels / 256;
            p[size_t(a) * levels + b] += 1;
            total += 1;
        }
    if (total > 0)
        for (double& v : p) v /= total;
    return p;
}

inline FeatureVector image_features(const Image& img) {
    if (img.empty()) throw std::invalid_argument("image_features: empty image");
    FeatureVector f;
    Image gray = img.gray();

    auto m = detail::moments_of(gray.data);
    f.push("mean", m.mean);
    f.push("variance", m.variance);
    f.push("skewness", m.skewness);
    f.push("kurtosis", m.kurtosis);
    double var_norm = m.variance / (255.0 * 255.0);
    f.push("smoothness", 1.0 - 1.0 / (1.0 + var_norm));

    // 8-bin histogram per channel; grayscale replicates its histogram
    const char* chan_names[3] = {"hist_r", "hist_g", "hist_b"};
    double n = double(gray.data.size());
    for (int c = 0; c < 3; ++c) {
        std::array<double, 8> hist{};
        int src_c = img.channels == 3 ? c : 0;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) hist[size_t(img.at(x, y, src_c)) / 32] += 1;
        for (int b = 0; b < 8; ++b)
            f.push(std::string(chan_names[c]) + "_" + std::to_string(b), hist[size_t(b)] / n);
    }

    // edge density: Sobel magnitude above mean + sigma
    std::vector<double> gx, gy;
    detail::sobel(gray, gx, gy);
    std::vector<double> mag(gx.size());
    double mag_mean = 0;
    for (size_t i = 0; i < gx.size(); ++i) {
        mag[i] = std::hypot(gx[i], gy[i]);
        mag_mean += mag[i];
    }
    mag_mean /= double(mag.size());
    double mag_var = 0;
    for (double v : mag) mag_var += (v - mag_mean) * (v - mag_mean);
    double mag_sd = std::sqrt(mag_var / double(mag.size()));
    double thresh = mag_mean + mag_sd;
    double edges = 0;
    for (double v : mag) edges += v > thresh && v > 0 ? 1 : 0;
    f.push("edge_density", m.variance > 0 ? edges / double(mag.size()) : 0.0);

    // GLCM statistics
    const int L = 8;
    auto p = glcm_matrix(gray, L);
    double contrast = 0, energy = 0, homogeneity = 0;
    double mu_i = 0, mu_j = 0;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            double v = p[size_t(i) * L + j];
            contrast += v * (i - j) * (i - j);
            energy += v * v;
            homogeneity += v / (1.0 + std::abs(i - j));
            mu_i += v * i;
            mu_j += v * j;
        }
    double si = 0, sj = 0, corr = 0;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            double v = p[size_t(i) * L + j];
            si += v * (i - mu_i) * (i - mu_i);
            sj += v * (j - mu_j) * (j - mu_j);
        }
    if (si > 0 && sj > 0) {
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j)
                corr += p[size_t(i) * L + j] * (i - mu_i) * (j - mu_j) / std::sqrt(si * sj);
    }
    f.push("glcm_contrast", contrast);
    f.push("glcm_energy", energy);
    f.push("glcm_homogeneity", homogeneity);
    f.push("glcm_correlation", corr);

    // HOG: 8x8 cells, 9 unsigned orientation bins, 2x2 block L2 normalization,
    // summarized by per-bin means
    const int cell = 8, nbins = 9;
    int cw = std::max(1, gray.width / cell), ch = std::max(1, gray.height / cell);
    std::vector<double> cells(size_t(cw) * ch * nbins, 0.0);
    for (int y = 0; y < gray.height; ++y)
        for (int x = 0; x < gray.width; ++x) {
            size_t i = size_t(y) * gray.width + x;
            double mg = std::hypot(gx[i], gy[i]);
            if (mg <= 0) continue;
            double ang = std::atan2(gy[i], gx[i]);
            if (ang < 0) ang += M_PI;
            if (ang >= M_PI) ang -= M_PI;
            int bin = std::min(nbins - 1, int(ang / M_PI * nbins));
            int cx = std::min(cw - 1, x / cell), cy = std::min(ch - 1, y / cell);
            cells[(size_t(cy) * cw + cx) * nbins + bin] += mg;
        }
    std::array<double, 9> hog_sum{};
    int blocks = 0;
    for (int by = 0; by + 1 < ch || (ch == 1 && by == 0); ++by) {
        for (int bx = 0; bx + 1 < cw || (cw == 1 && bx == 0); ++bx) {
            std::array<double, 9> block{};
            double norm = 0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                    int cy2 = std::min(ch - 1, by + dy), cx2 = std::min(cw - 1, bx + dx);
                    for (int b = 0; b < nbins; ++b) {
                        double v = cells[(size_t(cy2) * cw + cx2) * nbins + b];
                        block[size_t(b)] += v;
                        norm += v * v;
                    }
                }
            norm = std::sqrt(norm) + 1e-9;
            for (int b = 0; b < nbins; ++b) hog_sum[size_t(b)] += block[size_t(b)] / norm;
            ++blocks;
            if (cw == 1) break;
        }
        if (ch == 1) break;
    }
    for (int b = 0; b < nbins; ++b)
        f.push("hog_" + std::to_string(b), blocks ? hog_sum[size_t(b)] / blocks : 0.0);
    return f;
}

// --------------------------------------------------------------------------
// Skeleton features.

inline FeatureVector skeleton_features(const SkeletonImage& s) {
    FeatureVector f;
    auto neighbors = [&](int x, int y) {
        int d = 0;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
                if ((dx || dy) && s.get(x + dx, y + dy)) ++d;
        return d;
    };
    double pixels = 0, branch = 0, ends = 0;
    std::vector<std::pair<int, int>> branch_pts;
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            if (!s.at(x, y)) continue;
            ++pixels;
            int d = neighbors(x, y);
            if (d >= 3) {
                ++branch;
                branch_pts.emplace_back(x, y);
            } else if (d == 1) {
                ++ends;
            }
        }

    // components (8-connected)
    std::vector<uint8_t> seen(s.mask.size(), 0);
    double components = 0;
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            if (!s.at(x, y) || seen[size_t(y) * s.width + x]) continue;
            ++components;
            std::vector<std::pair<int, int>> stack{{x, y}};
            seen[size_t(y) * s.width + x] = 1;
            while (!stack.empty()) {
                auto [cx, cy] = stack.back();
                stack.pop_back();
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int nx = cx + dx, ny = cy + dy;
                        if ((dx || dy) && s.get(nx, ny) && !seen[size_t(ny) * s.width + nx]) {
                            seen[size_t(ny) * s.width + nx] = 1;
                            stack.emplace_back(nx, ny);
                        }
                    }
            }
        }

    // branches: components remaining after branch-point removal
    SkeletonImage without = s;
    for (auto [x, y] : branch_pts) without.at(x, y) = 0;
    std::fill(seen.begin(), seen.end(), 0);
    double branch_count = 0, branch_pixels = 0;
    for (int y = 0; y < without.height; ++y)
        for (int x = 0; x < without.width; ++x) {
            if (!without.at(x, y) || seen[size_t(y) * without.width + x]) continue;
            ++branch_count;
            std::vector<std::pair<int, int>> stack{{x, y}};
            seen[size_t(y) * without.width + x] = 1;
            while (!stack.empty()) {
                auto [cx, cy] = stack.back();
                stack.pop_back();
                ++branch_pixels;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int nx = cx + dx, ny = cy + dy;
                        if ((dx || dy) && without.get(nx, ny) &&
                            !seen[size_t(ny) * without.width + nx]) {
                            seen[size_t(ny) * without.width + nx] = 1;
                            stack.emplace_back(nx, ny);
                        }
                    }
            }
        }

    f.push("pixels", pixels);
    f.push("branch_points", branch);
    f.push("end_points", ends);
    f.push("components", components);
    f.push("mean_branch_length", branch_count > 0 ? branch_pixels / branch_count : 0.0);
    return f;
}

// Fixed 8-slot vector from graph aggregates; zeros for an empty graph.
inline FeatureVector graph_feature_vector(const GraphFeatures& gf) {
    static const char* slots[] = {"node_count",    "edge_count",    "degree_mean",
                                  "degree_max",    "closeness_mean", "closeness_max",
                                  "pagerank_mean", "pagerank_max"};
    FeatureVector f;
    for (const char* s : slots) {
        auto it = gf.aggregates.find(s);
        f.push(s, it == gf.aggregates.end() ? 0.0 : it->second);
    }
    return f;
}

// Concatenation with stable prefixes img./skel./graph.
inline FeatureVector assemble(const FeatureVector& img_f, const FeatureVector& skel_f,
                              const FeatureVector& graph_f) {
    FeatureVector out;
    std::set<std::string> seen;
    auto add = [&](const char* prefix, const FeatureVector& f) {
        for (size_t i = 0; i < f.size(); ++i) {
            std::string name = prefix + f.names[i];
            if (!seen.insert(name).second) throw std::invalid_argument("assemble: duplicate " + name);
            out.push(name, f.values[i]);
        }
    };
    add("img.", img_f);
    add("skel.", skel_f);
    add("graph.", graph_f);
    return out;
}

}  // namespace xmq
