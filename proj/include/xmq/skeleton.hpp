#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "xmq/image.hpp"

namespace xmq {

// Binary raster; 1 = foreground / skeleton pixel.
struct SkeletonImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> mask;

    SkeletonImage() = default;
    SkeletonImage(int w, int h) : width(w), height(h), mask(size_t(w) * h, 0) {}

    uint8_t& at(int x, int y) { return mask[size_t(y) * width + x]; }
    uint8_t at(int x, int y) const { return mask[size_t(y) * width + x]; }
    uint8_t get(int x, int y) const {
        if (x < 0 || y < 0 || x >= width || y >= height) return 0;
        return at(x, y);
    }

    size_t count() const {
        size_t n = 0;
        for (uint8_t v : mask) n += v != 0;
        return n;
    }

    bool operator==(const SkeletonImage&) const = default;
};

struct ThresholdPolicy {
    bool use_otsu = true;
    int fixed = 128;

    static ThresholdPolicy otsu() { return {true, 0}; }
    static ThresholdPolicy fixed_at(int t) { return {false, t}; }
};

// Otsu threshold over the gray histogram. Returns -1 when there is no class
// separation (single intensity level).
inline int otsu_threshold(const Image& gray) {
    std::array<size_t, 256> hist{};
    for (uint8_t v : gray.data) hist[v]++;
    size_t total = gray.data.size();
    double sum_all = 0;
    for (int i = 0; i < 256; ++i) sum_all += double(i) * double(hist[size_t(i)]);
    double sum_bg = 0, w_bg = 0;
    double best_var = 0;
    int best_t = -1;
    for (int t = 0; t < 255; ++t) {
        w_bg += double(hist[size_t(t)]);
        if (w_bg == 0) continue;
        double w_fg = double(total) - w_bg;
        if (w_fg == 0) break;
        sum_bg += double(t) * double(hist[size_t(t)]);
        double m_bg = sum_bg / w_bg;
        double m_fg = (sum_all - sum_bg) / w_fg;
        double var = w_bg * w_fg * (m_bg - m_fg) * (m_bg - m_fg);
        if (var > best_var) {
            best_var = var;
            best_t = t;
        }
    }
    return best_var > 0 ? best_t : -1;
}

inline SkeletonImage binarize(const Image& crop, ThresholdPolicy policy = ThresholdPolicy::otsu()) {
    if (crop.empty()) throw std::invalid_argument("binarize: empty crop");
    Image gray = crop.gray();
    int t;
    if (policy.use_otsu) {
        t = otsu_threshold(gray);
        if (t < 0) return SkeletonImage(gray.width, gray.height);  // no separation
    } else {
        t = policy.fixed;
    }
    SkeletonImage out(gray.width, gray.height);
    for (size_t i = 0; i < gray.data.size(); ++i) out.mask[i] = gray.data[i] > t ? 1 : 0;
    return out;
}

namespace detail {

// Neighbors P2..P9, clockwise from north.
inline std::array<uint8_t, 8> neighborhood(const SkeletonImage& m, int x, int y) {
    return {m.get(x, y - 1), m.get(x + 1, y - 1), m.get(x + 1, y), m.get(x + 1, y + 1),
            m.get(x, y + 1), m.get(x - 1, y + 1), m.get(x - 1, y), m.get(x - 1, y - 1)};
}

inline int transitions(const std::array<uint8_t, 8>& p) {
    int a = 0;
    for (int i = 0; i < 8; ++i)
        if (p[size_t(i)] == 0 && p[size_t((i + 1) % 8)] == 1) ++a;
    return a;
}

}  // namespace detail

// Zhang-Suen two-subiteration thinning, iterated to convergence.
inline SkeletonImage thin(const SkeletonImage& mask) {
    SkeletonImage m = mask;
    bool changed = true;
    std::vector<std::pair<int, int>> to_clear;
    while (changed) {
        changed = false;
        for (int sub = 0; sub < 2; ++sub) {
            to_clear.clear();
            for (int y = 0; y < m.height; ++y)
                for (int x = 0; x < m.width; ++x) {
                    if (!m.at(x, y)) continue;
                    auto p = detail::neighborhood(m, x, y);
                    int b = 0;
                    for (uint8_t v : p) b += v;
                    if (b < 2 || b > 6) continue;
                    if (detail::transitions(p) != 1) continue;
                    // p[0]=P2 p[2]=P4 p[4]=P6 p[6]=P8
                    if (sub == 0) {
                        if (p[0] && p[2] && p[4]) continue;
                        if (p[2] && p[4] && p[6]) continue;
                    } else {
                        if (p[0] && p[2] && p[6]) continue;
                        if (p[0] && p[4] && p[6]) continue;
                    }
                    to_clear.emplace_back(x, y);
                }
            for (auto [x, y] : to_clear) m.at(x, y) = 0;
            if (!to_clear.empty()) changed = true;
        }
    }
    return m;
}

// Remove branches of length <= max_len hanging off branch points. Open lines
// without a branch point are left untouched.
inline SkeletonImage prune_spurs(const SkeletonImage& skel, int max_len = 3) {
    SkeletonImage m = skel;
    auto degree = [&](int x, int y) {
        auto p = detail::neighborhood(m, x, y);
        int d = 0;
        for (uint8_t v : p) d += v;
        return d;
    };
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            if (!m.at(x, y) || degree(x, y) != 1) continue;
            // trace from the endpoint
            std::vector<std::pair<int, int>> path{{x, y}};
            int cx = x, cy = y, px = -1, py = -1;
            bool hit_branch = false;
            while (int(path.size()) <= max_len) {
                int nx = -1, ny = -1;
                for (int dy = -1; dy <= 1 && nx < 0; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!dx && !dy) continue;
                        int ax = cx + dx, ay = cy + dy;
                        if (m.get(ax, ay) && !(ax == px && ay == py)) {
                            nx = ax;
                            ny = ay;
                            break;
                        }
                    }
                if (nx < 0) break;
                if (degree(nx, ny) >= 3) {
                    hit_branch = true;
                    break;
                }
                px = cx;
                py = cy;
                cx = nx;
                cy = ny;
                path.emplace_back(cx, cy);
            }
            if (hit_branch && int(path.size()) <= max_len)
                for (auto [ax, ay] : path) m.at(ax, ay) = 0;
        }
    return m;
}

inline void save_skeleton(const SkeletonImage& s, const std::string& path) {
    Image img(s.width, s.height, 1);
    for (size_t i = 0; i < s.mask.size(); ++i) img.data[i] = s.mask[i] ? 255 : 0;
    save_pnm(img, path);
}

inline SkeletonImage load_skeleton(const std::string& path) {
    Image img = load_pnm(path).gray();
    SkeletonImage s(img.width, img.height);
    for (size_t i = 0; i < img.data.size(); ++i) s.mask[i] = img.data[i] > 127 ? 1 : 0;
    return s;
}

}  // namespace xmq
