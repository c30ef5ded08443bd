#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "xmq/image.hpp"

namespace xmq {

struct MedianParams {
    int window = 3;  // odd side length, replicate-border
};

struct ClaheParams {
    int tile = 8;
    int bins = 256;
    double sigma_floor = 1.05;  // minimum Pareto exponent
    double gini_floor = 0.01;   // minimum clip fraction
    double count_scale = 4.0;   // clip-fraction -> count multiplier
};

// --------------------------------------------------------------------------
// Resize (bilinear, center-aligned sampling).

inline Image resize(const Image& img, int target_w, int target_h) {
    if (target_w < 1 || target_h < 1) throw std::invalid_argument("resize: zero target dimension");
    if (img.empty()) throw std::invalid_argument("resize: empty image");
    Image out(target_w, target_h, img.channels);
    double sx = double(img.width) / target_w;
    double sy = double(img.height) / target_h;
    for (int y = 0; y < target_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = int(std::floor(fy));
        double qy = fy - y0;
        int y0c = std::clamp(y0, 0, img.height - 1);
        int y1c = std::clamp(y0 + 1, 0, img.height - 1);
        for (int x = 0; x < target_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = int(std::floor(fx));
            double qx = fx - x0;
            int x0c = std::clamp(x0, 0, img.width - 1);
            int x1c = std::clamp(x0 + 1, 0, img.width - 1);
            for (int c = 0; c < img.channels; ++c) {
                double v = (1 - qx) * (1 - qy) * img.at(x0c, y0c, c) +
                           qx * (1 - qy) * img.at(x1c, y0c, c) +
                           (1 - qx) * qy * img.at(x0c, y1c, c) +
                           qx * qy * img.at(x1c, y1c, c);
                out.at(x, y, c) = uint8_t(std::clamp(v + 0.5, 0.0, 255.0));
            }
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// Median filter.

// Median of an ascending-sorted window. Even lengths average the two middle
// values and round half-up so the result stays an 8-bit intensity.
inline int median_of_sorted(const std::vector<int>& sorted) {
    if (sorted.empty()) throw std::invalid_argument("median of empty window");
    size_t n = sorted.size();
    if (n % 2 == 1) return sorted[n / 2];
    return (sorted[n / 2 - 1] + sorted[n / 2] + 1) / 2;
}

inline Image median_filter(const Image& img, const MedianParams& params) {
    int w = params.window;
    if (w < 3 || w % 2 == 0) throw std::invalid_argument("median_filter: window must be odd >= 3");
    if (w > img.width || w > img.height)
        throw std::invalid_argument("median_filter: window larger than image");
    Image out(img.width, img.height, img.channels);
    int r = w / 2;
    std::vector<int> vals;
    vals.reserve(size_t(w) * w);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                vals.clear();
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        int xs = std::clamp(x + dx, 0, img.width - 1);
                        int ys = std::clamp(y + dy, 0, img.height - 1);
                        vals.push_back(img.at(xs, ys, c));
                    }
                std::sort(vals.begin(), vals.end());
                out.at(x, y, c) = uint8_t(median_of_sorted(vals));
            }
    return out;
}

// --------------------------------------------------------------------------
// PG-CLAHE.

// Hill estimate of the Pareto exponent over the top quartile of the nonzero
// histogram counts; degenerate tails clamp to sigma_floor.
inline double estimate_pareto_exponent(const std::vector<double>& hist,
                                       double sigma_floor = 1.05) {
    std::vector<double> nz;
    for (double h : hist)
        if (h > 0) nz.push_back(h);
    if (nz.empty()) throw std::invalid_argument("estimate_pareto_exponent: all-zero histogram");
    if (nz.size() < 2) return sigma_floor;
    std::sort(nz.begin(), nz.end(), std::greater<double>());
    size_t n_tail = std::max<size_t>(2, (nz.size() + 3) / 4);
    n_tail = std::min(n_tail, nz.size());
    double x_min = nz[n_tail - 1];
    double sum = 0;
    for (size_t i = 0; i < n_tail; ++i) sum += std::log(nz[i] / x_min);
    if (sum <= 0) return sigma_floor;
    return std::max(sigma_floor, double(n_tail) / sum);
}

// Gini index 1 - 2/(sigma+1), floored.
inline double gini_clip(double sigma, double gini_floor = 0.01) {
    return std::max(gini_floor, 1.0 - 2.0 / (sigma + 1.0));
}

namespace detail {

// Per-tile intensity mapping: bin -> [0,1].
struct TileMap {
    std::vector<double> mu;
};

inline TileMap build_tile_map(const std::vector<double>& hist, double tile_pixels,
                              const ClaheParams& p) {
    TileMap m;
    m.mu.assign(size_t(p.bins), 0.5);
    if (tile_pixels <= 0) return m;

    int lo = -1, hi = -1;
    for (int b = 0; b < p.bins; ++b)
        if (hist[size_t(b)] > 0) {
            if (lo < 0) lo = b;
            hi = b;
        }
    if (lo < 0 || lo == hi) return m;  // empty or single-level tile: mid-gray

    double sigma = estimate_pareto_exponent(hist, p.sigma_floor);
    double chi = gini_clip(sigma, p.gini_floor);
    double threshold = chi * (tile_pixels / p.bins) * p.count_scale;

    std::vector<double> clipped(size_t(p.bins));
    double excess = 0;
    for (int b = 0; b < p.bins; ++b) {
        clipped[size_t(b)] = std::min(hist[size_t(b)], threshold);
        excess += hist[size_t(b)] - clipped[size_t(b)];
    }
    double redist = excess / p.bins;
    std::vector<double> cdf(size_t(p.bins));
    double acc = 0;
    for (int b = 0; b < p.bins; ++b) {
        acc += clipped[size_t(b)] + redist;
        cdf[size_t(b)] = acc / tile_pixels;
    }
    // Min-max normalization across the occupied range so the lowest and
    // highest present intensities map to exactly 0 and 1.
    double cmin = cdf[size_t(lo)], cmax = cdf[size_t(hi)];
    for (int b = 0; b < p.bins; ++b)
        m.mu[size_t(b)] = std::clamp((cdf[size_t(b)] - cmin) / (cmax - cmin), 0.0, 1.0);
    return m;
}

}  // namespace detail

inline Image clahe_enhance(const Image& img, const ClaheParams& params) {
    if (params.tile < 2 || params.bins < 2) throw std::invalid_argument("clahe: bad params");
    if (img.empty()) throw std::invalid_argument("clahe: empty image");
    const Image gray = img.gray();

    int tile = params.tile;
    bool single = tile > gray.width || tile > gray.height;
    int tx = single ? 1 : (gray.width + tile - 1) / tile;
    int ty = single ? 1 : (gray.height + tile - 1) / tile;
    int tw = single ? gray.width : tile;
    int th = single ? gray.height : tile;

    auto bin_of = [&](uint8_t v) { return int(v) * params.bins / 256; };

    std::vector<detail::TileMap> maps(size_t(tx) * ty);
    for (int tj = 0; tj < ty; ++tj)
        for (int ti = 0; ti < tx; ++ti) {
            int x0 = ti * tw, y0 = tj * th;
            int x1 = std::min(x0 + tw, gray.width), y1 = std::min(y0 + th, gray.height);
            std::vector<double> hist(size_t(params.bins), 0.0);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) hist[size_t(bin_of(gray.at(x, y)))] += 1;
            maps[size_t(tj) * tx + ti] =
                detail::build_tile_map(hist, double(x1 - x0) * (y1 - y0), params);
        }

    Image enhanced(gray.width, gray.height, 1);
    for (int y = 0; y < gray.height; ++y) {
        double fy = (y - th / 2.0) / th;
        int j0 = int(std::floor(fy));
        double q = fy - j0;
        int j0c = std::clamp(j0, 0, ty - 1), j1c = std::clamp(j0 + 1, 0, ty - 1);
        for (int x = 0; x < gray.width; ++x) {
            double fx = (x - tw / 2.0) / tw;
            int i0 = int(std::floor(fx));
            double p = fx - i0;
            int i0c = std::clamp(i0, 0, tx - 1), i1c = std::clamp(i0 + 1, 0, tx - 1);
            int b = bin_of(gray.at(x, y));
            double v = (1 - p) * (1 - q) * maps[size_t(j0c) * tx + i0c].mu[size_t(b)] +
                       p * (1 - q) * maps[size_t(j0c) * tx + i1c].mu[size_t(b)] +
                       p * q * maps[size_t(j1c) * tx + i1c].mu[size_t(b)] +
                       (1 - p) * q * maps[size_t(j1c) * tx + i0c].mu[size_t(b)];
            enhanced.at(x, y) = uint8_t(std::clamp(255.0 * v + 0.5, 0.0, 255.0));
        }
    }

    if (img.channels == 1) return enhanced;
    // 3-channel: rescale RGB by the luma gain.
    Image out(img.width, img.height, 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double y_old = gray.at(x, y);
            double gain = y_old > 0 ? enhanced.at(x, y) / y_old : 1.0;
            for (int c = 0; c < 3; ++c)
                out.at(x, y, c) = uint8_t(std::clamp(img.at(x, y, c) * gain + 0.5, 0.0, 255.0));
        }
    return out;
}

}  // namespace xmq
