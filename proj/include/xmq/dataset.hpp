#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmq/detector.hpp"
#include "xmq/image.hpp"
#include "xmq/util.hpp"

namespace xmq {

inline const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> v = {"circle", "square", "triangle"};
    return v;
}

// Hue-ordered palette: 30 degrees between neighbours on the color wheel.
inline const std::vector<std::string>& color_names() {
    static const std::vector<std::string> v = {"red",  "orange", "yellow",  "lime",
                                               "green", "teal",  "cyan",    "azure",
                                               "blue",  "violet", "magenta", "pink"};
    return v;
}

// Reference palette (HSV S=0.6 V=0.9); rendered shapes jitter around these.
// Every entry keeps clear luma contrast against the dark background.
inline const std::vector<std::array<int, 3>>& palette() {
    static const std::vector<std::array<int, 3>> v = {
        {230, 92, 92},  {230, 161, 92}, {230, 230, 92},  {161, 230, 92},
        {92, 230, 92},  {92, 230, 161}, {92, 230, 230},  {92, 161, 230},
        {92, 92, 230},  {161, 92, 230}, {230, 92, 230},  {230, 92, 161}};
    return v;
}

// Text-side knowledge of how hues relate; lets an embedding trained on text
// place color words on a ring even when some colors never appear in images.
// Neighbouring wheel colors share the intermediate shade word between them,
// so their context vectors overlap directly (first-order similarity).
// Shade i sits between colors i and i+1; flanking colors mention it often,
// next-nearest colors mention it occasionally, giving a smooth ring.
inline std::vector<std::string> color_adjacency_sentences() {
    static const std::vector<std::string> shades = {
        "vermilion", "amber",    "chartreuse", "harlequin", "jade",    "turquoise",
        "cerulean",  "sapphire", "indigo",     "purple",    "fuchsia", "rose"};
    const auto& c = color_names();
    size_t n = c.size();
    std::vector<std::string> out;
    for (size_t i = 0; i < n; ++i) {
        for (int rep = 0; rep < 3; ++rep) {
            out.push_back(c[i] + " resembles " + shades[i]);
            out.push_back(c[(i + 1) % n] + " resembles " + shades[i]);
        }
        out.push_back(c[(i + n - 1) % n] + " resembles " + shades[i]);
        out.push_back(c[(i + 2) % n] + " resembles " + shades[i]);
    }
    return out;
}

struct ShapeInstance {
    int shape = 0;  // index into shape_names()
    int color = 0;  // index into color_names()
    AbsBox box;     // tight box in image pixels
};

struct QaPair {
    std::string question;
    std::string answer;
};

struct SampleRecord {
    int id = 0;
    Image image;
    std::vector<ShapeInstance> shapes;
    std::string caption;
    std::vector<QaPair> qa;
};

struct Dataset {
    std::vector<SampleRecord> items;
};

// --------------------------------------------------------------------------
// Synthetic generator: 1-3 colored shapes on a noisy background, exact boxes,
// template captions, QA pairs. Deterministic per seed.

struct SynthConfig {
    int image_size = 64;
    int min_shapes = 1, max_shapes = 3;
    int min_extent = 16, max_extent = 24;  // shape bounding-square side
    uint64_t seed = 42;
};

namespace detail {

inline void render_shape(Image& img, const ShapeInstance& s, const std::array<int, 3>& rgb) {
    int x0 = int(s.box.x), y0 = int(s.box.y);
    int w = int(s.box.w), h = int(s.box.h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool inside = false;
            double fx = (x + 0.5) / w, fy = (y + 0.5) / h;
            switch (s.shape) {
                case 0: {  // circle
                    double dx = fx - 0.5, dy = fy - 0.5;
                    inside = dx * dx + dy * dy <= 0.25;
                    break;
                }
                case 1:
                    inside = true;  // square fills its box
                    break;
                case 2:  // upward triangle
                    inside = std::fabs(fx - 0.5) <= fy * 0.5;
                    break;
            }
            if (!inside) continue;
            for (int c = 0; c < 3; ++c)
                img.at(x0 + x, y0 + y, c) = uint8_t(std::clamp(rgb[size_t(c)], 0, 255));
        }
}

inline std::array<int, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - 360.0 * std::floor(h / 360.0);
    double c = v * s;
    double x = c * (1.0 - std::fabs(std::fmod(h / 60.0, 2.0) - 1.0));
    double m = v - c;
    double r = 0, g = 0, b = 0;
    switch (int(h / 60.0)) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    return {int(std::lround((r + m) * 255)), int(std::lround((g + m) * 255)),
            int(std::lround((b + m) * 255))};
}

inline std::string relation_phrase(const ShapeInstance& a, const ShapeInstance& b) {
    double dx = (b.box.x + b.box.w / 2) - (a.box.x + a.box.w / 2);
    double dy = (b.box.y + b.box.h / 2) - (a.box.y + a.box.h / 2);
    if (std::fabs(dx) >= std::fabs(dy)) return "left of";
    return dy > 0 ? "above" : "below";
}

inline const char* count_word(size_t n) {
    static const char* words[] = {"zero", "one", "two", "three"};
    return words[n];
}

}  // namespace detail

inline SampleRecord generate_sample(const SynthConfig& cfg, int id, Rng& rng) {
    SampleRecord rec;
    rec.id = id;
    int sz = cfg.image_size;
    rec.image = Image(sz, sz, 3);
    // noisy gray background
    for (int y = 0; y < sz; ++y)
        for (int x = 0; x < sz; ++x) {
            int base = 45 + int(rng.below(21)) - 10;
            for (int c = 0; c < 3; ++c) rec.image.at(x, y, c) = uint8_t(base);
        }

    int n = cfg.min_shapes + int(rng.below(uint64_t(cfg.max_shapes - cfg.min_shapes + 1)));
    for (int k = 0; k < n; ++k) {
        for (int attempt = 0; attempt < 40; ++attempt) {
            ShapeInstance s;
            s.shape = int(rng.below(3));
            s.color = int(rng.below(color_names().size()));
            int ext = cfg.min_extent + int(rng.below(uint64_t(cfg.max_extent - cfg.min_extent + 1)));
            int x = 2 + int(rng.below(uint64_t(sz - ext - 4)));
            int y = 2 + int(rng.below(uint64_t(sz - ext - 4)));
            s.box = {double(x), double(y), double(ext), double(ext)};
            bool clash = false;
            for (const ShapeInstance& other : rec.shapes) {
                double gap = 3;
                if (s.box.x < other.box.x + other.box.w + gap &&
                    other.box.x < s.box.x + s.box.w + gap &&
                    s.box.y < other.box.y + other.box.h + gap &&
                    other.box.y < s.box.y + s.box.h + gap) {
                    clash = true;
                    break;
                }
            }
            if (clash) continue;
            // jitter in hue space so neighbouring wheel colors span contiguous arcs
            double hue = 30.0 * s.color + rng.uniform(-12.0, 12.0);
            double sat = 0.6 + rng.uniform(-0.05, 0.05);
            double val = 0.9 + rng.uniform(-0.05, 0.05);
            detail::render_shape(rec.image, s, detail::hsv_to_rgb(hue, sat, val));
            rec.shapes.push_back(s);
            break;
        }
    }
    if (rec.shapes.empty()) throw std::runtime_error("generate_sample: placement failed");

    // caption: left-to-right template
    std::sort(rec.shapes.begin(), rec.shapes.end(), [](const ShapeInstance& a, const ShapeInstance& b) {
        double ax = a.box.x + a.box.w / 2, bx = b.box.x + b.box.w / 2;
        if (ax != bx) return ax < bx;
        return a.box.y < b.box.y;
    });
    std::string cap;
    for (size_t i = 0; i < rec.shapes.size(); ++i) {
        const ShapeInstance& s = rec.shapes[i];
        if (i > 0) cap += " " + detail::relation_phrase(rec.shapes[i - 1], s) + " ";
        cap += "a " + color_names()[size_t(s.color)] + " " + shape_names()[size_t(s.shape)];
    }
    rec.caption = cap;

    // QA: shape-unique color questions, color-unique shape questions, count
    for (int kind = 0; kind < 3; ++kind) {
        int cnt = 0, color = -1;
        for (const ShapeInstance& s : rec.shapes)
            if (s.shape == kind) {
                ++cnt;
                color = s.color;
            }
        if (cnt == 1)
            rec.qa.push_back({"what color is the " + shape_names()[size_t(kind)],
                              color_names()[size_t(color)]});
    }
    for (int col = 0; col < int(color_names().size()); ++col) {
        int cnt = 0, shape = -1;
        for (const ShapeInstance& s : rec.shapes)
            if (s.color == col) {
                ++cnt;
                shape = s.shape;
            }
        if (cnt == 1)
            rec.qa.push_back({"what shape is " + color_names()[size_t(col)],
                              shape_names()[size_t(shape)]});
    }
    rec.qa.push_back({"how many shapes are there", detail::count_word(rec.shapes.size())});
    return rec;
}

inline Dataset generate_synthetic(int n, uint64_t seed, const SynthConfig& base = {}) {
    if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
    SynthConfig cfg = base;
    cfg.seed = seed;
    Rng master(seed);
    Dataset ds;
    for (int i = 0; i < n; ++i) {
        Rng rng = master.fork(uint64_t(i));
        ds.items.push_back(generate_sample(cfg, i, rng));
    }
    return ds;
}

// Seeded disjoint 80/20 split; returns item indices.
struct Split {
    std::vector<size_t> train, test;
};

inline Split split_dataset(const Dataset& ds, double train_frac, uint64_t seed) {
    if (train_frac <= 0 || train_frac > 1) throw std::invalid_argument("split: bad fraction");
    std::vector<size_t> idx(ds.items.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    size_t n_train = size_t(std::llround(train_frac * double(idx.size())));
    Split sp;
    sp.train.assign(idx.begin(), idx.begin() + long(n_train));
    sp.test.assign(idx.begin() + long(n_train), idx.end());
    return sp;
}

// --------------------------------------------------------------------------
// Serialization: images as PNGs next to a JSON index.

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    nlohmann::json root;
    root["items"] = nlohmann::json::array();
    for (const SampleRecord& r : ds.items) {
        std::string file = "img_" + std::to_string(r.id) + ".png";
        save_png(r.image, dir + "/" + file);
        nlohmann::json item;
        item["id"] = r.id;
        item["file"] = file;
        item["caption"] = r.caption;
        item["shapes"] = nlohmann::json::array();
        for (const ShapeInstance& s : r.shapes)
            item["shapes"].push_back({{"shape", s.shape},
                                      {"color", s.color},
                                      {"box", {s.box.x, s.box.y, s.box.w, s.box.h}}});
        item["qa"] = nlohmann::json::array();
        for (const QaPair& q : r.qa) item["qa"].push_back({{"q", q.question}, {"a", q.answer}});
        root["items"].push_back(std::move(item));
    }
    std::ofstream out(dir + "/dataset.json");
    if (!out) throw std::runtime_error("cannot write dataset index in " + dir);
    out << root.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/dataset.json");
    if (!in) throw std::runtime_error("missing dataset index: " + dir + "/dataset.json");
    nlohmann::json root = nlohmann::json::parse(in);
    Dataset ds;
    for (const auto& item : root.at("items")) {
        SampleRecord r;
        r.id = item.at("id");
        r.image = load_png(dir + "/" + item.at("file").get<std::string>());
        r.caption = item.at("caption");
        for (const auto& s : item.at("shapes")) {
            ShapeInstance si;
            si.shape = s.at("shape");
            si.color = s.at("color");
            auto b = s.at("box");
            si.box = {b[0], b[1], b[2], b[3]};
            r.shapes.push_back(si);
        }
        for (const auto& q : item.at("qa")) r.qa.push_back({q.at("q"), q.at("a")});
        ds.items.push_back(std::move(r));
    }
    return ds;
}

// --------------------------------------------------------------------------
// COCO-style subset ingestion (images/annotations/categories arrays).

inline Dataset ingest_coco_subset(const std::string& annotation_file, const std::string& image_dir,
                                  int limit) {
    if (limit < 0) throw std::invalid_argument("ingest_coco_subset: negative limit");
    Dataset ds;
    if (limit == 0) return ds;
    std::ifstream in(annotation_file);
    if (!in) throw std::runtime_error("cannot open annotations: " + annotation_file);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("malformed COCO JSON at byte " + std::to_string(e.byte) + ": " +
                                 e.what());
    }
    std::map<int, size_t> by_id;
    for (const auto& im : root.at("images")) {
        if (int(ds.items.size()) >= limit) break;
        SampleRecord r;
        r.id = im.at("id");
        r.image = load_image(image_dir + "/" + im.at("file_name").get<std::string>());
        by_id[r.id] = ds.items.size();
        ds.items.push_back(std::move(r));
    }
    std::vector<int> dangling;
    if (root.contains("annotations"))
        for (const auto& an : root["annotations"]) {
            int img_id = an.at("image_id");
            auto it = by_id.find(img_id);
            if (it == by_id.end()) {
                // only an integrity problem when the image was within the limit
                bool listed = false;
                for (const auto& im : root.at("images"))
                    if (im.at("id") == img_id) {
                        listed = true;
                        break;
                    }
                if (!listed) dangling.push_back(img_id);
                continue;
            }
            SampleRecord& r = ds.items[it->second];
            if (an.contains("caption")) {
                if (r.caption.empty()) r.caption = an["caption"];
            } else if (an.contains("bbox")) {
                ShapeInstance s;
                auto b = an["bbox"];
                s.box = {b[0], b[1], b[2], b[3]};
                s.shape = an.value("category_id", 0);
                r.shapes.push_back(s);
            }
        }
    if (!dangling.empty()) {
        std::string ids;
        for (int id : dangling) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
        throw std::runtime_error("annotations reference missing image ids: " + ids);
    }
    return ds;
}

}  // namespace xmq
