#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmq/captioner.hpp"
#include "xmq/dataset.hpp"
#include "xmq/detector.hpp"
#include "xmq/features.hpp"
#include "xmq/foa.hpp"
#include "xmq/imgproc.hpp"
#include "xmq/kgraph.hpp"
#include "xmq/metrics.hpp"
#include "xmq/skeleton.hpp"
#include "xmq/textkw.hpp"
#include "xmq/util.hpp"

namespace xmq {

namespace fs = std::filesystem;

// --------------------------------------------------------------------------
// Configuration.

struct PipelineConfig {
    uint64_t seed = 42;
    std::string out_dir = "out";
    std::string data_dir;  // synthetic dataset directory (dataset.json + PNGs)
    double train_frac = 0.8;

    MedianParams median;
    ClaheParams clahe;
    DetectorConfig detector;
    DetectorTrainConfig detector_train;
    FoaConfig foa;
    ModelConfig captioner;
    TrainConfig captioner_train;
    int encoder_dim = 64;
    int encoder_window = 5;
};

inline PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.train_frac = j.value("train_frac", c.train_frac);
    if (j.contains("median")) c.median.window = j["median"].value("window", c.median.window);
    if (j.contains("clahe")) {
        auto& cj = j["clahe"];
        c.clahe.tile = cj.value("tile", c.clahe.tile);
        c.clahe.bins = cj.value("bins", c.clahe.bins);
        c.clahe.count_scale = cj.value("count_scale", c.clahe.count_scale);
    }
    if (j.contains("detector")) {
        auto& dj = j["detector"];
        c.detector.grid = dj.value("grid", c.detector.grid);
        c.detector.boxes_per_cell = dj.value("boxes_per_cell", c.detector.boxes_per_cell);
        c.detector.num_classes = dj.value("num_classes", c.detector.num_classes);
        c.detector.nms_iou = dj.value("nms_iou", c.detector.nms_iou);
        c.detector.score_floor = dj.value("score_floor", c.detector.score_floor);
        c.detector.easom_gain = dj.value("easom_gain", c.detector.easom_gain);
    }
    if (j.contains("detector_train")) {
        auto& tj = j["detector_train"];
        c.detector_train.epochs = tj.value("epochs", c.detector_train.epochs);
        c.detector_train.lr = tj.value("lr", c.detector_train.lr);
    }
    if (j.contains("foa")) {
        auto& fj = j["foa"];
        c.foa.population = fj.value("population", c.foa.population);
        c.foa.iterations = fj.value("iterations", c.foa.iterations);
    }
    if (j.contains("captioner")) {
        auto& mj = j["captioner"];
        c.captioner.d_model = mj.value("d_model", c.captioner.d_model);
        c.captioner.heads = mj.value("heads", c.captioner.heads);
        c.captioner.blocks = mj.value("blocks", c.captioner.blocks);
        c.captioner.context = mj.value("context", c.captioner.context);
        c.captioner.dropout = mj.value("dropout", c.captioner.dropout);
        c.captioner.mixup_beta = mj.value("mixup_beta", c.captioner.mixup_beta);
        c.captioner.lambda_scl = mj.value("lambda_scl", c.captioner.lambda_scl);
    }
    if (j.contains("captioner_train")) {
        auto& tj = j["captioner_train"];
        c.captioner_train.epochs = tj.value("epochs", c.captioner_train.epochs);
        c.captioner_train.batch = tj.value("batch", c.captioner_train.batch);
        c.captioner_train.lr = tj.value("lr", c.captioner_train.lr);
        c.captioner_train.mixup_enabled = tj.value("mixup", c.captioner_train.mixup_enabled);
    }
    c.encoder_dim = j.value("encoder_dim", c.encoder_dim);
    c.encoder_window = j.value("encoder_window", c.encoder_window);
    return c;
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
    return {
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"data_dir", c.data_dir},
        {"train_frac", c.train_frac},
        {"median", {{"window", c.median.window}}},
        {"clahe",
         {{"tile", c.clahe.tile}, {"bins", c.clahe.bins}, {"count_scale", c.clahe.count_scale}}},
        {"detector",
         {{"grid", c.detector.grid},
          {"boxes_per_cell", c.detector.boxes_per_cell},
          {"num_classes", c.detector.num_classes},
          {"nms_iou", c.detector.nms_iou},
          {"score_floor", c.detector.score_floor},
          {"easom_gain", c.detector.easom_gain}}},
        {"detector_train", {{"epochs", c.detector_train.epochs}, {"lr", c.detector_train.lr}}},
        {"foa", {{"population", c.foa.population}, {"iterations", c.foa.iterations}}},
        {"captioner",
         {{"d_model", c.captioner.d_model},
          {"heads", c.captioner.heads},
          {"blocks", c.captioner.blocks},
          {"context", c.captioner.context},
          {"dropout", c.captioner.dropout},
          {"mixup_beta", c.captioner.mixup_beta},
          {"lambda_scl", c.captioner.lambda_scl}}},
        {"captioner_train",
         {{"epochs", c.captioner_train.epochs},
          {"batch", c.captioner_train.batch},
          {"lr", c.captioner_train.lr},
          {"mixup", c.captioner_train.mixup_enabled}}},
        {"encoder_dim", c.encoder_dim},
        {"encoder_window", c.encoder_window},
    };
}

inline PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    return config_from_json(nlohmann::json::parse(in));
}

// XMQ_SEED environment override.
inline void apply_seed_env(PipelineConfig& c) {
    if (const char* s = std::getenv("XMQ_SEED")) c.seed = std::stoull(s);
}

// --------------------------------------------------------------------------
// Captioner vocabulary.

struct Vocab {
    std::vector<std::string> words;  // index = token id; 0..2 are PAD/BOS/EOS
    std::map<std::string, int> ids;

    static Vocab build(const std::vector<std::string>& texts) {
        std::set<std::string> uniq;
        for (const std::string& t : texts)
            for (const Token& tok : tokenize(t)) uniq.insert(tok.surface);
        Vocab v;
        v.words = {"<pad>", "<bos>", "<eos>"};
        for (const std::string& w : uniq) v.words.push_back(w);
        for (size_t i = 0; i < v.words.size(); ++i) v.ids[v.words[i]] = int(i);
        return v;
    }

    int id(const std::string& w) const {
        auto it = ids.find(w);
        return it == ids.end() ? -1 : it->second;
    }

    // BOS + known words (unknown words dropped)
    std::vector<int> encode(const std::string& text, bool bos = true, bool eos = false) const {
        std::vector<int> out;
        if (bos) out.push_back(kBos);
        for (const Token& t : tokenize(text)) {
            int i = id(t.surface);
            if (i >= 0) out.push_back(i);
        }
        if (eos) out.push_back(kEos);
        return out;
    }

    std::string decode(const std::vector<int>& toks) const {
        std::string out;
        for (int t : toks) {
            if (t < 3 || t >= int(words.size())) continue;
            if (!out.empty()) out += " ";
            out += words[size_t(t)];
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write vocab: " + path);
        out << nlohmann::json(words).dump(2) << "\n";
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open vocab: " + path);
        Vocab v;
        v.words = nlohmann::json::parse(in).get<std::vector<std::string>>();
        for (size_t i = 0; i < v.words.size(); ++i) v.ids[v.words[i]] = int(i);
        return v;
    }
};

// --------------------------------------------------------------------------
// Stage helpers.

inline Image preprocess_image(const Image& img, const PipelineConfig& c) {
    return clahe_enhance(median_filter(img, c.median), c.clahe);
}

inline SkeletonImage skeletonize_image(const Image& img) {
    return prune_spurs(thin(binarize(img.gray())));
}

// Run the detector on an arbitrary-size image; boxes come back in the
// original pixel space.
inline std::vector<Detection> detect_on(const DetectorModel& m, const Image& img,
                                        const DetectorConfig& cfg) {
    Image small = resize(img.gray(), m.input_size, m.input_size);
    DetectResult res = detect(m, small, cfg);
    double sx = double(img.width) / m.input_size, sy = double(img.height) / m.input_size;
    for (Detection& d : res.detections) {
        d.bbox.x *= sx;
        d.bbox.w *= sx;
        d.bbox.y *= sy;
        d.bbox.h *= sy;
    }
    return res.detections;
}

inline double region_mean_intensity(const Image& img, const AbsBox& b) {
    Image gray = img.channels == 1 ? img : img.gray();
    int x0 = std::clamp(int(b.x), 0, gray.width - 1);
    int y0 = std::clamp(int(b.y), 0, gray.height - 1);
    int x1 = std::clamp(int(b.x + b.w + 0.5), x0 + 1, gray.width);
    int y1 = std::clamp(int(b.y + b.h + 0.5), y0 + 1, gray.height);
    double sum = 0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) sum += gray.at(x, y, 0);
    return sum / double((x1 - x0) * (y1 - y0));
}

inline KnowledgeGraph graph_from_detections(const Image& img,
                                            const std::vector<Detection>& dets) {
    CrfModel crf = CrfModel::with_labels(shape_names());
    // favor the detector's own class call
    for (auto& row : crf.unary) row[3] = 2.0;
    crf.w_adjacent_same = 0.5;
    std::vector<RegionSource> sources;
    double area = double(img.width) * img.height;
    for (const Detection& d : dets) {
        Region r;
        r.box = d.bbox;
        r.mean_intensity = region_mean_intensity(img, d.bbox);
        r.area_frac = d.bbox.w * d.bbox.h / area;
        r.detector_class = d.class_id;
        sources.push_back({r, "detection"});
    }
    if (sources.empty()) {
        Region r;
        r.box = {0, 0, double(img.width), double(img.height)};
        r.mean_intensity = region_mean_intensity(img, r.box);
        r.area_frac = 1.0;
        sources.push_back({r, "skeleton"});
    }
    std::vector<Entity> ents = label_entities(crf, sources);
    return build_graph(ents, extract_relations(ents));
}

// --------------------------------------------------------------------------
// Graph + detection serialization.

inline nlohmann::json graph_to_json(const KnowledgeGraph& g) {
    nlohmann::json j;
    j["nodes"] = nlohmann::json::array();
    for (const Entity& e : g.nodes)
        j["nodes"].push_back({{"id", e.id},
                              {"label", e.label},
                              {"label_name", e.label_name},
                              {"box", {e.region.x, e.region.y, e.region.w, e.region.h}},
                              {"source", e.source}});
    j["edges"] = nlohmann::json::array();
    for (const Relation& r : g.edges)
        j["edges"].push_back({{"src", r.src}, {"dst", r.dst}, {"kind", relation_name(r.kind)}});
    return j;
}

inline KnowledgeGraph graph_from_json(const nlohmann::json& j) {
    KnowledgeGraph g;
    for (const auto& n : j.at("nodes")) {
        Entity e;
        e.id = n.at("id");
        e.label = n.at("label");
        e.label_name = n.at("label_name");
        auto b = n.at("box");
        e.region = {b[0], b[1], b[2], b[3]};
        e.cx = e.region.x + e.region.w / 2;
        e.cy = e.region.y + e.region.h / 2;
        e.source = n.at("source");
        g.nodes.push_back(std::move(e));
    }
    for (const auto& ed : j.at("edges")) {
        Relation r;
        r.src = ed.at("src");
        r.dst = ed.at("dst");
        std::string kind = ed.at("kind");
        static const std::map<std::string, RelationKind> kinds = {
            {"left-of", RelationKind::LeftOf}, {"right-of", RelationKind::RightOf},
            {"above", RelationKind::Above},    {"below", RelationKind::Below},
            {"overlaps", RelationKind::Overlaps}, {"near", RelationKind::Near}};
        r.kind = kinds.at(kind);
        g.edges.push_back(r);
    }
    return g;
}

inline std::string graph_to_dot(const KnowledgeGraph& g) {
    std::ostringstream out;
    out << "digraph kg {\n";
    for (const Entity& e : g.nodes)
        out << "  n" << e.id << " [label=\"" << e.label_name << "\"];\n";
    for (const Relation& r : g.edges)
        out << "  n" << r.src << " -> n" << r.dst << " [label=\"" << relation_name(r.kind)
            << "\"];\n";
    out << "}\n";
    return out.str();
}

// COCO-style detection results array.
inline nlohmann::json detections_to_json(int image_id, const std::vector<Detection>& dets) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Detection& d : dets)
        arr.push_back({{"image_id", image_id},
                       {"category_id", d.class_id},
                       {"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}},
                       {"score", d.score}});
    return arr;
}

// --------------------------------------------------------------------------
// Captioner feature rows.

// Row layout: [is_global, is_detection | payload...]. Detection payload:
// shape one-hot (3), hue cos/sin, cx, cy, w, h (normalized), brightness.
constexpr int kDetPayload = 10;

inline void hue_of_rgb(double r, double g, double b, double& hcos, double& hsin) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    double c = mx - mn;
    if (c < 1e-9) {
        hcos = hsin = 0;
        return;
    }
    double h;
    if (mx == r)
        h = std::fmod((g - b) / c + 6.0, 6.0);
    else if (mx == g)
        h = (b - r) / c + 2.0;
    else
        h = (r - g) / c + 4.0;
    h *= M_PI / 3.0;  // sextant -> radians
    hcos = std::cos(h);
    hsin = std::sin(h);
}

inline void mean_rgb(const Image& img, const AbsBox& b, double out[3]) {
    // sample the central half of the box to avoid background bleed
    int x0 = std::clamp(int(b.x + b.w * 0.3), 0, img.width - 1);
    int y0 = std::clamp(int(b.y + b.h * 0.3), 0, img.height - 1);
    int x1 = std::clamp(int(b.x + b.w * 0.7 + 1), x0 + 1, img.width);
    int y1 = std::clamp(int(b.y + b.h * 0.7 + 1), y0 + 1, img.height);
    double sum[3] = {0, 0, 0};
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < 3; ++c)
                sum[c] += img.channels == 3 ? img.at(x, y, c) : img.at(x, y, 0);
    double n = double((x1 - x0) * (y1 - y0));
    for (int c = 0; c < 3; ++c) out[c] = sum[c] / n / 255.0;
}

struct DetectionSummary {
    int shape = 0;  // class/category index
    AbsBox box;
};

// Feature matrix for the captioner: one global row (assembled feature vector,
// FOA mask applied, squashed) then one row per detection, left-to-right.
inline Mat caption_feature_rows(const Image& img, const FeatureVector& global,
                                const FeatureMask& mask, std::vector<DetectionSummary> dets) {
    int f = 2 + std::max<int>(int(global.size()), kDetPayload);
    std::sort(dets.begin(), dets.end(), [](const DetectionSummary& a, const DetectionSummary& b) {
        double ax = a.box.x + a.box.w / 2, bx = b.box.x + b.box.w / 2;
        if (ax != bx) return ax < bx;
        return a.box.y < b.box.y;
    });
    Mat rows = Mat::Zero(1 + Eigen::Index(dets.size()), f);
    rows(0, 0) = 1.0;
    for (size_t i = 0; i < global.size(); ++i) {
        double v = global.values[i];
        if (!mask.bits.empty() && i < mask.bits.size() && !mask.bits[i]) continue;
        rows(0, 2 + Eigen::Index(i)) = v / (1.0 + std::fabs(v));
    }
    for (size_t d = 0; d < dets.size(); ++d) {
        Eigen::Index r = 1 + Eigen::Index(d);
        rows(r, 1) = 1.0;
        const DetectionSummary& ds = dets[d];
        if (ds.shape >= 0 && ds.shape < 3) rows(r, 2 + ds.shape) = 1.0;
        double rgb[3];
        mean_rgb(img, ds.box, rgb);
        double hc, hs;
        hue_of_rgb(rgb[0], rgb[1], rgb[2], hc, hs);
        rows(r, 5) = hc;
        rows(r, 6) = hs;
        rows(r, 7) = (ds.box.x + ds.box.w / 2) / img.width;
        rows(r, 8) = (ds.box.y + ds.box.h / 2) / img.height;
        rows(r, 9) = ds.box.w / img.width;
        rows(r, 10) = ds.box.h / img.height;
        rows(r, 11) = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
    }
    return rows;
}

// --------------------------------------------------------------------------
// Manifest.

inline std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash missing file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return Sha256::of_string(ss.str());
}

struct Manifest {
    std::map<std::string, std::vector<std::string>> stage_files;  // stage -> relative paths

    void add(const std::string& stage, const std::string& rel) {
        stage_files[stage].push_back(rel);
    }

    nlohmann::json to_json(const std::string& root) const {
        nlohmann::json j;
        j["stages"] = nlohmann::json::object();
        for (const auto& [stage, files] : stage_files) {
            nlohmann::json arr = nlohmann::json::array();
            std::vector<std::string> sorted = files;
            std::sort(sorted.begin(), sorted.end());
            for (const std::string& f : sorted)
                arr.push_back({{"file", f}, {"sha256", sha256_file(root + "/" + f)}});
            j["stages"][stage] = arr;
        }
        return j;
    }
};

// Recomputes hashes and reports stale entries.
inline std::vector<std::string> verify_manifest(const std::string& manifest_path,
                                                const std::string& root) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path);
    nlohmann::json j = nlohmann::json::parse(in);
    std::vector<std::string> stale;
    for (const auto& [stage, files] : j.at("stages").items())
        for (const auto& entry : files) {
            std::string f = entry.at("file");
            std::string expect = entry.at("sha256");
            std::string got;
            try {
                got = sha256_file(root + "/" + f);
            } catch (const std::exception&) {
                got = "<missing>";
            }
            if (got != expect) stale.push_back(stage + ": " + f);
        }
    return stale;
}

// --------------------------------------------------------------------------
// Stage failure reporting.

struct StageError : std::runtime_error {
    StageError(const std::string& stage, const std::string& what)
        : std::runtime_error("stage '" + stage + "' failed: " + what) {}
};

// --------------------------------------------------------------------------
// End-to-end training.

struct TrainingArtifacts {
    std::string out_dir;
    DetectorModel detector;
    FeatureMask mask;
    Encoder encoder;
    ModelParams captioner;
    Vocab vocab;
};

namespace detail {

inline int sample_class(const SampleRecord& r) {
    // proxy label for FOA fitness: leftmost shape kind
    return r.shapes.empty() ? 0 : r.shapes[0].shape;
}

inline Eigen::RowVectorXd keyword_prototype(const Encoder& enc, const std::string& text) {
    return Eigen::RowVectorXd(enc.embed_text(text).transpose());
}

}  // namespace detail

inline TrainingArtifacts run_training(const PipelineConfig& cfg) {
    if (cfg.data_dir.empty()) throw StageError("ingest", "data_dir not set");
    Dataset ds;
    try {
        ds = load_dataset(cfg.data_dir);
    } catch (const std::exception& e) {
        throw StageError("ingest", e.what());
    }
    Split split = split_dataset(ds, cfg.train_frac, cfg.seed);
    fs::create_directories(cfg.out_dir);
    Manifest manifest;
    TrainingArtifacts art;
    art.out_dir = cfg.out_dir;
    nlohmann::json timings;

    // 1. preprocess
    std::vector<Image> pre(ds.items.size());
    try {
        fs::create_directories(cfg.out_dir + "/preprocessed");
        for (size_t i = 0; i < ds.items.size(); ++i) {
            pre[i] = preprocess_image(ds.items[i].image, cfg);
            std::string rel = "preprocessed/img_" + std::to_string(ds.items[i].id) + ".png";
            save_png(pre[i], cfg.out_dir + "/" + rel);
            manifest.add("preprocess", rel);
        }
    } catch (const std::exception& e) {
        throw StageError("preprocess", e.what());
    }

    // 2. detector training
    try {
        DetectorModel m = [&] {
            Rng rng(cfg.seed ^ 0xd373c70aULL);
            return DetectorModel::random_init(cfg.detector, rng);
        }();
        std::vector<TrainSample> samples;
        for (size_t i : split.train) {
            const SampleRecord& r = ds.items[i];
            TrainSample s;
            s.image = resize(pre[i].gray(), m.input_size, m.input_size);
            double sx = double(m.input_size) / pre[i].width;
            double sy = double(m.input_size) / pre[i].height;
            for (const ShapeInstance& sh : r.shapes)
                s.boxes.push_back(
                    {{sh.box.x * sx, sh.box.y * sy, sh.box.w * sx, sh.box.h * sy}, sh.shape});
            samples.push_back(std::move(s));
        }
        DetectorTrainConfig tc = cfg.detector_train;
        tc.seed = cfg.seed ^ 0xde7ec7ULL;
        train_detector(m, samples, tc);
        save_detector(m, cfg.out_dir + "/detector.bin");
        manifest.add("detector", "detector.bin");
        art.detector = m;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("detector", e.what());
    }

    // 3. skeletonize
    std::vector<SkeletonImage> skels(ds.items.size());
    try {
        fs::create_directories(cfg.out_dir + "/skeletons");
        for (size_t i = 0; i < ds.items.size(); ++i) {
            skels[i] = skeletonize_image(pre[i]);
            std::string rel = "skeletons/skel_" + std::to_string(ds.items[i].id) + ".pgm";
            save_skeleton(skels[i], cfg.out_dir + "/" + rel);
            manifest.add("skeleton", rel);
        }
    } catch (const std::exception& e) {
        throw StageError("skeleton", e.what());
    }

    // 4. knowledge graphs (per image; GGT recorded separately from the manifest)
    std::vector<KnowledgeGraph> graphs(ds.items.size());
    std::vector<std::vector<Detection>> dets(ds.items.size());
    try {
        fs::create_directories(cfg.out_dir + "/graphs");
        double ggt_total = 0;
        for (size_t i = 0; i < ds.items.size(); ++i) {
            dets[i] = detect_on(art.detector, pre[i], cfg.detector);
            double t = timer([&] { graphs[i] = graph_from_detections(pre[i], dets[i]); });
            ggt_total += t;
            std::string rel = "graphs/graph_" + std::to_string(ds.items[i].id) + ".json";
            std::ofstream out(cfg.out_dir + "/" + rel);
            out << graph_to_json(graphs[i]).dump(2) << "\n";
            manifest.add("kgraph", rel);
        }
        timings["ggt_mean_seconds"] = ggt_total / double(ds.items.size());
    } catch (const std::exception& e) {
        throw StageError("kgraph", e.what());
    }

    // 5. features
    std::vector<FeatureVector> feats(ds.items.size());
    try {
        nlohmann::json fj;
        fj["items"] = nlohmann::json::array();
        for (size_t i = 0; i < ds.items.size(); ++i) {
            feats[i] = assemble(image_features(pre[i]), skeleton_features(skels[i]),
                                graph_feature_vector(graph_features(graphs[i])));
            fj["items"].push_back(
                {{"id", ds.items[i].id}, {"values", feats[i].values}});
        }
        fj["names"] = feats.empty() ? std::vector<std::string>{} : feats[0].names;
        std::ofstream out(cfg.out_dir + "/features.json");
        out << fj.dump(2) << "\n";
        manifest.add("features", "features.json");
    } catch (const std::exception& e) {
        throw StageError("features", e.what());
    }

    // 6. FOA feature selection (fitness on an internal split of the train set)
    try {
        FitnessData fd;
        for (size_t k = 0; k < split.train.size(); ++k) {
            size_t i = split.train[k];
            auto& dst_x = (k % 5 == 4) ? fd.val_x : fd.train_x;
            auto& dst_y = (k % 5 == 4) ? fd.val_y : fd.train_y;
            dst_x.push_back(feats[i].values);
            dst_y.push_back(detail::sample_class(ds.items[i]));
        }
        FoaConfig fc = cfg.foa;
        fc.dims = int(feats.empty() ? 0 : feats[0].size());
        fc.seed = cfg.seed ^ 0xf0aULL;
        FoaResult res = select_features(fc, fd);
        art.mask = res.mask;
        nlohmann::json mj = {{"bits", res.mask.bits}, {"best_error", res.best_error}};
        std::ofstream out(cfg.out_dir + "/mask.json");
        out << mj.dump(2) << "\n";
        manifest.add("foa", "mask.json");
    } catch (const std::exception& e) {
        throw StageError("foa", e.what());
    }

    // 7. text encoder (corpus: full caption/QA text — text-side knowledge is
    // cheap and enables zero-shot prototypes for classes unseen in training)
    try {
        std::vector<std::string> corpus;
        for (const SampleRecord& r : ds.items) {
            corpus.push_back(r.caption);
            for (const QaPair& q : r.qa) corpus.push_back(q.question + " " + q.answer);
        }
        art.encoder = Encoder::train(corpus, cfg.encoder_dim, cfg.encoder_window);
        art.encoder.save(cfg.out_dir + "/encoder.bin");
        manifest.add("textkw", "encoder.bin");
    } catch (const std::exception& e) {
        throw StageError("textkw", e.what());
    }

    // 8. captioner
    try {
        std::vector<std::string> texts;
        for (size_t i : split.train) {
            texts.push_back(ds.items[i].caption);
            for (const QaPair& q : ds.items[i].qa) texts.push_back(q.question + " " + q.answer);
        }
        art.vocab = Vocab::build(texts);
        art.vocab.save(cfg.out_dir + "/vocab.json");
        manifest.add("captioner", "vocab.json");

        ModelConfig mc = cfg.captioner;
        mc.vocab = int(art.vocab.words.size());
        mc.proto_dim = art.encoder.dim();
        std::vector<CaptionSample> samples;
        for (size_t i : split.train) {
            const SampleRecord& r = ds.items[i];
            std::vector<DetectionSummary> summ;
            for (const Detection& d : dets[i]) summ.push_back({d.class_id, d.bbox});
            Mat rows = caption_feature_rows(pre[i], feats[i], art.mask, summ);
            mc.feat_dim = int(rows.cols());
            CaptionSample cs;
            cs.image_feats = rows;
            cs.tokens = art.vocab.encode(r.caption, true, true);
            cs.proto_target = detail::keyword_prototype(art.encoder, r.caption);
            samples.push_back(std::move(cs));
            for (const QaPair& q : r.qa) {
                CaptionSample qs;
                qs.image_feats = rows;
                qs.tokens = art.vocab.encode(q.question + " " + q.answer, true, true);
                qs.proto_target = detail::keyword_prototype(art.encoder, q.answer);
                samples.push_back(std::move(qs));
            }
        }
        Rng rng(cfg.seed ^ 0xca97ULL);
        art.captioner = ModelParams::init(mc, rng);
        TrainConfig tc = cfg.captioner_train;
        tc.seed = cfg.seed ^ 0xca97aULL;
        train(art.captioner, samples, tc);
        save_model(art.captioner, cfg.out_dir + "/captioner.bin");
        manifest.add("captioner", "captioner.bin");
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("captioner", e.what());
    }

    // manifest + timing report (timings excluded from the manifest: not
    // deterministic across runs)
    nlohmann::json mj = manifest.to_json(cfg.out_dir);
    mj["config"] = config_to_json(cfg);
    std::ofstream mout(cfg.out_dir + "/manifest.json");
    mout << mj.dump(2) << "\n";
    std::ofstream tout(cfg.out_dir + "/timings.json");
    tout << timings.dump(2) << "\n";
    return art;
}

// --------------------------------------------------------------------------
// Inference.

inline TrainingArtifacts load_artifacts(const PipelineConfig& cfg) {
    TrainingArtifacts art;
    art.out_dir = cfg.out_dir;
    std::string missing;
    for (const char* f : {"detector.bin", "mask.json", "encoder.bin", "captioner.bin", "vocab.json"})
        if (!fs::exists(cfg.out_dir + "/" + f)) missing = f;
    if (!missing.empty())
        throw std::runtime_error("missing trained artifact '" + missing +
                                 "'; run: xmq train --config <cfg.json>");
    art.detector = load_detector(cfg.out_dir + "/detector.bin");
    std::ifstream min(cfg.out_dir + "/mask.json");
    art.mask.bits = nlohmann::json::parse(min).at("bits").get<std::vector<uint8_t>>();
    art.encoder = Encoder::load(cfg.out_dir + "/encoder.bin");
    art.captioner = load_model(cfg.out_dir + "/captioner.bin");
    art.vocab = Vocab::load(cfg.out_dir + "/vocab.json");
    return art;
}

struct InferenceResult {
    std::string text;  // caption or answer
    nlohmann::json provenance;
};

inline InferenceResult run_inference(const PipelineConfig& cfg, const TrainingArtifacts& art,
                                     const std::string& image_path,
                                     const std::optional<std::string>& question) {
    Image img = load_image(image_path);
    fs::create_directories(cfg.out_dir + "/inference");
    std::string base = fs::path(image_path).stem().string();
    InferenceResult res;
    nlohmann::json& prov = res.provenance;
    prov["input"] = image_path;

    Image pre = preprocess_image(img, cfg);
    std::string pre_rel = "inference/" + base + "_pre.png";
    save_png(pre, cfg.out_dir + "/" + pre_rel);
    prov["preprocessed"] = pre_rel;

    std::vector<Detection> dts = detect_on(art.detector, pre, cfg.detector);
    std::string det_rel = "inference/" + base + "_det.json";
    {
        std::ofstream out(cfg.out_dir + "/" + det_rel);
        out << detections_to_json(0, dts).dump(2) << "\n";
    }
    prov["detections"] = det_rel;

    SkeletonImage skel = skeletonize_image(pre);
    std::string skel_rel = "inference/" + base + "_skel.pgm";
    save_skeleton(skel, cfg.out_dir + "/" + skel_rel);
    prov["skeleton"] = skel_rel;

    KnowledgeGraph kg = graph_from_detections(pre, dts);
    std::string g_rel = "inference/" + base + "_graph.json";
    {
        std::ofstream out(cfg.out_dir + "/" + g_rel);
        out << graph_to_json(kg).dump(2) << "\n";
    }
    prov["graph"] = g_rel;

    FeatureVector fv = assemble(image_features(pre), skeleton_features(skel),
                                graph_feature_vector(graph_features(kg)));
    std::vector<DetectionSummary> summ;
    for (const Detection& d : dts) summ.push_back({d.class_id, d.bbox});
    Mat rows = caption_feature_rows(pre, fv, art.mask, summ);

    if (question) {
        ClassPrototypes protos;
        std::vector<std::string> answers;
        for (const std::string& c : color_names()) answers.push_back(c);
        for (const std::string& s : shape_names()) answers.push_back(s);
        for (const char* n : {"one", "two", "three"}) answers.push_back(n);
        for (const std::string& a : answers) {
            protos.names.push_back(a);
            protos.vectors.push_back(detail::keyword_prototype(art.encoder, a));
            protos.vocab_id.push_back(art.vocab.id(a));
        }
        CaptionSample input;
        input.image_feats = rows;
        input.tokens = art.vocab.encode(*question, true, false);
        int cls = zsl_predict(art.captioner, protos, input);
        res.text = protos.names[size_t(cls)];
        prov["mode"] = "vqa";
        prov["question"] = *question;
    } else {
        res.text = art.vocab.decode(generate_caption(art.captioner, rows));
        prov["mode"] = "caption";
    }
    prov["output"] = res.text;
    std::string prov_rel = "inference/" + base + "_provenance.json";
    std::ofstream out(cfg.out_dir + "/" + prov_rel);
    out << prov.dump(2) << "\n";
    return res;
}

}  // namespace xmq
