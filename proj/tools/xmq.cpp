// Command-line front end for the cross-modal query pipeline.
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xmq/pipeline.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kValidationError = 2;
constexpr int kStageFailure = 3;

xmq::PipelineConfig load_cfg(const std::string& path) {
    xmq::PipelineConfig cfg = path.empty() ? xmq::PipelineConfig{} : xmq::load_config(path);
    xmq::apply_seed_env(cfg);
    return cfg;
}

void write_json(const nlohmann::json& j, const std::string& path) {
    if (path.empty() || path == "-") {
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write: " + path);
    out << j.dump(2) << "\n";
}

std::vector<xmq::Detection> detections_from_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open detections: " + path);
    std::vector<xmq::Detection> dets;
    for (const auto& d : nlohmann::json::parse(in)) {
        xmq::Detection det;
        auto b = d.at("bbox");
        det.bbox = {b[0], b[1], b[2], b[3]};
        det.class_id = d.at("category_id");
        det.score = d.value("score", 1.0);
        dets.push_back(det);
    }
    return dets;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-modal query understanding pipeline"};
    app.require_subcommand(1);

    std::string config_path, in_path, out_path, model_path, image_path, question, text;
    std::string detections_path, skeleton_path, graph_path, dot_path, enc_path, data_dir;
    std::string corpus_path;
    int n = 100, top = 5, dim = 64, limit = -1;
    uint64_t seed = 42;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--n", n, "number of images");
    synth->add_option("--seed", seed, "generator seed");
    synth->add_option("--out", out_path, "output directory")->required();

    auto* preprocess = app.add_subcommand("preprocess", "median filter + PG-CLAHE");
    preprocess->add_option("--in", in_path)->required();
    preprocess->add_option("--out", out_path)->required();
    preprocess->add_option("--config", config_path);

    auto* detect_cmd = app.add_subcommand("detect", "run the detector on an image");
    detect_cmd->add_option("--model", model_path)->required();
    detect_cmd->add_option("--image", image_path)->required();
    detect_cmd->add_option("--out", out_path);
    detect_cmd->add_option("--config", config_path);

    auto* skel = app.add_subcommand("skeletonize", "binarize + thin + prune");
    skel->add_option("--in", in_path)->required();
    skel->add_option("--out", out_path)->required();

    auto* kgraph = app.add_subcommand("kgraph", "build a knowledge graph");
    kgraph->add_option("--image", image_path)->required();
    kgraph->add_option("--detections", detections_path)->required();
    kgraph->add_option("--out", out_path);
    kgraph->add_option("--dot", dot_path);

    auto* features = app.add_subcommand("features", "assemble the feature vector");
    features->add_option("--image", image_path)->required();
    features->add_option("--skeleton", skeleton_path)->required();
    features->add_option("--graph", graph_path)->required();
    features->add_option("--out", out_path);

    auto* select = app.add_subcommand("select", "FOA feature selection");
    select->add_option("--data", data_dir, "dataset directory (labels)")->required();
    select->add_option("--features", in_path, "features.json from the features stage")->required();
    select->add_option("--out", out_path);
    select->add_option("--config", config_path);

    auto* embed = app.add_subcommand("embed-text", "train the text encoder");
    embed->add_option("--corpus", corpus_path, "text file, one document per line")->required();
    embed->add_option("--train", out_path, "output encoder file")->required();
    embed->add_option("--dim", dim);

    auto* keywords = app.add_subcommand("keywords", "rank keywords for a text");
    keywords->add_option("--enc", enc_path)->required();
    keywords->add_option("--text", text)->required();
    keywords->add_option("--top", top);
    keywords->add_option("--out", out_path);

    auto* train = app.add_subcommand("train", "end-to-end training run");
    train->add_option("--config", config_path)->required();
    train->add_option("--data", data_dir, "override data_dir");

    auto* caption = app.add_subcommand("caption", "caption an image");
    caption->add_option("--config", config_path)->required();
    caption->add_option("--image", image_path)->required();
    caption->add_option("--model", model_path, "override captioner checkpoint");

    auto* vqa = app.add_subcommand("vqa", "answer a question about an image");
    vqa->add_option("--config", config_path)->required();
    vqa->add_option("--image", image_path)->required();
    vqa->add_option("--question", question)->required();
    vqa->add_option("--model", model_path, "override captioner checkpoint");

    auto* eval = app.add_subcommand("eval", "evaluate trained artifacts on the test split");
    eval->add_option("--config", config_path)->required();
    eval->add_option("--data", data_dir, "override data_dir");
    eval->add_option("--limit", limit, "cap evaluated test images");
    eval->add_option("--out", out_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kValidationError;
    }

    try {
        if (synth->parsed()) {
            xmq::Dataset ds = xmq::generate_synthetic(n, seed);
            xmq::fs::create_directories(out_path);
            xmq::save_dataset(ds, out_path);
            std::cout << "wrote " << ds.items.size() << " images to " << out_path << "\n";
        } else if (preprocess->parsed()) {
            auto cfg = load_cfg(config_path);
            xmq::save_image(xmq::preprocess_image(xmq::load_image(in_path), cfg), out_path);
        } else if (detect_cmd->parsed()) {
            auto cfg = load_cfg(config_path);
            xmq::DetectorModel m = xmq::load_detector(model_path);
            auto dets = xmq::detect_on(m, xmq::load_image(image_path), cfg.detector);
            write_json(xmq::detections_to_json(0, dets), out_path);
        } else if (skel->parsed()) {
            xmq::save_skeleton(xmq::skeletonize_image(xmq::load_image(in_path)), out_path);
        } else if (kgraph->parsed()) {
            xmq::Image img = xmq::load_image(image_path);
            auto g = xmq::graph_from_detections(img, detections_from_json(detections_path));
            write_json(xmq::graph_to_json(g), out_path);
            if (!dot_path.empty()) {
                std::ofstream out(dot_path);
                out << xmq::graph_to_dot(g);
            }
        } else if (features->parsed()) {
            xmq::Image img = xmq::load_image(image_path);
            xmq::SkeletonImage sk = xmq::load_skeleton(skeleton_path);
            std::ifstream gin(graph_path);
            if (!gin) throw std::runtime_error("cannot open graph: " + graph_path);
            auto g = xmq::graph_from_json(nlohmann::json::parse(gin));
            auto fv = xmq::assemble(xmq::image_features(img), xmq::skeleton_features(sk),
                                    xmq::graph_feature_vector(xmq::graph_features(g)));
            write_json({{"names", fv.names}, {"values", fv.values}}, out_path);
        } else if (select->parsed()) {
            auto cfg = load_cfg(config_path);
            xmq::Dataset ds = xmq::load_dataset(data_dir);
            std::map<int, const xmq::SampleRecord*> by_id;
            for (const auto& r : ds.items) by_id[r.id] = &r;
            std::ifstream fin(in_path);
            if (!fin) throw std::runtime_error("cannot open features: " + in_path);
            nlohmann::json fj = nlohmann::json::parse(fin);
            xmq::FitnessData fd;
            size_t k = 0;
            for (const auto& item : fj.at("items")) {
                auto it = by_id.find(item.at("id").get<int>());
                if (it == by_id.end())
                    throw std::runtime_error("features reference unknown image id " +
                                             item.at("id").dump());
                int label = it->second->shapes.empty() ? 0 : it->second->shapes[0].shape;
                auto& dx = (k % 5 == 4) ? fd.val_x : fd.train_x;
                auto& dy = (k % 5 == 4) ? fd.val_y : fd.train_y;
                dx.push_back(item.at("values").get<std::vector<double>>());
                dy.push_back(label);
                ++k;
            }
            xmq::FoaConfig fc = cfg.foa;
            fc.dims = int(fd.train_x.empty() ? 0 : fd.train_x[0].size());
            fc.seed = cfg.seed ^ 0xf0aULL;
            auto res = xmq::select_features(fc, fd);
            write_json({{"bits", res.mask.bits}, {"best_error", res.best_error}}, out_path);
        } else if (embed->parsed()) {
            std::ifstream in(corpus_path);
            if (!in) throw std::runtime_error("cannot open corpus: " + corpus_path);
            std::vector<std::string> corpus;
            for (std::string line; std::getline(in, line);)
                if (!line.empty()) corpus.push_back(line);
            xmq::Encoder::train(corpus, dim).save(out_path);
        } else if (keywords->parsed()) {
            xmq::Encoder enc = xmq::Encoder::load(enc_path);
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& r : xmq::rank_keywords(enc, text, top))
                arr.push_back({{"keyword", r.keyword},
                               {"cosine", r.cosine},
                               {"dl_norm", r.dl_norm},
                               {"score", r.score}});
            write_json(arr, out_path);
        } else if (train->parsed()) {
            auto cfg = load_cfg(config_path);
            if (!data_dir.empty()) cfg.data_dir = data_dir;
            xmq::run_training(cfg);
            std::cout << "training complete; artifacts in " << cfg.out_dir << "\n";
        } else if (caption->parsed() || vqa->parsed()) {
            auto cfg = load_cfg(config_path);
            auto art = xmq::load_artifacts(cfg);
            if (!model_path.empty()) art.captioner = xmq::load_model(model_path);
            std::optional<std::string> q;
            if (vqa->parsed()) q = question;
            auto res = xmq::run_inference(cfg, art, image_path, q);
            std::cout << res.text << "\n";
        } else if (eval->parsed()) {
            auto cfg = load_cfg(config_path);
            if (!data_dir.empty()) cfg.data_dir = data_dir;
            auto art = xmq::load_artifacts(cfg);
            xmq::Dataset ds = xmq::load_dataset(cfg.data_dir);
            xmq::Split split = xmq::split_dataset(ds, cfg.train_frac, cfg.seed);
            if (limit >= 0 && size_t(limit) < split.test.size()) split.test.resize(size_t(limit));

            std::vector<xmq::PredBox> preds;
            std::vector<xmq::GroundTruthBox> gts;
            double bleu_sum = 0, meteor_sum = 0;
            int vqa_correct = 0, vqa_total = 0;
            for (size_t i : split.test) {
                const auto& rec = ds.items[i];
                xmq::Image pre = xmq::preprocess_image(rec.image, cfg);
                for (const auto& d : xmq::detect_on(art.detector, pre, cfg.detector))
                    preds.push_back({rec.id, d.bbox, d.class_id, d.score});
                for (const auto& s : rec.shapes) gts.push_back({rec.id, s.box, s.shape});
                auto res = xmq::run_inference(cfg, art, cfg.data_dir + "/img_" +
                                                            std::to_string(rec.id) + ".png",
                                              std::nullopt);
                auto toks = [](const std::string& s) {
                    std::vector<std::string> out;
                    for (const auto& t : xmq::tokenize(s)) out.push_back(t.surface);
                    return out;
                };
                bleu_sum += xmq::bleu(toks(res.text), toks(rec.caption), 1);
                meteor_sum += xmq::meteor(toks(res.text), toks(rec.caption));
                for (const auto& q : rec.qa) {
                    auto ans = xmq::run_inference(cfg, art,
                                                  cfg.data_dir + "/img_" +
                                                      std::to_string(rec.id) + ".png",
                                                  q.question);
                    vqa_correct += ans.text == q.answer;
                    ++vqa_total;
                }
            }
            auto dm = xmq::detection_metrics(preds, gts);
            double nt = double(split.test.size());
            nlohmann::json report = {
                {"test_images", split.test.size()},
                {"detector_map", dm.map},
                {"bleu1_mean", nt > 0 ? bleu_sum / nt : 0.0},
                {"meteor_mean", nt > 0 ? meteor_sum / nt : 0.0},
                {"vqa_accuracy", vqa_total ? double(vqa_correct) / vqa_total : 0.0},
            };
            write_json(report, out_path);
        }
    } catch (const xmq::StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kStageFailure;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidationError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidationError;
    }
    return kOk;
}
