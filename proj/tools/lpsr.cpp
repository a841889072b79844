#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lpsr/alphabet.hpp"
#include "lpsr/evaluator.hpp"
#include "lpsr/image_io.hpp"

using namespace lpsr;

namespace {

int cmd_gen(std::size_t n, std::uint64_t seed, const std::string& out, double tilt_max, int factor) {
    write_dataset(generate_corpus(n, seed, tilt_max, factor), out);
    std::cout << "wrote " << n << " samples to " << out << '\n';
    return 0;
}

TrainConfig config_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
    TrainConfig config = path.empty() ? TrainConfig{} : load_train_config(path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
    }
    config.validate();
    return config;
}

int cmd_train(const TrainConfig& config, const std::string& data, const std::string& out, const std::string& resume) {
    const auto dataset = read_dataset(data);
    if (dataset.empty()) throw IoError("no samples found in " + data);
    std::optional<std::filesystem::path> from;
    if (!resume.empty()) from = resume;
    const auto result = train<float>(config, dataset, out, from);
    std::cout << "run " << config.run_label() << ": " << result.epochs_completed << " epochs, final checkpoint "
              << result.final_checkpoint.string() << '\n';
    return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& image, double conf, double nms) {
    auto state = load_checkpoint<float>(checkpoint);
    PlateSample sample;
    sample.lr = read_png(image);
    if (sample.lr.height() * 4 != kPlateHeight || sample.lr.width() * 4 != kPlateWidth)
        throw ShapeError("infer expects a " + std::to_string(kPlateWidth / 4) + "x" + std::to_string(kPlateHeight / 4) +
                         " low-resolution plate");
    const auto out = run_pipeline(state.pipeline, {&sample});
    const auto dets = decode(out.raw, state.pipeline.det_config.grid, conf, nms, 0);
    nlohmann::json j;
    j["detections"] = nlohmann::json::array();
    for (const auto& d : dets)
        j["detections"].push_back({{"class_id", d.box.class_id},
                                   {"symbol", symbol(d.box.class_id)},
                                   {"confidence", d.confidence},
                                   {"box", d.box}});
    const auto ids = read_plate(dets);
    j["plate"] = plate_string(ids);
    j["class_ids"] = ids;
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& out, bool all) {
    auto state = load_checkpoint<float>(checkpoint);
    const auto dataset = read_dataset(data);
    const DatasetSplit split = split_dataset(dataset, state.config.holdout_fraction);
    std::vector<const PlateSample*> samples = split.holdout;
    if (all) {
        samples.clear();
        for (const auto& s : dataset) samples.push_back(&s);
    }
    EvalMetrics m = evaluate(state.pipeline, samples, state.config.conf_threshold, state.config.nms_iou);
    m.run_label = state.config.run_label();
    nlohmann::json j = {{"checkpoint", checkpoint}, {"split", all ? "all" : "holdout"}, {"metrics", m}};
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out);
    f << j.dump(2) << '\n';
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_ablate(const TrainConfig& config, const std::string& data, int seeds, const std::string& out) {
    if (seeds < 1) throw ConfigError("--seeds must be >= 1");
    const auto dataset = read_dataset(data);
    if (dataset.empty()) throw IoError("no samples found in " + data);
    std::vector<std::uint64_t> seed_list(static_cast<std::size_t>(seeds));
    std::iota(seed_list.begin(), seed_list.end(), config.seed);
    const std::filesystem::path dir(out);
    std::filesystem::create_directories(dir);
    const auto report = run_ablation_matrix(config, dataset, seed_list, dir);
    write_report_json(report, dir / "report.json");
    write_report_csv(report, dir / "report.csv");
    write_accuracy_plot(report, dir / "accuracy.png");
    for (const auto& r : report.rows)
        std::printf("%-9s accuracy %.4f +/- %.4f  psnr_sr %.2f  failures %zu\n", r.label.c_str(), r.accuracy_mean,
                    r.accuracy_std, r.psnr_sr_mean, r.failures);
    return 0;
}

int cmd_anchors(std::size_t n, std::uint64_t seed) {
    const auto corpus = generate_corpus(n, seed);
    std::vector<Annotation> annotations;
    for (const auto& s : corpus) annotations.push_back(s.annotation);
    for (const auto& a : kmeans_anchors(annotations, 9)) std::printf("%.4f %.4f\n", a.w, a.h);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Super-resolution plate recognition toolkit"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen", "Generate a synthetic plate corpus");
    std::size_t gen_n = 2000;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    double tilt_max = kMaxTiltDeg;
    int factor = 4;
    gen->add_option("--n", gen_n, "Number of samples");
    gen->add_option("--seed", gen_seed, "Corpus seed");
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--tilt-max", tilt_max, "Maximum absolute tilt in degrees")->check(CLI::Range(0.0, kMaxTiltDeg));
    gen->add_option("--factor", factor, "Degradation factor")->check(CLI::PositiveNumber);

    auto* tr = app.add_subcommand("train", "Train the generator, discriminator and detector");
    std::string config_path, data, out, resume;
    std::vector<std::string> overrides;
    bool wo_mse = false, wo_adv = false, wo_const = false, wo_clc = false, baseline = false;
    tr->add_option("--config", config_path, "Flat key = value config file");
    tr->add_option("--data", data, "Dataset directory")->required();
    tr->add_option("--out", out, "Output directory")->required();
    tr->add_option("--set", overrides, "Override a config key (key=value)");
    tr->add_option("--resume", resume, "Continue from a training checkpoint");
    tr->add_flag("--wo-mse", wo_mse, "Drop the pixel-wise MSE term");
    tr->add_flag("--wo-adv", wo_adv, "Drop the adversarial term");
    tr->add_flag("--wo-const", wo_const, "Drop the reconstruction term");
    tr->add_flag("--wo-clc", wo_clc, "Drop the counting term");
    tr->add_flag("--baseline", baseline, "Detector only, on bicubic-upsampled input");

    auto* inf = app.add_subcommand("infer", "Recognise one low-resolution plate image");
    std::string ckpt, image;
    double conf = 0.5, nms = 0.45;
    inf->add_option("--checkpoint", ckpt, "Training checkpoint")->required();
    inf->add_option("--image", image, "Low-resolution PNG")->required();
    inf->add_option("--conf", conf, "Confidence threshold")->check(CLI::Range(0.0, 1.0));
    inf->add_option("--nms", nms, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_out = "report.json";
    bool eval_all = false;
    ev->add_option("--checkpoint", eval_ckpt, "Training checkpoint")->required();
    ev->add_option("--data", eval_data, "Dataset directory")->required();
    ev->add_option("--out", eval_out, "Report path");
    ev->add_flag("--all", eval_all, "Evaluate every sample instead of the held-out split");

    auto* ab = app.add_subcommand("ablate", "Run the loss ablation matrix");
    std::string ab_config, ab_data, ab_out;
    std::vector<std::string> ab_overrides;
    int seeds = 3;
    ab->add_option("--config", ab_config, "Flat key = value config file");
    ab->add_option("--data", ab_data, "Dataset directory")->required();
    ab->add_option("--seeds", seeds, "Seeds per row");
    ab->add_option("--out", ab_out, "Output directory")->required();
    ab->add_option("--set", ab_overrides, "Override a config key (key=value)");

    auto* an = app.add_subcommand("anchors", "Print k-means anchor priors for a generated corpus");
    std::size_t an_n = 2000;
    std::uint64_t an_seed = 0;
    an->add_option("--n", an_n, "Number of samples");
    an->add_option("--seed", an_seed, "Corpus seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(gen_n, gen_seed, gen_out, tilt_max, factor);
        if (tr->parsed()) {
            TrainConfig config = config_with_overrides(config_path, overrides);
            if (wo_mse) config = ablate(config, "mse");
            if (wo_adv) config = ablate(config, "adv");
            if (wo_const) config = ablate(config, "const");
            if (wo_clc) config = ablate(config, "clc");
            config.baseline = config.baseline || baseline;
            return cmd_train(config, data, out, resume);
        }
        if (inf->parsed()) return cmd_infer(ckpt, image, conf, nms);
        if (ev->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out, eval_all);
        if (ab->parsed()) return cmd_ablate(config_with_overrides(ab_config, ab_overrides), ab_data, seeds, ab_out);
        if (an->parsed()) return cmd_anchors(an_n, an_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
