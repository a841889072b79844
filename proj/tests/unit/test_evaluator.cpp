#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "lpsr/evaluator.hpp"
#include "lpsr/image_io.hpp"

using namespace lpsr;
namespace fs = std::filesystem;

namespace {

Annotation random_truth(std::mt19937_64& rng, int n) {
    std::uniform_real_distribution<double> u(0.1, 0.9);
    std::uniform_int_distribution<int> cls(0, 3);
    Annotation a;
    for (int i = 0; i < n; ++i) a.boxes.push_back({cls(rng), u(rng), u(rng), 0.1, 0.3});
    a.count = n;
    return a;
}

std::vector<Detection> perfect(const Annotation& a) {
    std::vector<Detection> out;
    for (const auto& b : a.boxes) out.push_back({b, 1.0});
    return out;
}

// Best assignment by trying every detection -> {unmatched, each free truth}.
std::size_t brute_matching(const std::vector<Detection>& dets, const Annotation& truth, std::size_t i,
                           std::vector<char>& used) {
    if (i == dets.size()) return 0;
    std::size_t best = brute_matching(dets, truth, i + 1, used);
    if (dets[i].confidence < 0.5) return best;
    for (std::size_t j = 0; j < truth.boxes.size(); ++j) {
        if (used[j] || dets[i].box.class_id != truth.boxes[j].class_id) continue;
        if (box_iou(dets[i].box, truth.boxes[j]) < 0.5) continue;
        used[j] = 1;
        best = std::max(best, 1 + brute_matching(dets, truth, i + 1, used));
        used[j] = 0;
    }
    return best;
}

EvalMetrics fake_metrics(const TrainConfig& c) {
    EvalMetrics m;
    const double s = static_cast<double>(c.seed);
    m.recognition_accuracy = c.baseline ? 0.2 + 0.01 * s : 0.5 + 0.02 * s;
    m.mean_psnr_sr = 20 + s;
    m.mean_psnr_bicubic = 18;
    m.count_head_accuracy = 0.9;
    return m;
}

}  // namespace

TEST_CASE("matching size equals an exhaustive search") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> jitter(-0.04, 0.04), conf(0.3, 1.0), u(0, 1);
    std::uniform_int_distribution<int> count(0, 6), cls(0, 3);
    int nontrivial = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const auto truth = random_truth(rng, count(rng));
        std::vector<Detection> dets;
        for (const auto& b : truth.boxes)
            if (u(rng) < 0.8) {
                Box d = b;
                d.cx += jitter(rng);
                d.cy += jitter(rng);
                if (u(rng) < 0.2) d.class_id = cls(rng);
                dets.push_back({d, conf(rng)});
            }
        while (dets.size() < 6 && u(rng) < 0.4) dets.push_back({random_truth(rng, 1).boxes[0], conf(rng)});
        std::vector<char> used(truth.boxes.size(), 0);
        const auto expected = brute_matching(dets, truth, 0, used);
        nontrivial += expected > 1;
        CHECK(max_matching(dets, truth, 0.5, 0.5) == expected);
    }
    CHECK(nontrivial > 50);
}

TEST_CASE("matching is not fooled by a greedy trap") {
    // Detection 0 overlaps both truths; a greedy pass taking it for truth 0
    // would leave detection 1 without a partner.
    Annotation truth;
    truth.boxes = {{1, 0.40, 0.5, 0.2, 0.4}, {1, 0.50, 0.5, 0.2, 0.4}};
    truth.count = 2;
    std::vector<Detection> dets{{{1, 0.45, 0.5, 0.2, 0.4}, 0.9}, {{1, 0.38, 0.5, 0.2, 0.4}, 0.8}};
    CHECK(box_iou(dets[0].box, truth.boxes[0]) >= 0.5);
    CHECK(box_iou(dets[0].box, truth.boxes[1]) >= 0.5);
    CHECK(box_iou(dets[1].box, truth.boxes[1]) < 0.5);
    CHECK(max_matching(dets, truth, 0.5, 0.5) == 2);
    CHECK(plate_correct(dets, truth));
}

TEST_CASE("recognition accuracy examples") {
    std::mt19937_64 rng(2);
    std::vector<Annotation> truths;
    std::vector<std::vector<Detection>> preds;
    for (int i = 0; i < 50; ++i) {
        truths.push_back(random_truth(rng, 4 + i % 5));
        preds.push_back(perfect(truths.back()));
    }
    CHECK(recognition_accuracy(preds, truths) == 1.0);
    preds[7][1].box.class_id = (preds[7][1].box.class_id + 1) % 4;
    CHECK(recognition_accuracy(preds, truths) == doctest::Approx(0.98).epsilon(1e-12));

    preds[7] = perfect(truths[7]);
    preds[3].push_back({truths[3].boxes[0], 0.9});
    CHECK(recognition_accuracy(preds, truths) == doctest::Approx(0.98).epsilon(1e-12));
    preds[3].back().confidence = 0.1;
    CHECK(recognition_accuracy(preds, truths) == 1.0);

    preds.pop_back();
    CHECK_THROWS_AS(recognition_accuracy(preds, truths), DomainError);
    CHECK(recognition_accuracy({}, {}) == 0.0);
}

TEST_CASE("accuracy monotonicity properties") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<Annotation> truths;
    std::vector<std::vector<Detection>> preds;
    for (int i = 0; i < 40; ++i) {
        truths.push_back(random_truth(rng, 4 + i % 3));
        preds.push_back(perfect(truths.back()));
        if (u(rng) < 0.5) preds.back().pop_back();
    }
    for (int step = 0; step < 30; ++step) {
        const double before = recognition_accuracy(preds, truths);
        truths.push_back(random_truth(rng, 5));
        preds.push_back(perfect(truths.back()));
        CHECK(recognition_accuracy(preds, truths) >= before);
    }
    const double n = static_cast<double>(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) {
        if (!plate_correct(preds[i], truths[i])) continue;
        const double before = recognition_accuracy(preds, truths);
        auto saved = preds[i];
        preds[i][0].box.class_id = 60;
        CHECK(recognition_accuracy(preds, truths) == doctest::Approx(before - 1 / n).epsilon(1e-12));
        preds[i] = saved;
    }
}

TEST_CASE("psnr properties") {
    PlateImage a(8, 8, 0.3f), b(8, 8, 0.4f);
    CHECK(psnr(a, a) == kPsnrCap);
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
    std::mt19937 rng(4);
    std::uniform_real_distribution<float> u(0, 1);
    for (int trial = 0; trial < 20; ++trial) {
        for (Index i = 0; i < a.pixels.size(); ++i) {
            a.pixels[i] = u(rng);
            b.pixels[i] = u(rng);
        }
        double mse = 0;
        for (Index i = 0; i < a.pixels.size(); ++i)
            mse += (double(a.pixels[i]) - double(b.pixels[i])) * (double(a.pixels[i]) - double(b.pixels[i]));
        mse /= static_cast<double>(a.pixels.size());
        CHECK(psnr(a, b) == doctest::Approx(10 * std::log10(1 / mse)).epsilon(1e-12));
        CHECK(psnr(a, b) == psnr(b, a));
    }
    CHECK_THROWS_AS(psnr(a, PlateImage(4, 8)), ShapeError);
}

TEST_CASE("evaluate reports bicubic PSNR and count statistics") {
    TrainConfig c;
    c.generator.s1_width = 2;
    c.generator.s1_blocks = 1;
    c.generator.s1_up_width = 2;
    c.generator.s2_width = 2;
    c.discriminator.width = 2;
    c.discriminator.blocks = 2;
    c.discriminator.head_hidden = 4;
    c.detector.width = 1;
    c.detector.head_hidden = 4;
    auto pipeline = init_pipeline<float>(c);
    const auto data = generate_corpus(5, 9);
    std::vector<const PlateSample*> ptrs;
    double expected = 0;
    for (const auto& s : data) {
        ptrs.push_back(&s);
        expected += psnr(bicubic_upsample(s.lr, 4), s.hr) / 5.0;
    }
    const auto m = evaluate(pipeline, ptrs, 0.5, 0.45, 2);
    CHECK(m.plates == 5);
    CHECK(m.mean_psnr_bicubic == doctest::Approx(expected).epsilon(1e-12));
    CHECK(m.mean_psnr_sr > 0);
    CHECK(m.count_majority_accuracy >= 0.2);
    CHECK(m.count_majority_accuracy <= 1.0);
    CHECK(m.recognition_accuracy == 0.0);

    TrainConfig b = c;
    b.baseline = true;
    auto base = init_pipeline<float>(b);
    const auto mb = evaluate(base, ptrs, 0.5, 0.45, 3);
    CHECK(mb.mean_psnr_sr == 0.0);
    CHECK(mb.mean_psnr_bicubic == m.mean_psnr_bicubic);
}

TEST_CASE("ablation matrix with an injected run function") {
    const TrainConfig base;
    std::vector<std::string> seen;
    auto run = [&](const TrainConfig& c) {
        seen.push_back(c.run_label() + "/" + std::to_string(c.seed));
        if (c.run_label() == "wo_mse" && c.seed == 2) throw NumericError("diverged");
        return fake_metrics(c);
    };
    const auto report = run_ablation_matrix(base, {0, 1, 2}, run);
    CHECK(seen.size() == 18);
    REQUIRE(report.rows.size() == 6);
    CHECK(report.rows.front().label == "baseline");
    CHECK(report.rows.back().label == "full");
    for (const auto& row : report.rows) {
        CHECK(row.runs.size() == 3);
        if (row.label == "wo_mse") {
            CHECK(row.failures == 1);
            CHECK(row.runs[2].failed);
            CHECK(row.runs[2].error == "diverged");
            CHECK(row.accuracy_mean == doctest::Approx(0.51));
            CHECK(row.accuracy_std == doctest::Approx(0.01));
        } else {
            CHECK(row.failures == 0);
        }
    }
    const auto& full = report.rows.back();
    CHECK(full.accuracy_mean == doctest::Approx(0.52));
    CHECK(full.accuracy_std == doctest::Approx(std::sqrt(0.0008 / 3)));
    CHECK(full.psnr_sr_mean == doctest::Approx(21));
    CHECK(report.rows.front().accuracy_mean == doctest::Approx(0.21));
    CHECK_THROWS_AS(run_ablation_matrix(base, {}, run), ConfigError);
    CHECK_THROWS_AS(ablation_config(base, "wo_everything", 0), ConfigError);
    CHECK(ablation_config(base, "wo_adv", 4).weights.adv == 0.0);
    CHECK(ablation_config(base, "wo_adv", 4).seed == 4);
}

TEST_CASE("report files") {
    const auto dir = fs::temp_directory_path() / "lpsr_eval_report";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto report = run_ablation_matrix(TrainConfig{}, {0, 1, 2}, [](const TrainConfig& c) {
        if (c.run_label() == "wo_clc") throw IoError("no data");
        return fake_metrics(c);
    });
    write_report_json(report, dir / "report.json");
    write_report_csv(report, dir / "report.csv");
    write_accuracy_plot(report, dir / "accuracy.png");

    std::ifstream jin(dir / "report.json");
    const auto j = nlohmann::json::parse(jin);
    CHECK(j.at("rows").size() == 6);
    CHECK(j.at("seeds") == nlohmann::json::array({0, 1, 2}));
    CHECK(j.at("rows")[4].at("label") == "wo_clc");
    CHECK(j.at("rows")[4].at("failures") == 3);
    CHECK(j.at("rows")[4].at("runs")[0].at("error") == "no data");

    std::ifstream cin(dir / "report.csv");
    std::string line;
    int lines = 0;
    while (std::getline(cin, line)) ++lines;
    CHECK(lines == 7);

    const auto png = read_png(dir / "accuracy.png");
    CHECK(png.height() > 100);
    CHECK(png.width() > 400);
}
