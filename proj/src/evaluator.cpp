#include "lpsr/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "lpsr/alphabet.hpp"
#include "lpsr/image_io.hpp"

namespace lpsr {

namespace {

std::vector<const Detection*> confident(const std::vector<Detection>& dets, double conf_threshold) {
    std::vector<const Detection*> out;
    for (const auto& d : dets)
        if (d.confidence >= conf_threshold) out.push_back(&d);
    return out;
}

// Kuhn's augmenting-path search.
bool augment(std::size_t u, const std::vector<std::vector<std::size_t>>& adj, std::vector<int>& match_truth,
             std::vector<char>& seen) {
    for (std::size_t v : adj[u]) {
        if (seen[v]) continue;
        seen[v] = 1;
        if (match_truth[v] < 0 || augment(static_cast<std::size_t>(match_truth[v]), adj, match_truth, seen)) {
            match_truth[v] = static_cast<int>(u);
            return true;
        }
    }
    return false;
}

void require_aligned(std::size_t a, std::size_t b) {
    if (a != b)
        throw DomainError("predictions (" + std::to_string(a) + ") and ground truths (" + std::to_string(b) +
                          ") differ in length");
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    if (v.empty()) return 0;
    const double m = mean_of(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

std::size_t max_matching(const std::vector<Detection>& detections, const Annotation& truth, double iou_min,
                         double conf_threshold) {
    const auto dets = confident(detections, conf_threshold);
    std::vector<std::vector<std::size_t>> adj(dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i)
        for (std::size_t j = 0; j < truth.boxes.size(); ++j)
            if (dets[i]->box.class_id == truth.boxes[j].class_id && box_iou(dets[i]->box, truth.boxes[j]) >= iou_min)
                adj[i].push_back(j);
    std::vector<int> match_truth(truth.boxes.size(), -1);
    std::size_t matched = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        std::vector<char> seen(truth.boxes.size(), 0);
        if (augment(i, adj, match_truth, seen)) ++matched;
    }
    return matched;
}

bool plate_correct(const std::vector<Detection>& detections, const Annotation& truth, double iou_min,
                   double conf_threshold) {
    const std::size_t n_conf = confident(detections, conf_threshold).size();
    if (n_conf != truth.boxes.size()) return false;
    return max_matching(detections, truth, iou_min, conf_threshold) == truth.boxes.size();
}

double recognition_accuracy(const std::vector<std::vector<Detection>>& predictions,
                            const std::vector<Annotation>& truths, double iou_min, double conf_threshold) {
    require_aligned(predictions.size(), truths.size());
    if (truths.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truths.size(); ++i)
        if (plate_correct(predictions[i], truths[i], iou_min, conf_threshold)) ++correct;
    return static_cast<double>(correct) / static_cast<double>(truths.size());
}

CharStats char_stats(const std::vector<std::vector<Detection>>& predictions, const std::vector<Annotation>& truths,
                     double iou_min, double conf_threshold) {
    require_aligned(predictions.size(), truths.size());
    CharStats s;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        s.matched += max_matching(predictions[i], truths[i], iou_min, conf_threshold);
        s.detections += confident(predictions[i], conf_threshold).size();
        s.truths += truths[i].boxes.size();
    }
    return s;
}

double psnr(const PlateImage& a, const PlateImage& b) {
    require_same_shape(a.pixels, b.pixels, "psnr");
    if (a.pixels.size() == 0) throw ShapeError("psnr: empty images");
    const double mse = (a.pixels.array().cast<double>() - b.pixels.array().cast<double>()).square().mean();
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

void to_json(nlohmann::json& j, const EvalMetrics& m) {
    j = {{"run_label", m.run_label},
         {"plates", m.plates},
         {"recognition_accuracy", m.recognition_accuracy},
         {"char_precision", m.char_precision},
         {"char_recall", m.char_recall},
         {"mean_psnr_sr", m.mean_psnr_sr},
         {"mean_psnr_bicubic", m.mean_psnr_bicubic},
         {"count_head_accuracy", m.count_head_accuracy},
         {"count_majority_accuracy", m.count_majority_accuracy}};
}

template <typename Scalar>
EvalMetrics evaluate(Pipeline<Scalar>& pipeline, const std::vector<const PlateSample*>& samples, double conf_threshold,
                     double nms_iou, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("evaluate: batch_size must be > 0");
    EvalMetrics m;
    m.plates = samples.size();
    if (samples.empty()) return m;
    std::vector<std::vector<Detection>> predictions;
    std::vector<Annotation> truths;
    std::vector<double> psnr_sr, psnr_bicubic;
    std::size_t count_hits = 0;
    std::map<int, std::size_t> count_hist;
    const int min_count = pipeline.d_config.min_count;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::vector<const PlateSample*> batch(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                                    samples.begin() + static_cast<std::ptrdiff_t>(
                                                                          std::min(samples.size(), start + batch_size)));
        const auto out = run_pipeline(pipeline, batch);
        const Index k = out.f_count.dim(1);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto idx = static_cast<Index>(i);
            const PlateSample& s = *batch[i];
            predictions.push_back(decode(out.raw, pipeline.det_config.grid, conf_threshold, nms_iou, idx));
            truths.push_back(s.annotation);
            psnr_bicubic.push_back(psnr(bicubic_upsample(s.lr, 4), s.hr));
            if (!pipeline.baseline) psnr_sr.push_back(psnr(from_batch(out.image, idx), s.hr));
            Index best = 0;
            for (Index c = 1; c < k; ++c)
                if (out.f_count[idx * k + c] > out.f_count[idx * k + best]) best = c;
            if (best + min_count == s.annotation.count) ++count_hits;
            ++count_hist[s.annotation.count];
        }
    }
    m.recognition_accuracy = recognition_accuracy(predictions, truths, 0.5, conf_threshold);
    const CharStats cs = char_stats(predictions, truths, 0.5, conf_threshold);
    m.char_precision = cs.precision();
    m.char_recall = cs.recall();
    m.mean_psnr_sr = mean_of(psnr_sr);
    m.mean_psnr_bicubic = mean_of(psnr_bicubic);
    const double n = static_cast<double>(samples.size());
    m.count_head_accuracy = static_cast<double>(count_hits) / n;
    std::size_t majority = 0;
    for (const auto& [c, hits] : count_hist) majority = std::max(majority, hits);
    m.count_majority_accuracy = static_cast<double>(majority) / n;
    return m;
}

// ---- ablation matrix ----

TrainConfig ablation_config(const TrainConfig& base, const std::string& label, std::uint64_t seed) {
    TrainConfig c = base;
    c.seed = seed;
    c.baseline = false;
    if (label == "baseline")
        c.baseline = true;
    else if (label == "wo_mse")
        c = ablate(c, "mse");
    else if (label == "wo_const")
        c = ablate(c, "const");
    else if (label == "wo_adv")
        c = ablate(c, "adv");
    else if (label == "wo_clc")
        c = ablate(c, "clc");
    else if (label != "full")
        throw ConfigError("unknown ablation row '" + label + "'");
    return c;
}

void aggregate(AblationRow& row) {
    std::vector<double> acc, psnr_sr, psnr_bi, count;
    row.failures = 0;
    for (const auto& r : row.runs) {
        if (r.failed) {
            ++row.failures;
            continue;
        }
        acc.push_back(r.metrics.recognition_accuracy);
        psnr_sr.push_back(r.metrics.mean_psnr_sr);
        psnr_bi.push_back(r.metrics.mean_psnr_bicubic);
        count.push_back(r.metrics.count_head_accuracy);
    }
    row.accuracy_mean = mean_of(acc);
    row.accuracy_std = std_of(acc);
    row.psnr_sr_mean = mean_of(psnr_sr);
    row.psnr_bicubic_mean = mean_of(psnr_bi);
    row.count_accuracy_mean = mean_of(count);
}

AblationReport run_ablation_matrix(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                   const RunFunction& run) {
    if (seeds.empty()) throw ConfigError("ablation matrix needs at least one seed");
    AblationReport report;
    report.seeds = seeds;
    for (const std::string& label : ablation_labels()) {
        AblationRow row;
        row.label = label;
        for (std::uint64_t seed : seeds) {
            AblationRun r;
            r.seed = seed;
            try {
                r.metrics = run(ablation_config(base, label, seed));
                r.metrics.run_label = label;
            } catch (const std::exception& e) {
                r.failed = true;
                r.error = e.what();
            }
            row.runs.push_back(std::move(r));
        }
        aggregate(row);
        report.rows.push_back(std::move(row));
    }
    return report;
}

AblationReport run_ablation_matrix(const TrainConfig& base, const std::vector<PlateSample>& dataset,
                                   const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir) {
    const DatasetSplit split = split_dataset(dataset, base.holdout_fraction);
    auto run = [&](const TrainConfig& cfg) {
        const auto result = train<float>(cfg, dataset, out_dir / ("seed_" + std::to_string(cfg.seed)));
        auto state = load_checkpoint<float>(result.final_checkpoint);
        EvalMetrics m = evaluate(state.pipeline, split.holdout, cfg.conf_threshold, cfg.nms_iou);
        m.run_label = cfg.run_label();
        return m;
    };
    AblationReport report = run_ablation_matrix(base, seeds, run);
    report.corpus = {{"samples", dataset.size()},
                     {"train", split.train.size()},
                     {"holdout", split.holdout.size()},
                     {"factor", 4},
                     {"hr_size", {kPlateWidth, kPlateHeight}}};
    return report;
}

void write_report_json(const AblationReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["seeds"] = report.seeds;
    j["corpus"] = report.corpus;
    j["rows"] = nlohmann::json::array();
    for (const auto& row : report.rows) {
        nlohmann::json r = {{"label", row.label},
                            {"accuracy_mean", row.accuracy_mean},
                            {"accuracy_std", row.accuracy_std},
                            {"psnr_sr_mean", row.psnr_sr_mean},
                            {"psnr_bicubic_mean", row.psnr_bicubic_mean},
                            {"count_accuracy_mean", row.count_accuracy_mean},
                            {"failures", row.failures},
                            {"runs", nlohmann::json::array()}};
        for (const auto& run : row.runs) {
            nlohmann::json rj = {{"seed", run.seed}, {"failed", run.failed}};
            if (run.failed)
                rj["error"] = run.error;
            else
                rj["metrics"] = run.metrics;
            r["runs"].push_back(rj);
        }
        j["rows"].push_back(r);
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

void write_report_csv(const AblationReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "label,runs,failures,accuracy_mean,accuracy_std,psnr_sr_mean,psnr_bicubic_mean,count_accuracy_mean\n";
    for (const auto& r : report.rows)
        out << r.label << ',' << r.runs.size() << ',' << r.failures << ',' << r.accuracy_mean << ',' << r.accuracy_std
            << ',' << r.psnr_sr_mean << ',' << r.psnr_bicubic_mean << ',' << r.count_accuracy_mean << '\n';
}

namespace {

struct Canvas {
    PlateImage img;
    void fill(Index x0, Index y0, Index x1, Index y1, float r, float g, float b) {
        for (Index y = std::max<Index>(0, y0); y < std::min(img.height(), y1); ++y)
            for (Index x = std::max<Index>(0, x0); x < std::min(img.width(), x1); ++x) {
                float* p = img.pixels.data() + (y * img.width() + x) * 3;
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
    }
    // Upper-case text with the 5x7 glyph atlas; unsupported characters become gaps.
    void text(Index x, Index y, const std::string& s) {
        for (char ch : s) {
            const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
            if ((up >= '0' && up <= '9') || (up >= 'A' && up <= 'Z')) {
                const Glyph& g = glyph(class_of(std::string(1, up)));
                for (int gy = 0; gy < g.height; ++gy)
                    for (int gx = 0; gx < g.width; ++gx)
                        if (g.at(gx, gy)) fill(x + gx, y + gy, x + gx + 1, y + gy + 1, 0, 0, 0);
            }
            x += 6;
        }
    }
};

}  // namespace

void write_accuracy_plot(const AblationReport& report, const std::filesystem::path& path) {
    constexpr Index kW = 520, kH = 260, kLeft = 40, kBottom = 220, kTop = 20, kSlot = 80;
    Canvas c{PlateImage(kH, kW, 1.0f)};
    const double span = static_cast<double>(kBottom - kTop);
    c.fill(kLeft - 2, kTop, kLeft, kBottom + 1, 0, 0, 0);
    c.fill(kLeft - 2, kBottom, kW - 10, kBottom + 2, 0, 0, 0);
    for (int tick = 0; tick <= 4; ++tick) {
        const Index y = kBottom - static_cast<Index>(span * tick / 4.0);
        c.fill(kLeft - 6, y, kLeft - 2, y + 1, 0, 0, 0);
        c.text(4, y - 3, std::to_string(tick * 25));
    }
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& row = report.rows[i];
        const Index x0 = kLeft + 15 + static_cast<Index>(i) * kSlot;
        const bool all_failed = row.failures == row.runs.size();
        const Index top = kBottom - static_cast<Index>(std::lround(span * std::clamp(row.accuracy_mean, 0.0, 1.0)));
        if (all_failed)
            c.fill(x0, kBottom - 4, x0 + 40, kBottom, 0.85f, 0.1f, 0.1f);
        else
            c.fill(x0, top, x0 + 40, kBottom, row.label == "full" ? 0.15f : 0.45f, 0.35f, 0.75f);
        if (row.accuracy_std > 0) {
            const auto lo = static_cast<Index>(
                std::lround(kBottom - span * std::clamp(row.accuracy_mean - row.accuracy_std, 0.0, 1.0)));
            const auto hi = static_cast<Index>(
                std::lround(kBottom - span * std::clamp(row.accuracy_mean + row.accuracy_std, 0.0, 1.0)));
            c.fill(x0 + 19, hi, x0 + 21, lo + 1, 0, 0, 0);
            c.fill(x0 + 12, hi, x0 + 28, hi + 1, 0, 0, 0);
            c.fill(x0 + 12, lo, x0 + 28, lo + 1, 0, 0, 0);
        }
        c.text(x0 + 20 - static_cast<Index>(row.label.size()) * 3, kBottom + 10, row.label);
        if (row.failures > 0) c.text(x0 + 8, kBottom + 22, "F" + std::to_string(row.failures));
    }
    write_png(c.img, path);
}

template EvalMetrics evaluate(Pipeline<float>&, const std::vector<const PlateSample*>&, double, double, std::size_t);
template EvalMetrics evaluate(Pipeline<double>&, const std::vector<const PlateSample*>&, double, double, std::size_t);

}  // namespace lpsr
