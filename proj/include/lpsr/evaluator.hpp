#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpsr/trainer.hpp"

namespace lpsr {

inline constexpr double kPsnrCap = 100.0;

// Size of a maximum one-to-one matching between detections (confidence >=
// conf_threshold) and ground-truth boxes, where a pair is admissible when the
// classes agree and IoU >= iou_min.
std::size_t max_matching(const std::vector<Detection>& detections, const Annotation& truth, double iou_min,
                         double conf_threshold);

// All characters matched and no unmatched confident detection.
bool plate_correct(const std::vector<Detection>& detections, const Annotation& truth, double iou_min = 0.5,
                   double conf_threshold = 0.5);

double recognition_accuracy(const std::vector<std::vector<Detection>>& predictions,
                            const std::vector<Annotation>& truths, double iou_min = 0.5, double conf_threshold = 0.5);

struct CharStats {
    std::size_t matched = 0, detections = 0, truths = 0;
    double precision() const { return detections ? double(matched) / double(detections) : 1.0; }
    double recall() const { return truths ? double(matched) / double(truths) : 1.0; }
};

CharStats char_stats(const std::vector<std::vector<Detection>>& predictions, const std::vector<Annotation>& truths,
                     double iou_min = 0.5, double conf_threshold = 0.5);

// 10 log10(1 / MSE) for intensities in [0, 1]; identical images give kPsnrCap.
double psnr(const PlateImage& a, const PlateImage& b);

struct EvalMetrics {
    std::string run_label;
    std::size_t plates = 0;
    double recognition_accuracy = 0;
    double char_precision = 0;
    double char_recall = 0;
    double mean_psnr_sr = 0;        // refined output vs HR (0 for baseline runs)
    double mean_psnr_bicubic = 0;
    double count_head_accuracy = 0; // argmax f_count on the SR image vs true count
    double count_majority_accuracy = 0;
};

void to_json(nlohmann::json& j, const EvalMetrics& m);

template <typename Scalar>
EvalMetrics evaluate(Pipeline<Scalar>& pipeline, const std::vector<const PlateSample*>& samples, double conf_threshold,
                     double nms_iou, std::size_t batch_size = 32);

// ---- ablation matrix ----

inline const std::vector<std::string>& ablation_labels() {
    static const std::vector<std::string> labels{"baseline", "wo_mse", "wo_const", "wo_adv", "wo_clc", "full"};
    return labels;
}

// Config for one row of the matrix.
TrainConfig ablation_config(const TrainConfig& base, const std::string& label, std::uint64_t seed);

struct AblationRun {
    std::uint64_t seed = 0;
    bool failed = false;
    std::string error;
    EvalMetrics metrics;
};

struct AblationRow {
    std::string label;
    std::vector<AblationRun> runs;
    // Mean and population standard deviation over successful runs.
    double accuracy_mean = 0, accuracy_std = 0;
    double psnr_sr_mean = 0, psnr_bicubic_mean = 0;
    double count_accuracy_mean = 0;
    std::size_t failures = 0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::vector<std::uint64_t> seeds;
    nlohmann::json corpus;
};

using RunFunction = std::function<EvalMetrics(const TrainConfig& config)>;

// Trains and evaluates every (row, seed) pair. run defaults to a full train
// + held-out evaluation in dataset; failures are recorded, not propagated.
AblationReport run_ablation_matrix(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                                   const RunFunction& run);

AblationReport run_ablation_matrix(const TrainConfig& base, const std::vector<PlateSample>& dataset,
                                   const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir);

void aggregate(AblationRow& row);

void write_report_json(const AblationReport& report, const std::filesystem::path& path);
void write_report_csv(const AblationReport& report, const std::filesystem::path& path);
// Bar chart of mean recognition accuracy per row with +/- std whiskers.
void write_accuracy_plot(const AblationReport& report, const std::filesystem::path& path);

}  // namespace lpsr
