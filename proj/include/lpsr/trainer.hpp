#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "lpsr/detector.hpp"
#include "lpsr/discriminator.hpp"
#include "lpsr/generator.hpp"
#include "lpsr/losses.hpp"
#include "lpsr/plategen.hpp"

namespace lpsr {

struct TrainConfig {
    // Optimisation.
    double lr_g = 2e-4;
    double lr_d = 1e-4;
    double lr_det = 1e-4;
    double lr_stage2 = 1e-5;  // discriminator rate after stage 1; G and detector keep their ratio to it
    int stage1_epochs = 10;
    int g_updates_per_d_update = 2;
    double clip_norm = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 16;
    int epochs = 20;
    std::uint64_t seed = 0;
    int detector_warmup_epochs = 2;
    int max_steps_per_epoch = 0;  // 0 = full pass over the training split
    LossWeights weights;

    // Recognition-only run: detector on bicubic-upsampled LR with a uniform count vector.
    bool baseline = false;

    // Data and evaluation.
    double holdout_fraction = 0.2;
    double conf_threshold = 0.5;
    double nms_iou = 0.45;
    bool eval_each_epoch = true;

    GeneratorConfig generator;
    DiscriminatorConfig discriminator;
    DetectorConfig detector;

    void validate() const;
    // "full", "wo_mse", "wo_adv", "wo_const", "wo_clc", "baseline" or "custom".
    std::string run_label() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Flat "key = value" text; '#' starts a comment. Unknown keys are rejected.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
// Applies one key/value pair (shared by the file parser and CLI overrides).
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
std::string format_train_config(const TrainConfig& config);

// Zeroes the weight named by an ablation flag: "mse", "adv", "const" or "clc".
TrainConfig ablate(TrainConfig config, const std::string& term);

struct LearningRates {
    double g = 0, d = 0, det = 0;
};

// epoch is 1-based.
LearningRates lr_schedule(int epoch, const TrainConfig& config);

// Scales gradients in place so their global L2 norm is at most clip_norm;
// returns the norm before clipping. Throws NumericError on non-finite values.
template <typename Scalar>
double clip_gradients(const std::vector<Tensor<Scalar>*>& grads, double clip_norm);

template <typename Scalar>
double clip_gradients(const std::vector<Parameter<Scalar>*>& params, double clip_norm);

template <typename Scalar>
struct AdamState {
    std::int64_t t = 0;
    std::map<std::string, Tensor<Scalar>> m, v;
};

template <typename Scalar>
void adam_update(const std::vector<Parameter<Scalar>*>& params, AdamState<Scalar>& state, double lr, double beta1,
                 double beta2, double eps);

// Generator, discriminator and detector with their configurations.
template <typename Scalar>
struct Pipeline {
    GeneratorConfig g_config;
    DiscriminatorConfig d_config;
    DetectorConfig det_config;
    GeneratorParams<Scalar> g;
    DiscriminatorParams<Scalar> d;
    DetectorParams<Scalar> det;
    bool baseline = false;
};

template <typename Scalar>
Pipeline<Scalar> init_pipeline(const TrainConfig& config);

// Inference on an LR batch: the image handed to the detector, the count
// vector conditioning it and the raw detector maps.
template <typename Scalar>
struct PipelineOutput {
    Tensor<Scalar> sr_raw;      // empty for baseline pipelines
    Tensor<Scalar> image;       // G_S2(G_S1(lr)), or bicubic(lr) for the baseline
    Tensor<Scalar> f_count;
    std::vector<Tensor<Scalar>> raw;
};

template <typename Scalar>
PipelineOutput<Scalar> run_pipeline(Pipeline<Scalar>& pipeline, const std::vector<const PlateSample*>& batch);

struct MetricRow {
    std::int64_t step = 0;
    int epoch = 0;
    double l_mse = 0, l_adv_g = 0, l_adv_d = 0, l_const = 0, l_clc = 0, total_g = 0, total_d = 0;
    std::optional<double> l_det;
};

struct EpochMetrics {
    int epoch = 0;
    double recognition_accuracy = 0;
    double mean_psnr_sr = 0;
    double mean_psnr_bicubic = 0;
    double count_head_accuracy = 0;
};

template <typename Scalar>
struct TrainState {
    TrainConfig config;
    Pipeline<Scalar> pipeline;
    int epoch = 0;  // completed epochs
    std::int64_t step = 0;
    std::int64_t g_steps = 0, d_steps = 0, det_steps = 0;
    std::int64_t skipped_steps = 0;
    AdamState<Scalar> adam_g, adam_d, adam_det;
    std::vector<MetricRow> history;
    std::vector<EpochMetrics> epoch_metrics;
};

template <typename Scalar>
TrainState<Scalar> init_train_state(const TrainConfig& config);

// One optimisation step: g_updates_per_d_update generator updates, one
// discriminator update, then (after warm-up) one detector update. On
// NumericError the state is restored and the error rethrown.
template <typename Scalar>
MetricRow train_step(TrainState<Scalar>& state, const std::vector<const PlateSample*>& batch);

// Deterministic permutation of [0, n) for a given epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

struct DatasetSplit {
    std::vector<const PlateSample*> train;
    std::vector<const PlateSample*> holdout;
};
DatasetSplit split_dataset(const std::vector<PlateSample>& samples, double holdout_fraction);

// Runs one epoch over the training split (state.epoch advances by one).
template <typename Scalar>
void train_epoch(TrainState<Scalar>& state, const DatasetSplit& split);

template <typename Scalar>
void save_checkpoint(const TrainState<Scalar>& state, const std::filesystem::path& path);

template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
    std::filesystem::path run_dir;
    std::filesystem::path final_checkpoint;
    int epochs_completed = 0;
};

// Full run: writes <out>/<run_label>/{epoch_K.ckpt, final.ckpt, metrics.csv,
// detector.csv, eval.csv, config.txt}. With resume set, continues from that
// checkpoint instead of initialising.
template <typename Scalar = float>
TrainResult train(const TrainConfig& config, const std::vector<PlateSample>& dataset, const std::filesystem::path& out,
                  const std::optional<std::filesystem::path>& resume = std::nullopt);

TrainResult train_from_dir(const TrainConfig& config, const std::filesystem::path& dataset_dir,
                           const std::filesystem::path& out);

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path);
void write_detector_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path);

}  // namespace lpsr
