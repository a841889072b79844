#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "lpsr/nn.hpp"
#include "lpsr/plategen.hpp"

// One-stage character detector over a single-row grid. Each scale emits a
// [N, 1, S, B*(5+C)] map; slot b of a cell owns channels
// b*(5+C) + {tx, ty, tw, th, objectness, class logits...}.

namespace lpsr {

struct Anchor {
    double w = 0, h = 0;  // normalized to the image size
};

enum class Conditioning { Add, Concat };

struct GridSpec {
    std::array<Index, 3> strides{32, 16, 8};
    Index input_height = kPlateHeight;
    Index input_width = kPlateWidth;
    Index anchors_per_scale = 3;
    Index classes = 66;
    // Three priors per scale, in stride order.
    std::array<std::array<Anchor, 3>, 3> anchors{};

    Index grid_width(std::size_t scale) const { return input_width / strides[scale]; }
    Index slot_size() const { return 5 + classes; }
    Index channels() const { return anchors_per_scale * slot_size(); }
    Index slots() const;  // total (scale, column, anchor) slots per image
};

// Priors computed by k-means over box shapes of the default synthetic corpus.
GridSpec default_grid();

// Channel arithmetic B*(5+C).
constexpr Index head_channels(Index anchors_per_scale, Index classes) { return anchors_per_scale * (5 + classes); }

struct DetectorConfig {
    Index channels = 3;
    Index width = 16;
    Index head_hidden = 64;
    Index count_classes = 5;
    Conditioning conditioning = Conditioning::Add;
    double objectness_bias = -4.0;
    GridSpec grid = default_grid();
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

// Per-scale encoded targets, same layout as the raw network output.
template <typename Scalar>
struct DetectionTarget {
    std::vector<Tensor<Scalar>> scales;
};

struct Detection {
    Box box;
    double confidence = 0;
};

template <typename Scalar>
struct DetectorParams {
    ParamSet<Scalar> params;
};

// Largest-IoU prior at the centre column, falling back to the next-best free slot.
template <typename Scalar>
DetectionTarget<Scalar> build_targets(const Annotation& annotation, const GridSpec& grid);

// Batch of targets stacked along N.
template <typename Scalar>
DetectionTarget<Scalar> build_targets(const std::vector<const Annotation*>& annotations, const GridSpec& grid);

// Logits that decode exactly to the encoded targets (used for roundtrip checks).
template <typename Scalar>
std::vector<Tensor<Scalar>> perfect_raw(const DetectionTarget<Scalar>& targets, const GridSpec& grid);

template <typename Scalar>
DetectorParams<Scalar> init_detector(const DetectorConfig& config, std::uint64_t seed);

// image [N, 64, 128, 3], f_count [N, count_classes] -> three raw maps (strides 32, 16, 8).
template <typename Scalar>
std::vector<Var<Scalar>> detect_forward(const DetectorConfig& config, DetectorParams<Scalar>& params,
                                        Var<Scalar> image, Var<Scalar> f_count, Mode mode);

template <typename Scalar>
std::vector<Tensor<Scalar>> detect(const DetectorConfig& config, DetectorParams<Scalar>& params,
                                   const Tensor<Scalar>& image, const Tensor<Scalar>& f_count, Mode mode = Mode::Eval);

struct DetectionLossParts {
    double box = 0;
    double objectness = 0;
    double classification = 0;
    double total() const { return box + objectness + classification; }
};

// Summed over slots, averaged over the batch.
template <typename Scalar>
DetectionLossParts detection_loss_parts(const std::vector<Tensor<Scalar>>& raw, const DetectionTarget<Scalar>& targets);

template <typename Scalar>
Scalar detection_loss(const std::vector<Tensor<Scalar>>& raw, const DetectionTarget<Scalar>& targets);

template <typename Scalar>
Var<Scalar> detection_loss(const std::vector<Var<Scalar>>& raw, const DetectionTarget<Scalar>& targets);

// Decodes image `index` of a raw batch: per-class confidence, threshold, greedy
// per-class NMS; sorted by descending confidence.
template <typename Scalar>
std::vector<Detection> decode(const std::vector<Tensor<Scalar>>& raw, const GridSpec& grid, double conf_threshold,
                              double nms_iou, Index index = 0);

std::vector<Detection> non_max_suppression(std::vector<Detection> candidates, double nms_iou);

// Class ids ordered left to right.
std::vector<int> read_plate(std::vector<Detection> detections);
std::string plate_string(const std::vector<int>& class_ids);

double box_iou(const Box& a, const Box& b);
// IoU of two (w, h) shapes sharing a centre.
double shape_iou(double w1, double h1, double w2, double h2);

// k-means with 1 - IoU distance over box shapes, seeded at area quantiles;
// returns k anchors sorted by area.
std::vector<Anchor> kmeans_anchors(const std::vector<Annotation>& annotations, std::size_t k, int iterations = 100);
GridSpec grid_from_anchors(const std::vector<Anchor>& sorted_by_area);

}  // namespace lpsr
