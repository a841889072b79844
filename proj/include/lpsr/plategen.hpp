#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "lpsr/tensor.hpp"

namespace lpsr {

inline constexpr Index kPlateWidth = 128;
inline constexpr Index kPlateHeight = 64;
inline constexpr int kMinChars = 4;
inline constexpr int kMaxChars = 8;
inline constexpr double kMaxTiltDeg = 30.0;

enum class PlateStyle { LightOnDark, DarkOnLight };

struct PlateSpec {
    std::vector<int> chars;  // class ids
    double tilt_deg = 0.0;
    PlateStyle plate_style = PlateStyle::DarkOnLight;
    double noise_sigma = 0.0;
    double blur_sigma = 0.0;
    std::uint64_t seed = 0;

    // Throws InvalidSpecError when any invariant is violated.
    void validate() const;
};

// H x W x 3 intensities in [0, 1].
struct PlateImage {
    Tensor<float> pixels;

    PlateImage() = default;
    explicit PlateImage(Tensor<float> p) : pixels(std::move(p)) {}
    PlateImage(Index height, Index width, float fill = 0.0f) : pixels({height, width, 3}, fill) {}

    Index height() const { return pixels.dim(0); }
    Index width() const { return pixels.dim(1); }
};

// Normalized axis-aligned box.
struct Box {
    int class_id = 0;
    double cx = 0, cy = 0, w = 0, h = 0;
};

struct Annotation {
    std::vector<Box> boxes;
    int count = 0;

    void validate() const;
};

struct PlateSample {
    std::string id;
    PlateImage lr;
    PlateImage hr;
    Annotation annotation;
    PlateSpec spec;
};

// Planar approximation of an out-of-plane tilt: rotation by half the tilt
// angle followed by a horizontal shear of tan(tilt)/2, plus a uniform scale
// that keeps the text block inside the canvas.
struct TiltTransform {
    double cos_a = 1, sin_a = 0, shear = 0, scale = 1;
    double cx = kPlateWidth / 2.0, cy = kPlateHeight / 2.0;

    void forward(double x, double y, double& ox, double& oy) const;
    void inverse(double x, double y, double& ox, double& oy) const;
};

// Untilted glyph rectangles (pixel coordinates) and the transform applied to them.
struct PlateLayout {
    struct Rect {
        double x0, y0, x1, y1;
    };
    std::vector<Rect> glyph_rects;
    TiltTransform transform;
};

PlateLayout plate_layout(const PlateSpec& spec);

// Rasterizes the plate at 128 x 64; deterministic given the spec.
std::pair<PlateImage, Annotation> render_plate(const PlateSpec& spec);

// Gaussian blur, area downsample by factor, additive Gaussian noise, clip to [0, 1].
PlateImage degrade(const PlateImage& hr, int factor, double blur_sigma, double noise_sigma, std::uint64_t seed);

// Random plate spec for corpus generation.
PlateSpec sample_plate_spec(std::uint64_t seed, double tilt_max = kMaxTiltDeg);

// Per-sample seed derived from the corpus seed, so samples are independent of generation order.
std::uint64_t sample_seed(std::uint64_t corpus_seed, std::uint64_t index);

PlateSample generate_sample(std::uint64_t corpus_seed, std::uint64_t index, double tilt_max = kMaxTiltDeg,
                            int factor = 4);

std::vector<PlateSample> generate_corpus(std::size_t n, std::uint64_t corpus_seed, double tilt_max = kMaxTiltDeg,
                                         int factor = 4);

// Dataset directory: images/{id}_hr.png, images/{id}_lr.png, manifest.jsonl.
void write_dataset(const std::vector<PlateSample>& samples, const std::filesystem::path& dir);
std::vector<PlateSample> read_dataset(const std::filesystem::path& dir);

void to_json(nlohmann::json& j, const PlateSpec& s);
void from_json(const nlohmann::json& j, PlateSpec& s);
void to_json(nlohmann::json& j, const Box& b);
void from_json(const nlohmann::json& j, Box& b);

// Nearest-multiple bicubic (Keys, a = -0.5) upsampling with edge clamping.
PlateImage bicubic_upsample(const PlateImage& lr, int factor);

// [H, W, 3] images -> [N, H, W, 3] batch in the requested precision.
template <typename Scalar>
Tensor<Scalar> to_batch(const std::vector<const PlateImage*>& images);

template <typename Scalar>
PlateImage from_batch(const Tensor<Scalar>& batch, Index index);

}  // namespace lpsr
