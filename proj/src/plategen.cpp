#include "lpsr/plategen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "lpsr/alphabet.hpp"
#include "lpsr/errors.hpp"
#include "lpsr/image_io.hpp"

namespace lpsr {

namespace {

constexpr double kTextLeft = 6.0;
constexpr double kTextRight = kPlateWidth - 6.0;
constexpr double kGlyphHeight = 40.0;
constexpr double kMaxGlyphWidth = 22.0;
constexpr double kFitMargin = 2.0;
constexpr int kSupersample = 3;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

const char* style_name(PlateStyle s) { return s == PlateStyle::LightOnDark ? "light-on-dark" : "dark-on-light"; }

PlateStyle style_from(const std::string& s) {
    if (s == "light-on-dark") return PlateStyle::LightOnDark;
    if (s == "dark-on-light") return PlateStyle::DarkOnLight;
    throw InvalidSpecError("unknown plate style '" + s + "'");
}

TiltTransform make_transform(double tilt_deg, double y0, double y1) {
    TiltTransform t;
    const double a = 0.5 * tilt_deg * std::numbers::pi / 180.0;
    t.cos_a = std::cos(a);
    t.sin_a = std::sin(a);
    t.shear = 0.5 * std::tan(tilt_deg * std::numbers::pi / 180.0);
    double max_dx = 0, max_dy = 0;
    for (double x : {kTextLeft, kTextRight})
        for (double y : {y0, y1}) {
            double ox, oy;
            t.forward(x, y, ox, oy);
            max_dx = std::max(max_dx, std::abs(ox - t.cx));
            max_dy = std::max(max_dy, std::abs(oy - t.cy));
        }
    t.scale = std::min({1.0, (t.cx - kFitMargin) / max_dx, (t.cy - kFitMargin) / max_dy});
    return t;
}

std::normal_distribution<double> unit_normal() { return std::normal_distribution<double>(0.0, 1.0); }

}  // namespace

void PlateSpec::validate() const {
    const auto n = static_cast<int>(chars.size());
    if (n < kMinChars || n > kMaxChars)
        throw InvalidSpecError("plate must have 4..8 characters, got " + std::to_string(n));
    for (int c : chars)
        if (c < 0 || c >= kNumClasses) throw InvalidSpecError("unknown class id " + std::to_string(c));
    if (!(std::abs(tilt_deg) <= kMaxTiltDeg)) throw InvalidSpecError("tilt outside [-30, 30] degrees");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw InvalidSpecError("noise_sigma must be >= 0");
    if (!(blur_sigma >= 0.0) || !std::isfinite(blur_sigma)) throw InvalidSpecError("blur_sigma must be >= 0");
}

void Annotation::validate() const {
    if (count != static_cast<int>(boxes.size()))
        throw ValidationError("annotation count " + std::to_string(count) + " does not match " +
                              std::to_string(boxes.size()) + " boxes");
    constexpr double tol = 1e-9;
    for (const Box& b : boxes) {
        if (b.class_id < 0 || b.class_id >= kNumClasses)
            throw ValidationError("annotation class id " + std::to_string(b.class_id) + " out of range");
        if (!(b.w > 0 && b.h > 0) || b.cx - b.w / 2 < -tol || b.cx + b.w / 2 > 1 + tol || b.cy - b.h / 2 < -tol ||
            b.cy + b.h / 2 > 1 + tol)
            throw ValidationError("annotation box outside the unit square");
    }
}

void TiltTransform::forward(double x, double y, double& ox, double& oy) const {
    const double dx = x - cx, dy = y - cy;
    const double rx = cos_a * dx - sin_a * dy;
    const double ry = sin_a * dx + cos_a * dy;
    ox = cx + scale * (rx + shear * ry);
    oy = cy + scale * ry;
}

void TiltTransform::inverse(double x, double y, double& ox, double& oy) const {
    const double ry = (y - cy) / scale;
    const double rx = (x - cx) / scale - shear * ry;
    ox = cx + cos_a * rx + sin_a * ry;
    oy = cy - sin_a * rx + cos_a * ry;
}

PlateLayout plate_layout(const PlateSpec& spec) {
    spec.validate();
    PlateLayout layout;
    const auto n = static_cast<double>(spec.chars.size());
    const double cell = (kTextRight - kTextLeft) / n;
    const double gw = std::min(0.75 * cell, kMaxGlyphWidth);
    const double y0 = kPlateHeight / 2.0 - kGlyphHeight / 2.0, y1 = y0 + kGlyphHeight;
    for (std::size_t i = 0; i < spec.chars.size(); ++i) {
        const double mid = kTextLeft + (static_cast<double>(i) + 0.5) * cell;
        layout.glyph_rects.push_back({mid - gw / 2, y0, mid + gw / 2, y1});
    }
    layout.transform = make_transform(spec.tilt_deg, y0, y1);
    return layout;
}

std::pair<PlateImage, Annotation> render_plate(const PlateSpec& spec) {
    const PlateLayout layout = plate_layout(spec);
    const TiltTransform& t = layout.transform;

    std::mt19937_64 rng(splitmix64(spec.seed));
    std::uniform_real_distribution<double> light(0.70, 0.95), dark(0.05, 0.30), tint(-0.05, 0.05);
    double bg[3], fg[3];
    const double bg_base = spec.plate_style == PlateStyle::DarkOnLight ? light(rng) : dark(rng);
    const double fg_base = spec.plate_style == PlateStyle::DarkOnLight ? dark(rng) : light(rng);
    for (int c = 0; c < 3; ++c) {
        bg[c] = std::clamp(bg_base + tint(rng), 0.0, 1.0);
        fg[c] = std::clamp(fg_base + tint(rng), 0.0, 1.0);
    }

    PlateImage img(kPlateHeight, kPlateWidth);
    constexpr double inv_samples = 1.0 / (kSupersample * kSupersample);
    for (Index py = 0; py < kPlateHeight; ++py)
        for (Index px = 0; px < kPlateWidth; ++px) {
            int hits = 0;
            for (int sy = 0; sy < kSupersample; ++sy)
                for (int sx = 0; sx < kSupersample; ++sx) {
                    double u, v;
                    t.inverse(px + (sx + 0.5) / kSupersample, py + (sy + 0.5) / kSupersample, u, v);
                    for (std::size_t i = 0; i < layout.glyph_rects.size(); ++i) {
                        const auto& r = layout.glyph_rects[i];
                        if (u < r.x0 || u >= r.x1 || v < r.y0 || v >= r.y1) continue;
                        const Glyph& g = glyph(spec.chars[i]);
                        const int gx = std::min(g.width - 1, static_cast<int>((u - r.x0) / (r.x1 - r.x0) * g.width));
                        const int gy = std::min(g.height - 1, static_cast<int>((v - r.y0) / (r.y1 - r.y0) * g.height));
                        if (g.at(gx, gy)) ++hits;
                        break;
                    }
                }
            const double cover = hits * inv_samples;
            for (int c = 0; c < 3; ++c)
                img.pixels[(py * kPlateWidth + px) * 3 + c] = static_cast<float>(bg[c] + (fg[c] - bg[c]) * cover);
        }

    Annotation ann;
    for (std::size_t i = 0; i < layout.glyph_rects.size(); ++i) {
        const auto& r = layout.glyph_rects[i];
        double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
        for (double x : {r.x0, r.x1})
            for (double y : {r.y0, r.y1}) {
                double ox, oy;
                t.forward(x, y, ox, oy);
                x_lo = std::min(x_lo, ox);
                x_hi = std::max(x_hi, ox);
                y_lo = std::min(y_lo, oy);
                y_hi = std::max(y_hi, oy);
            }
        x_lo = std::max(0.0, x_lo / kPlateWidth);
        x_hi = std::min(1.0, x_hi / kPlateWidth);
        y_lo = std::max(0.0, y_lo / kPlateHeight);
        y_hi = std::min(1.0, y_hi / kPlateHeight);
        ann.boxes.push_back({spec.chars[i], (x_lo + x_hi) / 2, (y_lo + y_hi) / 2, x_hi - x_lo, y_hi - y_lo});
    }
    ann.count = static_cast<int>(ann.boxes.size());
    return {std::move(img), std::move(ann)};
}

PlateImage degrade(const PlateImage& hr, int factor, double blur_sigma, double noise_sigma, std::uint64_t seed) {
    if (factor < 1) throw ShapeError("degrade: factor must be >= 1");
    const Index h = hr.height(), w = hr.width();
    if (h % factor != 0 || w % factor != 0)
        throw ShapeError("degrade: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                         std::to_string(factor));
    if (blur_sigma < 0 || noise_sigma < 0) throw DomainError("degrade: sigmas must be >= 0");

    Tensor<float> blurred = hr.pixels;
    if (blur_sigma > 0) {
        const int radius = static_cast<int>(std::ceil(3.0 * blur_sigma));
        std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
        double ksum = 0;
        for (int i = -radius; i <= radius; ++i)
            ksum += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (blur_sigma * blur_sigma));
        for (double& v : k) v /= ksum;
        auto pass = [&](const Tensor<float>& src, bool horizontal) {
            Tensor<float> dst(src.shape());
            for (Index y = 0; y < h; ++y)
                for (Index x = 0; x < w; ++x)
                    for (Index c = 0; c < 3; ++c) {
                        double acc = 0;
                        for (int i = -radius; i <= radius; ++i) {
                            const Index sx = horizontal ? std::clamp<Index>(x + i, 0, w - 1) : x;
                            const Index sy = horizontal ? y : std::clamp<Index>(y + i, 0, h - 1);
                            acc += k[static_cast<std::size_t>(i + radius)] * src[(sy * w + sx) * 3 + c];
                        }
                        dst[(y * w + x) * 3 + c] = static_cast<float>(acc);
                    }
            return dst;
        };
        blurred = pass(pass(blurred, true), false);
    }

    const Index oh = h / factor, ow = w / factor;
    PlateImage out(oh, ow);
    const double inv_area = 1.0 / (factor * factor);
    std::mt19937_64 rng(seed);
    auto noise = unit_normal();
    for (Index y = 0; y < oh; ++y)
        for (Index x = 0; x < ow; ++x)
            for (Index c = 0; c < 3; ++c) {
                double acc = 0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) acc += blurred[((y * factor + dy) * w + x * factor + dx) * 3 + c];
                double v = acc * inv_area;
                if (noise_sigma > 0) v += noise_sigma * noise(rng);
                out.pixels[(y * ow + x) * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
    return out;
}

PlateSpec sample_plate_spec(std::uint64_t seed, double tilt_max) {
    if (!(tilt_max >= 0 && tilt_max <= kMaxTiltDeg)) throw InvalidSpecError("tilt_max must be in [0, 30]");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> count(kMinChars, kMaxChars);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> digit(0, kFirstLatin - 1), latin(kFirstLatin, kFirstHangul - 1),
        hangul(kFirstHangul, kNumClasses - 1);
    PlateSpec s;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
        const double u = unit(rng);
        s.chars.push_back(u < 0.60 ? digit(rng) : u < 0.85 ? latin(rng) : hangul(rng));
    }
    s.tilt_deg = std::uniform_real_distribution<double>(-tilt_max, tilt_max)(rng);
    s.plate_style = unit(rng) < 0.5 ? PlateStyle::DarkOnLight : PlateStyle::LightOnDark;
    s.noise_sigma = std::uniform_real_distribution<double>(0.0, 0.03)(rng);
    s.blur_sigma = std::uniform_real_distribution<double>(0.3, 1.2)(rng);
    s.seed = seed;
    return s;
}

std::uint64_t sample_seed(std::uint64_t corpus_seed, std::uint64_t index) {
    return splitmix64(splitmix64(corpus_seed) ^ (index * 0xD1B54A32D192ED03ULL));
}

PlateSample generate_sample(std::uint64_t corpus_seed, std::uint64_t index, double tilt_max, int factor) {
    const std::uint64_t seed = sample_seed(corpus_seed, index);
    PlateSample s;
    char id[32];
    std::snprintf(id, sizeof id, "%06llu", static_cast<unsigned long long>(index));
    s.id = id;
    s.spec = sample_plate_spec(seed, tilt_max);
    auto [hr, ann] = render_plate(s.spec);
    s.lr = degrade(hr, factor, s.spec.blur_sigma, s.spec.noise_sigma, splitmix64(seed ^ 0x5DEECE66DULL));
    s.hr = std::move(hr);
    s.annotation = std::move(ann);
    return s;
}

std::vector<PlateSample> generate_corpus(std::size_t n, std::uint64_t corpus_seed, double tilt_max, int factor) {
    std::vector<PlateSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(corpus_seed, i, tilt_max, factor));
    return out;
}

void to_json(nlohmann::json& j, const PlateSpec& s) {
    j = {{"chars", s.chars},
         {"tilt_deg", s.tilt_deg},
         {"plate_style", style_name(s.plate_style)},
         {"noise_sigma", s.noise_sigma},
         {"blur_sigma", s.blur_sigma},
         {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, PlateSpec& s) {
    j.at("chars").get_to(s.chars);
    j.at("tilt_deg").get_to(s.tilt_deg);
    s.plate_style = style_from(j.at("plate_style").get<std::string>());
    j.at("noise_sigma").get_to(s.noise_sigma);
    j.at("blur_sigma").get_to(s.blur_sigma);
    j.at("seed").get_to(s.seed);
}

void to_json(nlohmann::json& j, const Box& b) {
    j = {{"class_id", b.class_id}, {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}};
}

void from_json(const nlohmann::json& j, Box& b) {
    j.at("class_id").get_to(b.class_id);
    j.at("cx").get_to(b.cx);
    j.at("cy").get_to(b.cy);
    j.at("w").get_to(b.w);
    j.at("h").get_to(b.h);
}

void write_dataset(const std::vector<PlateSample>& samples, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw IoError("cannot write manifest in " + dir.string());
    for (const PlateSample& s : samples) {
        const std::string hr_rel = "images/" + s.id + "_hr.png";
        const std::string lr_rel = "images/" + s.id + "_lr.png";
        write_png(s.hr, dir / hr_rel);
        write_png(s.lr, dir / lr_rel);
        nlohmann::json j = {{"id", s.id},          {"hr", hr_rel},
                            {"lr", lr_rel},        {"boxes", s.annotation.boxes},
                            {"count", s.annotation.count}, {"spec", s.spec}};
        manifest << j.dump() << '\n';
    }
}

std::vector<PlateSample> read_dataset(const std::filesystem::path& dir) {
    std::vector<PlateSample> out;
    const auto manifest_path = dir / "manifest.jsonl";
    if (!std::filesystem::exists(manifest_path)) {
        if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
        return out;
    }
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open " + manifest_path.string());
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        PlateSample s;
        try {
            const auto j = nlohmann::json::parse(line);
            j.at("id").get_to(s.id);
            j.at("boxes").get_to(s.annotation.boxes);
            j.at("count").get_to(s.annotation.count);
            j.at("spec").get_to(s.spec);
            s.hr = read_png(dir / j.at("hr").get<std::string>());
            s.lr = read_png(dir / j.at("lr").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("malformed manifest entry in " + manifest_path.string() + ": " + e.what(), line_no);
        }
        try {
            s.annotation.validate();
        } catch (const ValidationError& e) {
            throw ValidationError(std::string(e.what()) + " (manifest line " + std::to_string(line_no) + ")");
        }
        out.push_back(std::move(s));
    }
    return out;
}

PlateImage bicubic_upsample(const PlateImage& lr, int factor) {
    if (factor < 1) throw ShapeError("bicubic_upsample: factor must be >= 1");
    const Index h = lr.height(), w = lr.width();
    const Index oh = h * factor, ow = w * factor;
    auto keys = [](double x) {
        constexpr double a = -0.5;
        x = std::abs(x);
        if (x <= 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
        if (x < 2) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
        return 0.0;
    };
    struct Taps {
        Index idx[4];
        double wt[4];
    };
    auto taps = [&](Index o, Index n) {
        Taps t;
        const double src = (o + 0.5) / factor - 0.5;
        const auto base = static_cast<Index>(std::floor(src));
        for (int k = 0; k < 4; ++k) {
            const Index i = base - 1 + k;
            t.idx[k] = std::clamp<Index>(i, 0, n - 1);
            t.wt[k] = keys(src - static_cast<double>(i));
        }
        return t;
    };
    PlateImage out(oh, ow);
    for (Index y = 0; y < oh; ++y) {
        const Taps ty = taps(y, h);
        for (Index x = 0; x < ow; ++x) {
            const Taps tx = taps(x, w);
            for (Index c = 0; c < 3; ++c) {
                double acc = 0;
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j) acc += ty.wt[i] * tx.wt[j] * lr.pixels[(ty.idx[i] * w + tx.idx[j]) * 3 + c];
                out.pixels[(y * ow + x) * 3 + c] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
            }
        }
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> to_batch(const std::vector<const PlateImage*>& images) {
    if (images.empty()) throw ShapeError("to_batch: no images");
    const Shape& s = images.front()->pixels.shape();
    const Index per = images.front()->pixels.size();
    Tensor<Scalar> out({static_cast<Index>(images.size()), s[0], s[1], s[2]});
    for (std::size_t i = 0; i < images.size(); ++i) {
        require_same_shape(images[i]->pixels, images.front()->pixels, "to_batch");
        out.array().segment(static_cast<Index>(i) * per, per) = images[i]->pixels.array().template cast<Scalar>();
    }
    return out;
}

template <typename Scalar>
PlateImage from_batch(const Tensor<Scalar>& batch, Index index) {
    if (batch.rank() != 4 || batch.dim(3) != 3) throw ShapeError("from_batch: expected [N,H,W,3]");
    const Index per = batch.size() / batch.dim(0);
    PlateImage out(batch.dim(1), batch.dim(2));
    out.pixels.array() = batch.array().segment(index * per, per).template cast<float>();
    return out;
}

template Tensor<float> to_batch<float>(const std::vector<const PlateImage*>&);
template Tensor<double> to_batch<double>(const std::vector<const PlateImage*>&);
template PlateImage from_batch<float>(const Tensor<float>&, Index);
template PlateImage from_batch<double>(const Tensor<double>&, Index);

}  // namespace lpsr
