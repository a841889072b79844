#include "lpsr/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lpsr/alphabet.hpp"

namespace lpsr {

namespace {

constexpr double kPerfectLogit = 40.0;
constexpr double kOffsetClamp = 1e-9;

double sigmoid_d(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Numerically stable binary cross-entropy with logits.
double bce_logits(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

template <typename Scalar>
void check_raw(const std::vector<Tensor<Scalar>>& raw, const GridSpec& grid, const char* what) {
    if (raw.size() != grid.strides.size()) throw ShapeError(std::string(what) + ": expected 3 scales");
    for (std::size_t s = 0; s < raw.size(); ++s) {
        const auto& r = raw[s];
        if (r.rank() != 4 || r.dim(1) != 1 || r.dim(2) != grid.grid_width(s) || r.dim(3) != grid.channels())
            throw ShapeError(std::string(what) + ": scale " + std::to_string(s) + " has shape " +
                             shape_string(r.shape()));
        if (r.dim(0) != raw[0].dim(0)) throw ShapeError(std::string(what) + ": inconsistent batch sizes");
    }
}

std::string scale_name(std::size_t s) { return "det.head" + std::to_string(s); }

template <typename Scalar>
Var<Scalar> conv_bn_leaky(Tape<Scalar>& tape, ParamSet<Scalar>& ps, const std::string& name, Var<Scalar> x,
                          Index stride, Index pad, Mode mode) {
    return leaky_relu(nn::bn(tape, ps, name + ".bn", nn::conv(tape, ps, name, x, stride, pad), mode), Scalar(0.1));
}

template <typename Scalar>
Var<Scalar> residual(Tape<Scalar>& tape, ParamSet<Scalar>& ps, const std::string& name, Var<Scalar> x, Mode mode) {
    Var<Scalar> h = conv_bn_leaky(tape, ps, name + ".a", x, 1, 1, mode);
    h = nn::bn(tape, ps, name + ".b.bn", nn::conv(tape, ps, name + ".b", h, 1, 1), mode);
    return leaky_relu(add(x, h), Scalar(0.1));
}

template <typename Scalar>
void add_cbl(ParamSet<Scalar>& ps, const std::string& name, Index k, Index cin, Index cout, nn::Rng& rng) {
    nn::add_conv<Scalar>(ps, name, k, cin, cout, rng, false);
    nn::add_batch_norm<Scalar>(ps, name + ".bn", cout);
}

template <typename Scalar>
void add_residual(ParamSet<Scalar>& ps, const std::string& name, Index c, nn::Rng& rng) {
    add_cbl<Scalar>(ps, name + ".a", 3, c, c, rng);
    add_cbl<Scalar>(ps, name + ".b", 3, c, c, rng);
}

// Backbone channel widths at strides 8, 16, 32.
std::array<Index, 3> level_channels(const DetectorConfig& c) { return {4 * c.width, 8 * c.width, 8 * c.width}; }

}  // namespace

Index GridSpec::slots() const {
    Index total = 0;
    for (std::size_t s = 0; s < strides.size(); ++s) total += grid_width(s) * anchors_per_scale;
    return total;
}

GridSpec grid_from_anchors(const std::vector<Anchor>& sorted) {
    if (sorted.size() != 9) throw ConfigError("grid_from_anchors: need 9 anchors");
    GridSpec g;
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t b = 0; b < 3; ++b) g.anchors[s][b] = sorted[(2 - s) * 3 + b];
    return g;
}

GridSpec default_grid() {
    // kmeans_anchors(generate_corpus(2000, 0) annotations, 9), rounded to 1e-4.
    return grid_from_anchors({{0.0837, 0.5864},
                              {0.0853, 0.6280},
                              {0.0869, 0.6412},
                              {0.0976, 0.6295},
                              {0.1099, 0.5956},
                              {0.1145, 0.6414},
                              {0.1313, 0.6070},
                              {0.1372, 0.6465},
                              {0.1697, 0.6468}});
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
    nlohmann::json anchors = nlohmann::json::array();
    for (const auto& scale : c.grid.anchors)
        for (const Anchor& a : scale) anchors.push_back({a.w, a.h});
    j = {{"channels", c.channels},
         {"width", c.width},
         {"head_hidden", c.head_hidden},
         {"count_classes", c.count_classes},
         {"conditioning", c.conditioning == Conditioning::Add ? "add" : "concat"},
         {"objectness_bias", c.objectness_bias},
         {"classes", c.grid.classes},
         {"anchors", anchors}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
    c.channels = j.at("channels");
    c.width = j.at("width");
    c.head_hidden = j.at("head_hidden");
    c.count_classes = j.at("count_classes");
    const std::string cond = j.at("conditioning");
    if (cond != "add" && cond != "concat") throw ConfigError("unknown conditioning '" + cond + "'");
    c.conditioning = cond == "add" ? Conditioning::Add : Conditioning::Concat;
    c.objectness_bias = j.at("objectness_bias");
    c.grid.classes = j.at("classes");
    const auto& anchors = j.at("anchors");
    if (anchors.size() != 9) throw ConfigError("detector config needs 9 anchors");
    for (std::size_t i = 0; i < 9; ++i) c.grid.anchors[i / 3][i % 3] = {anchors[i][0], anchors[i][1]};
}

double shape_iou(double w1, double h1, double w2, double h2) {
    const double inter = std::min(w1, w2) * std::min(h1, h2);
    return inter / (w1 * h1 + w2 * h2 - inter);
}

double box_iou(const Box& a, const Box& b) {
    const double ix = std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2);
    const double iy = std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2);
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.w * a.h + b.w * b.h - inter);
}

template <typename Scalar>
DetectionTarget<Scalar> build_targets(const Annotation& annotation, const GridSpec& grid) {
    DetectionTarget<Scalar> t;
    for (std::size_t s = 0; s < grid.strides.size(); ++s)
        t.scales.push_back(Tensor<Scalar>::zeros({1, 1, grid.grid_width(s), grid.channels()}));
    const Index slot = grid.slot_size();

    struct Option {
        std::size_t scale;
        Index anchor;
        double iou;
    };
    for (std::size_t i = 0; i < annotation.boxes.size(); ++i) {
        const Box& box = annotation.boxes[i];
        if (box.class_id < 0 || box.class_id >= grid.classes)
            throw InvalidSpecError("build_targets: class id " + std::to_string(box.class_id) + " out of range");
        if (!(box.w > 0 && box.h > 0)) throw InvalidSpecError("build_targets: degenerate box");
        std::vector<Option> options;
        for (std::size_t s = 0; s < grid.strides.size(); ++s)
            for (Index b = 0; b < grid.anchors_per_scale; ++b) {
                const Anchor& a = grid.anchors[s][static_cast<std::size_t>(b)];
                options.push_back({s, b, shape_iou(box.w, box.h, a.w, a.h)});
            }
        std::stable_sort(options.begin(), options.end(), [](const Option& x, const Option& y) { return x.iou > y.iou; });

        bool placed = false;
        for (const Option& o : options) {
            const Index width = grid.grid_width(o.scale);
            const Index col = std::clamp<Index>(static_cast<Index>(std::floor(box.cx * width)), 0, width - 1);
            Scalar* cell = t.scales[o.scale].data() + col * grid.channels() + o.anchor * slot;
            if (cell[4] != Scalar(0)) continue;
            const Anchor& a = grid.anchors[o.scale][static_cast<std::size_t>(o.anchor)];
            cell[0] = static_cast<Scalar>(box.cx * width - col);
            cell[1] = static_cast<Scalar>(box.cy);
            cell[2] = static_cast<Scalar>(std::log(box.w / a.w));
            cell[3] = static_cast<Scalar>(std::log(box.h / a.h));
            cell[4] = Scalar(1);
            cell[5 + box.class_id] = Scalar(1);
            placed = true;
            break;
        }
        if (!placed) {
            std::ostringstream os;
            os << "build_targets: no free slot for box " << i << " (class " << box.class_id << ", cx " << box.cx
               << "); columns";
            for (std::size_t s = 0; s < grid.strides.size(); ++s)
                os << ' ' << static_cast<Index>(std::floor(box.cx * grid.grid_width(s))) << '/' << grid.grid_width(s);
            os << " are full";
            throw AssignmentError(os.str());
        }
    }
    return t;
}

template <typename Scalar>
DetectionTarget<Scalar> build_targets(const std::vector<const Annotation*>& annotations, const GridSpec& grid) {
    if (annotations.empty()) throw ShapeError("build_targets: empty batch");
    std::vector<DetectionTarget<Scalar>> each;
    for (const Annotation* a : annotations) each.push_back(build_targets<Scalar>(*a, grid));
    DetectionTarget<Scalar> out;
    for (std::size_t s = 0; s < grid.strides.size(); ++s) {
        std::vector<const Tensor<Scalar>*> parts;
        for (const auto& e : each) parts.push_back(&e.scales[s]);
        out.scales.push_back(stack_batch(parts));
    }
    return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> perfect_raw(const DetectionTarget<Scalar>& targets, const GridSpec& grid) {
    check_raw(targets.scales, grid, "perfect_raw");
    const Index slot = grid.slot_size();
    std::vector<Tensor<Scalar>> raw;
    for (const auto& t : targets.scales) {
        Tensor<Scalar> r = Tensor<Scalar>::zeros(t.shape());
        for (Index base = 0; base < t.size(); base += slot) {
            if (t[base + 4] == Scalar(0)) {
                r[base + 4] = static_cast<Scalar>(-kPerfectLogit);
                continue;
            }
            for (int k = 0; k < 2; ++k) {
                const double p = std::clamp<double>(t[base + k], kOffsetClamp, 1.0 - kOffsetClamp);
                r[base + k] = static_cast<Scalar>(std::log(p / (1.0 - p)));
            }
            r[base + 2] = t[base + 2];
            r[base + 3] = t[base + 3];
            r[base + 4] = static_cast<Scalar>(kPerfectLogit);
            for (Index c = 0; c < grid.classes; ++c)
                r[base + 5 + c] = static_cast<Scalar>(t[base + 5 + c] > Scalar(0) ? kPerfectLogit : -kPerfectLogit);
        }
        raw.push_back(std::move(r));
    }
    return raw;
}

template <typename Scalar>
DetectorParams<Scalar> init_detector(const DetectorConfig& config, std::uint64_t seed) {
    if (config.width < 1 || config.head_hidden < 1 || config.count_classes < 1)
        throw ConfigError("detector: widths must be positive");
    nn::Rng rng(seed);
    DetectorParams<Scalar> d;
    auto& ps = d.params;
    const Index w = config.width;
    const auto lc = level_channels(config);
    add_cbl<Scalar>(ps, "det.stem", 3, config.channels, w, rng);
    add_cbl<Scalar>(ps, "det.c2", 3, w, 2 * w, rng);
    add_cbl<Scalar>(ps, "det.c3", 3, 2 * w, lc[0], rng);
    add_residual<Scalar>(ps, "det.c3.res", lc[0], rng);
    add_cbl<Scalar>(ps, "det.c4", 3, lc[0], lc[1], rng);
    add_residual<Scalar>(ps, "det.c4.res", lc[1], rng);
    add_cbl<Scalar>(ps, "det.c5", 3, lc[1], lc[2], rng);
    add_residual<Scalar>(ps, "det.c5.res", lc[2], rng);
    // Top-down lateral projections.
    nn::add_conv<Scalar>(ps, "det.lat4", 1, lc[2], lc[1], rng, true);
    nn::add_conv<Scalar>(ps, "det.lat3", 1, lc[1], lc[0], rng, true);

    const Index out_ch = config.grid.channels();
    const Index slot = config.grid.slot_size();
    for (std::size_t s = 0; s < 3; ++s) {
        const std::string name = scale_name(s);
        const Index rows = config.grid.input_height / config.grid.strides[s];
        const Index in_ch = rows * lc[2 - s];
        add_cbl<Scalar>(ps, name + ".hidden", 1, in_ch, config.head_hidden, rng);
        const Index cond_out = config.conditioning == Conditioning::Add ? config.head_hidden : out_ch;
        nn::add_linear<Scalar>(ps, name + ".cond", config.count_classes, cond_out,
                               static_cast<Scalar>(std::sqrt(1.0 / static_cast<double>(config.count_classes))), rng);
        nn::add_conv<Scalar>(ps, name + ".out", 1, config.head_hidden, out_ch, rng, true, Scalar(0.01));
        auto& bias = ps.get(name + ".out.b").value;
        for (Index b = 0; b < config.grid.anchors_per_scale; ++b)
            bias[b * slot + 4] = static_cast<Scalar>(config.objectness_bias);
    }
    return d;
}

template <typename Scalar>
std::vector<Var<Scalar>> detect_forward(const DetectorConfig& config, DetectorParams<Scalar>& params,
                                        Var<Scalar> image, Var<Scalar> f_count, Mode mode) {
    const auto& s = image.shape();
    const auto& grid = config.grid;
    if (s.size() != 4 || s[1] != grid.input_height || s[2] != grid.input_width || s[3] != config.channels)
        throw ShapeError("detect_forward: expected [N," + std::to_string(grid.input_height) + "," +
                         std::to_string(grid.input_width) + "," + std::to_string(config.channels) + "], got " +
                         shape_string(s));
    const auto& fc = f_count.shape();
    if (fc.size() != 2 || fc[0] != s[0] || fc[1] != config.count_classes)
        throw ShapeError("detect_forward: f_count must be [N," + std::to_string(config.count_classes) + "], got " +
                         shape_string(fc));
    auto& ps = params.params;
    Tape<Scalar>& tape = *image.tape;

    Var<Scalar> h = conv_bn_leaky(tape, ps, "det.stem", image, 2, 1, mode);
    h = conv_bn_leaky(tape, ps, "det.c2", h, 2, 1, mode);
    Var<Scalar> c3 = residual(tape, ps, "det.c3.res", conv_bn_leaky(tape, ps, "det.c3", h, 2, 1, mode), mode);
    Var<Scalar> c4 = residual(tape, ps, "det.c4.res", conv_bn_leaky(tape, ps, "det.c4", c3, 2, 1, mode), mode);
    Var<Scalar> c5 = residual(tape, ps, "det.c5.res", conv_bn_leaky(tape, ps, "det.c5", c4, 2, 1, mode), mode);
    Var<Scalar> p4 = add(c4, nn::conv(tape, ps, "det.lat4", upsample_nearest2(c5), 1, 0));
    Var<Scalar> p3 = add(c3, nn::conv(tape, ps, "det.lat3", upsample_nearest2(p4), 1, 0));

    const std::array<Var<Scalar>, 3> levels{c5, p4, p3};
    std::vector<Var<Scalar>> out;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string name = scale_name(i);
        Var<Scalar> x = conv_bn_leaky(tape, ps, name + ".hidden", fold_rows(levels[i]), 1, 0, mode);
        Var<Scalar> cond = nn::dense(tape, ps, name + ".cond", f_count);
        if (config.conditioning == Conditioning::Add) {
            out.push_back(nn::conv(tape, ps, name + ".out", add_broadcast(x, cond), 1, 0));
        } else {
            out.push_back(add_broadcast(nn::conv(tape, ps, name + ".out", x, 1, 0), cond));
        }
    }
    return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> detect(const DetectorConfig& config, DetectorParams<Scalar>& params,
                                   const Tensor<Scalar>& image, const Tensor<Scalar>& f_count, Mode mode) {
    Tape<Scalar> tape(false);
    auto vars = detect_forward(config, params, tape.constant(image), tape.constant(f_count), mode);
    std::vector<Tensor<Scalar>> out;
    for (const auto& v : vars) out.push_back(v.value());
    return out;
}

namespace {

// Loss value and (optionally) gradients w.r.t. every raw logit.
template <typename Scalar>
DetectionLossParts loss_kernel(const std::vector<const Tensor<Scalar>*>& raw, const DetectionTarget<Scalar>& targets,
                               std::vector<Tensor<Scalar>>* grads) {
    if (raw.size() != targets.scales.size()) throw ShapeError("detection_loss: scale count mismatch");
    for (std::size_t s = 0; s < raw.size(); ++s)
        if (raw[s]->shape() != targets.scales[s].shape())
            throw ShapeError("detection_loss: raw " + shape_string(raw[s]->shape()) + " vs target " +
                             shape_string(targets.scales[s].shape()));
    if (raw.empty() || raw[0]->rank() != 4 || raw[0]->dim(0) == 0) throw ShapeError("detection_loss: empty batch");
    const Index n = raw[0]->dim(0);
    // Three anchors per cell.
    const Index slot = raw[0]->dim(3) / 3;
    const Index classes = slot - 5;
    if (raw[0]->dim(3) % 3 != 0 || classes < 1) throw ShapeError("detection_loss: bad channel count");
    const double inv_n = 1.0 / static_cast<double>(n);

    DetectionLossParts parts;
    std::vector<double> probs(static_cast<std::size_t>(classes));
    for (std::size_t s = 0; s < raw.size(); ++s) {
        const auto& r = *raw[s];
        const auto& t = targets.scales[s];
        Tensor<Scalar>* g = nullptr;
        if (grads) {
            grads->push_back(Tensor<Scalar>::zeros(r.shape()));
            g = &grads->back();
        }
        for (Index base = 0; base < r.size(); base += slot) {
            const double z = r[base + 4];
            const double y = t[base + 4];
            parts.objectness += bce_logits(z, y) * inv_n;
            if (g) (*g)[base + 4] = static_cast<Scalar>((sigmoid_d(z) - y) * inv_n);
            if (y == 0.0) continue;
            for (int k = 0; k < 2; ++k) {
                const double sg = sigmoid_d(r[base + k]);
                const double d = sg - t[base + k];
                parts.box += d * d * inv_n;
                if (g) (*g)[base + k] = static_cast<Scalar>(2 * d * sg * (1 - sg) * inv_n);
            }
            for (int k = 2; k < 4; ++k) {
                const double d = static_cast<double>(r[base + k]) - t[base + k];
                parts.box += d * d * inv_n;
                if (g) (*g)[base + k] = static_cast<Scalar>(2 * d * inv_n);
            }
            double mx = -1e300;
            Index truth = -1;
            for (Index c = 0; c < classes; ++c) {
                mx = std::max(mx, static_cast<double>(r[base + 5 + c]));
                if (t[base + 5 + c] > Scalar(0)) truth = c;
            }
            if (truth < 0) throw DomainError("detection_loss: positive slot without a class");
            double z_sum = 0;
            for (Index c = 0; c < classes; ++c)
                z_sum += probs[static_cast<std::size_t>(c)] = std::exp(r[base + 5 + c] - mx);
            parts.classification += (std::log(z_sum) + mx - r[base + 5 + truth]) * inv_n;
            if (g)
                for (Index c = 0; c < classes; ++c)
                    (*g)[base + 5 + c] =
                        static_cast<Scalar>((probs[static_cast<std::size_t>(c)] / z_sum - (c == truth ? 1.0 : 0.0)) *
                                            inv_n);
        }
    }
    return parts;
}

}  // namespace

template <typename Scalar>
DetectionLossParts detection_loss_parts(const std::vector<Tensor<Scalar>>& raw,
                                        const DetectionTarget<Scalar>& targets) {
    std::vector<const Tensor<Scalar>*> ptrs;
    for (const auto& r : raw) ptrs.push_back(&r);
    return loss_kernel<Scalar>(ptrs, targets, nullptr);
}

template <typename Scalar>
Scalar detection_loss(const std::vector<Tensor<Scalar>>& raw, const DetectionTarget<Scalar>& targets) {
    return static_cast<Scalar>(detection_loss_parts(raw, targets).total());
}

template <typename Scalar>
Var<Scalar> detection_loss(const std::vector<Var<Scalar>>& raw, const DetectionTarget<Scalar>& targets) {
    if (raw.empty()) throw ShapeError("detection_loss: no scales");
    std::vector<const Tensor<Scalar>*> ptrs;
    for (const auto& r : raw) ptrs.push_back(&r.value());
    auto grads = std::make_shared<std::vector<Tensor<Scalar>>>();
    const double value = loss_kernel<Scalar>(ptrs, targets, grads.get()).total();
    return raw[0].tape->record(Tensor<Scalar>({1}, static_cast<Scalar>(value)), std::span<const Var<Scalar>>(raw),
                               [raw, grads](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                                   for (std::size_t s = 0; s < raw.size(); ++s)
                                       t.accumulate(raw[s], Tensor<Scalar>((*grads)[s].shape(),
                                                                           ArrayX<Scalar>((*grads)[s].array() * g[0])));
                               });
}

std::vector<Detection> non_max_suppression(std::vector<Detection> candidates, double nms_iou) {
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    std::vector<Detection> kept;
    for (const Detection& d : candidates) {
        bool suppressed = false;
        for (const Detection& k : kept)
            if (k.box.class_id == d.box.class_id && box_iou(k.box, d.box) > nms_iou) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

template <typename Scalar>
std::vector<Detection> decode(const std::vector<Tensor<Scalar>>& raw, const GridSpec& grid, double conf_threshold,
                              double nms_iou, Index index) {
    check_raw(raw, grid, "decode");
    if (index < 0 || index >= raw[0].dim(0)) throw ShapeError("decode: batch index out of range");
    const Index slot = grid.slot_size();
    std::vector<Detection> candidates;
    std::vector<double> probs(static_cast<std::size_t>(grid.classes));
    for (std::size_t s = 0; s < raw.size(); ++s) {
        const Index width = grid.grid_width(s);
        const Scalar* img = raw[s].data() + index * width * grid.channels();
        for (Index col = 0; col < width; ++col)
            for (Index b = 0; b < grid.anchors_per_scale; ++b) {
                const Scalar* r = img + col * grid.channels() + b * slot;
                const double obj = sigmoid_d(r[4]);
                if (obj < conf_threshold || obj == 0.0) continue;
                double mx = -1e300;
                for (Index c = 0; c < grid.classes; ++c) mx = std::max(mx, static_cast<double>(r[5 + c]));
                double z = 0;
                for (Index c = 0; c < grid.classes; ++c) z += probs[static_cast<std::size_t>(c)] = std::exp(r[5 + c] - mx);
                const Anchor& a = grid.anchors[s][static_cast<std::size_t>(b)];
                const double cx = (static_cast<double>(col) + sigmoid_d(r[0])) / static_cast<double>(width);
                const double cy = sigmoid_d(r[1]);
                const double w = a.w * std::exp(static_cast<double>(r[2]));
                const double h = a.h * std::exp(static_cast<double>(r[3]));
                const double x0 = std::max(0.0, cx - w / 2), x1 = std::min(1.0, cx + w / 2);
                const double y0 = std::max(0.0, cy - h / 2), y1 = std::min(1.0, cy + h / 2);
                if (!(x1 > x0 && y1 > y0)) continue;
                for (Index c = 0; c < grid.classes; ++c) {
                    const double conf = obj * probs[static_cast<std::size_t>(c)] / z;
                    if (conf < conf_threshold || conf == 0.0) continue;
                    candidates.push_back({{static_cast<int>(c), (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0}, conf});
                }
            }
    }
    return non_max_suppression(std::move(candidates), nms_iou);
}

std::vector<int> read_plate(std::vector<Detection> detections) {
    std::stable_sort(detections.begin(), detections.end(),
                     [](const Detection& a, const Detection& b) { return a.box.cx < b.box.cx; });
    std::vector<int> ids;
    for (const Detection& d : detections) ids.push_back(d.box.class_id);
    return ids;
}

std::string plate_string(const std::vector<int>& class_ids) {
    std::string s;
    for (int id : class_ids) s += symbol(id);
    return s;
}

std::vector<Anchor> kmeans_anchors(const std::vector<Annotation>& annotations, std::size_t k, int iterations) {
    std::vector<Anchor> shapes;
    for (const Annotation& a : annotations)
        for (const Box& b : a.boxes) shapes.push_back({b.w, b.h});
    if (k == 0 || shapes.size() < k) throw DomainError("kmeans_anchors: need at least k boxes");
    std::sort(shapes.begin(), shapes.end(), [](const Anchor& x, const Anchor& y) {
        return x.w * x.h < y.w * y.h || (x.w * x.h == y.w * y.h && x.w < y.w);
    });
    std::vector<Anchor> centres;
    for (std::size_t i = 0; i < k; ++i) centres.push_back(shapes[(2 * i + 1) * shapes.size() / (2 * k)]);

    std::vector<std::size_t> assign(shapes.size(), k);
    for (int it = 0; it < iterations; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            std::size_t best = 0;
            double best_iou = -1;
            for (std::size_t c = 0; c < k; ++c) {
                const double iou = shape_iou(shapes[i].w, shapes[i].h, centres[c].w, centres[c].h);
                if (iou > best_iou) {
                    best_iou = iou;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        std::vector<double> sw(k, 0), sh(k, 0), cnt(k, 0);
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            sw[assign[i]] += shapes[i].w;
            sh[assign[i]] += shapes[i].h;
            cnt[assign[i]] += 1;
        }
        for (std::size_t c = 0; c < k; ++c)
            if (cnt[c] > 0) centres[c] = {sw[c] / cnt[c], sh[c] / cnt[c]};
        if (!changed) break;
    }
    std::sort(centres.begin(), centres.end(),
              [](const Anchor& x, const Anchor& y) { return x.w * x.h < y.w * y.h; });
    return centres;
}

#define LPSR_INSTANTIATE_DETECTOR(S)                                                                               \
    template DetectionTarget<S> build_targets<S>(const Annotation&, const GridSpec&);                              \
    template DetectionTarget<S> build_targets<S>(const std::vector<const Annotation*>&, const GridSpec&);          \
    template std::vector<Tensor<S>> perfect_raw(const DetectionTarget<S>&, const GridSpec&);                       \
    template DetectorParams<S> init_detector<S>(const DetectorConfig&, std::uint64_t);                             \
    template std::vector<Var<S>> detect_forward(const DetectorConfig&, DetectorParams<S>&, Var<S>, Var<S>, Mode);  \
    template std::vector<Tensor<S>> detect(const DetectorConfig&, DetectorParams<S>&, const Tensor<S>&,           \
                                           const Tensor<S>&, Mode);                                                \
    template DetectionLossParts detection_loss_parts(const std::vector<Tensor<S>>&, const DetectionTarget<S>&);    \
    template S detection_loss(const std::vector<Tensor<S>>&, const DetectionTarget<S>&);                           \
    template Var<S> detection_loss(const std::vector<Var<S>>&, const DetectionTarget<S>&);                         \
    template std::vector<Detection> decode(const std::vector<Tensor<S>>&, const GridSpec&, double, double, Index);

LPSR_INSTANTIATE_DETECTOR(float)
LPSR_INSTANTIATE_DETECTOR(double)

}  // namespace lpsr
