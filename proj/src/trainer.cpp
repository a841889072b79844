#include "lpsr/trainer.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lpsr/checkpoint.hpp"
#include "lpsr/evaluator.hpp"

namespace lpsr {

namespace {

std::uint64_t mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

long long to_int(const std::string& key, const std::string& v) {
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

struct Field {
    const char* key;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

#define LPSR_DOUBLE(k, member)                                                       \
    Field { k, [](const TrainConfig& c) { return fmt_double(c.member); },           \
            [](TrainConfig& c, const std::string& v) { c.member = to_double(k, v); } }
#define LPSR_INT(k, member, type)                                                      \
    Field { k, [](const TrainConfig& c) { return std::to_string(c.member); },         \
            [](TrainConfig& c, const std::string& v) { c.member = static_cast<type>(to_int(k, v)); } }
#define LPSR_BOOL(k, member)                                                              \
    Field { k, [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }, \
            [](TrainConfig& c, const std::string& v) { c.member = to_bool(k, v); } }

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        LPSR_DOUBLE("lr_g", lr_g),
        LPSR_DOUBLE("lr_d", lr_d),
        LPSR_DOUBLE("lr_det", lr_det),
        LPSR_DOUBLE("lr_stage2", lr_stage2),
        LPSR_INT("stage1_epochs", stage1_epochs, int),
        LPSR_INT("g_updates_per_d_update", g_updates_per_d_update, int),
        LPSR_DOUBLE("clip_norm", clip_norm),
        LPSR_DOUBLE("adam_beta1", adam_beta1),
        LPSR_DOUBLE("adam_beta2", adam_beta2),
        LPSR_DOUBLE("adam_eps", adam_eps),
        LPSR_INT("batch_size", batch_size, int),
        LPSR_INT("epochs", epochs, int),
        Field{"seed", [](const TrainConfig& c) { return std::to_string(c.seed); },
              [](TrainConfig& c, const std::string& v) { c.seed = to_u64("seed", v); }},
        LPSR_INT("detector_warmup_epochs", detector_warmup_epochs, int),
        LPSR_INT("max_steps_per_epoch", max_steps_per_epoch, int),
        LPSR_DOUBLE("lambda_mse", weights.mse),
        LPSR_DOUBLE("lambda_adv", weights.adv),
        LPSR_DOUBLE("lambda_const", weights.constant),
        LPSR_DOUBLE("lambda_clc", weights.clc),
        LPSR_BOOL("baseline", baseline),
        LPSR_DOUBLE("holdout_fraction", holdout_fraction),
        LPSR_DOUBLE("conf_threshold", conf_threshold),
        LPSR_DOUBLE("nms_iou", nms_iou),
        LPSR_BOOL("eval_each_epoch", eval_each_epoch),
        LPSR_INT("g_s1_width", generator.s1_width, Index),
        LPSR_INT("g_s1_blocks", generator.s1_blocks, Index),
        LPSR_INT("g_s1_up_width", generator.s1_up_width, Index),
        Field{"g_upsample",
              [](const TrainConfig& c) {
                  return std::string(c.generator.upsample == UpsampleMode::ResizeConv ? "resize" : "transposed");
              },
              [](TrainConfig& c, const std::string& v) {
                  if (v == "resize")
                      c.generator.upsample = UpsampleMode::ResizeConv;
                  else if (v == "transposed")
                      c.generator.upsample = UpsampleMode::TransposedConv;
                  else
                      throw ConfigError("config key 'g_upsample': expected resize or transposed, got '" + v + "'");
              }},
        LPSR_INT("g_s2_width", generator.s2_width, Index),
        LPSR_INT("g_s2_stages", generator.s2_stages, Index),
        LPSR_BOOL("g_s1_skip", generator.s1_skip),
        LPSR_BOOL("g_s2_zero_init", generator.s2_zero_init),
        LPSR_INT("d_width", discriminator.width, Index),
        LPSR_INT("d_blocks", discriminator.blocks, Index),
        LPSR_INT("d_head_hidden", discriminator.head_hidden, Index),
        LPSR_DOUBLE("d_head_init_std", discriminator.head_init_std),
        LPSR_INT("det_width", detector.width, Index),
        LPSR_INT("det_head_hidden", detector.head_hidden, Index),
        Field{"det_conditioning",
              [](const TrainConfig& c) {
                  return std::string(c.detector.conditioning == Conditioning::Add ? "add" : "concat");
              },
              [](TrainConfig& c, const std::string& v) {
                  if (v == "add")
                      c.detector.conditioning = Conditioning::Add;
                  else if (v == "concat")
                      c.detector.conditioning = Conditioning::Concat;
                  else
                      throw ConfigError("config key 'det_conditioning': expected add or concat, got '" + v + "'");
              }},
        LPSR_DOUBLE("det_objectness_bias", detector.objectness_bias),
    };
    return f;
}

#undef LPSR_DOUBLE
#undef LPSR_INT
#undef LPSR_BOOL

template <typename Scalar>
std::vector<Parameter<Scalar>*> concat(std::vector<Parameter<Scalar>*> a, const std::vector<Parameter<Scalar>*>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> generator_trainables(GeneratorParams<Scalar>& g) {
    return concat(g.s1.trainable(), g.s2.trainable());
}

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
}

template <typename Scalar>
Var<Scalar> weighted_sum(const std::vector<std::pair<double, Var<Scalar>>>& terms) {
    Var<Scalar> total{};
    bool have = false;
    for (const auto& [w, v] : terms) {
        if (w == 0.0) continue;
        Var<Scalar> t = scale(v, static_cast<Scalar>(w));
        total = have ? add(total, t) : t;
        have = true;
    }
    if (!have) total = scale(terms.front().second, Scalar(0));
    return total;
}

template <typename Scalar>
Tensor<Scalar> lr_batch(const std::vector<const PlateSample*>& batch) {
    std::vector<const PlateImage*> imgs;
    for (const auto* s : batch) imgs.push_back(&s->lr);
    return to_batch<Scalar>(imgs);
}

template <typename Scalar>
Tensor<Scalar> hr_batch(const std::vector<const PlateSample*>& batch) {
    std::vector<const PlateImage*> imgs;
    for (const auto* s : batch) imgs.push_back(&s->hr);
    return to_batch<Scalar>(imgs);
}

template <typename Scalar>
Tensor<Scalar> bicubic_batch(const std::vector<const PlateSample*>& batch) {
    std::vector<PlateImage> up;
    up.reserve(batch.size());
    for (const auto* s : batch) up.push_back(bicubic_upsample(s->lr, 4));
    std::vector<const PlateImage*> ptrs;
    for (const auto& u : up) ptrs.push_back(&u);
    return to_batch<Scalar>(ptrs);
}

template <typename Scalar>
void append_adam(std::vector<ArchiveEntry>& out, const AdamState<Scalar>& a, const std::string& prefix) {
    for (const auto& [name, t] : a.m) out.push_back(make_entry(prefix + "m." + name, t));
    for (const auto& [name, t] : a.v) out.push_back(make_entry(prefix + "v." + name, t));
}

template <typename Scalar>
void restore_adam(const std::vector<ArchiveEntry>& entries, AdamState<Scalar>& a, const std::string& prefix,
                  std::int64_t t) {
    a = {};
    a.t = t;
    for (const auto& e : entries) {
        if (e.name.rfind(prefix + "m.", 0) == 0) a.m[e.name.substr(prefix.size() + 2)] = entry_tensor<Scalar>(e);
        if (e.name.rfind(prefix + "v.", 0) == 0) a.v[e.name.substr(prefix.size() + 2)] = entry_tensor<Scalar>(e);
    }
}

nlohmann::json row_json(const MetricRow& r) {
    nlohmann::json j = {{"step", r.step},       {"epoch", r.epoch},     {"l_mse", r.l_mse},
                        {"l_adv_g", r.l_adv_g}, {"l_adv_d", r.l_adv_d}, {"l_const", r.l_const},
                        {"l_clc", r.l_clc},     {"total_g", r.total_g}, {"total_d", r.total_d}};
    j["l_det"] = r.l_det ? nlohmann::json(*r.l_det) : nlohmann::json(nullptr);
    return j;
}

MetricRow row_from(const nlohmann::json& j) {
    MetricRow r;
    r.step = j.at("step");
    r.epoch = j.at("epoch");
    r.l_mse = j.at("l_mse");
    r.l_adv_g = j.at("l_adv_g");
    r.l_adv_d = j.at("l_adv_d");
    r.l_const = j.at("l_const");
    r.l_clc = j.at("l_clc");
    r.total_g = j.at("total_g");
    r.total_d = j.at("total_d");
    if (!j.at("l_det").is_null()) r.l_det = j.at("l_det").get<double>();
    return r;
}

nlohmann::json epoch_json(const EpochMetrics& m) {
    return {{"epoch", m.epoch},
            {"recognition_accuracy", m.recognition_accuracy},
            {"mean_psnr_sr", m.mean_psnr_sr},
            {"mean_psnr_bicubic", m.mean_psnr_bicubic},
            {"count_head_accuracy", m.count_head_accuracy}};
}

EpochMetrics epoch_from(const nlohmann::json& j) {
    return {j.at("epoch"), j.at("recognition_accuracy"), j.at("mean_psnr_sr"), j.at("mean_psnr_bicubic"),
            j.at("count_head_accuracy")};
}

}  // namespace

// ---- configuration ----

void TrainConfig::validate() const {
    for (double r : {lr_g, lr_d, lr_det, lr_stage2})
        if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("learning rates must be finite and > 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (stage1_epochs < 0 || stage1_epochs > epochs) throw ConfigError("stage1_epochs must lie in [0, epochs]");
    if (g_updates_per_d_update < 1) throw ConfigError("g_updates_per_d_update must be >= 1");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (detector_warmup_epochs < 0) throw ConfigError("detector_warmup_epochs must be >= 0");
    if (max_steps_per_epoch < 0) throw ConfigError("max_steps_per_epoch must be >= 0");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must lie in [0, 1)");
    if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0) || !(nms_iou >= 0.0 && nms_iou <= 1.0))
        throw ConfigError("thresholds must lie in [0, 1]");
    weights.validate();
}

std::string TrainConfig::run_label() const {
    if (baseline) return "baseline";
    const std::pair<double, const char*> terms[] = {
        {weights.mse, "wo_mse"}, {weights.adv, "wo_adv"}, {weights.constant, "wo_const"}, {weights.clc, "wo_clc"}};
    int zeros = 0;
    const char* label = "full";
    for (const auto& [w, name] : terms)
        if (w == 0.0) {
            ++zeros;
            label = name;
        }
    return zeros <= 1 ? label : "custom";
}

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
    for (const Field& f : fields())
        if (key == f.key) {
            f.set(config, value);
            return;
        }
    throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig config;
    std::istringstream in(text);
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("expected 'key = value', got '" + line + "'", line_no);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) throw ParseError("empty key or value", line_no);
        try {
            set_config_value(config, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
        }
    }
    config.validate();
    return config;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

std::string format_train_config(const TrainConfig& config) {
    std::string out;
    for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
    return out;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json::object();
    for (const Field& f : fields()) j[f.key] = f.get(c);
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    for (const auto& [key, value] : j.items()) set_config_value(c, key, value.get<std::string>());
    c.validate();
}

TrainConfig ablate(TrainConfig config, const std::string& term) {
    if (term == "mse")
        config.weights.mse = 0;
    else if (term == "adv")
        config.weights.adv = 0;
    else if (term == "const")
        config.weights.constant = 0;
    else if (term == "clc")
        config.weights.clc = 0;
    else
        throw ConfigError("unknown ablation term '" + term + "'");
    return config;
}

LearningRates lr_schedule(int epoch, const TrainConfig& config) {
    if (epoch < 1) throw DomainError("lr_schedule: epochs are 1-based");
    if (epoch <= config.stage1_epochs) return {config.lr_g, config.lr_d, config.lr_det};
    const double f = config.lr_stage2 / config.lr_d;
    return {config.lr_g * f, config.lr_stage2, config.lr_det * f};
}

// ---- optimisation primitives ----

template <typename Scalar>
double clip_gradients(const std::vector<Tensor<Scalar>*>& grads, double clip_norm) {
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
    double sq = 0;
    for (const auto* g : grads) sq += g->array().template cast<double>().square().sum();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    if (norm > clip_norm) {
        const double s = clip_norm / norm;
        for (auto* g : grads) g->array() = (g->array().template cast<double>() * s).template cast<Scalar>();
    }
    return norm;
}

template <typename Scalar>
double clip_gradients(const std::vector<Parameter<Scalar>*>& params, double clip_norm) {
    std::vector<Tensor<Scalar>*> grads;
    for (auto* p : params) grads.push_back(&p->grad);
    return clip_gradients(grads, clip_norm);
}

template <typename Scalar>
void adam_update(const std::vector<Parameter<Scalar>*>& params, AdamState<Scalar>& state, double lr, double beta1,
                 double beta2, double eps) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    const auto b1 = static_cast<Scalar>(beta1), b2 = static_cast<Scalar>(beta2);
    const auto step = static_cast<Scalar>(lr / bc1);
    const auto inv_bc2 = static_cast<Scalar>(1.0 / bc2);
    const auto e = static_cast<Scalar>(eps);
    for (auto* p : params) {
        auto it = state.m.find(p->name);
        if (it == state.m.end()) {
            state.m[p->name] = Tensor<Scalar>::zeros_like(p->value);
            state.v[p->name] = Tensor<Scalar>::zeros_like(p->value);
        }
        auto& m = state.m[p->name].array();
        auto& v = state.v[p->name].array();
        const auto& g = p->grad.array();
        m = b1 * m + (Scalar(1) - b1) * g;
        v = b2 * v + (Scalar(1) - b2) * g.square();
        p->value.array() -= step * m / ((v * inv_bc2).sqrt() + e);
    }
}

// ---- pipeline ----

template <typename Scalar>
Pipeline<Scalar> init_pipeline(const TrainConfig& config) {
    Pipeline<Scalar> p;
    p.g_config = config.generator;
    p.d_config = config.discriminator;
    p.det_config = config.detector;
    p.det_config.count_classes = p.d_config.count_classes;
    p.baseline = config.baseline;
    p.g = init_generator<Scalar>(p.g_config, mix(config.seed ^ 0x11));
    p.d = init_discriminator<Scalar>(p.d_config, mix(config.seed ^ 0x22));
    p.det = init_detector<Scalar>(p.det_config, mix(config.seed ^ 0x33));
    return p;
}

template <typename Scalar>
PipelineOutput<Scalar> run_pipeline(Pipeline<Scalar>& p, const std::vector<const PlateSample*>& batch) {
    PipelineOutput<Scalar> out;
    const auto n = static_cast<Index>(batch.size());
    if (p.baseline) {
        out.image = bicubic_batch<Scalar>(batch);
        out.f_count = Tensor<Scalar>({n, p.d_config.count_classes},
                                     static_cast<Scalar>(1.0 / static_cast<double>(p.d_config.count_classes)));
    } else {
        auto [raw, refined] = generate(p.g_config, p.g, lr_batch<Scalar>(batch));
        out.sr_raw = std::move(raw);
        out.image = std::move(refined);
        out.f_count = discriminate(p.d_config, p.d, out.image, Mode::Eval).f_count;
    }
    out.raw = detect(p.det_config, p.det, out.image, out.f_count, Mode::Eval);
    return out;
}

// ---- training ----

template <typename Scalar>
TrainState<Scalar> init_train_state(const TrainConfig& config) {
    config.validate();
    TrainState<Scalar> s;
    s.config = config;
    s.pipeline = init_pipeline<Scalar>(config);
    return s;
}

template <typename Scalar>
MetricRow train_step(TrainState<Scalar>& state, const std::vector<const PlateSample*>& batch) {
    if (batch.empty()) throw ShapeError("train_step: empty batch");
    const TrainState<Scalar> snapshot = state;
    try {
        const TrainConfig& cfg = state.config;
        auto& p = state.pipeline;
        const LearningRates lr = lr_schedule(state.epoch + 1, cfg);
        std::vector<int> counts;
        std::vector<const Annotation*> annotations;
        for (const auto* s : batch) {
            counts.push_back(s->annotation.count);
            annotations.push_back(&s->annotation);
        }
        const int min_count = p.d_config.min_count;
        MetricRow row;
        row.epoch = state.epoch + 1;

        Tensor<Scalar> det_image, det_count;
        if (!p.baseline) {
            const Tensor<Scalar> lr_t = lr_batch<Scalar>(batch);
            const Tensor<Scalar> hr_t = hr_batch<Scalar>(batch);
            const auto g_params = generator_trainables(p.g);
            Tensor<Scalar> fake;
            for (int k = 0; k < cfg.g_updates_per_d_update; ++k) {
                Tape<Scalar> tape;
                auto [raw, refined] = generator_forward(p.g_config, p.g, tape.constant(lr_t), Mode::Train);
                const Var<Scalar> hr = tape.constant(hr_t);
                auto dv = disc_forward(p.d_config, p.d, refined, Mode::Train);
                Var<Scalar> l_mse = pixel_mse_loss(raw, refined, hr);
                Var<Scalar> l_adv = adversarial_loss_g(dv.f_gan);
                Var<Scalar> l_const = reconstruction_loss(raw, refined);
                Var<Scalar> l_clc = count_cross_entropy(dv.f_count, std::span<const int>(counts), min_count);
                Var<Scalar> total = weighted_sum<Scalar>({{cfg.weights.mse, l_mse},
                                                          {cfg.weights.adv, l_adv},
                                                          {cfg.weights.constant, l_const},
                                                          {cfg.weights.clc, l_clc}});
                row.l_mse = l_mse.value()[0];
                row.l_adv_g = l_adv.value()[0];
                row.l_const = l_const.value()[0];
                row.total_g = total.value()[0];
                require_finite(row.total_g, "generator objective");
                tape.backward(total);
                p.d.params.zero_grad();
                clip_gradients(g_params, cfg.clip_norm);
                adam_update(g_params, state.adam_g, lr.g, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
                p.g.s1.zero_grad();
                p.g.s2.zero_grad();
                ++state.g_steps;
                fake = refined.value();
            }

            {
                Tape<Scalar> tape;
                auto ds = disc_forward(p.d_config, p.d, tape.constant(fake), Mode::Train);
                auto dh = disc_forward(p.d_config, p.d, tape.constant(hr_t), Mode::Train);
                Var<Scalar> l_adv_d = adversarial_loss_d(ds.f_gan, dh.f_gan);
                Var<Scalar> clc_sr = count_cross_entropy(ds.f_count, std::span<const int>(counts), min_count);
                Var<Scalar> clc_hr = count_cross_entropy(dh.f_count, std::span<const int>(counts), min_count);
                Var<Scalar> total = weighted_sum<Scalar>({{1.0, l_adv_d}, {cfg.weights.clc, add(clc_sr, clc_hr)}});
                row.l_adv_d = l_adv_d.value()[0];
                row.l_clc = clc_sr.value()[0] + clc_hr.value()[0];
                row.total_d = total.value()[0];
                require_finite(row.total_d, "discriminator objective");
                tape.backward(total);
                const auto d_params = p.d.params.trainable();
                clip_gradients(d_params, cfg.clip_norm);
                adam_update(d_params, state.adam_d, lr.d, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
                p.d.params.zero_grad();
                ++state.d_steps;
            }
        }

        if (p.baseline || state.epoch >= cfg.detector_warmup_epochs) {
            if (p.baseline) {
                det_image = bicubic_batch<Scalar>(batch);
                det_count = Tensor<Scalar>({static_cast<Index>(batch.size()), p.d_config.count_classes},
                                           static_cast<Scalar>(1.0 / static_cast<double>(p.d_config.count_classes)));
            } else {
                det_image = generate(p.g_config, p.g, lr_batch<Scalar>(batch)).second;
                det_count = discriminate(p.d_config, p.d, det_image, Mode::Eval).f_count;
            }
            const auto targets = build_targets<Scalar>(annotations, p.det_config.grid);
            Tape<Scalar> tape;
            auto raw = detect_forward(p.det_config, p.det, tape.constant(det_image), tape.constant(det_count),
                                      Mode::Train);
            Var<Scalar> loss = detection_loss(raw, targets);
            row.l_det = loss.value()[0];
            require_finite(*row.l_det, "detection loss");
            tape.backward(loss);
            const auto det_params = p.det.params.trainable();
            clip_gradients(det_params, cfg.clip_norm);
            adam_update(det_params, state.adam_det, lr.det, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
            p.det.params.zero_grad();
            ++state.det_steps;
        }

        ++state.step;
        row.step = state.step;
        state.history.push_back(row);
        return row;
    } catch (const NumericError&) {
        state = snapshot;
        ++state.skipped_steps;
        throw;
    }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::uint64_t x = mix(seed ^ mix(static_cast<std::uint64_t>(epoch) + 0xE90C5ULL));
    for (std::size_t i = n; i > 1; --i) {
        x = mix(x);
        std::swap(order[i - 1], order[x % i]);
    }
    return order;
}

DatasetSplit split_dataset(const std::vector<PlateSample>& samples, double holdout_fraction) {
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must lie in [0, 1)");
    const auto held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(samples.size())));
    DatasetSplit split;
    for (std::size_t i = 0; i < samples.size(); ++i)
        (i + held < samples.size() ? split.train : split.holdout).push_back(&samples[i]);
    return split;
}

template <typename Scalar>
void train_epoch(TrainState<Scalar>& state, const DatasetSplit& split) {
    const auto& cfg = state.config;
    const auto order = epoch_order(split.train.size(), cfg.seed, state.epoch + 1);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
        if (cfg.max_steps_per_epoch > 0 && steps >= cfg.max_steps_per_epoch) break;
        std::vector<const PlateSample*> batch;
        for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(split.train[order[i]]);
        try {
            train_step(state, batch);
        } catch (const NumericError& e) {
            std::cerr << "step skipped: " << e.what() << '\n';
        }
        ++steps;
    }
    ++state.epoch;
    if (cfg.eval_each_epoch && !split.holdout.empty()) {
        const EvalMetrics m = evaluate(state.pipeline, split.holdout, cfg.conf_threshold, cfg.nms_iou);
        state.epoch_metrics.push_back(
            {state.epoch, m.recognition_accuracy, m.mean_psnr_sr, m.mean_psnr_bicubic, m.count_head_accuracy});
    }
}

template <typename Scalar>
void save_checkpoint(const TrainState<Scalar>& state, const std::filesystem::path& path) {
    std::vector<ArchiveEntry> entries;
    const auto& p = state.pipeline;
    append_params(entries, p.g.s1);
    append_params(entries, p.g.s2);
    append_params(entries, p.d.params);
    append_params(entries, p.det.params);
    append_adam(entries, state.adam_g, "adam.g.");
    append_adam(entries, state.adam_d, "adam.d.");
    append_adam(entries, state.adam_det, "adam.det.");
    write_archive(path, entries);

    nlohmann::json meta;
    meta["component"] = "train_state";
    meta["components"] = {"generator", "discriminator", "detector"};
    meta["scalar"] = std::is_same_v<Scalar, float> ? "f32" : "f64";
    meta["train_config"] = state.config;
    meta["generator"] = p.g_config;
    meta["discriminator"] = p.d_config;
    meta["detector"] = p.det_config;
    meta["run_label"] = state.config.run_label();
    meta["epoch"] = state.epoch;
    meta["step"] = state.step;
    meta["g_steps"] = state.g_steps;
    meta["d_steps"] = state.d_steps;
    meta["det_steps"] = state.det_steps;
    meta["skipped_steps"] = state.skipped_steps;
    meta["adam_t"] = {{"g", state.adam_g.t}, {"d", state.adam_d.t}, {"det", state.adam_det.t}};
    meta["history"] = nlohmann::json::array();
    for (const auto& r : state.history) meta["history"].push_back(row_json(r));
    meta["epoch_metrics"] = nlohmann::json::array();
    for (const auto& m : state.epoch_metrics) meta["epoch_metrics"].push_back(epoch_json(m));
    write_sidecar(path, meta);
}

template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::filesystem::path& path) {
    const nlohmann::json meta = read_sidecar(path);
    if (meta.value("component", std::string()) != "train_state")
        throw IoError(path.string() + " is not a training checkpoint");
    TrainState<Scalar> s;
    try {
        s.config = meta.at("train_config").get<TrainConfig>();
        s.pipeline = init_pipeline<Scalar>(s.config);
        s.epoch = meta.at("epoch");
        s.step = meta.at("step");
        s.g_steps = meta.at("g_steps");
        s.d_steps = meta.at("d_steps");
        s.det_steps = meta.at("det_steps");
        s.skipped_steps = meta.at("skipped_steps");
        for (const auto& r : meta.at("history")) s.history.push_back(row_from(r));
        for (const auto& m : meta.at("epoch_metrics")) s.epoch_metrics.push_back(epoch_from(m));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed checkpoint sidecar " + sidecar_path(path).string() + ": " + e.what());
    }
    const auto entries = read_archive(path);
    auto& p = s.pipeline;
    restore_params(entries, p.g.s1);
    restore_params(entries, p.g.s2);
    restore_params(entries, p.d.params);
    restore_params(entries, p.det.params);
    const auto& t = meta.at("adam_t");
    restore_adam(entries, s.adam_g, "adam.g.", t.at("g").get<std::int64_t>());
    restore_adam(entries, s.adam_d, "adam.d.", t.at("d").get<std::int64_t>());
    restore_adam(entries, s.adam_det, "adam.det.", t.at("det").get<std::int64_t>());
    return s;
}

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,l_mse,l_adv_g,l_adv_d,l_const,l_clc,total_g,total_d\n";
    out.precision(10);
    for (const auto& r : rows)
        out << r.step << ',' << r.l_mse << ',' << r.l_adv_g << ',' << r.l_adv_d << ',' << r.l_const << ',' << r.l_clc
            << ',' << r.total_g << ',' << r.total_d << '\n';
}

void write_detector_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,l_det\n";
    out.precision(10);
    for (const auto& r : rows)
        if (r.l_det) out << r.step << ',' << *r.l_det << '\n';
}

namespace {

void write_eval_csv(const std::vector<EpochMetrics>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "epoch,recognition_accuracy,mean_psnr_sr,mean_psnr_bicubic,count_head_accuracy\n";
    for (const auto& m : rows)
        out << m.epoch << ',' << m.recognition_accuracy << ',' << m.mean_psnr_sr << ',' << m.mean_psnr_bicubic << ','
            << m.count_head_accuracy << '\n';
}

template <typename Scalar>
void save_components(const TrainState<Scalar>& state, const std::filesystem::path& dir) {
    const auto& p = state.pipeline;
    ParamSet<Scalar> g = p.g.s1;
    for (const auto* prm : p.g.s2.items()) g.add(prm->name, prm->value, prm->trainable);
    save_component(dir / "generator.ckpt", g, "generator", p.g_config);
    save_component(dir / "discriminator.ckpt", p.d.params, "discriminator", p.d_config);
    save_component(dir / "detector.ckpt", p.det.params, "detector", p.det_config);
}

}  // namespace

template <typename Scalar>
TrainResult train(const TrainConfig& config, const std::vector<PlateSample>& dataset, const std::filesystem::path& out,
                  const std::optional<std::filesystem::path>& resume) {
    config.validate();
    const DatasetSplit split = split_dataset(dataset, config.holdout_fraction);
    if (split.train.empty() && config.epochs > 0) throw ConfigError("train: empty training split");

    TrainState<Scalar> state;
    if (resume) {
        state = load_checkpoint<Scalar>(*resume);
        state.config.epochs = config.epochs;
        state.config.validate();
    } else {
        state = init_train_state<Scalar>(config);
    }
    TrainResult result;
    result.run_dir = out / state.config.run_label();
    std::filesystem::create_directories(result.run_dir);
    {
        std::ofstream cfg(result.run_dir / "config.txt");
        cfg << format_train_config(state.config);
    }
    if (!resume) save_checkpoint(state, result.run_dir / "epoch_0.ckpt");
    while (state.epoch < state.config.epochs) {
        train_epoch(state, split);
        save_checkpoint(state, result.run_dir / ("epoch_" + std::to_string(state.epoch) + ".ckpt"));
        write_metrics_csv(state.history, result.run_dir / "metrics.csv");
    }
    result.final_checkpoint = result.run_dir / "final.ckpt";
    save_checkpoint(state, result.final_checkpoint);
    save_components(state, result.run_dir);
    write_metrics_csv(state.history, result.run_dir / "metrics.csv");
    write_detector_csv(state.history, result.run_dir / "detector.csv");
    write_eval_csv(state.epoch_metrics, result.run_dir / "eval.csv");
    result.epochs_completed = state.epoch;
    return result;
}

TrainResult train_from_dir(const TrainConfig& config, const std::filesystem::path& dataset_dir,
                           const std::filesystem::path& out) {
    const auto dataset = read_dataset(dataset_dir);
    if (dataset.empty()) throw IoError("no samples found in " + dataset_dir.string());
    return train<float>(config, dataset, out);
}

#define LPSR_INSTANTIATE_TRAINER(S)                                                                                  \
    template double clip_gradients(const std::vector<Tensor<S>*>&, double);                                          \
    template double clip_gradients(const std::vector<Parameter<S>*>&, double);                                       \
    template void adam_update(const std::vector<Parameter<S>*>&, AdamState<S>&, double, double, double, double);     \
    template Pipeline<S> init_pipeline<S>(const TrainConfig&);                                                       \
    template PipelineOutput<S> run_pipeline(Pipeline<S>&, const std::vector<const PlateSample*>&);                   \
    template TrainState<S> init_train_state<S>(const TrainConfig&);                                                  \
    template MetricRow train_step(TrainState<S>&, const std::vector<const PlateSample*>&);                           \
    template void train_epoch(TrainState<S>&, const DatasetSplit&);                                                  \
    template void save_checkpoint(const TrainState<S>&, const std::filesystem::path&);                               \
    template TrainState<S> load_checkpoint<S>(const std::filesystem::path&);                                         \
    template TrainResult train<S>(const TrainConfig&, const std::vector<PlateSample>&, const std::filesystem::path&, \
                                  const std::optional<std::filesystem::path>&);

LPSR_INSTANTIATE_TRAINER(float)
LPSR_INSTANTIATE_TRAINER(double)

}  // namespace lpsr
