#include "lpsr/generator.hpp"

#include <nlohmann/json.hpp>

namespace lpsr {

namespace {

constexpr double kLogitEps = 1e-6;

std::string block(const char* prefix, Index i) { return std::string(prefix) + std::to_string(i); }

}  // namespace

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"channels", c.channels},
         {"s1_width", c.s1_width},
         {"s1_blocks", c.s1_blocks},
         {"s1_up_width", c.s1_up_width},
         {"upsample", c.upsample == UpsampleMode::ResizeConv ? "resize_conv" : "transposed_conv"},
         {"s1_skip", c.s1_skip},
         {"s2_width", c.s2_width},
         {"s2_stages", c.s2_stages},
         {"s2_zero_init", c.s2_zero_init}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    c.channels = j.at("channels");
    c.s1_width = j.at("s1_width");
    c.s1_blocks = j.at("s1_blocks");
    c.s1_up_width = j.at("s1_up_width");
    c.upsample = j.at("upsample") == "resize_conv" ? UpsampleMode::ResizeConv : UpsampleMode::TransposedConv;
    c.s1_skip = j.at("s1_skip");
    c.s2_width = j.at("s2_width");
    c.s2_stages = j.at("s2_stages");
    c.s2_zero_init = j.at("s2_zero_init");
}

template <typename Scalar>
GeneratorParams<Scalar> init_generator(const GeneratorConfig& config, std::uint64_t seed) {
    nn::Rng rng(seed);
    GeneratorParams<Scalar> g;

    // G_S1
    auto& s1 = g.s1;
    nn::add_conv<Scalar>(s1, "s1.head", 3, config.channels, config.s1_width, rng, false);
    nn::add_batch_norm<Scalar>(s1, "s1.head.bn", config.s1_width);
    for (Index i = 0; i < config.s1_blocks; ++i) {
        nn::add_conv<Scalar>(s1, block("s1.block", i), 3, config.s1_width, config.s1_width, rng, false);
        nn::add_batch_norm<Scalar>(s1, block("s1.block", i) + ".bn", config.s1_width);
    }
    Index cin = config.s1_width;
    for (Index i = 0; i < 2; ++i) {
        const auto name = block("s1.up", i);
        if (config.upsample == UpsampleMode::ResizeConv)
            nn::add_conv<Scalar>(s1, name, 3, cin, config.s1_up_width, rng, false);
        else
            nn::add_conv_transpose<Scalar>(s1, name, 4, cin, config.s1_up_width, rng);
        nn::add_batch_norm<Scalar>(s1, name + ".bn", config.s1_up_width);
        cin = config.s1_up_width;
    }
    nn::add_conv<Scalar>(s1, "s1.out", 3, cin, config.channels, rng, true, config.s1_skip ? Scalar(0) : Scalar(-1));

    // G_S2: encoder widths w, 2w, ...; decoder mirrors them back to the image channels.
    auto& s2 = g.s2;
    cin = config.channels;
    std::vector<Index> widths;
    for (Index i = 0; i < config.s2_stages; ++i) {
        const Index w = config.s2_width << i;
        nn::add_conv<Scalar>(s2, block("s2.enc", i), 3, cin, w, rng, false);
        nn::add_batch_norm<Scalar>(s2, block("s2.enc", i) + ".bn", w);
        widths.push_back(w);
        cin = w;
    }
    for (Index i = 0; i < config.s2_stages; ++i) {
        const bool last = i + 1 == config.s2_stages;
        const Index cout = last ? config.channels : widths[static_cast<std::size_t>(config.s2_stages - 2 - i)];
        const auto name = block("s2.dec", i);
        if (last) {
            nn::add_conv<Scalar>(s2, name, 3, cin, cout, rng, true,
                                 config.s2_zero_init ? Scalar(0) : Scalar(-1));
        } else {
            nn::add_conv<Scalar>(s2, name, 3, cin, cout, rng, false);
            nn::add_batch_norm<Scalar>(s2, name + ".bn", cout);
        }
        cin = cout;
    }
    return g;
}

template <typename Scalar>
Var<Scalar> sr_forward(const GeneratorConfig& config, ParamSet<Scalar>& s1, Var<Scalar> lr, Mode mode) {
    const auto& shape = lr.shape();
    if (shape.size() != 4 || shape[3] != config.channels)
        throw ShapeError("sr_forward: expected [N,H,W," + std::to_string(config.channels) + "], got " +
                         shape_string(shape));
    if (shape[1] < 8 || shape[2] < 8) throw ShapeError("sr_forward: input H and W must be >= 8");
    nn::require_finite(s1, "sr_forward");

    Tape<Scalar>& tape = *lr.tape;
    Var<Scalar> head = relu(nn::bn(tape, s1, "s1.head.bn", nn::conv(tape, s1, "s1.head", lr, 1, 1), mode));
    Var<Scalar> h = head;
    for (Index i = 0; i < config.s1_blocks; ++i) {
        const auto name = block("s1.block", i);
        h = relu(nn::bn(tape, s1, name + ".bn", nn::conv(tape, s1, name, h, 1, 1), mode));
    }
    if (config.s1_blocks > 0) h = add(h, head);
    for (Index i = 0; i < 2; ++i) {
        const auto name = block("s1.up", i);
        if (config.upsample == UpsampleMode::ResizeConv)
            h = nn::conv(tape, s1, name, upsample_nearest2(h), 1, 1);
        else
            h = nn::conv_transpose(tape, s1, name, h, 2, 1);
        h = relu(nn::bn(tape, s1, name + ".bn", h, mode));
    }
    Var<Scalar> out = nn::conv(tape, s1, "s1.out", h, 1, 1);
    if (config.s1_skip) out = add(logit(upsample_bicubic(lr, Index{4}), static_cast<Scalar>(kLogitEps)), out);
    return sigmoid(out);
}

template <typename Scalar>
Var<Scalar> recon_forward(const GeneratorConfig& config, ParamSet<Scalar>& s2, Var<Scalar> sr, Mode mode) {
    const auto& shape = sr.shape();
    const Index factor = Index{1} << config.s2_stages;
    if (shape.size() != 4 || shape[3] != config.channels)
        throw ShapeError("recon_forward: expected [N,H,W," + std::to_string(config.channels) + "], got " +
                         shape_string(shape));
    if (shape[1] % factor || shape[2] % factor)
        throw ShapeError("recon_forward: H and W must be divisible by " + std::to_string(factor) + ", got " +
                         shape_string(shape));
    nn::require_finite(s2, "recon_forward");

    Tape<Scalar>& tape = *sr.tape;
    Var<Scalar> h = sr;
    for (Index i = 0; i < config.s2_stages; ++i) {
        const auto name = block("s2.enc", i);
        h = max_pool2(relu(nn::bn(tape, s2, name + ".bn", nn::conv(tape, s2, name, h, 1, 1), mode)));
    }
    for (Index i = 0; i < config.s2_stages; ++i) {
        const auto name = block("s2.dec", i);
        h = nn::conv(tape, s2, name, upsample_nearest2(h), 1, 1);
        if (i + 1 < config.s2_stages) h = relu(nn::bn(tape, s2, name + ".bn", h, mode));
    }
    // The decoder output is a correction in logit space: refined = sigmoid(logit(sr) + delta).
    return sigmoid(add(logit(sr, static_cast<Scalar>(kLogitEps)), h));
}

template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> generator_forward(const GeneratorConfig& config, GeneratorParams<Scalar>& params,
                                                      Var<Scalar> lr, Mode mode) {
    Var<Scalar> raw = sr_forward(config, params.s1, lr, mode);
    Var<Scalar> refined = recon_forward(config, params.s2, raw, mode);
    return {raw, refined};
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> generate(const GeneratorConfig& config, GeneratorParams<Scalar>& params,
                                                   const Tensor<Scalar>& lr) {
    Tape<Scalar> tape(false);
    auto [raw, refined] = generator_forward(config, params, tape.constant(lr), Mode::Eval);
    return {raw.value(), refined.value()};
}

#define LPSR_INSTANTIATE_GENERATOR(S)                                                                       \
    template GeneratorParams<S> init_generator<S>(const GeneratorConfig&, std::uint64_t);                   \
    template Var<S> sr_forward(const GeneratorConfig&, ParamSet<S>&, Var<S>, Mode);                         \
    template Var<S> recon_forward(const GeneratorConfig&, ParamSet<S>&, Var<S>, Mode);                      \
    template std::pair<Var<S>, Var<S>> generator_forward(const GeneratorConfig&, GeneratorParams<S>&, Var<S>, \
                                                         Mode);                                             \
    template std::pair<Tensor<S>, Tensor<S>> generate(const GeneratorConfig&, GeneratorParams<S>&, const Tensor<S>&);

LPSR_INSTANTIATE_GENERATOR(float)
LPSR_INSTANTIATE_GENERATOR(double)

}  // namespace lpsr
