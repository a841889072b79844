#include "lpsr/discriminator.hpp"

#include <nlohmann/json.hpp>

namespace lpsr {

namespace {

// Keeps f_gan strictly inside (0, 1) even when the sigmoid saturates.
template <typename Scalar>
Var<Scalar> open_unit_interval(Var<Scalar> p) {
    const Scalar eps = std::is_same_v<Scalar, float> ? Scalar(1e-7) : Scalar(1e-12);
    Tensor<Scalar> out(p.shape(), ArrayX<Scalar>(p.value().array().max(eps).min(Scalar(1) - eps)));
    return p.tape->record(std::move(out), {p}, [p, eps](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        const auto& v = p.value().array();
        t.accumulate(p, Tensor<Scalar>(g.shape(), ArrayX<Scalar>(((v > eps) && (v < Scalar(1) - eps))
                                                                      .select(g.array(), Scalar(0)))));
    });
}

std::string conv_name(Index i) { return "d.conv" + std::to_string(i); }

}  // namespace

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
    j = {{"channels", c.channels},       {"input_height", c.input_height}, {"input_width", c.input_width},
         {"width", c.width},             {"blocks", c.blocks},             {"head_hidden", c.head_hidden},
         {"count_classes", c.count_classes}, {"min_count", c.min_count},  {"head_init_std", c.head_init_std}};
}

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
    c.channels = j.at("channels");
    c.input_height = j.at("input_height");
    c.input_width = j.at("input_width");
    c.width = j.at("width");
    c.blocks = j.at("blocks");
    c.head_hidden = j.at("head_hidden");
    c.count_classes = j.at("count_classes");
    c.min_count = j.at("min_count");
    c.head_init_std = j.at("head_init_std");
}

std::vector<std::string> gan_head_names(const DiscriminatorConfig&) {
    return {"d.gan.fc0.w", "d.gan.fc0.b", "d.gan.fc1.w", "d.gan.fc1.b"};
}

std::vector<std::string> count_head_names(const DiscriminatorConfig&) {
    return {"d.count.fc0.w", "d.count.fc0.b", "d.count.fc1.w", "d.count.fc1.b"};
}

template <typename Scalar>
DiscriminatorParams<Scalar> init_discriminator(const DiscriminatorConfig& config, std::uint64_t seed) {
    if ((config.input_height >> config.blocks) < 1 || (config.input_width >> config.blocks) < 1)
        throw ConfigError("discriminator: too many stride-2 blocks for the input size");
    nn::Rng rng(seed);
    DiscriminatorParams<Scalar> d;
    auto& ps = d.params;
    Index cin = config.channels;
    for (Index i = 0; i < config.blocks; ++i) {
        const Index cout = config.block_channels(i);
        // No batch norm on the first layer, so it keeps a (zero-initialized) bias.
        nn::add_conv<Scalar>(ps, conv_name(i), 3, cin, cout, rng, i == 0);
        if (i > 0) nn::add_batch_norm<Scalar>(ps, conv_name(i) + ".bn", cout);
        cin = cout;
    }
    const auto std = static_cast<Scalar>(config.head_init_std);
    const Index f = config.feature_size();
    nn::add_linear<Scalar>(ps, "d.gan.fc0", f, config.head_hidden, std, rng);
    nn::add_linear<Scalar>(ps, "d.gan.fc1", config.head_hidden, 1, std, rng);
    nn::add_linear<Scalar>(ps, "d.count.fc0", f, config.head_hidden, std, rng);
    nn::add_linear<Scalar>(ps, "d.count.fc1", config.head_hidden, config.count_classes, std, rng);
    return d;
}

template <typename Scalar>
DiscriminatorVars<Scalar> disc_forward(const DiscriminatorConfig& config, DiscriminatorParams<Scalar>& params,
                                       Var<Scalar> image, Mode mode) {
    const Shape expected_tail{config.input_height, config.input_width, config.channels};
    const auto& s = image.shape();
    if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != expected_tail)
        throw ShapeError("disc_forward: expected [N," + std::to_string(config.input_height) + "," +
                         std::to_string(config.input_width) + "," + std::to_string(config.channels) + "], got " +
                         shape_string(s));
    auto& ps = params.params;
    Tape<Scalar>& tape = *image.tape;
    Var<Scalar> h = image;
    for (Index i = 0; i < config.blocks; ++i) {
        h = nn::conv(tape, ps, conv_name(i), h, 2, 1);
        if (i > 0) h = nn::bn(tape, ps, conv_name(i) + ".bn", h, mode);
        h = leaky_relu(h, Scalar(0.2));
    }
    Var<Scalar> features = flatten(h);
    Var<Scalar> g = leaky_relu(nn::dense(tape, ps, "d.gan.fc0", features), Scalar(0.2));
    Var<Scalar> f_gan = open_unit_interval(sigmoid(nn::dense(tape, ps, "d.gan.fc1", g)));
    Var<Scalar> c = leaky_relu(nn::dense(tape, ps, "d.count.fc0", features), Scalar(0.2));
    Var<Scalar> f_count = softmax(nn::dense(tape, ps, "d.count.fc1", c));
    return {f_gan, f_count};
}

template <typename Scalar>
DiscriminatorOutput<Scalar> discriminate(const DiscriminatorConfig& config, DiscriminatorParams<Scalar>& params,
                                         const Tensor<Scalar>& image, Mode mode) {
    Tape<Scalar> tape(false);
    auto out = disc_forward(config, params, tape.constant(image), mode);
    return {out.f_gan.value(), out.f_count.value()};
}

#define LPSR_INSTANTIATE_DISCRIMINATOR(S)                                                                 \
    template DiscriminatorParams<S> init_discriminator<S>(const DiscriminatorConfig&, std::uint64_t);     \
    template DiscriminatorVars<S> disc_forward(const DiscriminatorConfig&, DiscriminatorParams<S>&, Var<S>, \
                                               Mode);                                                     \
    template DiscriminatorOutput<S> discriminate(const DiscriminatorConfig&, DiscriminatorParams<S>&,     \
                                                 const Tensor<S>&, Mode);

LPSR_INSTANTIATE_DISCRIMINATOR(float)
LPSR_INSTANTIATE_DISCRIMINATOR(double)

}  // namespace lpsr
