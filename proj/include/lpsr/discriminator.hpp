#pragma once

#include <cstdint>

#include <nlohmann/json_fwd.hpp>

#include "lpsr/nn.hpp"

namespace lpsr {

// Character counts are classified into {min_count, ..., min_count + count_classes - 1}.
struct DiscriminatorConfig {
    Index channels = 3;
    Index input_height = 64;
    Index input_width = 128;
    Index width = 32;            // channels of the first conv block
    Index blocks = 5;            // stride-2 conv blocks
    Index head_hidden = 256;     // hidden units of each parallel head
    Index count_classes = 5;
    int min_count = 4;
    double head_init_std = 0.01;

    Index block_channels(Index i) const { return width * (Index{1} << std::min<Index>(i, 3)); }
    Index feature_size() const {
        return block_channels(blocks - 1) * (input_height >> blocks) * (input_width >> blocks);
    }
};

void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

// theta_D. Backbone weights are "d.conv*"; the parallel heads are
// "d.gan.fc*" and "d.count.fc*".
template <typename Scalar>
struct DiscriminatorParams {
    ParamSet<Scalar> params;
};

template <typename Scalar>
struct DiscriminatorVars {
    Var<Scalar> f_gan;    // [N, 1], sigmoid probability that the input is HR
    Var<Scalar> f_count;  // [N, count_classes], softmax over character counts
};

template <typename Scalar>
DiscriminatorParams<Scalar> init_discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

template <typename Scalar>
DiscriminatorVars<Scalar> disc_forward(const DiscriminatorConfig& config, DiscriminatorParams<Scalar>& params,
                                       Var<Scalar> image, Mode mode);

// Value-only pair of head outputs for a batch.
template <typename Scalar>
struct DiscriminatorOutput {
    Tensor<Scalar> f_gan;
    Tensor<Scalar> f_count;
};

template <typename Scalar>
DiscriminatorOutput<Scalar> discriminate(const DiscriminatorConfig& config, DiscriminatorParams<Scalar>& params,
                                         const Tensor<Scalar>& image, Mode mode = Mode::Eval);

// Names of the weights that belong to each head (used by head-independence checks).
std::vector<std::string> gan_head_names(const DiscriminatorConfig& config);
std::vector<std::string> count_head_names(const DiscriminatorConfig& config);

}  // namespace lpsr
