#pragma once

#include <cstdint>
#include <utility>

#include <nlohmann/json_fwd.hpp>

#include "lpsr/nn.hpp"

namespace lpsr {

enum class UpsampleMode { ResizeConv, TransposedConv };

// Architecture hyperparameters of G = G_S2 o G_S1.
struct GeneratorConfig {
    Index channels = 3;
    Index s1_width = 64;      // LR-stage feature channels
    Index s1_blocks = 4;      // 3x3 conv blocks before upsampling
    Index s1_up_width = 64;   // channels of the two 2x upsampling stages
    UpsampleMode upsample = UpsampleMode::ResizeConv;
    bool s1_skip = true;      // output is a logit-space residual over bicubic upsampling; s1.out starts at zero
    Index s2_width = 32;      // first encoder stage; doubles per stage
    Index s2_stages = 2;      // pooling stages (total factor 2^stages)
    bool s2_zero_init = true; // last decoder conv starts at zero, so G_S2 starts as the identity
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

// theta_G: G_S1 weights ("s1.*") and G_S2 weights ("s2.*").
template <typename Scalar>
struct GeneratorParams {
    ParamSet<Scalar> s1;
    ParamSet<Scalar> s2;
};

template <typename Scalar>
GeneratorParams<Scalar> init_generator(const GeneratorConfig& config, std::uint64_t seed);

// 4x super-resolution: [N, h, w, 3] -> [N, 4h, 4w, 3] with values in (0, 1).
template <typename Scalar>
Var<Scalar> sr_forward(const GeneratorConfig& config, ParamSet<Scalar>& s1, Var<Scalar> lr, Mode mode);

// Auto-encoder refinement; shape preserving. Requires H, W divisible by 2^stages.
template <typename Scalar>
Var<Scalar> recon_forward(const GeneratorConfig& config, ParamSet<Scalar>& s2, Var<Scalar> sr, Mode mode);

// Returns (sr_raw, sr_refined) = (G_S1(lr), G_S2(G_S1(lr))).
template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> generator_forward(const GeneratorConfig& config, GeneratorParams<Scalar>& params,
                                                      Var<Scalar> lr, Mode mode);

// Inference convenience: evaluates on a gradient-free tape in Eval mode.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> generate(const GeneratorConfig& config, GeneratorParams<Scalar>& params,
                                                   const Tensor<Scalar>& lr);

}  // namespace lpsr
