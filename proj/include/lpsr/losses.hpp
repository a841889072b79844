#pragma once

#include <optional>
#include <span>
#include <vector>

#include "lpsr/autograd.hpp"

namespace lpsr {

// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] before any log.
inline constexpr double kProbClamp = 1e-7;

struct LossWeights {
    double mse = 1.0;
    double adv = 1.0;
    double constant = 1.0;  // reconstruction (L1) term
    double clc = 1.0;

    void validate() const;
};

// Individual objective terms for one batch. l_clc_sr / l_clc_hr are the two
// halves of the counting loss; l_clc is their sum.
struct LossTerms {
    double l_mse = 0;
    double l_adv_g = 0;
    double l_adv_d = 0;
    double l_const = 0;
    double l_clc_sr = 0;
    double l_clc_hr = 0;
};

struct LossBundle {
    double l_mse = 0;
    double l_adv_g = 0;
    double l_adv_d = 0;
    double l_const = 0;
    double l_clc = 0;
    double total_g = 0;
    double total_d = 0;
    LossWeights weights;
};

// total_g = mse*l_mse + adv*l_adv_g + constant*l_const + clc*l_clc_sr
// total_d = l_adv_d + clc*(l_clc_sr + l_clc_hr)
LossBundle total_objectives(const LossTerms& terms, const LossWeights& weights);

// Maps a character count onto its class index; throws DomainError outside
// [min_count, min_count + classes).
int count_class(int count, int min_count, Index classes);

// ---- value-only losses (batch-first tensors) ----

// mean_i( |sr_raw_i - hr_i|^2 / P + |sr_refined_i - hr_i|^2 / P ), P = elements per image.
template <typename Scalar>
Scalar pixel_mse_loss(const Tensor<Scalar>& sr_raw, const Tensor<Scalar>& sr_refined, const Tensor<Scalar>& hr);

// -mean log D(hr) - mean log(1 - D(sr))
template <typename Scalar>
Scalar adversarial_loss_d(const Tensor<Scalar>& f_gan_on_sr, const Tensor<Scalar>& f_gan_on_hr);

// Non-saturating generator form: -mean log D(sr)
template <typename Scalar>
Scalar adversarial_loss_g(const Tensor<Scalar>& f_gan_on_sr);

// Mean absolute per-element difference.
template <typename Scalar>
Scalar reconstruction_loss(const Tensor<Scalar>& sr_raw, const Tensor<Scalar>& sr_refined);

// Batch-mean cross-entropy of one set of count distributions.
template <typename Scalar>
Scalar count_cross_entropy(const Tensor<Scalar>& f_count, std::span<const int> true_counts, int min_count);

template <typename Scalar>
Scalar classification_loss(const Tensor<Scalar>& f_count_on_sr, const Tensor<Scalar>& f_count_on_hr,
                           std::span<const int> true_counts, int min_count);

// ---- differentiable versions recorded on a tape ----

template <typename Scalar>
Var<Scalar> pixel_mse_loss(Var<Scalar> sr_raw, Var<Scalar> sr_refined, Var<Scalar> hr);
template <typename Scalar>
Var<Scalar> adversarial_loss_d(Var<Scalar> f_gan_on_sr, Var<Scalar> f_gan_on_hr);
template <typename Scalar>
Var<Scalar> adversarial_loss_g(Var<Scalar> f_gan_on_sr);
template <typename Scalar>
Var<Scalar> reconstruction_loss(Var<Scalar> sr_raw, Var<Scalar> sr_refined);
template <typename Scalar>
Var<Scalar> count_cross_entropy(Var<Scalar> f_count, std::span<const int> true_counts, int min_count);

// ---- optimal discriminator on finite toy distributions ----

struct ToyDistribution {
    std::vector<double> support;
    std::vector<double> probabilities;

    void validate() const;
};

// p_real(x) / (p_real(x) + p_fake(x)) at every support point; nullopt where
// both probabilities are zero.
std::vector<std::optional<double>> optimal_discriminator(const ToyDistribution& p_real, const ToyDistribution& p_fake);

}  // namespace lpsr
