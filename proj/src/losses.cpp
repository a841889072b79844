#include "lpsr/losses.hpp"

#include <cmath>
#include <string>

namespace lpsr {

namespace {

template <typename Scalar>
void require_probabilities(const Tensor<Scalar>& p, const char* what) {
    for (Index i = 0; i < p.size(); ++i)
        if (!(p[i] >= Scalar(0) && p[i] <= Scalar(1)))
            throw DomainError(std::string(what) + ": probability out of [0,1]: " + std::to_string(double(p[i])));
}

template <typename Scalar>
ArrayX<Scalar> clamp_prob(const ArrayX<Scalar>& p) {
    const auto eps = static_cast<Scalar>(kProbClamp);
    return p.max(eps).min(Scalar(1) - eps);
}

template <typename Scalar>
auto inside_clamp(const ArrayX<Scalar>& p) {
    const auto eps = static_cast<Scalar>(kProbClamp);
    return (p > eps) && (p < Scalar(1) - eps);
}

template <typename Scalar>
Index batch_of(const Tensor<Scalar>& t) {
    if (t.rank() < 1 || t.dim(0) == 0) throw ShapeError("loss: empty batch");
    return t.dim(0);
}

std::vector<int> to_classes(std::span<const int> counts, int min_count, Index classes) {
    std::vector<int> out;
    out.reserve(counts.size());
    for (int c : counts) out.push_back(count_class(c, min_count, classes));
    return out;
}

}  // namespace

void LossWeights::validate() const {
    for (double w : {mse, adv, constant, clc})
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
}

LossBundle total_objectives(const LossTerms& t, const LossWeights& w) {
    w.validate();
    LossBundle b;
    b.weights = w;
    b.l_mse = t.l_mse;
    b.l_adv_g = t.l_adv_g;
    b.l_adv_d = t.l_adv_d;
    b.l_const = t.l_const;
    b.l_clc = t.l_clc_sr + t.l_clc_hr;
    b.total_g = w.mse * t.l_mse + w.adv * t.l_adv_g + w.constant * t.l_const + w.clc * t.l_clc_sr;
    b.total_d = t.l_adv_d + w.clc * b.l_clc;
    return b;
}

int count_class(int count, int min_count, Index classes) {
    const int k = count - min_count;
    if (k < 0 || k >= classes)
        throw DomainError("character count " + std::to_string(count) + " outside [" + std::to_string(min_count) +
                          ", " + std::to_string(min_count + classes - 1) + "]");
    return k;
}

template <typename Scalar>
Scalar pixel_mse_loss(const Tensor<Scalar>& sr_raw, const Tensor<Scalar>& sr_refined, const Tensor<Scalar>& hr) {
    require_same_shape(sr_raw, hr, "pixel_mse_loss");
    require_same_shape(sr_refined, hr, "pixel_mse_loss");
    const Index n = batch_of(hr);
    const Scalar per = static_cast<Scalar>(hr.size() / n);
    const Scalar total = (sr_raw.array() - hr.array()).square().sum() + (sr_refined.array() - hr.array()).square().sum();
    return total / per / static_cast<Scalar>(n);
}

template <typename Scalar>
Scalar adversarial_loss_d(const Tensor<Scalar>& f_sr, const Tensor<Scalar>& f_hr) {
    require_probabilities(f_sr, "adversarial_loss_d");
    require_probabilities(f_hr, "adversarial_loss_d");
    return -clamp_prob(f_hr.array()).log().mean() - (Scalar(1) - clamp_prob(f_sr.array())).log().mean();
}

template <typename Scalar>
Scalar adversarial_loss_g(const Tensor<Scalar>& f_sr) {
    require_probabilities(f_sr, "adversarial_loss_g");
    return -clamp_prob(f_sr.array()).log().mean();
}

template <typename Scalar>
Scalar reconstruction_loss(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    require_same_shape(a, b, "reconstruction_loss");
    batch_of(a);
    return (a.array() - b.array()).abs().mean();
}

template <typename Scalar>
Scalar count_cross_entropy(const Tensor<Scalar>& f_count, std::span<const int> true_counts, int min_count) {
    require_probabilities(f_count, "count_cross_entropy");
    const Index n = batch_of(f_count);
    const Index k = f_count.size() / n;
    if (static_cast<Index>(true_counts.size()) != n) throw ShapeError("count_cross_entropy: label count mismatch");
    const auto cls = to_classes(true_counts, min_count, k);
    const auto p = clamp_prob(f_count.array());
    Scalar total = 0;
    for (Index i = 0; i < n; ++i) total -= std::log(p[i * k + cls[static_cast<std::size_t>(i)]]);
    return total / static_cast<Scalar>(n);
}

template <typename Scalar>
Scalar classification_loss(const Tensor<Scalar>& f_sr, const Tensor<Scalar>& f_hr, std::span<const int> true_counts,
                           int min_count) {
    require_same_shape(f_sr, f_hr, "classification_loss");
    return count_cross_entropy(f_sr, true_counts, min_count) + count_cross_entropy(f_hr, true_counts, min_count);
}

template <typename Scalar>
Var<Scalar> pixel_mse_loss(Var<Scalar> raw, Var<Scalar> refined, Var<Scalar> hr) {
    const Scalar value = pixel_mse_loss(raw.value(), refined.value(), hr.value());
    const Scalar norm = Scalar(2) / static_cast<Scalar>(hr.value().size());
    return raw.tape->record(Tensor<Scalar>({1}, value), {raw, refined, hr},
                            [raw, refined, hr, norm](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                                const Scalar s = g[0] * norm;
                                const auto& h = hr.value().array();
                                ArrayX<Scalar> d1 = (raw.value().array() - h) * s;
                                ArrayX<Scalar> d2 = (refined.value().array() - h) * s;
                                if (hr.requires_grad())
                                    t.accumulate(hr, Tensor<Scalar>(hr.shape(), ArrayX<Scalar>(-(d1 + d2))));
                                t.accumulate(raw, Tensor<Scalar>(raw.shape(), std::move(d1)));
                                t.accumulate(refined, Tensor<Scalar>(refined.shape(), std::move(d2)));
                            });
}

template <typename Scalar>
Var<Scalar> adversarial_loss_d(Var<Scalar> f_sr, Var<Scalar> f_hr) {
    const Scalar value = adversarial_loss_d(f_sr.value(), f_hr.value());
    return f_sr.tape->record(Tensor<Scalar>({1}, value), {f_sr, f_hr}, [f_sr, f_hr](Tape<Scalar>& t,
                                                                                    const Tensor<Scalar>& g) {
        const auto& ps = f_sr.value().array();
        const auto& ph = f_hr.value().array();
        const Scalar ns = static_cast<Scalar>(ps.size()), nh = static_cast<Scalar>(ph.size());
        // d/dp [-log(1-p)] = 1/(1-p); d/dp [-log p] = -1/p
        t.accumulate(f_sr, Tensor<Scalar>(f_sr.shape(), ArrayX<Scalar>(inside_clamp(ps).select(
                                                            g[0] / (ns * (Scalar(1) - ps)), Scalar(0)))));
        t.accumulate(f_hr, Tensor<Scalar>(f_hr.shape(),
                                          ArrayX<Scalar>(inside_clamp(ph).select(-g[0] / (nh * ph), Scalar(0)))));
    });
}

template <typename Scalar>
Var<Scalar> adversarial_loss_g(Var<Scalar> f_sr) {
    const Scalar value = adversarial_loss_g(f_sr.value());
    return f_sr.tape->record(Tensor<Scalar>({1}, value), {f_sr}, [f_sr](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        const auto& p = f_sr.value().array();
        const Scalar n = static_cast<Scalar>(p.size());
        t.accumulate(f_sr, Tensor<Scalar>(f_sr.shape(),
                                          ArrayX<Scalar>(inside_clamp(p).select(-g[0] / (n * p), Scalar(0)))));
    });
}

template <typename Scalar>
Var<Scalar> reconstruction_loss(Var<Scalar> a, Var<Scalar> b) {
    const Scalar value = reconstruction_loss(a.value(), b.value());
    const Scalar n = static_cast<Scalar>(a.value().size());
    return a.tape->record(Tensor<Scalar>({1}, value), {a, b}, [a, b, n](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        ArrayX<Scalar> d = (a.value().array() - b.value().array()).sign() * (g[0] / n);
        if (b.requires_grad()) t.accumulate(b, Tensor<Scalar>(b.shape(), ArrayX<Scalar>(-d)));
        t.accumulate(a, Tensor<Scalar>(a.shape(), std::move(d)));
    });
}

template <typename Scalar>
Var<Scalar> count_cross_entropy(Var<Scalar> f_count, std::span<const int> true_counts, int min_count) {
    const Scalar value = count_cross_entropy(f_count.value(), true_counts, min_count);
    const Index n = f_count.value().dim(0);
    const Index k = f_count.value().size() / n;
    auto cls = to_classes(true_counts, min_count, k);
    return f_count.tape->record(Tensor<Scalar>({1}, value), {f_count},
                                [f_count, cls = std::move(cls), n, k](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                                    const auto eps = static_cast<Scalar>(kProbClamp);
                                    Tensor<Scalar> d = Tensor<Scalar>::zeros(f_count.shape());
                                    for (Index i = 0; i < n; ++i) {
                                        const Index idx = i * k + cls[static_cast<std::size_t>(i)];
                                        const Scalar p = f_count.value()[idx];
                                        if (p > eps && p < Scalar(1) - eps) d[idx] = -g[0] / (static_cast<Scalar>(n) * p);
                                    }
                                    t.accumulate(f_count, std::move(d));
                                });
}

void ToyDistribution::validate() const {
    if (support.size() != probabilities.size()) throw DomainError("toy distribution: support/probability size mismatch");
    double total = 0;
    for (double p : probabilities) {
        if (!(p >= 0.0)) throw DomainError("toy distribution: negative probability");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError("toy distribution: probabilities do not sum to 1");
}

std::vector<std::optional<double>> optimal_discriminator(const ToyDistribution& p_real, const ToyDistribution& p_fake) {
    p_real.validate();
    p_fake.validate();
    if (p_real.support != p_fake.support) throw DomainError("optimal_discriminator: distributions need a shared support");
    std::vector<std::optional<double>> out;
    out.reserve(p_real.support.size());
    for (std::size_t i = 0; i < p_real.support.size(); ++i) {
        const double denom = p_real.probabilities[i] + p_fake.probabilities[i];
        if (denom == 0.0)
            out.emplace_back(std::nullopt);
        else
            out.emplace_back(p_real.probabilities[i] / denom);
    }
    return out;
}

#define LPSR_INSTANTIATE_LOSSES(S)                                                                     \
    template S pixel_mse_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                   \
    template S adversarial_loss_d(const Tensor<S>&, const Tensor<S>&);                                 \
    template S adversarial_loss_g(const Tensor<S>&);                                                   \
    template S reconstruction_loss(const Tensor<S>&, const Tensor<S>&);                                \
    template S count_cross_entropy(const Tensor<S>&, std::span<const int>, int);                       \
    template S classification_loss(const Tensor<S>&, const Tensor<S>&, std::span<const int>, int);     \
    template Var<S> pixel_mse_loss(Var<S>, Var<S>, Var<S>);                                            \
    template Var<S> adversarial_loss_d(Var<S>, Var<S>);                                                \
    template Var<S> adversarial_loss_g(Var<S>);                                                        \
    template Var<S> reconstruction_loss(Var<S>, Var<S>);                                               \
    template Var<S> count_cross_entropy(Var<S>, std::span<const int>, int);

LPSR_INSTANTIATE_LOSSES(float)
LPSR_INSTANTIATE_LOSSES(double)

}  // namespace lpsr
