#pragma once

#include <cmath>
#include <random>
#include <string>

#include "lpsr/ops.hpp"

// Parameter-naming conventions and layer helpers shared by the networks.
// A layer called "name" owns "name.w" and optionally "name.b"; a batch-norm
// called "name" owns "name.gamma", "name.beta" and the buffers
// "name.running_mean" / "name.running_var".

namespace lpsr::nn {

using Rng = std::mt19937_64;

template <typename Scalar>
Tensor<Scalar> normal_tensor(Shape shape, Scalar stddev, Rng& rng) {
    Tensor<Scalar> t(std::move(shape));
    if (stddev == Scalar(0)) return t;
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
    return t;
}

// He-normal initialized k x k convolution; biases start at exactly zero.
template <typename Scalar>
void add_conv(ParamSet<Scalar>& ps, const std::string& name, Index k, Index cin, Index cout, Rng& rng, bool bias,
              Scalar stddev = Scalar(-1)) {
    if (stddev < Scalar(0)) stddev = static_cast<Scalar>(std::sqrt(2.0 / static_cast<double>(k * k * cin)));
    ps.add(name + ".w", normal_tensor<Scalar>({k, k, cin, cout}, stddev, rng));
    if (bias) ps.add(name + ".b", Tensor<Scalar>::zeros({cout}));
}

template <typename Scalar>
void add_conv_transpose(ParamSet<Scalar>& ps, const std::string& name, Index k, Index cin, Index cout, Rng& rng) {
    const auto stddev = static_cast<Scalar>(std::sqrt(2.0 / static_cast<double>(k * k * cin)));
    ps.add(name + ".w", normal_tensor<Scalar>({k, k, cout, cin}, stddev, rng));
    ps.add(name + ".b", Tensor<Scalar>::zeros({cout}));
}

template <typename Scalar>
void add_batch_norm(ParamSet<Scalar>& ps, const std::string& name, Index channels) {
    ps.add(name + ".gamma", Tensor<Scalar>({channels}, Scalar(1)));
    ps.add(name + ".beta", Tensor<Scalar>::zeros({channels}));
    ps.add(name + ".running_mean", Tensor<Scalar>::zeros({channels}), false);
    ps.add(name + ".running_var", Tensor<Scalar>({channels}, Scalar(1)), false);
}

template <typename Scalar>
void add_linear(ParamSet<Scalar>& ps, const std::string& name, Index in, Index out, Scalar stddev, Rng& rng) {
    ps.add(name + ".w", normal_tensor<Scalar>({in, out}, stddev, rng));
    ps.add(name + ".b", Tensor<Scalar>::zeros({out}));
}

template <typename Scalar>
Var<Scalar> conv(Tape<Scalar>& tape, ParamSet<Scalar>& ps, const std::string& name, Var<Scalar> x, Index stride,
                 Index pad) {
    Var<Scalar> w = tape.parameter(ps.get(name + ".w"));
    if (ps.contains(name + ".b")) return conv2d(x, w, tape.parameter(ps.get(name + ".b")), stride, pad);
    return conv2d(x, w, stride, pad);
}

template <typename Scalar>
Var<Scalar> conv_transpose(Tape<Scalar>& tape, ParamSet<Scalar>& ps, const std::string& name, Var<Scalar> x,
                           Index stride, Index pad) {
    return conv_transpose2d(x, tape.parameter(ps.get(name + ".w")), tape.parameter(ps.get(name + ".b")), stride, pad);
}

template <typename Scalar>
Var<Scalar> bn(Tape<Scalar>& tape, ParamSet<Scalar>& ps, const std::string& name, Var<Scalar> x, Mode mode) {
    return batch_norm(x, tape.parameter(ps.get(name + ".gamma")), tape.parameter(ps.get(name + ".beta")),
                      ps.get(name + ".running_mean"), ps.get(name + ".running_var"), mode);
}

template <typename Scalar>
Var<Scalar> dense(Tape<Scalar>& tape, ParamSet<Scalar>& ps, const std::string& name, Var<Scalar> x) {
    return linear(x, tape.parameter(ps.get(name + ".w")), tape.parameter(ps.get(name + ".b")));
}

template <typename Scalar>
void require_finite(const ParamSet<Scalar>& ps, const char* what) {
    for (const auto* p : ps.items())
        if (!p->value.all_finite()) throw NumericError(std::string(what) + ": non-finite values in " + p->name);
}

}  // namespace lpsr::nn
