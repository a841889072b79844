#include "lpsr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace lpsr {

namespace {

template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, Index rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
}

}  // namespace

namespace kernels {

template <typename Scalar>
RowMatrix<Scalar> im2col(const Tensor<Scalar>& x, Index kh, Index kw, Index stride, Index pad, Index oh, Index ow) {
    const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    RowMatrix<Scalar> cols = RowMatrix<Scalar>::Zero(n * oh * ow, kh * kw * c);
    const Scalar* src = x.data();
    for (Index b = 0; b < n; ++b) {
        for (Index i = 0; i < oh; ++i) {
            for (Index j = 0; j < ow; ++j) {
                Scalar* row = cols.data() + ((b * oh + i) * ow + j) * cols.cols();
                const Index x0 = j * stride - pad;
                // Valid kernel columns form one contiguous run of kw*c values per kernel row.
                const Index kj0 = std::max<Index>(0, -x0), kj1 = std::min<Index>(kw, w - x0);
                if (kj1 <= kj0) continue;
                for (Index ki = 0; ki < kh; ++ki) {
                    const Index y = i * stride - pad + ki;
                    if (y < 0 || y >= h) continue;
                    const Scalar* s = src + ((b * h + y) * w + x0 + kj0) * c;
                    std::copy(s, s + (kj1 - kj0) * c, row + (ki * kw + kj0) * c);
                }
            }
        }
    }
    return cols;
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, Tensor<Scalar>& x, Index kh, Index kw, Index stride, Index pad, Index oh,
            Index ow) {
    const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    Scalar* dst = x.data();
    for (Index b = 0; b < n; ++b) {
        for (Index i = 0; i < oh; ++i) {
            for (Index j = 0; j < ow; ++j) {
                const Scalar* row = cols.data() + ((b * oh + i) * ow + j) * cols.cols();
                const Index x0 = j * stride - pad;
                const Index kj0 = std::max<Index>(0, -x0), kj1 = std::min<Index>(kw, w - x0);
                if (kj1 <= kj0) continue;
                const Index len = (kj1 - kj0) * c;
                for (Index ki = 0; ki < kh; ++ki) {
                    const Index y = i * stride - pad + ki;
                    if (y < 0 || y >= h) continue;
                    Eigen::Map<ArrayX<Scalar>>(dst + ((b * h + y) * w + x0 + kj0) * c, len) +=
                        Eigen::Map<const ArrayX<Scalar>>(row + (ki * kw + kj0) * c, len);
                }
            }
        }
    }
}

}  // namespace kernels

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor<Scalar> out(a.shape(), ArrayX<Scalar>(a.value().array() + b.value().array()));
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor<Scalar> out(a.shape(), ArrayX<Scalar>(a.value().array() - b.value().array()));
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(a, g);
        Tensor<Scalar> neg(g.shape(), ArrayX<Scalar>(-g.array()));
        t.accumulate(b, std::move(neg));
    });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<Scalar> out(a.shape(), ArrayX<Scalar>(a.value().array() * b.value().array()));
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        if (a.requires_grad())
            t.accumulate(a, Tensor<Scalar>(g.shape(), ArrayX<Scalar>(g.array() * b.value().array())));
        if (b.requires_grad())
            t.accumulate(b, Tensor<Scalar>(g.shape(), ArrayX<Scalar>(g.array() * a.value().array())));
    });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor) {
    Tensor<Scalar> out(a.shape(), ArrayX<Scalar>(a.value().array() * factor));
    return a.tape->record(std::move(out), {a}, [a, factor](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(a, Tensor<Scalar>(g.shape(), ArrayX<Scalar>(g.array() * factor)));
    });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
    Tensor<Scalar> out({1}, a.value().array().sum());
    return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(a, Tensor<Scalar>(a.shape(), g[0]));
    });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
    const Scalar n = static_cast<Scalar>(a.value().size());
    Tensor<Scalar> out({1}, a.value().array().sum() / n);
    return a.tape->record(std::move(out), {a}, [a, n](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(a, Tensor<Scalar>(a.shape(), g[0] / n));
    });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
    Tensor<Scalar> out(x.shape(), ArrayX<Scalar>(x.value().array().max(Scalar(0))));
    return x.tape->record(std::move(out), {x}, [x](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(x, Tensor<Scalar>(g.shape(), ArrayX<Scalar>((x.value().array() > Scalar(0))
                                                                      .select(g.array(), Scalar(0)))));
    });
}

template <typename Scalar>
Var<Scalar> leaky_relu(Var<Scalar> x, Scalar slope) {
    const auto& xv = x.value().array();
    Tensor<Scalar> out(x.shape(), ArrayX<Scalar>((xv > Scalar(0)).select(xv, xv * slope)));
    return x.tape->record(std::move(out), {x}, [x, slope](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(x, Tensor<Scalar>(g.shape(), ArrayX<Scalar>((x.value().array() > Scalar(0))
                                                                      .select(g.array(), g.array() * slope))));
    });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
    ArrayX<Scalar> yv = Scalar(1) / (Scalar(1) + (-x.value().array()).exp());
    Tensor<Scalar> out(x.shape(), yv);
    return x.tape->record(std::move(out), {x}, [x, yv](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(x, Tensor<Scalar>(g.shape(), ArrayX<Scalar>(g.array() * yv * (Scalar(1) - yv))));
    });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> x) {
    ArrayX<Scalar> yv = x.value().array().tanh();
    Tensor<Scalar> out(x.shape(), yv);
    return x.tape->record(std::move(out), {x}, [x, yv](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(x, Tensor<Scalar>(g.shape(), ArrayX<Scalar>(g.array() * (Scalar(1) - yv.square()))));
    });
}

template <typename Scalar>
Var<Scalar> logit(Var<Scalar> p, Scalar eps) {
    const auto& pv = p.value().array();
    ArrayX<Scalar> clamped = pv.max(eps).min(Scalar(1) - eps);
    Tensor<Scalar> out(p.shape(), ArrayX<Scalar>((clamped / (Scalar(1) - clamped)).log()));
    return p.tape->record(std::move(out), {p}, [p, eps](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        const auto& pv = p.value().array();
        const auto inside = (pv > eps) && (pv < Scalar(1) - eps);
        ArrayX<Scalar> d = inside.select(g.array() / (pv * (Scalar(1) - pv)), Scalar(0));
        t.accumulate(p, Tensor<Scalar>(g.shape(), std::move(d)));
    });
}

namespace {

template <typename Scalar>
Var<Scalar> conv2d_impl(Var<Scalar> x, Var<Scalar> weight, const Var<Scalar>* bias, Index stride, Index pad) {
    const auto& xv = x.value();
    const auto& wv = weight.value();
    require_rank(xv, 4, "conv2d input");
    require_rank(wv, 4, "conv2d weight");
    const Index kh = wv.dim(0), kw = wv.dim(1), ci = wv.dim(2), co = wv.dim(3);
    if (xv.dim(3) != ci)
        throw ShapeError("conv2d: input channels " + std::to_string(xv.dim(3)) + " != weight channels " +
                         std::to_string(ci));
    const Index n = xv.dim(0);
    const Index oh = kernels::conv_out(xv.dim(1), kh, stride, pad);
    const Index ow = kernels::conv_out(xv.dim(2), kw, stride, pad);
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: input too small for kernel");

    RowMatrix<Scalar> cols = kernels::im2col(xv, kh, kw, stride, pad, oh, ow);
    auto wmat = wv.matrix(kh * kw * ci, co);
    auto out = Tensor<Scalar>::uninitialized({n, oh, ow, co});
    auto omat = out.matrix(n * oh * ow, co);
    omat.noalias() = cols * wmat;
    if (bias) omat.rowwise() += bias->value().matrix(1, co).row(0);

    Tape<Scalar>& tape = *x.tape;
    const bool has_bias = bias != nullptr;
    Var<Scalar> b = has_bias ? *bias : Var<Scalar>{};
    auto backward = [x, weight, b, has_bias, cols = std::move(cols), kh, kw, ci, co, stride, pad, n, oh,
                     ow](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        auto gmat = g.matrix(n * oh * ow, co);
        if (weight.requires_grad()) {
            auto gw = Tensor<Scalar>::uninitialized(weight.shape());
            gw.matrix(kh * kw * ci, co).noalias() = cols.transpose() * gmat;
            t.accumulate(weight, std::move(gw));
        }
        if (has_bias && b.requires_grad()) {
            Tensor<Scalar> gb({co});
            gb.matrix(1, co) = gmat.colwise().sum();
            t.accumulate(b, std::move(gb));
        }
        if (x.requires_grad()) {
            RowMatrix<Scalar> gcols = gmat * weight.value().matrix(kh * kw * ci, co).transpose();
            Tensor<Scalar> gx = Tensor<Scalar>::zeros(x.shape());
            kernels::col2im(gcols, gx, kh, kw, stride, pad, oh, ow);
            t.accumulate(x, std::move(gx));
        }
    };
    if (has_bias) return tape.record(std::move(out), {x, weight, b}, std::move(backward));
    return tape.record(std::move(out), {x, weight}, std::move(backward));
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Index stride, Index pad) {
    return conv2d_impl<Scalar>(x, weight, nullptr, stride, pad);
}

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, Index stride, Index pad) {
    return conv2d_impl<Scalar>(x, weight, &bias, stride, pad);
}

template <typename Scalar>
Var<Scalar> conv_transpose2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, Index stride, Index pad) {
    const auto& xv = x.value();
    const auto& wv = weight.value();
    require_rank(xv, 4, "conv_transpose2d input");
    require_rank(wv, 4, "conv_transpose2d weight");
    const Index kh = wv.dim(0), kw = wv.dim(1), co = wv.dim(2), ci = wv.dim(3);
    if (xv.dim(3) != ci) throw ShapeError("conv_transpose2d: channel mismatch");
    const Index n = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    const Index oh = (h - 1) * stride - 2 * pad + kh;
    const Index ow = (w - 1) * stride - 2 * pad + kw;

    auto wmat = wv.matrix(kh * kw * co, ci);
    RowMatrix<Scalar> cols = xv.matrix(n * h * w, ci) * wmat.transpose();
    Tensor<Scalar> out = Tensor<Scalar>::zeros({n, oh, ow, co});
    kernels::col2im(cols, out, kh, kw, stride, pad, h, w);
    out.matrix(n * oh * ow, co).rowwise() += bias.value().matrix(1, co).row(0);

    return x.tape->record(std::move(out), {x, weight, bias},
                          [x, weight, bias, kh, kw, co, ci, n, h, w, oh, ow, stride, pad](
                              Tape<Scalar>& t, const Tensor<Scalar>& g) {
                              RowMatrix<Scalar> gcols = kernels::im2col(g, kh, kw, stride, pad, h, w);
                              if (weight.requires_grad()) {
                                  Tensor<Scalar> gw(weight.shape());
                                  gw.matrix(kh * kw * co, ci).noalias() =
                                      gcols.transpose() * x.value().matrix(n * h * w, ci);
                                  t.accumulate(weight, std::move(gw));
                              }
                              if (bias.requires_grad()) {
                                  Tensor<Scalar> gb({co});
                                  gb.matrix(1, co) = g.matrix(n * oh * ow, co).colwise().sum();
                                  t.accumulate(bias, std::move(gb));
                              }
                              if (x.requires_grad()) {
                                  Tensor<Scalar> gx(x.shape());
                                  gx.matrix(n * h * w, ci).noalias() =
                                      gcols * weight.value().matrix(kh * kw * co, ci);
                                  t.accumulate(x, std::move(gx));
                              }
                          });
}

template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Parameter<Scalar>& running_mean,
                       Parameter<Scalar>& running_var, Mode mode, Scalar momentum, Scalar eps) {
    const auto& xv = x.value();
    const Index c = xv.shape().back();
    const Index m = xv.size() / c;
    auto xm = xv.matrix(m, c);
    const auto gm = gamma.value().matrix(1, c);
    const auto bm = beta.value().matrix(1, c);

    RowMatrix<Scalar> mu(1, c), inv(1, c);
    if (mode == Mode::Train) {
        mu = xm.colwise().mean();
        RowMatrix<Scalar> var = (xm.rowwise() - mu.row(0)).array().square().colwise().mean().matrix();
        inv = (var.array() + eps).rsqrt().matrix();
        const Scalar unbias = m > 1 ? Scalar(m) / Scalar(m - 1) : Scalar(1);
        running_mean.value.matrix(1, c) = (Scalar(1) - momentum) * running_mean.value.matrix(1, c) + momentum * mu;
        running_var.value.matrix(1, c) =
            (Scalar(1) - momentum) * running_var.value.matrix(1, c) + (momentum * unbias) * var;
    } else {
        mu = running_mean.value.matrix(1, c);
        inv = (running_var.value.matrix(1, c).array() + eps).rsqrt().matrix();
    }

    RowMatrix<Scalar> xhat = (xm.rowwise() - mu.row(0)).array().rowwise() * inv.row(0).array();
    Tensor<Scalar> out(xv.shape());
    out.matrix(m, c) = (xhat.array().rowwise() * gm.row(0).array()).rowwise() + bm.row(0).array();

    const bool train = mode == Mode::Train;
    return x.tape->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, xhat = std::move(xhat), inv, m, c, train](Tape<Scalar>& t,
                                                                                  const Tensor<Scalar>& g) {
                              auto gmat = g.matrix(m, c);
                              if (gamma.requires_grad()) {
                                  Tensor<Scalar> gg({c});
                                  gg.matrix(1, c) = (gmat.array() * xhat.array()).colwise().sum().matrix();
                                  t.accumulate(gamma, std::move(gg));
                              }
                              if (beta.requires_grad()) {
                                  Tensor<Scalar> gb({c});
                                  gb.matrix(1, c) = gmat.colwise().sum();
                                  t.accumulate(beta, std::move(gb));
                              }
                              if (!x.requires_grad()) return;
                              RowMatrix<Scalar> dxhat =
                                  gmat.array().rowwise() * gamma.value().matrix(1, c).row(0).array();
                              Tensor<Scalar> gx(x.shape());
                              auto gxm = gx.matrix(m, c);
                              if (train) {
                                  const RowMatrix<Scalar> s1 = dxhat.colwise().sum();
                                  const RowMatrix<Scalar> s2 = (dxhat.array() * xhat.array()).colwise().sum().matrix();
                                  const Scalar mm = static_cast<Scalar>(m);
                                  gxm = ((dxhat.array() * mm).rowwise() - s1.row(0).array() -
                                         xhat.array().rowwise() * s2.row(0).array())
                                            .rowwise() *
                                        (inv.row(0).array() / mm);
                              } else {
                                  gxm = dxhat.array().rowwise() * inv.row(0).array();
                              }
                              t.accumulate(x, std::move(gx));
                          });
}

template <typename Scalar>
Var<Scalar> max_pool2(Var<Scalar> x) {
    const auto& xv = x.value();
    require_rank(xv, 4, "max_pool2");
    const Index n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    if (h % 2 || w % 2) throw ShapeError("max_pool2: spatial dims must be even, got " + shape_string(xv.shape()));
    const Index oh = h / 2, ow = w / 2;
    Tensor<Scalar> out({n, oh, ow, c});
    std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
    for (Index b = 0; b < n; ++b)
        for (Index i = 0; i < oh; ++i)
            for (Index j = 0; j < ow; ++j)
                for (Index k = 0; k < c; ++k) {
                    Index best = ((b * h + 2 * i) * w + 2 * j) * c + k;
                    for (Index di = 0; di < 2; ++di)
                        for (Index dj = 0; dj < 2; ++dj) {
                            const Index idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + k;
                            if (xv[idx] > xv[best]) best = idx;
                        }
                    const Index o = ((b * oh + i) * ow + j) * c + k;
                    out[o] = xv[best];
                    argmax[static_cast<std::size_t>(o)] = best;
                }
    return x.tape->record(std::move(out), {x},
                          [x, argmax = std::move(argmax)](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                              Tensor<Scalar> gx = Tensor<Scalar>::zeros(x.shape());
                              for (std::size_t o = 0; o < argmax.size(); ++o)
                                  gx[argmax[o]] += g[static_cast<Index>(o)];
                              t.accumulate(x, std::move(gx));
                          });
}

template <typename Scalar>
Var<Scalar> upsample_nearest2(Var<Scalar> x) {
    const auto& xv = x.value();
    require_rank(xv, 4, "upsample_nearest2");
    const Index n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    Tensor<Scalar> out({n, 2 * h, 2 * w, c});
    for (Index b = 0; b < n; ++b)
        for (Index i = 0; i < 2 * h; ++i)
            for (Index j = 0; j < 2 * w; ++j) {
                const Scalar* s = xv.data() + ((b * h + i / 2) * w + j / 2) * c;
                std::copy(s, s + c, out.data() + ((b * 2 * h + i) * 2 * w + j) * c);
            }
    return x.tape->record(std::move(out), {x}, [x, n, h, w, c](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        Tensor<Scalar> gx = Tensor<Scalar>::zeros(x.shape());
        for (Index b = 0; b < n; ++b)
            for (Index i = 0; i < 2 * h; ++i)
                for (Index j = 0; j < 2 * w; ++j) {
                    const Scalar* s = g.data() + ((b * 2 * h + i) * 2 * w + j) * c;
                    Scalar* d = gx.data() + ((b * h + i / 2) * w + j / 2) * c;
                    for (Index k = 0; k < c; ++k) d[k] += s[k];
                }
        t.accumulate(x, std::move(gx));
    });
}

template <typename Scalar>
RowMatrix<Scalar> kernels::bicubic_matrix(Index n, Index factor) {
    if (n < 1 || factor < 1) throw ShapeError("bicubic_matrix: size and factor must be >= 1");
    auto keys = [](double d) {
        constexpr double a = -0.5;
        d = std::abs(d);
        if (d <= 1) return ((a + 2) * d - (a + 3)) * d * d + 1;
        if (d < 2) return ((a * d - 5 * a) * d + 8 * a) * d - 4 * a;
        return 0.0;
    };
    RowMatrix<Scalar> m = RowMatrix<Scalar>::Zero(n * factor, n);
    for (Index o = 0; o < n * factor; ++o) {
        const double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        const auto base = static_cast<Index>(std::floor(src));
        for (Index k = -1; k <= 2; ++k)
            m(o, std::clamp<Index>(base + k, 0, n - 1)) += static_cast<Scalar>(keys(src - static_cast<double>(base + k)));
    }
    return m;
}

template <typename Scalar>
Var<Scalar> upsample_bicubic(Var<Scalar> x, Index factor) {
    const auto& xv = x.value();
    require_rank(xv, 4, "upsample_bicubic");
    const Index n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    const Index oh = h * factor, ow = w * factor;
    using Map = Eigen::Map<RowMatrix<Scalar>>;
    using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
    auto ah = std::make_shared<RowMatrix<Scalar>>(kernels::bicubic_matrix<Scalar>(h, factor));
    auto aw = std::make_shared<RowMatrix<Scalar>>(kernels::bicubic_matrix<Scalar>(w, factor));

    // Widen every row, then mix rows: out_b = A_h * (rows of A_w * x_b,y).
    RowMatrix<Scalar> wide(h, ow * c);
    Tensor<Scalar> out = Tensor<Scalar>::uninitialized({n, oh, ow, c});
    for (Index b = 0; b < n; ++b) {
        for (Index y = 0; y < h; ++y)
            Map(wide.row(y).data(), ow, c).noalias() = *aw * ConstMap(xv.data() + (b * h + y) * w * c, w, c);
        Map(out.data() + b * oh * ow * c, oh, ow * c).noalias() = *ah * wide;
    }
    return x.tape->record(std::move(out), {x}, [x, ah, aw, n, h, w, c, oh, ow](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        Tensor<Scalar> gx = Tensor<Scalar>::uninitialized(x.shape());
        RowMatrix<Scalar> wide(h, ow * c);
        for (Index b = 0; b < n; ++b) {
            wide.noalias() = ah->transpose() * ConstMap(g.data() + b * oh * ow * c, oh, ow * c);
            for (Index y = 0; y < h; ++y)
                Map(gx.data() + (b * h + y) * w * c, w, c).noalias() = aw->transpose() * ConstMap(wide.row(y).data(), ow, c);
        }
        t.accumulate(x, std::move(gx));
    });
}

template <typename Scalar>
Var<Scalar> fold_rows(Var<Scalar> x) {
    const auto& xv = x.value();
    require_rank(xv, 4, "fold_rows");
    const Index n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
    Tensor<Scalar> out({n, 1, w, h * c});
    for (Index b = 0; b < n; ++b)
        for (Index i = 0; i < h; ++i)
            for (Index j = 0; j < w; ++j) {
                const Scalar* s = xv.data() + ((b * h + i) * w + j) * c;
                std::copy(s, s + c, out.data() + (b * w + j) * h * c + i * c);
            }
    return x.tape->record(std::move(out), {x}, [x, n, h, w, c](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        Tensor<Scalar> gx(x.shape());
        for (Index b = 0; b < n; ++b)
            for (Index i = 0; i < h; ++i)
                for (Index j = 0; j < w; ++j) {
                    const Scalar* s = g.data() + (b * w + j) * h * c + i * c;
                    std::copy(s, s + c, gx.data() + ((b * h + i) * w + j) * c);
                }
        t.accumulate(x, std::move(gx));
    });
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape) {
    Tensor<Scalar> out = x.value().reshaped(shape);
    return x.tape->record(std::move(out), {x}, [x](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(x, g.reshaped(x.shape()));
    });
}

template <typename Scalar>
Var<Scalar> flatten(Var<Scalar> x) {
    const Index n = x.value().dim(0);
    return reshape(x, Shape{n, x.value().size() / n});
}

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias) {
    const auto& xv = x.value();
    const auto& wv = weight.value();
    require_rank(xv, 2, "linear input");
    require_rank(wv, 2, "linear weight");
    const Index n = xv.dim(0), f = xv.dim(1), o = wv.dim(1);
    if (wv.dim(0) != f) throw ShapeError("linear: feature mismatch");
    Tensor<Scalar> out({n, o});
    out.matrix(n, o).noalias() = xv.matrix(n, f) * wv.matrix(f, o);
    out.matrix(n, o).rowwise() += bias.value().matrix(1, o).row(0);
    return x.tape->record(std::move(out), {x, weight, bias},
                          [x, weight, bias, n, f, o](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                              auto gm = g.matrix(n, o);
                              if (weight.requires_grad()) {
                                  Tensor<Scalar> gw({f, o});
                                  gw.matrix(f, o).noalias() = x.value().matrix(n, f).transpose() * gm;
                                  t.accumulate(weight, std::move(gw));
                              }
                              if (bias.requires_grad()) {
                                  Tensor<Scalar> gb({o});
                                  gb.matrix(1, o) = gm.colwise().sum();
                                  t.accumulate(bias, std::move(gb));
                              }
                              if (x.requires_grad()) {
                                  Tensor<Scalar> gx({n, f});
                                  gx.matrix(n, f).noalias() = gm * weight.value().matrix(f, o).transpose();
                                  t.accumulate(x, std::move(gx));
                              }
                          });
}

template <typename Scalar>
Var<Scalar> add_broadcast(Var<Scalar> x, Var<Scalar> v) {
    const auto& xv = x.value();
    const auto& vv = v.value();
    const Index n = xv.dim(0), c = xv.shape().back();
    if (vv.rank() != 2 || vv.dim(0) != n || vv.dim(1) != c)
        throw ShapeError("add_broadcast: expected [" + std::to_string(n) + "x" + std::to_string(c) + "], got " +
                         shape_string(vv.shape()));
    const Index per = xv.size() / (n * c);
    Tensor<Scalar> out = xv;
    for (Index b = 0; b < n; ++b) out.matrix(n * per, c).middleRows(b * per, per).rowwise() += vv.matrix(n, c).row(b);
    return x.tape->record(std::move(out), {x, v}, [x, v, n, c, per](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        t.accumulate(x, g);
        if (v.requires_grad()) {
            Tensor<Scalar> gv({n, c});
            for (Index b = 0; b < n; ++b)
                gv.matrix(n, c).row(b) = g.matrix(n * per, c).middleRows(b * per, per).colwise().sum();
            t.accumulate(v, std::move(gv));
        }
    });
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x) {
    const auto& xv = x.value();
    const Index k = xv.shape().back();
    const Index rows = xv.size() / k;
    Tensor<Scalar> out(xv.shape());
    auto xm = xv.matrix(rows, k);
    auto om = out.matrix(rows, k);
    for (Index r = 0; r < rows; ++r) {
        const Scalar mx = xm.row(r).maxCoeff();
        om.row(r) = (xm.row(r).array() - mx).exp().matrix();
        om.row(r) /= om.row(r).sum();
    }
    ArrayX<Scalar> yv = out.array();
    return x.tape->record(std::move(out), {x}, [x, yv, rows, k](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        Eigen::Map<const RowMatrix<Scalar>> y(yv.data(), rows, k);
        auto gm = g.matrix(rows, k);
        Tensor<Scalar> gx(x.shape());
        auto gxm = gx.matrix(rows, k);
        for (Index r = 0; r < rows; ++r) {
            const Scalar dot = (gm.row(r).array() * y.row(r).array()).sum();
            gxm.row(r) = (y.row(r).array() * (gm.row(r).array() - dot)).matrix();
        }
        t.accumulate(x, std::move(gx));
    });
}

#define LPSR_INSTANTIATE_OPS(S)                                                                                \
    template Var<S> add(Var<S>, Var<S>);                                                                       \
    template Var<S> sub(Var<S>, Var<S>);                                                                       \
    template Var<S> mul(Var<S>, Var<S>);                                                                       \
    template Var<S> scale(Var<S>, S);                                                                          \
    template Var<S> sum(Var<S>);                                                                               \
    template Var<S> mean(Var<S>);                                                                              \
    template Var<S> relu(Var<S>);                                                                              \
    template Var<S> leaky_relu(Var<S>, S);                                                                     \
    template Var<S> sigmoid(Var<S>);                                                                           \
    template Var<S> tanh(Var<S>);                                                                              \
    template Var<S> logit(Var<S>, S);                                                                          \
    template Var<S> conv2d(Var<S>, Var<S>, Index, Index);                                                      \
    template Var<S> conv2d(Var<S>, Var<S>, Var<S>, Index, Index);                                              \
    template Var<S> conv_transpose2d(Var<S>, Var<S>, Var<S>, Index, Index);                                    \
    template Var<S> batch_norm(Var<S>, Var<S>, Var<S>, Parameter<S>&, Parameter<S>&, Mode, S, S);              \
    template Var<S> max_pool2(Var<S>);                                                                         \
    template Var<S> upsample_nearest2(Var<S>);                                                                 \
    template Var<S> upsample_bicubic(Var<S>, Index);                                                           \
    template RowMatrix<S> kernels::bicubic_matrix(Index, Index);                                               \
    template Var<S> fold_rows(Var<S>);                                                                         \
    template Var<S> flatten(Var<S>);                                                                           \
    template Var<S> reshape(Var<S>, Shape);                                                                    \
    template Var<S> linear(Var<S>, Var<S>, Var<S>);                                                            \
    template Var<S> add_broadcast(Var<S>, Var<S>);                                                             \
    template Var<S> softmax(Var<S>);                                                                           \
    template RowMatrix<S> kernels::im2col(const Tensor<S>&, Index, Index, Index, Index, Index, Index);         \
    template void kernels::col2im(const RowMatrix<S>&, Tensor<S>&, Index, Index, Index, Index, Index, Index);

LPSR_INSTANTIATE_OPS(float)
LPSR_INSTANTIATE_OPS(double)

#undef LPSR_INSTANTIATE_OPS

}  // namespace lpsr
