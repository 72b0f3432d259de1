#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "csen/common.hpp"
#include "csen/gemm.hpp"
#include "csen/tensor.hpp"

namespace csen::ops {

namespace detail {

template <typename S>
bool record(std::initializer_list<const TensorPtr<S>*> inputs) {
    if (!GradMode::enabled()) return false;
    for (const TensorPtr<S>* t : inputs)
        if ((*t)->requires_grad) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> add(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape != b->shape)
        throw shape_error(cat("add: shape mismatch ", shape_str(a->shape), " vs ", shape_str(b->shape)));
    auto out = zeros<S>(a->shape);
    for (std::int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (detail::record<S>({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b](Tensor<S>& o) {
            for (auto* t : {a.get(), b.get()}) {
                if (!t->requires_grad) continue;
                t->ensure_grad();
                for (std::int64_t i = 0; i < o.numel(); ++i) t->grad[i] += o.grad[i];
            }
        };
    }
    return out;
}

// Elementwise sum of several same-shape tensors in one pass.
template <typename S>
TensorPtr<S> add_n(const std::vector<TensorPtr<S>>& xs) {
    if (xs.empty()) throw shape_error("add_n: empty input list");
    for (const auto& x : xs)
        if (x->shape != xs[0]->shape)
            throw shape_error(cat("add_n: shape mismatch ", shape_str(xs[0]->shape), " vs ", shape_str(x->shape)));
    auto out = zeros<S>(xs[0]->shape);
    for (const auto& x : xs)
        for (std::int64_t i = 0; i < out->numel(); ++i) out->data[i] += x->data[i];
    bool rec = false;
    if (GradMode::enabled())
        for (const auto& x : xs) rec = rec || x->requires_grad;
    if (rec) {
        out->requires_grad = true;
        out->parents = xs;
        auto inputs = xs;
        out->backward_fn = [inputs](Tensor<S>& o) {
            for (const auto& x : inputs) {
                if (!x->requires_grad) continue;
                x->ensure_grad();
                for (std::int64_t i = 0; i < o.numel(); ++i) x->grad[i] += o.grad[i];
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> mul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape != b->shape)
        throw shape_error(cat("mul: shape mismatch ", shape_str(a->shape), " vs ", shape_str(b->shape)));
    auto out = zeros<S>(a->shape);
    for (std::int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (detail::record<S>({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b](Tensor<S>& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < o.numel(); ++i) a->grad[i] += o.grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < o.numel(); ++i) b->grad[i] += o.grad[i] * a->data[i];
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> scale(const TensorPtr<S>& x, S alpha) {
    auto out = zeros<S>(x->shape);
    for (std::int64_t i = 0; i < x->numel(); ++i) out->data[i] = alpha * x->data[i];
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, alpha](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < o.numel(); ++i) x->grad[i] += alpha * o.grad[i];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> relu(const TensorPtr<S>& x) {
    auto out = zeros<S>(x->shape);
    for (std::int64_t i = 0; i < x->numel(); ++i) out->data[i] = x->data[i] > S(0) ? x->data[i] : S(0);
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x](Tensor<S>& o) {
            x->ensure_grad();
            // subgradient at 0 is 0
            for (std::int64_t i = 0; i < o.numel(); ++i)
                if (x->data[i] > S(0)) x->grad[i] += o.grad[i];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> gelu(const TensorPtr<S>& x) {
    static const double inv_sqrt2 = 0.7071067811865475244;
    static const double inv_sqrt2pi = 0.3989422804014326779;
    auto out = zeros<S>(x->shape);
    for (std::int64_t i = 0; i < x->numel(); ++i) {
        double v = static_cast<double>(x->data[i]);
        out->data[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
    }
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < o.numel(); ++i) {
                double v = static_cast<double>(x->data[i]);
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                x->grad[i] += o.grad[i] * static_cast<S>(cdf + v * pdf);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> matmul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw shape_error(cat("matmul: incompatible shapes ", shape_str(a->shape), " and ", shape_str(b->shape)));
    const std::int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    auto out = zeros<S>({m, n});
    gemm_nn(m, n, k, a->data.data(), b->data.data(), out->data.data());
    if (detail::record<S>({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b, m, n, k](Tensor<S>& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                gemm_nt(m, k, n, o.grad.data(), b->data.data(), a->grad.data(), true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                gemm_tn(k, n, m, a->data.data(), o.grad.data(), b->grad.data(), true);
            }
        };
    }
    return out;
}

// out = x * W + b with x (N x Din), W (Din x Dout), b (Dout)
template <typename S>
TensorPtr<S> linear(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b) {
    if (x->shape.size() != 2 || w->shape.size() != 2 || x->shape[1] != w->shape[0])
        throw shape_error(cat("linear: input ", shape_str(x->shape), " does not match weight ", shape_str(w->shape)));
    const std::int64_t n = x->shape[0], din = x->shape[1], dout = w->shape[1];
    if (b->numel() != dout)
        throw shape_error(cat("linear: bias ", shape_str(b->shape), " does not match weight ", shape_str(w->shape)));
    auto out = zeros<S>({n, dout});
    gemm_nn(n, dout, din, x->data.data(), w->data.data(), out->data.data());
    for (std::int64_t i = 0; i < n; ++i) {
        S* row = out->data.data() + i * dout;
        for (std::int64_t j = 0; j < dout; ++j) row[j] += b->data[j];
    }
    if (detail::record<S>({&x, &w, &b})) {
        out->requires_grad = true;
        out->parents = {x, w, b};
        out->backward_fn = [x, w, b, n, din, dout](Tensor<S>& o) {
            if (x->requires_grad) {
                x->ensure_grad();
                gemm_nt(n, din, dout, o.grad.data(), w->data.data(), x->grad.data(), true);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                gemm_tn(din, dout, n, x->data.data(), o.grad.data(), w->grad.data(), true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    const S* row = o.grad.data() + i * dout;
                    for (std::int64_t j = 0; j < dout; ++j) b->grad[j] += row[j];
                }
            }
        };
    }
    return out;
}

// Contract-facing name used by the higher-level modules.
template <typename S>
TensorPtr<S> linear_forward(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b) {
    return linear(x, w, b);
}

// out = a * b^T with a (N x d), b (M x d); used for similarity matrices
template <typename S>
TensorPtr<S> matmul_nt(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
        throw shape_error(cat("matmul_nt: incompatible shapes ", shape_str(a->shape), " and ", shape_str(b->shape)));
    const std::int64_t n = a->shape[0], m = b->shape[0], d = a->shape[1];
    auto out = zeros<S>({n, m});
    gemm_nt(n, m, d, a->data.data(), b->data.data(), out->data.data());
    if (detail::record<S>({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b, n, m, d](Tensor<S>& o) {
            if (a->requires_grad) {
                a->ensure_grad();
                gemm_nn(n, d, m, o.grad.data(), b->data.data(), a->grad.data(), true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                gemm_tn(m, d, n, o.grad.data(), a->data.data(), b->grad.data(), true);
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> concat_last(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2)
        throw shape_error(cat("concat_last expects matrices, got ", shape_str(a->shape), " and ", shape_str(b->shape)));
    if (a->shape[0] != b->shape[0])
        throw shape_error(cat("concat_last: row count mismatch ", shape_str(a->shape), " vs ", shape_str(b->shape)));
    const std::int64_t n = a->shape[0], da = a->shape[1], db = b->shape[1];
    auto out = zeros<S>({n, da + db});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(a->data.data() + i * da, da, out->data.data() + i * (da + db));
        std::copy_n(b->data.data() + i * db, db, out->data.data() + i * (da + db) + da);
    }
    if (detail::record<S>({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b, n, da, db](Tensor<S>& o) {
            for (std::int64_t i = 0; i < n; ++i) {
                const S* row = o.grad.data() + i * (da + db);
                if (a->requires_grad) {
                    a->ensure_grad();
                    for (std::int64_t j = 0; j < da; ++j) a->grad[i * da + j] += row[j];
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    for (std::int64_t j = 0; j < db; ++j) b->grad[i * db + j] += row[da + j];
                }
            }
        };
    }
    return out;
}

// Rows divided by max(||row||, eps).
template <typename S>
TensorPtr<S> l2_normalize(const TensorPtr<S>& x, S eps = S(1e-12)) {
    if (x->shape.size() != 2)
        throw shape_error(cat("l2_normalize expects a matrix, got ", shape_str(x->shape)));
    const std::int64_t n = x->shape[0], d = x->shape[1];
    auto out = zeros<S>({n, d});
    std::vector<S> norms(n);
    for (std::int64_t i = 0; i < n; ++i) {
        S sq = S(0);
        const S* row = x->data.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) sq += row[j] * row[j];
        S r = std::max(static_cast<S>(std::sqrt(static_cast<double>(sq))), eps);
        norms[i] = r;
        for (std::int64_t j = 0; j < d; ++j) out->data[i * d + j] = row[j] / r;
    }
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, norms, eps, n, d](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const S* g = o.grad.data() + i * d;
                const S* y = o.data.data() + i * d;
                S* gx = x->grad.data() + i * d;
                const S r = norms[i];
                if (r <= eps) {
                    for (std::int64_t j = 0; j < d; ++j) gx[j] += g[j] / eps;
                    continue;
                }
                S dot = S(0);
                for (std::int64_t j = 0; j < d; ++j) dot += g[j] * y[j];
                for (std::int64_t j = 0; j < d; ++j) gx[j] += (g[j] - y[j] * dot) / r;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling / convolution
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> global_avg_pool(const TensorPtr<S>& x) {
    if (x->shape.size() != 4)
        throw shape_error(cat("global_avg_pool expects NxCxHxW, got ", shape_str(x->shape)));
    const std::int64_t n = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
    auto out = zeros<S>({n, c});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            const S* plane = x->data.data() + (i * c + j) * hw;
            S acc = S(0);
            for (std::int64_t p = 0; p < hw; ++p) acc += plane[p];
            out->data[i * c + j] = acc / static_cast<S>(hw);
        }
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, n, c, hw](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < c; ++j) {
                    const S g = o.grad[i * c + j] / static_cast<S>(hw);
                    S* plane = x->grad.data() + (i * c + j) * hw;
                    for (std::int64_t p = 0; p < hw; ++p) plane[p] += g;
                }
        };
    }
    return out;
}

namespace detail {

// colT (Cin*kh*kw x Hout*Wout) for one image, zero padded.
template <typename S>
void im2col_t(const S* img, std::int64_t cin, std::int64_t h, std::int64_t w,
              std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
              std::int64_t hout, std::int64_t wout, S* colt) {
    const std::int64_t cols = hout * wout;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < cin; ++ci)
        for (std::int64_t r = 0; r < kh; ++r)
            for (std::int64_t q = 0; q < kw; ++q, ++row) {
                S* dst = colt + row * cols;
                for (std::int64_t oh = 0; oh < hout; ++oh) {
                    const std::int64_t ih = oh * stride + r - pad;
                    for (std::int64_t ow = 0; ow < wout; ++ow) {
                        const std::int64_t iw = ow * stride + q - pad;
                        dst[oh * wout + ow] =
                            (ih >= 0 && ih < h && iw >= 0 && iw < w) ? img[(ci * h + ih) * w + iw] : S(0);
                    }
                }
            }
}

template <typename S>
void col2im_t_add(const S* colt, std::int64_t cin, std::int64_t h, std::int64_t w,
                  std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                  std::int64_t hout, std::int64_t wout, S* img) {
    const std::int64_t cols = hout * wout;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < cin; ++ci)
        for (std::int64_t r = 0; r < kh; ++r)
            for (std::int64_t q = 0; q < kw; ++q, ++row) {
                const S* src = colt + row * cols;
                for (std::int64_t oh = 0; oh < hout; ++oh) {
                    const std::int64_t ih = oh * stride + r - pad;
                    if (ih < 0 || ih >= h) continue;
                    for (std::int64_t ow = 0; ow < wout; ++ow) {
                        const std::int64_t iw = ow * stride + q - pad;
                        if (iw >= 0 && iw < w) img[(ci * h + ih) * w + iw] += src[oh * wout + ow];
                    }
                }
            }
}

}  // namespace detail

// x (N x Cin x H x W), w (Cout x Cin x kh x kw), b (Cout)
template <typename S>
TensorPtr<S> conv2d(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b,
                    std::int64_t stride, std::int64_t pad) {
    if (x->shape.size() != 4 || w->shape.size() != 4 || x->shape[1] != w->shape[1])
        throw shape_error(cat("conv2d: input ", shape_str(x->shape), " does not match kernel ", shape_str(w->shape)));
    const std::int64_t n = x->shape[0], cin = x->shape[1], h = x->shape[2], wd = x->shape[3];
    const std::int64_t cout = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (b->numel() != cout)
        throw shape_error(cat("conv2d: bias ", shape_str(b->shape), " does not match kernel ", shape_str(w->shape)));
    const std::int64_t hout = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t wout = (wd + 2 * pad - kw) / stride + 1;
    if (hout < 1 || wout < 1)
        throw shape_error(cat("conv2d: kernel ", shape_str(w->shape), " too large for input ", shape_str(x->shape)));
    const std::int64_t kdim = cin * kh * kw;
    const std::int64_t cols = hout * wout;

    auto out = zeros<S>({n, cout, hout, wout});
    parallel_for(n, [&](std::int64_t i) {
        std::vector<S> colt(static_cast<std::size_t>(kdim * cols));
        detail::im2col_t(x->data.data() + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad, hout, wout,
                         colt.data());
        S* y = out->data.data() + i * cout * cols;
        gemm_nn(cout, cols, kdim, w->data.data(), colt.data(), y);
        for (std::int64_t oc = 0; oc < cout; ++oc) {
            const S bv = b->data[oc];
            S* row = y + oc * cols;
            for (std::int64_t p = 0; p < cols; ++p) row[p] += bv;
        }
    });

    if (detail::record<S>({&x, &w, &b})) {
        out->requires_grad = true;
        out->parents = {x, w, b};
        out->backward_fn = [x, w, b, n, cin, h, wd, cout, kh, kw, stride, pad, hout, wout, kdim,
                            cols](Tensor<S>& o) {
            if (x->requires_grad) x->ensure_grad();
            if (w->requires_grad) w->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            std::vector<S> colt(static_cast<std::size_t>(kdim * cols));
            std::vector<S> dcolt(static_cast<std::size_t>(kdim * cols));
            for (std::int64_t i = 0; i < n; ++i) {
                const S* dy = o.grad.data() + i * cout * cols;
                if (w->requires_grad || x->requires_grad)
                    detail::im2col_t(x->data.data() + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad,
                                     hout, wout, colt.data());
                if (w->requires_grad)
                    gemm_nt(cout, kdim, cols, dy, colt.data(), w->grad.data(), true);
                if (b->requires_grad)
                    for (std::int64_t oc = 0; oc < cout; ++oc) {
                        const S* row = dy + oc * cols;
                        S acc = S(0);
                        for (std::int64_t p = 0; p < cols; ++p) acc += row[p];
                        b->grad[oc] += acc;
                    }
                if (x->requires_grad) {
                    gemm_tn(kdim, cols, cout, w->data.data(), dy, dcolt.data());
                    detail::col2im_t_add(dcolt.data(), cin, h, wd, kh, kw, stride, pad, hout, wout,
                                         x->grad.data() + i * cin * h * wd);
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

template <typename S>
struct BNState {
    std::vector<S> running_mean;
    std::vector<S> running_var;

    explicit BNState(std::int64_t d = 0)
        : running_mean(static_cast<std::size_t>(d), S(0)), running_var(static_cast<std::size_t>(d), S(1)) {}
};

namespace detail {

// Shared core for 1d/2d batch norm: x viewed as M samples x D channels with
// sample stride over the channel axis described by (outer, inner):
// element (m, j) lives at x[(m / inner) * D * inner + j * inner + (m % inner)].
template <typename S>
TensorPtr<S> batch_norm_impl(const TensorPtr<S>& x, const TensorPtr<S>& gamma, const TensorPtr<S>& beta,
                             BNState<S>& state, bool train, S momentum, S eps, std::int64_t d,
                             std::int64_t inner, const char* which) {
    const std::int64_t total = x->numel();
    const std::int64_t m = total / d;
    if (gamma->numel() != d || beta->numel() != d)
        throw shape_error(cat(which, ": gamma/beta dim must be ", d, ", got ", shape_str(gamma->shape), " and ",
                              shape_str(beta->shape)));
    if (static_cast<std::int64_t>(state.running_mean.size()) != d)
        throw shape_error(cat(which, ": running stats dim ", state.running_mean.size(), " != ", d));
    if (train && m < 2)
        throw error(cat(which, ": degenerate batch of ", m, " samples in train mode (need at least 2)"));

    auto idx = [d, inner](std::int64_t s, std::int64_t j) {
        return (s / inner) * d * inner + j * inner + (s % inner);
    };

    std::vector<S> mean(d), invstd(d);
    if (train) {
        for (std::int64_t j = 0; j < d; ++j) {
            S mu = S(0);
            for (std::int64_t s = 0; s < m; ++s) mu += x->data[idx(s, j)];
            mu /= static_cast<S>(m);
            S var = S(0);
            for (std::int64_t s = 0; s < m; ++s) {
                const S dv = x->data[idx(s, j)] - mu;
                var += dv * dv;
            }
            var /= static_cast<S>(m);  // biased
            mean[j] = mu;
            invstd[j] = S(1) / static_cast<S>(std::sqrt(static_cast<double>(var + eps)));
            state.running_mean[j] = (S(1) - momentum) * state.running_mean[j] + momentum * mu;
            state.running_var[j] = (S(1) - momentum) * state.running_var[j] + momentum * var;
        }
    } else {
        for (std::int64_t j = 0; j < d; ++j) {
            mean[j] = state.running_mean[j];
            invstd[j] = S(1) / static_cast<S>(std::sqrt(static_cast<double>(state.running_var[j] + eps)));
        }
    }

    auto out = zeros<S>(x->shape);
    std::vector<S> xhat(static_cast<std::size_t>(total));
    for (std::int64_t j = 0; j < d; ++j) {
        const S mu = mean[j], is = invstd[j], g = gamma->data[j], be = beta->data[j];
        for (std::int64_t s = 0; s < m; ++s) {
            const std::int64_t k = idx(s, j);
            const S xh = (x->data[k] - mu) * is;
            xhat[static_cast<std::size_t>(k)] = xh;
            out->data[k] = g * xh + be;
        }
    }

    if (detail::record<S>({&x, &gamma, &beta})) {
        out->requires_grad = true;
        out->parents = {x, gamma, beta};
        out->backward_fn = [x, gamma, beta, xhat = std::move(xhat), invstd, train, d, m,
                            idx](Tensor<S>& o) {
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (std::int64_t j = 0; j < d; ++j) {
                S sum_dy = S(0), sum_dy_xh = S(0);
                for (std::int64_t s = 0; s < m; ++s) {
                    const std::int64_t k = idx(s, j);
                    sum_dy += o.grad[k];
                    sum_dy_xh += o.grad[k] * xhat[static_cast<std::size_t>(k)];
                }
                if (gamma->requires_grad) gamma->grad[j] += sum_dy_xh;
                if (beta->requires_grad) beta->grad[j] += sum_dy;
                if (!x->requires_grad) continue;
                const S g = gamma->data[j], is = invstd[j];
                if (train) {
                    const S inv_m = S(1) / static_cast<S>(m);
                    for (std::int64_t s = 0; s < m; ++s) {
                        const std::int64_t k = idx(s, j);
                        x->grad[k] += g * is *
                                      (o.grad[k] - inv_m * sum_dy -
                                       xhat[static_cast<std::size_t>(k)] * inv_m * sum_dy_xh);
                    }
                } else {
                    for (std::int64_t s = 0; s < m; ++s) {
                        const std::int64_t k = idx(s, j);
                        x->grad[k] += g * is * o.grad[k];
                    }
                }
            }
        };
    }
    return out;
}

}  // namespace detail

// Per-column batch norm over x (N x D); biased batch variance.
template <typename S>
TensorPtr<S> batch_norm(const TensorPtr<S>& x, const TensorPtr<S>& gamma, const TensorPtr<S>& beta,
                        BNState<S>& state, bool train, S momentum = S(0.1), S eps = S(1e-5)) {
    if (x->shape.size() != 2)
        throw shape_error(cat("batch_norm expects NxD, got ", shape_str(x->shape)));
    return detail::batch_norm_impl(x, gamma, beta, state, train, momentum, eps, x->shape[1], 1,
                                   "batch_norm");
}

// Per-channel batch norm over x (N x C x H x W); stats over N*H*W.
template <typename S>
TensorPtr<S> batch_norm2d(const TensorPtr<S>& x, const TensorPtr<S>& gamma, const TensorPtr<S>& beta,
                          BNState<S>& state, bool train, S momentum = S(0.1), S eps = S(1e-5)) {
    if (x->shape.size() != 4)
        throw shape_error(cat("batch_norm2d expects NxCxHxW, got ", shape_str(x->shape)));
    return detail::batch_norm_impl(x, gamma, beta, state, train, momentum, eps, x->shape[1],
                                   x->shape[2] * x->shape[3], "batch_norm2d");
}

// Layer norm over the last dimension.
template <typename S>
TensorPtr<S> layer_norm(const TensorPtr<S>& x, const TensorPtr<S>& gamma, const TensorPtr<S>& beta,
                        S eps = S(1e-5)) {
    if (x->shape.empty()) throw shape_error("layer_norm on scalar");
    const std::int64_t d = x->shape.back();
    if (gamma->numel() != d || beta->numel() != d)
        throw shape_error(cat("layer_norm: gamma/beta dim must be ", d));
    const std::int64_t rows = x->numel() / d;
    auto out = zeros<S>(x->shape);
    std::vector<S> xhat(static_cast<std::size_t>(x->numel()));
    std::vector<S> invstd(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = x->data.data() + r * d;
        S mu = S(0);
        for (std::int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<S>(d);
        S var = S(0);
        for (std::int64_t j = 0; j < d; ++j) {
            const S dv = row[j] - mu;
            var += dv * dv;
        }
        var /= static_cast<S>(d);
        const S is = S(1) / static_cast<S>(std::sqrt(static_cast<double>(var + eps)));
        invstd[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < d; ++j) {
            const S xh = (row[j] - mu) * is;
            xhat[static_cast<std::size_t>(r * d + j)] = xh;
            out->data[r * d + j] = gamma->data[j] * xh + beta->data[j];
        }
    }
    if (detail::record<S>({&x, &gamma, &beta})) {
        out->requires_grad = true;
        out->parents = {x, gamma, beta};
        out->backward_fn = [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), rows,
                            d](Tensor<S>& o) {
            if (x->requires_grad) x->ensure_grad();
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* dy = o.grad.data() + r * d;
                const S* xh = xhat.data() + r * d;
                S sum_dxh = S(0), sum_dxh_xh = S(0);
                for (std::int64_t j = 0; j < d; ++j) {
                    const S dxh = dy[j] * gamma->data[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[j];
                    if (gamma->requires_grad) gamma->grad[j] += dy[j] * xh[j];
                    if (beta->requires_grad) beta->grad[j] += dy[j];
                }
                if (!x->requires_grad) continue;
                const S is = invstd[static_cast<std::size_t>(r)];
                const S inv_d = S(1) / static_cast<S>(d);
                S* gx = x->grad.data() + r * d;
                for (std::int64_t j = 0; j < d; ++j) {
                    const S dxh = dy[j] * gamma->data[j];
                    gx[j] += is * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
                }
            }
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> softmax_lastdim(const TensorPtr<S>& x) {
    if (x->shape.empty()) throw shape_error("softmax on scalar");
    const std::int64_t d = x->shape.back();
    const std::int64_t rows = x->numel() / d;
    auto out = zeros<S>(x->shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = x->data.data() + r * d;
        S* y = out->data.data() + r * d;
        S mx = row[0];
        for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        S sum = S(0);
        for (std::int64_t j = 0; j < d; ++j) {
            y[j] = static_cast<S>(std::exp(static_cast<double>(row[j] - mx)));
            sum += y[j];
        }
        for (std::int64_t j = 0; j < d; ++j) y[j] /= sum;
    }
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, rows, d](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* y = o.data.data() + r * d;
                const S* dy = o.grad.data() + r * d;
                S dot = S(0);
                for (std::int64_t j = 0; j < d; ++j) dot += dy[j] * y[j];
                S* gx = x->grad.data() + r * d;
                for (std::int64_t j = 0; j < d; ++j) gx[j] += y[j] * (dy[j] - dot);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> reshape(const TensorPtr<S>& x, std::vector<std::int64_t> shape) {
    if (Tensor<S>::numel_of(shape) != x->numel())
        throw shape_error(cat("reshape: ", shape_str(x->shape), " to ", shape_str(shape), " changes element count"));
    auto out = make_tensor<S>(std::move(shape), x->data);
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < o.numel(); ++i) x->grad[i] += o.grad[i];
        };
    }
    return out;
}

// N x C x H x W -> N x (H/p * W/p) x (C*p*p), patches in row-major order.
template <typename S>
TensorPtr<S> extract_patches(const TensorPtr<S>& x, std::int64_t p) {
    if (x->shape.size() != 4)
        throw shape_error(cat("extract_patches expects NxCxHxW, got ", shape_str(x->shape)));
    const std::int64_t n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (h % p != 0 || w % p != 0)
        throw shape_error(cat("extract_patches: spatial ", h, "x", w, " not divisible by patch size ", p));
    const std::int64_t ph = h / p, pw = w / p, t = ph * pw, d = c * p * p;
    auto out = zeros<S>({n, t, d});
    auto src_index = [c, h, w, p, pw](std::int64_t tok, std::int64_t f) {
        const std::int64_t ci = f / (p * p), rem = f % (p * p), r = rem / p, q = rem % p;
        const std::int64_t hh = (tok / pw) * p + r, ww = (tok % pw) * p + q;
        return (ci * h + hh) * w + ww;
    };
    for (std::int64_t i = 0; i < n; ++i) {
        const S* img = x->data.data() + i * c * h * w;
        S* dst = out->data.data() + i * t * d;
        for (std::int64_t tok = 0; tok < t; ++tok)
            for (std::int64_t f = 0; f < d; ++f) dst[tok * d + f] = img[src_index(tok, f)];
    }
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, n, c, h, w, t, d, src_index](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                S* gimg = x->grad.data() + i * c * h * w;
                const S* g = o.grad.data() + i * t * d;
                for (std::int64_t tok = 0; tok < t; ++tok)
                    for (std::int64_t f = 0; f < d; ++f) gimg[src_index(tok, f)] += g[tok * d + f];
            }
        };
    }
    return out;
}

// Prepend a learned token row to every sequence: (D) + (N x T x D) -> N x (T+1) x D.
template <typename S>
TensorPtr<S> prepend_token(const TensorPtr<S>& tok, const TensorPtr<S>& x) {
    if (x->shape.size() != 3)
        throw shape_error(cat("prepend_token expects NxTxD, got ", shape_str(x->shape)));
    const std::int64_t n = x->shape[0], t = x->shape[1], d = x->shape[2];
    if (tok->numel() != d)
        throw shape_error(cat("prepend_token: token dim ", tok->numel(), " != ", d));
    auto out = zeros<S>({n, t + 1, d});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(tok->data.data(), d, out->data.data() + i * (t + 1) * d);
        std::copy_n(x->data.data() + i * t * d, t * d, out->data.data() + i * (t + 1) * d + d);
    }
    if (detail::record<S>({&tok, &x})) {
        out->requires_grad = true;
        out->parents = {tok, x};
        out->backward_fn = [tok, x, n, t, d](Tensor<S>& o) {
            if (tok->requires_grad) {
                tok->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    const S* g = o.grad.data() + i * (t + 1) * d;
                    for (std::int64_t j = 0; j < d; ++j) tok->grad[j] += g[j];
                }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    const S* g = o.grad.data() + i * (t + 1) * d + d;
                    S* gx = x->grad.data() + i * t * d;
                    for (std::int64_t j = 0; j < t * d; ++j) gx[j] += g[j];
                }
            }
        };
    }
    return out;
}

// x (N x T x D) + pos (T x D) broadcast over the batch.
template <typename S>
TensorPtr<S> add_position(const TensorPtr<S>& x, const TensorPtr<S>& pos) {
    if (x->shape.size() != 3 || pos->shape.size() != 2 || pos->shape[0] != x->shape[1] ||
        pos->shape[1] != x->shape[2])
        throw shape_error(cat("add_position: ", shape_str(x->shape), " and ", shape_str(pos->shape)));
    const std::int64_t n = x->shape[0], td = x->shape[1] * x->shape[2];
    auto out = zeros<S>(x->shape);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < td; ++j) out->data[i * td + j] = x->data[i * td + j] + pos->data[j];
    if (detail::record<S>({&x, &pos})) {
        out->requires_grad = true;
        out->parents = {x, pos};
        out->backward_fn = [x, pos, n, td](Tensor<S>& o) {
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::int64_t i = 0; i < n * td; ++i) x->grad[i] += o.grad[i];
            }
            if (pos->requires_grad) {
                pos->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < td; ++j) pos->grad[j] += o.grad[i * td + j];
            }
        };
    }
    return out;
}

// Select one token from every sequence: N x T x D -> N x D.
template <typename S>
TensorPtr<S> select_token(const TensorPtr<S>& x, std::int64_t t) {
    if (x->shape.size() != 3 || t < 0 || t >= x->shape[1])
        throw shape_error(cat("select_token: index ", t, " in ", shape_str(x->shape)));
    const std::int64_t n = x->shape[0], tt = x->shape[1], d = x->shape[2];
    auto out = zeros<S>({n, d});
    for (std::int64_t i = 0; i < n; ++i)
        std::copy_n(x->data.data() + (i * tt + t) * d, d, out->data.data() + i * d);
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, n, tt, d, t](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const S* g = o.grad.data() + i * d;
                S* gx = x->grad.data() + (i * tt + t) * d;
                for (std::int64_t j = 0; j < d; ++j) gx[j] += g[j];
            }
        };
    }
    return out;
}

// N x T x (H*dh) -> (N*H) x T x dh
template <typename S>
TensorPtr<S> split_heads(const TensorPtr<S>& x, std::int64_t heads) {
    if (x->shape.size() != 3 || x->shape[2] % heads != 0)
        throw shape_error(cat("split_heads: ", shape_str(x->shape), " with ", heads, " heads"));
    const std::int64_t n = x->shape[0], t = x->shape[1], d = x->shape[2], dh = d / heads;
    auto out = zeros<S>({n * heads, t, dh});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t hh = 0; hh < heads; ++hh)
            for (std::int64_t tok = 0; tok < t; ++tok)
                std::copy_n(x->data.data() + (i * t + tok) * d + hh * dh, dh,
                            out->data.data() + ((i * heads + hh) * t + tok) * dh);
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, n, t, d, dh, heads](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t hh = 0; hh < heads; ++hh)
                    for (std::int64_t tok = 0; tok < t; ++tok) {
                        const S* g = o.grad.data() + ((i * heads + hh) * t + tok) * dh;
                        S* gx = x->grad.data() + (i * t + tok) * d + hh * dh;
                        for (std::int64_t j = 0; j < dh; ++j) gx[j] += g[j];
                    }
        };
    }
    return out;
}

// (N*H) x T x dh -> N x T x (H*dh)
template <typename S>
TensorPtr<S> merge_heads(const TensorPtr<S>& x, std::int64_t heads) {
    if (x->shape.size() != 3 || x->shape[0] % heads != 0)
        throw shape_error(cat("merge_heads: ", shape_str(x->shape), " with ", heads, " heads"));
    const std::int64_t n = x->shape[0] / heads, t = x->shape[1], dh = x->shape[2], d = dh * heads;
    auto out = zeros<S>({n, t, d});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t hh = 0; hh < heads; ++hh)
            for (std::int64_t tok = 0; tok < t; ++tok)
                std::copy_n(x->data.data() + ((i * heads + hh) * t + tok) * dh, dh,
                            out->data.data() + (i * t + tok) * d + hh * dh);
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, n, t, d, dh, heads](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t hh = 0; hh < heads; ++hh)
                    for (std::int64_t tok = 0; tok < t; ++tok) {
                        const S* g = o.grad.data() + (i * t + tok) * d + hh * dh;
                        S* gx = x->grad.data() + ((i * heads + hh) * t + tok) * dh;
                        for (std::int64_t j = 0; j < dh; ++j) gx[j] += g[j];
                    }
        };
    }
    return out;
}

// Batched C_b = A_b * B_b^T; a (B x T x d), b (B x U x d) -> B x T x U
template <typename S>
TensorPtr<S> bmm_nt(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != 3 || b->shape.size() != 3 || a->shape[0] != b->shape[0] ||
        a->shape[2] != b->shape[2])
        throw shape_error(cat("bmm_nt: ", shape_str(a->shape), " and ", shape_str(b->shape)));
    const std::int64_t bs = a->shape[0], t = a->shape[1], u = b->shape[1], d = a->shape[2];
    auto out = zeros<S>({bs, t, u});
    for (std::int64_t i = 0; i < bs; ++i)
        gemm_nt(t, u, d, a->data.data() + i * t * d, b->data.data() + i * u * d,
                out->data.data() + i * t * u);
    if (detail::record<S>({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b, bs, t, u, d](Tensor<S>& o) {
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (std::int64_t i = 0; i < bs; ++i) {
                const S* dc = o.grad.data() + i * t * u;
                if (a->requires_grad)
                    gemm_nn(t, d, u, dc, b->data.data() + i * u * d, a->grad.data() + i * t * d, true);
                if (b->requires_grad)
                    gemm_tn(u, d, t, dc, a->data.data() + i * t * d, b->grad.data() + i * u * d, true);
            }
        };
    }
    return out;
}

// Batched C_b = A_b * B_b; a (B x T x U), b (B x U x d) -> B x T x d
template <typename S>
TensorPtr<S> bmm_nn(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != 3 || b->shape.size() != 3 || a->shape[0] != b->shape[0] ||
        a->shape[2] != b->shape[1])
        throw shape_error(cat("bmm_nn: ", shape_str(a->shape), " and ", shape_str(b->shape)));
    const std::int64_t bs = a->shape[0], t = a->shape[1], u = a->shape[2], d = b->shape[2];
    auto out = zeros<S>({bs, t, d});
    for (std::int64_t i = 0; i < bs; ++i)
        gemm_nn(t, d, u, a->data.data() + i * t * u, b->data.data() + i * u * d,
                out->data.data() + i * t * d);
    if (detail::record<S>({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a, b};
        out->backward_fn = [a, b, bs, t, u, d](Tensor<S>& o) {
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (std::int64_t i = 0; i < bs; ++i) {
                const S* dc = o.grad.data() + i * t * d;
                if (a->requires_grad)
                    gemm_nt(t, u, d, dc, b->data.data() + i * u * d, a->grad.data() + i * t * u, true);
                if (b->requires_grad)
                    gemm_tn(u, d, t, a->data.data() + i * t * u, dc, b->grad.data() + i * u * d, true);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// lookup / gating
// ---------------------------------------------------------------------------

// Row lookup with scatter-add backward into the table.
template <typename S>
TensorPtr<S> embed_rows(const TensorPtr<S>& table, const std::vector<std::int64_t>& indices) {
    if (table->shape.size() != 2)
        throw shape_error(cat("embed_rows expects RxD table, got ", shape_str(table->shape)));
    const std::int64_t r = table->shape[0], d = table->shape[1];
    for (std::size_t i = 0; i < indices.size(); ++i)
        if (indices[i] < 0 || indices[i] >= r)
            throw error(cat("embed_rows: index ", indices[i], " at position ", i, " out of range [0,", r, ")"));
    const auto n = static_cast<std::int64_t>(indices.size());
    auto out = zeros<S>({n, d});
    for (std::int64_t i = 0; i < n; ++i)
        std::copy_n(table->data.data() + indices[i] * d, d, out->data.data() + i * d);
    if (detail::record<S>({&table})) {
        out->requires_grad = true;
        out->parents = {table};
        out->backward_fn = [table, indices, n, d](Tensor<S>& o) {
            table->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const S* g = o.grad.data() + i * d;
                S* gt = table->grad.data() + indices[i] * d;
                for (std::int64_t j = 0; j < d; ++j) gt[j] += g[j];
            }
        };
    }
    return out;
}

// Grouped adaptive gate: out[n,c] = y[n,c] * (1 + w[0] + w[1 + group(c)]),
// with G contiguous channel groups. w holds G+1 learnable scalars.
template <typename S>
TensorPtr<S> group_gate(const TensorPtr<S>& y, const TensorPtr<S>& w, std::int64_t groups) {
    if (y->shape.size() != 2)
        throw shape_error(cat("group_gate expects NxD, got ", shape_str(y->shape)));
    const std::int64_t n = y->shape[0], d = y->shape[1];
    if (groups < 1 || d % groups != 0)
        throw shape_error(cat("group_gate: feature dim ", d, " not divisible by ", groups, " groups"));
    if (w->numel() != groups + 1)
        throw shape_error(cat("group_gate: weight count ", w->numel(), " != groups+1 = ", groups + 1));
    std::vector<S> factor(static_cast<std::size_t>(d));
    for (std::int64_t c = 0; c < d; ++c)
        factor[static_cast<std::size_t>(c)] = S(1) + w->data[0] + w->data[1 + c * groups / d];
    auto out = zeros<S>({n, d});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < d; ++c)
            out->data[i * d + c] = y->data[i * d + c] * factor[static_cast<std::size_t>(c)];
    if (detail::record<S>({&y, &w})) {
        out->requires_grad = true;
        out->parents = {y, w};
        out->backward_fn = [y, w, factor = std::move(factor), n, d, groups](Tensor<S>& o) {
            if (y->requires_grad) {
                y->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t c = 0; c < d; ++c)
                        y->grad[i * d + c] += o.grad[i * d + c] * factor[static_cast<std::size_t>(c)];
            }
            if (w->requires_grad) {
                w->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t c = 0; c < d; ++c) {
                        const S gy = o.grad[i * d + c] * y->data[i * d + c];
                        w->grad[0] += gy;
                        w->grad[1 + c * groups / d] += gy;
                    }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> sum_all(const TensorPtr<S>& x) {
    S acc = S(0);
    for (const S& v : x->data) acc += v;
    auto out = make_tensor<S>({1}, {acc});
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < x->numel(); ++i) x->grad[i] += o.grad[0];
        };
    }
    return out;
}

template <typename S>
TensorPtr<S> mean_all(const TensorPtr<S>& x) {
    S acc = S(0);
    for (const S& v : x->data) acc += v;
    const S inv = S(1) / static_cast<S>(x->numel());
    auto out = make_tensor<S>({1}, {acc * inv});
    if (detail::record<S>({&x})) {
        out->requires_grad = true;
        out->parents = {x};
        out->backward_fn = [x, inv](Tensor<S>& o) {
            x->ensure_grad();
            for (std::int64_t i = 0; i < x->numel(); ++i) x->grad[i] += o.grad[0] * inv;
        };
    }
    return out;
}

}  // namespace csen::ops
