#pragma once

#include <binspot/binarizer.hpp>
#include <binspot/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace binspot {

/// A named learnable (or buffered) array with its gradient and SGD velocity.
struct Param {
    std::string name;
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    std::vector<Real> velocity;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Shape s, bool is_trainable = true)
        : name(std::move(n)), shape(std::move(s)), value(shape_size(shape), 0), grad(value.size(), 0),
          velocity(value.size(), 0), trainable(is_trainable) {}

    std::size_t size() const noexcept { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), Real{0}); }
};

inline void init_uniform(Param& p, Real bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<Real> dist(-bound, bound);
    for (Real& v : p.value) v = dist(rng);
}

// ---------------------------------------------------------------------------
// Dense kernels. Loop orders are fixed so results are reproducible bit for bit.
// ---------------------------------------------------------------------------

namespace detail {

// C[m×n] += A[m×k] · B[k×n]
inline void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        const Real* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = ai[p];
            if (av == 0) continue;
            const Real* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m×n] += A[k×m]ᵀ · B[k×n]
inline void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t k, std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const Real* ap = a + p * m;
        const Real* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const Real av = ap[i];
            if (av == 0) continue;
            Real* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

inline std::vector<Real> transpose(std::span<const Real> a, std::size_t rows, std::size_t cols) {
    std::vector<Real> t(a.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
    return t;
}

}  // namespace detail

/// Quantization behaviour shared by every binarized unit of a model.
struct QuantMode {
    bool binarize = true;
    bool dual = true;
    bool surrogate = false;

    ActQuantSpec act(bool unit_binarized) const { return {binarize && unit_binarized, dual, surrogate}; }
};

inline LpbParams lpb_of(const Param& p) { return {p.value[0], p.value[1]}; }

// ---------------------------------------------------------------------------
// Linear: y = Q(x) · Q(W)ᵀ + b
// ---------------------------------------------------------------------------

class Linear {
public:
    Param weight, bias, lpb;
    std::size_t in = 0, out = 0;
    bool binarized = false;

    struct Cache {
        ActQuantCache act;
        WeightQuantCache wq;
        std::vector<Real> weff;  // out × in
        Tensor xq;               // rows × in, the quantized input
        bool binarized = false;
    };

    Linear() = default;
    Linear(const std::string& name, std::size_t in_dim, std::size_t out_dim, bool is_binarized)
        : weight(name + ".weight", {out_dim, in_dim}), bias(name + ".bias", {out_dim}),
          lpb(name + ".lpb", {2}), in(in_dim), out(out_dim), binarized(is_binarized) {
        lpb.value = {0, 1};
    }

    void init(std::mt19937_64& rng) { init_uniform(weight, 1 / std::sqrt(static_cast<Real>(in)), rng); }

    /// x is rows × in; each run of `rows_per_group` rows is one quantization group.
    Tensor forward(const Tensor& x, std::size_t rows_per_group, const QuantMode& mode, Cache& c) const {
        detail::require_shape(x.rank() == 2 && x.cols() == in, "linear: input width mismatch");
        const std::size_t rows = x.rows();
        const ActQuantSpec spec = mode.act(binarized);
        c.binarized = spec.binarize;
        c.xq = Tensor({rows, in});
        c.act = quantize_activations(x.data(), rows_per_group * in, lpb_of(lpb), spec, c.xq.data());
        c.weff.assign(weight.size(), 0);
        if (spec.binarize) {
            c.wq = quantize_weights(weight.value, out, in, mode.surrogate, c.weff);
        } else {
            c.weff = weight.value;
        }
        Tensor y({rows, out});
        if (spec.binarize && !mode.surrogate) {
            // Hard mode: accumulate against the bare signs and scale afterwards, as the packed kernel does.
            const std::vector<Real> wt = detail::transpose(weight_signs(c.wq), out, in);
            detail::gemm_nn(c.xq.data().data(), wt.data(), y.data().data(), rows, in, out);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < out; ++o) y.at(r, o) = c.wq.alpha[o] * y.at(r, o) + bias.value[o];
            return y;
        }
        const std::vector<Real> wt = detail::transpose(c.weff, out, in);
        for (std::size_t r = 0; r < rows; ++r) std::copy(bias.value.begin(), bias.value.end(), y.row(r).begin());
        detail::gemm_nn(c.xq.data().data(), wt.data(), y.data().data(), rows, in, out);
        return y;
    }

    Tensor backward(const Cache& c, const Tensor& dy) {
        const std::size_t rows = dy.rows();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out; ++o) bias.grad[o] += dy.at(r, o);
        std::vector<Real> dweff(weight.size(), 0);
        detail::gemm_tn(dy.data().data(), c.xq.data().data(), dweff.data(), rows, out, in);
        if (c.binarized) {
            quantize_weights_backward(c.wq, weight.value, dweff, weight.grad);
        } else {
            for (std::size_t i = 0; i < dweff.size(); ++i) weight.grad[i] += dweff[i];
        }
        std::vector<Real> dxq(rows * in, 0);
        detail::gemm_nn(dy.data().data(), c.weff.data(), dxq.data(), rows, out, in);
        ActQuantGrads g = quantize_activations_backward(c.act, dxq);
        if (c.binarized) {
            lpb.grad[0] += g.grad_theta;
            lpb.grad[1] += g.grad_r;
        }
        return Tensor({rows, in}, std::move(g.grad_a));
    }
};

// ---------------------------------------------------------------------------
// Conv2d over (B, C, H, W) via im2col.
// ---------------------------------------------------------------------------

class Conv2d {
public:
    Param weight, bias, lpb;
    std::size_t in = 0, out = 0, kernel = 3, stride = 1, pad = 0;
    bool binarized = false;

    struct Geometry {
        std::size_t batch, h, w, ho, wo;
        std::size_t patches() const { return ho * wo; }
    };

    struct Cache {
        ActQuantCache act;
        WeightQuantCache wq;
        std::vector<Real> weff;  // out × (in·k·k)
        std::vector<Real> cols;  // (B·P) × (in·k·k)
        Geometry geo{};
        bool binarized = false;
    };

    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t s,
           std::size_t p, bool is_binarized)
        : weight(name + ".weight", {out_ch, in_ch, k, k}), bias(name + ".bias", {out_ch}),
          lpb(name + ".lpb", {2}), in(in_ch), out(out_ch), kernel(k), stride(s), pad(p),
          binarized(is_binarized) {
        lpb.value = {0, 1};
    }

    std::size_t patch_len() const { return in * kernel * kernel; }

    std::size_t out_extent(std::size_t n) const {
        detail::require(n + 2 * pad >= kernel, "conv2d: input smaller than kernel");
        return (n + 2 * pad - kernel) / stride + 1;
    }

    void init(std::mt19937_64& rng) { init_uniform(weight, 1 / std::sqrt(static_cast<Real>(patch_len())), rng); }

    /// Rows are output positions (b, y, x); columns follow the (c, ky, kx) weight layout.
    /// Padding taps are left at zero.
    template <class T>
    void im2col(std::span<const T> x, const Geometry& g, std::span<T> cols) const {
        const std::size_t kl = patch_len();
        std::fill(cols.begin(), cols.end(), T{});
        for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t oy = 0; oy < g.ho; ++oy)
                for (std::size_t ox = 0; ox < g.wo; ++ox) {
                    T* row = cols.data() + ((b * g.ho + oy) * g.wo + ox) * kl;
                    for (std::size_t c = 0; c < in; ++c)
                        for (std::size_t ky = 0; ky < kernel; ++ky) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                            for (std::size_t kx = 0; kx < kernel; ++kx) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                                row[(c * kernel + ky) * kernel + kx] =
                                    x[((b * in + c) * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)];
                            }
                        }
                }
    }

    Geometry geometry(const Tensor& x) const {
        detail::require_shape(x.rank() == 4 && x.dim(1) == in, "conv2d: expected (B, C, H, W) input");
        return {x.dim(0), x.dim(2), x.dim(3), out_extent(x.dim(2)), out_extent(x.dim(3))};
    }

    Tensor forward(const Tensor& x, const QuantMode& mode, Cache& c) const {
        const Geometry g = geometry(x);
        const ActQuantSpec spec = mode.act(binarized);
        c.geo = g;
        c.binarized = spec.binarize;
        std::vector<Real> xq(x.size());
        c.act = quantize_activations(x.data(), in * g.h * g.w, lpb_of(lpb), spec, xq);
        const std::size_t kl = patch_len(), rows = g.batch * g.patches();
        c.cols.assign(rows * kl, 0);
        im2col<Real>(xq, g, c.cols);
        c.weff.assign(weight.size(), 0);
        if (spec.binarize) {
            c.wq = quantize_weights(weight.value, out, kl, mode.surrogate, c.weff);
        } else {
            c.weff = weight.value;
        }
        const bool hard = spec.binarize && !mode.surrogate;
        const std::vector<Real> wt = detail::transpose(hard ? weight_signs(c.wq) : c.weff, out, kl);
        std::vector<Real> y(rows * out, 0);
        detail::gemm_nn(c.cols.data(), wt.data(), y.data(), rows, kl, out);
        Tensor o({g.batch, out, g.ho, g.wo});
        const std::size_t P = g.patches();
        for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t oc = 0; oc < out; ++oc) {
                    const Real acc = y[(b * P + p) * out + oc];
                    o[(b * out + oc) * P + p] = (hard ? c.wq.alpha[oc] * acc : acc) + bias.value[oc];
                }
        return o;
    }

    Tensor backward(const Cache& c, const Tensor& dout) {
        const Geometry& g = c.geo;
        const std::size_t P = g.patches(), kl = patch_len(), rows = g.batch * P;
        std::vector<Real> dy(rows * out);
        for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t oc = 0; oc < out; ++oc)
                for (std::size_t p = 0; p < P; ++p) {
                    const Real v = dout[(b * out + oc) * P + p];
                    dy[(b * P + p) * out + oc] = v;
                    bias.grad[oc] += v;
                }
        std::vector<Real> dweff(weight.size(), 0);
        detail::gemm_tn(dy.data(), c.cols.data(), dweff.data(), rows, out, kl);
        if (c.binarized) {
            quantize_weights_backward(c.wq, weight.value, dweff, weight.grad);
        } else {
            for (std::size_t i = 0; i < dweff.size(); ++i) weight.grad[i] += dweff[i];
        }
        std::vector<Real> dcols(rows * kl, 0);
        detail::gemm_nn(dy.data(), c.weff.data(), dcols.data(), rows, out, kl);
        std::vector<Real> dxq(g.batch * in * g.h * g.w, 0);
        for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t oy = 0; oy < g.ho; ++oy)
                for (std::size_t ox = 0; ox < g.wo; ++ox) {
                    const Real* row = dcols.data() + ((b * g.ho + oy) * g.wo + ox) * kl;
                    for (std::size_t ch = 0; ch < in; ++ch)
                        for (std::size_t ky = 0; ky < kernel; ++ky) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                            for (std::size_t kx = 0; kx < kernel; ++kx) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                                dxq[((b * in + ch) * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                                    row[(ch * kernel + ky) * kernel + kx];
                            }
                        }
                }
        ActQuantGrads gq = quantize_activations_backward(c.act, dxq);
        if (c.binarized) {
            lpb.grad[0] += gq.grad_theta;
            lpb.grad[1] += gq.grad_r;
        }
        return Tensor({g.batch, in, g.h, g.w}, std::move(gq.grad_a));
    }
};

// ---------------------------------------------------------------------------
// Batch normalization over (outer, C, inner) layouts.
//   block activations: outer = rows, inner = 1
//   feature maps:      outer = batch, inner = H·W
// ---------------------------------------------------------------------------

struct ChannelLayout {
    std::size_t outer = 0, channels = 0, inner = 1;
    std::size_t index(std::size_t o, std::size_t c, std::size_t i) const { return (o * channels + c) * inner + i; }
    std::size_t per_channel() const { return outer * inner; }
};

class BatchNorm {
public:
    static constexpr Real kEps = 1e-5;
    static constexpr Real kMomentum = 0.1;

    Param gamma, beta, running_mean, running_var;
    std::size_t channels = 0;

    struct Cache {
        ChannelLayout layout;
        bool train = false;
        std::vector<Real> xhat;
        std::vector<Real> inv_std;     // per channel
        std::vector<Real> batch_mean;  // per channel (train only)
        std::vector<Real> batch_var;   // biased, per channel (train only)
    };

    BatchNorm() = default;
    BatchNorm(const std::string& name, std::size_t ch)
        : gamma(name + ".gamma", {ch}), beta(name + ".beta", {ch}),
          running_mean(name + ".running_mean", {ch}, false), running_var(name + ".running_var", {ch}, false),
          channels(ch) {
        std::fill(gamma.value.begin(), gamma.value.end(), Real{1});
        std::fill(running_var.value.begin(), running_var.value.end(), Real{1});
    }

    Tensor forward(const Tensor& x, const ChannelLayout& l, bool train, Cache& c) const {
        detail::require_shape(l.channels == channels && x.size() == l.outer * l.channels * l.inner,
                              "batchnorm: layout mismatch");
        c.layout = l;
        c.train = train;
        c.inv_std.assign(channels, 0);
        c.xhat.assign(x.size(), 0);
        const std::size_t n = l.per_channel();
        if (train) {
            detail::require(n > 1, "batchnorm: training needs more than one value per channel");
            c.batch_mean.assign(channels, 0);
            c.batch_var.assign(channels, 0);
        }
        Tensor y(x.shape());
        for (std::size_t ch = 0; ch < channels; ++ch) {
            Real mean = running_mean.value[ch], var = running_var.value[ch];
            if (train) {
                Real s = 0;
                for (std::size_t o = 0; o < l.outer; ++o)
                    for (std::size_t i = 0; i < l.inner; ++i) s += x[l.index(o, ch, i)];
                mean = s / static_cast<Real>(n);
                Real v = 0;
                for (std::size_t o = 0; o < l.outer; ++o)
                    for (std::size_t i = 0; i < l.inner; ++i) {
                        const Real d = x[l.index(o, ch, i)] - mean;
                        v += d * d;
                    }
                var = v / static_cast<Real>(n);
                c.batch_mean[ch] = mean;
                c.batch_var[ch] = var;
            }
            const Real inv = 1 / std::sqrt(var + kEps);
            c.inv_std[ch] = inv;
            const Real gm = gamma.value[ch], bt = beta.value[ch];
            for (std::size_t o = 0; o < l.outer; ++o)
                for (std::size_t i = 0; i < l.inner; ++i) {
                    const std::size_t k = l.index(o, ch, i);
                    const Real xh = (x[k] - mean) * inv;
                    c.xhat[k] = xh;
                    y[k] = gm * xh + bt;
                }
        }
        return y;
    }

    Tensor backward(const Cache& c, const Tensor& dy) {
        const ChannelLayout& l = c.layout;
        const std::size_t n = l.per_channel();
        Tensor dx(dy.shape());
        for (std::size_t ch = 0; ch < channels; ++ch) {
            Real sum_dy = 0, sum_dy_xh = 0;
            for (std::size_t o = 0; o < l.outer; ++o)
                for (std::size_t i = 0; i < l.inner; ++i) {
                    const std::size_t k = l.index(o, ch, i);
                    sum_dy += dy[k];
                    sum_dy_xh += dy[k] * c.xhat[k];
                }
            gamma.grad[ch] += sum_dy_xh;
            beta.grad[ch] += sum_dy;
            const Real scale = gamma.value[ch] * c.inv_std[ch];
            for (std::size_t o = 0; o < l.outer; ++o)
                for (std::size_t i = 0; i < l.inner; ++i) {
                    const std::size_t k = l.index(o, ch, i);
                    if (c.train) {
                        dx[k] = scale * (dy[k] - sum_dy / static_cast<Real>(n) -
                                         c.xhat[k] * sum_dy_xh / static_cast<Real>(n));
                    } else {
                        dx[k] = scale * dy[k];
                    }
                }
        }
        return dx;
    }

    /// Folds the batch statistics of a training forward into the running estimates.
    void commit(const Cache& c) {
        if (!c.train) return;
        const Real n = static_cast<Real>(c.layout.per_channel());
        for (std::size_t ch = 0; ch < channels; ++ch) {
            running_mean.value[ch] = (1 - kMomentum) * running_mean.value[ch] + kMomentum * c.batch_mean[ch];
            running_var.value[ch] =
                (1 - kMomentum) * running_var.value[ch] + kMomentum * c.batch_var[ch] * n / (n - 1);
        }
    }
};

// ---------------------------------------------------------------------------
// PReLU with one slope per channel.
// ---------------------------------------------------------------------------

class PRelu {
public:
    Param slope;
    std::size_t channels = 0;

    struct Cache {
        ChannelLayout layout;
        std::vector<Real> x;
        std::vector<std::uint8_t> positive;
    };

    PRelu() = default;
    PRelu(const std::string& name, std::size_t ch, Real init = 0.25) : slope(name + ".slope", {ch}), channels(ch) {
        std::fill(slope.value.begin(), slope.value.end(), init);
    }

    Tensor forward(const Tensor& x, const ChannelLayout& l, Cache& c) const {
        detail::require_shape(l.channels == channels && x.size() == l.outer * l.channels * l.inner,
                              "prelu: layout mismatch");
        c.layout = l;
        c.x = x.storage();
        c.positive.assign(x.size(), 0);
        Tensor y(x.shape());
        for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t ch = 0; ch < channels; ++ch)
                for (std::size_t i = 0; i < l.inner; ++i) {
                    const std::size_t k = l.index(o, ch, i);
                    const bool pos = branch(x[k] >= 0);
                    c.positive[k] = pos;
                    y[k] = pos ? x[k] : slope.value[ch] * x[k];
                }
        return y;
    }

    Tensor backward(const Cache& c, const Tensor& dy) {
        const ChannelLayout& l = c.layout;
        Tensor dx(dy.shape());
        for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t ch = 0; ch < channels; ++ch)
                for (std::size_t i = 0; i < l.inner; ++i) {
                    const std::size_t k = l.index(o, ch, i);
                    if (c.positive[k]) {
                        dx[k] = dy[k];
                    } else {
                        dx[k] = slope.value[ch] * dy[k];
                        slope.grad[ch] += dy[k] * c.x[k];
                    }
                }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// FSMN memory: depthwise temporal taps over binarized projected frames.
// ---------------------------------------------------------------------------

struct MemoryBlockConfig {
    std::size_t n1 = 8;  ///< look-back order
    std::size_t n2 = 2;  ///< lookahead order
    std::size_t s1 = 1;  ///< look-back stride
    std::size_t s2 = 1;  ///< lookahead stride

    std::size_t taps() const { return n1 + 1 + n2; }

    void validate() const { detail::require(s1 >= 1 && s2 >= 1, "memory block strides must be >= 1"); }

    friend bool operator==(const MemoryBlockConfig&, const MemoryBlockConfig&) = default;
};

class MemoryBlock {
public:
    Param taps, lpb;
    MemoryBlockConfig cfg;
    std::size_t dim = 0;
    bool binarized = false;

    struct Cache {
        ActQuantCache act;
        WeightQuantCache wq;
        std::vector<Real> weff;  // taps × dim
        Tensor pq;               // quantized p, rows × dim
        std::size_t frames = 0;
        bool binarized = false;
    };

    MemoryBlock() = default;
    MemoryBlock(const std::string& name, std::size_t d, const MemoryBlockConfig& m, bool is_binarized)
        : taps(name + ".taps", {m.taps(), d}), lpb(name + ".lpb", {2}), cfg(m), dim(d), binarized(is_binarized) {
        lpb.value = {0, 1};
    }

    void init(std::mt19937_64& rng) { init_uniform(taps, 1 / std::sqrt(static_cast<Real>(cfg.taps())), rng); }

    /// Source frame of tap `k` for output frame t, or -1 when outside [0, frames).
    std::ptrdiff_t source(std::size_t k, std::size_t t, std::size_t frames) const {
        std::ptrdiff_t s;
        if (k <= cfg.n1) {
            s = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(k * cfg.s1);
        } else {
            s = static_cast<std::ptrdiff_t>(t + (k - cfg.n1) * cfg.s2);
        }
        return (s < 0 || s >= static_cast<std::ptrdiff_t>(frames)) ? -1 : s;
    }

    /// p̃ = Σ taps ⊙ Q(p) shifted in time + skip + p, for rows laid out (b, t).
    Tensor forward(const Tensor& p, const Tensor& skip, std::size_t frames, const QuantMode& mode, Cache& c) const {
        detail::require_shape(p.rank() == 2 && p.cols() == dim && p.shape() == skip.shape(),
                              "memory block: input shape mismatch");
        detail::require(frames > 0 && p.rows() % frames == 0, "memory block: rows not a multiple of frames");
        const ActQuantSpec spec = mode.act(binarized);
        c.binarized = spec.binarize;
        c.frames = frames;
        c.pq = Tensor(p.shape());
        c.act = quantize_activations(p.data(), frames * dim, lpb_of(lpb), spec, c.pq.data());
        c.weff.assign(taps.size(), 0);
        if (spec.binarize) {
            c.wq = quantize_weights(taps.value, cfg.taps(), dim, mode.surrogate, c.weff);
        } else {
            c.weff = taps.value;
        }
        Tensor y(p.shape());
        const std::size_t batch = p.rows() / frames;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < frames; ++t) {
                Real* yr = y.data().data() + (b * frames + t) * dim;
                for (std::size_t k = 0; k < cfg.taps(); ++k) {
                    const std::ptrdiff_t s = source(k, t, frames);
                    if (s < 0) continue;
                    const Real* q = c.pq.data().data() + (b * frames + static_cast<std::size_t>(s)) * dim;
                    const Real* w = c.weff.data() + k * dim;
                    for (std::size_t d = 0; d < dim; ++d) yr[d] += w[d] * q[d];
                }
                const std::size_t r = b * frames + t;
                for (std::size_t d = 0; d < dim; ++d) yr[d] += skip.at(r, d) + p.at(r, d);
            }
        return y;
    }

    /// Returns dL/dp; the skip gradient equals dy and is left to the caller.
    Tensor backward(const Cache& c, const Tensor& dy) {
        const std::size_t frames = c.frames, batch = dy.rows() / frames;
        std::vector<Real> dweff(taps.size(), 0);
        std::vector<Real> dq(dy.size(), 0);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < frames; ++t) {
                const Real* g = dy.data().data() + (b * frames + t) * dim;
                for (std::size_t k = 0; k < cfg.taps(); ++k) {
                    const std::ptrdiff_t s = source(k, t, frames);
                    if (s < 0) continue;
                    const std::size_t sr = (b * frames + static_cast<std::size_t>(s)) * dim;
                    const Real* q = c.pq.data().data() + sr;
                    const Real* w = c.weff.data() + k * dim;
                    Real* dw = dweff.data() + k * dim;
                    for (std::size_t d = 0; d < dim; ++d) {
                        dw[d] += g[d] * q[d];
                        dq[sr + d] += g[d] * w[d];
                    }
                }
            }
        if (c.binarized) {
            quantize_weights_backward(c.wq, taps.value, dweff, taps.grad);
        } else {
            for (std::size_t i = 0; i < dweff.size(); ++i) taps.grad[i] += dweff[i];
        }
        ActQuantGrads gq = quantize_activations_backward(c.act, dq);
        if (c.binarized) {
            lpb.grad[0] += gq.grad_theta;
            lpb.grad[1] += gq.grad_r;
        }
        Tensor dp(dy.shape(), std::move(gq.grad_a));
        for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += dy[i];
        return dp;
    }
};

}  // namespace binspot
