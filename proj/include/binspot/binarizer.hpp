#pragma once

#include <binspot/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace binspot {

// ---------------------------------------------------------------------------
// Branch tape
//
// Binarizers, clip windows and PReLU all make discrete decisions. A finite
// difference probe that nudges a parameter can flip one of them and produce
// a jump that has nothing to do with the gradient being checked. While a
// tape is active in replay mode every decision is read back from the tape,
// so the probed function is smooth around the recorded point.
// ---------------------------------------------------------------------------

class BranchTape {
public:
    enum class Mode { record, replay };

    void start_record() {
        bits_.clear();
        pos_ = 0;
        mode_ = Mode::record;
    }
    void start_replay() {
        pos_ = 0;
        mode_ = Mode::replay;
    }

    bool decide(bool live) {
        if (mode_ == Mode::record) {
            bits_.push_back(live ? 1 : 0);
            return live;
        }
        if (pos_ >= bits_.size()) throw Error("branch tape exhausted: replayed graph differs from recording");
        return bits_[pos_++] != 0;
    }

    std::size_t size() const noexcept { return bits_.size(); }

private:
    Mode mode_ = Mode::record;
    std::vector<std::uint8_t> bits_;
    std::size_t pos_ = 0;
};

namespace detail {
inline BranchTape*& active_tape() {
    thread_local BranchTape* tape = nullptr;
    return tape;
}
}  // namespace detail

/// Activates `tape` for the current thread for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(BranchTape& tape) : prev_(detail::active_tape()) { detail::active_tape() = &tape; }
    ~TapeScope() { detail::active_tape() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    BranchTape* prev_;
};

inline bool branch(bool live) {
    BranchTape* t = detail::active_tape();
    return t ? t->decide(live) : live;
}

// ---------------------------------------------------------------------------
// Elementwise binarizers
// ---------------------------------------------------------------------------

inline Real sign_of(Real x) noexcept { return x >= 0 ? Real{1} : Real{-1}; }

/// +1 where x >= 0, −1 elsewhere (sign(0) = +1).
inline Tensor sign_binarize(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = sign_of(x[i]);
    return out;
}

/// Straight-through estimator: passes grad_out where |x| <= 1.
inline Tensor ste_backward(const Tensor& grad_out, const Tensor& x) {
    detail::require_shape(grad_out.shape() == x.shape(), "ste_backward: shape mismatch");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::abs(x[i]) <= 1 ? grad_out[i] : Real{0};
    return out;
}

/// Per-output-channel weight scale mean(|w|). Rank-2 tensors are grouped by
/// row; rank-1 tensors form one group.
inline std::vector<Real> weight_scale(const Tensor& w) {
    detail::require(w.rank() == 1 || w.rank() == 2, "weight_scale expects rank 1 or 2");
    const std::size_t rows = w.rank() == 2 ? w.dim(0) : 1;
    const std::size_t cols = w.rank() == 2 ? w.dim(1) : w.dim(0);
    detail::require(cols > 0, "weight_scale: empty group");
    std::vector<Real> alpha(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        Real s = 0;
        for (std::size_t c = 0; c < cols; ++c) s += std::abs(w[r * cols + c]);
        alpha[r] = s / static_cast<Real>(cols);
    }
    return alpha;
}

struct DualScaleResult {
    Tensor b1;
    Tensor b2_signs;
    Real alpha2 = 0;

    Tensor reconstruct() const {
        Tensor out(b1.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = b1[i] + alpha2 * b2_signs[i];
        return out;
    }
};

/// b1 = sign(a); e = a − b1; alpha2 = mean|e|; b2 = sign(e).
inline DualScaleResult dual_scale_binarize(const Tensor& a) {
    DualScaleResult r{Tensor(a.shape()), Tensor(a.shape()), 0};
    Real sum_abs = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        r.b1[i] = sign_of(a[i]);
        const Real e = a[i] - r.b1[i];
        r.b2_signs[i] = sign_of(e);
        sum_abs += std::abs(e);
    }
    r.alpha2 = a.size() ? sum_abs / static_cast<Real>(a.size()) : Real{0};
    return r;
}

inline Real mse(std::span<const Real> a, std::span<const Real> b) {
    detail::require_shape(a.size() == b.size(), "mse: length mismatch");
    if (a.empty()) return 0;
    Real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Real d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<Real>(a.size());
}

// ---------------------------------------------------------------------------
// Learning propagation binarizer
// ---------------------------------------------------------------------------

struct LpbParams {
    Real theta = 0;
    Real r = 1;

    static constexpr Real kMinRatio = 0.1;
    static constexpr Real kMaxRatio = 2.0;

    void clamp_ratio() noexcept { r = std::clamp(r, kMinRatio, kMaxRatio); }
};

/// +1 where x >= theta, −1 otherwise.
inline Tensor lpb_forward(const Tensor& x, const LpbParams& p) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= p.theta ? Real{1} : Real{-1};
    return out;
}

struct LpbGrads {
    Tensor grad_x;
    Real grad_theta = 0;
    Real grad_r = 0;
};

/// Inside the window |x − theta| <= r the gradient passes with gain r.
/// grad_theta is the negated sum of grad_x; grad_r sums grad_out·(x − theta)
/// over the window (the derivative of the in-window surrogate r·(x − theta)).
inline LpbGrads lpb_backward(const Tensor& grad_out, const Tensor& x, const LpbParams& p) {
    detail::require_shape(grad_out.shape() == x.shape(), "lpb_backward: shape mismatch");
    detail::require(p.r > 0, "lpb_backward: ratio r must be positive");
    LpbGrads g{Tensor(x.shape()), 0, 0};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Real d = x[i] - p.theta;
        if (std::abs(d) <= p.r) {
            g.grad_x[i] = p.r * grad_out[i];
            g.grad_theta -= p.r * grad_out[i];
            g.grad_r += grad_out[i] * d;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Quantizers used inside the network
// ---------------------------------------------------------------------------

/// How a binarized unit treats its activations.
struct ActQuantSpec {
    bool binarize = true;   ///< false: identity (full-precision teacher)
    bool dual = true;       ///< add the second-scale residual term
    bool surrogate = false; ///< emit the differentiable surrogate instead of hard values
};

/// Forward record of one activation quantizer over `groups` equal-sized groups.
struct ActQuantCache {
    ActQuantSpec spec;
    LpbParams lpb;
    std::size_t group_size = 0;
    std::vector<Real> x;              // a − theta
    std::vector<std::uint8_t> flags;  // kPos | kIn | kResPos | kResIn
    std::vector<Real> alpha2;         // one per group

    static constexpr std::uint8_t kPos = 1, kIn = 2, kResPos = 4, kResIn = 8;

    Real first(std::size_t i) const noexcept {
        const Real b1 = (flags[i] & kPos) ? Real{1} : Real{-1};
        return (spec.surrogate && (flags[i] & kIn)) ? lpb.r * x[i] : b1;
    }
    Real residual(std::size_t i) const noexcept { return x[i] - ((flags[i] & kPos) ? Real{1} : Real{-1}); }
    Real second(std::size_t i) const noexcept {
        const Real b2 = (flags[i] & kResPos) ? Real{1} : Real{-1};
        return (spec.surrogate && (flags[i] & kResIn)) ? residual(i) : b2;
    }
};

/// Quantizes `a` in place semantics: writes the value seen downstream into `out`.
/// Groups are contiguous slices of `group_size` elements (one per example).
inline ActQuantCache quantize_activations(std::span<const Real> a, std::size_t group_size,
                                          const LpbParams& lpb, const ActQuantSpec& spec,
                                          std::span<Real> out) {
    detail::require_shape(a.size() == out.size(), "quantize_activations: size mismatch");
    detail::require(group_size > 0 && a.size() % group_size == 0, "quantize_activations: bad group size");
    ActQuantCache c;
    c.spec = spec;
    c.lpb = lpb;
    c.group_size = group_size;
    if (!spec.binarize) {
        std::copy(a.begin(), a.end(), out.begin());
        return c;
    }
    const std::size_t n = a.size();
    c.x.resize(n);
    c.flags.assign(n, 0);
    c.alpha2.assign(n / group_size, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const Real x = a[i] - lpb.theta;
        c.x[i] = x;
        std::uint8_t f = 0;
        if (branch(x >= 0)) f |= ActQuantCache::kPos;
        if (branch(std::abs(x) <= lpb.r)) f |= ActQuantCache::kIn;
        c.flags[i] = f;
    }
    if (spec.dual) {
        for (std::size_t g = 0; g < c.alpha2.size(); ++g) {
            Real sum_abs = 0;
            for (std::size_t i = g * group_size; i < (g + 1) * group_size; ++i) {
                const Real e = c.residual(i);
                const bool pos = branch(e >= 0);
                if (branch(std::abs(e) <= 1)) c.flags[i] |= ActQuantCache::kResIn;
                if (pos) c.flags[i] |= ActQuantCache::kResPos;
                sum_abs += pos ? e : -e;
            }
            c.alpha2[g] = sum_abs / static_cast<Real>(group_size);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        Real v = c.first(i);
        if (spec.dual) v += c.alpha2[i / group_size] * c.second(i);
        out[i] = v;
    }
    return c;
}

struct ActQuantGrads {
    std::vector<Real> grad_a;
    Real grad_theta = 0;
    Real grad_r = 0;
};

inline ActQuantGrads quantize_activations_backward(const ActQuantCache& c, std::span<const Real> grad_out) {
    ActQuantGrads g;
    g.grad_a.assign(grad_out.size(), 0);
    if (!c.spec.binarize) {
        std::copy(grad_out.begin(), grad_out.end(), g.grad_a.begin());
        return g;
    }
    detail::require_shape(grad_out.size() == c.x.size(), "quantize_activations_backward: size mismatch");
    const Real r = c.lpb.r;
    for (std::size_t i = 0; i < grad_out.size(); ++i) {
        if (c.flags[i] & ActQuantCache::kIn) {
            g.grad_a[i] = r * grad_out[i];
            g.grad_r += grad_out[i] * c.x[i];
        }
    }
    if (c.spec.dual) {
        const std::size_t gs = c.group_size;
        const Real inv_n = Real{1} / static_cast<Real>(gs);
        for (std::size_t grp = 0; grp < c.alpha2.size(); ++grp) {
            const Real a2 = c.alpha2[grp];
            Real s = 0;  // dL/dalpha2
            for (std::size_t i = grp * gs; i < (grp + 1) * gs; ++i) s += grad_out[i] * c.second(i);
            for (std::size_t i = grp * gs; i < (grp + 1) * gs; ++i) {
                Real gi = (c.flags[i] & ActQuantCache::kResIn) ? a2 * grad_out[i] : Real{0};
                gi += ((c.flags[i] & ActQuantCache::kResPos) ? s : -s) * inv_n;
                g.grad_a[i] += gi;
            }
        }
    }
    for (Real v : g.grad_a) g.grad_theta -= v;
    return g;
}

/// Sign-binarized weights scaled per row: effective = alpha_row · sign(w).
struct WeightQuantCache {
    bool surrogate = false;
    std::size_t rows = 0, cols = 0;
    std::vector<Real> alpha;
    std::vector<std::uint8_t> flags;  // kPos | kIn
    static constexpr std::uint8_t kPos = 1, kIn = 2;
};

/// Writes alpha_r · sign(w) (or alpha_r · clip(w) in surrogate mode) into `eff`.
inline WeightQuantCache quantize_weights(std::span<const Real> w, std::size_t rows, std::size_t cols,
                                         bool surrogate, std::span<Real> eff) {
    detail::require_shape(w.size() == rows * cols && eff.size() == w.size(), "quantize_weights: size mismatch");
    detail::require(cols > 0, "quantize_weights: empty group");
    WeightQuantCache c;
    c.surrogate = surrogate;
    c.rows = rows;
    c.cols = cols;
    c.alpha.assign(rows, 0);
    c.flags.assign(w.size(), 0);
    for (std::size_t r = 0; r < rows; ++r) {
        Real s = 0;
        for (std::size_t k = r * cols; k < (r + 1) * cols; ++k) {
            const bool pos = branch(w[k] >= 0);
            if (pos) c.flags[k] |= WeightQuantCache::kPos;
            if (branch(std::abs(w[k]) <= 1)) c.flags[k] |= WeightQuantCache::kIn;
            s += pos ? w[k] : -w[k];
        }
        const Real a = s / static_cast<Real>(cols);
        c.alpha[r] = a;
        for (std::size_t k = r * cols; k < (r + 1) * cols; ++k) {
            const bool pos = c.flags[k] & WeightQuantCache::kPos;
            const Real q = (surrogate && (c.flags[k] & WeightQuantCache::kIn)) ? w[k] : (pos ? 1 : -1);
            eff[k] = a * q;
        }
    }
    return c;
}

/// The ±1 matrix recorded by quantize_weights, without the row scales.
inline std::vector<Real> weight_signs(const WeightQuantCache& c) {
    std::vector<Real> s(c.flags.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = (c.flags[i] & WeightQuantCache::kPos) ? Real{1} : Real{-1};
    return s;
}

/// Accumulates dL/dw into grad_w given dL/d(effective weights).
inline void quantize_weights_backward(const WeightQuantCache& c, std::span<const Real> w,
                                      std::span<const Real> grad_eff, std::span<Real> grad_w) {
    const Real inv_n = Real{1} / static_cast<Real>(c.cols);
    for (std::size_t r = 0; r < c.rows; ++r) {
        const Real a = c.alpha[r];
        Real s = 0;  // dL/dalpha_r
        for (std::size_t k = r * c.cols; k < (r + 1) * c.cols; ++k) {
            const bool pos = c.flags[k] & WeightQuantCache::kPos;
            const Real q = (c.surrogate && (c.flags[k] & WeightQuantCache::kIn)) ? w[k] : (pos ? 1 : -1);
            s += grad_eff[k] * q;
        }
        for (std::size_t k = r * c.cols; k < (r + 1) * c.cols; ++k) {
            Real g = (c.flags[k] & WeightQuantCache::kIn) ? a * grad_eff[k] : Real{0};
            g += ((c.flags[k] & WeightQuantCache::kPos) ? s : -s) * inv_n;
            grad_w[k] += g;
        }
    }
}

}  // namespace binspot
